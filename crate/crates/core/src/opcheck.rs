//! Finite-difference checks of every differentiable operation on random
//! small inputs, including a passport layer whose scale and shift are both
//! derived from the weights it convolves with.

use rand::Rng as _;

use crate::error::Result;
use crate::passport::{
    hidden_vars, passport_function, passport_layer_forward, PassportKind, PassportPair, Standardization,
};
use crate::rng::{substream, Rng};
use crate::tensor::{finite_diff_check, Tape, Tensor, Var};

/// Largest accepted relative error.
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// One checked operation: returns the max relative error for a seed.
pub struct GradCase {
    pub name: &'static str,
    pub check: fn(u64) -> Result<f64>,
}

fn uniform(rng: &mut Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..=1.0))
}

/// Values in +-[0.1, 1], away from the ReLU kink.
fn off_kink(rng: &mut Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..=1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn weighted_sum(t: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = t.constant(weights.clone());
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn rng_for(seed: u64, name: &str) -> Rng {
    substream(seed, &format!("opcheck/{name}"))
}

fn conv_input(seed: u64) -> Result<f64> {
    let mut r = rng_for(seed, "conv_input");
    let k = uniform(&mut r, vec![3, 2, 3, 3]);
    let x = uniform(&mut r, vec![2, 2, 5, 5]);
    let w = uniform(&mut r, vec![2, 3, 3, 3]);
    finite_diff_check(
        |t, v| {
            let kv = t.constant(k.clone());
            let y = t.conv2d(v, kv, 2, 1)?;
            weighted_sum(t, y, &w)
        },
        &x,
        STEP,
    )
}

fn conv_kernel(seed: u64) -> Result<f64> {
    let mut r = rng_for(seed, "conv_kernel");
    let k = uniform(&mut r, vec![3, 2, 4, 4]);
    let x = uniform(&mut r, vec![2, 2, 6, 6]);
    let w = uniform(&mut r, vec![2, 3, 3, 3]);
    finite_diff_check(
        |t, v| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, v, 2, 1)?;
            weighted_sum(t, y, &w)
        },
        &k,
        STEP,
    )
}

fn dense_case(seed: u64, which: usize) -> Result<f64> {
    let mut r = rng_for(seed, &format!("dense/{which}"));
    let args = [
        uniform(&mut r, vec![3, 4]),
        uniform(&mut r, vec![5, 4]),
        uniform(&mut r, vec![5]),
    ];
    let w = uniform(&mut r, vec![3, 5]);
    finite_diff_check(
        |t, v| {
            let vars: Vec<Var> = (0..3)
                .map(|i| if i == which { v } else { t.constant(args[i].clone()) })
                .collect();
            let y = t.dense(vars[0], vars[1], vars[2])?;
            weighted_sum(t, y, &w)
        },
        &args[which],
        STEP,
    )
}

fn relu(seed: u64) -> Result<f64> {
    let mut r = rng_for(seed, "relu");
    let x = off_kink(&mut r, vec![2, 3, 2, 2]);
    let w = uniform(&mut r, vec![2, 3, 2, 2]);
    finite_diff_check(
        |t, v| {
            let y = t.relu(v);
            weighted_sum(t, y, &w)
        },
        &x,
        STEP,
    )
}

fn global_avg_pool(seed: u64) -> Result<f64> {
    let mut r = rng_for(seed, "gap");
    let x = uniform(&mut r, vec![2, 3, 3, 3]);
    let w = uniform(&mut r, vec![2, 3]);
    finite_diff_check(
        |t, v| {
            let y = t.global_avg_pool(v)?;
            weighted_sum(t, y, &w)
        },
        &x,
        STEP,
    )
}

fn cross_entropy(seed: u64) -> Result<f64> {
    let mut r = rng_for(seed, "xent");
    let x = uniform(&mut r, vec![3, 4]).map(|v| 3.0 * v);
    let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
    finite_diff_check(|t, v| t.cross_entropy(v, &labels), &x, STEP)
}

fn elementwise(seed: u64, op: &str) -> Result<f64> {
    let mut r = rng_for(seed, &format!("elementwise/{op}"));
    let x = uniform(&mut r, vec![2, 3, 2]);
    let other = uniform(&mut r, vec![2, 3, 2]);
    let w = uniform(&mut r, vec![2, 3, 2]);
    let factor = r.random_range(-2.0..=2.0);
    finite_diff_check(
        |t, v| {
            let o = t.constant(other.clone());
            let y = match op {
                "add" => t.add(v, o)?,
                "mul" => t.mul(v, o)?,
                "square" => t.mul(v, v)?,
                "scale" => t.scale(v, factor),
                _ => t.reshape(v, vec![3, 4])?,
            };
            let y = if op == "reshape" {
                t.reshape(y, vec![2, 3, 2])?
            } else {
                y
            };
            weighted_sum(t, y, &w)
        },
        &x,
        STEP,
    )
}

fn sum(seed: u64) -> Result<f64> {
    let mut r = rng_for(seed, "sum");
    let x = uniform(&mut r, vec![4, 3]);
    finite_diff_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        },
        &x,
        STEP,
    )
}

fn channel_affine(seed: u64, which: usize) -> Result<f64> {
    let mut r = rng_for(seed, &format!("affine/{which}"));
    let args = [
        uniform(&mut r, vec![2, 3, 2, 2]),
        uniform(&mut r, vec![3]),
        uniform(&mut r, vec![3]),
    ];
    let w = uniform(&mut r, vec![2, 3, 2, 2]);
    finite_diff_check(
        |t, v| {
            let vars: Vec<Var> = (0..3)
                .map(|i| if i == which { v } else { t.constant(args[i].clone()) })
                .collect();
            let y = t.channel_affine(vars[0], vars[1], vars[2])?;
            weighted_sum(t, y, &w)
        },
        &args[which],
        STEP,
    )
}

fn batch_standardize(seed: u64) -> Result<f64> {
    let mut r = rng_for(seed, "batch_standardize");
    let x = uniform(&mut r, vec![3, 2, 2, 2]);
    let w = uniform(&mut r, vec![3, 2, 2, 2]);
    finite_diff_check(
        |t, v| {
            let (y, _) = t.batch_standardize(v, 1e-5)?;
            weighted_sum(t, y, &w)
        },
        &x,
        STEP,
    )
}

fn standardize(seed: u64) -> Result<f64> {
    let mut r = rng_for(seed, "standardize");
    let x = uniform(&mut r, vec![2, 3, 2, 2]);
    let w = uniform(&mut r, vec![2, 3, 2, 2]);
    let mean: Vec<f64> = (0..3).map(|_| r.random_range(-0.5..=0.5)).collect();
    let var: Vec<f64> = (0..3).map(|_| r.random_range(0.2..=2.0)).collect();
    finite_diff_check(
        |t, v| {
            let y = t.standardize(v, &mean, &var, 1e-5)?;
            weighted_sum(t, y, &w)
        },
        &x,
        STEP,
    )
}

fn passport_fn_weight(seed: u64) -> Result<f64> {
    let mut r = rng_for(seed, "passport_fn");
    let weight = uniform(&mut r, vec![3, 2, 3, 3]);
    let p = uniform(&mut r, vec![1, 2, 4, 4]);
    let w = uniform(&mut r, vec![3]);
    finite_diff_check(
        |t, v| {
            let pv = t.constant(p.clone());
            let y = passport_function(t, v, pv, 1, 1)?;
            weighted_sum(t, y, &w)
        },
        &weight,
        STEP,
    )
}

/// Conv, batch standardization and a passport affine whose scale and shift
/// are both derived from the conv weight, differentiated w.r.t. the weight
/// (`wrt_weight`) or the input.
fn v3_layer(seed: u64, wrt_weight: bool) -> Result<f64> {
    let mut r = rng_for(seed, &format!("v3_layer/{wrt_weight}"));
    let weight = uniform(&mut r, vec![3, 2, 3, 3]);
    let x = uniform(&mut r, vec![3, 2, 4, 4]);
    let pair = PassportPair {
        gamma: Some(uniform(&mut r, vec![1, 2, 4, 4]).cast()),
        beta: Some(uniform(&mut r, vec![1, 2, 4, 4]).cast()),
    };
    let w = uniform(&mut r, vec![3, 3, 4, 4]);
    let f = |t: &mut Tape<f64>, v: Var| -> Result<Var> {
        let (wv, xv) = if wrt_weight {
            (v, t.constant(x.clone()))
        } else {
            (t.constant(weight.clone()), v)
        };
        let y = t.conv2d(xv, wv, 1, 1)?;
        let (g, b) = hidden_vars(t, PassportKind::V3, wv, None, None, &pair, 1, 1)?;
        let out = passport_layer_forward(t, y, g, b, Standardization::Batch)?;
        weighted_sum(t, out.output, &w)
    };
    finite_diff_check(f, if wrt_weight { &weight } else { &x }, STEP)
}

/// Every differentiable operation, each with its own random inputs.
pub fn op_suite() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "conv2d/input",
            check: conv_input,
        },
        GradCase {
            name: "conv2d/kernel",
            check: conv_kernel,
        },
        GradCase {
            name: "dense/input",
            check: |s| dense_case(s, 0),
        },
        GradCase {
            name: "dense/weight",
            check: |s| dense_case(s, 1),
        },
        GradCase {
            name: "dense/bias",
            check: |s| dense_case(s, 2),
        },
        GradCase {
            name: "relu",
            check: relu,
        },
        GradCase {
            name: "global_avg_pool",
            check: global_avg_pool,
        },
        GradCase {
            name: "cross_entropy",
            check: cross_entropy,
        },
        GradCase {
            name: "add",
            check: |s| elementwise(s, "add"),
        },
        GradCase {
            name: "mul",
            check: |s| elementwise(s, "mul"),
        },
        GradCase {
            name: "mul/same_operand",
            check: |s| elementwise(s, "square"),
        },
        GradCase {
            name: "scale",
            check: |s| elementwise(s, "scale"),
        },
        GradCase {
            name: "reshape",
            check: |s| elementwise(s, "reshape"),
        },
        GradCase {
            name: "sum",
            check: sum,
        },
        GradCase {
            name: "channel_affine/input",
            check: |s| channel_affine(s, 0),
        },
        GradCase {
            name: "channel_affine/gamma",
            check: |s| channel_affine(s, 1),
        },
        GradCase {
            name: "channel_affine/beta",
            check: |s| channel_affine(s, 2),
        },
        GradCase {
            name: "batch_standardize",
            check: batch_standardize,
        },
        GradCase {
            name: "standardize",
            check: standardize,
        },
        GradCase {
            name: "passport_function/weight",
            check: passport_fn_weight,
        },
        GradCase {
            name: "v3_passport_layer/weight",
            check: |s| v3_layer(s, true),
        },
        GradCase {
            name: "v3_passport_layer/input",
            check: |s| v3_layer(s, false),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_for_a_fixed_seed() {
        for case in op_suite() {
            let err = (case.check)(11).unwrap();
            assert!(err < MAX_REL_ERROR, "{}: {err}", case.name);
        }
    }
}
