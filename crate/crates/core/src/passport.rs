//! Passport-conditioned normalization.
//!
//! A passport layer applies `gamma * x + beta` per channel after the bound
//! convolution. Depending on the [`PassportKind`], `gamma` and/or `beta` are
//! not stored anywhere: they are the channel-wise spatial mean of the bound
//! convolution applied to a passport tensor, recomputed on every forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Which of scale and shift are derived from the passport.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassportKind {
    /// Scale derived, shift trainable.
    V1,
    /// Scale trainable, shift derived.
    V2,
    /// Both derived.
    V3,
}

impl PassportKind {
    pub const ALL: [PassportKind; 3] = [PassportKind::V1, PassportKind::V2, PassportKind::V3];

    pub fn derives_gamma(self) -> bool {
        matches!(self, PassportKind::V1 | PassportKind::V3)
    }

    pub fn derives_beta(self) -> bool {
        matches!(self, PassportKind::V2 | PassportKind::V3)
    }

    pub fn name(self) -> &'static str {
        match self {
            PassportKind::V1 => "v1",
            PassportKind::V2 => "v2",
            PassportKind::V3 => "v3",
        }
    }
}

impl std::fmt::Display for PassportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PassportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(PassportKind::V1),
            "v2" => Ok(PassportKind::V2),
            "v3" => Ok(PassportKind::V3),
            _ => Err(Error::Config(format!("unknown passport kind {s:?}"))),
        }
    }
}

/// Passport tensors for one layer. Only the components the layer derives
/// are required.
#[derive(Debug, Clone, PartialEq)]
pub struct PassportPair {
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
}

/// Scale and shift actually applied by a passport layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Mean over spatial positions of `conv2d(passport, weight)`, one value per
/// output channel.
pub fn passport_function<T: Real>(
    tape: &mut Tape<T>,
    weight: Var,
    passport: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let ps = tape.value(passport).shape();
    if ps.len() != 4 || ps[0] != 1 {
        return Err(shape_err(format!("passport must have shape [1, C, H, W], got {ps:?}")));
    }
    let cout = tape.value(weight).shape()[0];
    let y = tape.conv2d(passport, weight, stride, padding)?;
    let pooled = tape.global_avg_pool(y)?;
    tape.reshape(pooled, vec![cout])
}

/// Scale and shift vars for one passport layer.
///
/// Derived components come from `passport`; the others must be supplied as
/// trainable vars.
#[allow(clippy::too_many_arguments)]
pub fn hidden_vars<T: Real>(
    tape: &mut Tape<T>,
    kind: PassportKind,
    weight: Var,
    trainable_gamma: Option<Var>,
    trainable_beta: Option<Var>,
    passport: &PassportPair,
    stride: usize,
    padding: usize,
) -> Result<(Var, Var)> {
    let mut component = |derived: bool, trainable: Option<Var>, p: Option<&Tensor>, what: &str| -> Result<Var> {
        if derived {
            let p = p.ok_or_else(|| Error::Passport(format!("passport has no {what} component")))?;
            let pv = tape.constant(p.cast());
            passport_function(tape, weight, pv, stride, padding)
        } else {
            trainable.ok_or_else(|| Error::Passport(format!("layer has no trainable {what}")))
        }
    };
    let g = component(kind.derives_gamma(), trainable_gamma, passport.gamma.as_ref(), "gamma")?;
    let b = component(kind.derives_beta(), trainable_beta, passport.beta.as_ref(), "beta")?;
    Ok((g, b))
}

/// Evaluates the hidden parameters of one layer without recording gradients.
pub fn derive_hidden_params(
    kind: PassportKind,
    weight: &Tensor,
    trainable_gamma: Option<&Tensor>,
    trainable_beta: Option<&Tensor>,
    passport: &PassportPair,
    stride: usize,
    padding: usize,
) -> Result<HiddenParams> {
    let mut tape = Tape::<f32>::new();
    let w = tape.constant(weight.clone());
    let tg = trainable_gamma.map(|t| tape.constant(t.clone()));
    let tb = trainable_beta.map(|t| tape.constant(t.clone()));
    let (g, b) = hidden_vars(&mut tape, kind, w, tg, tb, passport, stride, padding)?;
    Ok(HiddenParams {
        gamma: tape.value(g).clone(),
        beta: tape.value(b).clone(),
    })
}

/// Per-channel standardization applied before the affine transform.
pub enum Standardization<'a, T> {
    None,
    /// Statistics of the current batch.
    Batch,
    /// Fixed running statistics.
    Running {
        mean: &'a [T],
        var: &'a [T],
    },
}

pub const NORM_EPS: f64 = 1e-5;

/// Output of [`passport_layer_forward`].
pub struct LayerOutput<T> {
    pub output: Var,
    /// Present when batch statistics were used.
    pub batch_stats: Option<crate::tensor::BatchStats<T>>,
}

/// Optionally standardizes `x` per channel, then applies `gamma * x + beta`.
pub fn passport_layer_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    standardization: Standardization<'_, T>,
) -> Result<LayerOutput<T>> {
    let c = tape.value(gamma).len();
    let xs = tape.value(x).shape();
    if xs.len() < 2 || xs[1] != c {
        return Err(shape_err(format!(
            "passport layer with {c} channels applied to input {xs:?}"
        )));
    }
    let eps = T::from_f64(NORM_EPS);
    let (xhat, batch_stats) = match standardization {
        Standardization::None => (x, None),
        Standardization::Batch => {
            let (v, s) = tape.batch_standardize(x, eps)?;
            (v, Some(s))
        }
        Standardization::Running { mean, var } => (tape.standardize(x, mean, var, eps)?, None),
    };
    let output = tape.channel_affine(xhat, gamma, beta)?;
    Ok(LayerOutput { output, batch_stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    fn pf(weight: Tensor, passport: Tensor, pad: usize) -> Vec<f32> {
        let mut tape = Tape::<f32>::new();
        let w = tape.constant(weight);
        let p = tape.constant(passport);
        let out = passport_function(&mut tape, w, p, 1, pad).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn passport_function_examples() {
        assert_eq!(
            pf(t(vec![1, 1, 1, 1], vec![2.0]), Tensor::full(vec![1, 1, 2, 2], 1.0), 0),
            vec![2.0]
        );
        assert_eq!(
            pf(t(vec![1, 1, 1, 1], vec![2.0]), Tensor::zeros(vec![1, 1, 2, 2]), 0),
            vec![0.0]
        );
        assert_eq!(
            pf(
                t(vec![2, 1, 1, 1], vec![1.0, -1.0]),
                Tensor::full(vec![1, 1, 3, 3], 1.0),
                0
            ),
            vec![1.0, -1.0]
        );
    }

    #[test]
    fn passport_function_rejects_bad_shapes() {
        let mut tape = Tape::<f32>::new();
        let w = tape.constant(Tensor::zeros(vec![2, 3, 1, 1]));
        let p = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        assert!(matches!(passport_function(&mut tape, w, p, 1, 0), Err(Error::Shape(_))));
        let p = tape.constant(Tensor::zeros(vec![2, 3, 4, 4]));
        assert!(matches!(passport_function(&mut tape, w, p, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn kinds_derive_the_right_components() {
        assert!(PassportKind::V1.derives_gamma() && !PassportKind::V1.derives_beta());
        assert!(!PassportKind::V2.derives_gamma() && PassportKind::V2.derives_beta());
        assert!(PassportKind::V3.derives_gamma() && PassportKind::V3.derives_beta());
        assert_eq!("V2".parse::<PassportKind>().unwrap(), PassportKind::V2);
    }

    #[test]
    fn v1_beta_is_the_trainable_value_regardless_of_passport() {
        let w = t(vec![2, 1, 1, 1], vec![1.0, 3.0]);
        let beta = t(vec![2], vec![0.25, -4.0]);
        for fill in [0.0, 1.0, -7.0] {
            let pair = PassportPair {
                gamma: Some(Tensor::full(vec![1, 1, 2, 2], fill)),
                beta: None,
            };
            let h = derive_hidden_params(PassportKind::V1, &w, None, Some(&beta), &pair, 1, 0).unwrap();
            assert_eq!(h.beta, beta);
            assert_eq!(h.gamma.data(), &[fill, 3.0 * fill]);
        }
    }

    #[test]
    fn missing_component_is_a_passport_error() {
        let w = t(vec![1, 1, 1, 1], vec![1.0]);
        let pair = PassportPair {
            gamma: Some(Tensor::zeros(vec![1, 1, 2, 2])),
            beta: None,
        };
        let r = derive_hidden_params(PassportKind::V3, &w, None, None, &pair, 1, 0);
        assert!(matches!(r, Err(Error::Passport(_))));
    }

    fn layer(x: Tensor, g: Vec<f32>, b: Vec<f32>, standardize: bool) -> Vec<f32> {
        let mut tape = Tape::<f32>::new();
        let c = g.len();
        let xv = tape.constant(x);
        let gv = tape.constant(t(vec![c], g));
        let bv = tape.constant(t(vec![c], b));
        let s = if standardize {
            Standardization::Batch
        } else {
            Standardization::None
        };
        let out = passport_layer_forward(&mut tape, xv, gv, bv, s).unwrap();
        tape.value(out.output).data().to_vec()
    }

    #[test]
    fn layer_forward_examples() {
        let x = t(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.5, 0.0]);
        assert_eq!(layer(x.clone(), vec![1.0], vec![0.0], false), x.data());
        assert_eq!(
            layer(t(vec![1, 1, 1, 1], vec![0.5]), vec![2.0], vec![-1.0], false),
            vec![0.0]
        );
        assert_eq!(
            layer(Tensor::full(vec![2, 1, 2, 2], 3.0), vec![5.0], vec![0.75], true),
            vec![0.75; 8]
        );
    }

    #[test]
    fn layer_forward_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 2, 2]));
        let g = tape.constant(Tensor::zeros(vec![3]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        assert!(matches!(
            passport_layer_forward(&mut tape, x, g, b, Standardization::None),
            Err(Error::Shape(_))
        ));
    }
}
