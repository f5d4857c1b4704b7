//! Randomized invariants across tensor ops, passports, persistence and metrics.

use nnpp_core::model::{Model, ModelConfig};
use nnpp_core::opcheck::{op_suite, MAX_REL_ERROR};
use nnpp_core::passgen::{gen_random_pattern, guess_space_size, perturb_passport, perturbed_indices, PassportSet};
use nnpp_core::passport::{derive_hidden_params, passport_function, PassportKind};
use nnpp_core::persist::{Container, Entry};
use nnpp_core::rng::substream;
use nnpp_core::tensor::{Tape, Tensor};
use nnpp_core::verify::{compute_inconsistency, Histogram, MetricsRecord, IDENTITY_TOLERANCE};
use num_bigint::BigUint;
use proptest::prelude::*;
use rand::Rng as _;

fn random_tensor(seed: u64, label: &str, shape: Vec<usize>) -> Tensor<f64> {
    let mut rng = substream(seed, label);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..=1.0))
}

fn conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, padding: usize) -> Tensor<f64> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k.clone());
    let y = tape.conv2d(xv, kv, stride, padding).unwrap();
    tape.value(y).clone()
}

fn small_model(kind: PassportKind) -> Model {
    let mut cfg = ModelConfig::mini_net(1, 8, 3, Some(kind));
    cfg.widths = vec![4, 6];
    Model::new(cfg).unwrap()
}

fn passport_for(kind: PassportKind, seed: u64) -> (Model, PassportSet) {
    let mut m = small_model(kind);
    m.init_he(seed);
    let p = gen_random_pattern(&m, seed ^ 0x5a5a).unwrap();
    (m, p)
}

fn kind_strategy() -> impl Strategy<Value = PassportKind> {
    prop::sample::select(PassportKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_its_input(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0,
                                   stride in 1usize..3, padding in 0usize..2) {
        let x = random_tensor(seed, "x", vec![2, 2, 5, 5]);
        let y = random_tensor(seed, "y", vec![2, 2, 5, 5]);
        let k = random_tensor(seed, "k", vec![3, 2, 3, 3]);
        let mixed = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
        ).unwrap();
        let lhs = conv(&mixed, &k, stride, padding);
        let cx = conv(&x, &k, stride, padding);
        let cy = conv(&y, &k, stride, padding);
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-6);
        }
    }

    #[test]
    fn passport_function_scales_with_the_passport(seed in any::<u64>(), a in -4.0f64..4.0) {
        let w = random_tensor(seed, "w", vec![4, 3, 3, 3]);
        let p = random_tensor(seed, "p", vec![1, 3, 6, 6]);
        let eval = |p: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let wv = tape.constant(w.clone());
            let pv = tape.constant(p.clone());
            let g = passport_function(&mut tape, wv, pv, 1, 1).unwrap();
            tape.value(g).clone()
        };
        let base = eval(&p);
        let scaled = eval(&p.map(|v| a * v));
        for (s, g) in scaled.data().iter().zip(base.data()) {
            prop_assert!((s - a * g).abs() < 1e-6);
        }
    }

    #[test]
    fn hidden_params_recompute_identically(kind in kind_strategy(), seed in any::<u64>()) {
        let (m, p) = passport_for(kind, seed);
        let first = m.hidden_params(Some(&p)).unwrap();
        prop_assert_eq!(&first, &m.hidden_params(Some(&p)).unwrap());
        let unit = m.slot_units()[0];
        let direct = derive_hidden_params(
            kind,
            m.param(&unit.weight_name()).unwrap(),
            unit.has_trainable_gamma().then(|| m.param(&unit.gamma_name()).unwrap()),
            unit.has_trainable_beta().then(|| m.param(&unit.beta_name()).unwrap()),
            &p.entries[0].pair(),
            unit.conv.stride,
            unit.conv.padding,
        ).unwrap();
        prop_assert_eq!(&first[0], &direct);
    }

    #[test]
    fn random_passports_differ_from_the_trained_one(seed in any::<u64>()) {
        let (m, p) = passport_for(PassportKind::V3, seed);
        let q = gen_random_pattern(&m, seed.wrapping_add(1) ^ 0x5a5a).unwrap();
        let a = m.hidden_params(Some(&p)).unwrap();
        let b = m.hidden_params(Some(&q)).unwrap();
        prop_assert!(a.iter().zip(&b).any(|(x, y)| x.gamma != y.gamma));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn every_op_gradient_matches_finite_differences(seed in any::<u64>()) {
        for case in op_suite() {
            let err = (case.check)(seed).unwrap();
            prop_assert!(err < MAX_REL_ERROR, "{} at seed {}: {}", case.name, seed, err);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbation_count_is_exact_and_monotone(len in 1usize..2000, c1 in 0.0f64..=1.0, c2 in 0.0f64..=1.0,
                                                seed in any::<u64>()) {
        let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
        let a = perturbed_indices(len, lo, &mut substream(seed, "a"));
        let b = perturbed_indices(len, hi, &mut substream(seed, "b"));
        prop_assert_eq!(a.len(), (lo * len as f64).round() as usize);
        prop_assert!(a.len() <= b.len());
        let mut uniq = b.clone();
        uniq.sort_unstable();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), b.len());
        prop_assert!(b.iter().all(|&i| i < len));
    }

    #[test]
    fn perturbed_passport_changes_exactly_the_counted_elements(kind in kind_strategy(), c in 0.0f64..=1.0,
                                                               seed in any::<u64>()) {
        let (_, p) = passport_for(kind, seed);
        let q = perturb_passport(&p, c, seed ^ 1).unwrap();
        for (e, f) in p.entries.iter().zip(&q.entries) {
            for (x, y) in [(&e.gamma, &f.gamma), (&e.beta, &f.beta)] {
                let (Some(x), Some(y)) = (x, y) else {
                    prop_assert_eq!(x.is_none(), y.is_none());
                    continue;
                };
                let changed = x.data().iter().zip(y.data()).filter(|(a, b)| a != b).count();
                prop_assert!(changed <= (c * x.len() as f64).round() as usize);
            }
        }
        if c == 0.0 {
            prop_assert_eq!(&p, &q);
        }
    }

    #[test]
    fn container_round_trip_is_lossless(names in prop::collection::btree_set("[a-z_.]{1,12}", 1..6),
                                        seed in any::<u64>()) {
        let mut c = Container::new();
        for (i, name) in names.iter().enumerate() {
            if i % 3 == 2 {
                c.insert_text(name.clone(), format!("text {i} {seed}")).unwrap();
            } else {
                let t = random_tensor(seed, name, vec![i + 1, 2]).cast::<f32>();
                c.insert(name.clone(), Entry::Tensor(t)).unwrap();
            }
        }
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn passport_set_round_trip_is_bit_exact(kind in kind_strategy(), seed in any::<u64>()) {
        let (_, p) = passport_for(kind, seed);
        let back = PassportSet::from_container(&p.to_container().unwrap()).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.content_hash().unwrap(), p.content_hash().unwrap());
    }

    #[test]
    fn metric_identities_hold(a_o in 0.0f64..=100.0, a_p in 0.0f64..=100.0,
                              attacked in prop::collection::vec(0.0f64..=100.0, 1..50)) {
        let m = MetricsRecord::new(a_o, a_p, &attacked).unwrap();
        prop_assert_eq!(m.inconsistency, compute_inconsistency(a_o, a_p).unwrap());
        prop_assert!((m.inconsistency - (a_o - a_p)).abs() <= IDENTITY_TOLERANCE);
        let mean_attacked = attacked.iter().sum::<f64>() / attacked.len() as f64;
        prop_assert!((m.strength_mean - (a_p - mean_attacked)).abs() <= 1e-9);
        prop_assert!(m.identity_error() <= IDENTITY_TOLERANCE);
        prop_assert_eq!(m.count, attacked.len());
    }

    #[test]
    fn histogram_counts_every_sample_once(samples in prop::collection::vec(0.0f64..=100.0, 1..300),
                                          width in 0.5f64..25.0) {
        let h = Histogram::new(&samples, width).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<usize>(), samples.len());
        for &s in &samples {
            let hit = (0..h.counts.len()).any(|i| {
                let (l, r) = h.bin_edges(i);
                l <= s && (s < r || (i + 1 == h.counts.len() && s <= r))
            });
            prop_assert!(hit);
        }
    }

    #[test]
    fn guess_space_matches_integer_power(n in 1u64..=40, l in 1u32..=20) {
        let exact = (n as u128).checked_pow(l).unwrap();
        prop_assert_eq!(guess_space_size(n, l).unwrap(), BigUint::from(exact));
    }
}
