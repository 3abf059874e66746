//! Classifier `f = h ∘ g`, domain discriminator `d`, Adam, and the EMA
//! parameter shadow used for evaluation.

mod checkpoint;
mod model;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedArray, CHECKPOINT_FORMAT};
pub use model::{
    forward_classifier, forward_discriminator, init_params, Activation, Architecture, BoundModel, Classifier,
    ClassifierOutput, Group, MlpSpec, ModelParams, Param, ParamGrads, Weights, DISC_CLAMP,
};
pub use optim::{adam_step, ema_update, AdamConfig};

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::Error;

    fn toy() -> Architecture {
        Architecture::toy(2, 2).unwrap()
    }

    fn random_batch(seed: u64, rows: usize, cols: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_params(&toy(), 5).unwrap();
        let b = init_params(&toy(), 5).unwrap();
        assert_eq!(a, b);
        for p in a.params().iter().filter(|p| p.name.ends_with("bias")) {
            assert!(p.value.data().iter().all(|&v| v == 0.0));
        }
        for p in a.params() {
            assert_eq!(p.value, p.shadow);
        }
    }

    #[test]
    fn he_variance_on_wide_layer() {
        let arch = Architecture::new(256, &[256, 8], 2, &[8]).unwrap();
        let params = init_params(&arch, 1).unwrap();
        let w = &params.params()[0].value;
        assert_eq!(w.shape(), &[256, 256]);
        let n = w.numel() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let target = 2.0 / 256.0;
        assert!((var - target).abs() < 0.2 * target, "variance {var}");
    }

    #[test]
    fn zero_width_layer_is_rejected() {
        assert!(Architecture::new(2, &[0, 4], 2, &[4]).is_err());
        assert!(Architecture::new(2, &[], 2, &[4]).is_err());
    }

    #[test]
    fn partition_is_total_and_disjoint() {
        let params = init_params(&toy(), 0).unwrap();
        let total: usize = Group::ALL.iter().map(|&g| params.group_indices(g).count()).sum();
        assert_eq!(total, params.len());
        assert_eq!(params.group_indices(Group::Head).count(), 2);
    }

    #[test]
    fn probs_rows_sum_to_one() {
        let params = init_params(&toy(), 2).unwrap();
        let (f, _, p) = forward_classifier(&params, Weights::Live, &random_batch(1, 16, 2)).unwrap();
        assert_eq!(f.shape(), &[16, 64]);
        for r in 0..16 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_is_uniform_and_half() {
        let params = ModelParams::zeros(&toy()).unwrap();
        let (f, _, p) = forward_classifier(&params, Weights::Live, &random_batch(3, 4, 2)).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
        let d = forward_discriminator(&params, Weights::Live, &f).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn batch_equals_singletons() {
        let params = init_params(&toy(), 9).unwrap();
        let x = random_batch(4, 2, 2);
        let (_, _, batch) = forward_classifier(&params, Weights::Live, &x).unwrap();
        for r in 0..2 {
            let single = x.select_rows(&[r]);
            let (_, _, p) = forward_classifier(&params, Weights::Live, &single).unwrap();
            for (a, b) in p.row(0).iter().zip(batch.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch_errors() {
        let params = init_params(&toy(), 0).unwrap();
        assert!(forward_classifier(&params, Weights::Live, &random_batch(0, 3, 5)).is_err());
        assert!(forward_discriminator(&params, Weights::Live, &random_batch(0, 3, 5)).is_err());
    }

    #[test]
    fn discriminator_clamps_saturated_logits() {
        let mut params = ModelParams::zeros(&toy()).unwrap();
        let last_bias = params.len() - 1;
        params.params_mut()[last_bias].value = Tensor::vector(vec![500.0]);
        let d = forward_discriminator(&params, Weights::Live, &Tensor::zeros(&[1, 64])).unwrap();
        assert_eq!(d.data()[0], 1.0 - DISC_CLAMP);
        assert!(d.data()[0].ln().is_finite() && (1.0 - d.data()[0]).ln().is_finite());
        params.params_mut()[last_bias].value = Tensor::vector(vec![-500.0]);
        let d = forward_discriminator(&params, Weights::Live, &Tensor::zeros(&[1, 64])).unwrap();
        assert_eq!(d.data()[0], DISC_CLAMP);
    }

    #[test]
    fn discriminator_output_stays_open_interval() {
        let params = init_params(&toy(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let feats = Tensor::new(vec![10_000, 64], (0..640_000).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let d = forward_discriminator(&params, Weights::Live, &feats).unwrap();
        assert!(d.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    fn grads_for(params: &ModelParams, groups: &[Group], value: f64) -> ParamGrads {
        let mut g = ParamGrads::default();
        for &group in groups {
            for i in params.group_indices(group) {
                g.insert(i, Tensor::full(params.params()[i].value.shape(), value));
            }
        }
        g
    }

    #[test]
    fn adam_zero_gradient_leaves_params_and_decays_moments() {
        let mut params = init_params(&toy(), 0).unwrap();
        let before = params.clone();
        for i in params.group_indices(Group::Head).collect::<Vec<_>>() {
            params.params_mut()[i].adam_m = Tensor::full(params.params()[i].value.shape(), 1.0);
        }
        let g = grads_for(&params, &[Group::Head], 0.0);
        adam_step(&mut params, &[Group::Head], &g, &AdamConfig::default(), 1).unwrap();
        for i in params.group_indices(Group::Head) {
            assert_eq!(params.params()[i].adam_m.data()[0], 0.5);
        }
        // m̂ is nonzero here, so compare only the untouched encoder.
        for i in params.group_indices(Group::Encoder) {
            assert_eq!(params.params()[i].value, before.params()[i].value);
        }
        let mut fresh = before.clone();
        adam_step(&mut fresh, &[Group::Head], &g, &AdamConfig::default(), 1).unwrap();
        assert_eq!(fresh, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ModelParams::zeros(&toy()).unwrap();
        let g = grads_for(&params, &[Group::Head], 2.0);
        adam_step(&mut params, &[Group::Head], &g, &AdamConfig::default(), 1).unwrap();
        let i = params.group_indices(Group::Head).next().unwrap();
        let delta = params.params()[i].value.data()[0];
        assert!((delta + 0.001).abs() < 1e-6, "{delta}");
    }

    #[test]
    fn adam_leaves_other_groups_bitwise_unchanged() {
        let mut params = init_params(&toy(), 4).unwrap();
        let before = params.clone();
        let g = grads_for(&params, &[Group::Encoder], 0.3);
        adam_step(&mut params, &[Group::Encoder], &g, &AdamConfig::default(), 1).unwrap();
        for i in params.group_indices(Group::Discriminator).chain(params.group_indices(Group::Head)) {
            assert_eq!(params.params()[i], before.params()[i]);
        }
    }

    #[test]
    fn adam_rejects_cross_group_gradient() {
        let mut params = init_params(&toy(), 4).unwrap();
        let g = grads_for(&params, &[Group::Encoder, Group::Discriminator], 0.3);
        let err = adam_step(&mut params, &[Group::Encoder], &g, &AdamConfig::default(), 1).unwrap_err();
        assert!(matches!(err, Error::GroupLeak { .. }));
        let g = grads_for(&params, &[Group::Encoder], 0.3);
        assert!(adam_step(&mut params, &[Group::Encoder], &g, &AdamConfig::default(), 0).is_err());
    }

    #[test]
    fn ema_examples() {
        let mut params = ModelParams::zeros(&toy()).unwrap();
        for p in params.params_mut() {
            p.value = Tensor::full(p.value.shape(), 1.0);
        }
        ema_update(&mut params, 0.998).unwrap();
        assert!((params.params()[0].shadow.data()[0] - 0.002).abs() < 1e-15);

        ema_update(&mut params, 0.0).unwrap();
        assert_eq!(params.params()[0].shadow, params.params()[0].value);
        assert!(ema_update(&mut params, 1.0).is_err());
    }

    #[test]
    fn ema_contracts_by_momentum_with_frozen_params() {
        let mut params = init_params(&toy(), 8).unwrap();
        for p in params.params_mut() {
            p.shadow = p.value.map(|v| v + 1.0);
        }
        let dist = |p: &ModelParams| {
            p.params().iter().map(|q| q.shadow.max_abs_diff(&q.value)).fold(0.0, f64::max)
        };
        let mut prev = dist(&params);
        for _ in 0..500 {
            let expected: Vec<Vec<f64>> = params
                .params()
                .iter()
                .map(|q| q.shadow.data().iter().zip(q.value.data()).map(|(s, v)| 0.998 * s + (1.0 - 0.998) * v).collect())
                .collect();
            ema_update(&mut params, 0.998).unwrap();
            for (q, e) in params.params().iter().zip(&expected) {
                assert_eq!(q.shadow.data(), e.as_slice());
            }
            let d = dist(&params);
            assert!(d < prev);
            assert!((d / prev - 0.998).abs() < 1e-9);
            prev = d;
        }
    }

    #[test]
    fn bound_model_grads_only_cover_trainable_groups() {
        let params = init_params(&toy(), 3).unwrap();
        let mut tape = Tape::new();
        let model = params.bind(&mut tape, Weights::Live, &[Group::Encoder, Group::Head]);
        let x = tape.constant(random_batch(2, 4, 2));
        let out = model.classify(&mut tape, x).unwrap();
        let d = model.discriminate(&mut tape, out.features).unwrap();
        let s1 = tape.sum(out.probs).unwrap();
        let s2 = tape.sum(d).unwrap();
        let root = tape.add(s1, s2).unwrap();
        let grads = tape.backward(root).unwrap();
        let pg = model.param_grads(&tape, &grads);
        assert_eq!(pg.len(), params.group_indices(Group::Encoder).count() + 2);
        assert!(pg.iter().all(|(i, _)| params.params()[i].group != Group::Discriminator));
    }

    #[test]
    fn checkpoint_roundtrips_bit_exactly() {
        let mut params = init_params(&toy(), 21).unwrap();
        let g = grads_for(&params, &[Group::Encoder], 0.123456789);
        adam_step(&mut params, &[Group::Encoder], &g, &AdamConfig::default(), 1).unwrap();
        ema_update(&mut params, 0.998).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &Checkpoint::new(&params, "abc", ())).unwrap();
        let loaded: Checkpoint = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config_hash, "abc");
        assert_eq!(loaded.params().unwrap(), params);
    }

    #[test]
    fn checkpoint_rejects_other_architecture() {
        let params = init_params(&toy(), 21).unwrap();
        let ckpt = Checkpoint::new(&params, "abc", ());
        let other = Architecture::new(2, &[32, 32], 2, &[32]).unwrap();
        let err = ModelParams::from_arrays(&other, &ckpt.arrays).unwrap_err();
        assert!(err.to_string().contains("[2, 64]"), "{err}");
    }

    proptest! {
        #[test]
        fn arrays_roundtrip_through_json(values in proptest::collection::vec(-1e300f64..1e300, 1..50)) {
            let a = NamedArray { name: "x".into(), shape: vec![values.len()], data: values.clone() };
            let json = serde_json::to_string(&a).unwrap();
            let back: NamedArray = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
