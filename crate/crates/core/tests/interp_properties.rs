use matcomp_core::data::DataConfig;
use matcomp_core::interp::{
    apply_intervention, evaluation_batch, fit_ridge, permute_positions, random_permutation, record_attention,
    switch_weights, InterventionSpec, MaskMode,
};
use matcomp_core::model::{init_model, Component, HeadId, ModelConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn inverse(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permuting_then_inverting_positions_is_identity(seed in 0u64..10_000, n in 2usize..5) {
        let w = init_model::<f64>(&ModelConfig::new(n, 1, 2, 8), seed).unwrap();
        let p = random_permutation(n * n, seed);
        let back = permute_positions(&permute_positions(&w, &p).unwrap(), &inverse(&p)).unwrap();
        prop_assert_eq!(back, w);
    }

    #[test]
    fn switching_twice_restores_both_models(a in 0u64..1000, b in 1000u64..2000, pick in 0usize..5) {
        let cfg = ModelConfig::new(3, 2, 2, 8);
        let (wa, wb) = (init_model::<f64>(&cfg, a).unwrap(), init_model::<f64>(&cfg, b).unwrap());
        let comps = [Component::ALL[pick]];
        let hybrid = switch_weights(&wa, &wb, &comps).unwrap();
        prop_assert_ne!(&hybrid, &wa);
        prop_assert_eq!(switch_weights(&hybrid, &wa, &comps).unwrap(), wa);
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..1000, samples in 1usize..6) {
        let w = init_model::<f64>(&ModelConfig::new(3, 2, 2, 8), seed).unwrap();
        let s = record_attention(&w, &DataConfig::low_rank(3, 1, 0.3), samples, &MaskMode::Random, seed).unwrap();
        for l in 0..2 {
            for h in 0..2 {
                for row in s.map(HeadId::new(l, h)).chunks(9) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    prop_assert!(row.iter().all(|&p| p >= 0.0));
                }
            }
        }
    }

    #[test]
    fn ablating_every_head_twice_is_idempotent(seed in 0u64..1000) {
        let w = init_model::<f64>(&ModelConfig::new(3, 2, 2, 8), seed).unwrap();
        let batch = evaluation_batch(&DataConfig::low_rank(3, 1, 0.3), 4, None, seed).unwrap();
        let spec = InterventionSpec::UniformAblation { heads: HeadId::all(2, 2) };
        let a = apply_intervention(&w, &batch, &spec).unwrap();
        let b = apply_intervention(&w, &batch, &spec).unwrap();
        prop_assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn ridge_bias_absorbs_target_shift(seed in 0u64..1000, shift in -5.0f64..5.0) {
        let x = DMatrix::from_fn(40, 3, |r, c| ((r * 7 + c * 3 + seed as usize) % 11) as f64 / 11.0 - 0.5);
        let y = DMatrix::from_fn(40, 2, |r, c| x[(r, c)] * 2.0 - x[(r, 2)]);
        let base = fit_ridge(&x, &y, 1e-3).unwrap();
        let shifted = fit_ridge(&x, &y.add_scalar(shift), 1e-3).unwrap();
        prop_assert!((&base.weights - &shifted.weights).abs().max() < 1e-9);
        for (b, s) in base.bias.iter().zip(shifted.bias.iter()) {
            prop_assert!((s - b - shift).abs() < 1e-9);
        }
    }
}
