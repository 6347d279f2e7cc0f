use matcomp_core::data::{
    round2, sample_batch, sample_mask, sample_matrix, DataConfig, EntryDistribution, Tokenizer, MASK_TOKEN,
};
use proptest::prelude::*;

#[test]
fn uniform_rank_r_entries_have_variance_r_over_nine() {
    // Var(sum_k u_k v_k) = r * E[u^2] E[v^2] = r / 9 for Unif[-1, 1].
    for rank in [1usize, 2, 3] {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for seed in 0..10_000u64 {
            let x = sample_matrix(7, rank, EntryDistribution::uniform(), seed).unwrap();
            // One entry per draw keeps samples independent.
            let v = x.raw[(seed as usize) % 49];
            sum += v;
            sum_sq += v * v;
            count += 1;
        }
        let mean = sum / count as f64;
        let var = sum_sq / count as f64 - mean * mean;
        let target = rank as f64 / 9.0;
        assert!(mean.abs() < 4.0 * (target / count as f64).sqrt(), "rank {rank}: mean {mean}");
        assert!((var / target - 1.0).abs() < 0.05, "rank {rank}: var {var} vs {target}");
    }
}

#[test]
fn pooled_variance_converges_at_1e5_entries() {
    let cfg = DataConfig::low_rank(10, 2, 0.0);
    let batch = sample_batch(&cfg, 1000, 3, 0).unwrap();
    let values = batch.targets();
    assert_eq!(values.len(), 100_000);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    assert!((var / (2.0 / 9.0) - 1.0).abs() < 0.05, "var {var}");
}

#[test]
fn masked_fraction_within_three_binomial_sigmas() {
    let p = 0.3;
    let trials = 512 * 49;
    let masked: usize = (0..512u64).map(|s| sample_mask(7, p, s).unwrap().masked_count()).sum();
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    let expected = trials as f64 * p;
    assert!((masked as f64 - expected).abs() <= 3.0 * sigma, "{masked} vs {expected} ± {sigma}");
}

#[test]
fn batch_masks_follow_p_mask() {
    let cfg = DataConfig::low_rank(7, 2, 0.3);
    let batch = sample_batch(&cfg, 512, 17, 1).unwrap();
    let trials = (batch.len() * 49) as f64;
    let sigma = (trials * 0.3 * 0.7).sqrt();
    assert!((batch.masked_token_count() as f64 - 0.3 * trials).abs() <= 3.0 * sigma);
}

proptest! {
    #[test]
    fn tokenize_round_trip_is_round2(v in -10.0f64..=10.0) {
        let t = Tokenizer;
        let id = t.encode(v).unwrap();
        prop_assert!(id != MASK_TOKEN);
        prop_assert_eq!(t.decode(id).unwrap(), round2(v));
    }
}
