use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tokenizer::{round2, Tokenizer};
use super::DataError;

/// Generator for one `(seed, stream)` pair. Training step `k` of a run with
/// seed `s` draws its batch from stream `k`, so any step can be regenerated
/// without replaying the ones before it.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Distribution of the entries of the factors `U`, `V`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntryDistribution {
    Uniform { low: f64, high: f64 },
    /// Parameterized by mean and standard deviation.
    Normal { mean: f64, std: f64 },
    /// Parameterized by mean and scale.
    Laplace { mean: f64, scale: f64 },
}

impl Default for EntryDistribution {
    fn default() -> Self {
        Self::uniform()
    }
}

impl EntryDistribution {
    pub fn uniform() -> Self {
        Self::Uniform {
            low: -1.0,
            high: 1.0,
        }
    }

    pub fn normal(mean: f64, std: f64) -> Self {
        Self::Normal { mean, std }
    }

    pub fn laplace(mean: f64, scale: f64) -> Self {
        Self::Laplace { mean, scale }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Uniform { low, high } => rng.random_range(low..high),
            Self::Normal { mean, std } => Normal::new(mean, std)
                .expect("std must be finite and non-negative")
                .sample(rng),
            Self::Laplace { mean, scale } => {
                // Inverse CDF on u in (-1/2, 1/2).
                let u: f64 = rng.random::<f64>() - 0.5;
                mean - scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
            }
        }
    }

    /// Variance of a single factor entry.
    pub fn variance(&self) -> f64 {
        match *self {
            Self::Uniform { low, high } => (high - low).powi(2) / 12.0,
            Self::Normal { std, .. } => std * std,
            Self::Laplace { scale, .. } => 2.0 * scale * scale,
        }
    }
}

/// How ground-truth matrices are produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatrixFamily {
    /// `X = U V^T` with `U, V` of shape `n x rank`.
    LowRank {
        rank: usize,
        entries: EntryDistribution,
    },
    /// Every entry of `X` drawn independently (no low-rank structure).
    Unconstrained { entries: EntryDistribution },
}

impl MatrixFamily {
    pub fn low_rank(rank: usize) -> Self {
        Self::LowRank {
            rank,
            entries: EntryDistribution::uniform(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<GroundTruthMatrix, DataError> {
        match *self {
            Self::LowRank { rank, entries } => sample_matrix_with(n, rank, entries, rng),
            Self::Unconstrained { entries } => {
                let raw: Vec<f64> = (0..n * n).map(|_| entries.sample(rng)).collect();
                GroundTruthMatrix::from_raw(n, n, None, raw)
            }
        }
    }
}

/// Ground-truth matrix with its rounded (tokenizable) entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMatrix {
    pub n: usize,
    pub rank: usize,
    /// Row-major `n x rank` factors, absent for unconstrained matrices.
    pub factors: Option<(Vec<f64>, Vec<f64>)>,
    /// Entries before rounding, kept for diagnostics.
    pub raw: Vec<f64>,
    /// Entries rounded to the tokenizer grid; losses are computed on these.
    pub values: Vec<f64>,
}

impl GroundTruthMatrix {
    fn from_raw(
        n: usize,
        rank: usize,
        factors: Option<(Vec<f64>, Vec<f64>)>,
        raw: Vec<f64>,
    ) -> Result<Self, DataError> {
        let tok = Tokenizer;
        for &v in &raw {
            tok.encode(v)?;
        }
        let values = raw.iter().map(|&v| round2(v)).collect();
        Ok(Self {
            n,
            rank,
            factors,
            raw,
            values,
        })
    }

    /// Wraps explicit entries (rounded to the grid).
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self, DataError> {
        if values.len() != n * n {
            return Err(DataError::Shape {
                expected: n * n,
                got: values.len(),
            });
        }
        Self::from_raw(n, n, None, values)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// The same matrix with every entry negated.
    pub fn negated(&self) -> Self {
        Self {
            n: self.n,
            rank: self.rank,
            factors: self
                .factors
                .as_ref()
                .map(|(u, v)| (u.iter().map(|x| -x).collect(), v.clone())),
            raw: self.raw.iter().map(|x| -x).collect(),
            values: self.values.iter().map(|x| -x).collect(),
        }
    }
}

pub(crate) fn sample_matrix_with<R: Rng + ?Sized>(
    n: usize,
    rank: usize,
    entries: EntryDistribution,
    rng: &mut R,
) -> Result<GroundTruthMatrix, DataError> {
    if rank == 0 || rank > n {
        return Err(DataError::InvalidRank { n, rank });
    }
    let u: Vec<f64> = (0..n * rank).map(|_| entries.sample(rng)).collect();
    let v: Vec<f64> = (0..n * rank).map(|_| entries.sample(rng)).collect();
    let mut raw = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            raw[i * n + j] = (0..rank).map(|k| u[i * rank + k] * v[j * rank + k]).sum();
        }
    }
    GroundTruthMatrix::from_raw(n, rank, Some((u, v)), raw)
}

/// Samples `X = U V^T` with i.i.d. factor entries, reproducibly from `seed`.
pub fn sample_matrix(
    n: usize,
    rank: usize,
    entries: EntryDistribution,
    seed: u64,
) -> Result<GroundTruthMatrix, DataError> {
    sample_matrix_with(n, rank, entries, &mut stream_rng(seed, 0))
}

/// Observation pattern; `true` marks an observed entry (`M_ij = 1`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub n: usize,
    pub observed: Vec<bool>,
}

impl Mask {
    pub fn fully_observed(n: usize) -> Self {
        Self {
            n,
            observed: vec![true; n * n],
        }
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[i * self.n + j]
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn masked_count(&self) -> usize {
        self.observed.len() - self.observed_count()
    }

    /// Row-major `M` as 0/1 values.
    pub fn as_binary(&self) -> Vec<u8> {
        self.observed.iter().map(|&o| o as u8).collect()
    }
}

pub(crate) fn sample_mask_with<R: Rng + ?Sized>(n: usize, p_mask: f64, rng: &mut R) -> Result<Mask, DataError> {
    if !(0.0..=1.0).contains(&p_mask) {
        return Err(DataError::InvalidProbability(p_mask));
    }
    let observed = (0..n * n).map(|_| rng.random::<f64>() >= p_mask).collect();
    Ok(Mask { n, observed })
}

/// Each entry is masked independently with probability `p_mask`.
pub fn sample_mask(n: usize, p_mask: f64, seed: u64) -> Result<Mask, DataError> {
    sample_mask_with(n, p_mask, &mut stream_rng(seed, 0))
}

/// Deterministic mask: every listed `(row, column)` pair masks that row
/// except the named column; unlisted rows stay fully observed.
pub fn structured_mask(n: usize, rows: &[(usize, usize)]) -> Result<Mask, DataError> {
    let mut mask = Mask::fully_observed(n);
    let mut seen = vec![false; n];
    for &(row, col) in rows {
        if row >= n || col >= n {
            return Err(DataError::StructuredMask(format!(
                "entry ({row}, {col}) outside a {n}x{n} matrix"
            )));
        }
        if std::mem::replace(&mut seen[row], true) {
            return Err(DataError::StructuredMask(format!("row {row} listed twice")));
        }
        for j in 0..n {
            mask.observed[row * n + j] = j == col;
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_matrix() {
        let a = sample_matrix(7, 2, EntryDistribution::uniform(), 11).unwrap();
        let b = sample_matrix(7, 2, EntryDistribution::uniform(), 11).unwrap();
        let c = sample_matrix(7, 2, EntryDistribution::uniform(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rank_one_minors_vanish() {
        for seed in 0..20 {
            let x = sample_matrix(6, 1, EntryDistribution::uniform(), seed).unwrap();
            let n = x.n;
            for i in 0..n {
                for k in i + 1..n {
                    for j in 0..n {
                        for l in j + 1..n {
                            let minor = x.raw[i * n + j] * x.raw[k * n + l] - x.raw[i * n + l] * x.raw[k * n + j];
                            assert!(minor.abs() <= 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rounding_is_within_half_a_grid_step() {
        let x = sample_matrix(7, 2, EntryDistribution::uniform(), 3).unwrap();
        for (r, v) in x.raw.iter().zip(&x.values) {
            assert!((r - v).abs() <= 0.005 + 1e-12);
        }
    }

    #[test]
    fn invalid_rank() {
        assert!(matches!(
            sample_matrix(4, 5, EntryDistribution::uniform(), 0),
            Err(DataError::InvalidRank { .. })
        ));
        assert!(matches!(
            sample_matrix(4, 0, EntryDistribution::uniform(), 0),
            Err(DataError::InvalidRank { .. })
        ));
    }

    #[test]
    fn out_of_range_entries_are_reported() {
        let err = sample_matrix(5, 5, EntryDistribution::normal(0.0, 50.0), 1).unwrap_err();
        match err {
            DataError::OutOfRange { value } => assert!(value.abs() > 10.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extreme_mask_probabilities() {
        assert!(sample_mask(7, 0.0, 1).unwrap().observed.iter().all(|&o| o));
        assert!(sample_mask(7, 1.0, 1).unwrap().observed.iter().all(|&o| !o));
        assert!(matches!(sample_mask(7, 1.5, 1), Err(DataError::InvalidProbability(_))));
    }

    #[test]
    fn structured_masks() {
        assert_eq!(structured_mask(5, &[]).unwrap(), Mask::fully_observed(5));
        let m = structured_mask(7, &[(3, 6)]).unwrap();
        assert_eq!((0..7).filter(|&j| m.is_observed(3, j)).count(), 1);
        assert!(m.is_observed(3, 6));
        assert_eq!(m.masked_count(), 6);

        let two = structured_mask(7, &[(1, 2), (5, 0)]).unwrap();
        for i in 0..7 {
            let observed = (0..7).filter(|&j| two.is_observed(i, j)).count();
            match i {
                1 | 5 => assert_eq!(observed, 1),
                _ => assert_eq!(observed, 7),
            }
        }
        assert!(two.is_observed(1, 2) && two.is_observed(5, 0));

        assert!(matches!(structured_mask(7, &[(2, 7)]), Err(DataError::StructuredMask(_))));
        assert!(matches!(structured_mask(7, &[(2, 1), (2, 3)]), Err(DataError::StructuredMask(_))));
    }

    #[test]
    fn laplace_has_expected_spread() {
        let d = EntryDistribution::laplace(0.0, 0.25);
        let mut rng = stream_rng(5, 0);
        let xs: Vec<f64> = (0..200_000).map(|_| d.sample(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.005);
        assert!((var / d.variance() - 1.0).abs() < 0.03);
    }
}
