use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sample::{sample_mask_with, stream_rng, GroundTruthMatrix, Mask, MatrixFamily};
use super::tokenizer::{Tokenizer, MASK_TOKEN};
use super::DataError;

/// One training or evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedInstance {
    pub matrix: GroundTruthMatrix,
    pub mask: Mask,
    /// Row-major tokens of `X ⊙ M`, with masked entries set to the mask token.
    pub tokens: Vec<u32>,
}

impl MaskedInstance {
    pub fn new(matrix: GroundTruthMatrix, mask: Mask) -> Result<Self, DataError> {
        if mask.n != matrix.n {
            return Err(DataError::Shape {
                expected: matrix.n,
                got: mask.n,
            });
        }
        let tokens = Tokenizer.encode_masked(&matrix.values, &mask.observed)?;
        Ok(Self { matrix, mask, tokens })
    }

    pub fn n(&self) -> usize {
        self.matrix.n
    }

    /// Same matrix and mask, but masked positions carry `replacement`
    /// instead of the mask token.
    pub fn with_masked_token(&self, replacement: u32) -> Self {
        let mut out = self.clone();
        for (t, &o) in out.tokens.iter_mut().zip(&self.mask.observed) {
            if !o {
                *t = replacement;
            }
        }
        out
    }

    pub fn to_json(&self, seed: u64) -> InstanceJson {
        InstanceJson {
            n: self.matrix.n,
            r: self.matrix.rank,
            seed,
            x: self.matrix.values.clone(),
            m: self.mask.as_binary(),
            tokens: self.tokens.clone(),
        }
    }
}

/// Exported instance document: `{n, r, seed, X, M, tokens}`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceJson {
    pub n: usize,
    pub r: usize,
    pub seed: u64,
    #[serde(rename = "X")]
    pub x: Vec<f64>,
    #[serde(rename = "M")]
    pub m: Vec<u8>,
    pub tokens: Vec<u32>,
}

impl InstanceJson {
    /// Rebuilds the instance, checking that tokens agree with `X` and `M`.
    pub fn into_instance(self) -> Result<MaskedInstance, DataError> {
        let matrix = GroundTruthMatrix::from_values(self.n, self.x)?;
        let mask = Mask {
            n: self.n,
            observed: self.m.iter().map(|&b| b != 0).collect(),
        };
        let mut inst = MaskedInstance::new(matrix, mask)?;
        inst.matrix.rank = self.r;
        if inst.tokens != self.tokens {
            return Err(DataError::Inconsistent("tokens disagree with X and M".into()));
        }
        Ok(inst)
    }
}

/// Distribution of training/evaluation instances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n: usize,
    pub family: MatrixFamily,
    pub p_mask: f64,
}

impl DataConfig {
    pub fn low_rank(n: usize, rank: usize, p_mask: f64) -> Self {
        Self {
            n,
            family: MatrixFamily::low_rank(rank),
            p_mask,
        }
    }

    pub fn rank(&self) -> usize {
        match self.family {
            MatrixFamily::LowRank { rank, .. } => rank,
            MatrixFamily::Unconstrained { .. } => self.n,
        }
    }

    pub fn sample_instance<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MaskedInstance, DataError> {
        let matrix = self.family.sample(self.n, rng)?;
        let mask = sample_mask_with(self.n, self.p_mask, rng)?;
        MaskedInstance::new(matrix, mask)
    }
}

/// A batch of same-size instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub instances: Vec<MaskedInstance>,
}

impl Batch {
    pub fn new(instances: Vec<MaskedInstance>) -> Result<Self, DataError> {
        let n = instances.first().map(|i| i.n()).unwrap_or(0);
        if let Some(bad) = instances.iter().find(|i| i.n() != n) {
            return Err(DataError::Shape {
                expected: n,
                got: bad.n(),
            });
        }
        Ok(Self { n, instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.n * self.n
    }

    /// All token sequences concatenated, `[batch * n^2]`.
    pub fn tokens(&self) -> Vec<u32> {
        self.instances.iter().flat_map(|i| i.tokens.iter().copied()).collect()
    }

    /// All rounded ground-truth entries concatenated.
    pub fn targets(&self) -> Vec<f64> {
        self.instances
            .iter()
            .flat_map(|i| i.matrix.values.iter().copied())
            .collect()
    }

    pub fn observed(&self) -> Vec<bool> {
        self.instances
            .iter()
            .flat_map(|i| i.mask.observed.iter().copied())
            .collect()
    }

    pub fn masked_token_count(&self) -> usize {
        self.instances
            .iter()
            .map(|i| i.tokens.iter().filter(|&&t| t == MASK_TOKEN).count())
            .sum()
    }

    /// Batch with masked tokens replaced.
    pub fn with_masked_token(&self, replacement: u32) -> Self {
        Self {
            n: self.n,
            instances: self
                .instances
                .iter()
                .map(|i| i.with_masked_token(replacement))
                .collect(),
        }
    }
}

/// The batch used at `step` of a run seeded with `seed`.
pub fn sample_batch(config: &DataConfig, batch_size: usize, seed: u64, step: u64) -> Result<Batch, DataError> {
    let mut rng = stream_rng(seed, step);
    let instances = (0..batch_size)
        .map(|_| config.sample_instance(&mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    Batch::new(instances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample::{sample_matrix, EntryDistribution};

    #[test]
    fn tokens_are_mask_exactly_on_missing_entries() {
        let cfg = DataConfig::low_rank(7, 2, 0.3);
        let batch = sample_batch(&cfg, 32, 9, 4).unwrap();
        for inst in &batch.instances {
            for (k, &t) in inst.tokens.iter().enumerate() {
                assert_eq!(t == MASK_TOKEN, !inst.mask.observed[k]);
                if t != MASK_TOKEN {
                    assert_eq!(Tokenizer.decode(t).unwrap(), inst.matrix.values[k]);
                }
            }
        }
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let cfg = DataConfig::low_rank(5, 1, 0.3);
        assert_eq!(sample_batch(&cfg, 4, 1, 10).unwrap(), sample_batch(&cfg, 4, 1, 10).unwrap());
        assert_ne!(sample_batch(&cfg, 4, 1, 10).unwrap(), sample_batch(&cfg, 4, 1, 11).unwrap());
    }

    #[test]
    fn json_round_trip() {
        let x = sample_matrix(4, 2, EntryDistribution::uniform(), 2).unwrap();
        let mask = crate::data::sample_mask(4, 0.3, 2).unwrap();
        let inst = MaskedInstance::new(x, mask).unwrap();
        let doc = serde_json::to_string(&inst.to_json(2)).unwrap();
        assert!(doc.contains("\"X\"") && doc.contains("\"M\"") && doc.contains("\"tokens\""));
        let back: InstanceJson = serde_json::from_str(&doc).unwrap();
        let rebuilt = back.into_instance().unwrap();
        assert_eq!(rebuilt.tokens, inst.tokens);
        assert_eq!(rebuilt.matrix.values, inst.matrix.values);
    }
}
