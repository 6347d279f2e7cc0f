use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::DataConfig;
use crate::model::{Component, ModelConfig};
use crate::tensor::AdamConfig;

/// Which steps get a checkpoint. The final step is always saved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSchedule {
    /// Save every `every` steps; 0 disables the periodic schedule.
    pub every: u64,
    #[serde(default)]
    pub extra: Vec<u64>,
}

impl Default for CheckpointSchedule {
    fn default() -> Self {
        Self {
            every: 1000,
            extra: vec![1000, 4000, 14000],
        }
    }
}

impl CheckpointSchedule {
    pub fn contains(&self, step: u64, final_step: u64) -> bool {
        step == final_step || (self.every > 0 && step.is_multiple_of(self.every)) || self.extra.contains(&step)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub adam: AdamConfig,
    /// Seeds both initialization and the per-step batches.
    pub seed: u64,
    #[serde(default)]
    pub checkpoints: CheckpointSchedule,
    /// Components whose weights are never updated.
    #[serde(default)]
    pub freeze: Vec<Component>,
}

impl TrainConfig {
    /// Rank-`rank` `n x n` completion with the given model, 256 matrices per
    /// step and Adam at 1e-4.
    pub fn new(model: ModelConfig, rank: usize, steps: u64) -> Self {
        Self {
            model,
            data: DataConfig::low_rank(model.n, rank, 0.3),
            batch_size: 256,
            steps,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoints: CheckpointSchedule::default(),
            freeze: Vec::new(),
        }
    }

    /// 7x7 rank-2 inputs, 4 layers, 8 heads, width 256, 50000 steps.
    pub fn paper() -> Self {
        Self::new(ModelConfig::paper(7), 2, 50_000)
    }

    /// 5x5 rank-1 inputs, 4 layers, 8 heads, width 128, 20000 steps.
    pub fn desk() -> Self {
        Self::new(ModelConfig::new(5, 4, 8, 128), 1, 20_000)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.model.validate()?;
        if self.data.n != self.model.n {
            return bad(format!("data n = {} but model n = {}", self.data.n, self.model.n));
        }
        if let crate::data::MatrixFamily::LowRank { rank, .. } = self.data.family {
            if rank == 0 || rank > self.data.n {
                return bad(format!("rank {rank} is invalid for n = {}", self.data.n));
            }
        }
        if !(0.0..=1.0).contains(&self.data.p_mask) {
            return bad(format!("p_mask {} is outside [0, 1]", self.data.p_mask));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        if Component::ALL.iter().all(|c| self.freeze.contains(c)) {
            return bad("every component is frozen".into());
        }
        Ok(())
    }

    /// Whether a named parameter receives updates.
    pub fn is_trainable(&self, name: &str) -> bool {
        !self.freeze.iter().any(|c| c.contains(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        TrainConfig::paper().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        assert_eq!(TrainConfig::desk().model.n, 5);
    }

    #[test]
    fn invalid_configs() {
        let mut c = TrainConfig::desk();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.data.n = 7;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.freeze = Component::ALL.to_vec();
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_schedule_covers_analysis_steps() {
        let s = CheckpointSchedule::default();
        for step in [1000, 4000, 14000, 20000] {
            assert!(s.contains(step, 20000));
        }
        assert!(!s.contains(1500, 20000));
        let sparse = CheckpointSchedule { every: 0, extra: vec![] };
        assert!(sparse.contains(7, 7));
    }

    #[test]
    fn json_round_trip_rejects_unknown_fields() {
        let c = TrainConfig::desk();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), c);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["bogus"] = 1.into();
        assert!(serde_json::from_value::<TrainConfig>(v).is_err());
    }
}
