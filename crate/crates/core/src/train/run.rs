use std::path::{Path, PathBuf};
use std::time::Instant;

use super::metrics::MetricsWriter;
use super::{io_err, CheckpointIndexEntry, MetricRecord, MetricSeries, RunManifest, TrainConfig, TrainError};
use crate::data::sample_batch;
use crate::model::{
    build_graph, init_model, mse_loss, save_checkpoint, Checkpoint, Component, ForwardOptions, LossBreakdown,
    ModelWeights, OptimizerSnapshot,
};
use crate::tensor::{adam_step, AdamState, Tape, Tensor, TensorError};

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights<f32>,
    pub series: MetricSeries,
    pub checkpoints: Vec<CheckpointIndexEntry>,
}

/// Online Adam training state. Step `t` (1-based) trains on the batch
/// drawn from stream `t` of the configured seed.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    weights: ModelWeights<f32>,
    trainable: Vec<String>,
    optimizer: AdamState<f32>,
    step: u64,
    command: String,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let weights = init_model(&config.model, config.seed)?;
        Self::from_weights(config, weights)
    }

    /// Starts training from the given weights with a fresh optimizer.
    pub fn from_weights(config: TrainConfig, weights: ModelWeights<f32>) -> Result<Self, TrainError> {
        config.validate()?;
        if weights.config() != &config.model {
            return Err(TrainError::InvalidConfig(format!(
                "weights are for {:?}, config asks for {:?}",
                weights.config(),
                config.model
            )));
        }
        let trainable: Vec<String> = weights
            .names()
            .filter(|n| config.is_trainable(n))
            .map(String::from)
            .collect();
        let optimizer = AdamState::new(config.adam, trainable.iter().map(|n| weights.get(n).unwrap().shape()));
        Ok(Self {
            config,
            weights,
            trainable,
            optimizer,
            step: 0,
            command: "train".into(),
        })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(config: TrainConfig, checkpoint: Checkpoint) -> Result<Self, TrainError> {
        checkpoint.expect_config(&config.model)?;
        let mut t = Self::from_weights(config, checkpoint.weights)?;
        let opt = checkpoint
            .optimizer
            .ok_or_else(|| TrainError::InvalidConfig("checkpoint has no optimizer state".into()))?;
        if opt.params != t.trainable {
            return Err(TrainError::InvalidConfig(
                "checkpoint optimizer covers different parameters than the configuration trains".into(),
            ));
        }
        t.optimizer = opt.state;
        t.optimizer.config = t.config.adam;
        t.step = checkpoint.step;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights<f32> {
        &self.weights
    }

    pub fn into_weights(self) -> ModelWeights<f32> {
        self.weights
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn trainable(&self) -> &[String] {
        &self.trainable
    }

    /// Snapshot of weights and optimizer at the current step.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            weights: self.weights.clone(),
            optimizer: Some(OptimizerSnapshot {
                params: self.trainable.clone(),
                state: self.optimizer.clone(),
            }),
            metadata: serde_json::json!({ "train_config": self.config }),
        }
    }

    /// One optimizer step on a fresh batch. On a non-finite loss or gradient
    /// nothing is updated.
    pub fn step(&mut self) -> Result<MetricRecord, TrainError> {
        let next = self.step + 1;
        let cfg = &self.config;
        let batch = sample_batch(&cfg.data, cfg.batch_size, cfg.seed, next)?;
        let targets = batch.targets();
        let mut tape = Tape::new();
        let graph = build_graph(
            &mut tape,
            &self.weights,
            &|n| cfg.is_trainable(n),
            &batch.tokens(),
            &ForwardOptions::plain(),
        )?;
        let loss = mse_loss(&mut tape, graph.prediction, &targets)?;
        let breakdown = LossBreakdown::compute(tape.value(graph.prediction).data(), &targets, &batch.observed());
        if !breakdown.total.is_finite() {
            return Err(TrainError::Diverged {
                step: next,
                last_good: None,
            });
        }
        let mut grads = tape.backward(loss)?;
        let grad_list: Vec<Tensor<f32>> = self
            .trainable
            .iter()
            .map(|n| {
                let var = graph.params[n.as_str()];
                grads
                    .take(var)
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(var)))
            })
            .collect();
        drop(tape);
        let grad_refs: Vec<&Tensor<f32>> = grad_list.iter().collect();
        let mut params: Vec<&mut Tensor<f32>> = self
            .weights
            .iter_mut()
            .filter(|(n, _)| cfg.is_trainable(n))
            .map(|(_, t)| t)
            .collect();
        match adam_step(&mut params, &grad_refs, &mut self.optimizer) {
            Ok(()) => {}
            Err(TensorError::NonFinite { .. }) => {
                return Err(TrainError::Diverged {
                    step: next,
                    last_good: None,
                })
            }
            Err(e) => return Err(e.into()),
        }
        self.step = next;
        Ok(MetricRecord::from_breakdown(next, &breakdown))
    }

    /// Trains up to `config.steps`, writing `metrics.csv`, checkpoints and
    /// `run.json` under `out_dir` when given.
    pub fn run(
        mut self,
        out_dir: Option<&Path>,
        progress: &mut dyn FnMut(&MetricRecord),
    ) -> Result<TrainOutcome, TrainError> {
        let start = Instant::now();
        let mut series = MetricSeries::new(self.config.seed);
        let mut checkpoints = Vec::new();
        let mut writer = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
                Some(MetricsWriter::create(&dir.join("metrics.csv"))?)
            }
            None => None,
        };
        let total = self.config.steps;
        while self.step < total {
            let record = match self.step() {
                Ok(r) => r,
                Err(TrainError::Diverged { step, .. }) => {
                    let mut last_good = None;
                    if let Some(dir) = out_dir {
                        let path = dir.join("checkpoints").join(format!("last-good-step-{:06}", self.step));
                        save_checkpoint(&path, &self.checkpoint())?;
                        last_good = Some(path);
                    }
                    if let Some(w) = writer.as_mut() {
                        w.flush()?;
                    }
                    if let Some(dir) = out_dir {
                        series.wall_clock_secs = start.elapsed().as_secs_f64();
                        let mut manifest = self.manifest(&checkpoints, start);
                        manifest.status = "failed".into();
                        manifest.error = Some(format!("non-finite loss at step {step}"));
                        manifest.write(&dir.join("run.json"))?;
                    }
                    return Err(TrainError::Diverged { step, last_good });
                }
                Err(e) => return Err(e),
            };
            if let Some(w) = writer.as_mut() {
                w.push(&record)?;
            }
            progress(&record);
            series.records.push(record);
            if let Some(dir) = out_dir {
                if self.config.checkpoints.contains(self.step, total) {
                    let path = checkpoint_path(dir, self.step);
                    save_checkpoint(&path, &self.checkpoint())?;
                    checkpoints.push(CheckpointIndexEntry { step: self.step, path });
                    if let Some(w) = writer.as_mut() {
                        w.flush()?;
                    }
                }
            }
        }
        if let Some(w) = writer.as_mut() {
            w.flush()?;
        }
        series.wall_clock_secs = start.elapsed().as_secs_f64();
        if let Some(dir) = out_dir {
            self.manifest(&checkpoints, start).write(&dir.join("run.json"))?;
        }
        Ok(TrainOutcome {
            weights: self.weights,
            series,
            checkpoints,
        })
    }

    fn manifest(&self, checkpoints: &[CheckpointIndexEntry], start: Instant) -> RunManifest {
        let config = serde_json::to_value(&self.config).unwrap_or_default();
        let mut m = RunManifest::new(&self.command, config, vec![self.config.seed]);
        m.checkpoints = checkpoints.to_vec();
        m.artifacts = vec![PathBuf::from("metrics.csv")];
        m.wall_clock_secs = start.elapsed().as_secs_f64();
        m
    }
}

/// `<dir>/checkpoints/step-NNNNNN`.
pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step-{step:06}"))
}

/// Trains `config` from scratch.
pub fn train(config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    Trainer::new(config.clone())?.run(out_dir, &mut |_| {})
}

/// Replaces the listed components with freshly initialized values drawn
/// exactly as [`init_model`] would for `seed`.
pub fn reinitialize(
    weights: &mut ModelWeights<f32>,
    components: &[Component],
    seed: u64,
) -> Result<(), TrainError> {
    let fresh = init_model(weights.config(), seed)?;
    for &c in components {
        weights.copy_component_from(&fresh, c)?;
    }
    Ok(())
}

/// Re-initializes `components` of a trained model and trains only those,
/// keeping every other weight at its checkpoint value.
pub fn component_retrain(
    checkpoint: &Checkpoint,
    components: &[Component],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    if components.is_empty() {
        return Err(TrainError::InvalidConfig("no components to retrain".into()));
    }
    if let Some(c) = components.iter().find(|c| !Component::ALL.contains(c)) {
        return Err(TrainError::InvalidConfig(format!(
            "component '{c}' cannot be retrained on its own; use one of token_embeddings, positional_embeddings, attention, mlp, head"
        )));
    }
    checkpoint.expect_config(&config.model)?;
    let mut weights = checkpoint.weights.clone();
    reinitialize(&mut weights, components, config.seed)?;
    let mut cfg = config.clone();
    cfg.freeze = Component::ALL
        .iter()
        .copied()
        .filter(|c| !components.contains(c))
        .collect();
    let mut trainer = Trainer::from_weights(cfg, weights)?;
    trainer.command = "retrain-component".into();
    trainer.run(out_dir, &mut |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{load_checkpoint, ModelConfig};

    fn tiny(steps: u64) -> TrainConfig {
        let mut c = TrainConfig::new(ModelConfig::new(3, 1, 2, 8), 1, steps);
        c.batch_size = 4;
        c.adam.lr = 1e-3;
        c.checkpoints.every = 2;
        c.checkpoints.extra.clear();
        c
    }

    #[test]
    fn single_step_writes_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(1);
        c.batch_size = 1;
        let out = train(&c, Some(dir.path())).unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "step,L,L_obs,L_mask");
        assert!(lines[1].starts_with("1,"));
        assert_eq!(out.checkpoints.len(), 1);
        assert!(dir.path().join("run.json").exists());
    }

    #[test]
    fn same_config_same_series() {
        let a = train(&tiny(5), None).unwrap();
        let b = train(&tiny(5), None).unwrap();
        assert_eq!(a.series.records, b.series.records);
        assert_eq!(a.weights, b.weights);
        a.series.validate().unwrap();
    }

    #[test]
    fn resume_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let full = train(&tiny(6), Some(dir.path())).unwrap();
        let ckpt = load_checkpoint(&checkpoint_path(dir.path(), 4)).unwrap();
        let resumed = Trainer::resume(tiny(6), ckpt).unwrap().run(None, &mut |_| {}).unwrap();
        assert_eq!(resumed.weights, full.weights);
        assert_eq!(resumed.series.records, full.series.records[4..]);
    }

    #[test]
    fn frozen_components_do_not_move() {
        let base = train(&tiny(3), None).unwrap();
        let ckpt = Checkpoint::new(3, base.weights.clone());
        let out = component_retrain(&ckpt, &[Component::Mlp], &tiny(3), None).unwrap();
        for (name, t) in out.weights.iter() {
            if Component::Mlp.contains(name) {
                assert_ne!(t, base.weights.get(name).unwrap(), "{name}");
            } else {
                assert_eq!(t, base.weights.get(name).unwrap(), "{name}");
            }
        }
    }

    #[test]
    fn retraining_everything_matches_training() {
        let base = train(&tiny(4), None).unwrap();
        let ckpt = Checkpoint::new(4, base.weights);
        let again = component_retrain(&ckpt, &Component::ALL, &tiny(4), None).unwrap();
        let fresh = train(&tiny(4), None).unwrap();
        assert_eq!(again.series.records, fresh.series.records);
    }

    #[test]
    fn retrain_requires_components() {
        let ckpt = Checkpoint::new(0, init_model(&tiny(1).model, 0).unwrap());
        assert!(matches!(
            component_retrain(&ckpt, &[], &tiny(1), None),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn divergence_halts_with_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(3);
        c.adam.lr = 1e30;
        match train(&c, Some(dir.path())) {
            Err(TrainError::Diverged { last_good: Some(p), step }) => {
                assert!(p.exists());
                assert!(step >= 2);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
