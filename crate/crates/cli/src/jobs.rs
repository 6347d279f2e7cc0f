//! One prepared job per command. `prepare` does every check that needs no
//! output (including loading checkpoints); `run` writes artifacts.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use matcomp_core::data::{Batch, DataConfig, MaskedInstance, MatrixFamily};
use matcomp_core::interp::{
    apply_intervention, classify_heads, derive_groups, embedding_series, evaluate, evaluation_batch, fit_probe,
    group_ablation, published_groups, random_permutation, record_attention, switch_weights,
    token_intervention, write_attention_export, HeadGroup, InterventionSpec, MaskMode, ProbeConfig, ProbeTarget,
    DEFAULT_OTHER_FACTOR,
};
use matcomp_core::model::{load_checkpoint, save_checkpoint, Checkpoint, Component, HeadId, ModelConfig};
use matcomp_core::nucnorm::{compare_bert_vs_nucnorm, nuclear_norm, solve, Mode, NucNormProblem};
use matcomp_core::train::{
    component_retrain, detect_transition, MetricSeries, RunManifest, TrainConfig, Trainer, TransitionConfig,
};

use crate::config::{parse_heads, resolve, Config};
use crate::reproduce::Suite;
use crate::{runtime, Cli, CliError};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub(crate) fn load(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_dir() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    load_checkpoint(path).map_err(|e| usage(format!("cannot load checkpoint {}: {e}", path.display())))
}

/// Training configuration stored with a checkpoint, if any.
pub(crate) fn stored_train_config(ckpt: &Checkpoint) -> Option<TrainConfig> {
    serde_json::from_value(ckpt.metadata.get("train_config")?.clone()).ok()
}

/// The instance distribution a checkpoint was trained on, or rank-2
/// uniform inputs at `p_mask = 0.3` when unknown.
pub(crate) fn base_data(ckpt: &Checkpoint) -> DataConfig {
    let n = ckpt.weights.config().n;
    stored_train_config(ckpt)
        .map(|c| c.data)
        .unwrap_or_else(|| DataConfig::low_rank(n, 2.min(n), 0.3))
}

/// `(step, path)` of every `step-NNNNNN` checkpoint of a run, in order.
pub(crate) fn list_checkpoints(run: &Path) -> Result<Vec<(u64, PathBuf)>, CliError> {
    let dir = run.join("checkpoints");
    let entries = std::fs::read_dir(&dir).map_err(|e| usage(format!("cannot list {}: {e}", dir.display())))?;
    let mut out: Vec<(u64, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            let step = name.strip_prefix("step-")?.parse().ok()?;
            Some((step, e.path()))
        })
        .collect();
    out.sort();
    Ok(out)
}

pub(crate) fn read_metrics(path: &Path) -> Result<MetricSeries, CliError> {
    let file = if path.is_dir() { path.join("metrics.csv") } else { path.to_path_buf() };
    if !file.is_file() {
        return Err(usage(format!("metrics file {} does not exist", file.display())));
    }
    MetricSeries::read_csv(&file, 0).map_err(|e| usage(format!("cannot read {}: {e}", file.display())))
}

pub(crate) fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    std::fs::write(&path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(PathBuf::from(name))
}

pub(crate) fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(PathBuf::from(name))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Clone, Debug)]
enum TokenValue {
    Mask,
    Value(f64),
}

#[derive(Clone, Debug)]
enum Donor {
    Negated,
    Independent,
}

#[derive(Clone, Debug)]
enum Kind {
    Train {
        trainer: Box<Trainer>,
        log_every: u64,
    },
    Retrain {
        checkpoint: Box<Checkpoint>,
        components: Vec<Component>,
        config: Box<TrainConfig>,
    },
    Eval {
        checkpoint: Box<Checkpoint>,
        data: DataConfig,
        samples: usize,
    },
    NucNorm {
        data: DataConfig,
        samples: usize,
        mode: Mode,
        tol: f64,
        max_iter: usize,
    },
    Compare {
        checkpoint: Box<Checkpoint>,
        data: DataConfig,
        p_masks: Vec<f64>,
        samples: usize,
        mode: Mode,
    },
    Ablate {
        checkpoint: Box<Checkpoint>,
        data: DataConfig,
        heads: Option<Vec<HeadId>>,
        groups: Option<String>,
        samples: usize,
    },
    Switch {
        destination: Box<Checkpoint>,
        source: Box<Checkpoint>,
        components: Vec<Component>,
        data: DataConfig,
        samples: usize,
        save: bool,
    },
    Patch {
        checkpoint: Box<Checkpoint>,
        data: DataConfig,
        heads: Vec<HeadId>,
        donor: Donor,
        samples: usize,
    },
    Permute {
        checkpoint: Box<Checkpoint>,
        data: DataConfig,
        permutation: Vec<usize>,
        samples: usize,
    },
    Token {
        checkpoint: Box<Checkpoint>,
        data: DataConfig,
        values: Vec<TokenValue>,
        families: Vec<String>,
        samples: usize,
    },
    Probe {
        checkpoint: Box<Checkpoint>,
        data: DataConfig,
        probe: ProbeConfig,
    },
    Embed {
        series: Vec<(u64, PathBuf)>,
    },
    Attention {
        checkpoint: Box<Checkpoint>,
        data: DataConfig,
        mask: MaskMode,
        samples: usize,
        csv: bool,
        other_factor: f64,
    },
    Detect {
        series: MetricSeries,
        transition: TransitionConfig,
    },
    Reproduce(Box<Suite>),
}

/// A validated command ready to run.
#[derive(Clone, Debug)]
pub struct Job {
    command: String,
    config: Config,
    resolved: Value,
    out: PathBuf,
    kind: Kind,
}

fn checkpoint_key(config: &Config) -> Result<Checkpoint, CliError> {
    load(config.require(&config.checkpoint, "checkpoint")?)
}

fn train_config(config: &Config, base: TrainConfig) -> Result<TrainConfig, CliError> {
    let mut c = base;
    if let Some(b) = config.batch_size {
        c.batch_size = b;
    }
    if let Some(s) = config.steps {
        c.steps = s;
    }
    if let Some(lr) = config.lr {
        c.adam.lr = lr;
    }
    if let Some(e) = config.checkpoint_every {
        c.checkpoints.every = e;
    }
    if let Some(extra) = &config.checkpoint_steps {
        c.checkpoints.extra = extra.clone();
    }
    if let Some(s) = config.seed {
        c.seed = s;
    }
    Ok(c)
}

fn prepare_train(config: &Config) -> Result<Kind, CliError> {
    let preset = config.preset.as_deref().unwrap_or("desk");
    let base = TrainConfig::preset(preset).ok_or_else(|| usage(format!("unknown preset '{preset}'; use desk or paper")))?;
    let heads = match &config.heads {
        None => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| usage("heads must be a positive integer for train"))? as usize,
        ),
    };
    let m = base.model;
    let mut model = ModelConfig::new(
        config.n.unwrap_or(m.n),
        config.layers.unwrap_or(m.layers),
        heads.unwrap_or(m.heads),
        config.hidden.unwrap_or(m.hidden),
    );
    if config.hidden.is_none() {
        model.mlp_hidden = m.mlp_hidden;
    }
    if let Some(h) = config.mlp_hidden {
        model.mlp_hidden = h;
    }
    let data = config.data_config(DataConfig { n: model.n, ..base.data })?;
    let mut c = train_config(config, TrainConfig { model, data, ..base })?;
    if let Some(f) = &config.freeze {
        c.freeze = crate::config::parse_components(f).map_err(|e| usage(format!("freeze: {e}")))?;
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    let trainer = match &config.resume {
        Some(path) => Trainer::resume(c, load(path)?).map_err(|e| usage(e.to_string()))?,
        None => Trainer::new(c).map_err(|e| usage(e.to_string()))?,
    };
    Ok(Kind::Train {
        trainer: Box::new(trainer),
        log_every: config.log_every.unwrap_or(100),
    })
}

fn prepare_retrain(config: &Config) -> Result<Kind, CliError> {
    let checkpoint = checkpoint_key(config)?;
    if config.freeze.is_some() {
        return Err(usage("retrain-component freezes every component it does not retrain; drop 'freeze'"));
    }
    let components = config.components(&config.components, "components")?;
    if components.is_empty() {
        return Err(usage("missing required key 'components'"));
    }
    if let Some(c) = components.iter().find(|c| !Component::ALL.contains(c)) {
        return Err(usage(format!("component '{c}' cannot be retrained on its own")));
    }
    let base = stored_train_config(&checkpoint).unwrap_or_else(|| {
        let model = *checkpoint.weights.config();
        TrainConfig::new(model, 2.min(model.n), 20_000)
    });
    let c = train_config(config, base)?;
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(Kind::Retrain {
        checkpoint: Box::new(checkpoint),
        components,
        config: Box::new(c),
    })
}

fn parse_mode(config: &Config, default: &str) -> Result<Mode, CliError> {
    match config.mode.as_deref().unwrap_or(default) {
        "constrained" => {
            if config.lambda.is_some() {
                return Err(usage("lambda applies only to mode=regularized"));
            }
            Ok(Mode::Constrained)
        }
        "regularized" => {
            let lambda = config.lambda.unwrap_or(1e-3);
            if !(lambda > 0.0) {
                return Err(usage(format!("lambda must be positive, got {lambda}")));
            }
            Ok(Mode::Regularized { lambda })
        }
        other => Err(usage(format!("unknown mode '{other}'; use constrained or regularized"))),
    }
}

fn parse_permutation(v: Option<&Value>, len: usize, seed: u64) -> Result<Vec<usize>, CliError> {
    let perm = match v {
        None => random_permutation(len, seed),
        Some(Value::String(s)) if s == "random" => random_permutation(len, seed),
        Some(Value::String(s)) if s == "identity" => (0..len).collect(),
        Some(Value::Object(m)) if m.len() == 1 && m.contains_key("swap") => {
            let (a, b): (usize, usize) = serde_json::from_value(m["swap"].clone())
                .map_err(|_| usage("swap must be a pair of positions"))?;
            if a >= len || b >= len {
                return Err(usage(format!("swap positions must be below {len}")));
            }
            let mut p: Vec<usize> = (0..len).collect();
            p.swap(a, b);
            p
        }
        Some(v @ Value::Array(_)) => {
            serde_json::from_value(v.clone()).map_err(|_| usage("permutation must list positions"))?
        }
        Some(_) => return Err(usage("permutation must be \"random\", \"identity\", {\"swap\": [a, b]} or a list")),
    };
    let mut seen = vec![false; len];
    if perm.len() != len || perm.iter().any(|&p| p >= len || std::mem::replace(&mut seen[p], true)) {
        return Err(usage(format!("permutation is not a bijection on 0..{len}")));
    }
    Ok(perm)
}

fn parse_mask(v: Option<&Value>, n: usize) -> Result<MaskMode, CliError> {
    let mode = match v {
        None => MaskMode::Random,
        Some(Value::String(s)) if s == "random" => MaskMode::Random,
        Some(v @ Value::Array(_)) => MaskMode::Structured {
            rows: serde_json::from_value(v.clone())
                .map_err(|_| usage("mask must be \"random\" or a list of [row, observed column] pairs"))?,
        },
        Some(_) => return Err(usage("mask must be \"random\" or a list of [row, observed column] pairs")),
    };
    mode.fixed_mask(n).map_err(|e| usage(e.to_string()))?;
    Ok(mode)
}

fn check_data(data: &DataConfig, model: &ModelConfig) -> Result<(), CliError> {
    if data.n != model.n {
        return Err(usage(format!(
            "checkpoint expects {0}x{0} inputs, n is {1}",
            model.n, data.n
        )));
    }
    Ok(())
}

impl Job {
    pub fn prepare(cli: &Cli) -> Result<Self, CliError> {
        let (config, resolved) = resolve(
            &cli.command,
            cli.config.as_deref(),
            cli.out.as_deref(),
            cli.seed,
            &cli.overrides,
        )?;
        let command = cli.command.clone();
        let seed = config.seed();
        let with_data = |ckpt: &Checkpoint| -> Result<DataConfig, CliError> {
            let data = config.data_config(base_data(ckpt))?;
            check_data(&data, ckpt.weights.config())?;
            Ok(data)
        };
        let kind = match command.as_str() {
            "train" => prepare_train(&config)?,
            "retrain-component" => prepare_retrain(&config)?,
            "eval" => {
                let ckpt = checkpoint_key(&config)?;
                Kind::Eval {
                    data: with_data(&ckpt)?,
                    checkpoint: Box::new(ckpt),
                    samples: config.samples(1024)?,
                }
            }
            "nucnorm" => Kind::NucNorm {
                data: config.data_config(DataConfig::low_rank(config.n.unwrap_or(7), 2, 0.3))?,
                samples: config.samples(256)?,
                mode: parse_mode(&config, "regularized")?,
                tol: config.tol.unwrap_or(NucNormProblem::DEFAULT_TOL),
                max_iter: config.max_iter.unwrap_or(NucNormProblem::DEFAULT_MAX_ITER),
            },
            "compare" => {
                let ckpt = checkpoint_key(&config)?;
                let p_masks = config
                    .p_masks
                    .clone()
                    .unwrap_or_else(|| (1..=9).map(|k| k as f64 / 10.0).collect());
                if p_masks.is_empty() || p_masks.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(usage("p_masks must be a non-empty list of values in [0, 1]"));
                }
                Kind::Compare {
                    data: with_data(&ckpt)?,
                    checkpoint: Box::new(ckpt),
                    p_masks,
                    samples: config.samples(256)?,
                    mode: parse_mode(&config, "constrained")?,
                }
            }
            "ablate" => {
                let ckpt = checkpoint_key(&config)?;
                if config.heads.is_some() && config.groups.is_some() {
                    return Err(usage("give either heads or groups, not both"));
                }
                let groups = match config.groups.as_deref() {
                    None => None,
                    Some(g @ ("published" | "derived")) => Some(g.to_string()),
                    Some(other) => return Err(usage(format!("unknown groups '{other}'; use published or derived"))),
                };
                if groups.as_deref() == Some("published") {
                    let m = ckpt.weights.config();
                    if m.layers < 4 || m.heads < 8 {
                        return Err(usage("published head groups need a model with at least 4 layers and 8 heads"));
                    }
                }
                let heads = match (&config.heads, &groups) {
                    (_, Some(_)) => None,
                    (Some(v), None) => Some(parse_heads(v, ckpt.weights.config())?),
                    (None, None) => Some(parse_heads(&Value::from("all"), ckpt.weights.config())?),
                };
                Kind::Ablate {
                    data: with_data(&ckpt)?,
                    checkpoint: Box::new(ckpt),
                    heads,
                    groups,
                    samples: config.samples(1024)?,
                }
            }
            "switch" => {
                let destination = checkpoint_key(&config)?;
                let source = load(config.require(&config.source, "source")?)?;
                if source.weights.config() != destination.weights.config() {
                    return Err(usage("source and checkpoint have different model configurations"));
                }
                let mut components = config.components(&config.components, "components")?;
                if components.is_empty() {
                    components = vec![Component::AttentionQkv];
                }
                Kind::Switch {
                    data: with_data(&destination)?,
                    destination: Box::new(destination),
                    source: Box::new(source),
                    components,
                    samples: config.samples(1024)?,
                    save: config.save.unwrap_or(false),
                }
            }
            "patch" => {
                let ckpt = checkpoint_key(&config)?;
                let heads = parse_heads(config.heads.as_ref().unwrap_or(&Value::from("all")), ckpt.weights.config())?;
                let donor = match config.donor.as_deref().unwrap_or("negated") {
                    "negated" => Donor::Negated,
                    "independent" => Donor::Independent,
                    other => return Err(usage(format!("unknown donor '{other}'; use negated or independent"))),
                };
                Kind::Patch {
                    data: with_data(&ckpt)?,
                    checkpoint: Box::new(ckpt),
                    heads,
                    donor,
                    samples: config.samples(1024)?,
                }
            }
            "permute-positions" => {
                let ckpt = checkpoint_key(&config)?;
                let permutation = parse_permutation(config.permutation.as_ref(), ckpt.weights.config().seq_len(), seed)?;
                Kind::Permute {
                    data: with_data(&ckpt)?,
                    checkpoint: Box::new(ckpt),
                    permutation,
                    samples: config.samples(1024)?,
                }
            }
            "token-intervene" => {
                let ckpt = checkpoint_key(&config)?;
                let values = config
                    .values
                    .clone()
                    .unwrap_or_else(|| vec![Value::from("mask"), Value::from(0.44), Value::from(-0.24)])
                    .into_iter()
                    .map(|v| match v {
                        Value::String(s) if s.eq_ignore_ascii_case("mask") => Ok(TokenValue::Mask),
                        Value::Number(x) => {
                            let x = x.as_f64().unwrap_or(f64::NAN);
                            if (-10.0..=10.0).contains(&x) {
                                Ok(TokenValue::Value(x))
                            } else {
                                Err(usage(format!("value {x} is outside the tokenizer range [-10, 10]")))
                            }
                        }
                        other => Err(usage(format!("value {other} must be a number or \"mask\""))),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let families = config
                    .families
                    .clone()
                    .unwrap_or_else(|| vec!["low_rank".into(), "unconstrained".into()]);
                if let Some(f) = families.iter().find(|f| !["low_rank", "unconstrained"].contains(&f.as_str())) {
                    return Err(usage(format!("unknown family '{f}'")));
                }
                Kind::Token {
                    data: with_data(&ckpt)?,
                    checkpoint: Box::new(ckpt),
                    values,
                    families,
                    samples: config.samples(1024)?,
                }
            }
            "probe" => {
                let ckpt = checkpoint_key(&config)?;
                let target = match config.target.as_deref().unwrap_or("masked_row") {
                    "masked_row" => ProbeTarget::MaskedRow,
                    "masked_value" => ProbeTarget::MaskedValue,
                    "singular_vector" => ProbeTarget::SingularVector,
                    other => {
                        return Err(usage(format!(
                            "unknown target '{other}'; use masked_row, masked_value or singular_vector"
                        )))
                    }
                };
                let mut probe = ProbeConfig::new(target);
                probe.seed = seed;
                probe.samples = config.samples(probe.samples)?;
                if let Some(l) = config.lambda {
                    if !(l >= 0.0) {
                        return Err(usage("lambda must be non-negative"));
                    }
                    probe.lambda = l;
                }
                if let Some(f) = config.train_fraction {
                    if !(f > 0.0 && f < 1.0) {
                        return Err(usage("train_fraction must lie strictly between 0 and 1"));
                    }
                    probe.train_fraction = f;
                }
                if let Some(layers) = &config.probe_layers {
                    let depth = ckpt.weights.config().layers;
                    if layers.iter().any(|&l| l > depth) {
                        return Err(usage(format!("probe_layers must be at most {depth}")));
                    }
                    probe.layers = Some(layers.clone());
                }
                Kind::Probe {
                    data: with_data(&ckpt)?,
                    checkpoint: Box::new(ckpt),
                    probe,
                }
            }
            "embed-report" => {
                let series = match (&config.checkpoint, &config.checkpoints, &config.run) {
                    (Some(c), None, None) => vec![(load(c)?.step, c.clone())],
                    (None, Some(list), None) => {
                        let mut s = Vec::new();
                        for p in list {
                            s.push((load(p)?.step, p.clone()));
                        }
                        s
                    }
                    (None, None, Some(run)) => list_checkpoints(run)?,
                    _ => return Err(usage("give exactly one of checkpoint, checkpoints or run")),
                };
                if series.is_empty() {
                    return Err(usage("no checkpoints found"));
                }
                Kind::Embed { series }
            }
            "attn-export" => {
                let ckpt = checkpoint_key(&config)?;
                let n = ckpt.weights.config().n;
                Kind::Attention {
                    data: with_data(&ckpt)?,
                    mask: parse_mask(config.mask.as_ref(), n)?,
                    checkpoint: Box::new(ckpt),
                    samples: config.samples(256)?,
                    csv: config.csv.unwrap_or(true),
                    other_factor: config.other_factor.unwrap_or(DEFAULT_OTHER_FACTOR),
                }
            }
            "detect-drop" => {
                let path = match (&config.metrics, &config.run) {
                    (Some(m), None) => m.clone(),
                    (None, Some(r)) => r.clone(),
                    _ => return Err(usage("give exactly one of metrics or run")),
                };
                let series = read_metrics(&path)?;
                let mut transition = TransitionConfig::for_len(series.len());
                if let Some(w) = config.window {
                    transition.window = w;
                }
                if let Some(t) = config.threshold {
                    transition.threshold = t;
                }
                Kind::Detect { series, transition }
            }
            "reproduce" => Kind::Reproduce(Box::new(Suite::prepare(&config)?)),
            other => return Err(usage(format!("unknown command '{other}'"))),
        };
        Ok(Self {
            out: config.out_dir(&command),
            command,
            config,
            resolved,
            kind,
        })
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn resolved(&self) -> &Value {
        &self.resolved
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn seed(&self) -> u64 {
        self.config.seed()
    }

    pub fn run(&self, manifest: &mut RunManifest) -> Result<(), CliError> {
        let out = self.out.as_path();
        let seed = self.seed();
        let arts = &mut manifest.artifacts;
        match &self.kind {
            Kind::Train { trainer, log_every } => {
                arts.push(write_json(out, "train_config.json", trainer.config())?);
                let every = *log_every;
                let outcome = (**trainer)
                    .clone()
                    .run(Some(out), &mut |r| {
                        if every > 0 && r.step % every == 0 {
                            eprintln!(
                                "step {} L={:.5} L_obs={} L_mask={}",
                                r.step,
                                r.loss,
                                opt(r.loss_obs),
                                opt(r.loss_mask)
                            );
                        }
                    })
                    .map_err(runtime)?;
                arts.push(PathBuf::from("metrics.csv"));
                manifest.checkpoints = outcome.checkpoints;
            }
            Kind::Retrain {
                checkpoint,
                components,
                config,
            } => {
                arts.push(write_json(out, "train_config.json", config)?);
                let outcome = component_retrain(checkpoint, components, config, Some(out)).map_err(runtime)?;
                arts.push(PathBuf::from("metrics.csv"));
                manifest.checkpoints = outcome.checkpoints;
            }
            Kind::Eval {
                checkpoint,
                data,
                samples,
            } => {
                let batch = evaluation_batch(data, *samples, None, seed).map_err(runtime)?;
                let (loss, _) = evaluate(&checkpoint.weights, &batch).map_err(runtime)?;
                arts.push(write_json(
                    out,
                    "eval.json",
                    &json!({ "step": checkpoint.step, "data": data, "samples": samples, "loss": loss }),
                )?);
                println!("L={} L_obs={} L_mask={}", loss.total, opt(loss.observed), opt(loss.masked));
            }
            Kind::NucNorm {
                data,
                samples,
                mode,
                tol,
                max_iter,
            } => {
                let report = run_nucnorm(data, *samples, *mode, *tol, *max_iter, seed)?;
                arts.push(write_text(out, "nucnorm.csv", &report.csv)?);
                arts.push(write_json(out, "nucnorm.json", &report.summary)?);
                println!("{}", serde_json::to_string(&report.summary).map_err(runtime)?);
            }
            Kind::Compare {
                checkpoint,
                data,
                p_masks,
                samples,
                mode,
            } => {
                let report = compare_bert_vs_nucnorm(&checkpoint.weights, data, p_masks, *samples, *mode, seed)
                    .map_err(runtime)?;
                arts.push(write_text(out, "compare.csv", &report.to_csv())?);
                arts.push(write_json(out, "compare.json", &report)?);
                print!("{}", report.to_csv());
            }
            Kind::Ablate {
                checkpoint,
                data,
                heads,
                groups,
                samples,
            } => {
                let w = &checkpoint.weights;
                let groups: Vec<HeadGroup> = match (heads, groups.as_deref()) {
                    (Some(h), _) => vec![HeadGroup {
                        name: "selected".into(),
                        heads: h.clone(),
                    }],
                    (None, Some("published")) => published_groups(),
                    _ => {
                        let summary = record_attention(w, data, 256, &MaskMode::Random, seed).map_err(runtime)?;
                        derive_groups(&classify_heads(&summary, DEFAULT_OTHER_FACTOR))
                    }
                };
                let rows = group_ablation(w, data, &groups, *samples, seed).map_err(runtime)?;
                let mut csv = String::from("group,heads,L,L_obs,L_mask,L_base,L_obs_base,L_mask_base,ratio\n");
                for r in &rows {
                    let heads: Vec<String> = r.group.heads.iter().map(|h| h.to_string()).collect();
                    csv.push_str(&format!(
                        "{},\"{}\",{},{},{},{},{},{},{}\n",
                        r.group.name,
                        heads.join(" "),
                        r.with_ablation.total,
                        opt(r.with_ablation.observed),
                        opt(r.with_ablation.masked),
                        r.without_ablation.total,
                        opt(r.without_ablation.observed),
                        opt(r.without_ablation.masked),
                        r.ratio
                    ));
                }
                arts.push(write_text(out, "ablate.csv", &csv)?);
                arts.push(write_json(out, "ablate.json", &rows)?);
                print!("{csv}");
            }
            Kind::Switch {
                destination,
                source,
                components,
                data,
                samples,
                save,
            } => {
                let hybrid =
                    switch_weights(&destination.weights, &source.weights, components).map_err(runtime)?;
                let batch = evaluation_batch(data, *samples, None, seed).map_err(runtime)?;
                let score = |w| evaluate(w, &batch).map(|r| r.0).map_err(runtime);
                let doc = json!({
                    "components": components,
                    "destination_step": destination.step,
                    "source_step": source.step,
                    "destination": score(&destination.weights)?,
                    "source": score(&source.weights)?,
                    "hybrid": score(&hybrid)?,
                });
                if *save {
                    let mut ckpt = Checkpoint::new(destination.step, hybrid);
                    ckpt.metadata = json!({
                        "train_config": destination.metadata.get("train_config"),
                        "switched_from": source.step,
                        "components": components,
                    });
                    save_checkpoint(&out.join("hybrid"), &ckpt).map_err(runtime)?;
                    arts.push(PathBuf::from("hybrid"));
                }
                arts.push(write_json(out, "switch.json", &doc)?);
                println!("{}", serde_json::to_string_pretty(&doc).map_err(runtime)?);
            }
            Kind::Patch {
                checkpoint,
                data,
                heads,
                donor,
                samples,
            } => {
                let input = evaluation_batch(data, *samples, None, seed).map_err(runtime)?;
                let donor_batch = match donor {
                    Donor::Negated => negate(&input)?,
                    Donor::Independent => {
                        let other = evaluation_batch(data, *samples, None, seed.wrapping_add(1)).map_err(runtime)?;
                        with_masks(&other, &input)?
                    }
                };
                // The donor supplies the states; the model sees `input`.
                let (fed, donor_batch) = match donor {
                    Donor::Negated => (donor_batch, input),
                    Donor::Independent => (input, donor_batch),
                };
                let outcome = apply_intervention(
                    &checkpoint.weights,
                    &fed,
                    &InterventionSpec::ActivationPatch {
                        heads: heads.clone(),
                        donor: donor_batch,
                    },
                )
                .map_err(runtime)?;
                let doc = json!({
                    "donor": match donor { Donor::Negated => "negated", Donor::Independent => "independent" },
                    "heads": heads.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
                    "loss_to_input": outcome.loss,
                    "loss_to_donor": outcome.donor_loss,
                    "unpatched_loss_to_input": outcome.baseline,
                });
                arts.push(write_json(out, "patch.json", &doc)?);
                println!("{}", serde_json::to_string_pretty(&doc).map_err(runtime)?);
            }
            Kind::Permute {
                checkpoint,
                data,
                permutation,
                samples,
            } => {
                let batch = evaluation_batch(data, *samples, None, seed).map_err(runtime)?;
                let outcome = apply_intervention(
                    &checkpoint.weights,
                    &batch,
                    &InterventionSpec::PositionPermutation {
                        permutation: permutation.clone(),
                    },
                )
                .map_err(runtime)?;
                let doc = json!({
                    "permutation": permutation,
                    "baseline": outcome.baseline,
                    "permuted": outcome.loss,
                });
                arts.push(write_json(out, "permute.json", &doc)?);
                println!("{}", serde_json::to_string_pretty(&doc).map_err(runtime)?);
            }
            Kind::Token {
                checkpoint,
                data,
                values,
                families,
                samples,
            } => {
                let mut rows = Vec::new();
                let mut csv = String::from("family,value,L_obs,L_mask_prime,L_mask,mean_abs_masked_prediction\n");
                for family in families {
                    let d = family_data(data, family);
                    for v in values {
                        let replacement = match v {
                            TokenValue::Mask => None,
                            TokenValue::Value(x) => Some(*x),
                        };
                        let r = token_intervention(&checkpoint.weights, &d, replacement, *samples, seed)
                            .map_err(runtime)?;
                        csv.push_str(&format!(
                            "{family},{},{},{},{},{}\n",
                            replacement.map(|x| x.to_string()).unwrap_or_else(|| "mask".into()),
                            r.l_obs,
                            r.l_mask_prime,
                            r.l_mask,
                            r.mean_abs_masked_prediction
                        ));
                        rows.push(json!({ "family": family, "report": r }));
                    }
                }
                arts.push(write_text(out, "token_intervene.csv", &csv)?);
                arts.push(write_json(out, "token_intervene.json", &rows)?);
                print!("{csv}");
            }
            Kind::Probe { checkpoint, data, probe } => {
                let result = fit_probe(&checkpoint.weights, data, probe).map_err(runtime)?;
                arts.push(write_text(out, "probe.csv", &result.to_csv())?);
                arts.push(write_json(out, "probe.json", &result)?);
                print!("{}", result.to_csv());
            }
            Kind::Embed { series } => {
                let mut loaded = Vec::new();
                for (step, path) in series {
                    loaded.push((*step, load(path).map_err(runtime)?.weights));
                }
                let reports = embedding_series(&loaded).map_err(runtime)?;
                let mut csv = String::from("step,norm_asymmetry,sign_separability,clustering_score\n");
                for r in &reports {
                    csv.push_str(&format!(
                        "{},{},{},{}\n",
                        r.step.unwrap_or(0),
                        r.norm_asymmetry,
                        r.sign_separability,
                        r.clustering_score
                    ));
                }
                arts.push(write_text(out, "embeddings.csv", &csv)?);
                arts.push(write_json(out, "embeddings.json", &reports)?);
                print!("{csv}");
            }
            Kind::Attention {
                checkpoint,
                data,
                mask,
                samples,
                csv,
                other_factor,
            } => {
                let summary = record_attention(&checkpoint.weights, data, *samples, mask, seed).map_err(runtime)?;
                write_attention_export(&summary, out, *csv).map_err(runtime)?;
                arts.extend(["attention.f32", "attention.json"].map(PathBuf::from));
                if *csv {
                    arts.push(PathBuf::from("head_stats.csv"));
                }
                let labels = classify_heads(&summary, *other_factor);
                let mut text = String::from("layer,head,label,row_score,column_score,diagonal_score,margin,strength\n");
                for l in &labels {
                    text.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        l.head.layer + 1,
                        l.head.head + 1,
                        l.kind,
                        l.row_score,
                        l.column_score,
                        l.diagonal_score,
                        l.margin,
                        l.strength
                    ));
                }
                arts.push(write_text(out, "head_labels.csv", &text)?);
                arts.push(write_json(out, "head_labels.json", &labels)?);
                print!("{text}");
            }
            Kind::Detect { series, transition } => {
                let report = detect_transition(series, *transition).map_err(runtime)?;
                arts.push(write_json(out, "transition.json", &report)?);
                println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
            }
            Kind::Reproduce(suite) => suite.run(out, seed, arts)?,
        }
        Ok(())
    }
}

fn family_data(data: &DataConfig, family: &str) -> DataConfig {
    let entries = match data.family {
        MatrixFamily::LowRank { entries, .. } | MatrixFamily::Unconstrained { entries } => entries,
    };
    let rank = match data.family {
        MatrixFamily::LowRank { rank, .. } => rank,
        MatrixFamily::Unconstrained { .. } => data.n,
    };
    DataConfig {
        family: if family == "unconstrained" {
            MatrixFamily::Unconstrained { entries }
        } else {
            MatrixFamily::LowRank { rank, entries }
        },
        ..*data
    }
}

pub(crate) fn negate(batch: &Batch) -> Result<Batch, CliError> {
    Batch::new(
        batch
            .instances
            .iter()
            .map(|i| MaskedInstance::new(i.matrix.negated(), i.mask.clone()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(runtime)?,
    )
    .map_err(runtime)
}

/// `matrices` re-masked with the masks of `masks`.
fn with_masks(matrices: &Batch, masks: &Batch) -> Result<Batch, CliError> {
    Batch::new(
        matrices
            .instances
            .iter()
            .zip(&masks.instances)
            .map(|(m, k)| MaskedInstance::new(m.matrix.clone(), k.mask.clone()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(runtime)?,
    )
    .map_err(runtime)
}

pub(crate) struct NucNormRun {
    pub summary: Value,
    pub csv: String,
    pub l_obs: f64,
    pub l_mask: f64,
}

pub(crate) fn run_nucnorm(
    data: &DataConfig,
    samples: usize,
    mode: Mode,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<NucNormRun, CliError> {
    let batch = evaluation_batch(data, samples, None, seed).map_err(runtime)?;
    let mut csv = String::from("instance,iterations,converged,L_obs,L_mask,nuclear_norm\n");
    let (mut obs_sum, mut obs_n, mut mask_sum, mut mask_n) = (0.0, 0usize, 0.0, 0usize);
    let (mut iters, mut converged, mut nn_sum) = (0usize, 0usize, 0.0);
    for (k, inst) in batch.instances.iter().enumerate() {
        let mut problem = NucNormProblem::from_instance(inst, mode);
        problem.tol = tol;
        problem.max_iter = max_iter;
        if inst.mask.observed_count() == 0 {
            // Nothing observed: both objectives are minimized by zero.
            problem.mode = Mode::Constrained;
        }
        let sol = solve(&problem).map_err(runtime)?;
        let (u, it, conv) = (sol.u, sol.iterations, sol.converged);
        let (mut so, mut no, mut sm, mut nm) = (0.0, 0usize, 0.0, 0usize);
        for (idx, (&t, &o)) in inst.matrix.values.iter().zip(&inst.mask.observed).enumerate() {
            let e = (u[(idx / inst.n(), idx % inst.n())] - t).powi(2);
            if o {
                so += e;
                no += 1;
            } else {
                sm += e;
                nm += 1;
            }
        }
        let nn = nuclear_norm(&u).map_err(runtime)?;
        let per = |s: f64, c: usize| if c == 0 { String::new() } else { (s / c as f64).to_string() };
        csv.push_str(&format!("{k},{it},{conv},{},{},{nn}\n", per(so, no), per(sm, nm)));
        obs_sum += so;
        obs_n += no;
        mask_sum += sm;
        mask_n += nm;
        iters += it;
        converged += conv as usize;
        nn_sum += nn;
    }
    let mean = |s: f64, c: usize| if c == 0 { f64::NAN } else { s / c as f64 };
    let l_obs = mean(obs_sum, obs_n);
    let l_mask = mean(mask_sum, mask_n);
    let summary = json!({
        "mode": mode,
        "data": data,
        "samples": samples,
        "L": mean(obs_sum + mask_sum, obs_n + mask_n),
        "L_obs": l_obs,
        "L_mask": l_mask,
        "mean_iterations": iters as f64 / samples as f64,
        "converged": converged,
        "mean_nuclear_norm": nn_sum / samples as f64,
    });
    Ok(NucNormRun {
        summary,
        csv,
        l_obs,
        l_mask,
    })
}
