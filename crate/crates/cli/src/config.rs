//! Flat JSON experiment configuration with `key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use matcomp_core::data::{DataConfig, EntryDistribution, MatrixFamily};
use matcomp_core::model::{Component, HeadId, ModelConfig};

use crate::CliError;

pub const COMMANDS: [&str; 15] = [
    "train",
    "retrain-component",
    "eval",
    "nucnorm",
    "compare",
    "ablate",
    "switch",
    "patch",
    "permute-positions",
    "token-intervene",
    "probe",
    "embed-report",
    "attn-export",
    "detect-drop",
    "reproduce",
];

const DATA_KEYS: [&str; 5] = ["rank", "p_mask", "entries", "entry_scale", "family"];
const TRAIN_KEYS: [&str; 7] = [
    "batch_size",
    "steps",
    "lr",
    "checkpoint_every",
    "checkpoint_steps",
    "log_every",
    "freeze",
];

/// Keys each command accepts besides `command`, `seed` and `out`.
fn allowed_keys(command: &str) -> Vec<&'static str> {
    let mut keys: Vec<&'static str> = match command {
        "train" => vec!["preset", "n", "layers", "heads", "hidden", "mlp_hidden", "resume"],
        "retrain-component" => vec!["checkpoint", "components"],
        "eval" => vec!["checkpoint", "samples"],
        "nucnorm" => vec!["n", "samples", "mode", "lambda", "tol", "max_iter"],
        "compare" => vec!["checkpoint", "p_masks", "samples", "mode", "lambda"],
        "ablate" => vec!["checkpoint", "heads", "groups", "samples"],
        "switch" => vec!["checkpoint", "source", "components", "samples", "save"],
        "patch" => vec!["checkpoint", "heads", "donor", "samples"],
        "permute-positions" => vec!["checkpoint", "permutation", "samples"],
        "token-intervene" => vec!["checkpoint", "values", "families", "samples"],
        "probe" => vec!["checkpoint", "target", "lambda", "train_fraction", "samples", "probe_layers"],
        "embed-report" => vec!["checkpoint", "checkpoints", "run"],
        "attn-export" => vec!["checkpoint", "samples", "mask", "csv", "other_factor"],
        "detect-drop" => vec!["metrics", "run", "window", "threshold"],
        "reproduce" => vec![
            "suite",
            "run",
            "checkpoint",
            "pre_checkpoint",
            "post_checkpoint",
            "retrain_runs",
            "rank_runs",
            "samples",
            "tolerances",
            "strict",
        ],
        _ => vec![],
    };
    match command {
        "train" => {
            keys.extend(DATA_KEYS);
            keys.extend(TRAIN_KEYS);
        }
        "retrain-component" => keys.extend(TRAIN_KEYS),
        "eval" | "nucnorm" | "compare" | "ablate" | "switch" | "patch" | "permute-positions" | "probe"
        | "attn-export" => keys.extend(DATA_KEYS),
        "token-intervene" => keys.extend(["rank", "p_mask", "entries", "entry_scale"]),
        _ => {}
    }
    keys
}

/// Every key any command understands. Values that admit several shapes
/// are kept as raw JSON and interpreted by the command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,

    pub preset: Option<String>,
    pub n: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<Value>,
    pub hidden: Option<usize>,
    pub mlp_hidden: Option<usize>,
    pub resume: Option<PathBuf>,

    pub rank: Option<usize>,
    pub p_mask: Option<f64>,
    pub entries: Option<String>,
    pub entry_scale: Option<f64>,
    pub family: Option<String>,

    pub batch_size: Option<usize>,
    pub steps: Option<u64>,
    pub lr: Option<f64>,
    pub checkpoint_every: Option<u64>,
    pub checkpoint_steps: Option<Vec<u64>>,
    pub log_every: Option<u64>,
    pub freeze: Option<Value>,

    pub checkpoint: Option<PathBuf>,
    pub checkpoints: Option<Vec<PathBuf>>,
    pub source: Option<PathBuf>,
    pub components: Option<Value>,
    pub samples: Option<usize>,
    pub mode: Option<String>,
    pub lambda: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub p_masks: Option<Vec<f64>>,
    pub groups: Option<String>,
    pub save: Option<bool>,
    pub donor: Option<String>,
    pub permutation: Option<Value>,
    pub values: Option<Vec<Value>>,
    pub families: Option<Vec<String>>,
    pub target: Option<String>,
    pub train_fraction: Option<f64>,
    /// Hidden-state indices for probes (`0` = embeddings).
    pub probe_layers: Option<Vec<usize>>,
    pub run: Option<PathBuf>,
    pub mask: Option<Value>,
    pub csv: Option<bool>,
    pub other_factor: Option<f64>,
    pub metrics: Option<PathBuf>,
    pub window: Option<usize>,
    pub threshold: Option<f64>,

    pub suite: Option<String>,
    pub pre_checkpoint: Option<PathBuf>,
    pub post_checkpoint: Option<PathBuf>,
    pub retrain_runs: Option<BTreeMap<String, PathBuf>>,
    pub rank_runs: Option<BTreeMap<String, PathBuf>>,
    pub tolerances: Option<BTreeMap<String, f64>>,
    pub strict: Option<bool>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses the right-hand side of an override: JSON when it parses, a plain
/// string otherwise.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Reads the config file (if any), applies flags and overrides, and checks
/// every key against the command.
pub fn resolve(
    command: &str,
    path: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<(Config, Value), CliError> {
    if !COMMANDS.contains(&command) {
        return Err(usage(format!(
            "unknown command '{command}'; expected one of: {}",
            COMMANDS.join(", ")
        )));
    }
    let mut map: Map<String, Value> = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            match serde_json::from_str(&text) {
                // A run manifest stands for the config it recorded.
                Ok(Value::Object(m)) if m.contains_key("version") => match m.get("config") {
                    Some(Value::Object(c)) => c.clone(),
                    _ => return Err(usage(format!("manifest {} has no config object", p.display()))),
                },
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(usage(format!("config {} must be a JSON object", p.display()))),
                Err(e) => return Err(usage(format!("config {} is not valid JSON: {e}", p.display()))),
            }
        }
        None => Map::new(),
    };
    for item in overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("override '{item}' is not of the form key=value")))?;
        map.insert(k.trim().to_string(), override_value(v.trim()));
    }
    if let Some(s) = seed {
        map.insert("seed".into(), Value::from(s));
    }
    if let Some(o) = out {
        map.insert("out".into(), Value::String(o.display().to_string()));
    }
    match map.get("command") {
        None => {
            map.insert("command".into(), Value::String(command.into()));
        }
        Some(Value::String(c)) if c == command => {}
        Some(other) => {
            return Err(usage(format!(
                "config is for command {other}, but '{command}' was requested"
            )))
        }
    }
    let allowed = allowed_keys(command);
    for key in map.keys() {
        if !["command", "seed", "out"].contains(&key.as_str()) && !allowed.contains(&key.as_str()) {
            let known = serde_json::from_value::<Config>(Value::Object(
                [(key.clone(), Value::Null)].into_iter().collect(),
            ))
            .is_ok();
            return Err(usage(if known {
                format!("key '{key}' does not apply to '{command}'")
            } else {
                format!("unknown key '{key}'")
            }));
        }
    }
    let value = Value::Object(map);
    let config: Config =
        serde_json::from_value(value.clone()).map_err(|e| usage(format!("invalid config: {e}")))?;
    Ok((config, value))
}

impl Config {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self, command: &str) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(command))
    }

    pub fn require<'a, T>(&self, value: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
        value.as_ref().ok_or_else(|| usage(format!("missing required key '{key}'")))
    }

    pub fn samples(&self, default: usize) -> Result<usize, CliError> {
        match self.samples.unwrap_or(default) {
            0 => Err(usage("samples must be at least 1")),
            s => Ok(s),
        }
    }

    pub fn entry_distribution(&self) -> Result<EntryDistribution, CliError> {
        let name = self.entries.as_deref().unwrap_or("uniform");
        let scale = self.entry_scale;
        if let Some(s) = scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(usage(format!("entry_scale must be positive, got {s}")));
            }
        }
        match name {
            "uniform" => {
                let h = scale.unwrap_or(1.0);
                Ok(EntryDistribution::Uniform { low: -h, high: h })
            }
            "normal" => Ok(EntryDistribution::normal(0.0, scale.unwrap_or(0.25))),
            "laplace" => Ok(EntryDistribution::laplace(0.0, scale.unwrap_or(0.25))),
            other => Err(usage(format!("unknown entries '{other}'; use uniform, normal or laplace"))),
        }
    }

    /// Instance distribution: `base` with every data key that is set
    /// applied on top.
    pub fn data_config(&self, base: DataConfig) -> Result<DataConfig, CliError> {
        let mut data = base;
        if let Some(n) = self.n {
            data.n = n;
        }
        if let Some(p) = self.p_mask {
            if !(0.0..=1.0).contains(&p) {
                return Err(usage(format!("p_mask {p} is outside [0, 1]")));
            }
            data.p_mask = p;
        }
        let (old_rank, old_entries) = match data.family {
            MatrixFamily::LowRank { rank, entries } => (rank, entries),
            MatrixFamily::Unconstrained { entries } => (data.n, entries),
        };
        let entries = if self.entries.is_some() || self.entry_scale.is_some() {
            self.entry_distribution()?
        } else {
            old_entries
        };
        let family = self.family.as_deref().unwrap_or(match data.family {
            MatrixFamily::LowRank { .. } => "low_rank",
            MatrixFamily::Unconstrained { .. } => "unconstrained",
        });
        data.family = match family {
            "low_rank" => {
                let rank = self.rank.unwrap_or(old_rank.min(data.n));
                if rank == 0 || rank > data.n {
                    return Err(usage(format!("rank {rank} is invalid for {0}x{0} matrices", data.n)));
                }
                MatrixFamily::LowRank { rank, entries }
            }
            "unconstrained" => MatrixFamily::Unconstrained { entries },
            other => return Err(usage(format!("unknown family '{other}'; use low_rank or unconstrained"))),
        };
        Ok(data)
    }

    pub fn components(&self, value: &Option<Value>, key: &str) -> Result<Vec<Component>, CliError> {
        match value {
            None => Ok(Vec::new()),
            Some(v) => parse_components(v).map_err(|e| usage(format!("{key}: {e}"))),
        }
    }
}

pub fn parse_components(v: &Value) -> Result<Vec<Component>, String> {
    let list = match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items
            .iter()
            .map(|i| i.as_str().map(String::from).ok_or("components must be strings"))
            .collect::<Result<Vec<_>, _>>()?
            .join(","),
        _ => return Err("expected a string or a list of strings".into()),
    };
    Component::parse_list(&list).map_err(|e| e.to_string())
}

/// Heads given as `"all"`, `"(2,1),(3,4)"` or `[[2,1],[3,4]]`, one-based.
pub fn parse_heads(v: &Value, model: &ModelConfig) -> Result<Vec<HeadId>, CliError> {
    let pairs: Vec<(usize, usize)> = match v {
        Value::String(s) if s == "all" => return Ok(HeadId::all(model.layers, model.heads)),
        Value::String(s) => {
            let cleaned: String = s.chars().filter(|c| !c.is_whitespace()).collect();
            let mut pairs = Vec::new();
            for part in cleaned.split("),").map(|p| p.trim_matches(|c| c == '(' || c == ')')) {
                if part.is_empty() {
                    continue;
                }
                let (l, h) = part
                    .split_once(',')
                    .ok_or_else(|| usage(format!("cannot parse head '{part}'")))?;
                let parse = |x: &str| x.parse::<usize>().map_err(|_| usage(format!("cannot parse head '{part}'")));
                pairs.push((parse(l)?, parse(h)?));
            }
            pairs
        }
        Value::Array(items) => items
            .iter()
            .map(|i| {
                serde_json::from_value::<(usize, usize)>(i.clone())
                    .map_err(|_| usage(format!("head {i} must be a [layer, head] pair")))
            })
            .collect::<Result<_, _>>()?,
        _ => return Err(usage("heads must be \"all\", a string like \"(2,1),(3,4)\" or a list of pairs")),
    };
    pairs
        .into_iter()
        .map(|(l, h)| {
            if l == 0 || h == 0 || l > model.layers || h > model.heads {
                Err(usage(format!(
                    "head ({l},{h}) is outside a {} x {} model (indices are one-based)",
                    model.layers, model.heads
                )))
            } else {
                Ok(HeadId::one_based(l, h))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_or_string() {
        assert_eq!(override_value("3"), Value::from(3));
        assert_eq!(override_value("[1,2]"), serde_json::json!([1, 2]));
        assert_eq!(override_value("desk"), Value::from("desk"));
    }

    #[test]
    fn keys_are_checked_per_command() {
        let r = resolve("eval", None, None, None, &["steps=3".into()]);
        assert!(matches!(r, Err(CliError::Usage(m)) if m.contains("does not apply")));
        let r = resolve("eval", None, None, None, &["bogus=3".into()]);
        assert!(matches!(r, Err(CliError::Usage(m)) if m.contains("unknown key")));
        let r = resolve("nope", None, None, None, &[]);
        assert!(matches!(r, Err(CliError::Usage(_))));
        let (c, v) = resolve("train", None, Some(Path::new("x")), Some(4), &["steps=10".into()]).unwrap();
        assert_eq!((c.steps, c.seed), (Some(10), Some(4)));
        assert_eq!(v["command"], "train");
    }

    #[test]
    fn every_allowed_key_is_a_config_field() {
        for cmd in COMMANDS {
            for key in allowed_keys(cmd) {
                let doc = Value::Object([(key.to_string(), Value::Null)].into_iter().collect());
                assert!(serde_json::from_value::<Config>(doc).is_ok(), "{cmd}: {key}");
            }
        }
    }

    #[test]
    fn head_lists() {
        let m = ModelConfig::new(5, 4, 8, 16);
        assert_eq!(parse_heads(&Value::from("all"), &m).unwrap().len(), 32);
        let h = parse_heads(&Value::from("(2,1), (3,4)"), &m).unwrap();
        assert_eq!(h, vec![HeadId::new(1, 0), HeadId::new(2, 3)]);
        assert_eq!(parse_heads(&serde_json::json!([[4, 8]]), &m).unwrap(), vec![HeadId::new(3, 7)]);
        assert!(parse_heads(&Value::from("(5,1)"), &m).is_err());
        assert!(parse_heads(&Value::from("(0,1)"), &m).is_err());
    }

    #[test]
    fn data_overrides() {
        let c = Config {
            rank: Some(3),
            entries: Some("laplace".into()),
            ..Config::default()
        };
        let d = c.data_config(DataConfig::low_rank(7, 2, 0.3)).unwrap();
        assert_eq!(
            d.family,
            MatrixFamily::LowRank {
                rank: 3,
                entries: EntryDistribution::laplace(0.0, 0.25)
            }
        );
        let bad = Config {
            rank: Some(8),
            ..Config::default()
        };
        assert!(bad.data_config(DataConfig::low_rank(7, 2, 0.3)).is_err());
    }
}
