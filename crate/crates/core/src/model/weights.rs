use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::data::stream_rng;
use crate::tensor::{Real, Tensor};

/// Standard deviation of the normal initialization.
pub const INIT_STD: f64 = 0.02;
const INIT_STREAM: u64 = 0x1417_0000;

/// Named parameter groups used for freezing, re-initialization and
/// transplanting weights between checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Token embedding table and the embedding layer norm.
    TokenEmbeddings,
    PositionalEmbeddings,
    /// Query, key, value and output projections plus the post-attention norm.
    Attention,
    /// Query, key and value projections only.
    AttentionQkv,
    /// Both MLP projections plus the post-MLP norm.
    Mlp,
    Head,
}

impl Component {
    /// The groups that partition every parameter of the model.
    pub const ALL: [Component; 5] = [
        Component::TokenEmbeddings,
        Component::PositionalEmbeddings,
        Component::Attention,
        Component::Mlp,
        Component::Head,
    ];

    pub fn contains(self, name: &str) -> bool {
        match self {
            Self::TokenEmbeddings => name == "embeddings.token" || name.starts_with("embeddings.norm."),
            Self::PositionalEmbeddings => name == "embeddings.position",
            Self::Attention => name.contains(".attention."),
            Self::AttentionQkv => {
                name.contains(".attention.query.")
                    || name.contains(".attention.key.")
                    || name.contains(".attention.value.")
            }
            Self::Mlp => name.contains(".mlp."),
            Self::Head => name.starts_with("head."),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TokenEmbeddings => "token_embeddings",
            Self::PositionalEmbeddings => "positional_embeddings",
            Self::Attention => "attention",
            Self::AttentionQkv => "attention_qkv",
            Self::Mlp => "mlp",
            Self::Head => "head",
        }
    }

    /// Parses a comma-separated list; `all` expands to [`Component::ALL`].
    pub fn parse_list(list: &str) -> Result<Vec<Component>, ModelError> {
        let mut out = Vec::new();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if item == "all" {
                out.extend(Self::ALL);
            } else {
                out.push(item.parse()?);
            }
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "token_embeddings" => Ok(Self::TokenEmbeddings),
            "positional_embeddings" => Ok(Self::PositionalEmbeddings),
            "attention" => Ok(Self::Attention),
            "attention_qkv" => Ok(Self::AttentionQkv),
            "mlp" => Ok(Self::Mlp),
            "head" => Ok(Self::Head),
            other => Err(ModelError::UnknownComponent(other.to_string())),
        }
    }
}

/// Every named parameter of the encoder, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<F> {
    config: ModelConfig,
    tensors: IndexMap<String, Tensor<F>>,
}

enum InitKind {
    Normal,
    Zeros,
    Ones,
}

/// Parameter names and shapes in canonical order.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let d = config.hidden;
    let mut out = vec![
        ("embeddings.token".to_string(), vec![config.vocab_size, d], InitKind::Normal),
        ("embeddings.position".to_string(), vec![config.seq_len(), d], InitKind::Normal),
        ("embeddings.norm.gamma".to_string(), vec![d], InitKind::Ones),
        ("embeddings.norm.beta".to_string(), vec![d], InitKind::Zeros),
    ];
    for l in 0..config.layers {
        for proj in ["query", "key", "value", "output"] {
            out.push((format!("layers.{l}.attention.{proj}.weight"), vec![d, d], InitKind::Normal));
            out.push((format!("layers.{l}.attention.{proj}.bias"), vec![d], InitKind::Zeros));
        }
        out.push((format!("layers.{l}.attention.norm.gamma"), vec![d], InitKind::Ones));
        out.push((format!("layers.{l}.attention.norm.beta"), vec![d], InitKind::Zeros));
        out.push((format!("layers.{l}.mlp.intermediate.weight"), vec![d, config.mlp_hidden], InitKind::Normal));
        out.push((format!("layers.{l}.mlp.intermediate.bias"), vec![config.mlp_hidden], InitKind::Zeros));
        out.push((format!("layers.{l}.mlp.output.weight"), vec![config.mlp_hidden, d], InitKind::Normal));
        out.push((format!("layers.{l}.mlp.output.bias"), vec![d], InitKind::Zeros));
        out.push((format!("layers.{l}.mlp.norm.gamma"), vec![d], InitKind::Ones));
        out.push((format!("layers.{l}.mlp.norm.beta"), vec![d], InitKind::Zeros));
    }
    out.push(("head.weight".to_string(), vec![d, 1], InitKind::Normal));
    out.push(("head.bias".to_string(), vec![1], InitKind::Zeros));
    out
}

/// Expected `(name, shape)` pairs for a configuration.
pub fn parameter_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(config).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Normal(0, 0.02) weights, zero biases, identity layer norms.
///
/// Values are drawn in double precision and rounded, so `f32` and `f64`
/// models from the same seed agree up to rounding.
pub fn init_model<F: Real>(config: &ModelConfig, seed: u64) -> Result<ModelWeights<F>, ModelError> {
    config.validate()?;
    let mut rng = stream_rng(seed, INIT_STREAM);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut tensors = IndexMap::new();
    for (name, shape, kind) in layout(config) {
        let t = match kind {
            InitKind::Normal => Tensor::from_fn(&shape, |_| F::from_f64_lossy(normal.sample(&mut rng))),
            InitKind::Zeros => Tensor::zeros(&shape),
            InitKind::Ones => Tensor::full(&shape, F::one()),
        };
        tensors.insert(name, t);
    }
    Ok(ModelWeights {
        config: *config,
        tensors,
    })
}

impl<F: Real> ModelWeights<F> {
    /// Assembles weights from named tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, mut named: IndexMap<String, Tensor<F>>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut tensors = IndexMap::new();
        for (name, shape) in parameter_shapes(&config) {
            let t = named
                .shift_remove(&name)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::TensorShape {
                    name,
                    expected: shape,
                    got: t.shape().to_vec(),
                });
            }
            if !t.all_finite() {
                return Err(ModelError::NonFinite(name));
            }
            tensors.insert(name, t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(ModelError::UnexpectedTensor(extra.clone()));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>, ModelError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<G: Real>(&self) -> ModelWeights<G> {
        ModelWeights {
            config: self.config,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Overwrites every tensor belonging to `component` with the value from
    /// `source`.
    pub fn copy_component_from(&mut self, source: &Self, component: Component) -> Result<(), ModelError> {
        if source.config != self.config {
            return Err(ModelError::ConfigMismatch {
                expected: Box::new(self.config),
                got: Box::new(source.config),
            });
        }
        for (name, t) in self.tensors.iter_mut() {
            if component.contains(name) {
                *t = source.get(name)?.clone();
            }
        }
        Ok(())
    }
}
