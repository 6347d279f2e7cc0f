//! Encoder forward pass with recording and intervention hooks.
//!
//! Hook points, per layer:
//! - attention probabilities right after the softmax (uniform ablation),
//! - the per-head context `softmax(QK^T) V`, before the output projection
//!   (activation patching).
//!
//! Embedding-table interventions are applied to the weights themselves
//! (see `interp::permute_positions`).

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ModelError, ModelWeights};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Zero-based `(layer, head)` index. Displayed one-based, e.g. `(2,1)` is
/// the first head of the second layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn one_based(layer: usize, head: usize) -> Self {
        Self {
            layer: layer - 1,
            head: head - 1,
        }
    }

    /// Every head of a `layers x heads` model.
    pub fn all(layers: usize, heads: usize) -> Vec<HeadId> {
        (0..layers)
            .flat_map(|l| (0..heads).map(move |h| HeadId::new(l, h)))
            .collect()
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.layer + 1, self.head + 1)
    }
}

/// Internal states captured during a forward pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardRecord<F> {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    /// Per layer `[batch, heads, seq, seq]` attention probabilities.
    pub attention: Vec<Tensor<F>>,
    /// Per layer `[batch, seq, hidden]` head outputs before the output
    /// projection; head `h` occupies columns `h*dh..(h+1)*dh`.
    pub context: Vec<Tensor<F>>,
    /// Per layer `[batch, seq, hidden]` states after the attention block.
    pub after_attention: Vec<Tensor<F>>,
    /// Per layer `[batch, seq, hidden]` states after the MLP block.
    pub after_mlp: Vec<Tensor<F>>,
    /// `[batch, seq, hidden]` normalized embeddings fed to the first layer.
    pub embeddings: Tensor<F>,
}

impl<F: Real> ForwardRecord<F> {
    pub fn layers(&self) -> usize {
        self.attention.len()
    }

    /// Final hidden states.
    pub fn last_hidden(&self) -> &Tensor<F> {
        self.after_mlp.last().unwrap_or(&self.embeddings)
    }

    /// Hidden states after `layer` blocks (`0` = embeddings).
    pub fn hidden(&self, layer: usize) -> Option<&Tensor<F>> {
        if layer == 0 {
            Some(&self.embeddings)
        } else {
            self.after_mlp.get(layer - 1)
        }
    }

    /// Attention row of `query` in sample `b` at a head.
    pub fn attention_row(&self, head: HeadId, b: usize, query: usize) -> &[F] {
        let s = self.seq_len;
        let start = ((b * self.heads + head.head) * s + query) * s;
        &self.attention[head.layer].data()[start..start + s]
    }
}

/// Donor states substituted for the context of selected heads.
#[derive(Clone, Copy, Debug)]
pub struct ActivationPatch<'a, F> {
    pub heads: &'a [HeadId],
    pub donor: &'a ForwardRecord<F>,
}

#[derive(Clone, Debug, Default)]
pub struct Interventions<'a, F> {
    /// Heads whose attention probabilities are replaced by `1/S`.
    pub uniform_ablation: Vec<HeadId>,
    pub patch: Option<ActivationPatch<'a, F>>,
}

impl<F> Interventions<'_, F> {
    pub fn none() -> Self {
        Self {
            uniform_ablation: Vec::new(),
            patch: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.uniform_ablation.is_empty() && self.patch.is_none()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<'a, F> {
    pub record: bool,
    pub interventions: Interventions<'a, F>,
}

impl<'a, F> ForwardOptions<'a, F> {
    pub fn plain() -> Self {
        Self {
            record: false,
            interventions: Interventions::none(),
        }
    }

    pub fn recording() -> Self {
        Self {
            record: true,
            interventions: Interventions::none(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    /// `[batch, n * n]` predictions in row-major matrix order.
    pub predictions: Tensor<F>,
    pub record: Option<ForwardRecord<F>>,
}

/// Forward pass of a graph built on a caller-owned tape.
pub struct Graph<F> {
    pub prediction: Var,
    /// Parameter leaves in the weights' canonical order.
    pub params: IndexMap<String, Var>,
    pub record: Option<ForwardRecord<F>>,
}

/// Evaluates the encoder on `tokens` (`batch * n^2` ids) without gradients.
pub fn forward<F: Real>(
    weights: &ModelWeights<F>,
    tokens: &[u32],
    options: &ForwardOptions<'_, F>,
) -> Result<ForwardOutput<F>, ModelError> {
    let mut tape = Tape::inference();
    let graph = build_graph(&mut tape, weights, &|_| false, tokens, options)?;
    let predictions = tape.value(graph.prediction).clone();
    Ok(ForwardOutput {
        predictions,
        record: graph.record,
    })
}

fn check_heads<F: Real>(weights: &ModelWeights<F>, heads: &[HeadId]) -> Result<(), ModelError> {
    let cfg = weights.config();
    match heads.iter().find(|h| h.layer >= cfg.layers || h.head >= cfg.heads) {
        Some(h) => Err(ModelError::InvalidHead {
            layer: h.layer,
            head: h.head,
        }),
        None => Ok(()),
    }
}

/// Records the encoder on `tape`. Parameters for which `trainable` returns
/// true become differentiable leaves.
pub fn build_graph<F: Real>(
    tape: &mut Tape<F>,
    weights: &ModelWeights<F>,
    trainable: &dyn Fn(&str) -> bool,
    tokens: &[u32],
    options: &ForwardOptions<'_, F>,
) -> Result<Graph<F>, ModelError> {
    let cfg = *weights.config();
    let (s, d, h) = (cfg.seq_len(), cfg.hidden, cfg.heads);
    let dh = cfg.head_dim();
    if tokens.is_empty() || !tokens.len().is_multiple_of(s) {
        return Err(ModelError::SequenceLength {
            seq_len: s,
            got: tokens.len(),
        });
    }
    let b = tokens.len() / s;
    let mut ids = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(ModelError::UnknownToken { id: t });
        }
        ids.push(t as usize);
    }
    let iv = &options.interventions;
    check_heads(weights, &iv.uniform_ablation)?;
    if let Some(patch) = &iv.patch {
        check_heads(weights, patch.heads)?;
        let donor = patch.donor;
        if donor.batch != b || donor.seq_len != s || donor.layers() != cfg.layers || donor.heads != h {
            return Err(ModelError::DonorShape(format!(
                "donor record is batch {} x seq {} x {} layers x {} heads, input is batch {b} x seq {s} x {} layers x {h} heads",
                donor.batch,
                donor.seq_len,
                donor.layers(),
                donor.heads,
                cfg.layers
            )));
        }
    }

    let mut params = IndexMap::with_capacity(weights.len());
    for (name, t) in weights.iter() {
        let var = tape.leaf(t.clone(), trainable(name));
        params.insert(name.to_string(), var);
    }
    let p = |name: &str| -> Result<Var, ModelError> {
        params
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    };
    let eps = F::from_f64_lossy(cfg.layer_norm_eps);

    let tok = tape.gather(p("embeddings.token")?, &ids)?;
    let tok = tape.reshape(tok, &[b, s, d])?;
    let summed = tape.add(tok, p("embeddings.position")?)?;
    let mut x = tape.layer_norm(summed, p("embeddings.norm.gamma")?, p("embeddings.norm.beta")?, eps)?;

    let mut record = options.record.then(|| ForwardRecord {
        batch: b,
        seq_len: s,
        heads: h,
        attention: Vec::with_capacity(cfg.layers),
        context: Vec::with_capacity(cfg.layers),
        after_attention: Vec::with_capacity(cfg.layers),
        after_mlp: Vec::with_capacity(cfg.layers),
        embeddings: tape.value(x).clone(),
    });

    let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
    for l in 0..cfg.layers {
        let pre = format!("layers.{l}.attention");
        let mut heads_of = |proj: &str| -> Result<Var, ModelError> {
            let y = linear(tape, x, p(&format!("{pre}.{proj}.weight"))?, p(&format!("{pre}.{proj}.bias"))?)?;
            let y = tape.reshape(y, &[b, s, h, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            Ok(tape.reshape(y, &[b * h, s, dh])?)
        };
        let q = heads_of("query")?;
        let k = heads_of("key")?;
        let v = heads_of("value")?;

        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, scale);
        let mut probs = tape.softmax(scores);

        let ablated: Vec<usize> = iv
            .uniform_ablation
            .iter()
            .filter(|hd| hd.layer == l)
            .map(|hd| hd.head)
            .collect();
        if !ablated.is_empty() {
            let mut t = tape.value(probs).clone();
            let uniform = F::one() / F::from_usize(s).unwrap();
            let block = s * s;
            for bi in 0..b {
                for &hd in &ablated {
                    let start = (bi * h + hd) * block;
                    t.data_mut()[start..start + block].fill(uniform);
                }
            }
            probs = tape.constant(t);
        }
        if let Some(rec) = record.as_mut() {
            rec.attention.push(tape.value(probs).clone().reshape(&[b, h, s, s])?);
        }

        let ctx = tape.batch_matmul(probs, v, false)?;
        let ctx = tape.reshape(ctx, &[b, h, s, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let mut ctx = tape.reshape(ctx, &[b, s, d])?;

        if let Some(patch) = &iv.patch {
            let patched: Vec<usize> = patch.heads.iter().filter(|hd| hd.layer == l).map(|hd| hd.head).collect();
            if !patched.is_empty() {
                let donor = patch.donor.context[l].data();
                let mut t = tape.value(ctx).clone();
                for row in 0..b * s {
                    for &hd in &patched {
                        let range = row * d + hd * dh..row * d + (hd + 1) * dh;
                        t.data_mut()[range.clone()].copy_from_slice(&donor[range]);
                    }
                }
                ctx = tape.constant(t);
            }
        }
        if let Some(rec) = record.as_mut() {
            rec.context.push(tape.value(ctx).clone());
        }

        let attn_out = linear(tape, ctx, p(&format!("{pre}.output.weight"))?, p(&format!("{pre}.output.bias"))?)?;
        let res = tape.add(x, attn_out)?;
        x = tape.layer_norm(res, p(&format!("{pre}.norm.gamma"))?, p(&format!("{pre}.norm.beta"))?, eps)?;
        if let Some(rec) = record.as_mut() {
            rec.after_attention.push(tape.value(x).clone());
        }

        let mlp = format!("layers.{l}.mlp");
        let hidden = linear(
            tape,
            x,
            p(&format!("{mlp}.intermediate.weight"))?,
            p(&format!("{mlp}.intermediate.bias"))?,
        )?;
        let hidden = tape.gelu(hidden);
        let out = linear(tape, hidden, p(&format!("{mlp}.output.weight"))?, p(&format!("{mlp}.output.bias"))?)?;
        let res = tape.add(x, out)?;
        x = tape.layer_norm(res, p(&format!("{mlp}.norm.gamma"))?, p(&format!("{mlp}.norm.beta"))?, eps)?;
        if let Some(rec) = record.as_mut() {
            rec.after_mlp.push(tape.value(x).clone());
        }
    }

    let out = linear(tape, x, p("head.weight")?, p("head.bias")?)?;
    let prediction = tape.reshape(out, &[b, s])?;
    Ok(Graph {
        prediction,
        params,
        record,
    })
}

fn linear<F: Real>(tape: &mut Tape<F>, x: Var, w: Var, bias: Var) -> Result<Var, ModelError> {
    Ok(tape.linear(x, w, bias)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn tokens(cfg: &ModelConfig, batch: usize) -> Vec<u32> {
        (0..batch * cfg.seq_len()).map(|i| ((i * 37) % 2002) as u32).collect()
    }

    #[test]
    fn deterministic_and_shaped() {
        let cfg = ModelConfig::new(3, 2, 2, 8);
        let w = init_model::<f32>(&cfg, 1).unwrap();
        let t = tokens(&cfg, 4);
        let a = forward(&w, &t, &ForwardOptions::recording()).unwrap();
        let b = forward(&w, &t, &ForwardOptions::plain()).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.predictions.shape(), &[4, 9]);
        let rec = a.record.unwrap();
        assert_eq!(rec.attention.len(), 2);
        assert_eq!(rec.attention[0].shape(), &[4, 2, 9, 9]);
        assert_eq!(rec.after_mlp[1].shape(), &[4, 9, 8]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = ModelConfig::new(3, 2, 4, 16);
        let w = init_model::<f32>(&cfg, 2).unwrap();
        let rec = forward(&w, &tokens(&cfg, 3), &ForwardOptions::recording())
            .unwrap()
            .record
            .unwrap();
        for layer in &rec.attention {
            for row in layer.data().chunks(9) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-5);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn rejects_bad_tokens_and_lengths() {
        let cfg = ModelConfig::new(3, 1, 1, 4);
        let w = init_model::<f32>(&cfg, 0).unwrap();
        assert!(matches!(
            forward(&w, &[1; 8], &ForwardOptions::plain()),
            Err(ModelError::SequenceLength { .. })
        ));
        let mut bad = vec![1u32; 9];
        bad[4] = 2002;
        assert!(matches!(
            forward(&w, &bad, &ForwardOptions::plain()),
            Err(ModelError::UnknownToken { id: 2002 })
        ));
    }

    #[test]
    fn empty_ablation_is_identity_and_full_ablation_is_uniform() {
        let cfg = ModelConfig::new(3, 2, 2, 8);
        let w = init_model::<f32>(&cfg, 3).unwrap();
        let t = tokens(&cfg, 2);
        let base = forward(&w, &t, &ForwardOptions::plain()).unwrap();
        let opts = ForwardOptions {
            record: true,
            interventions: Interventions {
                uniform_ablation: vec![],
                patch: None,
            },
        };
        assert_eq!(forward(&w, &t, &opts).unwrap().predictions, base.predictions);

        let opts = ForwardOptions {
            record: true,
            interventions: Interventions {
                uniform_ablation: vec![HeadId::new(1, 0)],
                patch: None,
            },
        };
        let rec = forward(&w, &t, &opts).unwrap().record.unwrap();
        let row = rec.attention_row(HeadId::new(1, 0), 1, 4);
        assert!(row.iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-7));

        let opts = ForwardOptions {
            record: false,
            interventions: Interventions {
                uniform_ablation: vec![HeadId::new(2, 0)],
                patch: None,
            },
        };
        assert!(matches!(forward(&w, &t, &opts), Err(ModelError::InvalidHead { .. })));
    }

    #[test]
    fn patching_with_own_record_is_identity() {
        let cfg = ModelConfig::new(3, 2, 2, 8);
        let w = init_model::<f32>(&cfg, 4).unwrap();
        let t = tokens(&cfg, 2);
        let base = forward(&w, &t, &ForwardOptions::recording()).unwrap();
        let donor = base.record.unwrap();
        let heads = HeadId::all(2, 2);
        let opts = ForwardOptions {
            record: false,
            interventions: Interventions {
                uniform_ablation: vec![],
                patch: Some(ActivationPatch {
                    heads: &heads,
                    donor: &donor,
                }),
            },
        };
        assert_eq!(forward(&w, &t, &opts).unwrap().predictions, base.predictions);

        let short = forward(&w, &t[..9], &ForwardOptions::recording()).unwrap().record.unwrap();
        let opts = ForwardOptions {
            record: false,
            interventions: Interventions {
                uniform_ablation: vec![],
                patch: Some(ActivationPatch {
                    heads: &heads,
                    donor: &short,
                }),
            },
        };
        assert!(matches!(forward(&w, &t, &opts), Err(ModelError::DonorShape(_))));
    }

    #[test]
    fn head_display_is_one_based() {
        assert_eq!(HeadId::new(1, 0).to_string(), "(2,1)");
        assert_eq!(HeadId::one_based(4, 3), HeadId::new(3, 2));
    }
}
