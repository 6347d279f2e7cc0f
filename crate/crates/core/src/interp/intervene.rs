use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{InterpError, CHUNK};
use crate::data::{stream_rng, Batch, DataConfig, Mask, MaskedInstance, Tokenizer};
use crate::model::{
    forward, ActivationPatch, Component, ForwardOptions, HeadId, Interventions, LossBreakdown, ModelError,
    ModelWeights,
};
use crate::tensor::Real;

const EVAL_STREAM: u64 = 0xE7A1_0000;
const PERMUTATION_STREAM: u64 = 0x9E21_0000;

/// Fresh evaluation instances. With `mask` set, every instance shares that
/// observation pattern and only the matrices vary.
pub fn evaluation_batch(
    data: &DataConfig,
    samples: usize,
    mask: Option<&Mask>,
    seed: u64,
) -> Result<Batch, InterpError> {
    if samples == 0 {
        return Err(InterpError::InvalidInput("sample count must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, EVAL_STREAM);
    let mut instances = Vec::with_capacity(samples);
    for _ in 0..samples {
        let inst = match mask {
            None => data.sample_instance(&mut rng)?,
            Some(m) => {
                if m.n != data.n {
                    return Err(InterpError::InvalidInput(format!(
                        "mask is {0}x{0} but instances are {1}x{1}",
                        m.n, data.n
                    )));
                }
                MaskedInstance::new(data.family.sample(data.n, &mut rng)?, m.clone())?
            }
        };
        instances.push(inst);
    }
    Ok(Batch::new(instances)?)
}

/// A single hooked modification of the forward pass.
#[derive(Clone, Debug)]
pub enum InterventionSpec {
    /// Attention probabilities of these heads become `1/S`.
    UniformAblation { heads: Vec<HeadId> },
    /// Head outputs (before the output projection) are taken from a forward
    /// pass on `donor`, which must have the same shape as the input batch.
    ActivationPatch { heads: Vec<HeadId>, donor: Batch },
    /// Position `p` reads the positional embedding of `permutation[p]`.
    PositionPermutation { permutation: Vec<usize> },
    /// Masked positions carry the token of `value`; `None` keeps the mask
    /// token, whose reference value is 0.
    TokenReplacement { value: Option<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    /// Row-major predictions for every instance, `batch * n^2` values.
    pub predictions: Vec<f64>,
    /// Unmodified model on the same inputs.
    pub baseline: LossBreakdown,
    /// Intervened model against the ground truth.
    pub loss: LossBreakdown,
    /// Intervened model against the donor ground truth (patching only).
    pub donor_loss: Option<LossBreakdown>,
    /// Intervened model against the replacement value on masked positions
    /// (token replacement only); `masked` is `L'_mask`.
    pub reference_loss: Option<LossBreakdown>,
}

fn check_heads(config: &crate::model::ModelConfig, heads: &[HeadId]) -> Result<(), InterpError> {
    match heads.iter().find(|h| h.layer >= config.layers || h.head >= config.heads) {
        Some(h) => Err(ModelError::InvalidHead {
            layer: h.layer,
            head: h.head,
        }
        .into()),
        None => Ok(()),
    }
}

fn chunk_batch(batch: &Batch, start: usize) -> Batch {
    let end = (start + CHUNK).min(batch.len());
    Batch {
        n: batch.n,
        instances: batch.instances[start..end].to_vec(),
    }
}

/// Predictions over a batch in chunks, optionally ablating and patching.
pub(crate) fn predict<F: Real>(
    weights: &ModelWeights<F>,
    batch: &Batch,
    ablate: &[HeadId],
    patch: Option<(&[HeadId], &Batch)>,
) -> Result<Vec<f64>, InterpError> {
    let mut out = Vec::with_capacity(batch.len() * batch.seq_len());
    for start in (0..batch.len()).step_by(CHUNK) {
        let chunk = chunk_batch(batch, start);
        let donor_record = match patch {
            Some((_, donor)) => {
                let donor_chunk = chunk_batch(donor, start);
                forward(weights, &donor_chunk.tokens(), &ForwardOptions::recording())?.record
            }
            None => None,
        };
        let options = ForwardOptions {
            record: false,
            interventions: Interventions {
                uniform_ablation: ablate.to_vec(),
                patch: match (patch, donor_record.as_ref()) {
                    (Some((heads, _)), Some(record)) => Some(ActivationPatch { heads, donor: record }),
                    _ => None,
                },
            },
        };
        let result = forward(weights, &chunk.tokens(), &options)?;
        out.extend(result.predictions.data().iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

fn score(predictions: &[f64], batch: &Batch) -> LossBreakdown {
    LossBreakdown::compute(predictions, &batch.targets(), &batch.observed())
}

/// Predictions and pooled losses of the unmodified model on `batch`.
pub fn evaluate<F: Real>(weights: &ModelWeights<F>, batch: &Batch) -> Result<(LossBreakdown, Vec<f64>), InterpError> {
    if batch.is_empty() {
        return Err(InterpError::InvalidInput("empty batch".into()));
    }
    let p = predict(weights, batch, &[], None)?;
    Ok((score(&p, batch), p))
}

/// Runs the model on `batch` with one intervention and scores the result.
pub fn apply_intervention<F: Real>(
    weights: &ModelWeights<F>,
    batch: &Batch,
    spec: &InterventionSpec,
) -> Result<InterventionOutcome, InterpError> {
    if batch.is_empty() {
        return Err(InterpError::InvalidInput("empty batch".into()));
    }
    let baseline = score(&predict(weights, batch, &[], None)?, batch);
    let mut donor_loss = None;
    let mut reference_loss = None;
    let predictions = match spec {
        InterventionSpec::UniformAblation { heads } => {
            check_heads(weights.config(), heads)?;
            predict(weights, batch, heads, None)?
        }
        InterventionSpec::ActivationPatch { heads, donor } => {
            check_heads(weights.config(), heads)?;
            if donor.len() != batch.len() || donor.n != batch.n {
                return Err(ModelError::DonorShape(format!(
                    "donor has {} instances of order {}, input has {} of order {}",
                    donor.len(),
                    donor.n,
                    batch.len(),
                    batch.n
                ))
                .into());
            }
            let p = predict(weights, batch, &[], Some((heads, donor)))?;
            donor_loss = Some(score(&p, donor));
            p
        }
        InterventionSpec::PositionPermutation { permutation } => {
            let permuted = permute_positions(weights, permutation)?;
            predict(&permuted, batch, &[], None)?
        }
        InterventionSpec::TokenReplacement { value } => {
            let (input, m) = match value {
                Some(v) => (batch.with_masked_token(Tokenizer.encode(*v)?), Tokenizer.decode(Tokenizer.encode(*v)?)?),
                None => (batch.clone(), 0.0),
            };
            let p = predict(weights, &input, &[], None)?;
            let observed = batch.observed();
            let reference: Vec<f64> = batch
                .targets()
                .iter()
                .zip(&observed)
                .map(|(&t, &o)| if o { t } else { m })
                .collect();
            reference_loss = Some(LossBreakdown::compute(&p, &reference, &observed));
            p
        }
    };
    let loss = score(&predictions, batch);
    Ok(InterventionOutcome {
        predictions,
        baseline,
        loss,
        donor_loss,
        reference_loss,
    })
}

/// `destination` with the listed components copied from `source`.
pub fn switch_weights<F: Real>(
    destination: &ModelWeights<F>,
    source: &ModelWeights<F>,
    components: &[Component],
) -> Result<ModelWeights<F>, InterpError> {
    let mut out = destination.clone();
    for &c in components {
        out.copy_component_from(source, c)?;
    }
    Ok(out)
}

fn check_permutation(permutation: &[usize], len: usize) -> Result<(), InterpError> {
    let bad = |reason: String| Err(InterpError::InvalidPermutation { len, reason });
    if permutation.len() != len {
        return bad(format!("has {} entries", permutation.len()));
    }
    let mut seen = vec![false; len];
    for &p in permutation {
        if p >= len {
            return bad(format!("entry {p} out of range"));
        }
        if std::mem::replace(&mut seen[p], true) {
            return bad(format!("entry {p} repeated"));
        }
    }
    Ok(())
}

/// Reindexes the positional table: row `p` of the result is row
/// `permutation[p]` of the original.
pub fn permute_positions<F: Real>(
    weights: &ModelWeights<F>,
    permutation: &[usize],
) -> Result<ModelWeights<F>, InterpError> {
    let s = weights.config().seq_len();
    check_permutation(permutation, s)?;
    let mut out = weights.clone();
    let table = weights.get("embeddings.position")?;
    let d = weights.config().hidden;
    let dst = out.get_mut("embeddings.position")?.data_mut();
    for (p, &src) in permutation.iter().enumerate() {
        dst[p * d..(p + 1) * d].copy_from_slice(&table.data()[src * d..(src + 1) * d]);
    }
    Ok(out)
}

/// Uniformly random permutation of `0..len`, reproducible from `seed`.
pub fn random_permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(&mut stream_rng(seed, PERMUTATION_STREAM));
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenInterventionReport {
    /// `None` when masked positions keep the mask token.
    pub replacement: Option<f64>,
    /// Reference value `m` on masked positions (0 for the mask token).
    pub reference_value: f64,
    pub samples: usize,
    pub l_obs: f64,
    /// MSE on masked positions against `m`.
    pub l_mask_prime: f64,
    /// MSE on masked positions against the ground truth.
    pub l_mask: f64,
    pub mean_abs_masked_prediction: f64,
}

/// Replaces masked inputs by `replacement` (or keeps the mask token) and
/// measures how closely the model copies it.
pub fn token_intervention<F: Real>(
    weights: &ModelWeights<F>,
    data: &DataConfig,
    replacement: Option<f64>,
    samples: usize,
    seed: u64,
) -> Result<TokenInterventionReport, InterpError> {
    let batch = evaluation_batch(data, samples, None, seed)?;
    let outcome = apply_intervention(weights, &batch, &InterventionSpec::TokenReplacement { value: replacement })?;
    let reference = outcome.reference_loss.as_ref().expect("token replacement sets a reference");
    let observed = batch.observed();
    let masked: Vec<f64> = outcome
        .predictions
        .iter()
        .zip(&observed)
        .filter(|(_, &o)| !o)
        .map(|(p, _)| p.abs())
        .collect();
    let reference_value = match replacement {
        Some(v) => Tokenizer.decode(Tokenizer.encode(v)?)?,
        None => 0.0,
    };
    Ok(TokenInterventionReport {
        replacement,
        reference_value,
        samples,
        l_obs: reference.observed.unwrap_or(f64::NAN),
        l_mask_prime: reference.masked.unwrap_or(f64::NAN),
        l_mask: outcome.loss.masked.unwrap_or(f64::NAN),
        mean_abs_masked_prediction: if masked.is_empty() {
            f64::NAN
        } else {
            masked.iter().sum::<f64>() / masked.len() as f64
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegationPatchReport {
    pub samples: usize,
    /// Masked-position MSE of the patched run against `X`.
    pub mse_to_donor: f64,
    /// Masked-position MSE of the patched run against `-X`.
    pub mse_to_input: f64,
    /// Masked-position MSE of the unpatched run on `-X` against `-X`.
    pub unpatched_mse_to_input: f64,
}

/// Feeds `-X` while every head output is patched from a run on `X` with the
/// same mask.
pub fn negation_patch<F: Real>(
    weights: &ModelWeights<F>,
    data: &DataConfig,
    samples: usize,
    seed: u64,
) -> Result<NegationPatchReport, InterpError> {
    let donor = evaluation_batch(data, samples, None, seed)?;
    let negated = Batch::new(
        donor
            .instances
            .iter()
            .map(|i| MaskedInstance::new(i.matrix.negated(), i.mask.clone()))
            .collect::<Result<Vec<_>, _>>()?,
    )?;
    let cfg = weights.config();
    let heads = HeadId::all(cfg.layers, cfg.heads);
    let outcome = apply_intervention(weights, &negated, &InterventionSpec::ActivationPatch { heads, donor })?;
    let masked = |l: &LossBreakdown| l.masked.unwrap_or(f64::NAN);
    Ok(NegationPatchReport {
        samples,
        mse_to_donor: masked(outcome.donor_loss.as_ref().expect("patching sets a donor loss")),
        mse_to_input: masked(&outcome.loss),
        unpatched_mse_to_input: masked(&outcome.baseline),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn setup() -> (ModelWeights<f64>, Batch) {
        let w = init_model::<f64>(&ModelConfig::new(3, 2, 2, 8), 3).unwrap();
        let b = evaluation_batch(&DataConfig::low_rank(3, 1, 0.3), 6, None, 1).unwrap();
        (w, b)
    }

    #[test]
    fn empty_ablation_is_identity() {
        let (w, b) = setup();
        let out = apply_intervention(&w, &b, &InterventionSpec::UniformAblation { heads: vec![] }).unwrap();
        assert_eq!(out.loss, out.baseline);
        let plain = predict(&w, &b, &[], None).unwrap();
        assert_eq!(out.predictions, plain);
    }

    #[test]
    fn self_patch_is_identity() {
        let (w, b) = setup();
        let spec = InterventionSpec::ActivationPatch {
            heads: HeadId::all(2, 2),
            donor: b.clone(),
        };
        let out = apply_intervention(&w, &b, &spec).unwrap();
        assert_eq!(out.predictions, predict(&w, &b, &[], None).unwrap());
        assert_eq!(out.donor_loss.unwrap(), out.loss);
    }

    #[test]
    fn donor_shape_mismatch_errors() {
        let (w, b) = setup();
        let donor = Batch {
            n: 3,
            instances: b.instances[..2].to_vec(),
        };
        let spec = InterventionSpec::ActivationPatch {
            heads: vec![HeadId::new(0, 0)],
            donor,
        };
        assert!(matches!(
            apply_intervention(&w, &b, &spec),
            Err(InterpError::Model(ModelError::DonorShape(_)))
        ));
    }

    #[test]
    fn invalid_heads_rejected() {
        let (w, b) = setup();
        let spec = InterventionSpec::UniformAblation {
            heads: vec![HeadId::new(2, 0)],
        };
        assert!(apply_intervention(&w, &b, &spec).is_err());
    }

    #[test]
    fn identity_permutation_is_identity() {
        let (w, b) = setup();
        let spec = InterventionSpec::PositionPermutation {
            permutation: (0..9).collect(),
        };
        let out = apply_intervention(&w, &b, &spec).unwrap();
        assert_eq!(out.loss, out.baseline);
    }

    #[test]
    fn permutations_validated() {
        let (w, _) = setup();
        assert!(permute_positions(&w, &[0, 1, 2]).is_err());
        assert!(permute_positions(&w, &[0, 1, 2, 3, 4, 5, 6, 7, 7]).is_err());
        assert!(permute_positions(&w, &[0, 1, 2, 3, 4, 5, 6, 7, 9]).is_err());
        let p = random_permutation(9, 4);
        let q = permute_positions(&w, &p).unwrap();
        let back: Vec<usize> = {
            let mut inv = vec![0; 9];
            for (i, &v) in p.iter().enumerate() {
                inv[v] = i;
            }
            inv
        };
        assert_eq!(permute_positions(&q, &back).unwrap(), w);
    }

    #[test]
    fn switching_is_involutive() {
        let cfg = ModelConfig::new(3, 2, 2, 8);
        let a = init_model::<f64>(&cfg, 1).unwrap();
        let b = init_model::<f64>(&cfg, 2).unwrap();
        for c in Component::ALL.into_iter().chain([Component::AttentionQkv]) {
            let hybrid = switch_weights(&a, &b, &[c]).unwrap();
            assert_ne!(hybrid, a);
            for (name, t) in hybrid.iter() {
                let expected = if c.contains(name) { b.get(name) } else { a.get(name) };
                assert_eq!(t, expected.unwrap(), "{name}");
            }
            assert_eq!(switch_weights(&hybrid, &a, &[c]).unwrap(), a);
        }
        assert_eq!(switch_weights(&a, &a, &Component::ALL).unwrap(), a);
        let other = init_model::<f64>(&ModelConfig::new(3, 1, 2, 8), 2).unwrap();
        assert!(switch_weights(&a, &other, &[Component::Head]).is_err());
    }

    #[test]
    fn mask_token_reference_is_zero() {
        let (w, _) = setup();
        let data = DataConfig::low_rank(3, 1, 0.5);
        let r = token_intervention(&w, &data, None, 8, 2).unwrap();
        assert_eq!(r.reference_value, 0.0);
        let with_m = token_intervention(&w, &data, Some(0.444), 8, 2).unwrap();
        assert_eq!(with_m.reference_value, 0.44);
        assert!(with_m.l_mask_prime.is_finite() && with_m.l_obs.is_finite());
    }

    #[test]
    fn shared_mask_batches() {
        let data = DataConfig::low_rank(3, 1, 0.3);
        let mask = crate::data::structured_mask(3, &[(1, 2)]).unwrap();
        let b = evaluation_batch(&data, 5, Some(&mask), 0).unwrap();
        assert!(b.instances.iter().all(|i| i.mask == mask));
        assert_ne!(b.instances[0].matrix, b.instances[1].matrix);
        let wrong = crate::data::structured_mask(4, &[]).unwrap();
        assert!(evaluation_batch(&data, 5, Some(&wrong), 0).is_err());
    }
}
