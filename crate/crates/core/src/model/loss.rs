use serde::{Deserialize, Serialize};

use super::{forward, ForwardOptions, ForwardOutput, ModelError, ModelWeights};
use crate::data::Batch;
use crate::tensor::{Real, Tape, Tensor, Var, TensorError};

/// Mean squared error over all entries, and separately over observed and
/// masked entries.
///
/// The observed and masked averages are pooled over the whole batch, so
/// `observed_count * observed + masked_count * masked = count * total`.
/// An average over an empty set is `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub observed: Option<f64>,
    pub masked: Option<f64>,
    pub observed_count: usize,
    pub masked_count: usize,
}

impl LossBreakdown {
    pub fn compute<F: Real>(predictions: &[F], targets: &[f64], observed: &[bool]) -> Self {
        assert_eq!(predictions.len(), targets.len(), "predictions and targets differ in length");
        assert_eq!(predictions.len(), observed.len(), "predictions and mask differ in length");
        let (mut obs, mut mask) = (0.0, 0.0);
        let (mut n_obs, mut n_mask) = (0usize, 0usize);
        for ((p, t), &o) in predictions.iter().zip(targets).zip(observed) {
            let e = (p.as_f64() - t).powi(2);
            if o {
                obs += e;
                n_obs += 1;
            } else {
                mask += e;
                n_mask += 1;
            }
        }
        let count = n_obs + n_mask;
        let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        Self {
            total: avg(obs + mask, count).unwrap_or(f64::NAN),
            observed: avg(obs, n_obs),
            masked: avg(mask, n_mask),
            observed_count: n_obs,
            masked_count: n_mask,
        }
    }

    pub fn count(&self) -> usize {
        self.observed_count + self.masked_count
    }
}

/// Records `mean((prediction - target)^2)` on the tape.
pub fn mse_loss<F: Real>(tape: &mut Tape<F>, prediction: Var, targets: &[f64]) -> Result<Var, TensorError> {
    let target = tape.constant(Tensor::from_f64(tape.shape(prediction), targets)?);
    let diff = tape.sub(prediction, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Runs the model on a batch and scores it against the ground truth.
pub fn evaluate_batch<F: Real>(
    weights: &ModelWeights<F>,
    batch: &Batch,
    options: &ForwardOptions<'_, F>,
) -> Result<(LossBreakdown, ForwardOutput<F>), ModelError> {
    let out = forward(weights, &batch.tokens(), options)?;
    let loss = LossBreakdown::compute(out.predictions.data(), &batch.targets(), &batch.observed());
    Ok((loss, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_decomposition() {
        let pred = [0.5f64, -0.25, 1.0, 0.0, 2.0];
        let target = [0.0, 0.0, 1.0, 1.0, 0.0];
        let observed = [true, false, true, false, false];
        let l = LossBreakdown::compute(&pred, &target, &observed);
        assert_eq!(l.observed_count, 2);
        assert!((l.observed.unwrap() - 0.125).abs() < 1e-15);
        assert!((l.masked.unwrap() - (0.0625 + 1.0 + 4.0) / 3.0).abs() < 1e-15);
        let lhs = 2.0 * l.observed.unwrap() + 3.0 * l.masked.unwrap();
        assert!((lhs - 5.0 * l.total).abs() < 1e-12);
    }

    #[test]
    fn empty_sets_are_none() {
        let l = LossBreakdown::compute(&[1.0f32, 2.0], &[1.0, 2.0], &[true, true]);
        assert_eq!(l.masked, None);
        assert_eq!(l.observed, Some(0.0));
    }

    #[test]
    fn tape_loss_matches_breakdown() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap());
        let loss = mse_loss(&mut tape, p, &[0.0, 0.0, 1.0]).unwrap();
        let direct = LossBreakdown::compute(&[0.1, 0.2, 0.3], &[0.0, 0.0, 1.0], &[true; 3]).total;
        assert!((tape.value(loss).item().unwrap() - direct).abs() < 1e-15);
    }
}
