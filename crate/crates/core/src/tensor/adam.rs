use serde::{Deserialize, Serialize};

use super::{Real, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter Adam moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<F>>,
    pub second_moment: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (first_moment, second_moment) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        Self {
            config,
            step: 0,
            first_moment,
            second_moment,
        }
    }
}

/// One bias-corrected Adam update, without weight decay.
///
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step<F: Real>(
    params: &mut [&mut Tensor<F>],
    grads: &[&Tensor<F>],
    state: &mut AdamState<F>,
) -> Result<(), TensorError> {
    let count = state.first_moment.len();
    if params.len() != count || grads.len() != count {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            lhs: vec![params.len(), grads.len()],
            rhs: vec![count],
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(TensorError::NonFinite { op: "adam_step" });
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bias1 = F::from_f64_lossy(1.0 - c.beta1.powi(t));
    let bias2 = F::from_f64_lossy(1.0 - c.beta2.powi(t));
    let (b1, b2) = (F::from_f64_lossy(c.beta1), F::from_f64_lossy(c.beta2));
    let (lr, eps) = (F::from_f64_lossy(c.lr), F::from_f64_lossy(c.eps));
    let one = F::one();

    for (i, param) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, p) in param.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
