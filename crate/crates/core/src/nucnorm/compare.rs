//! Trained encoder versus nuclear-norm minimization on identical instances.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{nuclear_norm, solve, Mode, NucNormError, NucNormProblem};
use crate::data::{stream_rng, DataConfig, MaskedInstance};
use crate::model::{forward, ForwardOptions, LossBreakdown, ModelWeights};

pub const COMPARISON_HEADER: &str = "p_mask,method,L,L_obs,L_mask,nuclear_norm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub p_mask: f64,
    pub method: String,
    pub loss: f64,
    pub loss_obs: Option<f64>,
    pub loss_mask: Option<f64>,
    /// Mean over instances of the nuclear norm of the completed matrix.
    pub nuclear_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(COMPARISON_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.p_mask,
                r.method,
                r.loss,
                opt(r.loss_obs),
                opt(r.loss_mask),
                r.nuclear_norm
            ));
        }
        out
    }

    pub fn get(&self, p_mask: f64, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.p_mask == p_mask && r.method == method)
    }
}

/// For each masking probability, samples `samples` instances from `data`
/// (with its `p_mask` replaced) and scores the model's predictions and the
/// nuclear-norm completion (`mode`) on exactly those instances.
///
/// Losses are pooled over all entries of all instances.
pub fn compare_bert_vs_nucnorm(
    weights: &ModelWeights<f32>,
    data: &DataConfig,
    p_masks: &[f64],
    samples: usize,
    mode: Mode,
    seed: u64,
) -> Result<ComparisonReport, NucNormError> {
    let n = weights.config().n;
    if data.n != n {
        return Err(NucNormError::InvalidProblem(format!(
            "model expects {n}x{n} inputs, data is {0}x{0}",
            data.n
        )));
    }
    let mut report = ComparisonReport::default();
    for (k, &p) in p_masks.iter().enumerate() {
        let cfg = DataConfig { p_mask: p, ..*data };
        let mut rng = stream_rng(seed, k as u64);
        let instances = (0..samples)
            .map(|_| cfg.sample_instance(&mut rng))
            .collect::<Result<Vec<MaskedInstance>, _>>()?;
        let targets: Vec<f64> = instances.iter().flat_map(|i| i.matrix.values.iter().copied()).collect();
        let observed: Vec<bool> = instances.iter().flat_map(|i| i.mask.observed.iter().copied()).collect();

        let tokens: Vec<u32> = instances.iter().flat_map(|i| i.tokens.iter().copied()).collect();
        let preds = forward(weights, &tokens, &ForwardOptions::plain())?.predictions;
        let mut bert_nn = 0.0;
        for chunk in preds.data().chunks(n * n) {
            let m = DMatrix::from_row_iterator(n, n, chunk.iter().map(|&v| v as f64));
            bert_nn += nuclear_norm(&m)?;
        }
        report
            .rows
            .push(row(p, "bert", LossBreakdown::compute(preds.data(), &targets, &observed), bert_nn / samples as f64));

        let mut completed = Vec::with_capacity(targets.len());
        let mut base_nn = 0.0;
        for inst in &instances {
            let mut problem = NucNormProblem::from_instance(inst, mode);
            if problem.observed_count() == 0 {
                // Nothing observed: the minimum-norm completion is zero.
                problem.values.fill(0.0);
                problem.observed.fill(true);
                problem.mode = Mode::Constrained;
            }
            let sol = solve(&problem)?;
            base_nn += sol.nuclear_norm;
            // Row-major, to line up with the token order.
            completed.extend(sol.u.transpose().iter().copied());
        }
        report.rows.push(row(
            p,
            "nucnorm",
            LossBreakdown::compute(&completed, &targets, &observed),
            base_nn / samples as f64,
        ));
    }
    Ok(report)
}

fn row(p_mask: f64, method: &str, l: LossBreakdown, nuclear_norm: f64) -> ComparisonRow {
    ComparisonRow {
        p_mask,
        method: method.into(),
        loss: l.total,
        loss_obs: l.observed,
        loss_mask: l.masked,
        nuclear_norm,
    }
}
