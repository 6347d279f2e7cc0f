use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::InterpError;
use crate::data::Tokenizer;
use crate::model::ModelWeights;
use crate::nucnorm::svd;
use crate::tensor::Real;

/// Token values covered by the report: -1.5 to 1.5 in steps of 0.01.
pub const VALUE_GRID: (f64, f64) = (-1.5, 1.5);

const SEPARATOR_ANGLES: usize = 720;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub step: Option<u64>,
    pub values: Vec<f64>,
    /// L2 norm of each token embedding on the value grid.
    pub norms: Vec<f64>,
    /// Mean over `v > 0` of `| ||e(v)|| - ||e(-v)|| | / ||e(v)||`.
    pub norm_asymmetry: f64,
    /// Two orthonormal principal directions of the centered token
    /// embeddings, each of length `hidden`.
    pub components: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
    /// Centered embeddings projected on `components`.
    pub projections: Vec<[f64; 2]>,
    /// Best accuracy of a straight line in the projection plane separating
    /// positive from negative values.
    pub sign_separability: f64,
    /// Mean cosine between centered positional embeddings of the same column
    /// minus the mean over different columns.
    pub clustering_score: f64,
}

fn grid() -> Vec<f64> {
    let (lo, hi) = VALUE_GRID;
    let steps = ((hi - lo) * 100.0).round() as i64;
    (0..=steps).map(|k| (lo * 100.0 + k as f64).round() / 100.0).collect()
}

fn token_matrix<F: Real>(weights: &ModelWeights<F>, values: &[f64]) -> Result<DMatrix<f64>, InterpError> {
    let table = weights.get("embeddings.token")?;
    let d = weights.config().hidden;
    let mut out = DMatrix::zeros(values.len(), d);
    for (r, &v) in values.iter().enumerate() {
        let id = Tokenizer.encode(v)? as usize;
        for c in 0..d {
            out[(r, c)] = table.data()[id * d + c].as_f64();
        }
    }
    Ok(out)
}

fn center_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.row_mean();
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        row -= &mean;
    }
    out
}

fn principal_components(centered: &DMatrix<f64>) -> Result<([Vec<f64>; 2], [f64; 2]), InterpError> {
    if centered.ncols() < 2 || centered.nrows() < 2 {
        return Err(InterpError::InvalidInput("need at least two tokens and two dimensions".into()));
    }
    let dec = svd(centered)?;
    let denom = (centered.nrows() - 1) as f64;
    let pc = |k: usize| dec.v.column(k).iter().copied().collect::<Vec<f64>>();
    Ok((
        [pc(0), pc(1)],
        [dec.sigma[0].powi(2) / denom, dec.sigma[1].powi(2) / denom],
    ))
}

/// Best accuracy over all lines `w . x = t` of labeling `x` positive on one
/// side.
fn linear_separability(points: &[[f64; 2]], positive: &[bool]) -> f64 {
    let total = points.len();
    if total == 0 {
        return f64::NAN;
    }
    let pos_total = positive.iter().filter(|&&p| p).count();
    let mut best = 0usize;
    let mut proj: Vec<(f64, bool)> = Vec::with_capacity(total);
    for a in 0..SEPARATOR_ANGLES {
        let theta = std::f64::consts::PI * a as f64 / SEPARATOR_ANGLES as f64;
        let (s, c) = theta.sin_cos();
        proj.clear();
        proj.extend(points.iter().zip(positive).map(|(p, &l)| (c * p[0] + s * p[1], l)));
        proj.sort_by(|x, y| x.0.total_cmp(&y.0));
        // Threshold after the first k points; count positives below it.
        let mut pos_below = 0usize;
        for k in 0..=total {
            if k > 0 && proj[k - 1].1 {
                pos_below += 1;
            }
            if k > 0 && k < total && proj[k].0 == proj[k - 1].0 {
                continue;
            }
            let neg_below = k - pos_below;
            let pos_above = pos_total - pos_below;
            // Positives above the threshold, or below it.
            let above = pos_above + neg_below;
            best = best.max(above).max(total - above);
        }
    }
    best as f64 / total as f64
}

fn clustering_score<F: Real>(weights: &ModelWeights<F>) -> Result<f64, InterpError> {
    let cfg = weights.config();
    let (n, d) = (cfg.n, cfg.hidden);
    if n < 2 {
        return Err(InterpError::InvalidInput("column clustering needs n >= 2".into()));
    }
    let table = weights.get("embeddings.position")?;
    let pos = DMatrix::from_fn(n * n, d, |r, c| table.data()[r * d + c].as_f64());
    let centered = center_rows(&pos);
    let unit: Vec<Vec<f64>> = centered
        .row_iter()
        .map(|r| {
            let norm = r.norm();
            r.iter().map(|v| if norm > 0.0 { v / norm } else { 0.0 }).collect()
        })
        .collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for p in 0..n * n {
        for q in p + 1..n * n {
            let c: f64 = unit[p].iter().zip(&unit[q]).map(|(a, b)| a * b).sum();
            if p % n == q % n {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    Ok(intra / n_intra as f64 - inter / n_inter as f64)
}

fn report_with<F: Real>(
    weights: &ModelWeights<F>,
    step: Option<u64>,
    components: Option<(&[Vec<f64>; 2], &[f64; 2])>,
) -> Result<EmbeddingReport, InterpError> {
    let values = grid();
    let emb = token_matrix(weights, &values)?;
    let norms: Vec<f64> = emb.row_iter().map(|r| r.norm()).collect();
    let mid = values.len() / 2;
    let asym: Vec<f64> = (1..=mid)
        .filter(|&k| norms[mid + k] > 0.0)
        .map(|k| (norms[mid + k] - norms[mid - k]).abs() / norms[mid + k])
        .collect();
    let centered = center_rows(&emb);
    let (components, explained_variance) = match components {
        Some((c, v)) => (c.clone(), *v),
        None => principal_components(&centered)?,
    };
    let projections: Vec<[f64; 2]> = centered
        .row_iter()
        .map(|r| {
            let dot = |pc: &Vec<f64>| r.iter().zip(pc).map(|(a, b)| a * b).sum::<f64>();
            [dot(&components[0]), dot(&components[1])]
        })
        .collect();
    let (points, labels): (Vec<[f64; 2]>, Vec<bool>) = projections
        .iter()
        .zip(&values)
        .filter(|(_, &v)| v != 0.0)
        .map(|(p, &v)| (*p, v > 0.0))
        .unzip();
    Ok(EmbeddingReport {
        step,
        norm_asymmetry: asym.iter().sum::<f64>() / asym.len().max(1) as f64,
        values,
        norms,
        components,
        explained_variance,
        sign_separability: linear_separability(&points, &labels),
        projections,
        clustering_score: clustering_score(weights)?,
    })
}

/// Embedding structure of one model, using its own principal components.
pub fn embedding_report<F: Real>(weights: &ModelWeights<F>, step: Option<u64>) -> Result<EmbeddingReport, InterpError> {
    report_with(weights, step, None)
}

/// Reports for a series of checkpoints. Every report projects onto the
/// principal components of the last checkpoint.
pub fn embedding_series<F: Real>(series: &[(u64, ModelWeights<F>)]) -> Result<Vec<EmbeddingReport>, InterpError> {
    let (last_step, last) = series
        .last()
        .ok_or_else(|| InterpError::InvalidInput("empty checkpoint series".into()))?;
    if let Some((step, _)) = series.iter().find(|(_, w)| w.config() != last.config()) {
        return Err(InterpError::InvalidInput(format!(
            "checkpoint at step {step} has a different configuration"
        )));
    }
    let reference = embedding_report(last, Some(*last_step))?;
    series
        .iter()
        .map(|(step, w)| report_with(w, Some(*step), Some((&reference.components, &reference.explained_variance))))
        .collect()
}
