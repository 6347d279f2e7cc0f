use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::intervene::evaluation_batch;
use super::{InterpError, CHUNK};
use crate::data::{Batch, DataConfig, Mask, MaskedInstance};
use crate::model::{forward, ForwardOptions, ModelWeights};
use crate::nucnorm::svd;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    /// At every position `(i, j)`: row `i` of the input with missing entries
    /// set to 0.
    MaskedRow,
    /// At masked positions only: the true entry.
    MaskedValue,
    /// At every position of a fully observed input: the first left singular
    /// vector, signed so its largest-magnitude entry is positive. Cosines
    /// are reported in absolute value.
    SingularVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub target: ProbeTarget,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Number of matrices; each contributes one row per probed position.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Hidden-state indices to probe (`0` = embeddings); all when absent.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
}

fn default_lambda() -> f64 {
    1e-3
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_samples() -> usize {
    512
}

impl ProbeConfig {
    pub fn new(target: ProbeTarget) -> Self {
        Self {
            target,
            lambda: default_lambda(),
            train_fraction: default_train_fraction(),
            samples: default_samples(),
            seed: 0,
            layers: None,
        }
    }
}

/// Linear map `x -> x W + b` fitted by ridge regression.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl RidgeModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * &self.weights;
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        out
    }
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows().max(1) as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

fn centered(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        row -= mean.transpose();
    }
    out
}

/// Minimizes `mean ||x W + b - y||^2 + lambda ||W||_F^2` in closed form.
/// The intercept is not penalized.
pub fn fit_ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<RidgeModel, InterpError> {
    if x.nrows() != y.nrows() || x.nrows() == 0 {
        return Err(InterpError::InvalidInput(format!(
            "{} feature rows but {} target rows",
            x.nrows(),
            y.nrows()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(InterpError::InvalidInput(format!("ridge penalty {lambda} must be non-negative")));
    }
    let rows = x.nrows() as f64;
    let (xm, ym) = (column_means(x), column_means(y));
    let (xc, yc) = (centered(x, &xm), centered(y, &ym));
    let mut gram = xc.tr_mul(&xc) / rows;
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rhs = xc.tr_mul(&yc) / rows;
    let chol = gram.cholesky().ok_or(InterpError::SingularProbe { lambda })?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo * lo > 1e-12 * hi * hi) {
        return Err(InterpError::SingularProbe { lambda });
    }
    let weights = chol.solve(&rhs);
    let bias = ym - weights.tr_mul(&xm);
    Ok(RidgeModel { weights, bias })
}

/// Features and targets for one hidden-state index, already split.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub layer: usize,
    pub train_x: DMatrix<f64>,
    pub train_y: DMatrix<f64>,
    pub test_x: DMatrix<f64>,
    pub test_y: DMatrix<f64>,
    pub absolute_cosine: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub layer: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    /// Mean cosine between predicted and true target rows on the test
    /// split; for scalar targets, the cosine between the two columns.
    pub test_cosine: f64,
    /// Mean per-coordinate variance of the test targets.
    pub target_variance: f64,
}

fn mse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm_squared() / a.len().max(1) as f64
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

fn mean_cosine(pred: &DMatrix<f64>, truth: &DMatrix<f64>, absolute: bool) -> f64 {
    let adjust = |c: f64| if absolute { c.abs() } else { c };
    if pred.ncols() == 1 {
        return cosine(pred.as_slice(), truth.as_slice()).map(adjust).unwrap_or(0.0);
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, t) in pred.row_iter().zip(truth.row_iter()) {
        let p: Vec<f64> = p.iter().copied().collect();
        let t: Vec<f64> = t.iter().copied().collect();
        if let Some(c) = cosine(&p, &t) {
            sum += adjust(c);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

impl ProbeDataset {
    pub fn fit(&self, lambda: f64) -> Result<(RidgeModel, LayerProbe), InterpError> {
        let model = fit_ridge(&self.train_x, &self.train_y, lambda)?;
        let test_pred = model.predict(&self.test_x);
        let target_variance = {
            let m = column_means(&self.test_y);
            centered(&self.test_y, &m).norm_squared() / self.test_y.len().max(1) as f64
        };
        let probe = LayerProbe {
            layer: self.layer,
            train_mse: mse(&model.predict(&self.train_x), &self.train_y),
            test_mse: mse(&test_pred, &self.test_y),
            test_cosine: mean_cosine(&test_pred, &self.test_y, self.absolute_cosine),
            target_variance,
        };
        Ok((model, probe))
    }
}

fn leading_left_vector(inst: &MaskedInstance) -> Result<Vec<f64>, InterpError> {
    let n = inst.n();
    let x = DMatrix::from_row_slice(n, n, &inst.matrix.values);
    let dec = svd(&x)?;
    let mut u: Vec<f64> = dec.u.column(0).iter().copied().collect();
    let lead = u.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
    if lead < 0.0 {
        u.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(u)
}

/// `(position, target)` pairs probed for one instance.
fn instance_targets(inst: &MaskedInstance, target: ProbeTarget) -> Result<Vec<(usize, Vec<f64>)>, InterpError> {
    let n = inst.n();
    Ok(match target {
        ProbeTarget::MaskedRow => (0..n * n)
            .map(|q| {
                let i = q / n;
                let row = (0..n)
                    .map(|j| {
                        let k = i * n + j;
                        if inst.mask.observed[k] {
                            inst.matrix.values[k]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                (q, row)
            })
            .collect(),
        ProbeTarget::MaskedValue => (0..n * n)
            .filter(|&q| !inst.mask.observed[q])
            .map(|q| (q, vec![inst.matrix.values[q]]))
            .collect(),
        ProbeTarget::SingularVector => {
            let u = leading_left_vector(inst)?;
            (0..n * n).map(|q| (q, u.clone())).collect()
        }
    })
}

fn collect<F: Real>(
    weights: &ModelWeights<F>,
    instances: &[MaskedInstance],
    target: ProbeTarget,
    layer: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>), InterpError> {
    let d = weights.config().hidden;
    let (mut xs, mut ys, mut width) = (Vec::new(), Vec::new(), 0usize);
    let mut rows = 0usize;
    for chunk in instances.chunks(CHUNK) {
        let tokens: Vec<u32> = chunk.iter().flat_map(|i| i.tokens.iter().copied()).collect();
        let out = forward(weights, &tokens, &ForwardOptions::recording())?;
        let record = out.record.expect("recording requested");
        let hidden = record
            .hidden(layer)
            .ok_or_else(|| InterpError::InvalidInput(format!("model has no hidden state {layer}")))?
            .data();
        let s = record.seq_len;
        for (b, inst) in chunk.iter().enumerate() {
            for (q, y) in instance_targets(inst, target)? {
                let start = (b * s + q) * d;
                xs.extend(hidden[start..start + d].iter().map(|v| v.as_f64()));
                width = y.len();
                ys.extend(y);
                rows += 1;
            }
        }
    }
    Ok((
        DMatrix::from_row_slice(rows, d, &xs),
        DMatrix::from_row_slice(rows, width, &ys),
    ))
}

fn probe_batch(data: &DataConfig, config: &ProbeConfig) -> Result<Batch, InterpError> {
    let batch = evaluation_batch(data, config.samples, None, config.seed)?;
    if config.target != ProbeTarget::SingularVector {
        return Ok(batch);
    }
    Ok(Batch::new(
        batch
            .instances
            .into_iter()
            .map(|i| MaskedInstance::new(i.matrix, Mask::fully_observed(data.n)))
            .collect::<Result<Vec<_>, _>>()?,
    )?)
}

/// Builds the probe dataset for hidden-state index `layer` (`0` =
/// embeddings). The split is over matrices, so no matrix contributes rows to
/// both sides.
pub fn probe_dataset<F: Real>(
    weights: &ModelWeights<F>,
    data: &DataConfig,
    config: &ProbeConfig,
    layer: usize,
) -> Result<ProbeDataset, InterpError> {
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(InterpError::InvalidInput(format!(
            "train fraction {} must lie strictly between 0 and 1",
            config.train_fraction
        )));
    }
    let batch = probe_batch(data, config)?;
    let n_train = (config.samples as f64 * config.train_fraction).floor() as usize;
    if n_train == 0 || n_train == config.samples {
        return Err(InterpError::InvalidInput(format!(
            "{} samples are too few for a {} split",
            config.samples, config.train_fraction
        )));
    }
    let (train, test) = batch.instances.split_at(n_train);
    let (train_x, train_y) = collect(weights, train, config.target, layer)?;
    let (test_x, test_y) = collect(weights, test, config.target, layer)?;
    if train_x.nrows() == 0 || test_x.nrows() == 0 {
        return Err(InterpError::InvalidInput("a split has no probed positions".into()));
    }
    Ok(ProbeDataset {
        layer,
        train_x,
        train_y,
        test_x,
        test_y,
        absolute_cosine: config.target == ProbeTarget::SingularVector,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub target: ProbeTarget,
    pub lambda: f64,
    /// Rows in each split.
    pub train_size: usize,
    pub test_size: usize,
    pub layers: Vec<LayerProbe>,
}

impl ProbeResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,train_mse,test_mse,test_cosine,target_variance\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                l.layer, l.train_mse, l.test_mse, l.test_cosine, l.target_variance
            ));
        }
        out
    }
}

/// Fits one ridge probe per hidden-state index.
pub fn fit_probe<F: Real>(
    weights: &ModelWeights<F>,
    data: &DataConfig,
    config: &ProbeConfig,
) -> Result<ProbeResult, InterpError> {
    let depth = weights.config().layers;
    let layers = config.layers.clone().unwrap_or_else(|| (0..=depth).collect());
    if let Some(&bad) = layers.iter().find(|&&l| l > depth) {
        return Err(InterpError::InvalidInput(format!("layer {bad} exceeds model depth {depth}")));
    }
    let mut result = ProbeResult {
        target: config.target,
        lambda: config.lambda,
        train_size: 0,
        test_size: 0,
        layers: Vec::new(),
    };
    for layer in layers {
        let ds = probe_dataset(weights, data, config, layer)?;
        result.train_size = ds.train_x.nrows();
        result.test_size = ds.test_x.nrows();
        result.layers.push(ds.fit(config.lambda)?.1);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn realizable_target_is_recovered() {
        let w = init_model::<f64>(&ModelConfig::new(3, 2, 2, 8), 0).unwrap();
        let data = DataConfig::low_rank(3, 1, 0.3);
        let cfg = ProbeConfig {
            samples: 40,
            ..ProbeConfig::new(ProbeTarget::MaskedRow)
        };
        let mut ds = probe_dataset(&w, &data, &cfg, 2).unwrap();
        let map = DMatrix::from_fn(8, 2, |i, j| ((i * 3 + j) as f64).sin());
        ds.train_y = &ds.train_x * &map;
        ds.test_y = &ds.test_x * &map;
        let (_, probe) = ds.fit(1e-10).unwrap();
        assert!(probe.test_mse < 1e-10, "{}", probe.test_mse);
        assert!(probe.test_cosine > 0.999);
    }

    #[test]
    fn zero_penalty_on_layer_norm_features_is_singular() {
        // Normalized hidden states with unit gain and zero shift sum to zero,
        // so the centered design has a null direction.
        let w = init_model::<f64>(&ModelConfig::new(3, 1, 2, 8), 0).unwrap();
        let data = DataConfig::low_rank(3, 1, 0.3);
        let cfg = ProbeConfig {
            samples: 40,
            lambda: 0.0,
            ..ProbeConfig::new(ProbeTarget::MaskedRow)
        };
        assert!(matches!(
            fit_probe(&w, &data, &cfg),
            Err(InterpError::SingularProbe { .. })
        ));
        let ok = ProbeConfig { lambda: 1e-3, ..cfg };
        let res = fit_probe(&w, &data, &ok).unwrap();
        assert_eq!(res.layers.len(), 2);
        for l in &res.layers {
            assert!(l.test_mse >= 0.0 && (-1.0..=1.0).contains(&l.test_cosine));
        }
    }

    #[test]
    fn targets_have_expected_shapes() {
        let data = DataConfig::low_rank(3, 1, 0.5);
        let batch = evaluation_batch(&data, 4, None, 2).unwrap();
        let inst = &batch.instances[0];
        let rows = instance_targets(inst, ProbeTarget::MaskedRow).unwrap();
        assert_eq!(rows.len(), 9);
        for (q, row) in &rows {
            for j in 0..3 {
                let k = (q / 3) * 3 + j;
                let expected = if inst.mask.observed[k] { inst.matrix.values[k] } else { 0.0 };
                assert_eq!(row[j], expected);
            }
        }
        let values = instance_targets(inst, ProbeTarget::MaskedValue).unwrap();
        assert_eq!(values.len(), inst.mask.masked_count());
        let u = leading_left_vector(inst).unwrap();
        assert!((u.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(u.iter().all(|v| v.abs() <= u.iter().copied().fold(f64::MIN, f64::max) + 1e-15));
    }

    #[test]
    fn bad_splits_rejected() {
        let w = init_model::<f64>(&ModelConfig::new(3, 1, 2, 8), 0).unwrap();
        let data = DataConfig::low_rank(3, 1, 0.3);
        let cfg = ProbeConfig {
            samples: 1,
            ..ProbeConfig::new(ProbeTarget::MaskedRow)
        };
        assert!(probe_dataset(&w, &data, &cfg, 0).is_err());
        let cfg = ProbeConfig {
            train_fraction: 1.0,
            ..ProbeConfig::new(ProbeTarget::MaskedRow)
        };
        assert!(probe_dataset(&w, &data, &cfg, 0).is_err());
    }
}
