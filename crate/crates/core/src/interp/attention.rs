use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::intervene::evaluation_batch;
use super::{io_err, InterpError, CHUNK};
use crate::data::{structured_mask, DataConfig, Mask};
use crate::model::{forward, ForwardOptions, ForwardRecord, HeadId, ModelWeights};
use crate::tensor::Real;

/// A head is labeled only when its top score is at least this multiple of
/// the score uniform attention would get.
pub const DEFAULT_OTHER_FACTOR: f64 = 2.0;

const EXPORT_FORMAT: &str = "matcomp-attention/1";
const BLOB_NAME: &str = "attention.f32";
const MANIFEST_NAME: &str = "attention.json";
const CSV_NAME: &str = "head_stats.csv";

/// How masks are drawn while averaging attention maps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MaskMode {
    /// A fresh random mask per instance.
    Random,
    /// One fixed mask: each `(row, column)` masks that row except the
    /// column; other rows are fully observed.
    Structured { rows: Vec<(usize, usize)> },
}

impl MaskMode {
    pub fn fixed_mask(&self, n: usize) -> Result<Option<Mask>, InterpError> {
        match self {
            Self::Random => Ok(None),
            Self::Structured { rows } => Ok(Some(structured_mask(n, rows)?)),
        }
    }
}

/// Average attention mass a head puts on parts of the matrix, over all
/// query positions. Row and column masses include the query itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub head: HeadId,
    pub row_mass: f64,
    pub column_mass: f64,
    pub diagonal_mass: f64,
    /// Mass on masked positions; only defined for a fixed mask.
    pub masked_mass: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSummary {
    pub n: usize,
    pub layers: usize,
    pub heads: usize,
    pub samples: usize,
    pub mask: MaskMode,
    /// `[layers, heads, S, S]` mean attention probabilities.
    pub maps: Vec<f64>,
    pub stats: Vec<HeadStats>,
}

impl AttentionSummary {
    pub fn seq_len(&self) -> usize {
        self.n * self.n
    }

    pub fn map(&self, head: HeadId) -> &[f64] {
        let s2 = self.seq_len() * self.seq_len();
        let start = (head.layer * self.heads + head.head) * s2;
        &self.maps[start..start + s2]
    }

    pub fn stats(&self, head: HeadId) -> &HeadStats {
        &self.stats[head.layer * self.heads + head.head]
    }
}

fn head_stats(head: HeadId, map: &[f64], n: usize, observed: Option<&[bool]>) -> HeadStats {
    let s = n * n;
    let (mut row, mut col, mut diag, mut masked) = (0.0, 0.0, 0.0, 0.0);
    for q in 0..s {
        let p = &map[q * s..(q + 1) * s];
        let (i, j) = (q / n, q % n);
        row += p[i * n..(i + 1) * n].iter().sum::<f64>();
        col += (0..n).map(|k| p[k * n + j]).sum::<f64>();
        diag += p[q];
        if let Some(obs) = observed {
            masked += p.iter().zip(obs).filter(|(_, &o)| !o).map(|(v, _)| v).sum::<f64>();
        }
    }
    let s = s as f64;
    HeadStats {
        head,
        row_mass: row / s,
        column_mass: col / s,
        diagonal_mass: diag / s,
        masked_mass: observed.map(|_| masked / s),
    }
}

struct Accumulator {
    n: usize,
    layers: usize,
    heads: usize,
    samples: usize,
    sums: Vec<f64>,
}

impl Accumulator {
    fn new(n: usize, layers: usize, heads: usize) -> Self {
        let s = n * n;
        Self {
            n,
            layers,
            heads,
            samples: 0,
            sums: vec![0.0; layers * heads * s * s],
        }
    }

    fn add<F: Real>(&mut self, record: &ForwardRecord<F>) -> Result<(), InterpError> {
        let s = self.n * self.n;
        if record.seq_len != s || record.layers() != self.layers || record.heads != self.heads {
            return Err(InterpError::InvalidInput(format!(
                "record of {} layers x {} heads over {} positions does not match {} x {} over {}",
                record.layers(),
                record.heads,
                record.seq_len,
                self.layers,
                self.heads,
                s
            )));
        }
        let per_sample = self.heads * s * s;
        for (l, att) in record.attention.iter().enumerate() {
            let acc = &mut self.sums[l * per_sample..(l + 1) * per_sample];
            for sample in att.data().chunks_exact(per_sample) {
                for (a, v) in acc.iter_mut().zip(sample) {
                    *a += v.as_f64();
                }
            }
        }
        self.samples += record.batch;
        Ok(())
    }

    fn finish(self, mask: MaskMode) -> Result<AttentionSummary, InterpError> {
        if self.samples == 0 {
            return Err(InterpError::InvalidInput("no samples recorded".into()));
        }
        let scale = 1.0 / self.samples as f64;
        let maps: Vec<f64> = self.sums.iter().map(|v| v * scale).collect();
        let fixed = mask.fixed_mask(self.n)?;
        let s2 = self.n * self.n * self.n * self.n;
        let stats = HeadId::all(self.layers, self.heads)
            .into_iter()
            .enumerate()
            .map(|(k, head)| {
                head_stats(
                    head,
                    &maps[k * s2..(k + 1) * s2],
                    self.n,
                    fixed.as_ref().map(|m| m.observed.as_slice()),
                )
            })
            .collect();
        Ok(AttentionSummary {
            n: self.n,
            layers: self.layers,
            heads: self.heads,
            samples: self.samples,
            mask,
            maps,
            stats,
        })
    }
}

/// Averages already-recorded forward passes.
pub fn summarize_records<F: Real>(
    records: &[ForwardRecord<F>],
    n: usize,
    mask: MaskMode,
) -> Result<AttentionSummary, InterpError> {
    let first = records
        .first()
        .ok_or_else(|| InterpError::InvalidInput("no records to summarize".into()))?;
    let mut acc = Accumulator::new(n, first.layers(), first.heads);
    for r in records {
        acc.add(r)?;
    }
    acc.finish(mask)
}

/// Mean attention maps over `samples` fresh instances.
pub fn record_attention<F: Real>(
    weights: &ModelWeights<F>,
    data: &DataConfig,
    samples: usize,
    mask: &MaskMode,
    seed: u64,
) -> Result<AttentionSummary, InterpError> {
    let cfg = weights.config();
    if data.n != cfg.n {
        return Err(InterpError::InvalidInput(format!(
            "model expects {0}x{0} inputs, data is {1}x{1}",
            cfg.n, data.n
        )));
    }
    let fixed = mask.fixed_mask(data.n)?;
    let batch = evaluation_batch(data, samples, fixed.as_ref(), seed)?;
    let mut acc = Accumulator::new(cfg.n, cfg.layers, cfg.heads);
    for chunk in batch.instances.chunks(CHUNK) {
        let tokens: Vec<u32> = chunk.iter().flat_map(|i| i.tokens.iter().copied()).collect();
        let out = forward(weights, &tokens, &ForwardOptions::recording())?;
        acc.add(out.record.as_ref().expect("recording requested"))?;
    }
    acc.finish(mask.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Row,
    Column,
    Identity,
    Other,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Row => "row",
            Self::Column => "column",
            Self::Identity => "identity",
            Self::Other => "other",
        })
    }
}

/// Label of one head. Scores split the matrix into disjoint parts: the
/// query's row without the query, its column without the query, and the
/// query itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadLabel {
    pub head: HeadId,
    pub kind: HeadKind,
    pub row_score: f64,
    pub column_score: f64,
    pub diagonal_score: f64,
    /// Top score minus the runner-up.
    pub margin: f64,
    /// Top score divided by its uniform-attention baseline.
    pub strength: f64,
}

/// Labels each head by where it puts most of its mass. A head whose top
/// score is below `other_factor` times that score's uniform baseline is
/// `Other`.
pub fn classify_heads(summary: &AttentionSummary, other_factor: f64) -> Vec<HeadLabel> {
    let n = summary.n as f64;
    let s = n * n;
    let off = (n - 1.0) / s;
    let baselines = [off, off, 1.0 / s];
    summary
        .stats
        .iter()
        .map(|st| {
            let scores = [
                (st.row_mass - st.diagonal_mass).max(0.0),
                (st.column_mass - st.diagonal_mass).max(0.0),
                st.diagonal_mass,
            ];
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            let top = order[0];
            let strength = if baselines[top] > 0.0 {
                scores[top] / baselines[top]
            } else {
                0.0
            };
            let kind = if strength < other_factor {
                HeadKind::Other
            } else {
                [HeadKind::Row, HeadKind::Column, HeadKind::Identity][top]
            };
            HeadLabel {
                head: st.head,
                kind,
                row_score: scores[0],
                column_score: scores[1],
                diagonal_score: scores[2],
                margin: scores[top] - scores[order[1]],
                strength,
            }
        })
        .collect()
}

/// JSON manifest written next to the attention blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub format: String,
    pub n: usize,
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub samples: usize,
    pub mask: MaskMode,
    pub dtype: String,
    pub byte_order: String,
    /// Axis order of the blob.
    pub layout: Vec<String>,
    pub blob: String,
    pub stats: Vec<HeadStats>,
}

/// Writes `attention.f32`, `attention.json` and, if `csv`, `head_stats.csv`.
pub fn write_attention_export(
    summary: &AttentionSummary,
    dir: &Path,
    csv: bool,
) -> Result<AttentionExport, InterpError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let blob: Vec<u8> = summary
        .maps
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    let blob_path = dir.join(BLOB_NAME);
    fs::write(&blob_path, blob).map_err(io_err(&blob_path))?;
    let manifest = AttentionExport {
        format: EXPORT_FORMAT.into(),
        n: summary.n,
        layers: summary.layers,
        heads: summary.heads,
        seq_len: summary.seq_len(),
        samples: summary.samples,
        mask: summary.mask.clone(),
        dtype: "f32".into(),
        byte_order: "little".into(),
        layout: ["layer", "head", "query", "key"].map(String::from).to_vec(),
        blob: BLOB_NAME.into(),
        stats: summary.stats.clone(),
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    if csv {
        let mut text = String::from("layer,head,row_mass,column_mass,diagonal_mass,masked_mass\n");
        for st in &summary.stats {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                st.head.layer + 1,
                st.head.head + 1,
                st.row_mass,
                st.column_mass,
                st.diagonal_mass,
                st.masked_mass.map(|v| v.to_string()).unwrap_or_default()
            ));
        }
        let path = dir.join(CSV_NAME);
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(manifest)
}

/// Reads an export back; maps come back at `f32` precision.
pub fn read_attention_export(dir: &Path) -> Result<AttentionSummary, InterpError> {
    let path = dir.join(MANIFEST_NAME);
    let manifest: AttentionExport = serde_json::from_str(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
    if manifest.format != EXPORT_FORMAT {
        return Err(InterpError::InvalidInput(format!("unknown export format {}", manifest.format)));
    }
    let blob_path = dir.join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    let expected = manifest.layers * manifest.heads * manifest.seq_len * manifest.seq_len * 4;
    if bytes.len() != expected {
        return Err(InterpError::InvalidInput(format!(
            "attention blob has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let maps = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(AttentionSummary {
        n: manifest.n,
        layers: manifest.layers,
        heads: manifest.heads,
        samples: manifest.samples,
        mask: manifest.mask,
        maps,
        stats: manifest.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn synthetic(n: usize, kernel: impl Fn(usize, usize) -> f64) -> AttentionSummary {
        let s = n * n;
        let mut map = vec![0.0; s * s];
        for q in 0..s {
            let row: Vec<f64> = (0..s).map(|k| kernel(q, k)).collect();
            let total: f64 = row.iter().sum();
            for k in 0..s {
                map[q * s + k] = row[k] / total;
            }
        }
        let mut acc = Accumulator::new(n, 1, 1);
        acc.sums = map;
        acc.samples = 1;
        acc.finish(MaskMode::Random).unwrap()
    }

    #[test]
    fn synthetic_maps_get_expected_labels() {
        let n = 5;
        let diag = synthetic(n, |q, k| if q == k { 1.0 } else { 0.0 });
        assert_eq!(diag.stats[0].diagonal_mass, 1.0);
        assert_eq!(classify_heads(&diag, 2.0)[0].kind, HeadKind::Identity);

        let row = synthetic(n, |q, k| if q / n == k / n { 1.0 } else { 0.0 });
        assert!((row.stats[0].row_mass - 1.0).abs() < 1e-12);
        assert_eq!(classify_heads(&row, 2.0)[0].kind, HeadKind::Row);

        let col = synthetic(n, |q, k| if q % n == k % n && q != k { 1.0 } else { 0.0 });
        assert_eq!(classify_heads(&col, 2.0)[0].kind, HeadKind::Column);

        let uniform = synthetic(n, |_, _| 1.0);
        let st = &uniform.stats[0];
        assert!((st.row_mass - 0.2).abs() < 1e-12 && (st.diagonal_mass - 0.04).abs() < 1e-12);
        let label = &classify_heads(&uniform, 2.0)[0];
        assert_eq!(label.kind, HeadKind::Other);
        assert!((label.strength - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_sample_summary_equals_record() {
        let w = init_model::<f64>(&ModelConfig::new(3, 2, 2, 8), 0).unwrap();
        let data = DataConfig::low_rank(3, 1, 0.3);
        let summary = record_attention(&w, &data, 1, &MaskMode::Random, 5).unwrap();
        let batch = evaluation_batch(&data, 1, None, 5).unwrap();
        let rec = forward(&w, &batch.tokens(), &ForwardOptions::recording())
            .unwrap()
            .record
            .unwrap();
        for head in HeadId::all(2, 2) {
            let map = summary.map(head);
            for q in 0..9 {
                assert_eq!(&map[q * 9..(q + 1) * 9], rec.attention_row(head, 0, q));
            }
        }
    }

    #[test]
    fn mean_maps_are_stochastic() {
        let w = init_model::<f32>(&ModelConfig::new(4, 2, 2, 8), 1).unwrap();
        let data = DataConfig::low_rank(4, 1, 0.3);
        let mode = MaskMode::Structured { rows: vec![(0, 1), (2, 3)] };
        let summary = record_attention(&w, &data, 7, &mode, 5).unwrap();
        assert_eq!(summary.samples, 7);
        for row in summary.maps.chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-4);
        }
        for st in &summary.stats {
            for v in [st.row_mass, st.column_mass, st.diagonal_mass, st.masked_mass.unwrap()] {
                assert!((0.0..=1.0 + 1e-9).contains(&v));
            }
        }
    }

    #[test]
    fn export_round_trip() {
        let w = init_model::<f32>(&ModelConfig::new(3, 1, 2, 8), 1).unwrap();
        let summary = record_attention(&w, &DataConfig::low_rank(3, 1, 0.3), 3, &MaskMode::Random, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_attention_export(&summary, dir.path(), true).unwrap();
        let back = read_attention_export(dir.path()).unwrap();
        assert_eq!(back.stats, summary.stats);
        for (a, b) in back.maps.iter().zip(&summary.maps) {
            assert!((a - b).abs() < 1e-7);
        }
        let csv = fs::read_to_string(dir.path().join(CSV_NAME)).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
}
