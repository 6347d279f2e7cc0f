use serde::{Deserialize, Serialize};

use super::attention::{HeadKind, HeadLabel};
use super::intervene::{apply_intervention, evaluation_batch, InterventionSpec};
use super::InterpError;
use crate::data::DataConfig;
use crate::model::{HeadId, LossBreakdown, ModelWeights};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadGroup {
    pub name: String,
    pub heads: Vec<HeadId>,
}

impl HeadGroup {
    fn one_based(name: &str, heads: &[(usize, usize)]) -> Self {
        Self {
            name: name.into(),
            heads: heads.iter().map(|&(l, h)| HeadId::one_based(l, h)).collect(),
        }
    }
}

/// Head groups identified on the published 4-layer, 8-head checkpoint.
/// Indices are specific to that checkpoint; other runs should use
/// [`derive_groups`].
pub fn published_groups() -> Vec<HeadGroup> {
    vec![
        HeadGroup::one_based("masked_row", &[(2, 1), (3, 4), (4, 8)]),
        HeadGroup::one_based("observed_copy", &[(4, 3), (4, 4)]),
        HeadGroup::one_based(
            "mask_ignore",
            &[(2, 2), (2, 3), (2, 4), (2, 6), (3, 2), (3, 3), (3, 5), (3, 1), (3, 6)],
        ),
        HeadGroup::one_based("longest_contiguous_column", &[(2, 5), (2, 7), (2, 8)]),
        HeadGroup::one_based("input_processing", &[(1, 1), (1, 2), (1, 5), (1, 6), (1, 7), (1, 8)]),
        HeadGroup::one_based("uninterpretable", &[(3, 3), (4, 2), (4, 5), (4, 6), (4, 7)]),
    ]
}

/// One group per head kind, skipping empty kinds.
pub fn derive_groups(labels: &[HeadLabel]) -> Vec<HeadGroup> {
    [HeadKind::Row, HeadKind::Column, HeadKind::Identity, HeadKind::Other]
        .into_iter()
        .filter_map(|kind| {
            let heads: Vec<HeadId> = labels.iter().filter(|l| l.kind == kind).map(|l| l.head).collect();
            (!heads.is_empty()).then(|| HeadGroup {
                name: kind.to_string(),
                heads,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAblationRow {
    pub group: HeadGroup,
    pub with_ablation: LossBreakdown,
    pub without_ablation: LossBreakdown,
    /// `L` with ablation over `L` without.
    pub ratio: f64,
}

/// Uniformly ablates each group in turn on fresh instances. Every group is
/// scored on its own sample set, drawn from `seed + k` for group `k`.
pub fn group_ablation<F: Real>(
    weights: &ModelWeights<F>,
    data: &DataConfig,
    groups: &[HeadGroup],
    samples: usize,
    seed: u64,
) -> Result<Vec<GroupAblationRow>, InterpError> {
    groups
        .iter()
        .enumerate()
        .map(|(k, group)| {
            let batch = evaluation_batch(data, samples, None, seed.wrapping_add(k as u64))?;
            let out = apply_intervention(
                weights,
                &batch,
                &InterventionSpec::UniformAblation {
                    heads: group.heads.clone(),
                },
            )?;
            Ok(GroupAblationRow {
                group: group.clone(),
                ratio: out.loss.total / out.baseline.total,
                with_ablation: out.loss,
                without_ablation: out.baseline,
            })
        })
        .collect()
}
