//! Paper-result suites. Each suite measures a handful of numbers from
//! existing artifacts and checks them against a target with a comparison.
//! Targets default to the acceptance tolerances and can be overridden per
//! claim id through the `tolerances` map.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use matcomp_core::data::{DataConfig, EntryDistribution, MatrixFamily};
use matcomp_core::interp::{
    apply_intervention, classify_heads, derive_groups, embedding_series, evaluate, evaluation_batch, fit_probe,
    group_ablation, negation_patch, published_groups, random_permutation, record_attention, switch_weights,
    token_intervention, HeadGroup, HeadKind, InterventionSpec, MaskMode, ProbeConfig, ProbeResult, ProbeTarget,
    DEFAULT_OTHER_FACTOR,
};
use matcomp_core::model::{Checkpoint, Component, HeadId, LossBreakdown, ModelWeights};
use matcomp_core::nucnorm::{compare_bert_vs_nucnorm, Mode};
use matcomp_core::train::{detect_transition, MetricSeries, TransitionConfig, TransitionReport};

use crate::config::Config;
use crate::jobs::{base_data, list_checkpoints, load, read_metrics, run_nucnorm, write_json, write_text};
use crate::{runtime, CliError};

pub const SUITES: [&str; 13] = [
    "fig2", "fig3", "table1", "sec312", "sec321", "appB", "appF", "appJ", "fig6", "fig5", "fig7", "fig13", "appH",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">")]
    Above,
}

impl Comparison {
    fn holds(self, measured: f64, target: f64) -> bool {
        match self {
            Self::AtMost => measured <= target,
            Self::AtLeast => measured >= target,
            Self::Below => measured < target,
            Self::Above => measured > target,
        }
    }
}

/// One checked number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    pub description: String,
    pub measured: f64,
    pub comparison: Comparison,
    pub target: f64,
    /// Value reported for the published run, when there is one.
    pub published: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub claims: Vec<Claim>,
    pub pass: bool,
    /// Supporting numbers that are not checked.
    pub details: serde_json::Value,
}

impl SuiteReport {
    pub fn lines(&self) -> Vec<String> {
        self.claims
            .iter()
            .map(|c| {
                let op = serde_json::to_value(c.comparison).ok().and_then(|v| v.as_str().map(String::from));
                format!(
                    "{} {}: {:.6e} {} {:.6e} ({})",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.id,
                    c.measured,
                    op.unwrap_or_default(),
                    c.target,
                    c.description
                )
            })
            .collect()
    }
}

/// Collects claims, applying target overrides.
#[derive(Debug, Default)]
pub struct Claims {
    overrides: BTreeMap<String, f64>,
    claims: Vec<Claim>,
}

impl Claims {
    pub fn new(overrides: BTreeMap<String, f64>) -> Self {
        Self {
            overrides,
            claims: Vec::new(),
        }
    }

    pub fn check(
        &mut self,
        id: &str,
        description: impl Into<String>,
        measured: f64,
        comparison: Comparison,
        target: f64,
        published: Option<f64>,
    ) {
        let target = self.overrides.get(id).copied().unwrap_or(target);
        self.claims.push(Claim {
            id: id.to_string(),
            description: description.into(),
            measured,
            comparison,
            target,
            published,
            pass: measured.is_finite() && comparison.holds(measured, target),
        });
    }

    pub fn finish(self, suite: &str, details: serde_json::Value) -> SuiteReport {
        SuiteReport {
            suite: suite.to_string(),
            pass: self.claims.iter().all(|c| c.pass),
            claims: self.claims,
            details,
        }
    }
}

/// Checkpoints a suite may need, resolved before anything runs.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub run: Option<PathBuf>,
    pub pre: Option<(PathBuf, Checkpoint)>,
    pub post: Option<(PathBuf, Checkpoint)>,
    pub transition: Option<TransitionReport>,
    pub series: Option<MetricSeries>,
}

fn missing(suite: &str, what: &str, first: &str) -> CliError {
    CliError::Usage(format!("suite {suite} needs {what}; run `matcomp-lab {first}` first"))
}

/// Checkpoints of a run with the steps before and after its drop.
fn split_run(run: &Path) -> Result<(MetricSeries, TransitionReport, Vec<(u64, PathBuf)>), CliError> {
    let series = read_metrics(run)?;
    let report = detect_transition(&series, TransitionConfig::for_len(series.len()))
        .map_err(|e| CliError::Usage(format!("cannot analyse {}: {e}", run.display())))?;
    let ckpts = list_checkpoints(run)?;
    Ok((series, report, ckpts))
}

/// Last checkpoint strictly before `step`.
pub fn before(ckpts: &[(u64, PathBuf)], step: u64) -> Option<&(u64, PathBuf)> {
    ckpts.iter().rfind(|(s, _)| *s < step)
}

#[derive(Clone, Debug)]
pub struct Suite {
    name: String,
    inputs: Inputs,
    samples: Option<usize>,
    tolerances: BTreeMap<String, f64>,
    retrain_runs: BTreeMap<String, MetricSeries>,
    rank_runs: BTreeMap<usize, MetricSeries>,
    strict: bool,
}

impl Suite {
    pub fn prepare(config: &Config) -> Result<Self, CliError> {
        let name = config.require(&config.suite, "suite")?.clone();
        if !SUITES.contains(&name.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown suite '{name}'; use one of {}",
                SUITES.join(", ")
            )));
        }
        let mut inputs = Inputs {
            run: config.run.clone(),
            pre: None,
            post: None,
            transition: None,
            series: None,
        };
        if let Some(run) = &config.run {
            let (series, report, ckpts) = split_run(run)?;
            if let Some(step) = report.drop_step {
                if let Some((_, p)) = before(&ckpts, step) {
                    inputs.pre = Some((p.clone(), load(p)?));
                }
            }
            if let Some((_, p)) = ckpts.last() {
                inputs.post = Some((p.clone(), load(p)?));
            }
            inputs.series = Some(series);
            inputs.transition = Some(report);
        }
        if let Some(p) = &config.pre_checkpoint {
            inputs.pre = Some((p.clone(), load(p)?));
        }
        if let Some(p) = config.post_checkpoint.as_ref().or(config.checkpoint.as_ref()) {
            inputs.post = Some((p.clone(), load(p)?));
        }
        // table1 looks at a single pre-drop checkpoint.
        if name == "table1" {
            if let Some(p) = &config.checkpoint {
                inputs.pre = Some((p.clone(), load(p)?));
            }
        }
        let train_first = "train --config <desk.json>";
        let need_pre = || missing(&name, "a pre-drop checkpoint (pre_checkpoint, or a run with a detected drop)", train_first);
        let need_post = || missing(&name, "a trained checkpoint (checkpoint, post_checkpoint or run)", train_first);
        match name.as_str() {
            "fig2" | "fig5" if config.run.is_none() => {
                return Err(missing(&name, "a training run directory (run=<dir>)", train_first))
            }
            "table1" if inputs.pre.is_none() => return Err(need_pre()),
            "sec312" | "sec321" if inputs.pre.is_none() => return Err(need_pre()),
            "sec312" | "sec321" | "fig3" | "appF" | "appJ" | "fig6" | "appH" if inputs.post.is_none() => {
                return Err(need_post())
            }
            _ => {}
        }
        let mut retrain_runs = BTreeMap::new();
        let mut rank_runs = BTreeMap::new();
        if name == "fig7" {
            let runs = config.retrain_runs.as_ref().ok_or_else(|| {
                missing(
                    &name,
                    "retrain_runs = {token_embeddings, mlp, positional_embeddings, attention}",
                    "retrain-component components=<name>",
                )
            })?;
            for key in ["token_embeddings", "mlp", "positional_embeddings", "attention"] {
                let dir = runs
                    .get(key)
                    .ok_or_else(|| missing(&name, &format!("retrain_runs.{key}"), &format!("retrain-component components={key}")))?;
                retrain_runs.insert(key.to_string(), read_metrics(dir)?);
            }
        }
        if name == "fig13" {
            let runs = config
                .rank_runs
                .as_ref()
                .ok_or_else(|| missing(&name, "rank_runs = {\"1\", \"2\", \"3\"}", "train n=10 rank=<r>"))?;
            for r in 1..=3usize {
                let dir = runs
                    .get(&r.to_string())
                    .ok_or_else(|| missing(&name, &format!("rank_runs.{r}"), &format!("train n=10 rank={r}")))?;
                rank_runs.insert(r, read_metrics(dir)?);
            }
        }
        Ok(Self {
            name,
            inputs,
            samples: config.samples,
            tolerances: config.tolerances.clone().unwrap_or_default(),
            retrain_runs,
            rank_runs,
            strict: config.strict.unwrap_or(false),
        })
    }

    pub fn run(&self, out: &Path, seed: u64, artifacts: &mut Vec<PathBuf>) -> Result<(), CliError> {
        let report = self.evaluate(out, seed, artifacts)?;
        artifacts.push(write_json(out, "report.json", &report)?);
        for line in report.lines() {
            println!("{line}");
        }
        if self.strict && !report.pass {
            return Err(runtime(format!("suite {} has failing claims", self.name)));
        }
        Ok(())
    }

    fn pre(&self) -> &Checkpoint {
        &self.inputs.pre.as_ref().expect("checked in prepare").1
    }

    fn post(&self) -> &Checkpoint {
        &self.inputs.post.as_ref().expect("checked in prepare").1
    }

    pub fn evaluate(&self, out: &Path, seed: u64, artifacts: &mut Vec<PathBuf>) -> Result<SuiteReport, CliError> {
        let mut c = Claims::new(self.tolerances.clone());
        let samples = |d| self.samples.unwrap_or(d);
        let details = match self.name.as_str() {
            "fig2" => {
                let series = self.inputs.series.as_ref().expect("checked in prepare");
                let report = self.inputs.transition.clone().expect("checked in prepare");
                let post = self.inputs.post.as_ref().map(|p| &p.1);
                let rank = post.map(|p| base_data(p).rank()).unwrap_or(1);
                fig2(&mut c, series, &report, rank);
                json!({ "transition": report })
            }
            "fig3" => {
                let w = &self.post().weights;
                let data = base_data(self.post());
                let p_masks = [0.1, 0.2, 0.3, 0.4, 0.5];
                let report = compare_bert_vs_nucnorm(w, &data, &p_masks, samples(256), Mode::Constrained, seed)
                    .map_err(runtime)?;
                artifacts.push(write_text(out, "compare.csv", &report.to_csv())?);
                let bert = report.get(0.3, "bert").ok_or_else(|| runtime("missing bert row"))?;
                let nn = report.get(0.3, "nucnorm").ok_or_else(|| runtime("missing nucnorm row"))?;
                c.check(
                    "fig3.mse",
                    "model MSE minus baseline MSE at p_mask 0.3",
                    bert.loss - nn.loss,
                    Comparison::Below,
                    0.0,
                    None,
                );
                c.check(
                    "fig3.nuclear_norm",
                    "model nuclear norm minus baseline nuclear norm at p_mask 0.3",
                    bert.nuclear_norm - nn.nuclear_norm,
                    Comparison::Above,
                    0.0,
                    None,
                );
                json!({ "rows": report.rows })
            }
            "table1" => {
                let ckpt = self.pre();
                let rows = table1(&mut c, &ckpt.weights, &base_data(ckpt), samples(1024), seed)?;
                json!({ "step": ckpt.step, "rows": rows })
            }
            "sec312" => {
                let pre = self.pre();
                let data = base_data(pre);
                let (base, ablated) = ablate_all(&pre.weights, &data, samples(1024), seed)?;
                let rel = |a: Option<f64>, b: Option<f64>| match (a, b) {
                    (Some(a), Some(b)) => (a - b).abs() / b,
                    _ => f64::NAN,
                };
                c.check(
                    "sec312.ablation.L_obs",
                    "relative change of L_obs when all heads are ablated before the drop",
                    rel(ablated.observed, base.observed),
                    Comparison::AtMost,
                    0.2,
                    None,
                );
                c.check(
                    "sec312.ablation.L_mask",
                    "relative change of L_mask when all heads are ablated before the drop",
                    rel(ablated.masked, base.masked),
                    Comparison::AtMost,
                    0.2,
                    None,
                );
                let hybrid = switch_weights(&pre.weights, &self.post().weights, &[Component::AttentionQkv])
                    .map_err(runtime)?;
                let switched = eval_loss(&hybrid, &data, samples(1024), seed)?;
                c.check(
                    "sec312.switch.L_mask",
                    "relative distance of L_mask from the plateau for the pre-drop model with post-drop attention",
                    rel(switched.masked, base.masked),
                    Comparison::AtMost,
                    0.2,
                    Some(0.2246),
                );
                json!({ "pre_step": pre.step, "baseline": base, "ablated": ablated, "switched": switched })
            }
            "sec321" => {
                let post = self.post();
                let data = base_data(post);
                let n = samples(1024);
                let (base, ablated) = ablate_all(&post.weights, &data, n, seed)?;
                let masked = |l: &LossBreakdown| l.masked.unwrap_or(f64::NAN);
                let observed = |l: &LossBreakdown| l.observed.unwrap_or(f64::NAN);
                c.check(
                    "sec321.ablation.L_mask_ratio",
                    "L_mask with all heads ablated over L_mask without",
                    masked(&ablated) / masked(&base),
                    Comparison::AtLeast,
                    10.0,
                    Some(0.2183 / 0.0128),
                );
                c.check(
                    "sec321.ablation.L_obs",
                    "L_obs with all heads ablated",
                    observed(&ablated),
                    Comparison::AtMost,
                    5e-3,
                    Some(3.7e-3),
                );
                let hybrid = switch_weights(&post.weights, &self.pre().weights, &[Component::AttentionQkv])
                    .map_err(runtime)?;
                let switched = eval_loss(&hybrid, &data, n, seed)?;
                c.check(
                    "sec321.switch.L_obs",
                    "L_obs of the post-drop model with pre-drop attention",
                    observed(&switched),
                    Comparison::AtMost,
                    5e-3,
                    Some(9.5e-4),
                );
                let batch = evaluation_batch(&data, n, None, seed).map_err(runtime)?;
                let perm = random_permutation(post.weights.config().seq_len(), seed);
                let permuted = apply_intervention(
                    &post.weights,
                    &batch,
                    &InterventionSpec::PositionPermutation { permutation: perm },
                )
                .map_err(runtime)?;
                c.check(
                    "sec321.permute.L_mask_ratio",
                    "L_mask with permuted positional embeddings over L_mask without",
                    masked(&permuted.loss) / masked(&permuted.baseline),
                    Comparison::AtLeast,
                    20.0,
                    None,
                );
                c.check(
                    "sec321.permute.L_obs_ratio",
                    "L_obs with permuted positional embeddings over L_obs without",
                    observed(&permuted.loss) / observed(&permuted.baseline),
                    Comparison::AtMost,
                    10.0,
                    None,
                );
                json!({
                    "post_step": post.step,
                    "baseline": base,
                    "ablated": ablated,
                    "switched": switched,
                    "permuted": permuted.loss,
                })
            }
            "appB" => {
                let data = DataConfig::low_rank(7, 2, 0.3);
                let run = run_nucnorm(&data, samples(256), Mode::Regularized { lambda: 1e-3 }, 1e-8, 50_000, seed)?;
                artifacts.push(write_text(out, "nucnorm.csv", &run.csv)?);
                c.check(
                    "appB.L_mask.low",
                    "regularized baseline L_mask, lower band",
                    run.l_mask,
                    Comparison::AtLeast,
                    0.028,
                    Some(0.040456),
                );
                c.check(
                    "appB.L_mask.high",
                    "regularized baseline L_mask, upper band",
                    run.l_mask,
                    Comparison::AtMost,
                    0.053,
                    Some(0.040456),
                );
                c.check(
                    "appB.L_obs",
                    "regularized baseline L_obs",
                    run.l_obs,
                    Comparison::AtMost,
                    2e-4,
                    Some(3.686e-5),
                );
                run.summary
            }
            "appF" => {
                let post = self.post();
                let r = negation_patch(&post.weights, &base_data(post), samples(1024), seed).map_err(runtime)?;
                c.check(
                    "appF.ratio",
                    "masked MSE to the donor X over masked MSE to the fed -X, all heads patched",
                    r.mse_to_donor / r.mse_to_input,
                    Comparison::AtMost,
                    0.1,
                    Some(0.014 / 0.8066),
                );
                json!(r)
            }
            "appJ" => {
                let post = self.post();
                let rows = app_j(&mut c, &post.weights, &base_data(post), samples(1024), seed)?;
                json!({ "groups": rows })
            }
            "fig6" => {
                let post = self.post();
                let (rows, elem) = fig6(&mut c, &post.weights, &base_data(post), samples(512), seed)?;
                artifacts.push(write_text(out, "probe_masked_row.csv", &rows.to_csv())?);
                artifacts.push(write_text(out, "probe_masked_value.csv", &elem.to_csv())?);
                json!({ "masked_row": rows, "masked_value": elem })
            }
            "fig5" => {
                let run = self.inputs.run.as_ref().expect("checked in prepare");
                let ckpts = list_checkpoints(run)?;
                let report = self.inputs.transition.as_ref().expect("checked in prepare");
                fig5(&mut c, &ckpts, report)?
            }
            "fig7" => fig7(&mut c, &self.retrain_runs)?,
            "fig13" => {
                let finals: BTreeMap<usize, f64> = self
                    .rank_runs
                    .iter()
                    .map(|(r, s)| (*r, final_loss(s)))
                    .collect();
                c.check(
                    "fig13.r2_minus_r1",
                    "final L at rank 2 minus rank 1",
                    finals[&2] - finals[&1],
                    Comparison::Above,
                    0.0,
                    None,
                );
                c.check(
                    "fig13.r3_minus_r2",
                    "final L at rank 3 minus rank 2",
                    finals[&3] - finals[&2],
                    Comparison::Above,
                    0.0,
                    None,
                );
                json!({ "final_loss": finals })
            }
            "appH" => {
                let post = self.post();
                let rows = app_h(&mut c, &post.weights, &base_data(post), samples(1024), seed)?;
                json!({ "rows": rows })
            }
            other => return Err(runtime(format!("suite {other} is not implemented"))),
        };
        Ok(c.finish(&self.name, details))
    }
}

/// Mean total loss over the last 5% of a series (at least 10 records).
pub fn final_loss(series: &MetricSeries) -> f64 {
    series
        .tail_mean((series.len() / 20).max(10), |r| Some(r.loss))
        .unwrap_or(f64::NAN)
}

pub fn fig2(c: &mut Claims, series: &MetricSeries, report: &TransitionReport, rank: usize) {
    c.check(
        "fig2.drops",
        "number of detected drops (exactly one)",
        report.drop_count() as f64,
        Comparison::AtMost,
        1.0,
        Some(1.0),
    );
    c.check(
        "fig2.drops.min",
        "number of detected drops (at least one)",
        report.drop_count() as f64,
        Comparison::AtLeast,
        1.0,
        Some(1.0),
    );
    let best_constant = rank as f64 / 9.0;
    c.check(
        "fig2.plateau.low",
        format!("plateau L_mask over the best constant predictor r/9 = {best_constant:.4}"),
        report.plateau_level / best_constant,
        Comparison::AtLeast,
        0.8,
        None,
    );
    c.check(
        "fig2.plateau.high",
        format!("plateau L_mask over the best constant predictor r/9 = {best_constant:.4}"),
        report.plateau_level / best_constant,
        Comparison::AtMost,
        1.2,
        None,
    );
    c.check(
        "fig2.final_L",
        "final training loss",
        final_loss(series),
        Comparison::AtMost,
        1e-2,
        Some(4e-3),
    );
}

fn eval_loss(weights: &ModelWeights<f32>, data: &DataConfig, samples: usize, seed: u64) -> Result<LossBreakdown, CliError> {
    let batch = evaluation_batch(data, samples, None, seed).map_err(runtime)?;
    Ok(evaluate(weights, &batch).map_err(runtime)?.0)
}

/// Losses without and with every head uniformly ablated.
pub fn ablate_all(
    weights: &ModelWeights<f32>,
    data: &DataConfig,
    samples: usize,
    seed: u64,
) -> Result<(LossBreakdown, LossBreakdown), CliError> {
    let batch = evaluation_batch(data, samples, None, seed).map_err(runtime)?;
    let cfg = weights.config();
    let heads = HeadId::all(cfg.layers, cfg.heads);
    let out = apply_intervention(weights, &batch, &InterventionSpec::UniformAblation { heads }).map_err(runtime)?;
    Ok((out.baseline, out.loss))
}

const TABLE1_STEP_1000: [[f64; 6]; 2] = [
    [1.4e-3, 9.3e-4, 7.6e-4, 1e-3, 6.7e-4, 9.6e-4],
    [1.5e-3, 8.3e-4, 7.8e-4, 1e-3, 6.8e-4, 9.6e-4],
];

pub fn table1(
    c: &mut Claims,
    weights: &ModelWeights<f32>,
    data: &DataConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<serde_json::Value>, CliError> {
    let mut rows = Vec::new();
    for (fi, family) in ["low_rank", "unconstrained"].into_iter().enumerate() {
        let d = match family {
            "unconstrained" => DataConfig {
                family: MatrixFamily::Unconstrained {
                    entries: EntryDistribution::uniform(),
                },
                ..*data
            },
            _ => *data,
        };
        for (vi, (label, value)) in [("mask", None), ("0.44", Some(0.44)), ("-0.24", Some(-0.24))]
            .into_iter()
            .enumerate()
        {
            let r = token_intervention(weights, &d, value, samples, seed).map_err(runtime)?;
            let published = TABLE1_STEP_1000[fi];
            c.check(
                &format!("table1.{family}.{label}.L_mask_prime"),
                format!("L'_mask (prediction vs the value shown at masked entries), {family} inputs, mask={label}"),
                r.l_mask_prime,
                Comparison::AtMost,
                5e-3,
                Some(published[2 * vi]),
            );
            c.check(
                &format!("table1.{family}.{label}.L_obs"),
                format!("L_obs, {family} inputs, mask={label}"),
                r.l_obs,
                Comparison::AtMost,
                5e-3,
                Some(published[2 * vi + 1]),
            );
            rows.push(json!({ "family": family, "mask": label, "report": r }));
        }
    }
    Ok(rows)
}

pub fn app_j(
    c: &mut Claims,
    weights: &ModelWeights<f32>,
    data: &DataConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<serde_json::Value>, CliError> {
    let summary = record_attention(weights, data, 256, &MaskMode::Random, seed).map_err(runtime)?;
    let labels = classify_heads(&summary, DEFAULT_OTHER_FACTOR);
    let mut groups: Vec<HeadGroup> = derive_groups(&labels);
    groups.retain(|g| g.name != HeadKind::Other.to_string() && !g.heads.is_empty());
    let cfg = weights.config();
    let published = cfg.layers == 4 && cfg.heads == 8;
    if published {
        groups.extend(published_groups());
    }
    let rows = group_ablation(weights, data, &groups, samples, seed).map_err(runtime)?;
    let mut out = Vec::new();
    for r in rows {
        let name = &r.group.name;
        let published_ratio = match name.as_str() {
            "masked_row" => Some(2.09),
            "observed_copy" => Some(1.76),
            "mask_ignore" => Some(13.26),
            "longest_contiguous_column" => Some(2.29),
            "input_processing" => Some(6.54),
            _ => None,
        };
        // Published indices only mean something for the published run, so
        // they are reported but not checked.
        let derived = published_ratio.is_none() && name != "uninterpretable";
        if derived {
            c.check(
                &format!("appJ.{name}.ratio"),
                format!("L_mask ratio when the {name} heads are ablated"),
                r.ratio,
                Comparison::Above,
                1.0,
                None,
            );
        }
        out.push(json!({
            "group": name,
            "heads": r.group.heads.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
            "ratio": r.ratio,
            "published_ratio": published_ratio,
            "checked": derived,
        }));
    }
    Ok(out)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn fig6(
    c: &mut Claims,
    weights: &ModelWeights<f32>,
    data: &DataConfig,
    samples: usize,
    seed: u64,
) -> Result<(ProbeResult, ProbeResult), CliError> {
    let depth = weights.config().layers;
    let layers: Vec<usize> = (1..=depth).collect();
    let probe = |target| {
        let mut cfg = ProbeConfig::new(target);
        cfg.samples = samples;
        cfg.seed = seed;
        cfg.layers = Some(layers.clone());
        fit_probe(weights, data, &cfg).map_err(runtime)
    };
    let rows = probe(ProbeTarget::MaskedRow)?;
    let elem = probe(ProbeTarget::MaskedValue)?;
    let mse = |r: &ProbeResult, layer: usize| {
        r.layers
            .iter()
            .find(|p| p.layer == layer)
            .map(|p| p.test_mse)
            .unwrap_or(f64::NAN)
    };
    // Intermediate layers exclude the first and, when there is room, the last.
    let last = if depth >= 3 { depth - 1 } else { depth };
    let best = (2..=last).map(|l| mse(&rows, l)).fold(f64::INFINITY, f64::min);
    c.check(
        "fig6.masked_row.best_over_first",
        "best intermediate masked-row probe test MSE over the layer-1 MSE",
        best / mse(&rows, 1),
        Comparison::AtMost,
        0.5,
        None,
    );
    let depths: Vec<f64> = layers.iter().map(|&l| l as f64).collect();
    let errors: Vec<f64> = layers.iter().map(|&l| mse(&elem, l)).collect();
    c.check(
        "fig6.masked_value.spearman",
        "Spearman correlation of element-probe test MSE with depth",
        spearman(&depths, &errors),
        Comparison::AtMost,
        -0.5,
        None,
    );
    Ok((rows, elem))
}

pub fn fig5(
    c: &mut Claims,
    ckpts: &[(u64, PathBuf)],
    transition: &TransitionReport,
) -> Result<serde_json::Value, CliError> {
    let drop = transition
        .drop_step
        .ok_or_else(|| runtime("no drop detected in the run; embedding claims need pre- and post-drop checkpoints"))?;
    let (pre_step, pre_path) = before(ckpts, drop).ok_or_else(|| runtime(format!("no checkpoint before step {drop}")))?;
    let (post_step, post_path) = ckpts.last().expect("before() found one");
    let series = vec![
        (*pre_step, load(pre_path).map_err(runtime)?.weights),
        (*post_step, load(post_path).map_err(runtime)?.weights),
    ];
    let reports = embedding_series(&series).map_err(runtime)?;
    let (pre, post) = (&reports[0], &reports[1]);
    c.check(
        "fig5.norm_asymmetry",
        "post-drop relative norm difference between e(v) and e(-v)",
        post.norm_asymmetry,
        Comparison::AtMost,
        0.15,
        None,
    );
    c.check(
        "fig5.separability",
        "post-drop sign separability in the top-2 principal plane",
        post.sign_separability,
        Comparison::AtLeast,
        0.95,
        None,
    );
    c.check(
        "fig5.pre_alignment",
        "pre-drop sign separability after projecting onto the final principal plane",
        pre.sign_separability,
        Comparison::AtLeast,
        0.8,
        None,
    );
    c.check(
        "fig5.clustering_gain",
        "positional column-clustering score post-drop minus pre-drop",
        post.clustering_score - pre.clustering_score,
        Comparison::AtLeast,
        0.05,
        None,
    );
    Ok(json!({
        "pre_step": pre_step,
        "post_step": post_step,
        "pre": { "norm_asymmetry": pre.norm_asymmetry, "sign_separability": pre.sign_separability, "clustering_score": pre.clustering_score },
        "post": { "norm_asymmetry": post.norm_asymmetry, "sign_separability": post.sign_separability, "clustering_score": post.clustering_score },
    }))
}

pub fn fig7(c: &mut Claims, runs: &BTreeMap<String, MetricSeries>) -> Result<serde_json::Value, CliError> {
    let mut reports = BTreeMap::new();
    for (k, s) in runs {
        let r = detect_transition(s, TransitionConfig::for_len(s.len())).map_err(runtime)?;
        reports.insert(k.clone(), r);
    }
    for key in ["token_embeddings", "mlp"] {
        c.check(
            &format!("fig7.{key}.drops"),
            format!("detected drops when retraining {key} alone"),
            reports[key].drop_count() as f64,
            Comparison::AtMost,
            0.0,
            Some(0.0),
        );
    }
    let step = |k: &str| reports[k].drop_step.map(|s| s as f64).unwrap_or(f64::NAN);
    c.check(
        "fig7.positional_after_attention",
        "drop step when retraining positional embeddings minus drop step when retraining attention",
        step("positional_embeddings") - step("attention"),
        Comparison::Above,
        0.0,
        None,
    );
    Ok(json!({ "transitions": reports }))
}

pub fn app_h(
    c: &mut Claims,
    weights: &ModelWeights<f32>,
    data: &DataConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<serde_json::Value>, CliError> {
    let rank = data.rank();
    let with = |entries| DataConfig {
        family: MatrixFamily::LowRank { rank, entries },
        ..*data
    };
    let base = eval_loss(weights, &with(EntryDistribution::uniform()), samples, seed)?;
    let mut rows = vec![json!({ "entries": "uniform", "loss": base })];
    for (name, entries, published) in [
        ("normal", EntryDistribution::normal(0.0, 0.25), 4e-3),
        ("laplace", EntryDistribution::laplace(0.0, 0.25), 2e-3),
    ] {
        let l = eval_loss(weights, &with(entries), samples, seed)?;
        c.check(
            &format!("appH.{name}.ratio"),
            format!("L on {name} factors over in-distribution L"),
            l.total / base.total,
            Comparison::AtMost,
            3.0,
            Some(published / 4e-3),
        );
        rows.push(json!({ "entries": name, "loss": l }));
    }
    Ok(rows)
}
