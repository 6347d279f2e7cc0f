//! Acceptance report: one line per criterion.
//!
//! Criteria 8 and 13 are deterministic and always run. The others need
//! trained models, read from an artifacts directory (`MATCOMP_ARTIFACTS`,
//! default `<workspace>/artifacts`):
//!
//! ```text
//! desk/                      matcomp-lab train (desk preset)
//! retrain/<component>/       matcomp-lab retrain-component, for token_embeddings,
//!                            mlp, positional_embeddings and attention
//! rank/r1, rank/r2, rank/r3  matcomp-lab train n=10 rank=<r>
//! ```
//!
//! Missing artifacts give NOT RUN. The process exits nonzero on a FAIL only
//! when `MATCOMP_ACCEPTANCE_STRICT=1`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use serde_json::json;

use matcomp_cli::config::Config;
use matcomp_cli::reproduce::{Claim, Suite, SuiteReport};
use matcomp_core::data::{sample_batch, stream_rng, DataConfig, Tokenizer};
use matcomp_core::model::{build_graph, init_model, mse_loss, ForwardOptions, LossBreakdown, ModelConfig};
use matcomp_core::nucnorm::{nuclear_norm, solve_constrained, svd, Mode, NucNormProblem};
use matcomp_core::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    NotRun,
}

struct Line {
    id: u8,
    name: &'static str,
    status: Status,
    detail: String,
}

impl Line {
    fn print(&self) {
        let s = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::NotRun => "NOT RUN",
        };
        println!("criterion {:>2} {:<32} {s}: {}", self.id, self.name, self.detail);
    }
}

fn from_claims(id: u8, name: &'static str, claims: &[&Claim]) -> Line {
    if claims.is_empty() {
        return Line {
            id,
            name,
            status: Status::NotRun,
            detail: "no claims measured".into(),
        };
    }
    let detail = claims
        .iter()
        .map(|c| format!("{}={:.4e}{}", c.id, c.measured, if c.pass { "" } else { "(x)" }))
        .collect::<Vec<_>>()
        .join(" ");
    Line {
        id,
        name,
        status: if claims.iter().all(|c| c.pass) { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn check(id: u8, name: &'static str, ok: bool, detail: String) -> Line {
    Line {
        id,
        name,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

/// Runs a reproduce suite; `Err` carries the reason it could not run.
fn suite(name: &str, extra: serde_json::Value, out: &Path) -> Result<SuiteReport, String> {
    let mut doc = json!({ "suite": name });
    doc.as_object_mut()
        .unwrap()
        .extend(extra.as_object().cloned().unwrap_or_default());
    let config: Config = serde_json::from_value(doc).map_err(|e| e.to_string())?;
    let s = Suite::prepare(&config).map_err(|e| e.to_string())?;
    let dir = out.join(name);
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    s.evaluate(&dir, 0, &mut Vec::new()).map_err(|e| e.to_string())
}

fn not_run(id: u8, name: &'static str, why: String) -> Line {
    Line {
        id,
        name,
        status: Status::NotRun,
        detail: why,
    }
}

fn select<'a>(report: &'a SuiteReport, prefixes: &[&str]) -> Vec<&'a Claim> {
    report
        .claims
        .iter()
        .filter(|c| prefixes.iter().any(|p| c.id.starts_with(p)))
        .collect()
}

fn claims_line(id: u8, name: &'static str, report: &Result<SuiteReport, String>, prefixes: &[&str]) -> Line {
    match report {
        Ok(r) => from_claims(id, name, &select(r, prefixes)),
        Err(e) => not_run(id, name, e.clone()),
    }
}

// Criterion 8: nuclear-norm baseline.

/// Nuclear norm minimized over the single missing entry by grid search:
/// step 1e-3 over [-10, 10], refined with step 1e-6 around the best point.
fn grid_optimum(values: &DMatrix<f64>, missing: (usize, usize)) -> f64 {
    let mut m = values.clone();
    let mut eval = |x: f64| {
        m[missing] = x;
        nuclear_norm(&m).unwrap()
    };
    let mut best = (f64::INFINITY, 0.0);
    for i in -10_000..=10_000 {
        let x = i as f64 * 1e-3;
        let v = eval(x);
        if v < best.0 {
            best = (v, x);
        }
    }
    let center = best.1;
    for i in -2_000..=2_000 {
        best.0 = best.0.min(eval(center + i as f64 * 1e-6));
    }
    best.0
}

fn baseline_oracles() -> (bool, String) {
    let mut rng = stream_rng(8, 0);
    // Fully observed input comes back unchanged.
    let mut worst_fixed = 0.0f64;
    for n in [2, 5, 7] {
        let x = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let p = NucNormProblem::new(x.clone(), DMatrix::from_element(n, n, true), Mode::Constrained);
        let sol = solve_constrained(&p).unwrap();
        worst_fixed = worst_fixed.max((sol.u - x).abs().max());
    }
    let mut worst_rel = 0.0f64;
    for k in 0..20 {
        let n = 2 + k % 2;
        let x = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let missing = (rng.random_range(0..n), rng.random_range(0..n));
        let mut mask = DMatrix::from_element(n, n, true);
        mask[missing] = false;
        let sol = solve_constrained(&NucNormProblem::new(x.clone(), mask, Mode::Constrained)).unwrap();
        let oracle = grid_optimum(&x, missing);
        worst_rel = worst_rel.max((sol.objective - oracle).abs() / oracle);
    }
    (
        worst_fixed <= 1e-8 && worst_rel <= 1e-4,
        format!("fully-observed max deviation {worst_fixed:.2e} (<= 1e-8), grid-oracle max rel gap {worst_rel:.2e} (<= 1e-4)"),
    )
}

// Criterion 13: numerical hygiene.

fn model_gradient_error() -> f64 {
    let cfg = ModelConfig::new(3, 2, 2, 8);
    let mut weights = init_model::<f64>(&cfg, 13).unwrap();
    // Larger weights than the init scale so no gradient is vanishingly small.
    for (_, t) in weights.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
    }
    let batch = sample_batch(&DataConfig::low_rank(3, 1, 0.3), 4, 13, 1).unwrap();
    let (tokens, targets) = (batch.tokens(), batch.targets());
    let loss_of = |w: &matcomp_core::model::ModelWeights<f64>| {
        let mut tape = Tape::inference();
        let g = build_graph(&mut tape, w, &|_| false, &tokens, &ForwardOptions::plain()).unwrap();
        let l = mse_loss(&mut tape, g.prediction, &targets).unwrap();
        tape.value(l).item().unwrap()
    };
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, &weights, &|_| true, &tokens, &ForwardOptions::plain()).unwrap();
    let l = mse_loss(&mut tape, g.prediction, &targets).unwrap();
    let grads = tape.backward(l).unwrap();
    let names: Vec<String> = weights.names().map(String::from).collect();
    let mut rng = stream_rng(13, 1);
    let mut pairs = Vec::new();
    for name in &names {
        let analytic = grads.get(g.params[name]).unwrap().data().to_vec();
        let used: Vec<usize> = if name == "embeddings.token" {
            // Only rows of tokens present in the batch get gradients.
            let d = cfg.hidden;
            tokens.iter().take(3).map(|&t| t as usize * d + rng.random_range(0..d)).collect()
        } else {
            (0..3).map(|_| rng.random_range(0..analytic.len())).collect()
        };
        for j in used {
            let h = 1e-5;
            let mut plus = weights.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = weights.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            pairs.push((analytic[j], numeric));
        }
    }
    let scale = pairs.iter().map(|(a, _)| a.abs()).fold(0.0, f64::max);
    pairs
        .iter()
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3 * scale))
        .fold(0.0, f64::max)
}

fn adam_error() -> f64 {
    let cfg = AdamConfig {
        lr: 3e-3,
        ..AdamConfig::default()
    };
    let mut rng = stream_rng(13, 2);
    let shape: &[usize] = &[4, 3];
    let mut param = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let mut scalar: Vec<f64> = param.data().to_vec();
    let (mut m, mut v) = (vec![0.0; 12], vec![0.0; 12]);
    let mut state = AdamState::new(cfg, [shape]);
    for t in 1..=100 {
        let g = Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0));
        for j in 0..12 {
            let gj = g.data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = m[j] / (1.0 - cfg.beta1.powi(t));
            let vh = v[j] / (1.0 - cfg.beta2.powi(t));
            scalar[j] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        adam_step(&mut [&mut param], &[&g], &mut state).unwrap();
    }
    param.data().iter().zip(&scalar).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn decomposition_error() -> f64 {
    let mut rng = stream_rng(13, 3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let len = rng.random_range(2..200);
        let p: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut o: Vec<bool> = (0..len).map(|_| rng.random_bool(0.7)).collect();
        o[0] = true;
        o[1] = false;
        let l = LossBreakdown::compute(&p, &t, &o);
        let lhs = l.observed_count as f64 * l.observed.unwrap() + l.masked_count as f64 * l.masked.unwrap();
        let rhs = l.count() as f64 * l.total;
        worst = worst.max((lhs - rhs).abs() / rhs);
    }
    worst
}

fn tokenizer_round_trip() -> usize {
    let tok = Tokenizer;
    (1..=Tokenizer::VALUE_TOKENS)
        .filter(|&id| {
            let v = tok.decode(id).unwrap();
            tok.encode(v).ok() != Some(id) || (v * 100.0).round() / 100.0 != v
        })
        .count()
}

fn svd_error() -> f64 {
    let mut rng = stream_rng(13, 4);
    let mut worst = 0.0f64;
    for (r, c) in [(1, 1), (2, 5), (7, 7), (10, 3), (25, 25)] {
        let a = DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let d = svd(&a).unwrap();
        worst = worst.max((d.reconstruct() - &a).norm() / a.norm());
    }
    worst
}

fn artifacts_dir() -> PathBuf {
    std::env::var_os("MATCOMP_ARTIFACTS")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            let workspace = Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).expect("crate sits in crates/");
            workspace.join("artifacts")
        })
}

fn main() {
    let artifacts = artifacts_dir();
    let scratch = tempfile::tempdir().expect("temp dir");
    let out = scratch.path();
    let desk = artifacts.join("desk");
    let run = json!({ "run": desk });
    println!("acceptance: artifacts from {}", artifacts.display());
    let mut lines = Vec::new();

    let fig2 = suite("fig2", run.clone(), out);
    lines.push(claims_line(1, "plateau then drop", &fig2, &["fig2."]));
    // The copying table is measured at step 1000, which is on the plateau in any run.
    let step_1000 = desk.join("checkpoints/step-001000");
    let table1_input = if step_1000.is_dir() { json!({ "checkpoint": step_1000 }) } else { run.clone() };
    let table1 = suite("table1", table1_input, out);
    lines.push(claims_line(2, "copying before the drop", &table1, &["table1."]));
    let sec312 = suite("sec312", run.clone(), out);
    let sec321 = suite("sec321", run.clone(), out);
    lines.push(claims_line(3, "attention unused before drop", &sec312, &["sec312.ablation"]));
    lines.push(claims_line(4, "attention needed after drop", &sec321, &["sec321.ablation"]));
    lines.push(match (&sec312, &sec321) {
        (Ok(a), Ok(b)) => {
            let mut c = select(a, &["sec312.switch"]);
            c.extend(select(b, &["sec321.switch"]));
            from_claims(5, "model switching", &c)
        }
        (Err(e), _) | (_, Err(e)) => not_run(5, "model switching", e.clone()),
    });
    lines.push(claims_line(6, "position sensitivity", &sec321, &["sec321.permute"]));
    lines.push(claims_line(7, "activation patching", &suite("appF", run.clone(), out), &["appF."]));

    let start = Instant::now();
    let app_b = suite("appB", json!({}), out);
    let (oracles_ok, oracle_detail) = baseline_oracles();
    let secs = start.elapsed().as_secs_f64();
    lines.push(match app_b {
        Ok(r) => {
            let mut l = from_claims(8, "nuclear-norm baseline", &select(&r, &["appB."]));
            if !oracles_ok {
                l.status = Status::Fail;
            }
            l.detail = format!("{}; {oracle_detail}; {secs:.1}s", l.detail);
            l
        }
        Err(e) => check(8, "nuclear-norm baseline", false, e),
    });

    lines.push(claims_line(9, "model vs baseline", &suite("fig3", run.clone(), out), &["fig3."]));
    lines.push(claims_line(10, "probing trend", &suite("fig6", run.clone(), out), &["fig6."]));
    lines.push(claims_line(11, "embedding structure", &suite("fig5", run.clone(), out), &["fig5."]));

    let retrain: serde_json::Map<String, serde_json::Value> =
        ["token_embeddings", "mlp", "positional_embeddings", "attention"]
            .into_iter()
            .map(|k| (k.to_string(), json!(artifacts.join("retrain").join(k))))
            .collect();
    let fig7 = suite("fig7", json!({ "retrain_runs": retrain }), out);
    lines.push(claims_line(12, "component retraining", &fig7, &["fig7."]));

    let grad = model_gradient_error();
    let adam = adam_error();
    let decomposition = decomposition_error();
    let tokens = tokenizer_round_trip();
    let svd_rel = svd_error();
    lines.push(check(
        13,
        "numerical hygiene",
        grad <= 1e-4 && adam <= 1e-12 && decomposition <= 1e-12 && tokens == 0 && svd_rel <= 1e-10,
        format!(
            "model grad rel err {grad:.2e}, adam {adam:.2e}, loss identity {decomposition:.2e}, \
             tokenizer mismatches {tokens}/2001, svd rel err {svd_rel:.2e}"
        ),
    ));

    let ranks: serde_json::Map<String, serde_json::Value> = (1..=3)
        .map(|r| (r.to_string(), json!(artifacts.join("rank").join(format!("r{r}")))))
        .collect();
    lines.push(claims_line(14, "rank difficulty ordering", &suite("fig13", json!({ "rank_runs": ranks }), out), &["fig13."]));
    lines.push(claims_line(15, "out-of-distribution inputs", &suite("appH", run, out), &["appH."]));

    for l in &lines {
        l.print();
    }
    let count = |s| lines.iter().filter(|l| l.status == s).count();
    println!(
        "acceptance: {} passed, {} failed, {} not run",
        count(Status::Pass),
        count(Status::Fail),
        count(Status::NotRun)
    );
    let strict = std::env::var("MATCOMP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && count(Status::Fail) > 0 {
        std::process::exit(1);
    }
}
