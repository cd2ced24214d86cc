//! Naive-versus-optimized benchmark.
//!
//! Each mode runs in its own worker process so peak memory is measured per
//! mode, both by the worker itself and by the parent through `wait4`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use xpe::{add_metric, classify_design, fit_sur_with, infer_effect, load_table, EffectEstimate, Error, Result};

use crate::plan::AnalysisPlan;
use crate::run::{run_plan, RunOptions};
use crate::telemetry::{peak_rss_bytes, wait_child};

/// Largest tolerated difference between the two modes' estimates.
pub const EQUALITY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One dense load and fit per metric, one inference call per segment, serial.
    Naive,
    /// Streaming compression, batched SUR fits and parallel dispatch.
    Optimized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectKey {
    pub metric: String,
    pub segment: String,
    pub arm: i64,
    pub tau: f64,
    pub se: f64,
}

impl From<&EffectEstimate> for EffectKey {
    fn from(e: &EffectEstimate) -> Self {
        EffectKey {
            metric: e.metric.clone(),
            segment: e.segment.clone(),
            arm: e.arm,
            tau: e.tau,
            se: e.se,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub mode: Mode,
    pub wall_seconds: f64,
    pub peak_rss_bytes: u64,
    pub effects: Vec<EffectKey>,
}

/// Effect estimates computed the straightforward way.
pub fn naive_effects(plan: &AnalysisPlan) -> Result<Vec<EffectEstimate>> {
    let predicates = plan.predicates()?;
    let options = plan.model.inference;
    let mut out = Vec::new();
    for group in &plan.metric_groups {
        let source = plan
            .source(&group.source)
            .ok_or_else(|| Error::Config(format!("unknown source `{}`", group.source)))?;
        for metric in &group.metrics {
            let frame = load_table(plan.source_path(source), &source.schema)?;
            let (input, _) = add_metric(&frame, &[metric], &group.covariates)?;
            let model = fit_sur_with(&input, classify_design(&frame), plan.model.fit)?;
            out.extend(infer_effect(&model, metric, &[], options)?);
            for p in &predicates {
                out.extend(infer_effect(&model, metric, std::slice::from_ref(p), options)?);
            }
        }
    }
    Ok(out)
}

/// Runs one mode in-process.
pub fn bench_worker(plan: &AnalysisPlan, mode: Mode) -> Result<WorkerReport> {
    let start = Instant::now();
    let effects = match mode {
        Mode::Naive => naive_effects(plan)?,
        Mode::Optimized => {
            let doc = run_plan(plan, &RunOptions::default())?;
            if let Some(f) = doc.failures.first() {
                return Err(Error::Config(format!("job {} failed in stage {}: {}", f.job, f.stage, f.cause)));
            }
            doc.effects
        }
    };
    Ok(WorkerReport {
        mode,
        wall_seconds: start.elapsed().as_secs_f64(),
        peak_rss_bytes: peak_rss_bytes(),
        effects: effects.iter().map(EffectKey::from).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub wall_seconds: f64,
    /// Peak RSS reported by the worker; the memory ratio uses this.
    pub peak_rss_bytes: u64,
    /// Peak RSS of the worker process as reported to the parent by the kernel.
    pub monitor_peak_rss_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub naive: ModeReport,
    pub optimized: ModeReport,
    pub speedup: f64,
    pub memory_ratio: f64,
    pub effects_compared: usize,
    pub max_rel_diff: f64,
    pub equal: bool,
    /// Self-reported and monitored peaks agree within 20% in both modes.
    pub telemetry_consistent: bool,
}

fn spawn_worker(exe: &Path, plan: &Path, mode: Mode) -> Result<(WorkerReport, u64)> {
    let mode_arg = match mode {
        Mode::Naive => "naive",
        Mode::Optimized => "optimized",
    };
    let mut child = Command::new(exe)
        .arg("bench-worker")
        .arg("--plan")
        .arg(plan)
        .arg("--mode")
        .arg(mode_arg)
        .stdout(Stdio::piped())
        .stdin(Stdio::null())
        .spawn()?;
    let mut stdout = String::new();
    child
        .stdout
        .take()
        .expect("stdout is piped")
        .read_to_string(&mut stdout)?;
    let (code, peak) = wait_child(child.id())?;
    if code != 0 {
        return Err(Error::Config(format!("{mode_arg} worker exited with status {code}")));
    }
    Ok((serde_json::from_str(&stdout)?, peak))
}

fn within(a: u64, b: u64, rel: f64) -> bool {
    let (a, b) = (a as f64, b as f64);
    (a - b).abs() <= rel * a.max(b)
}

/// Compares two sets of estimates keyed by metric, segment and arm.
pub fn compare_effects(naive: &[EffectKey], optimized: &[EffectKey]) -> Result<f64> {
    let key = |e: &EffectKey| (e.metric.clone(), e.segment.clone(), e.arm);
    let reference: BTreeMap<_, &EffectKey> = naive.iter().map(|e| (key(e), e)).collect();
    if reference.len() != optimized.len() || reference.len() != naive.len() {
        return Err(Error::Contract(format!(
            "modes produced {} and {} estimates",
            naive.len(),
            optimized.len()
        )));
    }
    let mut worst: f64 = 0.0;
    for e in optimized {
        let r = reference
            .get(&key(e))
            .ok_or_else(|| Error::Contract(format!("no naive estimate for {} / {}", e.metric, e.segment)))?;
        let d = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        worst = worst.max(d(e.tau, r.tau)).max(d(e.se, r.se));
    }
    Ok(worst)
}

/// Runs both modes as child processes of `exe` and compares them.
pub fn run_bench(exe: &Path, plan_path: &Path) -> Result<BenchReport> {
    let (opt, opt_peak) = spawn_worker(exe, plan_path, Mode::Optimized)?;
    let (naive, naive_peak) = spawn_worker(exe, plan_path, Mode::Naive)?;
    let max_rel_diff = compare_effects(&naive.effects, &opt.effects)?;
    let report = |w: &WorkerReport, monitor: u64| ModeReport {
        wall_seconds: w.wall_seconds,
        peak_rss_bytes: w.peak_rss_bytes,
        monitor_peak_rss_bytes: monitor,
    };
    Ok(BenchReport {
        speedup: naive.wall_seconds / opt.wall_seconds,
        memory_ratio: naive.peak_rss_bytes as f64 / opt.peak_rss_bytes as f64,
        effects_compared: opt.effects.len(),
        max_rel_diff,
        equal: max_rel_diff <= EQUALITY_TOLERANCE,
        telemetry_consistent: within(naive.peak_rss_bytes, naive_peak, 0.2) && within(opt.peak_rss_bytes, opt_peak, 0.2),
        naive: report(&naive, naive_peak),
        optimized: report(&opt, opt_peak),
    })
}
