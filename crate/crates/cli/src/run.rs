//! Parallel dispatch of job units and ordered assembly of the result document.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xpe::bayes::PosteriorDocument;
use xpe::engine::LinearModelDocument;
use xpe::frame::LogEntry;
use xpe::{
    fit_bayesian, fit_mediation_system, fit_sur_with, infer_effect, infer_rank, infer_reward, load_table,
    parse_graph, project_effects, stream_compressed, time_dynamic_effects, EffectEstimate, MediationResult,
    PosteriorModel, ProjectionSpec, RankResult, Result,
};

use crate::plan::{AnalysisPlan, JobKind, JobUnit};
use crate::telemetry::{peak_rss_bytes, JobTiming, Telemetry};

pub const RESULT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub parallelism: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema_version: u32,
    pub plan_hash: String,
    pub seed: u64,
    pub jobs: Vec<JobRecord>,
    pub effects: Vec<EffectEstimate>,
    pub time_effects: Vec<EffectEstimate>,
    pub projections: Vec<EffectEstimate>,
    pub models: Vec<ModelRecord>,
    pub posteriors: Vec<PosteriorDocument>,
    pub rankings: Vec<RankRecord>,
    pub mediation: Vec<MediationRecord>,
    pub failures: Vec<JobFailure>,
    pub validation_log: Vec<LogRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub telemetry: Option<Telemetry>,
}

impl ResultDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result documents always serialize")
    }

    pub fn failed_jobs(&self) -> usize {
        self.jobs.iter().filter(|j| j.status == JobStatus::Failed).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    #[serde(flatten)]
    pub unit: JobUnit,
    pub status: JobStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub job: String,
    pub stage: String,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub job: String,
    /// Distinct design rows after compression.
    pub unique_rows: usize,
    pub model: LinearModelDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub job: String,
    pub metric: String,
    pub context: String,
    pub rank: RankResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediationRecord {
    pub job: String,
    pub result: MediationResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub job: String,
    #[serde(flatten)]
    pub entry: LogEntry,
}

/// Everything a finished job contributes to the document.
#[derive(Debug, Clone, Default)]
struct JobOutput {
    effects: Vec<EffectEstimate>,
    time_effects: Vec<EffectEstimate>,
    projections: Vec<EffectEstimate>,
    models: Vec<ModelRecord>,
    posteriors: Vec<PosteriorDocument>,
    rankings: Vec<RankRecord>,
    mediation: Vec<MediationRecord>,
    log: Vec<LogEntry>,
}

struct StageError {
    stage: &'static str,
    cause: String,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|e| StageError {
            stage,
            cause: e.to_string(),
        })
    }
}

type JobResult = std::result::Result<JobOutput, JobFailure>;

/// Effective worker count: the request (or all cores), capped by the plan.
pub fn effective_parallelism(plan: &AnalysisPlan, requested: Option<usize>) -> usize {
    let want = requested
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1)
        .max(1);
    plan.parallelism.map_or(want, |cap| want.min(cap))
}

/// Runs every job unit of `plan` and assembles one document.
pub fn run_plan(plan: &AnalysisPlan, options: &RunOptions) -> Result<ResultDocument> {
    let started = Instant::now();
    let mut plan = plan.clone();
    if let Some(seed) = options.seed {
        plan.seed = seed;
    }
    plan.validate()?;
    let threads = effective_parallelism(&plan, options.parallelism);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| xpe::Error::Config(format!("cannot start worker pool: {e}")))?;

    let jobs = plan.jobs();
    let mut finished: BTreeMap<String, JobResult> = BTreeMap::new();
    let mut timings: BTreeMap<String, f64> = BTreeMap::new();
    let mut pending: Vec<&JobUnit> = jobs.iter().collect();
    while !pending.is_empty() {
        let (ready, rest): (Vec<&JobUnit>, Vec<&JobUnit>) = pending
            .into_iter()
            .partition(|j| j.depends_on.iter().all(|d| finished.contains_key(d)));
        if ready.is_empty() {
            for j in rest {
                finished.insert(j.id.clone(), Err(failure(j, "dependency", "unresolvable dependency".into())));
            }
            break;
        }
        log::info!("dispatching {} job(s) on {threads} worker(s)", ready.len());
        let done = &finished;
        let plan = &plan;
        let results: Vec<(String, JobResult, f64)> = pool.install(|| {
            ready
                .par_iter()
                .map(|job| {
                    let t = Instant::now();
                    let r = execute(plan, job, done);
                    (job.id.clone(), r, t.elapsed().as_secs_f64())
                })
                .collect()
        });
        for (id, r, secs) in results {
            if let Err(f) = &r {
                log::warn!("job {id} failed in stage {}: {}", f.stage, f.cause);
            }
            timings.insert(id.clone(), secs);
            finished.insert(id, r);
        }
        pending = rest;
    }

    let mut doc = ResultDocument {
        schema_version: RESULT_SCHEMA_VERSION,
        plan_hash: plan.hash(),
        seed: plan.seed,
        jobs: Vec::new(),
        effects: Vec::new(),
        time_effects: Vec::new(),
        projections: Vec::new(),
        models: Vec::new(),
        posteriors: Vec::new(),
        rankings: Vec::new(),
        mediation: Vec::new(),
        failures: Vec::new(),
        validation_log: Vec::new(),
        telemetry: None,
    };
    for job in &jobs {
        let result = finished.remove(&job.id).expect("every job finishes");
        let status = match result {
            Ok(out) => {
                doc.effects.extend(out.effects);
                doc.time_effects.extend(out.time_effects);
                doc.projections.extend(out.projections);
                doc.models.extend(out.models);
                doc.posteriors.extend(out.posteriors);
                doc.rankings.extend(out.rankings);
                doc.mediation.extend(out.mediation);
                doc.validation_log.extend(out.log.into_iter().map(|entry| LogRecord {
                    job: job.id.clone(),
                    entry,
                }));
                JobStatus::Ok
            }
            Err(f) => {
                doc.failures.push(f);
                JobStatus::Failed
            }
        };
        doc.jobs.push(JobRecord {
            unit: job.clone(),
            status,
        });
    }
    doc.telemetry = Some(Telemetry {
        wall_seconds: started.elapsed().as_secs_f64(),
        peak_rss_bytes: peak_rss_bytes(),
        parallelism: threads,
        jobs: timings
            .into_iter()
            .map(|(job, wall_seconds)| JobTiming { job, wall_seconds })
            .collect(),
    });
    Ok(doc)
}

fn failure(job: &JobUnit, stage: &str, cause: String) -> JobFailure {
    JobFailure {
        job: job.id.clone(),
        stage: stage.to_string(),
        cause,
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".into()
    }
}

fn execute(plan: &AnalysisPlan, job: &JobUnit, finished: &BTreeMap<String, JobResult>) -> JobResult {
    for dep in &job.depends_on {
        if let Some(Err(_)) = finished.get(dep) {
            return Err(failure(job, "dependency", format!("job `{dep}` failed")));
        }
    }
    isolate(job, || match job.kind {
        JobKind::Metrics => metrics_job(plan, job),
        JobKind::Policy => {
            let dep = job.depends_on.first().and_then(|d| finished.get(d));
            match dep {
                Some(Ok(out)) => policy_job(plan, job, &out.posteriors),
                _ => Err(StageError {
                    stage: "dependency",
                    cause: "policy job has no fitted posterior to read".into(),
                }),
            }
        }
        JobKind::Mediation { index } => mediation_job(plan, job, index),
    })
}

/// Runs one job body, turning errors and panics into a recorded failure.
fn isolate<F>(job: &JobUnit, body: F) -> JobResult
where
    F: FnOnce() -> std::result::Result<JobOutput, StageError>,
{
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(out)) => Ok(out),
        Ok(Err(e)) => Err(failure(job, e.stage, e.cause)),
        Err(payload) => Err(failure(job, "panic", panic_message(payload))),
    }
}

/// Stable per-item seed derived from the plan seed.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn metrics_job(plan: &AnalysisPlan, job: &JobUnit) -> std::result::Result<JobOutput, StageError> {
    let source = plan.source(&job.source).expect("validated plan");
    let path = plan.source_path(source);
    let streamed = stream_compressed(&path, &source.schema, &job.metrics, &job.covariates).stage("load")?;
    let mut out = JobOutput {
        log: streamed.log,
        ..JobOutput::default()
    };
    let compressed = streamed.compressed;
    let model = fit_sur_with(&compressed, streamed.design, plan.model.fit)
        .stage("fit")?
        .with_id(job.id.clone());
    out.models.push(ModelRecord {
        job: job.id.clone(),
        unique_rows: compressed.unique_rows(),
        model: model.to_document(),
    });

    let options = plan.model.inference;
    let predicates = plan.predicates().stage("infer")?;
    let per_metric: Vec<std::result::Result<(Vec<EffectEstimate>, Vec<EffectEstimate>), StageError>> = job
        .metrics
        .par_iter()
        .map(|m| {
            let mut all = infer_effect(&model, m, &[], options).stage("infer")?;
            let segments = if predicates.is_empty() {
                Vec::new()
            } else {
                infer_effect(&model, m, &predicates, options).stage("infer")?
            };
            all.extend(segments.iter().cloned());
            Ok((all, segments))
        })
        .collect();
    let mut segment_effects = Vec::new();
    for r in per_metric {
        let (all, segments) = r?;
        out.effects.extend(all);
        segment_effects.push(segments);
    }

    if let Some(grid) = &plan.time_grid {
        for m in &job.metrics {
            let effects = time_dynamic_effects(&model, m, &grid.column, &grid.values, options, &mut out.log)
                .stage("time")?;
            out.time_effects.extend(effects);
        }
    }

    if let Some(spec) = &plan.projection {
        for segments in &segment_effects {
            out.projections.extend(project_per_arm(segments, spec).stage("projection")?);
        }
    }

    if plan.wants_posterior() {
        let prior = plan.prior();
        for m in &job.metrics {
            let single = compressed.select_metric(m).stage("posterior")?;
            let post = fit_bayesian(&single, &prior)
                .stage("posterior")?
                .with_id(format!("{}/{m}", job.id));
            out.posteriors.push(post.to_document());
        }
    }
    Ok(out)
}

fn project_per_arm(segments: &[EffectEstimate], spec: &ProjectionSpec) -> Result<Vec<EffectEstimate>> {
    let mut arms: Vec<i64> = segments.iter().map(|e| e.arm).collect();
    arms.sort_unstable();
    arms.dedup();
    arms.into_iter()
        .map(|arm| {
            let subset: Vec<EffectEstimate> = segments.iter().filter(|e| e.arm == arm).cloned().collect();
            project_effects(&subset, spec)
        })
        .collect()
}

fn policy_job(
    plan: &AnalysisPlan,
    job: &JobUnit,
    posteriors: &[PosteriorDocument],
) -> std::result::Result<JobOutput, StageError> {
    let policy = plan.policy.as_ref().expect("policy jobs exist only with a policy");
    let mut out = JobOutput::default();
    for doc in posteriors {
        let post = PosteriorModel::from_document(doc.clone()).stage("policy")?;
        for ctx in &policy.contexts {
            let draw_seed = derive_seed(plan.seed, &[&job.id, &doc.metric, &ctx.name, "reward"]);
            let rank_seed = derive_seed(plan.seed, &[&job.id, &doc.metric, &ctx.name, "rank"]);
            let rewards = infer_reward(&post, &ctx.values, policy.draws, draw_seed).stage("policy")?;
            out.rankings.push(RankRecord {
                job: job.id.clone(),
                metric: doc.metric.clone(),
                context: ctx.name.clone(),
                rank: infer_rank(&rewards, rank_seed),
            });
        }
    }
    Ok(out)
}

fn mediation_job(plan: &AnalysisPlan, job: &JobUnit, index: usize) -> std::result::Result<JobOutput, StageError> {
    let spec = &plan.mediation[index];
    let source = plan.source(&spec.source).expect("validated plan");
    let frame = load_table(plan.source_path(source), &source.schema).stage("load")?;
    let graph = parse_graph(&spec.graph, &spec.treatment).stage("graph")?;
    let outcome = spec.outcome.clone().unwrap_or_else(|| graph.outcome().to_string());
    let result = fit_mediation_system(&frame, &graph, &spec.covariates, &outcome).stage("mediation")?;
    Ok(JobOutput {
        log: frame.log().to_vec(),
        mediation: vec![MediationRecord {
            job: job.id.clone(),
            result,
        }],
        ..JobOutput::default()
    })
}
