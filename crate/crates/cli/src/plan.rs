//! Declarative analysis plans and their decomposition into job units.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xpe::effects::InferenceOptions;
use xpe::{CovariateSpec, Error, FitOptions, PriorSpec, ProjectionSpec, Result, Schema, SegmentPredicate};

/// JSON schema every plan must satisfy.
pub const PLAN_SCHEMA: &str = include_str!("../schema/plan.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisPlan {
    pub sources: Vec<DataSource>,
    pub metric_groups: Vec<MetricGroup>,
    #[serde(default)]
    pub model: ModelSpec,
    /// Segment predicates evaluated for every metric.
    #[serde(default)]
    pub segments: Vec<String>,
    #[serde(default)]
    pub time_grid: Option<TimeGrid>,
    #[serde(default)]
    pub mediation: Vec<MediationPlan>,
    #[serde(default)]
    pub projection: Option<ProjectionSpec>,
    #[serde(default)]
    pub policy: Option<PolicyPlan>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub parallelism: Option<usize>,
    /// Directory relative source paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub name: String,
    pub path: PathBuf,
    pub schema: Schema,
}

/// Metrics read from one source table and modelled with one covariate spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricGroup {
    pub source: String,
    pub metrics: Vec<String>,
    #[serde(default)]
    pub covariates: CovariateSpec,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Linear,
    Bayesian,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub kind: ModelKind,
    #[serde(default)]
    pub prior: Option<PriorSpec>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub inference: InferenceOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub column: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediationPlan {
    pub source: String,
    /// `A -> B` edge lines.
    pub graph: String,
    /// Graph label of the treatment node.
    pub treatment: String,
    /// Metric holding the outcome node; defaults to the outcome's label.
    #[serde(default)]
    pub outcome: Option<String>,
    #[serde(default)]
    pub covariates: CovariateSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyPlan {
    pub contexts: Vec<NamedContext>,
    #[serde(default = "default_draws")]
    pub draws: usize,
}

fn default_draws() -> usize {
    xpe::policy::DEFAULT_DRAWS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedContext {
    pub name: String,
    pub values: xpe::ContextVector,
}

impl AnalysisPlan {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut plan = Self::from_json(&text)?;
        plan.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(plan)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: AnalysisPlan = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Structural checks. Column existence is resolved per job at run time so a
    /// bad column fails only the job that reads it.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sources.is_empty() {
            return bad("a plan needs at least one data source".into());
        }
        let mut names = BTreeSet::new();
        for s in &self.sources {
            if !names.insert(s.name.as_str()) {
                return bad(format!("data source `{}` is declared twice", s.name));
            }
            s.schema.validate()?;
        }
        if self.metric_groups.is_empty() && self.mediation.is_empty() {
            return bad("a plan needs a metric group or a mediation analysis".into());
        }
        for g in &self.metric_groups {
            if !names.contains(g.source.as_str()) {
                return bad(format!("metric group reads unknown source `{}`", g.source));
            }
            if g.metrics.is_empty() {
                return bad(format!("metric group on `{}` lists no metrics", g.source));
            }
        }
        for m in &self.mediation {
            if !names.contains(m.source.as_str()) {
                return bad(format!("mediation reads unknown source `{}`", m.source));
            }
            xpe::parse_graph(&m.graph, &m.treatment)?;
        }
        for s in &self.segments {
            SegmentPredicate::parse(s)?;
        }
        if let Some(p) = &self.projection {
            if self.segments.is_empty() {
                return bad("a projection needs segments".into());
            }
            for s in p.segment_weights.keys() {
                SegmentPredicate::parse(s)?;
            }
        }
        if let Some(t) = &self.time_grid {
            if t.values.is_empty() {
                return bad("time grid is empty".into());
            }
        }
        if let Some(p) = &self.policy {
            if p.contexts.is_empty() {
                return bad("policy lists no contexts".into());
            }
            if p.draws < xpe::policy::MIN_DRAWS {
                return bad(format!("policy draws must be at least {}", xpe::policy::MIN_DRAWS));
            }
        }
        if self.parallelism == Some(0) {
            return bad("parallelism must be positive".into());
        }
        let a = self.model.inference.alpha;
        if !(a > 0.0 && a < 1.0) {
            return bad(format!("alpha {a} is outside (0, 1)"));
        }
        Ok(())
    }

    pub fn source(&self, name: &str) -> Option<&DataSource> {
        self.sources.iter().find(|s| s.name == name)
    }

    pub fn source_path(&self, source: &DataSource) -> PathBuf {
        if source.path.is_absolute() {
            source.path.clone()
        } else {
            self.base_dir.join(&source.path)
        }
    }

    /// SHA-256 over the canonical JSON form (sorted keys, parallelism dropped).
    pub fn hash(&self) -> String {
        let mut plan = self.clone();
        plan.parallelism = None;
        let value = serde_json::to_value(&plan).expect("plans always serialize");
        let canonical = serde_json::to_string(&value).expect("values always serialize");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn predicates(&self) -> Result<Vec<SegmentPredicate>> {
        self.segments.iter().map(|s| SegmentPredicate::parse(s)).collect()
    }

    pub fn wants_posterior(&self) -> bool {
        self.model.kind == ModelKind::Bayesian || self.policy.is_some()
    }

    pub fn prior(&self) -> PriorSpec {
        self.model.prior.clone().unwrap_or_default()
    }

    /// Splits the plan into job units.
    ///
    /// Metric groups sharing a source and covariate spec are batched into one
    /// unit; each batch gets a dependent policy unit when the plan asks for
    /// one; every mediation analysis is its own unit.
    pub fn jobs(&self) -> Vec<JobUnit> {
        let mut batches: Vec<(String, CovariateSpec, Vec<String>)> = Vec::new();
        for g in &self.metric_groups {
            match batches.iter_mut().find(|(s, c, _)| *s == g.source && *c == g.covariates) {
                Some((_, _, metrics)) => {
                    for m in &g.metrics {
                        if !metrics.contains(m) {
                            metrics.push(m.clone());
                        }
                    }
                }
                None => {
                    let mut metrics: Vec<String> = Vec::new();
                    for m in &g.metrics {
                        if !metrics.contains(m) {
                            metrics.push(m.clone());
                        }
                    }
                    batches.push((g.source.clone(), g.covariates.clone(), metrics));
                }
            }
        }
        let mut jobs = Vec::new();
        for (i, (source, covariates, metrics)) in batches.into_iter().enumerate() {
            let id = format!("metrics-{i:03}");
            if self.policy.is_some() {
                jobs.push(JobUnit {
                    id: format!("policy-{i:03}"),
                    kind: JobKind::Policy,
                    source: source.clone(),
                    metrics: metrics.clone(),
                    covariates: covariates.clone(),
                    depends_on: vec![id.clone()],
                });
            }
            jobs.push(JobUnit {
                id,
                kind: JobKind::Metrics,
                source,
                metrics,
                covariates,
                depends_on: Vec::new(),
            });
        }
        for (i, m) in self.mediation.iter().enumerate() {
            jobs.push(JobUnit {
                id: format!("mediation-{i:03}"),
                kind: JobKind::Mediation { index: i },
                source: m.source.clone(),
                metrics: Vec::new(),
                covariates: m.covariates.clone(),
                depends_on: Vec::new(),
            });
        }
        jobs.sort_by(|a, b| a.id.cmp(&b.id));
        jobs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JobKind {
    Metrics,
    Policy,
    Mediation { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobUnit {
    pub id: String,
    pub kind: JobKind,
    pub source: String,
    pub metrics: Vec<String>,
    pub covariates: CovariateSpec,
    pub depends_on: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(text: &str) -> AnalysisPlan {
        AnalysisPlan::from_json(text).unwrap()
    }

    const TWO_SOURCES: &str = r#"{
        "sources": [
            {"name": "orders", "path": "orders.csv", "schema": [
                {"role": "intent_to_treat", "column": "A"},
                {"role": "metric", "column": "gmv"},
                {"role": "metric", "column": "orders"}]},
            {"name": "sessions", "path": "sessions.csv", "schema": [
                {"role": "intent_to_treat", "column": "A"},
                {"role": "metric", "column": "minutes"}]}
        ],
        "metric_groups": [
            {"source": "orders", "metrics": ["gmv"]},
            {"source": "sessions", "metrics": ["minutes"]},
            {"source": "orders", "metrics": ["orders"]}
        ],
        "seed": 7
    }"#;

    #[test]
    fn metrics_from_one_table_share_a_job() {
        let jobs = plan(TWO_SOURCES).jobs();
        assert_eq!(jobs.len(), 2);
        assert_eq!(jobs[0].metrics, ["gmv", "orders"]);
        assert_eq!(jobs[1].metrics, ["minutes"]);
        assert!(jobs.iter().all(|j| j.depends_on.is_empty()));
    }

    #[test]
    fn hash_ignores_key_order_and_parallelism() {
        let a = plan(TWO_SOURCES);
        let mut v: serde_json::Value = serde_json::from_str(TWO_SOURCES).unwrap();
        v["parallelism"] = 4.into();
        // Re-serialize with keys in a different order.
        let reordered = format!(
            r#"{{"seed": 7, "parallelism": 4, "metric_groups": {}, "sources": {}}}"#,
            v["metric_groups"], v["sources"]
        );
        let b = plan(&reordered);
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = 8;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_plans() {
        let unknown = TWO_SOURCES.replace("\"seed\": 7", "\"seeds\": 7");
        assert!(AnalysisPlan::from_json(&unknown).is_err());
        let missing = TWO_SOURCES.replace("{\"source\": \"sessions\"", "{\"source\": \"clicks\"");
        assert!(matches!(AnalysisPlan::from_json(&missing), Err(Error::Config(_))));
        let bad_pred = TWO_SOURCES.replace("\"seed\": 7", "\"segments\": [\"x ==\"]");
        assert!(AnalysisPlan::from_json(&bad_pred).is_err());
        let two_arms = TWO_SOURCES.replace(
            "{\"role\": \"metric\", \"column\": \"gmv\"}",
            "{\"role\": \"intent_to_treat\", \"column\": \"B\"}",
        );
        assert!(matches!(AnalysisPlan::from_json(&two_arms), Err(Error::Schema(_))));
    }

    #[test]
    fn policy_jobs_depend_on_their_fit() {
        let text = TWO_SOURCES.replace(
            "\"seed\": 7",
            r#""seed": 7, "policy": {"contexts": [{"name": "c", "values": {}}], "draws": 2000}"#,
        );
        let jobs = plan(&text).jobs();
        assert_eq!(jobs.len(), 4);
        let policy: Vec<&JobUnit> = jobs.iter().filter(|j| j.kind == JobKind::Policy).collect();
        assert_eq!(policy[0].depends_on, ["metrics-000"]);
    }

    #[test]
    fn schema_lists_every_plan_field() {
        let schema: serde_json::Value = serde_json::from_str(PLAN_SCHEMA).unwrap();
        let props = schema["properties"].as_object().unwrap();
        let plan = plan(TWO_SOURCES);
        let value = serde_json::to_value(&plan).unwrap();
        for key in value.as_object().unwrap().keys() {
            assert!(props.contains_key(key), "schema is missing `{key}`");
        }
        for key in props.keys() {
            assert!(value.get(key).is_some(), "schema lists unknown field `{key}`");
        }
        assert_eq!(schema["additionalProperties"], false);
    }
}
