//! Experiment data model.
//!
//! Every randomized design handled by the engine (AB, encouragement, cluster,
//! adaptive, and their combinations) is described by five identification
//! variables: the assigned arm `A`, the received treatment `T`, the assignment
//! propensity `W`, the instrument `Z`, and the cluster `C`. Covariates `X` and
//! metric columns ride alongside. Absent identification columns are filled with
//! their defaults (`T = A`, `Z = A`, `W` = empirical share, `C` = row index) and
//! every default is written to the validation log.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The role a CSV column plays in the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    IntentToTreat,
    Treated,
    Propensity,
    Instrument,
    Cluster,
    Covariate,
    Metric,
    Time,
    UnitId,
}

impl Role {
    fn single_binding(self) -> bool {
        !matches!(self, Role::Covariate | Role::Metric)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRole {
    pub role: Role,
    #[serde(rename = "column")]
    pub column_name: String,
}

impl ColumnRole {
    pub fn new(role: Role, column: impl Into<String>) -> Self {
        ColumnRole {
            role,
            column_name: column.into(),
        }
    }
}

/// Validated list of column bindings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub roles: Vec<ColumnRole>,
}

impl Schema {
    pub fn new(roles: Vec<ColumnRole>) -> Result<Self> {
        let schema = Schema { roles };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<Role, &str> = HashMap::new();
        for binding in &self.roles {
            if binding.role.single_binding() {
                if let Some(prev) = seen.insert(binding.role, &binding.column_name) {
                    return Err(Error::Schema(format!(
                        "role {:?} bound to both `{}` and `{}`",
                        binding.role, prev, binding.column_name
                    )));
                }
            }
        }
        if self.column(Role::IntentToTreat).is_none() && self.column(Role::Treated).is_none() {
            return Err(Error::Schema(
                "at least one of intent_to_treat or treated must be bound".into(),
            ));
        }
        Ok(())
    }

    pub fn column(&self, role: Role) -> Option<&str> {
        self.roles
            .iter()
            .find(|b| b.role == role)
            .map(|b| b.column_name.as_str())
    }

    pub fn columns(&self, role: Role) -> Vec<&str> {
        self.roles
            .iter()
            .filter(|b| b.role == role)
            .map(|b| b.column_name.as_str())
            .collect()
    }
}

/// One structured validation-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub level: LogLevel,
    pub event: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogLevel {
    Info,
    Warn,
}

impl LogEntry {
    pub fn info(event: &str, column: Option<&str>, detail: impl Into<String>) -> Self {
        LogEntry {
            level: LogLevel::Info,
            event: event.to_string(),
            column: column.map(str::to_string),
            detail: detail.into(),
        }
    }

    pub fn warn(event: &str, column: Option<&str>, detail: impl Into<String>) -> Self {
        LogEntry {
            level: LogLevel::Warn,
            event: event.to_string(),
            column: column.map(str::to_string),
            detail: detail.into(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log entries always serialize")
    }
}

/// A covariate column, numeric or categorical.
#[derive(Debug, Clone, PartialEq)]
pub enum CovColumn {
    Numeric(Vec<f64>),
    /// Codes index into `levels`, which are sorted.
    Categorical { codes: Vec<u32>, levels: Vec<String> },
}

impl CovColumn {
    pub fn len(&self) -> usize {
        match self {
            CovColumn::Numeric(v) => v.len(),
            CovColumn::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, row: usize) -> CovValue<'_> {
        match self {
            CovColumn::Numeric(v) => CovValue::Num(v[row]),
            CovColumn::Categorical { codes, levels } => {
                CovValue::Str(levels[codes[row] as usize].as_str())
            }
        }
    }

    /// Categorical view; numeric columns are converted level-by-value.
    pub fn to_categorical(&self) -> CovColumn {
        match self {
            CovColumn::Categorical { .. } => self.clone(),
            CovColumn::Numeric(v) => {
                let mut builder = CovBuilder::Categorical(CategoricalBuilder::default());
                for x in v {
                    builder.push(&format_number(*x));
                }
                builder.finish()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovValue<'a> {
    Num(f64),
    Str(&'a str),
}

fn format_number(x: f64) -> String {
    format!("{x}")
}

/// Named covariate columns at some row granularity (raw rows or compressed groups).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub columns: Vec<CovColumn>,
}

impl CovariateTable {
    pub fn get(&self, name: &str) -> Option<&CovColumn> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, CovColumn::len)
    }
}

/// Cluster membership. Cluster labels are opaque; codes follow first appearance.
#[derive(Debug, Clone, PartialEq)]
pub enum ClusterIds {
    /// Every row is its own cluster.
    Singleton,
    Labels { codes: Vec<u32>, count: usize },
}

impl ClusterIds {
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut index: HashMap<&str, u32> = HashMap::new();
        let codes = labels
            .iter()
            .map(|l| {
                let next = index.len() as u32;
                *index.entry(l.as_ref()).or_insert(next)
            })
            .collect();
        ClusterIds::Labels {
            codes,
            count: index.len(),
        }
    }

    pub fn count(&self, rows: usize) -> usize {
        match self {
            ClusterIds::Singleton => rows,
            ClusterIds::Labels { count, .. } => *count,
        }
    }

    pub fn all_singletons(&self) -> bool {
        match self {
            ClusterIds::Singleton => true,
            ClusterIds::Labels { codes, count } => *count == codes.len(),
        }
    }
}

/// Identification columns before defaults are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationColumns {
    pub assignment: Option<Vec<i64>>,
    pub treated: Option<Vec<i64>>,
    pub propensity: Option<Vec<f64>>,
    pub instrument: Option<Vec<i64>>,
    pub clusters: Option<ClusterIds>,
}

impl IdentificationColumns {
    /// Applies the identification defaults and returns the filled columns plus
    /// a log of each default applied. Idempotent: filling a filled set is a no-op.
    pub fn fill_defaults(&self) -> Result<(IdentificationColumns, Vec<LogEntry>)> {
        let mut log = Vec::new();
        let assignment = match (&self.assignment, &self.instrument, &self.treated) {
            (Some(a), _, _) => a.clone(),
            (None, Some(z), _) => {
                log.push(LogEntry::info("default_applied", None, "intent_to_treat <- instrument"));
                z.clone()
            }
            (None, None, Some(t)) => {
                log.push(LogEntry::info("default_applied", None, "intent_to_treat <- treated"));
                t.clone()
            }
            (None, None, None) => {
                return Err(Error::Schema(
                    "at least one of intent_to_treat or treated must be bound".into(),
                ))
            }
        };
        let treated = self.treated.clone().unwrap_or_else(|| {
            log.push(LogEntry::info("default_applied", None, "treated <- intent_to_treat"));
            assignment.clone()
        });
        let instrument = self.instrument.clone().unwrap_or_else(|| {
            log.push(LogEntry::info("default_applied", None, "instrument <- intent_to_treat"));
            assignment.clone()
        });
        let propensity = match &self.propensity {
            Some(w) => w.clone(),
            None => {
                let w = empirical_propensity(&assignment, &arm_levels(&assignment, &treated, &instrument));
                log.push(LogEntry::info(
                    "default_applied",
                    None,
                    "propensity <- empirical assignment share",
                ));
                w
            }
        };
        let clusters = self.clusters.clone().unwrap_or_else(|| {
            log.push(LogEntry::info("default_applied", None, "cluster <- row index"));
            ClusterIds::Singleton
        });
        Ok((
            IdentificationColumns {
                assignment: Some(assignment),
                treated: Some(treated),
                propensity: Some(propensity),
                instrument: Some(instrument),
                clusters: Some(clusters),
            },
            log,
        ))
    }
}

/// Sorted union of arm labels; the smallest label is the control arm.
pub fn arm_levels(a: &[i64], t: &[i64], z: &[i64]) -> Vec<i64> {
    let mut levels: Vec<i64> = a.iter().chain(t).chain(z).copied().collect();
    levels.sort_unstable();
    levels.dedup();
    levels
}

/// Binary designs: share assigned to treatment. Multi-arm designs: share of the
/// row's realized arm.
pub(crate) fn empirical_propensity(assignment: &[i64], levels: &[i64]) -> Vec<f64> {
    let n = assignment.len() as f64;
    if levels.len() <= 2 {
        let control = levels.first().copied().unwrap_or(0);
        let share = assignment.iter().filter(|&&a| a != control).count() as f64 / n;
        vec![share; assignment.len()]
    } else {
        let mut counts: HashMap<i64, usize> = HashMap::new();
        for a in assignment {
            *counts.entry(*a).or_default() += 1;
        }
        assignment.iter().map(|a| counts[a] as f64 / n).collect()
    }
}

/// Validated, immutable experiment dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentFrame {
    n: usize,
    assignment: Vec<i64>,
    treated: Vec<i64>,
    propensity: Vec<f64>,
    instrument: Vec<i64>,
    clusters: ClusterIds,
    cluster_bound: bool,
    arms: Vec<i64>,
    covariates: CovariateTable,
    metrics: Vec<(String, Vec<f64>)>,
    time_column: Option<String>,
    unit_ids: Option<Vec<u32>>,
    log: Vec<LogEntry>,
}

/// Design classification along the three axes that distinguish AB,
/// encouragement, cluster and adaptive experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignClass {
    pub compliance: Compliance,
    pub covariance_structure: CovarianceStructure,
    pub propensity: PropensityKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compliance {
    Full,
    OneSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceStructure {
    Diagonal,
    BlockDiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityKind {
    Constant,
    Variable,
}

impl DesignClass {
    pub const AB: DesignClass = DesignClass {
        compliance: Compliance::Full,
        covariance_structure: CovarianceStructure::Diagonal,
        propensity: PropensityKind::Constant,
    };
}

/// Row-level inputs for [`ExperimentFrame::new`].
#[derive(Debug, Clone)]
pub struct FrameParts {
    pub ids: IdentificationColumns,
    pub cluster_bound: bool,
    pub covariates: CovariateTable,
    pub metrics: Vec<(String, Vec<f64>)>,
    pub time_column: Option<String>,
    pub unit_ids: Option<Vec<u32>>,
    pub log: Vec<LogEntry>,
}

impl ExperimentFrame {
    /// Fills defaults and validates.
    pub fn new(parts: FrameParts) -> Result<Self> {
        let FrameParts {
            ids,
            cluster_bound,
            covariates,
            metrics,
            time_column,
            unit_ids,
            mut log,
        } = parts;
        let (filled, defaults_log) = ids.fill_defaults()?;
        log.extend(defaults_log);
        let assignment = filled.assignment.unwrap();
        let treated = filled.treated.unwrap();
        let instrument = filled.instrument.unwrap();
        let propensity = filled.propensity.unwrap();
        let clusters = filled.clusters.unwrap();
        let n = assignment.len();

        if n < 2 {
            return Err(Error::InsufficientData { rows: n, columns: 2 });
        }
        let lengths_ok = treated.len() == n
            && instrument.len() == n
            && propensity.len() == n
            && covariates.columns.iter().all(|c| c.len() == n)
            && metrics.iter().all(|(_, v)| v.len() == n)
            && unit_ids.as_ref().is_none_or(|u| u.len() == n)
            && match &clusters {
                ClusterIds::Singleton => true,
                ClusterIds::Labels { codes, .. } => codes.len() == n,
            };
        if !lengths_ok {
            return Err(Error::Contract("frame columns have unequal lengths".into()));
        }
        if let Some(i) = propensity.iter().position(|w| !(*w > 0.0 && *w < 1.0)) {
            return Err(Error::Domain(format!(
                "propensity {} at row {i} is outside (0, 1)",
                propensity[i]
            )));
        }
        if let (Some(time), Some(units)) = (&time_column, &unit_ids) {
            if !cluster_bound && has_repeats(units) {
                return Err(Error::Schema(format!(
                    "repeated observations per unit over `{time}` require an explicit cluster binding"
                )));
            }
        }
        let arms = arm_levels(&assignment, &treated, &instrument);
        if arms.len() < 2 {
            return Err(Error::Domain(format!(
                "only one arm label ({}) present; no contrast is identifiable",
                arms[0]
            )));
        }
        Ok(ExperimentFrame {
            n,
            assignment,
            treated,
            propensity,
            instrument,
            clusters,
            cluster_bound,
            arms,
            covariates,
            metrics,
            time_column,
            unit_ids,
            log,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn assignment(&self) -> &[i64] {
        &self.assignment
    }
    pub fn treated(&self) -> &[i64] {
        &self.treated
    }
    pub fn instrument(&self) -> &[i64] {
        &self.instrument
    }
    pub fn propensity(&self) -> &[f64] {
        &self.propensity
    }
    pub fn clusters(&self) -> &ClusterIds {
        &self.clusters
    }
    pub fn cluster_bound(&self) -> bool {
        self.cluster_bound
    }
    /// Sorted arm labels; `arms()[0]` is control.
    pub fn arms(&self) -> &[i64] {
        &self.arms
    }
    pub fn covariates(&self) -> &CovariateTable {
        &self.covariates
    }
    pub fn time_column(&self) -> Option<&str> {
        self.time_column.as_deref()
    }
    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }
    pub fn metric_names(&self) -> impl Iterator<Item = &str> {
        self.metrics.iter().map(|(n, _)| n.as_str())
    }
    pub fn metric(&self, name: &str) -> Option<&[f64]> {
        self.metrics
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// Identification columns as stored, for re-applying defaults.
    pub fn identification(&self) -> IdentificationColumns {
        IdentificationColumns {
            assignment: Some(self.assignment.clone()),
            treated: Some(self.treated.clone()),
            propensity: Some(self.propensity.clone()),
            instrument: Some(self.instrument.clone()),
            clusters: Some(self.clusters.clone()),
        }
    }

    /// Returns a frame with rows reordered by `order`.
    pub fn permute(&self, order: &[usize]) -> Result<Self> {
        let pick_i = |v: &[i64]| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let pick_f = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let clusters = match &self.clusters {
            ClusterIds::Singleton => ClusterIds::Singleton,
            ClusterIds::Labels { codes, .. } => {
                let labels: Vec<String> = order.iter().map(|&i| codes[i].to_string()).collect();
                ClusterIds::from_labels(&labels)
            }
        };
        let covariates = CovariateTable {
            names: self.covariates.names.clone(),
            columns: self
                .covariates
                .columns
                .iter()
                .map(|c| match c {
                    CovColumn::Numeric(v) => CovColumn::Numeric(pick_f(v)),
                    CovColumn::Categorical { codes, levels } => CovColumn::Categorical {
                        codes: order.iter().map(|&i| codes[i]).collect(),
                        levels: levels.clone(),
                    },
                })
                .collect(),
        };
        ExperimentFrame::new(FrameParts {
            ids: IdentificationColumns {
                assignment: Some(pick_i(&self.assignment)),
                treated: Some(pick_i(&self.treated)),
                propensity: Some(pick_f(&self.propensity)),
                instrument: Some(pick_i(&self.instrument)),
                clusters: Some(clusters),
            },
            cluster_bound: self.cluster_bound,
            covariates,
            metrics: self
                .metrics
                .iter()
                .map(|(n, v)| (n.clone(), pick_f(v)))
                .collect(),
            time_column: self.time_column.clone(),
            unit_ids: self
                .unit_ids
                .as_ref()
                .map(|u| order.iter().map(|&i| u[i]).collect()),
            log: self.log.clone(),
        })
    }
}

fn has_repeats(units: &[u32]) -> bool {
    let mut seen = std::collections::HashSet::with_capacity(units.len());
    units.iter().any(|u| !seen.insert(*u))
}

/// Classifies the randomization design. Total on validated frames.
pub fn classify_design(frame: &ExperimentFrame) -> DesignClass {
    design_from_parts(
        frame.treated.iter().zip(&frame.instrument).all(|(t, z)| t == z),
        frame.clusters.all_singletons(),
        propensity_is_constant(&frame.propensity, &frame.assignment, frame.arms.len()),
    )
}

pub(crate) fn design_from_parts(full: bool, singletons: bool, constant_w: bool) -> DesignClass {
    DesignClass {
        compliance: if full {
            Compliance::Full
        } else {
            Compliance::OneSided
        },
        covariance_structure: if singletons {
            CovarianceStructure::Diagonal
        } else {
            CovarianceStructure::BlockDiagonal
        },
        propensity: if constant_w {
            PropensityKind::Constant
        } else {
            PropensityKind::Variable
        },
    }
}

/// Binary designs: W takes a single value. Multi-arm designs, where W is the
/// probability of the realized arm: W is constant within each arm.
fn propensity_is_constant(w: &[f64], assignment: &[i64], arm_count: usize) -> bool {
    if arm_count <= 2 {
        w.iter().all(|x| *x == w[0])
    } else {
        let mut first: HashMap<i64, f64> = HashMap::new();
        w.iter()
            .zip(assignment)
            .all(|(x, a)| *first.entry(*a).or_insert(*x) == *x)
    }
}

/// Inverse probability of the realized assignment.
pub fn ipw_weight(w: f64, assigned: i64, control: i64, arm_count: usize) -> f64 {
    if arm_count > 2 || assigned != control {
        1.0 / w
    } else {
        1.0 / (1.0 - w)
    }
}

pub(crate) fn is_missing(s: &str) -> bool {
    let s = s.trim();
    s.is_empty()
        || s.eq_ignore_ascii_case("na")
        || s.eq_ignore_ascii_case("nan")
        || s.eq_ignore_ascii_case("null")
}

pub(crate) fn parse_label(column: &str, row: usize, s: &str) -> Result<i64> {
    let t = s.trim();
    if is_missing(t) {
        return Err(Error::Type {
            column: column.into(),
            row,
            detail: "missing value in identification column".into(),
        });
    }
    if let Ok(v) = t.parse::<i64>() {
        return Ok(v);
    }
    match t.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v.abs() < 1e15 => Ok(v as i64),
        _ => Err(Error::Type {
            column: column.into(),
            row,
            detail: format!("expected an integer arm label, found `{t}`"),
        }),
    }
}

pub(crate) fn parse_number(column: &str, row: usize, s: &str) -> Result<f64> {
    let t = s.trim();
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() && !is_missing(t) => Ok(v),
        _ => Err(Error::Type {
            column: column.into(),
            row,
            detail: format!("expected a finite number, found `{t}`"),
        }),
    }
}

#[derive(Debug, Default)]
pub(crate) struct CategoricalBuilder {
    codes: Vec<u32>,
    index: HashMap<String, u32>,
    levels: Vec<String>,
}

impl CategoricalBuilder {
    pub(crate) fn code(&mut self, s: &str) -> u32 {
        if let Some(c) = self.index.get(s) {
            return *c;
        }
        let c = self.levels.len() as u32;
        self.index.insert(s.to_string(), c);
        self.levels.push(s.to_string());
        c
    }

    fn finish(self) -> CovColumn {
        let (codes, levels) = sort_levels(self.codes, self.levels);
        CovColumn::Categorical { codes, levels }
    }
}

/// Re-codes categorical data so that levels are sorted.
pub(crate) fn sort_levels(codes: Vec<u32>, levels: Vec<String>) -> (Vec<u32>, Vec<String>) {
    let mut order: Vec<usize> = (0..levels.len()).collect();
    order.sort_by(|&a, &b| levels[a].cmp(&levels[b]));
    let mut remap = vec![0u32; levels.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new as u32;
    }
    let sorted = order.iter().map(|&i| levels[i].clone()).collect();
    (codes.into_iter().map(|c| remap[c as usize]).collect(), sorted)
}

/// Accumulates one covariate column; switches to categorical on the first
/// non-numeric value.
#[derive(Debug)]
pub(crate) enum CovBuilder {
    Numeric(Vec<f64>),
    Categorical(CategoricalBuilder),
}

impl CovBuilder {
    pub(crate) fn push(&mut self, s: &str) {
        let t = s.trim();
        match self {
            CovBuilder::Numeric(v) => match t.parse::<f64>() {
                Ok(x) if x.is_finite() => v.push(x),
                _ => {
                    let mut cat = CategoricalBuilder::default();
                    for x in v.iter() {
                        let c = cat.code(&format_number(*x));
                        cat.codes.push(c);
                    }
                    let c = cat.code(t);
                    cat.codes.push(c);
                    *self = CovBuilder::Categorical(cat);
                }
            },
            CovBuilder::Categorical(cat) => {
                let c = cat.code(t);
                cat.codes.push(c);
            }
        }
    }

    pub(crate) fn finish(self) -> CovColumn {
        match self {
            CovBuilder::Numeric(v) => CovColumn::Numeric(v),
            CovBuilder::Categorical(cat) => cat.finish(),
        }
    }
}

/// Column positions of every schema binding within a CSV header.
#[derive(Debug, Clone)]
pub(crate) struct BoundHeader {
    pub assignment: Option<usize>,
    pub treated: Option<usize>,
    pub propensity: Option<usize>,
    pub instrument: Option<usize>,
    pub cluster: Option<usize>,
    pub time: Option<usize>,
    pub unit_id: Option<usize>,
    pub covariates: Vec<(String, usize)>,
    pub metrics: Vec<(String, usize)>,
}

impl BoundHeader {
    pub(crate) fn resolve(headers: &csv::StringRecord, schema: &Schema) -> Result<Self> {
        schema.validate()?;
        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Schema(format!("column `{name}` not found in file")))
        };
        let opt = |role: Role| -> Result<Option<usize>> { schema.column(role).map(find).transpose() };
        let many = |role: Role| -> Result<Vec<(String, usize)>> {
            schema
                .columns(role)
                .into_iter()
                .map(|c| Ok((c.to_string(), find(c)?)))
                .collect()
        };
        let mut covariates = many(Role::Covariate)?;
        let time = opt(Role::Time)?;
        if let Some(name) = schema.column(Role::Time) {
            if !covariates.iter().any(|(c, _)| c == name) {
                covariates.push((name.to_string(), time.unwrap()));
            }
        }
        Ok(BoundHeader {
            assignment: opt(Role::IntentToTreat)?,
            treated: opt(Role::Treated)?,
            propensity: opt(Role::Propensity)?,
            instrument: opt(Role::Instrument)?,
            cluster: opt(Role::Cluster)?,
            time,
            unit_id: opt(Role::UnitId)?,
            covariates,
            metrics: many(Role::Metric)?,
        })
    }
}

/// Loads a CSV file (header row required) into a validated frame.
pub fn load_table(path: impl AsRef<Path>, schema: &Schema) -> Result<ExperimentFrame> {
    let file = std::fs::File::open(path.as_ref())?;
    load_table_from_reader(std::io::BufReader::with_capacity(1 << 20, file), schema)
}

pub fn load_table_from_reader<R: Read>(reader: R, schema: &Schema) -> Result<ExperimentFrame> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let bound = BoundHeader::resolve(&headers, schema)?;

    let mut a = bound.assignment.map(|_| Vec::new());
    let mut t = bound.treated.map(|_| Vec::new());
    let mut z = bound.instrument.map(|_| Vec::new());
    let mut w = bound.propensity.map(|_| Vec::new());
    let mut cluster_labels = bound.cluster.map(|_| CategoricalBuilder::default());
    let mut units = bound.unit_id.map(|_| CategoricalBuilder::default());
    let mut covs: Vec<CovBuilder> = bound
        .covariates
        .iter()
        .map(|_| CovBuilder::Numeric(Vec::new()))
        .collect();
    let mut metrics: Vec<Vec<f64>> = bound.metrics.iter().map(|_| Vec::new()).collect();
    let mut dropped = 0usize;
    let mut metric_buf = vec![0.0; bound.metrics.len()];

    let mut record = csv::StringRecord::new();
    let mut row = 0usize;
    while rdr.read_record(&mut record)? {
        let field = |i: usize| record.get(i).unwrap_or("");
        if bound.covariates.iter().any(|(_, i)| is_missing(field(*i))) {
            dropped += 1;
            row += 1;
            continue;
        }
        // Validate everything before pushing so a dropped or failing row leaves
        // the columns aligned.
        let av = bound
            .assignment
            .map(|i| parse_label(&col_name(&headers, i), row, field(i)))
            .transpose()?;
        let tv = bound
            .treated
            .map(|i| parse_label(&col_name(&headers, i), row, field(i)))
            .transpose()?;
        let zv = bound
            .instrument
            .map(|i| parse_label(&col_name(&headers, i), row, field(i)))
            .transpose()?;
        let wv = bound
            .propensity
            .map(|i| parse_number(&col_name(&headers, i), row, field(i)))
            .transpose()?;
        if let Some(wv) = wv {
            if !(wv > 0.0 && wv < 1.0) {
                return Err(Error::Domain(format!(
                    "propensity {wv} at row {row} is outside (0, 1)"
                )));
            }
        }
        if let Some(i) = bound.cluster {
            if is_missing(field(i)) {
                return Err(Error::Type {
                    column: col_name(&headers, i),
                    row,
                    detail: "missing cluster identifier".into(),
                });
            }
        }
        for (k, (name, i)) in bound.metrics.iter().enumerate() {
            metric_buf[k] = parse_number(name, row, field(*i))?;
        }
        if let Some(time_idx) = bound.time {
            parse_number(&col_name(&headers, time_idx), row, field(time_idx))?;
        }

        push_opt(&mut a, av);
        push_opt(&mut t, tv);
        push_opt(&mut z, zv);
        push_opt(&mut w, wv);
        if let (Some(b), Some(i)) = (cluster_labels.as_mut(), bound.cluster) {
            let c = b.code(field(i).trim());
            b.codes.push(c);
        }
        if let (Some(b), Some(i)) = (units.as_mut(), bound.unit_id) {
            let c = b.code(field(i).trim());
            b.codes.push(c);
        }
        for (builder, (_, i)) in covs.iter_mut().zip(&bound.covariates) {
            builder.push(field(*i));
        }
        for (col, v) in metrics.iter_mut().zip(&metric_buf) {
            col.push(*v);
        }
        row += 1;
    }

    let mut log = Vec::new();
    if dropped > 0 {
        log.push(LogEntry::warn(
            "rows_dropped",
            None,
            format!("{dropped} rows dropped for missing covariate values"),
        ));
    }
    let clusters = cluster_labels.map(|b| {
        let count = b.levels.len();
        ClusterIds::Labels {
            codes: b.codes,
            count,
        }
    });
    ExperimentFrame::new(FrameParts {
        ids: IdentificationColumns {
            assignment: a,
            treated: t,
            propensity: w,
            instrument: z,
            clusters,
        },
        cluster_bound: bound.cluster.is_some(),
        covariates: CovariateTable {
            names: bound.covariates.iter().map(|(n, _)| n.clone()).collect(),
            columns: covs.into_iter().map(CovBuilder::finish).collect(),
        },
        metrics: bound
            .metrics
            .iter()
            .map(|(n, _)| n.clone())
            .zip(metrics)
            .collect(),
        time_column: schema.column(Role::Time).map(str::to_string),
        unit_ids: units.map(|b| b.codes),
        log,
    })
}

fn push_opt<T>(col: &mut Option<Vec<T>>, v: Option<T>) {
    if let (Some(col), Some(v)) = (col.as_mut(), v) {
        col.push(v);
    }
}

fn col_name(headers: &csv::StringRecord, i: usize) -> String {
    headers.get(i).unwrap_or("?").trim().to_string()
}
