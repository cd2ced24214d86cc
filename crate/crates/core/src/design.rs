//! Model inputs: metric blocks, covariate encodings, and the regressor /
//! instrument block layout `[intercept, T, f(X), T·f(X)]` / `[intercept, Z, f(X), Z·f(X)]`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{
    classify_design, ipw_weight, ClusterIds, CovColumn, CovariateTable, DesignClass,
    ExperimentFrame, LogEntry, PropensityKind,
};

/// Declarative covariate transform. Anything outside this list is rejected at
/// plan-parse time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Log1p,
    Standardize,
    Bin { edges: Vec<f64> },
    Categorical,
}

/// Covariates requested for a model and how to encode them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub columns: Vec<String>,
    /// Per-column overrides. Default: identity for numeric, one-hot for categorical.
    #[serde(default)]
    pub transforms: BTreeMap<String, Transform>,
    /// Caller asserts every covariate was measured before treatment.
    #[serde(default)]
    pub pretreatment_asserted: bool,
}

impl CovariateSpec {
    pub fn new<S: AsRef<str>>(columns: &[S]) -> Self {
        CovariateSpec {
            columns: columns.iter().map(|c| c.as_ref().to_string()).collect(),
            transforms: BTreeMap::new(),
            pretreatment_asserted: true,
        }
    }

    pub fn with_transform(mut self, column: &str, t: Transform) -> Self {
        self.transforms.insert(column.to_string(), t);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedTransform {
    Identity,
    Log1p,
    Standardize { mean: f64, sd: f64 },
    Bin { edges: Vec<f64> },
}

impl FittedTransform {
    fn width(&self) -> usize {
        match self {
            FittedTransform::Bin { edges } => edges.len(),
            _ => 1,
        }
    }

    fn encode(&self, x: f64, out: &mut [f64]) {
        match self {
            FittedTransform::Identity => out[0] = x,
            FittedTransform::Log1p => out[0] = x.ln_1p(),
            FittedTransform::Standardize { mean, sd } => out[0] = (x - mean) / sd,
            FittedTransform::Bin { edges } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let bin = edges.partition_point(|e| *e <= x);
                if bin > 0 {
                    out[bin - 1] = 1.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureEncoding {
    Numeric { transform: FittedTransform },
    /// One-hot with the first (sorted) level dropped.
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub column: String,
    pub encoding: FeatureEncoding,
    pub names: Vec<String>,
}

/// Fitted f(X): maps raw covariate values to model feature columns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub features: Vec<Feature>,
}

/// A raw covariate value supplied outside the training data (policy contexts,
/// time grids).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ContextValue {
    Num(f64),
    Str(String),
}

impl FeatureEncoder {
    pub fn width(&self) -> usize {
        self.features.iter().map(|f| f.names.len()).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().flat_map(|f| f.names.clone()).collect()
    }

    pub fn columns(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.column.as_str())
    }

    /// Offset of a feature's first output column within f(X).
    pub fn offset(&self, column: &str) -> Option<(usize, &Feature)> {
        let mut off = 0;
        for f in &self.features {
            if f.column == column {
                return Some((off, f));
            }
            off += f.names.len();
        }
        None
    }

    /// Learns encodings from a covariate table. `counts` are frequency weights
    /// when the table is compressed. Constant covariates are dropped with a warning.
    pub fn fit(
        table: &CovariateTable,
        counts: Option<&[f64]>,
        spec: &CovariateSpec,
        log: &mut Vec<LogEntry>,
    ) -> Result<Self> {
        let mut features = Vec::new();
        for name in &spec.columns {
            let column = table
                .get(name)
                .ok_or_else(|| Error::Schema(format!("covariate `{name}` is not bound in the frame")))?;
            let transform = spec.transforms.get(name);
            let feature = match (transform, column) {
                (Some(Transform::Categorical), c) => categorical_feature(name, &c.to_categorical(), counts),
                (_, c @ CovColumn::Categorical { .. }) => {
                    if matches!(transform, Some(t) if *t != Transform::Identity) {
                        return Err(Error::Schema(format!(
                            "transform {transform:?} requires a numeric covariate; `{name}` is categorical"
                        )));
                    }
                    categorical_feature(name, c, counts)
                }
                (t, CovColumn::Numeric(v)) => numeric_feature(name, v, counts, t)?,
            };
            match feature {
                Some(f) => features.push(f),
                None => log.push(LogEntry::warn(
                    "covariate_dropped",
                    Some(name),
                    "covariate takes a single value; dropped",
                )),
            }
        }
        Ok(FeatureEncoder { features })
    }

    /// Encodes every row of `table` into an `rows × width` matrix.
    pub fn encode_table(&self, table: &CovariateTable) -> Result<DMatrix<f64>> {
        let rows = table.rows();
        let mut out = DMatrix::zeros(rows, self.width());
        let mut off = 0;
        let mut buf = Vec::new();
        for f in &self.features {
            let w = f.names.len();
            let col = table
                .get(&f.column)
                .ok_or_else(|| Error::Schema(format!("covariate `{}` missing", f.column)))?;
            match (&f.encoding, col) {
                (FeatureEncoding::Numeric { transform }, CovColumn::Numeric(v)) => {
                    buf.resize(w, 0.0);
                    for (r, x) in v.iter().enumerate() {
                        transform.encode(*x, &mut buf);
                        for k in 0..w {
                            out[(r, off + k)] = buf[k];
                        }
                    }
                }
                (FeatureEncoding::Categorical { levels }, c) => {
                    let cat = c.to_categorical();
                    let CovColumn::Categorical { codes, levels: col_levels } = &cat else {
                        unreachable!()
                    };
                    let position: HashMap<&str, usize> =
                        levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
                    let remap: Vec<Option<usize>> = col_levels
                        .iter()
                        .map(|l| position.get(l.as_str()).copied())
                        .collect();
                    for (r, code) in codes.iter().enumerate() {
                        match remap[*code as usize] {
                            Some(0) => {}
                            Some(i) => out[(r, off + i - 1)] = 1.0,
                            None => {
                                return Err(Error::Context(format!(
                                    "unseen level `{}` for `{}`",
                                    col_levels[*code as usize], f.column
                                )))
                            }
                        }
                    }
                }
                (FeatureEncoding::Numeric { .. }, CovColumn::Categorical { .. }) => {
                    return Err(Error::Schema(format!(
                        "covariate `{}` was numeric at fit time",
                        f.column
                    )))
                }
            }
            off += w;
        }
        Ok(out)
    }

    /// Encodes a single feature value into its output slice.
    pub fn encode_value(&self, feature: &Feature, value: &ContextValue, out: &mut [f64]) -> Result<()> {
        match (&feature.encoding, value) {
            (FeatureEncoding::Numeric { transform }, ContextValue::Num(x)) => {
                transform.encode(*x, out);
                Ok(())
            }
            (FeatureEncoding::Categorical { levels }, v) => {
                let s = match v {
                    ContextValue::Str(s) => s.clone(),
                    ContextValue::Num(x) => format!("{x}"),
                };
                let idx = levels.iter().position(|l| *l == s).ok_or_else(|| {
                    Error::Context(format!("unseen level `{s}` for covariate `{}`", feature.column))
                })?;
                out.iter_mut().for_each(|o| *o = 0.0);
                if idx > 0 {
                    out[idx - 1] = 1.0;
                }
                Ok(())
            }
            (FeatureEncoding::Numeric { .. }, ContextValue::Str(s)) => Err(Error::Context(format!(
                "covariate `{}` is numeric; got `{s}`",
                feature.column
            ))),
        }
    }

    /// Encodes a full context; every model covariate must be present.
    pub fn encode_context(&self, values: &BTreeMap<String, ContextValue>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.width()];
        let mut off = 0;
        for f in &self.features {
            let w = f.names.len();
            let v = values
                .get(&f.column)
                .ok_or_else(|| Error::Context(format!("context is missing covariate `{}`", f.column)))?;
            self.encode_value(f, v, &mut out[off..off + w])?;
            off += w;
        }
        Ok(out)
    }
}

fn weighted_iter<'a>(v: &'a [f64], counts: Option<&'a [f64]>) -> impl Iterator<Item = (f64, f64)> + 'a {
    v.iter()
        .enumerate()
        .map(move |(i, x)| (*x, counts.map_or(1.0, |c| c[i])))
}

fn numeric_feature(
    name: &str,
    v: &[f64],
    counts: Option<&[f64]>,
    transform: Option<&Transform>,
) -> Result<Option<Feature>> {
    let distinct = v.iter().any(|x| *x != v[0]);
    let fitted = match transform.unwrap_or(&Transform::Identity) {
        Transform::Identity => FittedTransform::Identity,
        Transform::Log1p => {
            if let Some(x) = v.iter().find(|x| **x <= -1.0) {
                return Err(Error::Domain(format!("log1p of {x} in covariate `{name}`")));
            }
            FittedTransform::Log1p
        }
        Transform::Standardize => {
            let (mut sw, mut s) = (0.0, 0.0);
            for (x, c) in weighted_iter(v, counts) {
                sw += c;
                s += c * x;
            }
            let mean = s / sw;
            let ss: f64 = weighted_iter(v, counts).map(|(x, c)| c * (x - mean).powi(2)).sum();
            let sd = (ss / sw).sqrt();
            if sd == 0.0 {
                return Ok(None);
            }
            FittedTransform::Standardize { mean, sd }
        }
        Transform::Bin { edges } => {
            if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Schema(format!(
                    "bin edges for `{name}` must be non-empty and strictly increasing"
                )));
            }
            let mut occupied = vec![false; edges.len() + 1];
            for x in v {
                occupied[edges.partition_point(|e| e <= x)] = true;
            }
            if occupied.iter().filter(|o| **o).count() < 2 {
                return Ok(None);
            }
            FittedTransform::Bin { edges: edges.clone() }
        }
        Transform::Categorical => unreachable!("handled by the caller"),
    };
    if !distinct {
        return Ok(None);
    }
    let names = match &fitted {
        FittedTransform::Bin { edges } => (1..=edges.len()).map(|b| format!("{name}_bin{b}")).collect(),
        _ => vec![name.to_string()],
    };
    debug_assert_eq!(names.len(), fitted.width());
    Ok(Some(Feature {
        column: name.to_string(),
        encoding: FeatureEncoding::Numeric { transform: fitted },
        names,
    }))
}

fn categorical_feature(name: &str, column: &CovColumn, counts: Option<&[f64]>) -> Option<Feature> {
    let CovColumn::Categorical { codes, levels } = column else {
        unreachable!()
    };
    let mut present = vec![false; levels.len()];
    for (i, c) in codes.iter().enumerate() {
        if counts.is_none_or(|w| w[i] > 0.0) {
            present[*c as usize] = true;
        }
    }
    let levels: Vec<String> = levels
        .iter()
        .zip(&present)
        .filter(|(_, p)| **p)
        .map(|(l, _)| l.clone())
        .collect();
    if levels.len() < 2 {
        return None;
    }
    let names = levels[1..].iter().map(|l| format!("{name}_{l}")).collect();
    Some(Feature {
        column: name.to_string(),
        encoding: FeatureEncoding::Categorical { levels },
        names,
    })
}

/// Column layout shared by the regressor and instrument blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLayout {
    /// Sorted arm labels; `arms[0]` is control.
    pub arms: Vec<i64>,
    pub encoder: FeatureEncoder,
    pub regressor_names: Vec<String>,
    pub instrument_names: Vec<String>,
}

impl DesignLayout {
    pub fn new(arms: Vec<i64>, encoder: FeatureEncoder) -> Self {
        let fx = encoder.names();
        let label = |prefix: &str, arm: i64| {
            if arms.len() == 2 && arms == [0, 1] {
                prefix.to_string()
            } else {
                format!("{prefix}_{arm}")
            }
        };
        let block = |prefix: &str| {
            let mut names = vec!["intercept".to_string()];
            let arm_names: Vec<String> = arms[1..].iter().map(|a| label(prefix, *a)).collect();
            names.extend(arm_names.iter().cloned());
            names.extend(fx.iter().cloned());
            for a in &arm_names {
                names.extend(fx.iter().map(|f| format!("{a}:{f}")));
            }
            names
        };
        DesignLayout {
            regressor_names: block("T"),
            instrument_names: block("Z"),
            arms,
            encoder,
        }
    }

    pub fn p(&self) -> usize {
        self.regressor_names.len()
    }
    /// Number of non-control arms.
    pub fn treated_arms(&self) -> usize {
        self.arms.len() - 1
    }
    pub fn q(&self) -> usize {
        self.encoder.width()
    }
    /// Column of the arm indicator for non-control arm `j` (0-based).
    pub fn arm_col(&self, j: usize) -> usize {
        1 + j
    }
    pub fn fx_offset(&self) -> usize {
        1 + self.treated_arms()
    }
    pub fn interaction_col(&self, j: usize, k: usize) -> usize {
        self.fx_offset() + self.q() * (1 + j) + k
    }
    pub fn arm_index(&self, label: i64) -> Option<usize> {
        self.arms.iter().position(|a| *a == label)
    }

    /// Delta vector for the effect of arm `j` at feature means `fx_mean`.
    pub fn effect_contrast(&self, j: usize, fx_mean: &[f64]) -> DVector<f64> {
        let mut c = DVector::zeros(self.p());
        c[self.arm_col(j)] = 1.0;
        for (k, m) in fx_mean.iter().enumerate() {
            c[self.interaction_col(j, k)] = *m;
        }
        c
    }

    /// Builds one block matrix (`rows × p`) from arm labels and encoded features.
    pub fn block(&self, labels: &[i64], fx: &DMatrix<f64>) -> DMatrix<f64> {
        let rows = labels.len();
        let (q, p) = (self.q(), self.p());
        let mut m = DMatrix::zeros(rows, p);
        m.column_mut(0).fill(1.0);
        for k in 0..q {
            m.column_mut(self.fx_offset() + k).copy_from(&fx.column(k));
        }
        for (j, arm) in self.arms[1..].iter().enumerate() {
            let ind: Vec<f64> = labels.iter().map(|l| f64::from(u8::from(l == arm))).collect();
            m.column_mut(self.arm_col(j)).copy_from_slice(&ind);
            for k in 0..q {
                let col = self.interaction_col(j, k);
                for r in 0..rows {
                    m[(r, col)] = ind[r] * fx[(r, k)];
                }
            }
        }
        m
    }
}

/// How per-row weights were derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Unit,
    /// Inverse probability of the realized assignment.
    InverseAssignmentProbability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputMetadata {
    pub intercept_included: bool,
    pub pretreatment_asserted: bool,
    pub covariates: CovariateSpec,
}

/// Regressor/instrument data at some row granularity: raw rows (`counts == None`)
/// or compressed groups carrying frequency weights.
#[derive(Debug, Clone)]
pub struct DesignData {
    pub layout: DesignLayout,
    pub regressors: DMatrix<f64>,
    pub instruments: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub counts: Option<DVector<f64>>,
    pub clusters: ClusterIds,
    pub covariates: CovariateTable,
    pub n_obs: usize,
    pub design: DesignClass,
    pub weight_scheme: WeightScheme,
    pub metadata: InputMetadata,
}

impl DesignData {
    pub fn rows(&self) -> usize {
        self.regressors.nrows()
    }

    pub fn count(&self, row: usize) -> f64 {
        self.counts.as_ref().map_or(1.0, |c| c[row])
    }

    /// Combined weight `w · count` used in cross moments.
    pub fn moment_weights(&self) -> DVector<f64> {
        match &self.counts {
            None => self.weights.clone(),
            Some(c) => self.weights.component_mul(c),
        }
    }

    /// Frequency-weighted mean of f(X) over the rows selected by `mask`.
    pub fn feature_mean(&self, mask: Option<&[bool]>) -> (Vec<f64>, f64) {
        let q = self.layout.q();
        let off = self.layout.fx_offset();
        let mut sums = vec![0.0; q];
        let mut total = 0.0;
        for r in 0..self.rows() {
            if mask.is_some_and(|m| !m[r]) {
                continue;
            }
            let c = self.count(r);
            total += c;
            for (k, s) in sums.iter_mut().enumerate() {
                *s += c * self.regressors[(r, off + k)];
            }
        }
        if total > 0.0 {
            sums.iter_mut().for_each(|s| *s /= total);
        }
        (sums, total)
    }

    pub(crate) fn same_blocks(&self, other: &DesignData) -> bool {
        self.layout == other.layout
            && self.regressors == other.regressors
            && self.instruments == other.instruments
            && self.weights == other.weights
            && self.counts == other.counts
            && self.clusters == other.clusters
    }
}

/// Outcome statistics at the same granularity as [`DesignData`]: per-row values,
/// or per-group sums plus within-group centered second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeBlock {
    pub names: Vec<String>,
    pub sums: DMatrix<f64>,
    pub centered_m2: Option<DMatrix<f64>>,
}

impl OutcomeBlock {
    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn select(&self, j: usize) -> OutcomeBlock {
        OutcomeBlock {
            names: vec![self.names[j].clone()],
            sums: self.sums.columns(j, 1).into_owned(),
            centered_m2: self.centered_m2.as_ref().map(|m| m.columns(j, 1).into_owned()),
        }
    }
}

/// Anything the linear engine can fit.
pub trait FitSource {
    fn data(&self) -> &Arc<DesignData>;
    fn outcomes(&self) -> &Arc<OutcomeBlock>;
}

/// Dense model input: one row per observation.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub data: Arc<DesignData>,
    pub y: Arc<OutcomeBlock>,
}

impl FitSource for ModelInput {
    fn data(&self) -> &Arc<DesignData> {
        &self.data
    }
    fn outcomes(&self) -> &Arc<OutcomeBlock> {
        &self.y
    }
}

impl ModelInput {
    pub fn n(&self) -> usize {
        self.data.n_obs
    }

    pub fn metric_names(&self) -> &[String] {
        &self.y.names
    }

    /// Single-metric view sharing the regressor blocks.
    pub fn select_metric(&self, name: &str) -> Result<ModelInput> {
        let j = self
            .y
            .index(name)
            .ok_or_else(|| Error::Contract(format!("metric `{name}` is not in this input")))?;
        Ok(ModelInput {
            data: Arc::clone(&self.data),
            y: Arc::new(self.y.select(j)),
        })
    }

    /// Horizontally concatenates inputs that share identical blocks.
    pub fn concat(inputs: &[ModelInput]) -> Result<ModelInput> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("no inputs to concatenate".into()))?;
        for other in &inputs[1..] {
            if !Arc::ptr_eq(&first.data, &other.data) && !first.data.same_blocks(&other.data) {
                return Err(Error::Contract(
                    "metrics do not share regressor/instrument blocks, weights and clusters".into(),
                ));
            }
        }
        let rows = first.data.rows();
        let k: usize = inputs.iter().map(|i| i.y.k()).sum();
        let mut sums = DMatrix::zeros(rows, k);
        let mut names = Vec::with_capacity(k);
        let mut col = 0;
        for input in inputs {
            for j in 0..input.y.k() {
                sums.column_mut(col).copy_from(&input.y.sums.column(j));
                names.push(input.y.names[j].clone());
                col += 1;
            }
        }
        Ok(ModelInput {
            data: Arc::clone(&first.data),
            y: Arc::new(OutcomeBlock {
                names,
                sums,
                centered_m2: None,
            }),
        })
    }

    /// Restricts to rows where `mask` is true.
    pub fn subset(&self, mask: &[bool]) -> ModelInput {
        let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let d = &self.data;
        let pick_rows = |m: &DMatrix<f64>| m.select_rows(idx.iter());
        let clusters = match &d.clusters {
            ClusterIds::Singleton => ClusterIds::Singleton,
            ClusterIds::Labels { codes, .. } => {
                let labels: Vec<String> = idx.iter().map(|&i| codes[i].to_string()).collect();
                ClusterIds::from_labels(&labels)
            }
        };
        let covariates = CovariateTable {
            names: d.covariates.names.clone(),
            columns: d
                .covariates
                .columns
                .iter()
                .map(|c| match c {
                    CovColumn::Numeric(v) => CovColumn::Numeric(idx.iter().map(|&i| v[i]).collect()),
                    CovColumn::Categorical { codes, levels } => CovColumn::Categorical {
                        codes: idx.iter().map(|&i| codes[i]).collect(),
                        levels: levels.clone(),
                    },
                })
                .collect(),
        };
        ModelInput {
            data: Arc::new(DesignData {
                layout: d.layout.clone(),
                regressors: pick_rows(&d.regressors),
                instruments: pick_rows(&d.instruments),
                weights: DVector::from_iterator(idx.len(), idx.iter().map(|&i| d.weights[i])),
                counts: None,
                clusters,
                covariates,
                n_obs: idx.len(),
                design: d.design,
                weight_scheme: d.weight_scheme,
                metadata: d.metadata.clone(),
            }),
            y: Arc::new(OutcomeBlock {
                names: self.y.names.clone(),
                sums: pick_rows(&self.y.sums),
                centered_m2: None,
            }),
        }
    }
}

/// Restricts a covariate table to the requested columns, in order.
pub(crate) fn project_table(table: &CovariateTable, columns: &[String]) -> Result<CovariateTable> {
    let mut out = CovariateTable::default();
    for c in columns {
        let col = table
            .get(c)
            .ok_or_else(|| Error::Schema(format!("covariate `{c}` is not bound in the frame")))?;
        out.names.push(c.clone());
        out.columns.push(col.clone());
    }
    Ok(out)
}

/// Per-row weights implied by the design.
pub(crate) fn design_weights(
    design: &DesignClass,
    propensity: &[f64],
    assignment: &[i64],
    arms: &[i64],
) -> (DVector<f64>, WeightScheme) {
    if design.propensity == PropensityKind::Variable {
        let w = propensity
            .iter()
            .zip(assignment)
            .map(|(w, a)| ipw_weight(*w, *a, arms[0], arms.len()));
        (
            DVector::from_iterator(propensity.len(), w),
            WeightScheme::InverseAssignmentProbability,
        )
    } else {
        (DVector::from_element(propensity.len(), 1.0), WeightScheme::Unit)
    }
}

/// Builds the model input for one or more metrics sharing the frame's
/// identification structure.
pub fn add_metric<S: AsRef<str>>(
    frame: &ExperimentFrame,
    metrics: &[S],
    covariates: &CovariateSpec,
) -> Result<(ModelInput, Vec<LogEntry>)> {
    if metrics.is_empty() {
        return Err(Error::Schema("at least one metric must be bound before fitting".into()));
    }
    let mut log = Vec::new();
    let mut names = Vec::with_capacity(metrics.len());
    for m in metrics {
        let m = m.as_ref();
        if covariates.columns.iter().any(|c| c == m) {
            return Err(Error::Aliasing(m.to_string()));
        }
        if frame.metric(m).is_none() {
            return Err(Error::Schema(format!("metric `{m}` is not bound in the frame")));
        }
        names.push(m.to_string());
    }
    if !covariates.pretreatment_asserted && !covariates.columns.is_empty() {
        log.push(LogEntry::warn(
            "pretreatment_not_asserted",
            None,
            "covariates were not asserted to be measured before treatment",
        ));
    }
    let table = project_table(frame.covariates(), &covariates.columns)?;
    let encoder = FeatureEncoder::fit(&table, None, covariates, &mut log)?;
    let layout = DesignLayout::new(frame.arms().to_vec(), encoder);
    let fx = layout.encoder.encode_table(&table)?;
    let regressors = layout.block(frame.treated(), &fx);
    let instruments = layout.block(frame.instrument(), &fx);
    drop(fx);
    let design = classify_design(frame);
    let (weights, weight_scheme) =
        design_weights(&design, frame.propensity(), frame.assignment(), frame.arms());

    let n = frame.n();
    let mut sums = DMatrix::zeros(n, names.len());
    for (j, m) in names.iter().enumerate() {
        sums.column_mut(j).copy_from_slice(frame.metric(m).unwrap());
    }
    let data = DesignData {
        layout,
        regressors,
        instruments,
        weights,
        counts: None,
        clusters: frame.clusters().clone(),
        covariates: table,
        n_obs: n,
        design,
        weight_scheme,
        metadata: InputMetadata {
            intercept_included: true,
            pretreatment_asserted: covariates.pretreatment_asserted,
            covariates: covariates.clone(),
        },
    };
    Ok((
        ModelInput {
            data: Arc::new(data),
            y: Arc::new(OutcomeBlock {
                names,
                sums,
                centered_m2: None,
            }),
        },
        log,
    ))
}
