//! Generalized two-stage least squares.
//!
//! One solver covers every design: with `T = Z` the first stage is the identity
//! and the second stage is OLS; noncompliance enters through the first stage;
//! clustering only changes the meat of the sandwich; adaptive propensities
//! enter as weights. Everything is computed from weighted cross-moment
//! matrices, so compressed inputs and multi-metric batches reuse the same path.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{DesignData, DesignLayout, FitSource, ModelInput, OutcomeBlock, WeightScheme};
use crate::error::{Error, Result};
use crate::frame::{ClusterIds, Compliance, CovarianceStructure, DesignClass, PropensityKind};
use crate::linalg::{symmetrize, weighted_cross, SpdSolver};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitOptions {
    /// `n/(n−p)` (robust) or `G/(G−1)·(n−1)/(n−p)` (clustered). Off by default.
    #[serde(default)]
    pub finite_sample_correction: bool,
    /// Report the complier effect as the average effect under a
    /// homogeneous-effects assumption.
    #[serde(default)]
    pub assume_homogeneous_effects: bool,
}

#[derive(Debug, Clone)]
pub struct FittedLinearModel {
    id: String,
    data: Arc<DesignData>,
    outcomes: Arc<OutcomeBlock>,
    design: DesignClass,
    options: FitOptions,
    /// `p × k` second-stage coefficients.
    beta: DMatrix<f64>,
    /// `p × p` first-stage coefficients; column `j` regresses regressor `j` on the instruments.
    pi: DMatrix<f64>,
    /// `(Xᵀ P_Z X)⁻¹` under the model weights.
    bread: DMatrix<f64>,
    cov: Vec<DMatrix<f64>>,
}

/// Fits a single metric.
pub fn fit_2sls(input: &ModelInput, design: DesignClass) -> Result<FittedLinearModel> {
    if input.y.k() != 1 {
        return Err(Error::Contract(format!(
            "fit_2sls takes one metric, got {}; use fit_sur for batches",
            input.y.k()
        )));
    }
    fit_sur(input, design)
}

/// Fits every metric of the outcome block with one factorization.
pub fn fit_sur<S: FitSource + ?Sized>(input: &S, design: DesignClass) -> Result<FittedLinearModel> {
    fit_sur_with(input, design, FitOptions::default())
}

/// Batches single-metric inputs that share their blocks.
pub fn fit_sur_batch(inputs: &[ModelInput], design: DesignClass, options: FitOptions) -> Result<FittedLinearModel> {
    let joined = ModelInput::concat(inputs)?;
    fit_sur_with(&joined, design, options)
}

pub fn fit_sur_with<S: FitSource + ?Sized>(
    input: &S,
    design: DesignClass,
    options: FitOptions,
) -> Result<FittedLinearModel> {
    let data = input.data();
    let y = input.outcomes();
    check_contract(data, y, &design)?;

    let layout = &data.layout;
    let p = layout.p();
    if data.n_obs <= p {
        return Err(Error::InsufficientData {
            rows: data.n_obs,
            columns: p,
        });
    }
    let v = data.moment_weights();
    let mut szz = weighted_cross(&data.instruments, &v, &data.instruments);
    symmetrize(&mut szz);
    let szx = weighted_cross(&data.instruments, &v, &data.regressors);
    let szy = weighted_cross(&data.instruments, &data.weights, &y.sums);

    let first = SpdSolver::new(&szz, &layout.instrument_names, "instrument cross-moment")?;
    let pi = first.solve(&szx);
    let mut projected = szx.tr_mul(&pi);
    symmetrize(&mut projected);
    let second = SpdSolver::new(&projected, &layout.regressor_names, "projected regressor cross-moment")?;
    let mut bread = second.inverse();
    symmetrize(&mut bread);
    let beta = &bread * pi.tr_mul(&szy);

    let mut model = FittedLinearModel {
        id: y.names.join("+"),
        data: Arc::clone(data),
        outcomes: Arc::clone(y),
        design,
        options,
        beta,
        pi,
        bread,
        cov: Vec::new(),
    };
    let clusters = match design.covariance_structure {
        CovarianceStructure::Diagonal => ClusterIds::Singleton,
        CovarianceStructure::BlockDiagonal => data.clusters.clone(),
    };
    model.cov = sandwich_cov(&model, &clusters)?;
    Ok(model)
}

fn check_contract(data: &DesignData, y: &OutcomeBlock, design: &DesignClass) -> Result<()> {
    let rows = data.rows();
    let shapes_ok = data.regressors.shape() == data.instruments.shape()
        && data.regressors.ncols() == data.layout.p()
        && data.weights.len() == rows
        && y.sums.nrows() == rows
        && y.centered_m2.as_ref().is_none_or(|m| m.shape() == y.sums.shape())
        && data.counts.as_ref().is_none_or(|c| c.len() == rows);
    if !shapes_ok {
        return Err(Error::Contract("regressor, instrument, weight and outcome blocks do not align".into()));
    }
    if data.weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::Contract("weights must be strictly positive".into()));
    }
    if design.propensity == PropensityKind::Variable && data.weight_scheme == WeightScheme::Unit {
        return Err(Error::Contract(
            "variable propensity requires inverse-probability weights on the input".into(),
        ));
    }
    if design.covariance_structure == CovarianceStructure::BlockDiagonal
        && matches!(data.clusters, ClusterIds::Singleton)
    {
        return Err(Error::Contract("block-diagonal covariance requires bound clusters".into()));
    }
    Ok(())
}

/// Sandwich covariance `B (Σ_c T̂_cᵀ ε_c ε_cᵀ T̂_c) B` for every metric.
///
/// `ClusterIds::Singleton` evaluates the per-observation form
/// `B (Σ_i T̂_iᵀ T̂_i ε_i²) B`; labelled clusters evaluate the block form. With
/// compressed inputs, labels index groups and each group must lie within one
/// cluster.
pub fn sandwich_cov(model: &FittedLinearModel, clusters: &ClusterIds) -> Result<Vec<DMatrix<f64>>> {
    let data = &model.data;
    let y = &model.outcomes;
    let rows = data.rows();
    let p = data.layout.p();
    let xhat = model.fitted_treatment();
    let mu = &data.regressors * &model.beta;
    let n = data.n_obs as f64;

    let mut out = Vec::with_capacity(y.k());
    for j in 0..y.k() {
        let mut meat = DMatrix::zeros(p, p);
        let correction;
        match clusters {
            ClusterIds::Singleton => {
                let mut v = DVector::zeros(rows);
                for g in 0..rows {
                    let c = data.count(g);
                    let r = y.sums[(g, j)] - c * mu[(g, j)];
                    let within = y.centered_m2.as_ref().map_or(0.0, |m| m[(g, j)]);
                    let e2 = within + r * r / c;
                    v[g] = data.weights[g] * data.weights[g] * e2;
                }
                meat += weighted_cross(&xhat, &v, &xhat);
                correction = n / (n - p as f64);
            }
            ClusterIds::Labels { codes, count } => {
                if codes.len() != rows {
                    return Err(Error::Contract("cluster labels do not match the data rows".into()));
                }
                if *count < 2 {
                    return Err(Error::Degenerate(
                        "a single cluster leaves between-cluster variance unidentified".into(),
                    ));
                }
                let mut scores = DMatrix::zeros(*count, p);
                for g in 0..rows {
                    let r = y.sums[(g, j)] - data.count(g) * mu[(g, j)];
                    let s = data.weights[g] * r;
                    let c = codes[g] as usize;
                    for k in 0..p {
                        scores[(c, k)] += s * xhat[(g, k)];
                    }
                }
                meat += scores.tr_mul(&scores);
                let g = *count as f64;
                correction = g / (g - 1.0) * (n - 1.0) / (n - p as f64);
            }
        }
        let mut cov = &model.bread * meat * &model.bread;
        if model.options.finite_sample_correction {
            cov *= correction;
        }
        symmetrize(&mut cov);
        out.push(cov);
    }
    Ok(out)
}

impl FittedLinearModel {
    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
    pub fn data(&self) -> &Arc<DesignData> {
        &self.data
    }
    pub fn outcomes(&self) -> &Arc<OutcomeBlock> {
        &self.outcomes
    }
    pub fn layout(&self) -> &DesignLayout {
        &self.data.layout
    }
    pub fn design(&self) -> DesignClass {
        self.design
    }
    pub fn options(&self) -> FitOptions {
        self.options
    }
    pub fn metric_names(&self) -> &[String] {
        &self.outcomes.names
    }
    pub fn metric_index(&self, name: &str) -> Result<usize> {
        self.outcomes
            .index(name)
            .ok_or_else(|| Error::Contract(format!("metric `{name}` is not in this model")))
    }
    pub fn n(&self) -> usize {
        self.data.n_obs
    }
    /// Full column rank is enforced at fit time.
    pub fn rank(&self) -> usize {
        self.data.layout.p()
    }
    pub fn cluster_count(&self) -> usize {
        match self.design.covariance_structure {
            CovarianceStructure::Diagonal => self.data.n_obs,
            CovarianceStructure::BlockDiagonal => self.data.clusters.count(self.data.rows()),
        }
    }
    pub fn weight_scheme(&self) -> WeightScheme {
        self.data.weight_scheme
    }
    pub fn beta(&self, metric: usize) -> DVector<f64> {
        self.beta.column(metric).into_owned()
    }
    pub fn beta_matrix(&self) -> &DMatrix<f64> {
        &self.beta
    }
    pub fn cov(&self, metric: usize) -> &DMatrix<f64> {
        &self.cov[metric]
    }
    pub fn first_stage(&self) -> &DMatrix<f64> {
        &self.pi
    }
    pub fn bread(&self) -> &DMatrix<f64> {
        &self.bread
    }

    /// `T̂ = P_Z T` at data-row granularity.
    pub fn fitted_treatment(&self) -> DMatrix<f64> {
        &self.data.instruments * &self.pi
    }

    /// Second-stage residual per data row (group-mean residual for compressed data).
    pub fn residuals(&self, metric: usize) -> DVector<f64> {
        let mu = &self.data.regressors * self.beta.column(metric);
        DVector::from_fn(self.data.rows(), |g, _| {
            self.outcomes.sums[(g, metric)] / self.data.count(g) - mu[g]
        })
    }

    /// First-stage residuals `X − T̂`.
    pub fn first_stage_residuals(&self) -> DMatrix<f64> {
        &self.data.regressors - self.fitted_treatment()
    }

    /// First-stage coefficient of the instrument on treatment for binary designs.
    pub fn compliance_rate(&self) -> Option<f64> {
        (self.layout().treated_arms() == 1).then(|| self.pi[(1, 1)])
    }

    pub fn estimand(&self) -> &'static str {
        match (self.design.compliance, self.options.assume_homogeneous_effects) {
            (Compliance::Full, _) => "ATE",
            (Compliance::OneSided, false) => "LATE",
            (Compliance::OneSided, true) => "ATE_assuming_homogeneous_effects",
        }
    }

    pub fn to_document(&self) -> LinearModelDocument {
        LinearModelDocument {
            schema_version: MODEL_SCHEMA_VERSION,
            kind: "linear_2sls".into(),
            id: self.id.clone(),
            layout: self.data.layout.clone(),
            design_class: self.design,
            weight_scheme: self.data.weight_scheme,
            intercept_included: self.data.metadata.intercept_included,
            pretreatment_asserted: self.data.metadata.pretreatment_asserted,
            options: self.options,
            n: self.data.n_obs,
            rank: self.rank(),
            cluster_count: self.cluster_count(),
            estimand: self.estimand().to_string(),
            compliance_rate: self.compliance_rate(),
            metrics: (0..self.outcomes.k())
                .map(|j| MetricCoefficients {
                    name: self.outcomes.names[j].clone(),
                    beta: self.beta.column(j).iter().copied().collect(),
                    cov: matrix_rows(&self.cov[j]),
                })
                .collect(),
        }
    }
}

pub const MODEL_SCHEMA_VERSION: u32 = 1;

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Contract("ragged matrix in model document".into()));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// Versioned JSON form of a fitted linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModelDocument {
    pub schema_version: u32,
    pub kind: String,
    pub id: String,
    pub layout: DesignLayout,
    pub design_class: DesignClass,
    pub weight_scheme: WeightScheme,
    pub intercept_included: bool,
    pub pretreatment_asserted: bool,
    pub options: FitOptions,
    pub n: usize,
    pub rank: usize,
    pub cluster_count: usize,
    pub estimand: String,
    pub compliance_rate: Option<f64>,
    pub metrics: Vec<MetricCoefficients>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCoefficients {
    pub name: String,
    pub beta: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}
