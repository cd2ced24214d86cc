//! Conjugate normal–inverse-gamma regression for reward inference.
//!
//! β | σ² ~ N(m, σ² V), σ² ~ InvGamma(a, b). The Bayesian path does not
//! instrument, so it accepts only fully compliant designs.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::{DesignLayout, FitSource, WeightScheme};
use crate::engine::{matrix_from_rows, matrix_rows};
use crate::error::{Error, Result};
use crate::frame::{Compliance, DesignClass};
use crate::linalg::{psd_factor, symmetrize, weighted_cross, SpdSolver};

pub const POSTERIOR_SCHEMA_VERSION: u32 = 1;

fn default_noise() -> f64 {
    0.01
}

/// Prior on the coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientPrior {
    /// Zero mean, scale `g·(XᵀVX)⁻¹`; `g` defaults to n.
    UnitInformation {
        #[serde(default)]
        g: Option<f64>,
    },
    /// Zero mean, precision `precision · I`.
    Isotropic { precision: f64 },
    Normal { mean: Vec<f64>, precision: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub coefficients: CoefficientPrior,
    #[serde(default = "default_noise")]
    pub noise_shape: f64,
    #[serde(default = "default_noise")]
    pub noise_rate: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            coefficients: CoefficientPrior::UnitInformation { g: None },
            noise_shape: default_noise(),
            noise_rate: default_noise(),
        }
    }
}

impl PriorSpec {
    pub fn flat() -> Self {
        PriorSpec {
            coefficients: CoefficientPrior::Isotropic { precision: 1e-12 },
            ..PriorSpec::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorModel {
    id: String,
    metric: String,
    layout: DesignLayout,
    design: DesignClass,
    weight_scheme: WeightScheme,
    n: usize,
    prior: PriorSpec,
    mean: DVector<f64>,
    /// `V`: the coefficient covariance is `σ² V`.
    scale: DMatrix<f64>,
    shape: f64,
    rate: f64,
}

/// Conjugate update of `prior` with a single-metric input.
pub fn fit_bayesian<S: FitSource + ?Sized>(input: &S, prior: &PriorSpec) -> Result<PosteriorModel> {
    let data = input.data();
    let y = input.outcomes();
    if y.k() != 1 {
        return Err(Error::Contract(format!(
            "fit_bayesian takes one metric, got {}",
            y.k()
        )));
    }
    if data.design.compliance != Compliance::Full {
        return Err(Error::Contract(
            "the Bayesian path does not instrument; it requires full compliance".into(),
        ));
    }
    if !(prior.noise_shape > 0.0 && prior.noise_rate > 0.0) {
        return Err(Error::Prior(format!(
            "noise shape and rate must be positive, got ({}, {})",
            prior.noise_shape, prior.noise_rate
        )));
    }
    let layout = &data.layout;
    let p = layout.p();
    let names = &layout.regressor_names;
    let x = &data.regressors;
    let v = data.moment_weights();
    let xtvx = weighted_cross(x, &v, x);

    let (m0, lambda0) = match &prior.coefficients {
        CoefficientPrior::UnitInformation { g } => {
            let g = g.unwrap_or(data.n_obs as f64);
            if !(g > 0.0) {
                return Err(Error::Prior(format!("unit-information g must be positive, got {g}")));
            }
            (DVector::zeros(p), &xtvx / g)
        }
        CoefficientPrior::Isotropic { precision } => {
            if !(*precision > 0.0) {
                return Err(Error::Prior(format!("prior precision must be positive, got {precision}")));
            }
            (DVector::zeros(p), DMatrix::identity(p, p) * *precision)
        }
        CoefficientPrior::Normal { mean, precision } => {
            let lambda = matrix_from_rows(precision)?;
            if mean.len() != p || lambda.nrows() != p || lambda.ncols() != p {
                return Err(Error::Prior(format!(
                    "prior dimensions ({}, {}x{}) do not match {p} coefficients",
                    mean.len(),
                    lambda.nrows(),
                    lambda.ncols()
                )));
            }
            (DVector::from_column_slice(mean), lambda)
        }
    };
    if (&lambda0 - lambda0.transpose()).abs().max() > 1e-12 * lambda0.abs().max() {
        return Err(Error::Prior("prior precision is not symmetric".into()));
    }
    SpdSolver::new(&lambda0, names, "prior precision")
        .map_err(|e| Error::Prior(format!("prior scale is not positive definite: {e}")))?;

    let wy = DVector::from_iterator(data.rows(), (0..data.rows()).map(|r| data.weights[r] * y.sums[(r, 0)]));
    let xtwy = x.tr_mul(&wy);
    let mut ytwy = 0.0;
    for r in 0..data.rows() {
        let s = y.sums[(r, 0)];
        let within = y.centered_m2.as_ref().map_or(0.0, |m| m[(r, 0)]);
        ytwy += data.weights[r] * (within + s * s / data.count(r));
    }

    let mut lambda_n = &lambda0 + &xtvx;
    symmetrize(&mut lambda_n);
    let solver = SpdSolver::new(&lambda_n, names, "posterior precision")?;
    let rhs = &lambda0 * &m0 + xtwy;
    let mean = solver.solve(&DMatrix::from_column_slice(p, 1, rhs.as_slice())).column(0).into_owned();
    let mut scale = solver.inverse();
    symmetrize(&mut scale);
    let shape = prior.noise_shape + data.n_obs as f64 / 2.0;
    let quad0 = m0.dot(&(&lambda0 * &m0));
    let quad_n = mean.dot(&(&lambda_n * &mean));
    // Guards rounding when the fit is exact.
    let rate = prior.noise_rate + 0.5 * (ytwy + quad0 - quad_n).max(0.0);

    Ok(PosteriorModel {
        id: String::new(),
        metric: y.names[0].clone(),
        layout: layout.clone(),
        design: data.design,
        weight_scheme: data.weight_scheme,
        n: data.n_obs,
        prior: prior.clone(),
        mean,
        scale,
        shape,
        rate,
    })
}

impl PosteriorModel {
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn metric(&self) -> &str {
        &self.metric
    }
    pub fn layout(&self) -> &DesignLayout {
        &self.layout
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }
    pub fn posterior_mean(&self) -> &DVector<f64> {
        &self.mean
    }
    pub fn posterior_scale(&self) -> &DMatrix<f64> {
        &self.scale
    }
    pub fn noise_shape(&self) -> f64 {
        self.shape
    }
    pub fn noise_rate(&self) -> f64 {
        self.rate
    }

    /// Marginal covariance of β (multivariate t), defined when shape > 1.
    pub fn coefficient_cov(&self) -> Option<DMatrix<f64>> {
        (self.shape > 1.0).then(|| &self.scale * (self.rate / (self.shape - 1.0)))
    }

    /// `m` joint coefficient draws (columns), deterministic given `seed`.
    pub fn sample_coefficients(&self, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.mean.len();
        let l = psd_factor(&self.scale);
        let gamma = Gamma::new(self.shape, 1.0 / self.rate).expect("positive shape and rate");
        let mut out = DMatrix::zeros(p, m);
        let mut z = DVector::zeros(p);
        for d in 0..m {
            let precision: f64 = gamma.sample(&mut rng);
            let sigma = (1.0 / precision).sqrt();
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            let draw = &self.mean + (&l * &z) * sigma;
            out.column_mut(d).copy_from(&draw);
        }
        out
    }

    pub fn to_document(&self) -> PosteriorDocument {
        PosteriorDocument {
            schema_version: POSTERIOR_SCHEMA_VERSION,
            kind: "bayesian_nig".into(),
            id: self.id.clone(),
            metric: self.metric.clone(),
            layout: self.layout.clone(),
            design_class: self.design,
            weight_scheme: self.weight_scheme,
            n: self.n,
            prior: self.prior.clone(),
            posterior_mean: self.mean.iter().copied().collect(),
            posterior_scale: matrix_rows(&self.scale),
            noise_shape: self.shape,
            noise_rate: self.rate,
        }
    }

    pub fn from_document(doc: PosteriorDocument) -> Result<Self> {
        if doc.schema_version != POSTERIOR_SCHEMA_VERSION || doc.kind != "bayesian_nig" {
            return Err(Error::Contract(format!(
                "unsupported posterior document (kind `{}`, version {})",
                doc.kind, doc.schema_version
            )));
        }
        let p = doc.layout.p();
        let scale = matrix_from_rows(&doc.posterior_scale)?;
        if doc.posterior_mean.len() != p || scale.nrows() != p || scale.ncols() != p {
            return Err(Error::Contract(format!(
                "posterior dimensions do not match {p} regressors"
            )));
        }
        if !(doc.noise_shape > 0.0 && doc.noise_rate > 0.0) {
            return Err(Error::Contract("noise shape and rate must be positive".into()));
        }
        let asym = (&scale - scale.transpose()).abs().max();
        if asym > 1e-10 * scale.abs().max().max(1e-300) {
            return Err(Error::Contract("posterior scale is not symmetric".into()));
        }
        let min_eig = nalgebra::SymmetricEigen::new(scale.clone()).eigenvalues.min();
        if min_eig < -1e-10 * scale.abs().max() {
            return Err(Error::Contract("posterior scale is not positive semidefinite".into()));
        }
        Ok(PosteriorModel {
            id: doc.id,
            metric: doc.metric,
            layout: doc.layout,
            design: doc.design_class,
            weight_scheme: doc.weight_scheme,
            n: doc.n,
            prior: doc.prior,
            mean: DVector::from_vec(doc.posterior_mean),
            scale,
            shape: doc.noise_shape,
            rate: doc.noise_rate,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDocument {
    pub schema_version: u32,
    pub kind: String,
    pub id: String,
    pub metric: String,
    pub layout: DesignLayout,
    pub design_class: DesignClass,
    pub weight_scheme: WeightScheme,
    pub n: usize,
    pub prior: PriorSpec,
    pub posterior_mean: Vec<f64>,
    pub posterior_scale: Vec<Vec<f64>>,
    pub noise_shape: f64,
    pub noise_rate: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{add_metric, CovariateSpec, ModelInput};
    use crate::engine::fit_2sls;
    use crate::frame::{classify_design, load_table_from_reader, ColumnRole, Role, Schema};

    fn input(csv: &str, covs: &[&str]) -> (ModelInput, DesignClass) {
        let mut roles = vec![ColumnRole::new(Role::IntentToTreat, "A"), ColumnRole::new(Role::Metric, "y")];
        roles.extend(covs.iter().map(|c| ColumnRole::new(Role::Covariate, *c)));
        let frame = load_table_from_reader(csv.as_bytes(), &Schema::new(roles).unwrap()).unwrap();
        let d = classify_design(&frame);
        (add_metric(&frame, &["y"], &CovariateSpec::new(covs)).unwrap().0, d)
    }

    const FIXTURE: &str = "A,x,y\n0,1.0,1.2\n0,2.0,0.7\n0,3.5,2.1\n1,0.5,3.3\n1,2.5,2.9\n1,1.5,4.4\n0,2.2,1.1\n1,3.1,3.8\n";

    #[test]
    fn flat_prior_recovers_ols() {
        let (inp, d) = input(FIXTURE, &["x"]);
        let ols = fit_2sls(&inp, d).unwrap();
        let post = fit_bayesian(&inp, &PriorSpec::flat()).unwrap();
        let diff = (post.posterior_mean() - ols.beta(0)).abs().max();
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn empty_input_returns_prior() {
        let (inp, _) = input(FIXTURE, &[]);
        let empty = inp.subset(&[false; 8]);
        let prior = PriorSpec {
            coefficients: CoefficientPrior::Normal {
                mean: vec![1.0, -2.0],
                precision: vec![vec![2.0, 0.5], vec![0.5, 1.0]],
            },
            noise_shape: 3.0,
            noise_rate: 2.0,
        };
        let post = fit_bayesian(&empty, &prior).unwrap();
        assert!((post.posterior_mean() - DVector::from_vec(vec![1.0, -2.0])).abs().max() < 1e-12);
        let lambda = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!((post.posterior_scale() * lambda - DMatrix::identity(2, 2)).abs().max() < 1e-12);
        assert_eq!((post.noise_shape(), post.noise_rate()), (3.0, 2.0));
    }

    #[test]
    fn unit_information_shrinks_toward_prior_mean() {
        let (inp, d) = input(FIXTURE, &[]);
        let ols = fit_2sls(&inp, d).unwrap();
        let post = fit_bayesian(&inp, &PriorSpec::default()).unwrap();
        // Closed form: with Λ0 = XᵀX/g and m0 = 0, mn = g/(g+1) · β_ols.
        let g = 8.0;
        for i in 0..2 {
            let expect = g / (g + 1.0) * ols.beta(0)[i];
            assert!((post.posterior_mean()[i] - expect).abs() < 1e-10);
        }
        let t = post.posterior_mean()[1];
        assert!(t > 0.0 && t < ols.beta(0)[1]);
    }

    #[test]
    fn indefinite_prior_rejected() {
        let (inp, _) = input(FIXTURE, &[]);
        let prior = PriorSpec {
            coefficients: CoefficientPrior::Normal {
                mean: vec![0.0, 0.0],
                precision: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
            },
            ..PriorSpec::default()
        };
        assert!(matches!(fit_bayesian(&inp, &prior), Err(Error::Prior(_))));
        let prior = PriorSpec {
            coefficients: CoefficientPrior::Isotropic { precision: 0.0 },
            ..PriorSpec::default()
        };
        assert!(matches!(fit_bayesian(&inp, &prior), Err(Error::Prior(_))));
    }

    #[test]
    fn noncompliant_design_rejected() {
        let csv = "A,T,y\n0,0,1\n0,0,2\n1,1,3\n1,0,4\n";
        let roles = vec![
            ColumnRole::new(Role::IntentToTreat, "A"),
            ColumnRole::new(Role::Treated, "T"),
            ColumnRole::new(Role::Metric, "y"),
        ];
        let frame = load_table_from_reader(csv.as_bytes(), &Schema::new(roles).unwrap()).unwrap();
        let (inp, _) = add_metric(&frame, &["y"], &CovariateSpec::default()).unwrap();
        assert!(matches!(fit_bayesian(&inp, &PriorSpec::flat()), Err(Error::Contract(_))));
    }

    #[test]
    fn document_round_trip_and_seeded_draws() {
        let (inp, _) = input(FIXTURE, &["x"]);
        let post = fit_bayesian(&inp, &PriorSpec::default()).unwrap().with_id("m");
        let json = serde_json::to_string(&post.to_document()).unwrap();
        let back = PosteriorModel::from_document(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.to_document(), post.to_document());
        assert_eq!(post.sample_coefficients(50, 9), back.sample_coefficients(50, 9));
        assert_ne!(post.sample_coefficients(50, 9), post.sample_coefficients(50, 10));
    }
}
