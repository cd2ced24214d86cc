//! Seeded synthetic experiments with known ground truth, and brute-force
//! oracles that share no numeric code with the fitting engine.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{
    ClusterIds, ColumnRole, CovColumn, CovariateTable, ExperimentFrame, FrameParts, IdentificationColumns, Role,
    Schema,
};

fn one() -> f64 {
    1.0
}
fn one_metric() -> usize {
    1
}
fn two_arms() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub count: usize,
    /// Intra-cluster correlation of the outcome noise.
    pub icc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensitySpec {
    Constant { p: f64 },
    /// `W = logistic(intercept + slope · x)`, clipped to [0.05, 0.95].
    Logistic { intercept: f64, slope: f64 },
}

impl Default for PropensitySpec {
    fn default() -> Self {
        PropensitySpec::Constant { p: 0.5 }
    }
}

/// Coefficients of `S = α₁T + ε₁`, `V = α₂T + θS + ε₂`, `Y = cT + β₁S + β₂V + ε₃`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MediationSpec {
    pub alpha1: f64,
    pub alpha2: f64,
    pub theta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSpec {
    pub periods: usize,
    /// Effect grows by `slope` per period: τ(t) = τ + slope·t.
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    /// Arm count including control.
    #[serde(default = "two_arms")]
    pub arms: usize,
    /// Effect of the first treated arm; arm `j` has effect `j·τ`.
    #[serde(default = "one")]
    pub tau: f64,
    #[serde(default = "one_metric")]
    pub metrics: usize,
    /// Per-metric effects, overriding `tau`.
    #[serde(default)]
    pub metric_effects: Option<Vec<f64>>,
    /// Share of encouraged units that take treatment (one-sided noncompliance).
    #[serde(default = "one")]
    pub compliance: f64,
    /// Baseline shift of never-takers, biasing as-treated comparisons.
    #[serde(default)]
    pub selection_shift: f64,
    #[serde(default)]
    pub clusters: Option<ClusterSpec>,
    #[serde(default)]
    pub propensity: PropensitySpec,
    /// Correlation of the covariate `x` with the outcome within an arm.
    #[serde(default)]
    pub rho: f64,
    /// Levels of the categorical covariate `seg`; 0 omits it.
    #[serde(default)]
    pub segments: usize,
    /// Additive effect shift per segment level.
    #[serde(default)]
    pub segment_effects: Option<Vec<f64>>,
    #[serde(default)]
    pub mediation: Option<MediationSpec>,
    #[serde(default)]
    pub time: Option<TimeSpec>,
    #[serde(default = "one")]
    pub noise_sd: f64,
    /// Student-t(3) noise rescaled to `noise_sd`.
    #[serde(default)]
    pub heavy_tails: bool,
    #[serde(default)]
    pub seed: u64,
}

impl SimConfig {
    pub fn ab(n: usize, tau: f64, seed: u64) -> Self {
        SimConfig {
            n,
            arms: 2,
            tau,
            metrics: 1,
            metric_effects: None,
            compliance: 1.0,
            selection_shift: 0.0,
            clusters: None,
            propensity: PropensitySpec::default(),
            rho: 0.0,
            segments: 0,
            segment_effects: None,
            mediation: None,
            time: None,
            noise_sd: 1.0,
            heavy_tails: false,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n < 4 {
            return bad(format!("n = {} is too small", self.n));
        }
        if self.arms < 2 {
            return bad("at least two arms are required".into());
        }
        if !(self.compliance > 0.0 && self.compliance <= 1.0) {
            return bad(format!("compliance {} is outside (0, 1]", self.compliance));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return bad(format!("rho {} is outside (-1, 1)", self.rho));
        }
        if !(self.noise_sd > 0.0) {
            return bad("noise_sd must be positive".into());
        }
        if self.metrics == 0 {
            return bad("at least one metric is required".into());
        }
        if let Some(e) = &self.metric_effects {
            if e.len() != self.metrics {
                return bad(format!("{} metric effects for {} metrics", e.len(), self.metrics));
            }
        }
        if let Some(e) = &self.segment_effects {
            if e.len() != self.segments {
                return bad(format!("{} segment effects for {} segments", e.len(), self.segments));
            }
        }
        if let Some(c) = self.clusters {
            if !(0.0..1.0).contains(&c.icc) {
                return bad(format!("icc {} is outside [0, 1)", c.icc));
            }
            if c.count < 2 {
                return bad("a clustered design needs at least two clusters".into());
            }
            if c.count > self.n {
                return bad(format!("{} clusters for {} rows", c.count, self.n));
            }
            if self.time.is_some() {
                return bad("time-dynamic designs already cluster by unit".into());
            }
        }
        match self.propensity {
            PropensitySpec::Constant { p } if !(p > 0.0 && p < 1.0) => {
                return bad(format!("propensity {p} is outside (0, 1)"))
            }
            PropensitySpec::Logistic { .. } if self.arms > 2 || self.clusters.is_some() || self.time.is_some() => {
                return bad("covariate-dependent propensity needs a binary, unit-randomized design".into())
            }
            _ => {}
        }
        if let Some(t) = self.time {
            if t.periods < 2 || self.n % t.periods != 0 {
                return bad(format!("n = {} is not a multiple of {} periods", self.n, t.periods));
            }
        }
        if self.mediation.is_some() && (self.arms != 2 || self.compliance < 1.0) {
            return bad("mediation designs are binary with full compliance".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// Effect of the first treated arm per metric (at t = 0, averaged over segments).
    pub metric_effects: Vec<f64>,
    pub compliance: f64,
    pub mediation: Option<MediationSpec>,
    pub time_slope: Option<f64>,
    pub segment_effects: Vec<f64>,
}

/// Potential outcomes of the first treated arm against control.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub metric: String,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

#[derive(Debug, Clone)]
enum SimColumn {
    Int(Vec<i64>),
    Num(Vec<f64>),
    Cat(Vec<u32>, Vec<String>),
}

#[derive(Debug, Clone)]
pub struct SimData {
    pub frame: ExperimentFrame,
    pub schema: Schema,
    pub truth: Truth,
    pub latent: Vec<Latent>,
    columns: Vec<(String, SimColumn)>,
}

fn draw_noise(rng: &mut ChaCha8Rng, heavy: bool) -> f64 {
    if heavy {
        // Var(t₃) = 3.
        let t: f64 = StudentT::new(3.0).unwrap().sample(rng);
        t / 3f64.sqrt()
    } else {
        StandardNormal.sample(rng)
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Generates a seeded experiment matching `config`.
pub fn generate(config: &SimConfig) -> Result<SimData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n;
    let periods = config.time.map_or(1, |t| t.periods);
    let units = n / periods;
    let sigma = config.noise_sd;
    let rho = config.rho;
    let icc = config.clusters.map_or(0.0, |c| c.icc);

    // Randomization unit: cluster, unit (time designs) or row.
    let rand_units = match (config.clusters, config.time) {
        (Some(c), _) => c.count,
        _ => units,
    };
    let unit_of_row = |i: usize| i / periods;
    let rand_of_unit = |u: usize| match config.clusters {
        Some(c) => u * c.count / units,
        None => u,
    };

    let x: Vec<f64> = (0..units).map(|_| StandardNormal.sample(&mut rng)).collect();
    let seg: Vec<u32> = (0..units)
        .map(|_| if config.segments > 0 { rng.random_range(0..config.segments as u32) } else { 0 })
        .collect();
    let mut w_unit = vec![0.0; units];
    let mut a_rand = vec![0i64; rand_units];
    match config.propensity {
        PropensitySpec::Logistic { intercept, slope } => {
            for u in 0..units {
                let w = logistic(intercept + slope * x[u]).clamp(0.05, 0.95);
                w_unit[u] = w;
                a_rand[u] = i64::from(rng.random::<f64>() < w);
            }
        }
        PropensitySpec::Constant { p } => {
            for a in a_rand.iter_mut() {
                *a = if config.arms == 2 {
                    i64::from(rng.random::<f64>() < p)
                } else {
                    rng.random_range(0..config.arms as i64)
                };
            }
            for u in 0..units {
                w_unit[u] = p;
            }
        }
    }
    let a_unit: Vec<i64> = (0..units).map(|u| a_rand[rand_of_unit(u)]).collect();
    // Multi-arm W is the probability of the realized arm.
    if config.arms > 2 {
        w_unit.iter_mut().for_each(|w| *w = 1.0 / config.arms as f64);
    }
    let complier: Vec<bool> = (0..units).map(|_| rng.random::<f64>() < config.compliance).collect();
    let t_unit: Vec<i64> = (0..units).map(|u| if complier[u] { a_unit[u] } else { 0 }).collect();
    let cluster_effect: Vec<f64> = (0..rand_units).map(|_| StandardNormal.sample(&mut rng)).collect();
    let unit_effect: Vec<f64> = if config.time.is_some() {
        (0..units).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 0.5 * z }).collect()
    } else {
        Vec::new()
    };

    let seg_effects = config
        .segment_effects
        .clone()
        .unwrap_or_else(|| vec![0.0; config.segments]);
    let metric_effects = config
        .metric_effects
        .clone()
        .unwrap_or_else(|| vec![config.tau; config.metrics]);
    let slope = config.time.map_or(0.0, |t| t.slope);

    let mut columns: Vec<(String, SimColumn)> = Vec::new();
    let mut roles = vec![ColumnRole::new(Role::IntentToTreat, "A")];
    let a_rows: Vec<i64> = (0..n).map(|i| a_unit[unit_of_row(i)]).collect();
    let t_rows: Vec<i64> = (0..n).map(|i| t_unit[unit_of_row(i)]).collect();
    let w_rows: Vec<f64> = (0..n).map(|i| w_unit[unit_of_row(i)]).collect();
    columns.push(("A".into(), SimColumn::Int(a_rows.clone())));
    if config.compliance < 1.0 {
        roles.push(ColumnRole::new(Role::Treated, "T"));
        columns.push(("T".into(), SimColumn::Int(t_rows.clone())));
    }
    roles.push(ColumnRole::new(Role::Propensity, "W"));
    columns.push(("W".into(), SimColumn::Num(w_rows.clone())));
    let cluster_rows: Option<Vec<i64>> = match (config.clusters, config.time) {
        (Some(_), _) => Some((0..n).map(|i| rand_of_unit(unit_of_row(i)) as i64).collect()),
        (None, Some(_)) => Some((0..n).map(|i| unit_of_row(i) as i64).collect()),
        _ => None,
    };
    if let Some(c) = &cluster_rows {
        roles.push(ColumnRole::new(Role::Cluster, "C"));
        columns.push(("C".into(), SimColumn::Int(c.clone())));
    }
    let x_rows: Vec<f64> = (0..n).map(|i| x[unit_of_row(i)]).collect();
    roles.push(ColumnRole::new(Role::Covariate, "x"));
    columns.push(("x".into(), SimColumn::Num(x_rows.clone())));
    let seg_levels: Vec<String> = (0..config.segments).map(|s| format!("s{s:02}")).collect();
    if config.segments > 0 {
        roles.push(ColumnRole::new(Role::Covariate, "seg"));
        let codes: Vec<u32> = (0..n).map(|i| seg[unit_of_row(i)]).collect();
        columns.push(("seg".into(), SimColumn::Cat(codes, seg_levels.clone())));
    }
    if config.time.is_some() {
        roles.push(ColumnRole::new(Role::Time, "t"));
        roles.push(ColumnRole::new(Role::UnitId, "unit"));
        columns.push(("t".into(), SimColumn::Num((0..n).map(|i| (i % periods) as f64).collect())));
        columns.push(("unit".into(), SimColumn::Int((0..n).map(|i| unit_of_row(i) as i64).collect())));
    }

    let mut latent = Vec::new();
    let mut metrics: Vec<(String, Vec<f64>)> = Vec::new();
    if let Some(m) = config.mediation {
        let (mut s, mut v, mut y) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut y0 = vec![0.0; n];
        let mut y1 = vec![0.0; n];
        for i in 0..n {
            let xi = x_rows[i];
            let e1 = sigma * draw_noise(&mut rng, config.heavy_tails);
            let e2 = sigma * draw_noise(&mut rng, config.heavy_tails);
            let e3 = sigma * draw_noise(&mut rng, config.heavy_tails);
            let outcome = |t: f64| {
                let si = m.alpha1 * t + 0.5 * xi + e1;
                let vi = m.alpha2 * t + m.theta * si - 0.3 * xi + e2;
                (si, vi, m.c * t + m.beta1 * si + m.beta2 * vi + 0.2 * xi + e3)
            };
            let t = t_rows[i] as f64;
            (s[i], v[i], y[i]) = outcome(t);
            y0[i] = outcome(0.0).2;
            y1[i] = outcome(1.0).2;
        }
        latent.push(Latent { metric: "Y".into(), y0, y1 });
        metrics.push(("S".into(), s));
        metrics.push(("V".into(), v));
        metrics.push(("Y".into(), y));
    } else {
        let base_sd = (1.0 - rho * rho).sqrt();
        for (k, tau_m) in metric_effects.iter().enumerate() {
            let name = if config.metrics == 1 { "y".to_string() } else { format!("y{}", k + 1) };
            let mut y = vec![0.0; n];
            let mut y0 = vec![0.0; n];
            let mut y1 = vec![0.0; n];
            for i in 0..n {
                let u = unit_of_row(i);
                let noise = draw_noise(&mut rng, config.heavy_tails);
                let mut resid = if config.clusters.is_some() {
                    icc.sqrt() * cluster_effect[rand_of_unit(u)] + (1.0 - icc).sqrt() * noise
                } else {
                    noise
                };
                resid *= base_sd;
                let mut base = k as f64 + sigma * (rho * x[u] + resid) + 0.2 * seg[u] as f64;
                if !unit_effect.is_empty() {
                    base += unit_effect[u];
                }
                if !complier[u] {
                    base += config.selection_shift;
                }
                let t_idx = (i % periods) as f64;
                let effect = |arm: i64| {
                    if arm == 0 {
                        0.0
                    } else {
                        arm as f64 * tau_m
                            + seg_effects.get(seg[u] as usize).copied().unwrap_or(0.0)
                            + slope * t_idx
                    }
                };
                y0[i] = base;
                y1[i] = base + effect(1);
                y[i] = base + effect(t_rows[i]);
            }
            latent.push(Latent { metric: name.clone(), y0, y1 });
            metrics.push((name, y));
        }
    }
    for (name, v) in &metrics {
        roles.push(ColumnRole::new(Role::Metric, name.clone()));
        columns.push((name.clone(), SimColumn::Num(v.clone())));
    }
    let schema = Schema::new(roles)?;

    let mut cov_names = vec!["x".to_string()];
    let mut cov_cols = vec![CovColumn::Numeric(x_rows)];
    if config.segments > 0 {
        cov_names.push("seg".into());
        cov_cols.push(CovColumn::Categorical {
            codes: (0..n).map(|i| seg[unit_of_row(i)]).collect(),
            levels: seg_levels,
        });
    }
    if config.time.is_some() {
        cov_names.push("t".into());
        cov_cols.push(CovColumn::Numeric((0..n).map(|i| (i % periods) as f64).collect()));
    }
    let clusters = cluster_rows.as_ref().map(|c| ClusterIds::Labels {
        codes: c.iter().map(|x| *x as u32).collect(),
        count: c.iter().max().map_or(0, |m| *m as usize + 1),
    });
    let frame = ExperimentFrame::new(FrameParts {
        ids: IdentificationColumns {
            assignment: Some(a_rows),
            treated: (config.compliance < 1.0).then_some(t_rows),
            propensity: Some(w_rows),
            instrument: None,
            clusters,
        },
        cluster_bound: cluster_rows.is_some(),
        covariates: CovariateTable {
            names: cov_names,
            columns: cov_cols,
        },
        metrics,
        time_column: config.time.map(|_| "t".to_string()),
        unit_ids: config.time.map(|_| (0..n).map(|i| unit_of_row(i) as u32).collect()),
        log: Vec::new(),
    })?;

    Ok(SimData {
        frame,
        schema,
        truth: Truth {
            metric_effects,
            compliance: config.compliance,
            mediation: config.mediation,
            time_slope: config.time.map(|t| t.slope),
            segment_effects: seg_effects,
        },
        latent,
        columns,
    })
}

impl SimData {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.columns.iter().map(|(n, _)| n.as_str()))?;
        let n = self.frame.n();
        let mut record: Vec<String> = vec![String::new(); self.columns.len()];
        for i in 0..n {
            for (slot, (_, col)) in record.iter_mut().zip(&self.columns) {
                slot.clear();
                use std::fmt::Write as _;
                match col {
                    SimColumn::Int(v) => write!(slot, "{}", v[i]).unwrap(),
                    SimColumn::Num(v) => write!(slot, "{}", v[i]).unwrap(),
                    SimColumn::Cat(codes, levels) => slot.push_str(&levels[codes[i] as usize]),
                }
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        self.write_csv(std::io::BufWriter::with_capacity(1 << 20, file))
    }
}

/// Two-sample difference in means between treated and control rows of the
/// segment, with a pooled-variance standard error.
pub fn oracle_diff_in_means(frame: &ExperimentFrame, metric: &str, segment: Option<&[bool]>) -> Result<(f64, f64)> {
    let y = frame
        .metric(metric)
        .ok_or_else(|| Error::Oracle(format!("metric `{metric}` is not in the frame")))?;
    let control = frame.arms()[0];
    let (mut n0, mut s0, mut n1, mut s1) = (0.0, 0.0, 0.0, 0.0);
    for (i, (yi, t)) in y.iter().zip(frame.treated()).enumerate() {
        if segment.is_some_and(|m| !m[i]) {
            continue;
        }
        if *t == control {
            n0 += 1.0;
            s0 += yi;
        } else {
            n1 += 1.0;
            s1 += yi;
        }
    }
    if n0 < 1.0 || n1 < 1.0 {
        return Err(Error::Oracle("segment does not contain both arms".into()));
    }
    let (m0, m1) = (s0 / n0, s1 / n1);
    let (mut q0, mut q1) = (0.0, 0.0);
    for (i, (yi, t)) in y.iter().zip(frame.treated()).enumerate() {
        if segment.is_some_and(|m| !m[i]) {
            continue;
        }
        if *t == control {
            q0 += (yi - m0) * (yi - m0);
        } else {
            q1 += (yi - m1) * (yi - m1);
        }
    }
    let se = if n0 + n1 > 2.0 {
        let pooled = (q0 + q1) / (n0 + n1 - 2.0);
        (pooled * (1.0 / n0 + 1.0 / n1)).sqrt()
    } else {
        f64::NAN
    };
    Ok((m1 - m0, se))
}

/// Wald ratio `(ȳ_{Z=1} − ȳ_{Z=0}) / (T̄_{Z=1} − T̄_{Z=0})`.
pub fn oracle_wald(frame: &ExperimentFrame, metric: &str) -> Result<f64> {
    let y = frame
        .metric(metric)
        .ok_or_else(|| Error::Oracle(format!("metric `{metric}` is not in the frame")))?;
    let control = frame.arms()[0];
    let mut sums = [[0.0f64; 3]; 2];
    for ((yi, t), z) in y.iter().zip(frame.treated()).zip(frame.instrument()) {
        let g = usize::from(*z != control);
        sums[g][0] += 1.0;
        sums[g][1] += yi;
        sums[g][2] += f64::from(u8::from(*t != control));
    }
    if sums[0][0] == 0.0 || sums[1][0] == 0.0 {
        return Err(Error::Oracle("instrument is constant".into()));
    }
    let dy = sums[1][1] / sums[1][0] - sums[0][1] / sums[0][0];
    let dt = sums[1][2] / sums[1][0] - sums[0][2] / sums[0][0];
    if dt == 0.0 {
        return Err(Error::Oracle("zero first-stage difference".into()));
    }
    Ok(dy / dt)
}
