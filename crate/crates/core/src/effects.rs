//! Average, conditional and time-dynamic effects via delta vectors, with
//! fixed-n and anytime-valid inference, and projection onto hypothetical
//! segment mixes.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::design::{ContextValue, FeatureEncoding};
use crate::engine::FittedLinearModel;
use crate::error::{Error, Result};
use crate::frame::{CovColumn, LogEntry};
use crate::predicate::SegmentPredicate;

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Mixture variance of the confidence sequence. `None` uses the squared
    /// standard error of the estimate at hand.
    #[serde(default)]
    pub phi2: Option<f64>,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            alpha: default_alpha(),
            phi2: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anytime {
    pub p_anytime: f64,
    pub cs: (f64, f64),
}

/// Gaussian-mixture confidence sequence and anytime p-value at one look.
pub fn anytime_inference(tau: f64, se: f64, alpha: f64, phi2: f64) -> Result<Anytime> {
    if !(se > 0.0) || !se.is_finite() {
        return Err(Error::Degenerate(format!("standard error {se} is not positive")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha {alpha} is outside (0, 1)")));
    }
    if !(phi2 > 0.0) || !phi2.is_finite() {
        return Err(Error::Domain(format!("mixture variance {phi2} is not positive")));
    }
    let s2 = se * se;
    let log_lambda = 0.5 * (s2 / (s2 + phi2)).ln() + tau * tau * phi2 / (2.0 * s2 * (s2 + phi2));
    let p_anytime = (-log_lambda).exp().clamp(f64::MIN_POSITIVE, 1.0);
    let radius = (s2 * (s2 + phi2) / phi2 * ((s2 + phi2) / (alpha * alpha * s2)).ln()).sqrt();
    Ok(Anytime {
        p_anytime,
        cs: (tau - radius, tau + radius),
    })
}

/// Two-sided normal interval and p-value.
pub fn fixed_inference(tau: f64, se: f64, alpha: f64) -> ((f64, f64), f64) {
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let p = if se > 0.0 {
        erfc((tau / se).abs() / std::f64::consts::SQRT_2).clamp(f64::MIN_POSITIVE, 1.0)
    } else if tau == 0.0 {
        1.0
    } else {
        f64::MIN_POSITIVE
    };
    ((tau - z * se, tau + z * se), p)
}

/// Contrast over model coefficients whose inner product with β̂ is an effect.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaVector {
    pub contrast: DVector<f64>,
    pub segment: String,
    pub n_segment: usize,
    /// Label of the treated arm the contrast compares against control.
    pub arm: i64,
}

/// Rows of the model's data selected by a segment, packed as bits.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSet(Vec<u64>);

impl RowSet {
    fn from_mask(mask: &[bool]) -> Self {
        let mut bits = vec![0u64; mask.len().div_ceil(64)];
        for (i, m) in mask.iter().enumerate() {
            if *m {
                bits[i / 64] |= 1 << (i % 64);
            }
        }
        RowSet(bits)
    }
    fn all(rows: usize) -> Self {
        RowSet::from_mask(&vec![true; rows])
    }
    fn intersects(&self, other: &RowSet) -> bool {
        self.0.iter().zip(&other.0).any(|(a, b)| a & b != 0)
    }
}

/// What an estimate needs for covariance-aware recombination.
#[derive(Debug, Clone, PartialEq)]
struct EffectBasis {
    contrast: DVector<f64>,
    cov: Arc<DMatrix<f64>>,
    rows: RowSet,
    predicate: Option<SegmentPredicate>,
    options: InferenceOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub metric: String,
    pub segment: String,
    pub arm: i64,
    pub tau: f64,
    pub se: f64,
    pub ci_fixed: (f64, f64),
    pub p_fixed: f64,
    pub p_anytime: f64,
    pub cs: (f64, f64),
    pub n_segment: usize,
    #[serde(default)]
    pub flags: Vec<String>,
    #[serde(default)]
    pub model_id: String,
    #[serde(skip)]
    basis: Option<Arc<EffectBasis>>,
}

impl EffectEstimate {
    /// Builds an estimate from a point estimate and standard error.
    pub fn from_parts(
        metric: &str,
        segment: &str,
        arm: i64,
        tau: f64,
        se: f64,
        n_segment: usize,
        options: InferenceOptions,
    ) -> Result<Self> {
        let (ci_fixed, p_fixed) = fixed_inference(tau, se, options.alpha);
        let phi2 = options.phi2.unwrap_or(se * se);
        let any = anytime_inference(tau, se, options.alpha, phi2)?;
        Ok(EffectEstimate {
            metric: metric.to_string(),
            segment: segment.to_string(),
            arm,
            tau,
            se,
            ci_fixed,
            p_fixed,
            p_anytime: any.p_anytime,
            cs: any.cs,
            n_segment,
            flags: Vec::new(),
            model_id: String::new(),
            basis: None,
        })
    }

    pub fn contrast(&self) -> Option<&DVector<f64>> {
        self.basis.as_ref().map(|b| &b.contrast)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("estimates serialize")
    }
}

const FULL_SAMPLE: &str = "all";

fn model_cov(model: &FittedLinearModel, metric: &str) -> Result<(usize, Arc<DMatrix<f64>>)> {
    let j = model.metric_index(metric)?;
    Ok((j, Arc::new(model.cov(j).clone())))
}

fn estimand_flags(model: &FittedLinearModel) -> Vec<String> {
    match model.estimand() {
        "ATE" => Vec::new(),
        e => vec![format!("estimand:{e}")],
    }
}

/// Delta vectors for every treated arm over a segment (`None` = full sample).
pub fn delta_vectors(model: &FittedLinearModel, segment: Option<&SegmentPredicate>) -> Result<Vec<DeltaVector>> {
    Ok(segment_deltas(model, segment)?.0)
}

fn segment_deltas(
    model: &FittedLinearModel,
    segment: Option<&SegmentPredicate>,
) -> Result<(Vec<DeltaVector>, RowSet)> {
    let data = model.data();
    let layout = model.layout();
    let (mask, label) = match segment {
        Some(p) => (Some(p.evaluate(&data.covariates)?), p.to_string()),
        None => (None, FULL_SAMPLE.to_string()),
    };
    let (fx_mean, total) = data.feature_mean(mask.as_deref());
    if total == 0.0 {
        return Err(Error::EmptySegment(
            segment.map_or(FULL_SAMPLE.to_string(), |p| p.source().to_string()),
        ));
    }
    let rows = match &mask {
        Some(m) => RowSet::from_mask(m),
        None => RowSet::all(data.rows()),
    };
    let deltas = (0..layout.treated_arms())
        .map(|j| DeltaVector {
            contrast: layout.effect_contrast(j, &fx_mean),
            segment: label.clone(),
            n_segment: total.round() as usize,
            arm: layout.arms[j + 1],
        })
        .collect();
    Ok((deltas, rows))
}

fn estimate_from_delta(
    model: &FittedLinearModel,
    metric: &str,
    j: usize,
    cov: &Arc<DMatrix<f64>>,
    delta: DeltaVector,
    rows: RowSet,
    predicate: Option<SegmentPredicate>,
    options: InferenceOptions,
) -> Result<EffectEstimate> {
    let beta = model.beta(j);
    let tau = delta.contrast.dot(&beta);
    let var = delta.contrast.dot(&(cov.as_ref() * &delta.contrast));
    let se = var.max(0.0).sqrt();
    let mut e = EffectEstimate::from_parts(metric, &delta.segment, delta.arm, tau, se, delta.n_segment, options)?;
    e.flags = estimand_flags(model);
    e.model_id = model.id().to_string();
    e.basis = Some(Arc::new(EffectBasis {
        contrast: delta.contrast,
        cov: Arc::clone(cov),
        rows,
        predicate,
        options,
    }));
    Ok(e)
}

/// Effects of each treated arm for every segment; an empty list means the
/// full-sample average effect. Output follows input order, arms innermost.
pub fn infer_effect(
    model: &FittedLinearModel,
    metric: &str,
    condition_on: &[SegmentPredicate],
    options: InferenceOptions,
) -> Result<Vec<EffectEstimate>> {
    let (j, cov) = model_cov(model, metric)?;
    let segments: Vec<Option<&SegmentPredicate>> = if condition_on.is_empty() {
        vec![None]
    } else {
        condition_on.iter().map(Some).collect()
    };
    let mut out = Vec::new();
    for seg in segments {
        let (deltas, rows) = segment_deltas(model, seg)?;
        for d in deltas {
            out.push(estimate_from_delta(model, metric, j, &cov, d, rows.clone(), seg.cloned(), options)?);
        }
    }
    Ok(out)
}

/// τ(t) along a grid of time values, other features at their sample means.
/// Grid points outside the observed time range are flagged `extrapolation`.
pub fn time_dynamic_effects(
    model: &FittedLinearModel,
    metric: &str,
    time_column: &str,
    grid: &[f64],
    options: InferenceOptions,
    log: &mut Vec<LogEntry>,
) -> Result<Vec<EffectEstimate>> {
    let (j, cov) = model_cov(model, metric)?;
    let data = model.data();
    let layout = model.layout();
    let (offset, feature) = layout.encoder.offset(time_column).ok_or_else(|| {
        Error::Contract(format!("time column `{time_column}` is not a model covariate"))
    })?;
    if !matches!(feature.encoding, FeatureEncoding::Numeric { .. }) {
        return Err(Error::Contract(format!("time column `{time_column}` must be numeric")));
    }
    let (lo, hi) = match data.covariates.get(time_column) {
        Some(CovColumn::Numeric(v)) => v
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x))),
        _ => return Err(Error::Contract(format!("time column `{time_column}` must be numeric"))),
    };
    let (fx_mean, total) = data.feature_mean(None);
    let width = feature.names.len();
    let mut out = Vec::with_capacity(grid.len());
    for &t in grid {
        let mut fx = fx_mean.clone();
        layout
            .encoder
            .encode_value(feature, &ContextValue::Num(t), &mut fx[offset..offset + width])?;
        for arm in 0..layout.treated_arms() {
            let delta = DeltaVector {
                contrast: layout.effect_contrast(arm, &fx),
                segment: format!("{time_column} = {t}"),
                n_segment: total.round() as usize,
                arm: layout.arms[arm + 1],
            };
            let mut e = estimate_from_delta(model, metric, j, &cov, delta, RowSet::all(data.rows()), None, options)?;
            if t < lo || t > hi {
                e.flags.push("extrapolation".into());
                log.push(LogEntry::warn(
                    "extrapolation",
                    Some(time_column),
                    format!("grid value {t} is outside the observed range [{lo}, {hi}]"),
                ));
            }
            out.push(e);
        }
    }
    Ok(out)
}

/// Target mix of segments for a projected effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProjectionSpec {
    pub segment_weights: BTreeMap<String, f64>,
}

impl ProjectionSpec {
    pub fn new<S: AsRef<str>>(weights: &[(S, f64)]) -> Self {
        ProjectionSpec {
            segment_weights: weights.iter().map(|(s, w)| (s.as_ref().to_string(), *w)).collect(),
        }
    }
}

/// Reweights segment effects. The variance uses the combined contrast, so
/// the covariance between segments sharing coefficients is accounted for.
pub fn project_effects(effects: &[EffectEstimate], spec: &ProjectionSpec) -> Result<EffectEstimate> {
    if spec.segment_weights.is_empty() {
        return Err(Error::Spec("projection has no segments".into()));
    }
    let total: f64 = spec.segment_weights.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Spec(format!("projection weights sum to {total}, not 1")));
    }
    if let Some((s, w)) = spec.segment_weights.iter().find(|(_, w)| !(0.0..=1.0).contains(*w)) {
        return Err(Error::Spec(format!("weight {w} for `{s}` is outside [0, 1]")));
    }
    let mut chosen: Vec<(&EffectEstimate, &EffectBasis, f64)> = Vec::new();
    for (source, w) in &spec.segment_weights {
        let canonical = SegmentPredicate::parse(source)?.to_string();
        let matches: Vec<&EffectEstimate> = effects
            .iter()
            .filter(|e| {
                e.basis
                    .as_ref()
                    .and_then(|b| b.predicate.as_ref())
                    .is_some_and(|p| p.to_string() == canonical)
            })
            .collect();
        match matches.as_slice() {
            [e] => chosen.push((e, e.basis.as_ref().unwrap(), *w)),
            [] => {
                return Err(Error::Contract(format!(
                    "no segment estimate matches projection predicate `{source}`"
                )))
            }
            _ => {
                return Err(Error::Contract(format!(
                    "projection predicate `{source}` matches {} estimates; filter to one metric and arm",
                    matches.len()
                )))
            }
        }
    }
    let (first, first_basis, _) = chosen[0];
    for (e, b, _) in &chosen[1..] {
        if e.metric != first.metric || e.arm != first.arm || e.model_id != first.model_id || b.cov != first_basis.cov
        {
            return Err(Error::Contract(
                "projected estimates must come from one model, metric and arm".into(),
            ));
        }
    }
    for a in 0..chosen.len() {
        for b in a + 1..chosen.len() {
            if chosen[a].1.rows.intersects(&chosen[b].1.rows) {
                return Err(Error::Spec(format!(
                    "projection segments `{}` and `{}` overlap",
                    chosen[a].0.segment, chosen[b].0.segment
                )));
            }
        }
    }
    let mut d = DVector::zeros(first_basis.contrast.len());
    let mut tau = 0.0;
    let mut n = 0;
    for (e, b, w) in &chosen {
        d += &b.contrast * *w;
        tau += w * e.tau;
        n += e.n_segment;
    }
    let se = d.dot(&(first_basis.cov.as_ref() * &d)).max(0.0).sqrt();
    let label = spec
        .segment_weights
        .iter()
        .map(|(s, w)| format!("{w} * ({s})"))
        .collect::<Vec<_>>()
        .join(" + ");
    let mut out = EffectEstimate::from_parts(&first.metric, &label, first.arm, tau, se, n, first_basis.options)?;
    out.flags = first.flags.clone();
    out.flags.push("projection".into());
    out.model_id = first.model_id.clone();
    out.basis = Some(Arc::new(EffectBasis {
        contrast: d,
        cov: Arc::clone(&first_basis.cov),
        rows: RowSet(Vec::new()),
        predicate: None,
        options: first_basis.options,
    }));
    Ok(out)
}
