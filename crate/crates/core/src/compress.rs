//! Frequency-weight compression.
//!
//! Rows that share treatment, instrument, weight, cluster (when clustering
//! matters) and raw covariate values are collapsed into one group carrying its
//! count, per-metric sums and within-group centered second moments. Cross
//! moments, coefficients and both sandwich forms are exact functions of these
//! statistics, so fits on the compressed design reproduce the dense ones.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::design::{
    design_weights, CovariateSpec, DesignData, DesignLayout, FeatureEncoder, FitSource, InputMetadata,
    ModelInput, OutcomeBlock,
};
use crate::error::{Error, Result};
use crate::frame::{
    arm_levels, design_from_parts, is_missing, parse_label, parse_number, sort_levels, BoundHeader,
    ClusterIds, CovColumn, CovValue, CovariateTable, CovarianceStructure, DesignClass, LogEntry, Schema,
};

/// Multiplicative word hasher for integer keys.
#[derive(Default, Clone, Copy)]
pub(crate) struct WordHasher(u64);

impl Hasher for WordHasher {
    fn finish(&self) -> u64 {
        self.0
    }
    fn write(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            self.write_u64(u64::from_le_bytes(buf));
        }
    }
    fn write_u64(&mut self, x: u64) {
        self.0 = (self.0.rotate_left(5) ^ x).wrapping_mul(0x51_7c_c1_b7_27_22_0a_95);
    }
    fn write_usize(&mut self, x: usize) {
        self.write_u64(x as u64);
    }
}

pub(crate) type WordMap<K, V> = HashMap<K, V, BuildHasherDefault<WordHasher>>;

/// Per-group running statistics keyed by an integer signature.
#[derive(Debug)]
pub(crate) struct GroupAccumulator {
    index: WordMap<Box<[u64]>, u32>,
    k: usize,
    pub first_row: Vec<usize>,
    pub counts: Vec<f64>,
    sums: Vec<f64>,
    means: Vec<f64>,
    m2: Vec<f64>,
}

impl GroupAccumulator {
    pub fn new(k: usize) -> Self {
        GroupAccumulator {
            index: WordMap::default(),
            k,
            first_row: Vec::new(),
            counts: Vec::new(),
            sums: Vec::new(),
            means: Vec::new(),
            m2: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn push(&mut self, key: &[u64], row: usize, y: &[f64]) -> usize {
        let g = match self.index.get(key) {
            Some(g) => *g as usize,
            None => {
                let g = self.counts.len();
                self.index.insert(key.into(), g as u32);
                self.first_row.push(row);
                self.counts.push(0.0);
                self.sums.extend(std::iter::repeat_n(0.0, self.k));
                self.means.extend(std::iter::repeat_n(0.0, self.k));
                self.m2.extend(std::iter::repeat_n(0.0, self.k));
                g
            }
        };
        self.counts[g] += 1.0;
        let c = self.counts[g];
        let base = g * self.k;
        for (j, v) in y.iter().enumerate() {
            self.sums[base + j] += v;
            let d = v - self.means[base + j];
            self.means[base + j] += d / c;
            self.m2[base + j] += d * (v - self.means[base + j]);
        }
        g
    }

    /// Merges groups that map to the same new id; `target[g]` is the new id.
    fn merge(&self, target: &[usize], groups: usize) -> GroupStats {
        let k = self.k;
        let mut out = GroupStats {
            counts: vec![0.0; groups],
            sums: vec![0.0; groups * k],
            means: vec![0.0; groups * k],
            m2: vec![0.0; groups * k],
            representative: vec![usize::MAX; groups],
        };
        for g in 0..self.len() {
            let t = target[g];
            if out.representative[t] == usize::MAX {
                out.representative[t] = g;
            }
            let (na, nb) = (out.counts[t], self.counts[g]);
            let n = na + nb;
            for j in 0..k {
                let (ia, ib) = (t * k + j, g * k + j);
                let delta = self.means[ib] - out.means[ia];
                out.m2[ia] += self.m2[ib] + delta * delta * na * nb / n;
                out.means[ia] += delta * nb / n;
                out.sums[ia] += self.sums[ib];
            }
            out.counts[t] = n;
        }
        out
    }

    fn into_stats(self) -> GroupStats {
        let representative = (0..self.len()).collect();
        GroupStats {
            counts: self.counts,
            sums: self.sums,
            means: self.means,
            m2: self.m2,
            representative,
        }
    }
}

struct GroupStats {
    counts: Vec<f64>,
    sums: Vec<f64>,
    #[allow(dead_code)]
    means: Vec<f64>,
    m2: Vec<f64>,
    /// Index of one source group (or row) per output group.
    representative: Vec<usize>,
}

impl GroupStats {
    fn outcome_block(&self, names: Vec<String>) -> OutcomeBlock {
        let k = names.len();
        let g = self.counts.len();
        OutcomeBlock {
            names,
            sums: DMatrix::from_fn(g, k, |r, j| self.sums[r * k + j]),
            centered_m2: Some(DMatrix::from_fn(g, k, |r, j| self.m2[r * k + j])),
        }
    }
}

/// Deduplicated design with frequency weights and per-group outcome moments.
#[derive(Debug, Clone)]
pub struct CompressedDesign {
    pub data: Arc<DesignData>,
    pub y: Arc<OutcomeBlock>,
}

impl FitSource for CompressedDesign {
    fn data(&self) -> &Arc<DesignData> {
        &self.data
    }
    fn outcomes(&self) -> &Arc<OutcomeBlock> {
        &self.y
    }
}

impl CompressedDesign {
    pub fn unique_rows(&self) -> usize {
        self.data.rows()
    }
    pub fn frequency_weights(&self) -> &DVector<f64> {
        self.data.counts.as_ref().expect("compressed designs carry counts")
    }
    pub fn n(&self) -> usize {
        self.data.n_obs
    }
    /// Observations per stored row.
    pub fn ratio(&self) -> f64 {
        self.data.n_obs as f64 / self.unique_rows() as f64
    }

    /// Single-metric view sharing the grouped design.
    pub fn select_metric(&self, name: &str) -> Result<CompressedDesign> {
        let j = self
            .y
            .index(name)
            .ok_or_else(|| Error::Contract(format!("metric `{name}` is not in this design")))?;
        Ok(CompressedDesign {
            data: Arc::clone(&self.data),
            y: Arc::new(self.y.select(j)),
        })
    }
}

fn cov_key(col: &CovColumn, row: usize) -> u64 {
    match col.value(row) {
        CovValue::Num(x) => x.to_bits(),
        CovValue::Str(_) => match col {
            CovColumn::Categorical { codes, .. } => codes[row] as u64,
            CovColumn::Numeric(_) => unreachable!(),
        },
    }
}

/// Compresses a dense input.
pub fn compress_design(input: &ModelInput) -> CompressedDesign {
    let d = &input.data;
    let rows = d.rows();
    let p = d.layout.p();
    let k = input.y.k();
    let clustered = d.design.covariance_structure == CovarianceStructure::BlockDiagonal;
    let cluster_codes = match &d.clusters {
        ClusterIds::Labels { codes, .. } if clustered => Some(codes),
        _ => None,
    };
    let mut acc = GroupAccumulator::new(k);
    let mut key = Vec::with_capacity(2 * p + 2 + d.covariates.columns.len());
    let mut y = vec![0.0; k];
    for r in 0..rows {
        key.clear();
        key.extend(d.regressors.row(r).iter().map(|x| x.to_bits()));
        key.extend(d.instruments.row(r).iter().map(|x| x.to_bits()));
        key.push(d.weights[r].to_bits());
        key.push(cluster_codes.map_or(0, |c| c[r] as u64));
        key.extend(d.covariates.columns.iter().map(|c| cov_key(c, r)));
        for (j, v) in y.iter_mut().enumerate() {
            *v = input.y.sums[(r, j)];
        }
        acc.push(&key, r, &y);
    }
    let first = acc.first_row.clone();
    let stats = acc.into_stats();
    let clusters = match cluster_codes {
        Some(codes) => {
            let labels: Vec<String> = first.iter().map(|&r| codes[r].to_string()).collect();
            ClusterIds::from_labels(&labels)
        }
        None => ClusterIds::Singleton,
    };
    let covariates = select_table(&d.covariates, &first);
    let data = DesignData {
        layout: d.layout.clone(),
        regressors: d.regressors.select_rows(first.iter()),
        instruments: d.instruments.select_rows(first.iter()),
        weights: DVector::from_iterator(first.len(), first.iter().map(|&r| d.weights[r])),
        counts: Some(DVector::from_vec(stats.counts.clone())),
        clusters,
        covariates,
        n_obs: d.n_obs,
        design: d.design,
        weight_scheme: d.weight_scheme,
        metadata: d.metadata.clone(),
    };
    CompressedDesign {
        data: Arc::new(data),
        y: Arc::new(stats.outcome_block(input.y.names.clone())),
    }
}

fn select_table(table: &CovariateTable, rows: &[usize]) -> CovariateTable {
    CovariateTable {
        names: table.names.clone(),
        columns: table
            .columns
            .iter()
            .map(|c| match c {
                CovColumn::Numeric(v) => CovColumn::Numeric(rows.iter().map(|&r| v[r]).collect()),
                CovColumn::Categorical { codes, levels } => CovColumn::Categorical {
                    codes: rows.iter().map(|&r| codes[r]).collect(),
                    levels: levels.clone(),
                },
            })
            .collect(),
    }
}

/// Interns raw strings to dense codes.
#[derive(Default)]
struct Interner {
    index: HashMap<String, u32>,
    levels: Vec<String>,
}

impl Interner {
    fn code(&mut self, s: &str) -> u32 {
        if let Some(c) = self.index.get(s) {
            return *c;
        }
        let c = self.levels.len() as u32;
        self.index.insert(s.to_string(), c);
        self.levels.push(s.to_string());
        c
    }
}

const NO_VALUE: u64 = u64::MAX;

/// Result of a streaming load.
pub struct StreamedDesign {
    pub compressed: CompressedDesign,
    pub design: DesignClass,
    pub log: Vec<LogEntry>,
}

/// Reads a CSV once and builds the compressed design for `metrics` without
/// materializing the frame. Equivalent to `load_table` → `add_metric` →
/// `compress_design`.
pub fn stream_compressed<S: AsRef<str>>(
    path: impl AsRef<Path>,
    schema: &Schema,
    metrics: &[S],
    covariates: &CovariateSpec,
) -> Result<StreamedDesign> {
    let file = std::fs::File::open(path.as_ref())?;
    stream_compressed_from_reader(std::io::BufReader::with_capacity(1 << 20, file), schema, metrics, covariates)
}

pub fn stream_compressed_from_reader<R: Read, S: AsRef<str>>(
    reader: R,
    schema: &Schema,
    metrics: &[S],
    covariates: &CovariateSpec,
) -> Result<StreamedDesign> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let bound = BoundHeader::resolve(&headers, schema)?;
    if metrics.is_empty() {
        return Err(Error::Schema("at least one metric must be bound before fitting".into()));
    }
    let mut metric_cols = Vec::with_capacity(metrics.len());
    for m in metrics {
        let m = m.as_ref();
        if covariates.columns.iter().any(|c| c == m) {
            return Err(Error::Aliasing(m.to_string()));
        }
        let (_, idx) = bound
            .metrics
            .iter()
            .find(|(name, _)| name == m)
            .ok_or_else(|| Error::Schema(format!("metric `{m}` is not bound in the frame")))?;
        metric_cols.push((m.to_string(), *idx));
    }
    let mut cov_cols = Vec::with_capacity(covariates.columns.len());
    for c in &covariates.columns {
        let (_, idx) = bound
            .covariates
            .iter()
            .find(|(name, _)| name == c)
            .ok_or_else(|| Error::Schema(format!("covariate `{c}` is not bound in the frame")))?;
        cov_cols.push(*idx);
    }
    // Rows with a missing value in any bound covariate are dropped, matching `load_table`.
    let all_cov_cols: Vec<usize> = bound.covariates.iter().map(|(_, i)| *i).collect();

    let k = metric_cols.len();
    let mut acc = GroupAccumulator::new(k);
    let mut cov_interners: Vec<Interner> = cov_cols.iter().map(|_| Interner::default()).collect();
    let mut clusters = Interner::default();
    let mut cluster_sizes: Vec<u32> = Vec::new();
    let mut units = Interner::default();
    let mut unit_repeat = false;
    let mut unit_seen: Vec<bool> = Vec::new();
    let mut key = vec![0u64; 5 + cov_cols.len()];
    let mut y = vec![0.0; k];
    let mut full = true;
    let mut dropped = 0usize;
    let mut row = 0usize;
    let mut n = 0usize;
    let mut record = csv::ByteRecord::new();
    let name = |i: usize| headers.get(i).unwrap_or("?").trim().to_string();

    while rdr.read_byte_record(&mut record)? {
        let field = |i: usize| std::str::from_utf8(record.get(i).unwrap_or(b"")).unwrap_or("");
        if all_cov_cols.iter().any(|i| is_missing(field(*i))) {
            dropped += 1;
            row += 1;
            continue;
        }
        let a = bound.assignment.map(|i| parse_label(&name(i), row, field(i))).transpose()?;
        let t = bound.treated.map(|i| parse_label(&name(i), row, field(i))).transpose()?;
        let z = bound.instrument.map(|i| parse_label(&name(i), row, field(i))).transpose()?;
        let a = a.or(z).or(t).expect("schema binds intent_to_treat or treated");
        let t = t.unwrap_or(a);
        let z = z.unwrap_or(a);
        full &= t == z;
        let w = match bound.propensity {
            Some(i) => {
                let w = parse_number(&name(i), row, field(i))?;
                if !(w > 0.0 && w < 1.0) {
                    return Err(Error::Domain(format!("propensity {w} at row {row} is outside (0, 1)")));
                }
                w.to_bits()
            }
            None => NO_VALUE,
        };
        let cluster = match bound.cluster {
            Some(i) => {
                let s = field(i).trim();
                if is_missing(s) {
                    return Err(Error::Type {
                        column: name(i),
                        row,
                        detail: "missing cluster identifier".into(),
                    });
                }
                let c = clusters.code(s);
                if c as usize == cluster_sizes.len() {
                    cluster_sizes.push(0);
                }
                cluster_sizes[c as usize] += 1;
                c as u64
            }
            None => NO_VALUE,
        };
        if let Some(i) = bound.unit_id {
            let u = units.code(field(i).trim()) as usize;
            if u == unit_seen.len() {
                unit_seen.push(false);
            }
            unit_repeat |= std::mem::replace(&mut unit_seen[u], true);
        }
        if let Some(i) = bound.time {
            parse_number(&name(i), row, field(i))?;
        }
        for (v, (m, i)) in y.iter_mut().zip(&metric_cols) {
            *v = parse_number(m, row, field(*i))?;
        }
        key[0] = a as u64;
        key[1] = t as u64;
        key[2] = z as u64;
        key[3] = w;
        key[4] = cluster;
        for (slot, (interner, i)) in key[5..].iter_mut().zip(cov_interners.iter_mut().zip(&cov_cols)) {
            *slot = interner.code(field(*i).trim()) as u64;
        }
        acc.push(&key, row, &y);
        n += 1;
        row += 1;
    }

    if n < 2 {
        return Err(Error::InsufficientData { rows: n, columns: 2 });
    }
    if bound.time.is_some() && bound.unit_id.is_some() && bound.cluster.is_none() && unit_repeat {
        return Err(Error::Schema(format!(
            "repeated observations per unit over `{}` require an explicit cluster binding",
            schema.column(crate::frame::Role::Time).unwrap_or("time")
        )));
    }
    let mut log = Vec::new();
    if dropped > 0 {
        log.push(LogEntry::warn(
            "rows_dropped",
            None,
            format!("{dropped} rows dropped for missing covariate values"),
        ));
    }
    for (present, what) in [
        (bound.treated.is_some(), "treated <- intent_to_treat"),
        (bound.instrument.is_some(), "instrument <- intent_to_treat"),
        (bound.propensity.is_some(), "propensity <- empirical assignment share"),
        (bound.cluster.is_some(), "cluster <- row index"),
    ] {
        if !present {
            log.push(LogEntry::info("default_applied", None, what));
        }
    }

    // Group keys: [A, T, Z, W bits, cluster, covariate codes...]
    let keys: Vec<Box<[u64]>> = {
        let mut keys = vec![Box::<[u64]>::default(); acc.len()];
        for (k, g) in acc.index.iter() {
            keys[*g as usize] = k.clone();
        }
        keys
    };
    let singletons = cluster_sizes.iter().all(|s| *s == 1);
    let stats = if bound.cluster.is_some() && singletons {
        // Singleton clusters do not affect inference; merge across cluster ids.
        let mut target = Vec::with_capacity(keys.len());
        let mut index: WordMap<Vec<u64>, usize> = WordMap::default();
        for key in &keys {
            let mut reduced = key.to_vec();
            reduced[4] = NO_VALUE;
            let next = index.len();
            target.push(*index.entry(reduced).or_insert(next));
        }
        acc.merge(&target, index.len())
    } else {
        acc.into_stats()
    };
    let rep_keys: Vec<&[u64]> = stats.representative.iter().map(|&g| &*keys[g]).collect();
    let groups = rep_keys.len();

    let a_labels: Vec<i64> = rep_keys.iter().map(|k| k[0] as i64).collect();
    let t_labels: Vec<i64> = rep_keys.iter().map(|k| k[1] as i64).collect();
    let z_labels: Vec<i64> = rep_keys.iter().map(|k| k[2] as i64).collect();
    let arms = arm_levels(&a_labels, &t_labels, &z_labels);
    if arms.len() < 2 {
        return Err(Error::Domain(format!(
            "only one arm label ({}) present; no contrast is identifiable",
            arms[0]
        )));
    }
    let constant_w = match bound.propensity {
        None => true,
        Some(_) if arms.len() <= 2 => rep_keys.iter().all(|k| k[3] == rep_keys[0][3]),
        Some(_) => {
            let mut first: HashMap<u64, u64> = HashMap::new();
            rep_keys.iter().all(|k| *first.entry(k[0]).or_insert(k[3]) == k[3])
        }
    };
    let design = design_from_parts(full, singletons, constant_w);
    let propensity: Vec<f64> = rep_keys
        .iter()
        .map(|k| if k[3] == NO_VALUE { 0.5 } else { f64::from_bits(k[3]) })
        .collect();
    let (weights, weight_scheme) = design_weights(&design, &propensity, &a_labels, &arms);

    let cluster_ids = if design.covariance_structure == CovarianceStructure::BlockDiagonal {
        let labels: Vec<String> = rep_keys.iter().map(|k| k[4].to_string()).collect();
        ClusterIds::from_labels(&labels)
    } else {
        ClusterIds::Singleton
    };

    let mut table = CovariateTable::default();
    for (c, (name, interner)) in covariates.columns.iter().zip(cov_interners).enumerate() {
        let codes: Vec<u32> = rep_keys.iter().map(|k| k[5 + c] as u32).collect();
        let numeric: Option<Vec<f64>> = interner
            .levels
            .iter()
            .map(|l| l.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect();
        let column = match numeric {
            Some(values) => CovColumn::Numeric(codes.iter().map(|c| values[*c as usize]).collect()),
            None => {
                let (codes, levels) = sort_levels(codes, interner.levels);
                CovColumn::Categorical { codes, levels }
            }
        };
        table.names.push(name.clone());
        table.columns.push(column);
    }
    let encoder = FeatureEncoder::fit(&table, Some(stats.counts.as_slice()), covariates, &mut log)?;
    let layout = DesignLayout::new(arms, encoder);
    let fx = layout.encoder.encode_table(&table)?;
    let regressors = layout.block(&t_labels, &fx);
    let instruments = layout.block(&z_labels, &fx);

    let data = DesignData {
        layout,
        regressors,
        instruments,
        weights,
        counts: Some(DVector::from_vec(stats.counts.clone())),
        clusters: cluster_ids,
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
    debug_assert_eq!(data.rows(), groups);
    Ok(StreamedDesign {
        compressed: CompressedDesign {
            data: Arc::new(data),
            y: Arc::new(stats.outcome_block(metric_cols.into_iter().map(|(m, _)| m).collect())),
        },
        design,
        log,
    })
}
