//! Serial mediation over a declared causal graph.
//!
//! The declared edges fix a causal order. Each non-treatment node is regressed
//! on all of its ancestors plus X and an intercept, so the regression graph is
//! the transitive closure of the declared one. For the funnel
//! `T -> S`, `T -> V`, `S -> V -> Y` this gives
//!
//! ```text
//! S = T α₁ + X γ₁ + ε₁
//! V = T α₂ + S θ + X γ₂ + ε₂
//! Y = T c + S β₁ + V β₂ + X γ₃ + ε₃
//! ```
//!
//! and the OLS total effect of T on Y equals the sum of coefficient products
//! over all T→Y paths of the regression graph.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{project_table, CovariateSpec, FeatureEncoder};
use crate::error::{Error, Result};
use crate::frame::{ExperimentFrame, LogEntry};
use crate::linalg::{weighted_cross, SpdSolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Treatment,
    Mediator,
    Outcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalGraph {
    nodes: Vec<String>,
    edges: Vec<(usize, usize)>,
    kinds: Vec<NodeKind>,
    treatment: usize,
    outcome: usize,
}

/// Parses `A -> B` edge lines; `A -> B -> C` expands to consecutive edges.
/// Blank lines and lines starting with `#` are ignored.
pub fn parse_graph(text: &str, treatment: &str) -> Result<CausalGraph> {
    let mut nodes: Vec<String> = Vec::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let intern = |label: &str, nodes: &mut Vec<String>| -> usize {
        match nodes.iter().position(|n| n == label) {
            Some(i) => i,
            None => {
                nodes.push(label.to_string());
                nodes.len() - 1
            }
        }
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split("->").map(str::trim).collect();
        if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Structure(format!(
                "line {}: expected `A -> B`, got `{line}`",
                lineno + 1
            )));
        }
        for pair in parts.windows(2) {
            let a = intern(pair[0], &mut nodes);
            let b = intern(pair[1], &mut nodes);
            if a == b {
                return Err(Error::Cycle {
                    cycle: vec![pair[0].to_string(), pair[1].to_string()],
                });
            }
            if !edges.contains(&(a, b)) {
                edges.push((a, b));
            }
        }
    }
    if edges.is_empty() {
        return Err(Error::Structure("graph has no edges".into()));
    }
    CausalGraph::new(nodes, edges, treatment)
}

impl CausalGraph {
    fn new(nodes: Vec<String>, edges: Vec<(usize, usize)>, treatment: &str) -> Result<Self> {
        let n = nodes.len();
        let mut graph = CausalGraph {
            kinds: vec![NodeKind::Mediator; n],
            treatment: usize::MAX,
            outcome: usize::MAX,
            nodes,
            edges,
        };
        if let Some(cycle) = graph.find_cycle() {
            return Err(Error::Cycle {
                cycle: cycle.into_iter().map(|i| graph.nodes[i].clone()).collect(),
            });
        }
        let t = graph
            .nodes
            .iter()
            .position(|x| x == treatment)
            .ok_or_else(|| Error::Structure(format!("treatment `{treatment}` is not in the graph")))?;
        if graph.edges.iter().any(|(_, b)| *b == t) {
            return Err(Error::Structure(format!("treatment `{treatment}` has parents")));
        }
        let sinks: Vec<usize> = (0..n).filter(|v| !graph.edges.iter().any(|(a, _)| a == v)).collect();
        if sinks.len() != 1 {
            let names: Vec<&str> = sinks.iter().map(|i| graph.nodes[*i].as_str()).collect();
            return Err(Error::Structure(format!(
                "exactly one outcome sink is required, found [{}]",
                names.join(", ")
            )));
        }
        let y = sinks[0];
        if y == t {
            return Err(Error::Structure("treatment cannot be the outcome".into()));
        }
        let from_t = graph.reachable(t, false);
        let to_y = graph.reachable(y, true);
        for v in 0..n {
            if v != t && v != y && !(from_t[v] && to_y[v]) {
                return Err(Error::Structure(format!(
                    "mediator `{}` is not on a directed path from `{}` to `{}`",
                    graph.nodes[v], graph.nodes[t], graph.nodes[y]
                )));
            }
        }
        graph.kinds[t] = NodeKind::Treatment;
        graph.kinds[y] = NodeKind::Outcome;
        graph.treatment = t;
        graph.outcome = y;
        Ok(graph)
    }

    fn children(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |(a, _)| *a == v).map(|(_, b)| *b)
    }

    fn find_cycle(&self) -> Option<Vec<usize>> {
        // 0 = unvisited, 1 = on stack, 2 = done
        fn dfs(g: &CausalGraph, v: usize, state: &mut [u8], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
            state[v] = 1;
            stack.push(v);
            for w in g.children(v) {
                if state[w] == 1 {
                    let start = stack.iter().position(|x| *x == w).unwrap();
                    let mut cycle = stack[start..].to_vec();
                    cycle.push(w);
                    return Some(cycle);
                }
                if state[w] == 0 {
                    if let Some(c) = dfs(g, w, state, stack) {
                        return Some(c);
                    }
                }
            }
            stack.pop();
            state[v] = 2;
            None
        }
        let mut state = vec![0u8; self.nodes.len()];
        for v in 0..self.nodes.len() {
            if state[v] == 0 {
                if let Some(c) = dfs(self, v, &mut state, &mut Vec::new()) {
                    return Some(c);
                }
            }
        }
        None
    }

    fn reachable(&self, from: usize, reverse: bool) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![from];
        seen[from] = true;
        while let Some(v) = stack.pop() {
            for (a, b) in &self.edges {
                let (src, dst) = if reverse { (*b, *a) } else { (*a, *b) };
                if src == v && !seen[dst] {
                    seen[dst] = true;
                    stack.push(dst);
                }
            }
        }
        seen
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }
    pub fn edges(&self) -> Vec<(&str, &str)> {
        self.edges
            .iter()
            .map(|(a, b)| (self.nodes[*a].as_str(), self.nodes[*b].as_str()))
            .collect()
    }
    pub fn kind(&self, label: &str) -> Option<NodeKind> {
        self.index(label).map(|i| self.kinds[i])
    }
    pub fn treatment(&self) -> &str {
        &self.nodes[self.treatment]
    }
    pub fn outcome(&self) -> &str {
        &self.nodes[self.outcome]
    }
    pub fn mediators(&self) -> Vec<&str> {
        (0..self.nodes.len())
            .filter(|i| self.kinds[*i] == NodeKind::Mediator)
            .map(|i| self.nodes[i].as_str())
            .collect()
    }
    fn index(&self, label: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == label)
    }

    /// Kahn's algorithm, lowest declaration index first.
    pub fn topological_order(&self) -> Vec<String> {
        let n = self.nodes.len();
        let mut indeg = vec![0; n];
        for (_, b) in &self.edges {
            indeg[*b] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|v| indeg[*v] == 0).collect();
        let mut out = Vec::with_capacity(n);
        while let Some(v) = ready.pop_first() {
            out.push(self.nodes[v].clone());
            for w in self.children(v) {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    ready.insert(w);
                }
            }
        }
        out
    }

    fn check_order(&self, order: &[String]) -> Result<Vec<usize>> {
        let idx: Vec<usize> = order
            .iter()
            .map(|l| {
                self.index(l)
                    .ok_or_else(|| Error::Structure(format!("`{l}` is not in the graph")))
            })
            .collect::<Result<_>>()?;
        let mut pos = vec![usize::MAX; self.nodes.len()];
        for (p, v) in idx.iter().enumerate() {
            pos[*v] = p;
        }
        if idx.len() != self.nodes.len() || pos.contains(&usize::MAX) {
            return Err(Error::Structure("order must list every node once".into()));
        }
        if self.edges.iter().any(|(a, b)| pos[*a] > pos[*b]) {
            return Err(Error::Structure("order is not topological".into()));
        }
        Ok(idx)
    }

    /// Ancestors of `v`, in declaration order.
    pub fn ancestors(&self, label: &str) -> Vec<&str> {
        match self.index(label) {
            Some(v) => {
                let up = self.reachable(v, true);
                (0..self.nodes.len())
                    .filter(|u| *u != v && up[*u])
                    .map(|u| self.nodes[u].as_str())
                    .collect()
            }
            None => Vec::new(),
        }
    }

    /// Directed treatment→outcome paths of the regression graph (the
    /// transitive closure), as node labels.
    pub fn regression_paths(&self) -> Vec<Vec<String>> {
        let n = self.nodes.len();
        let anc: Vec<Vec<bool>> = (0..n).map(|v| self.reachable(v, true)).collect();
        let closure = |a: usize, b: usize| a != b && anc[b][a];
        let mut out = Vec::new();
        let mut path = vec![self.treatment];
        fn walk(
            v: usize,
            y: usize,
            n: usize,
            closure: &dyn Fn(usize, usize) -> bool,
            path: &mut Vec<usize>,
            out: &mut Vec<Vec<usize>>,
        ) {
            if v == y {
                out.push(path.clone());
                return;
            }
            for w in 0..n {
                if closure(v, w) {
                    path.push(w);
                    walk(w, y, n, closure, path, out);
                    path.pop();
                }
            }
        }
        let mut idx_paths = Vec::new();
        walk(self.treatment, self.outcome, n, &closure, &mut path, &mut idx_paths);
        for p in idx_paths {
            out.push(p.into_iter().map(|i| self.nodes[i].clone()).collect());
        }
        out
    }
}

/// One stage regression: node on its ancestors, X and an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFit {
    pub node: String,
    pub regressors: Vec<String>,
    pub coefficients: Vec<f64>,
    pub se: Vec<f64>,
    #[serde(skip)]
    cov: DMatrix<f64>,
    #[serde(skip)]
    residuals: DVector<f64>,
}

impl StageFit {
    pub fn residuals(&self) -> &DVector<f64> {
        &self.residuals
    }
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
    pub fn coefficient(&self, regressor: &str) -> Option<f64> {
        self.regressors
            .iter()
            .position(|r| r == regressor)
            .map(|i| self.coefficients[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Direct,
    Indirect,
    Serial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEffect {
    pub nodes: Vec<String>,
    pub kind: PathKind,
    pub effect: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalEffect {
    pub effect: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediationResult {
    pub treatment: String,
    pub outcome: String,
    pub n: usize,
    pub direct: f64,
    pub stages: Vec<StageFit>,
    pub paths: Vec<PathEffect>,
    pub total_check: TotalEffect,
    /// `total_check − Σ paths`; zero up to rounding.
    pub decomposition_gap: f64,
    pub assumptions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediatedEffect {
    pub mediator: String,
    pub effect: f64,
    pub se: f64,
    pub paths: Vec<PathEffect>,
}

struct Ols {
    beta: DVector<f64>,
    cov: DMatrix<f64>,
    residuals: DVector<f64>,
}

/// OLS with HC0 covariance.
fn ols(x: &DMatrix<f64>, y: &DVector<f64>, names: &[String], what: &str) -> Result<Ols> {
    let n = x.nrows();
    let p = x.ncols();
    if n <= p {
        return Err(Error::InsufficientData { rows: n, columns: p });
    }
    let ones = DVector::from_element(n, 1.0);
    let solver = SpdSolver::new(&weighted_cross(x, &ones, x), names, what)?;
    let xty = x.tr_mul(y);
    let beta = solver.solve(&DMatrix::from_column_slice(p, 1, xty.as_slice())).column(0).into_owned();
    let residuals = y - x * &beta;
    let sq = residuals.map(|e| e * e);
    let meat = weighted_cross(x, &sq, x);
    let bread = solver.inverse();
    let mut cov = &bread * meat * &bread;
    crate::linalg::symmetrize(&mut cov);
    Ok(Ols { beta, cov, residuals })
}

pub fn fit_mediation_system(
    frame: &ExperimentFrame,
    graph: &CausalGraph,
    covariates: &CovariateSpec,
    outcome: &str,
) -> Result<MediationResult> {
    fit_mediation_system_with_order(frame, graph, covariates, outcome, &graph.topological_order())
}

/// As [`fit_mediation_system`], fitting stages in the given topological order.
pub fn fit_mediation_system_with_order(
    frame: &ExperimentFrame,
    graph: &CausalGraph,
    covariates: &CovariateSpec,
    outcome: &str,
    order: &[String],
) -> Result<MediationResult> {
    let order = graph.check_order(order)?;
    if frame.arms().len() != 2 {
        return Err(Error::Contract(format!(
            "mediation needs a binary treatment, found {} arms",
            frame.arms().len()
        )));
    }
    let treated_label = frame.arms()[1];
    let t: DVector<f64> = DVector::from_iterator(
        frame.n(),
        frame.treated().iter().map(|a| f64::from(u8::from(*a == treated_label))),
    );
    let column_of = |node: usize| -> Result<DVector<f64>> {
        let name = if node == graph.outcome { outcome } else { &graph.nodes[node] };
        frame
            .metric(name)
            .map(DVector::from_column_slice)
            .ok_or_else(|| Error::Contract(format!("graph node `{name}` is not a metric in the frame")))
    };
    let mut values: Vec<Option<DVector<f64>>> = vec![None; graph.nodes.len()];
    values[graph.treatment] = Some(t);
    for v in 0..graph.nodes.len() {
        if v != graph.treatment {
            values[v] = Some(column_of(v)?);
        }
    }

    let mut log: Vec<LogEntry> = Vec::new();
    let table = project_table(frame.covariates(), &covariates.columns)?;
    let encoder = FeatureEncoder::fit(&table, None, covariates, &mut log)?;
    let fx = encoder.encode_table(&table)?;
    let fx_names = encoder.names();
    let n = frame.n();

    let design = |regs: &[usize]| -> (DMatrix<f64>, Vec<String>) {
        let p = 1 + regs.len() + fx.ncols();
        let mut x = DMatrix::zeros(n, p);
        x.column_mut(0).fill(1.0);
        for (k, r) in regs.iter().enumerate() {
            x.column_mut(1 + k).copy_from(values[*r].as_ref().unwrap());
        }
        for k in 0..fx.ncols() {
            x.column_mut(1 + regs.len() + k).copy_from(&fx.column(k));
        }
        let mut names = vec!["intercept".to_string()];
        names.extend(regs.iter().map(|r| graph.nodes[*r].clone()));
        names.extend(fx_names.iter().cloned());
        (x, names)
    };

    let mut stages: Vec<Option<StageFit>> = vec![None; graph.nodes.len()];
    for &v in &order {
        if v == graph.treatment {
            continue;
        }
        let up = graph.reachable(v, true);
        let regs: Vec<usize> = order.iter().copied().filter(|u| *u != v && up[*u]).collect();
        let (x, names) = design(&regs);
        let label = graph.nodes[v].clone();
        let fit = ols(&x, values[v].as_ref().unwrap(), &names, &format!("stage `{label}` cross-moment"))
            .map_err(|e| e.in_stage(label.clone()))?;
        let se = fit.cov.diagonal().iter().map(|d| d.max(0.0).sqrt()).collect();
        stages[v] = Some(StageFit {
            node: label,
            regressors: names,
            coefficients: fit.beta.iter().copied().collect(),
            se,
            cov: fit.cov,
            residuals: fit.residuals,
        });
    }

    let (x, names) = design(&[graph.treatment]);
    let total = ols(&x, values[graph.outcome].as_ref().unwrap(), &names, "total-effect cross-moment")
        .map_err(|e| e.in_stage("total"))?;
    let total_check = TotalEffect {
        effect: total.beta[1],
        se: total.cov[(1, 1)].max(0.0).sqrt(),
    };

    let paths: Vec<PathEffect> = graph
        .regression_paths()
        .into_iter()
        .map(|nodes| {
            let (effect, se) = paths_delta(graph, &stages, std::slice::from_ref(&nodes));
            let kind = match nodes.len() {
                2 => PathKind::Direct,
                3 => PathKind::Indirect,
                _ => PathKind::Serial,
            };
            PathEffect { nodes, kind, effect, se }
        })
        .collect();
    let direct = paths
        .iter()
        .find(|p| p.kind == PathKind::Direct)
        .map_or(0.0, |p| p.effect);
    let sum: f64 = paths.iter().map(|p| p.effect).sum();
    let stages: Vec<StageFit> = order.iter().filter_map(|v| stages[*v].clone()).collect();
    Ok(MediationResult {
        treatment: graph.treatment().to_string(),
        outcome: graph.outcome().to_string(),
        n,
        direct,
        stages,
        paths,
        total_check,
        decomposition_gap: total_check.effect - sum,
        assumptions: vec![
            "no unmeasured confounding between treatment, mediators and outcome given the covariates (untestable)"
                .into(),
            "path standard errors treat stage regressions as independent".into(),
        ],
    })
}

/// Sum of path products with a delta-method standard error. Stages are
/// independent; coefficients within a stage use that stage's covariance.
fn paths_delta(graph: &CausalGraph, stages: &[Option<StageFit>], paths: &[Vec<String>]) -> (f64, f64) {
    // (stage node index, coefficient index) -> gradient
    let mut grad: Vec<(usize, usize, f64)> = Vec::new();
    let mut effect = 0.0;
    for path in paths {
        let edges: Vec<(usize, usize)> = path
            .windows(2)
            .map(|w| {
                let to = graph.index(&w[1]).unwrap();
                let stage = stages[to].as_ref().unwrap();
                let k = stage.regressors.iter().position(|r| *r == w[0]).unwrap();
                (to, k)
            })
            .collect();
        let coef = |(s, k): (usize, usize)| stages[s].as_ref().unwrap().coefficients[k];
        effect += edges.iter().map(|e| coef(*e)).product::<f64>();
        for (i, e) in edges.iter().enumerate() {
            let g: f64 = edges
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, f)| coef(*f))
                .product();
            match grad.iter_mut().find(|(s, k, _)| (*s, *k) == *e) {
                Some(entry) => entry.2 += g,
                None => grad.push((e.0, e.1, g)),
            }
        }
    }
    let mut var = 0.0;
    for (s1, k1, g1) in &grad {
        for (s2, k2, g2) in &grad {
            if s1 == s2 {
                var += g1 * g2 * stages[*s1].as_ref().unwrap().cov[(*k1, *k2)];
            }
        }
    }
    (effect, var.max(0.0).sqrt())
}

/// Sum of all path effects passing through `mediator`, itemized.
pub fn mediate_effect(result: &MediationResult, graph: &CausalGraph, mediator: &str) -> Result<MediatedEffect> {
    if graph.kind(mediator) != Some(NodeKind::Mediator) {
        return Err(Error::Contract(format!("`{mediator}` is not a mediator of this graph")));
    }
    let through: Vec<PathEffect> = result
        .paths
        .iter()
        .filter(|p| p.nodes.iter().any(|n| n == mediator))
        .cloned()
        .collect();
    let mut stages: Vec<Option<StageFit>> = vec![None; graph.nodes.len()];
    for s in &result.stages {
        let i = graph
            .index(&s.node)
            .ok_or_else(|| Error::Contract(format!("stage `{}` is not in the graph", s.node)))?;
        stages[i] = Some(s.clone());
    }
    let nodes: Vec<Vec<String>> = through.iter().map(|p| p.nodes.clone()).collect();
    let (effect, se) = paths_delta(graph, &stages, &nodes);
    Ok(MediatedEffect {
        mediator: mediator.to_string(),
        effect,
        se,
        paths: through,
    })
}
