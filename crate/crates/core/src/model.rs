//! The decision model: graph, structural equations, constraints, shock
//! distributions, parameters and variable domains.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::expr::Expr;
use crate::graph::{CausalGraph, GraphBuilder, GraphError, VariableKind};
use crate::grid::{Axis, ProductGrid};

const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    /// An ordered list of distinct values.
    Discrete(Vec<f64>),
    /// A closed interval discretized by a uniform grid. Infinite bounds mark
    /// variables that are never gridded.
    Interval { lo: f64, hi: f64, points: usize },
}

impl Domain {
    pub fn real() -> Domain {
        Domain::Interval {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
            points: 2,
        }
    }

    pub fn interval(lo: f64, hi: f64, points: usize) -> Domain {
        Domain::Interval { lo, hi, points }
    }

    pub fn is_bounded(&self) -> bool {
        match self {
            Domain::Discrete(_) => true,
            Domain::Interval { lo, hi, .. } => lo.is_finite() && hi.is_finite(),
        }
    }

    pub fn is_real_line(&self) -> bool {
        matches!(self, Domain::Interval { lo, hi, .. } if *lo == f64::NEG_INFINITY && *hi == f64::INFINITY)
    }

    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Domain::Discrete(v) => (
                v.iter().copied().fold(f64::INFINITY, f64::min),
                v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ),
            Domain::Interval { lo, hi, .. } => (*lo, *hi),
        }
    }

    /// Grid values in increasing order.
    pub fn grid(&self) -> Vec<f64> {
        match self {
            Domain::Discrete(v) => {
                let mut v = v.clone();
                v.sort_by(f64::total_cmp);
                v
            }
            Domain::Interval { lo, hi, points } => {
                let n = *points;
                (0..n)
                    .map(|i| {
                        if i + 1 == n {
                            *hi
                        } else {
                            lo + (hi - lo) * (i as f64) / ((n - 1) as f64)
                        }
                    })
                    .collect()
            }
        }
    }

    pub fn axis(&self) -> Axis {
        Axis::new(self.grid(), matches!(self, Domain::Interval { .. }))
    }

    pub fn with_points(&self, points: usize) -> Domain {
        match self {
            Domain::Interval { lo, hi, .. } => Domain::Interval {
                lo: *lo,
                hi: *hi,
                points,
            },
            other => other.clone(),
        }
    }

    fn problems(&self) -> Option<String> {
        match self {
            Domain::Discrete(v) => {
                if v.is_empty() {
                    return Some("empty discrete domain".into());
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Some("non-finite value in discrete domain".into());
                }
                let mut s = v.clone();
                s.sort_by(f64::total_cmp);
                if s.windows(2).any(|w| w[0] == w[1]) {
                    return Some("repeated value in discrete domain".into());
                }
                None
            }
            Domain::Interval { lo, hi, points } => {
                if lo.is_nan() || hi.is_nan() || !(lo < hi) {
                    Some(format!(
                        "interval domain needs lo < hi (got {lo:?}, {hi:?})"
                    ))
                } else if *points < 2 {
                    Some(format!(
                        "interval grid needs at least 2 points (got {points})"
                    ))
                } else {
                    None
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    Normal {
        mean: f64,
        sd: f64,
    },
    /// Independent draws from a finite set.
    Iid {
        states: Vec<f64>,
        probs: Vec<f64>,
    },
    /// A finite chain; the row is selected by the current value of `given`,
    /// a root variable holding the chain's present state.
    Markov {
        states: Vec<f64>,
        matrix: Vec<Vec<f64>>,
        given: String,
    },
}

impl Distribution {
    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let check_probs = |p: &[f64], what: &str, out: &mut Vec<String>| {
            if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
                out.push(format!("{what} has a negative or non-finite probability"));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > PROB_TOL {
                out.push(format!("{what} sums to {s:?}, not 1"));
            }
        };
        match self {
            Distribution::Normal { mean, sd } => {
                if !mean.is_finite() || !sd.is_finite() || *sd < 0.0 {
                    out.push(format!(
                        "normal needs finite mean and sd >= 0 (got {mean:?}, {sd:?})"
                    ));
                }
            }
            Distribution::Iid { states, probs } => {
                if states.is_empty() || states.len() != probs.len() {
                    out.push("iid states and probabilities differ in length".into());
                }
                check_probs(probs, "iid distribution", &mut out);
            }
            Distribution::Markov { states, matrix, .. } => {
                if states.is_empty() || matrix.len() != states.len() {
                    out.push("markov matrix must be square over the states".into());
                }
                for (i, row) in matrix.iter().enumerate() {
                    if row.len() != states.len() {
                        out.push(format!("markov row {i} has the wrong length"));
                    } else {
                        check_probs(row, &format!("markov row {i}"), &mut out);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    /// `lower <= d <= upper`, bounds over the decision's parents and parameters.
    Interval { lower: Expr, upper: Expr },
    /// An explicit feasible subset of a discrete domain.
    Set(Vec<f64>),
}

/// A validation finding, optionally tied to the variable it concerns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub subject: Option<String>,
    pub message: String,
}

impl Diagnostic {
    pub fn on(subject: &str, message: impl Into<String>) -> Self {
        Diagnostic {
            subject: Some(subject.to_string()),
            message: message.into(),
        }
    }

    pub fn general(message: impl Into<String>) -> Self {
        Diagnostic {
            subject: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.subject {
            Some(s) => write!(f, "{s}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Unvalidated model contents. Edges come from equation references,
/// constraint references and declared information sets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParts {
    pub kinds: BTreeMap<String, VariableKind>,
    pub observes: BTreeMap<String, BTreeSet<String>>,
    pub equations: BTreeMap<String, Expr>,
    pub constraints: BTreeMap<String, Constraint>,
    pub exogenous: BTreeMap<String, Distribution>,
    pub params: BTreeMap<String, f64>,
    pub domains: BTreeMap<String, Domain>,
}

impl ModelParts {
    fn graph_builder(&self) -> GraphBuilder {
        let mut b = GraphBuilder::new();
        for (n, k) in &self.kinds {
            b.variable(n.clone(), *k);
        }
        for (t, e) in &self.equations {
            for v in e.variables() {
                b.edge(v, t.clone());
            }
        }
        for (d, ps) in &self.observes {
            for p in ps {
                b.edge(p.clone(), d.clone());
            }
        }
        b
    }

    /// Validates and freezes into a model.
    pub fn build(self) -> Result<Scdm, Vec<Diagnostic>> {
        if self.kinds.is_empty() {
            return Err(vec![Diagnostic::general("no variables")]);
        }
        let mut diags = Vec::new();
        for d in self.observes.keys() {
            match self.kinds.get(d) {
                Some(VariableKind::Decision) => {}
                Some(_) => diags.push(Diagnostic::on(d, "only decisions declare observed parents")),
                None => diags.push(Diagnostic::on(d, "unknown variable")),
            }
        }
        let graph = match self.graph_builder().finalize() {
            Ok(g) => g,
            Err(e) => {
                let subject = match &e {
                    GraphError::Cycle(c) => c.first().cloned(),
                    GraphError::UnknownVariable(v)
                    | GraphError::ExogenousWithParent(v, _)
                    | GraphError::SelfLoop(v) => Some(v.clone()),
                    _ => None,
                };
                let message = match &e {
                    GraphError::Cycle(_) => format!("cycle: {e}"),
                    _ => e.to_string(),
                };
                diags.push(Diagnostic { subject, message });
                return Err(diags);
            }
        };
        let m = Scdm {
            graph,
            equations: self.equations,
            constraints: self.constraints,
            exogenous: self.exogenous,
            params: self.params,
            domains: self.domains,
        };
        diags.extend(m.validate());
        if diags.is_empty() {
            Ok(m)
        } else {
            Err(diags)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scdm {
    pub graph: CausalGraph,
    pub equations: BTreeMap<String, Expr>,
    pub constraints: BTreeMap<String, Constraint>,
    pub exogenous: BTreeMap<String, Distribution>,
    pub params: BTreeMap<String, f64>,
    pub domains: BTreeMap<String, Domain>,
}

impl Scdm {
    pub fn to_parts(&self) -> ModelParts {
        let mut kinds = BTreeMap::new();
        let mut observes = BTreeMap::new();
        for n in self.graph.names() {
            let k = self.graph.kind(n).expect("own variable");
            kinds.insert(n.clone(), k);
            if k == VariableKind::Decision {
                observes.insert(n.clone(), self.graph.parents(n).expect("own variable"));
            }
        }
        ModelParts {
            kinds,
            observes,
            equations: self.equations.clone(),
            constraints: self.constraints.clone(),
            exogenous: self.exogenous.clone(),
            params: self.params.clone(),
            domains: self.domains.clone(),
        }
    }

    /// Copy with one parameter changed.
    pub fn with_param(&self, name: &str, value: f64) -> Result<Scdm, Vec<Diagnostic>> {
        let mut p = self.to_parts();
        if !p.params.contains_key(name) {
            return Err(vec![Diagnostic::on(name, "unknown parameter")]);
        }
        p.params.insert(name.to_string(), value);
        p.build()
    }

    /// Copy with one variable's domain replaced.
    pub fn with_domain(&self, name: &str, domain: Domain) -> Result<Scdm, Vec<Diagnostic>> {
        let mut p = self.to_parts();
        if !p.kinds.contains_key(name) {
            return Err(vec![Diagnostic::on(name, "unknown variable")]);
        }
        p.domains.insert(name.to_string(), domain);
        p.build()
    }

    pub fn kind(&self, v: &str) -> VariableKind {
        self.graph.kind(v).expect("declared variable")
    }

    pub fn roots(&self) -> BTreeSet<String> {
        self.graph.roots()
    }

    pub fn decisions(&self) -> BTreeSet<String> {
        self.graph.variables_of(VariableKind::Decision)
    }

    pub fn utilities(&self) -> BTreeSet<String> {
        self.graph.variables_of(VariableKind::Utility)
    }

    pub fn exogenous_vars(&self) -> BTreeSet<String> {
        self.graph.variables_of(VariableKind::Exogenous)
    }

    pub fn domain(&self, v: &str) -> &Domain {
        &self.domains[v]
    }

    /// Product grid over the given variables' domains, in the given order.
    pub fn grid_over<'a, I: IntoIterator<Item = &'a String>>(&self, vars: I) -> ProductGrid {
        let (names, axes): (Vec<String>, Vec<Axis>) = vars
            .into_iter()
            .map(|v| (v.clone(), self.domains[v].axis()))
            .unzip();
        ProductGrid::new(names, axes)
    }

    pub fn root_grid(&self) -> ProductGrid {
        self.grid_over(&self.roots())
    }

    /// Every invariant violation, one diagnostic each.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let g = &self.graph;
        let mut out = Vec::new();
        let known_params: BTreeSet<String> = self.params.keys().cloned().collect();
        for (p, v) in &self.params {
            if !v.is_finite() {
                out.push(Diagnostic::on(p, "parameter is not finite"));
            }
        }
        for name in g.names() {
            let kind = self.kind(name);
            let parents = g.parents(name).expect("own variable");
            let is_root = g.is_root(name);
            match (kind, self.equations.get(name)) {
                (VariableKind::Decision, Some(_)) => {
                    out.push(Diagnostic::on(name, "decision has structural equation"))
                }
                (VariableKind::Exogenous, Some(_)) => out.push(Diagnostic::on(
                    name,
                    "exogenous variable has structural equation",
                )),
                (VariableKind::State, Some(_)) if is_root => {
                    out.push(Diagnostic::on(name, "root has structural equation"))
                }
                (VariableKind::State | VariableKind::Utility, None) if !is_root => {
                    out.push(Diagnostic::on(name, "missing equation"))
                }
                (_, Some(e)) => {
                    for v in e.variables() {
                        if !parents.contains(&v) {
                            out.push(Diagnostic::on(
                                name,
                                format!("equation references non-parent `{v}`"),
                            ));
                        }
                    }
                    for p in e.parameters() {
                        if !known_params.contains(&p) {
                            out.push(Diagnostic::on(name, format!("unknown parameter `{p}`")));
                        }
                    }
                }
                _ => {}
            }
            match self.domains.get(name) {
                None => out.push(Diagnostic::on(name, "missing domain")),
                Some(d) => {
                    if let Some(p) = d.problems() {
                        out.push(Diagnostic::on(name, p));
                    }
                    let needs_grid = is_root || kind == VariableKind::Decision;
                    if needs_grid && !d.is_bounded() {
                        out.push(Diagnostic::on(
                            name,
                            "root and decision domains must be bounded",
                        ));
                    }
                    if kind == VariableKind::Utility && !matches!(d, Domain::Interval { .. }) {
                        out.push(Diagnostic::on(name, "utility must have a real domain"));
                    }
                }
            }
            if kind == VariableKind::Exogenous && !self.exogenous.contains_key(name) {
                out.push(Diagnostic::on(
                    name,
                    "exogenous variable has no distribution",
                ));
            }
            if kind == VariableKind::Decision {
                for p in &parents {
                    if self.domains.get(p).is_some_and(|d| !d.is_bounded()) {
                        out.push(Diagnostic::on(
                            name,
                            format!("observed parent `{p}` needs a bounded domain"),
                        ));
                    }
                }
                match self.constraints.get(name) {
                    None => out.push(Diagnostic::on(name, "decision has no constraint")),
                    Some(c) => out.extend(self.check_constraint(name, c, &parents, &known_params)),
                }
            }
        }
        for (v, c) in &self.constraints {
            if g.kind(v).ok() != Some(VariableKind::Decision) {
                let _ = c;
                out.push(Diagnostic::on(v, "constraint on non-decision"));
            }
        }
        for (v, dist) in &self.exogenous {
            if g.kind(v).ok() != Some(VariableKind::Exogenous) {
                out.push(Diagnostic::on(v, "distribution on non-exogenous variable"));
                continue;
            }
            for p in dist.problems() {
                out.push(Diagnostic::on(v, p));
            }
            if let Distribution::Markov { given, states, .. } = dist {
                if !g.is_root(given) {
                    out.push(Diagnostic::on(
                        v,
                        format!("markov chain state `{given}` must be a root"),
                    ));
                }
                let mut s = states.clone();
                s.sort_by(f64::total_cmp);
                if s.windows(2).any(|w| w[0] == w[1]) {
                    out.push(Diagnostic::on(v, "repeated markov state"));
                }
            }
        }
        for e in self.equations.keys() {
            if !g.contains(e) {
                out.push(Diagnostic::on(e, "equation for unknown variable"));
            }
        }
        for d in self.domains.keys() {
            if !g.contains(d) {
                out.push(Diagnostic::on(d, "domain for unknown variable"));
            }
        }
        out
    }

    fn check_constraint(
        &self,
        d: &str,
        c: &Constraint,
        parents: &BTreeSet<String>,
        known_params: &BTreeSet<String>,
    ) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        match c {
            Constraint::Set(values) => {
                if values.is_empty() {
                    out.push(Diagnostic::on(d, "empty feasible set"));
                }
                if let Some(Domain::Discrete(dom)) = self.domains.get(d) {
                    for v in values {
                        if !dom.contains(v) {
                            out.push(Diagnostic::on(
                                d,
                                format!("feasible value {v:?} outside domain"),
                            ));
                        }
                    }
                } else {
                    out.push(Diagnostic::on(d, "set constraints need a discrete domain"));
                }
            }
            Constraint::Interval { lower, upper } => {
                let mut bad = false;
                for e in [lower, upper] {
                    for v in e.variables() {
                        if !parents.contains(&v) {
                            bad = true;
                            out.push(Diagnostic::on(
                                d,
                                format!("constraint references non-parent `{v}`"),
                            ));
                        }
                    }
                    for p in e.parameters() {
                        if !known_params.contains(&p) {
                            bad = true;
                            out.push(Diagnostic::on(d, format!("unknown parameter `{p}`")));
                        }
                    }
                }
                let gridded = parents
                    .iter()
                    .all(|p| self.domains.get(p).is_some_and(Domain::is_bounded));
                if !bad && gridded {
                    let grid = self.grid_over(parents);
                    if grid.len() <= 200_000 {
                        for i in 0..grid.len() {
                            let pt = grid.point(i);
                            let look =
                                |n: &str| grid.names().iter().position(|x| x == n).map(|j| pt[j]);
                            let lo = lower.eval(&look, &self.params);
                            let hi = upper.eval(&look, &self.params);
                            if lo > hi + 1e-12 * (1.0 + hi.abs()) {
                                out.push(Diagnostic::on(
                                    d,
                                    format!(
                                        "lower bound {lo:?} exceeds upper bound {hi:?} at {}",
                                        grid.describe(i)
                                    ),
                                ));
                                break;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}
