//! Compiled forward evaluation of a model under decision rules.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::expr::Compiled;
use crate::graph::VariableKind;
use crate::grid::ProductGrid;
use crate::model::{Constraint, Domain, Scdm};
use crate::quadrature;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("missing value for root `{0}`")]
    MissingRoot(String),
    #[error("missing value for shock `{0}`")]
    MissingShock(String),
    #[error("profile has no rule for decision `{0}`")]
    MissingRule(String),
    #[error("rule for `{0}` does not match its parent grid")]
    RuleShape(String),
    #[error("decision `{decision}` takes infeasible value {value:?} at {at}")]
    Infeasible {
        decision: String,
        value: f64,
        at: String,
    },
    #[error("cannot compile model: {0}")]
    Compile(String),
}

/// A tabular rule over the grid of a decision's observed parents.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRule {
    pub decision: String,
    pub grid: ProductGrid,
    pub table: Vec<f64>,
}

/// One rule per decision.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolicyProfile {
    pub rules: BTreeMap<String, DecisionRule>,
}

pub(crate) struct DecisionInfo {
    pub name: String,
    pub parents: Vec<usize>,
    pub grid: ProductGrid,
    /// Interpolate rule tables between parent grid points (real-valued decisions).
    pub interpolate: bool,
    lower: Option<Compiled>,
    upper: Option<Compiled>,
    set: Option<Vec<f64>>,
    domain: Domain,
    domain_grid: Vec<f64>,
}

fn tol(x: f64) -> f64 {
    1e-9 * (1.0 + x.abs())
}

impl DecisionInfo {
    /// Feasible bounds at the parent values stored in `vals`.
    fn bounds(&self, vals: &[f64]) -> (f64, f64) {
        match (&self.lower, &self.upper) {
            (Some(l), Some(u)) => (l.eval(vals), u.eval(vals)),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn feasible(&self, a: f64, vals: &[f64]) -> bool {
        if a.is_nan() {
            return false;
        }
        let (dlo, dhi) = self.domain.bounds();
        if a < dlo - tol(dlo) || a > dhi + tol(dhi) {
            return false;
        }
        if let Some(set) = &self.set {
            return set.iter().any(|s| (s - a).abs() <= 1e-12 * (1.0 + s.abs()));
        }
        let (lo, hi) = self.bounds(vals);
        if lo.is_nan() || hi.is_nan() {
            return false;
        }
        a >= lo - tol(lo) && a <= hi + tol(hi)
    }

    /// Candidate actions at the parent values in `vals`, ascending. Real
    /// domains contribute grid points inside the bounds plus the bounds.
    pub fn candidates(&self, vals: &[f64]) -> Vec<f64> {
        if let Some(set) = &self.set {
            let mut s: Vec<f64> = self
                .domain_grid
                .iter()
                .copied()
                .filter(|v| set.contains(v))
                .collect();
            s.dedup();
            return s;
        }
        let (lo, hi) = self.bounds(vals);
        if lo.is_nan() || hi.is_nan() || lo > hi + tol(hi) {
            return Vec::new();
        }
        let mut out: Vec<f64> = self
            .domain_grid
            .iter()
            .copied()
            .filter(|&v| v >= lo - tol(lo) && v <= hi + tol(hi))
            .collect();
        if let Domain::Interval {
            lo: dlo, hi: dhi, ..
        } = self.domain
        {
            for b in [lo, hi] {
                if b.is_finite() && b >= dlo && b <= dhi {
                    out.push(b);
                }
            }
            out.sort_by(f64::total_cmp);
            out.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        out
    }
}

/// A model compiled to slot-indexed form. Slots follow the graph's
/// alphabetical variable ids.
pub struct Engine {
    pub(crate) names: Vec<String>,
    pub(crate) kinds: Vec<VariableKind>,
    pub(crate) order: Vec<usize>,
    pub(crate) equations: Vec<Option<Compiled>>,
    clamp: Vec<Option<(f64, f64)>>,
    pub(crate) decisions: Vec<DecisionInfo>,
    pub(crate) decision_of: Vec<Option<usize>>,
    pub(crate) roots: Vec<usize>,
    pub(crate) shocks: Vec<usize>,
    pub(crate) utilities: Vec<usize>,
    shock_dists: Vec<crate::model::Distribution>,
    /// For Markov shocks, the slot holding the chain's current state.
    shock_given: Vec<Option<usize>>,
}

impl Engine {
    pub fn new(m: &Scdm) -> Result<Engine, EvalError> {
        let g = &m.graph;
        let n = g.len();
        let slot = |name: &str| g.id(name).ok();
        let names: Vec<String> = g.names().to_vec();
        let kinds: Vec<VariableKind> = (0..n).map(|i| g.kind_of(i)).collect();
        let mut equations = vec![None; n];
        for (t, e) in &m.equations {
            let id = g.id(t).map_err(|e| EvalError::Compile(e.to_string()))?;
            equations[id] = Some(e.compile(&slot, &m.params).map_err(EvalError::Compile)?);
        }
        let clamp = (0..n)
            .map(|i| {
                let d = &m.domains[&names[i]];
                let gridded_state = kinds[i] == VariableKind::State && !g.parent_ids(i).is_empty();
                (gridded_state && d.is_bounded()).then(|| d.bounds())
            })
            .collect();
        let mut decisions = Vec::new();
        let mut decision_of = vec![None; n];
        for i in 0..n {
            if kinds[i] != VariableKind::Decision {
                continue;
            }
            let name = names[i].clone();
            let parents: Vec<usize> = g.parent_ids(i).to_vec();
            let pnames: Vec<String> = parents.iter().map(|&p| names[p].clone()).collect();
            let grid = m.grid_over(&pnames);
            let domain = m.domains[&name].clone();
            let (lower, upper, set) = match &m.constraints[&name] {
                Constraint::Interval { lower, upper } => (
                    Some(
                        lower
                            .compile(&slot, &m.params)
                            .map_err(EvalError::Compile)?,
                    ),
                    Some(
                        upper
                            .compile(&slot, &m.params)
                            .map_err(EvalError::Compile)?,
                    ),
                    None,
                ),
                Constraint::Set(values) => (None, None, Some(values.clone())),
            };
            decision_of[i] = Some(decisions.len());
            decisions.push(DecisionInfo {
                name,
                parents,
                grid,
                interpolate: matches!(domain, Domain::Interval { .. }),
                lower,
                upper,
                set,
                domain_grid: domain.grid(),
                domain,
            });
        }
        let roots: Vec<usize> = (0..n)
            .filter(|&i| kinds[i] == VariableKind::State && g.parent_ids(i).is_empty())
            .collect();
        let shocks: Vec<usize> = (0..n)
            .filter(|&i| kinds[i] == VariableKind::Exogenous)
            .collect();
        let utilities = (0..n)
            .filter(|&i| kinds[i] == VariableKind::Utility)
            .collect();
        let shock_dists: Vec<_> = shocks
            .iter()
            .map(|&s| m.exogenous[&names[s]].clone())
            .collect();
        let shock_given = shock_dists
            .iter()
            .map(|d| match d {
                crate::model::Distribution::Markov { given, .. } => slot(given),
                _ => None,
            })
            .collect();
        Ok(Engine {
            names,
            kinds,
            order: g.topological().to_vec(),
            equations,
            clamp,
            decisions,
            decision_of,
            roots,
            shocks,
            utilities,
            shock_dists,
            shock_given,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Evaluates a structural equation into its slot, clamping to the
    /// variable's bounded domain.
    #[inline]
    pub(crate) fn eval_equation(&self, v: usize, vals: &mut [f64]) {
        let eq = self.equations[v]
            .as_ref()
            .expect("non-root state has an equation");
        let mut x = eq.eval(vals);
        if let Some((lo, hi)) = self.clamp[v] {
            if x < lo || x > hi {
                let span = hi - lo;
                if x < lo - 1e-9 * (1.0 + span) || x > hi + 1e-9 * (1.0 + span) {
                    log::warn!(
                        "`{}` = {x:?} outside [{lo:?}, {hi:?}], clamped",
                        self.names[v]
                    );
                }
                x = x.clamp(lo, hi);
            }
        }
        vals[v] = x;
    }

    /// Shock scenarios for the given shock subset (indices into `self.shocks`),
    /// conditioned on Markov chain states already present in `vals`.
    pub(crate) fn scenarios(
        &self,
        which: &[usize],
        vals: &[f64],
        nodes: usize,
    ) -> Vec<(Vec<f64>, f64)> {
        let per: Vec<Vec<(f64, f64)>> = which
            .iter()
            .map(|&k| {
                let state = self.shock_given[k].map(|s| vals[s]);
                quadrature::nodes(&self.shock_dists[k], nodes, state)
            })
            .collect();
        quadrature::tensor(&per)
    }

    pub(crate) fn parent_point(&self, d: &DecisionInfo, vals: &[f64]) -> Vec<f64> {
        d.parents.iter().map(|&p| vals[p]).collect()
    }

    /// Values array holding a rule entry's parent grid point.
    pub(crate) fn entry_vals(&self, d: &DecisionInfo, entry: usize, scratch: &mut [f64]) {
        let pt = d.grid.point(entry);
        for (k, &p) in d.parents.iter().enumerate() {
            scratch[p] = pt[k];
        }
    }

    /// Sum of utilities, with undefined results mapped to negative infinity.
    #[inline]
    pub(crate) fn total_utility(&self, vals: &[f64]) -> f64 {
        let mut s = 0.0;
        for &u in &self.utilities {
            s += vals[u];
        }
        if s.is_nan() {
            f64::NEG_INFINITY
        } else {
            s
        }
    }

    fn describe(&self, ids: &[usize], vals: &[f64]) -> String {
        ids.iter()
            .map(|&i| format!("{}={:?}", self.names[i], vals[i]))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Forward evaluation under a profile for one root point and one shock draw.
    pub fn realize_slots(
        &self,
        profile: &PolicyProfile,
        roots: &BTreeMap<String, f64>,
        shocks: &BTreeMap<String, f64>,
    ) -> Result<Vec<f64>, EvalError> {
        let mut vals = vec![f64::NAN; self.len()];
        for &r in &self.roots {
            vals[r] = *roots
                .get(&self.names[r])
                .ok_or_else(|| EvalError::MissingRoot(self.names[r].clone()))?;
        }
        for &z in &self.shocks {
            vals[z] = *shocks
                .get(&self.names[z])
                .ok_or_else(|| EvalError::MissingShock(self.names[z].clone()))?;
        }
        for &v in &self.order {
            match self.kinds[v] {
                VariableKind::Exogenous => {}
                VariableKind::State if self.equations[v].is_none() => {}
                VariableKind::Decision => {
                    let d = &self.decisions[self.decision_of[v].expect("decision")];
                    let rule = profile
                        .rules
                        .get(&d.name)
                        .ok_or_else(|| EvalError::MissingRule(d.name.clone()))?;
                    if rule.grid.len() != d.grid.len() || rule.table.len() != d.grid.len() {
                        return Err(EvalError::RuleShape(d.name.clone()));
                    }
                    let pt = self.parent_point(d, &vals);
                    let a: f64 = rule
                        .grid
                        .stencil(&pt, d.interpolate)
                        .iter()
                        .map(|&(i, w)| w * rule.table[i])
                        .sum();
                    if !d.feasible(a, &vals) {
                        return Err(EvalError::Infeasible {
                            decision: d.name.clone(),
                            value: a,
                            at: self.describe(&d.parents, &vals),
                        });
                    }
                    vals[v] = a;
                }
                _ => self.eval_equation(v, &mut vals),
            }
        }
        Ok(vals)
    }

    /// Checks that every rule entry is feasible at its own parent grid point.
    pub fn check_profile(&self, profile: &PolicyProfile) -> Result<(), EvalError> {
        let mut scratch = vec![0.0; self.len()];
        for d in &self.decisions {
            let rule = profile
                .rules
                .get(&d.name)
                .ok_or_else(|| EvalError::MissingRule(d.name.clone()))?;
            if rule.table.len() != d.grid.len() {
                return Err(EvalError::RuleShape(d.name.clone()));
            }
            for (e, &a) in rule.table.iter().enumerate() {
                self.entry_vals(d, e, &mut scratch);
                if !d.feasible(a, &scratch) {
                    return Err(EvalError::Infeasible {
                        decision: d.name.clone(),
                        value: a,
                        at: d.grid.describe(e),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_map(&self, vals: &[f64]) -> BTreeMap<String, f64> {
        self.names
            .iter()
            .cloned()
            .zip(vals.iter().copied())
            .collect()
    }
}

/// A model closed by a profile and root values: a function of shocks alone.
pub struct InducedScm<'a> {
    engine: Engine,
    profile: &'a PolicyProfile,
    roots: BTreeMap<String, f64>,
    shock_names: Vec<String>,
}

impl InducedScm<'_> {
    /// Names of the remaining free inputs.
    pub fn free_inputs(&self) -> &[String] {
        &self.shock_names
    }

    pub fn realize(
        &self,
        shocks: &BTreeMap<String, f64>,
    ) -> Result<BTreeMap<String, f64>, EvalError> {
        let vals = self
            .engine
            .realize_slots(self.profile, &self.roots, shocks)?;
        Ok(self.engine.to_map(&vals))
    }
}

/// Replaces every decision by its rule and pins the roots.
pub fn induce<'a>(
    m: &Scdm,
    profile: &'a PolicyProfile,
    roots: &BTreeMap<String, f64>,
) -> Result<InducedScm<'a>, EvalError> {
    let engine = Engine::new(m)?;
    for &r in &engine.roots {
        if !roots.contains_key(&engine.names[r]) {
            return Err(EvalError::MissingRoot(engine.names[r].clone()));
        }
    }
    engine.check_profile(profile)?;
    let shock_names = engine
        .shocks
        .iter()
        .map(|&s| engine.names[s].clone())
        .collect();
    Ok(InducedScm {
        engine,
        profile,
        roots: roots.clone(),
        shock_names,
    })
}

/// Values of every variable for one root point and one shock realization.
pub fn realize(
    m: &Scdm,
    profile: &PolicyProfile,
    roots: &BTreeMap<String, f64>,
    shocks: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let engine = Engine::new(m)?;
    let vals = engine.realize_slots(profile, roots, shocks)?;
    Ok(engine.to_map(&vals))
}

/// Sum of the utility variables in a realization.
pub fn total_utility(m: &Scdm, realization: &BTreeMap<String, f64>) -> f64 {
    let s: f64 = m.utilities().iter().map(|u| realization[u]).sum();
    if s.is_nan() {
        f64::NEG_INFINITY
    } else {
        s
    }
}

/// A rule that always picks the same action.
pub fn constant_rule(m: &Scdm, decision: &str, action: f64) -> DecisionRule {
    let parents = m.graph.parents(decision).expect("declared decision");
    let grid = m.grid_over(&parents);
    let n = grid.len();
    DecisionRule {
        decision: decision.to_string(),
        grid,
        table: vec![action; n],
    }
}

/// A rule tabulated from a function of the parent grid point.
pub fn rule_from_fn(
    m: &Scdm,
    decision: &str,
    f: impl Fn(&BTreeMap<String, f64>) -> f64,
) -> DecisionRule {
    let parents = m.graph.parents(decision).expect("declared decision");
    let grid = m.grid_over(&parents);
    let table = (0..grid.len())
        .map(|i| {
            let pt: BTreeMap<String, f64> =
                grid.names().iter().cloned().zip(grid.point(i)).collect();
            f(&pt)
        })
        .collect();
    DecisionRule {
        decision: decision.to_string(),
        grid,
        table,
    }
}
