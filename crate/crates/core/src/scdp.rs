//! Recurring decision processes: a period model closed by an end-state
//! mapping and a discount, solved by value iteration.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::composition::{self, CompositionError, Decomposition};
use crate::eval::{Engine, EvalError, PolicyProfile};
use crate::graph::VariableKind;
use crate::grid::{Axis, ProductGrid, ValueFunction};
use crate::model::{Distribution, Domain, Scdm};
use crate::quadrature;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error("end-state target `{0}` is not a root of the model")]
    NotRoot(String),
    #[error("end-state image `{0}` is not a variable of the model")]
    MissingImage(String),
    #[error("end-state image `{image}` has a different domain from root `{root}`")]
    DomainMismatch { root: String, image: String },
    #[error("end-state mapping sends two roots to `{0}`")]
    NotInjective(String),
    #[error("discount `{0}` is neither a variable nor a parameter")]
    UnknownDiscount(String),
    #[error("discount `{name}` can take values outside [0, 1] (range {lo:?} to {hi:?})")]
    DiscountRange { name: String, lo: f64, hi: f64 },
    #[error("infinite horizon needs a discount bounded below 1 (sup is {0:?})")]
    NoContraction(f64),
    #[error("root `{0}` is not a recurring state; give it a single-point domain or fix its value")]
    UnfixedRoot(String),
    #[error("cannot fix `{0}`: not a root outside the recurring state")]
    BadFix(String),
    #[error("no feasible action for `{decision}` at {at}")]
    EmptyFeasibleSet { decision: String, at: String },
    #[error("decomposition is not orthomodular")]
    NotOrthomodular,
    #[error("`{0}` must belong to the downstream component for a decomposed update")]
    OutsideDownstream(String),
    #[error("infeasible action for `{decision}` at step {step}")]
    InfeasibleStep { decision: String, step: usize },
}

/// The discount source: a model variable or a parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Discount {
    Variable(String),
    Parameter(String),
}

/// A period model with its closure into a recurring process.
#[derive(Debug, Clone, PartialEq)]
pub struct Scdp {
    pub model: Scdm,
    /// Root -> end-of-period image.
    pub end_state: BTreeMap<String, String>,
    pub discount: Discount,
    /// `None` for an infinite horizon.
    pub horizon: Option<usize>,
    /// Values of roots outside the recurring state.
    pub fixed: BTreeMap<String, f64>,
}

/// Per-period bundle extracted from a process: state grid, shock split,
/// transition targets and discount.
#[derive(Debug, Clone)]
pub struct PBlock {
    pub states: ProductGrid,
    pub fixed: BTreeMap<String, f64>,
    /// Shocks some decision depends on (seen before acting).
    pub pre_shocks: Vec<String>,
    /// Shocks realized after all decisions.
    pub post_shocks: Vec<String>,
    pub decisions: Vec<String>,
    /// Image variable for each state coordinate, in grid order.
    pub transition: Vec<String>,
    pub utilities: Vec<String>,
    pub discount: Discount,
    pub horizon: Option<usize>,
}

impl Scdp {
    /// Validates the closure. `discount` names a variable or a parameter.
    pub fn new(
        model: Scdm,
        end_state: BTreeMap<String, String>,
        discount: &str,
        horizon: Option<usize>,
    ) -> Result<Scdp, DynError> {
        let discount = if model.graph.contains(discount) {
            Discount::Variable(discount.to_string())
        } else if model.params.contains_key(discount) {
            Discount::Parameter(discount.to_string())
        } else {
            return Err(DynError::UnknownDiscount(discount.to_string()));
        };
        let s = Scdp {
            model,
            end_state,
            discount,
            horizon,
            fixed: BTreeMap::new(),
        };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<(), DynError> {
        let m = &self.model;
        let mut seen = BTreeSet::new();
        for (root, image) in &self.end_state {
            if !m.graph.contains(root)
                || !m.graph.is_root(root)
                || m.kind(root) != VariableKind::State
            {
                return Err(DynError::NotRoot(root.clone()));
            }
            if !m.graph.contains(image) {
                return Err(DynError::MissingImage(image.clone()));
            }
            if !seen.insert(image.clone()) {
                return Err(DynError::NotInjective(image.clone()));
            }
            if m.domains.get(root) != m.domains.get(image) {
                return Err(DynError::DomainMismatch {
                    root: root.clone(),
                    image: image.clone(),
                });
            }
        }
        let (lo, hi) = self.discount_range();
        if !(lo >= 0.0 && hi <= 1.0) {
            return Err(DynError::DiscountRange {
                name: self.discount_name().to_string(),
                lo,
                hi,
            });
        }
        Ok(())
    }

    pub fn discount_name(&self) -> &str {
        match &self.discount {
            Discount::Variable(n) | Discount::Parameter(n) => n,
        }
    }

    /// Smallest and largest values the discount can take.
    pub fn discount_range(&self) -> (f64, f64) {
        match &self.discount {
            Discount::Parameter(p) => (self.model.params[p], self.model.params[p]),
            Discount::Variable(v) => match self.model.exogenous.get(v) {
                Some(Distribution::Normal { mean, sd }) if *sd == 0.0 => (*mean, *mean),
                Some(Distribution::Normal { .. }) => (f64::NEG_INFINITY, f64::INFINITY),
                Some(Distribution::Iid { states, .. })
                | Some(Distribution::Markov { states, .. }) => (
                    states.iter().copied().fold(f64::INFINITY, f64::min),
                    states.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ),
                None => match self.fixed.get(v) {
                    Some(x) => (*x, *x),
                    None => self.model.domain(v).bounds(),
                },
            },
        }
    }

    /// Roots carried from period to period, sorted.
    pub fn state_vars(&self) -> Vec<String> {
        self.end_state.keys().cloned().collect()
    }

    /// Roots outside the recurring state.
    pub fn uncovered_roots(&self) -> Vec<String> {
        self.model
            .roots()
            .into_iter()
            .filter(|r| !self.end_state.contains_key(r))
            .collect()
    }

    /// Copy with an uncovered root held at `value`.
    pub fn fix(&self, name: &str, value: f64) -> Result<Scdp, DynError> {
        if !self.uncovered_roots().iter().any(|r| r == name) {
            return Err(DynError::BadFix(name.to_string()));
        }
        let mut s = self.clone();
        s.fixed.insert(name.to_string(), value);
        s.check()?;
        Ok(s)
    }

    /// Values of the uncovered roots: explicit fixes, else single-point domains.
    pub fn fixed_values(&self) -> Result<BTreeMap<String, f64>, DynError> {
        let mut out = BTreeMap::new();
        for r in self.uncovered_roots() {
            let v = match self.fixed.get(&r) {
                Some(v) => *v,
                None => match self.model.domain(&r).grid().as_slice() {
                    [only] => *only,
                    _ => return Err(DynError::UnfixedRoot(r)),
                },
            };
            out.insert(r, v);
        }
        Ok(out)
    }

    pub fn with_model(&self, model: Scdm) -> Result<Scdp, DynError> {
        let mut s = self.clone();
        s.model = model;
        s.check()?;
        Ok(s)
    }

    pub fn to_pblock(&self) -> Result<PBlock, DynError> {
        let m = &self.model;
        let states = m.grid_over(&self.state_vars());
        let (pre, post) = split_shocks(m);
        Ok(PBlock {
            states,
            fixed: self.fixed_values()?,
            pre_shocks: pre,
            post_shocks: post,
            decisions: m.decisions().into_iter().collect(),
            transition: self
                .state_vars()
                .iter()
                .map(|r| self.end_state[r].clone())
                .collect(),
            utilities: m.utilities().into_iter().collect(),
            discount: self.discount.clone(),
            horizon: self.horizon,
        })
    }
}

/// Shocks that are ancestors of some decision, and the rest.
pub fn split_shocks(m: &Scdm) -> (Vec<String>, Vec<String>) {
    let mut upstream = BTreeSet::new();
    for d in m.decisions() {
        upstream.extend(m.graph.ancestors(&d).expect("own decision"));
    }
    m.exogenous_vars()
        .into_iter()
        .partition(|z| upstream.contains(z))
}

/// Joint action chosen at one state for one pre-decision shock draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCell {
    pub shocks: Vec<f64>,
    pub probability: f64,
    pub actions: Vec<f64>,
}

/// Greedy tabular policy: per state grid point, per pre-decision shock
/// draw, the maximizing joint action.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyPolicy {
    pub states: ProductGrid,
    pub decisions: Vec<String>,
    pub pre_shocks: Vec<String>,
    pub cells: Vec<Vec<PolicyCell>>,
}

impl GreedyPolicy {
    /// Delimited table: state coordinates, shock values, probability, actions.
    pub fn to_table(&self) -> String {
        let mut head: Vec<String> = self.states.names().to_vec();
        head.extend(self.pre_shocks.iter().cloned());
        head.push("probability".into());
        head.extend(self.decisions.iter().cloned());
        let mut out = head.join(",") + "\n";
        for (i, cells) in self.cells.iter().enumerate() {
            for c in cells {
                let mut row: Vec<String> = self
                    .states
                    .point(i)
                    .into_iter()
                    .map(crate::solver::fmt_num)
                    .collect();
                row.extend(c.shocks.iter().map(|v| crate::solver::fmt_num(*v)));
                row.push(crate::solver::fmt_num(c.probability));
                row.extend(c.actions.iter().map(|v| crate::solver::fmt_num(*v)));
                out.push_str(&row.join(","));
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationTrace {
    /// Sup-norm change recorded at every iteration.
    pub sup_changes: Vec<f64>,
    pub snapshots: Vec<ValueFunction>,
    pub iterations: usize,
}

impl IterationTrace {
    pub fn to_table(&self) -> String {
        let mut out = String::from("iteration,sup_change\n");
        for (i, d) in self.sup_changes.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, crate::solver::fmt_num(*d)));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct IterationReport {
    pub value: ValueFunction,
    pub policy: GreedyPolicy,
    pub trace: IterationTrace,
    pub converged: bool,
    /// Joint-action evaluations across all updates.
    pub evaluations: u64,
}

#[derive(Debug, Clone)]
pub struct DpConfig {
    pub quadrature_nodes: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub keep_snapshots: bool,
    pub parallel: bool,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            quadrature_nodes: 11,
            tol: 1e-8,
            max_iter: 10_000,
            keep_snapshots: false,
            parallel: true,
        }
    }
}

/// Nodes per shock when the greedy controller averages over post-decision shocks.
const QUADRATURE_FOR_LOOKAHEAD: usize = 11;

type Cont<'a> = &'a (dyn Fn(&[f64], &[f64]) -> f64 + Sync);

/// One maximization stage on a state grid: E over pre shocks of the max
/// over joint actions of E over post shocks of utility plus continuation.
struct Stage {
    eng: Engine,
    pre: Vec<usize>,
    post: Vec<usize>,
    /// Equations, in evaluation order, that depend on a post-decision shock.
    post_eqs: Vec<usize>,
    grid: ProductGrid,
    base_slots: Vec<Option<usize>>,
    fixed: Vec<(usize, f64)>,
}

struct StageOut {
    values: Vec<f64>,
    cells: Vec<Vec<PolicyCell>>,
    evaluations: u64,
}

impl Stage {
    fn new(m: &Scdm, grid: ProductGrid, fixed: &BTreeMap<String, f64>) -> Result<Stage, DynError> {
        let eng = Engine::new(m)?;
        let (pre_names, _) = split_shocks(m);
        let (pre, post): (Vec<usize>, Vec<usize>) =
            (0..eng.shocks.len()).partition(|&k| pre_names.contains(&eng.names[eng.shocks[k]]));
        let base_slots = grid.names().iter().map(|n| eng.slot(n)).collect();
        let fixed = fixed
            .iter()
            .filter_map(|(n, v)| eng.slot(n).map(|s| (s, *v)))
            .collect();
        let mut touched = BTreeSet::new();
        for &k in &post {
            touched.extend(
                m.graph
                    .descendants(&eng.names[eng.shocks[k]])
                    .expect("own variable"),
            );
        }
        let post_eqs = eng
            .order
            .iter()
            .copied()
            .filter(|&v| eng.equations[v].is_some() && touched.contains(&eng.names[v]))
            .collect();
        Ok(Stage {
            eng,
            pre,
            post,
            post_eqs,
            grid,
            base_slots,
            fixed,
        })
    }

    fn base(&self, point: &[f64]) -> Vec<f64> {
        let mut vals = vec![f64::NAN; self.eng.len()];
        for &(s, v) in &self.fixed {
            vals[s] = v;
        }
        for (k, s) in self.base_slots.iter().enumerate() {
            if let Some(s) = s {
                vals[*s] = point[k];
            }
        }
        vals
    }

    fn run(&self, cont: Cont<'_>, nodes: usize, parallel: bool) -> Result<StageOut, DynError> {
        let work = |i: usize| self.at_point(i, cont, nodes);
        let results: Vec<Result<(f64, Vec<PolicyCell>, u64), DynError>> = if parallel {
            (0..self.grid.len()).into_par_iter().map(work).collect()
        } else {
            (0..self.grid.len()).map(work).collect()
        };
        let mut out = StageOut {
            values: Vec::with_capacity(results.len()),
            cells: Vec::with_capacity(results.len()),
            evaluations: 0,
        };
        for r in results {
            let (v, c, n) = r?;
            out.values.push(v);
            out.cells.push(c);
            out.evaluations += n;
        }
        Ok(out)
    }

    fn at_point(
        &self,
        i: usize,
        cont: Cont<'_>,
        nodes: usize,
    ) -> Result<(f64, Vec<PolicyCell>, u64), DynError> {
        let eng = &self.eng;
        let point = self.grid.point(i);
        let base = self.base(&point);
        let pre = eng.scenarios(&self.pre, &base, nodes);
        let post = eng.scenarios(&self.post, &base, nodes);
        let mut total = 0.0;
        let mut cells = Vec::with_capacity(pre.len());
        let mut evaluations = 0;
        for (zs, w) in &pre {
            let mut vals = base.clone();
            for (k, &s) in self.pre.iter().enumerate() {
                vals[eng.shocks[s]] = zs[k];
            }
            let mut best = (f64::NEG_INFINITY, None::<Vec<f64>>);
            let mut actions = vec![f64::NAN; eng.decisions.len()];
            self.search(0, &mut vals, &mut actions, &mut |vals, acts| {
                evaluations += 1;
                let v = self.post_value(vals, &post, &point, cont);
                if best.1.is_none() || v > best.0 {
                    best = (v, Some(acts.to_vec()));
                }
            })?;
            total += w * best.0;
            cells.push(PolicyCell {
                shocks: zs.clone(),
                probability: *w,
                actions: best.1.unwrap_or_default(),
            });
        }
        Ok((total, cells, evaluations))
    }

    fn post_value(
        &self,
        vals: &[f64],
        post: &[(Vec<f64>, f64)],
        point: &[f64],
        cont: Cont<'_>,
    ) -> f64 {
        let eng = &self.eng;
        let mut acc = 0.0;
        let mut full = vals.to_vec();
        for (zs, w) in post {
            for (k, &s) in self.post.iter().enumerate() {
                full[eng.shocks[s]] = zs[k];
            }
            for &v in &self.post_eqs {
                eng.eval_equation(v, &mut full);
            }
            let c = cont(&full, point);
            let u = eng.total_utility(&full) + if c.is_nan() { f64::NEG_INFINITY } else { c };
            acc += w * u;
        }
        acc
    }

    /// Realized period under the greedy controller: actions maximize
    /// utility plus continuation given the state and the pre-decision
    /// shocks, averaging over the post-decision shocks, which are then
    /// applied at their drawn values.
    fn lookahead(
        &self,
        closure: &Closure,
        v: &ValueFunction,
        roots: &BTreeMap<String, f64>,
        shocks: &BTreeMap<String, f64>,
        step: usize,
    ) -> Result<Vec<f64>, DynError> {
        let eng = &self.eng;
        let mut vals = vec![f64::NAN; eng.len()];
        for (k, x) in roots {
            if let Some(slot) = eng.slot(k) {
                vals[slot] = *x;
            }
        }
        for &k in &self.pre {
            let slot = eng.shocks[k];
            vals[slot] = shocks[&eng.names[slot]];
        }
        let post = eng.scenarios(&self.post, &vals, QUADRATURE_FOR_LOOKAHEAD);
        let cont = |vals: &[f64], _: &[f64]| closure.value(vals, v);
        let mut best = (f64::NEG_INFINITY, None::<Vec<f64>>);
        let mut actions = vec![f64::NAN; eng.decisions.len()];
        self.search(0, &mut vals.clone(), &mut actions, &mut |vals, acts| {
            let val = self.post_value(vals, &post, &[], &cont);
            if best.1.is_none() || val > best.0 {
                best = (val, Some(acts.to_vec()));
            }
        })
        .map_err(|e| match e {
            DynError::EmptyFeasibleSet { decision, .. } => {
                DynError::InfeasibleStep { decision, step }
            }
            e => e,
        })?;
        let acts = best.1.expect("search visits at least one action");
        for &k in &self.post {
            let slot = eng.shocks[k];
            vals[slot] = shocks[&eng.names[slot]];
        }
        for &x in &eng.order {
            match eng.decision_of[x] {
                Some(di) => vals[x] = acts[di],
                None if eng.equations[x].is_some() => eng.eval_equation(x, &mut vals),
                None => {}
            }
        }
        Ok(vals)
    }

    /// Depth-first over joint actions, candidates at realized parents.
    fn search(
        &self,
        pos: usize,
        vals: &mut Vec<f64>,
        actions: &mut Vec<f64>,
        visit: &mut dyn FnMut(&[f64], &[f64]),
    ) -> Result<(), DynError> {
        let eng = &self.eng;
        if pos == eng.order.len() {
            visit(vals, actions);
            return Ok(());
        }
        let v = eng.order[pos];
        match eng.kinds[v] {
            VariableKind::Decision => {
                let di = eng.decision_of[v].expect("decision");
                let d = &eng.decisions[di];
                let cands = d.candidates(vals);
                if cands.is_empty() {
                    return Err(DynError::EmptyFeasibleSet {
                        decision: d.name.clone(),
                        at: d
                            .parents
                            .iter()
                            .map(|&p| format!("{}={:?}", eng.names[p], vals[p]))
                            .collect::<Vec<_>>()
                            .join(", "),
                    });
                }
                for a in cands {
                    vals[v] = a;
                    actions[di] = a;
                    self.search(pos + 1, vals, actions, visit)?;
                }
                Ok(())
            }
            _ => {
                if eng.equations[v].is_some() {
                    eng.eval_equation(v, vals);
                }
                self.search(pos + 1, vals, actions, visit)
            }
        }
    }
}

/// Discount and next-state reader for one model's slot layout.
struct Closure {
    beta_slot: Option<usize>,
    beta_const: f64,
    images: Vec<usize>,
}

impl Closure {
    fn new(s: &Scdp, eng: &Engine, pb: &PBlock) -> Result<Closure, DynError> {
        let (beta_slot, beta_const) = match &s.discount {
            Discount::Parameter(p) => (None, s.model.params[p]),
            Discount::Variable(v) => match eng.slot(v) {
                Some(slot) => (Some(slot), f64::NAN),
                None => return Err(DynError::OutsideDownstream(v.clone())),
            },
        };
        let images = pb
            .transition
            .iter()
            .map(|n| {
                eng.slot(n)
                    .ok_or_else(|| DynError::OutsideDownstream(n.clone()))
            })
            .collect::<Result<_, _>>()?;
        Ok(Closure {
            beta_slot,
            beta_const,
            images,
        })
    }

    fn value(&self, vals: &[f64], v: &ValueFunction) -> f64 {
        let beta = self.beta_slot.map(|s| vals[s]).unwrap_or(self.beta_const);
        if beta == 0.0 {
            return 0.0;
        }
        beta * v.eval_by(|d| vals[self.images[d]])
    }
}

/// One application of the Bellman operator, with the greedy policy.
pub fn bellman_update_with_policy(
    s: &Scdp,
    v: &ValueFunction,
    cfg: &DpConfig,
) -> Result<(ValueFunction, GreedyPolicy, u64), DynError> {
    let pb = s.to_pblock()?;
    let stage = Stage::new(&s.model, pb.states.clone(), &pb.fixed)?;
    let closure = Closure::new(s, &stage.eng, &pb)?;
    let cont = |vals: &[f64], _: &[f64]| closure.value(vals, v);
    let out = stage.run(&cont, cfg.quadrature_nodes, cfg.parallel)?;
    let policy = GreedyPolicy {
        states: pb.states.clone(),
        decisions: stage.eng.decisions.iter().map(|d| d.name.clone()).collect(),
        pre_shocks: stage
            .pre
            .iter()
            .map(|&k| stage.eng.names[stage.eng.shocks[k]].clone())
            .collect(),
        cells: out.cells,
    };
    Ok((
        ValueFunction::new(pb.states, out.values),
        policy,
        out.evaluations,
    ))
}

pub fn bellman_update(
    s: &Scdp,
    v: &ValueFunction,
    cfg: &DpConfig,
) -> Result<ValueFunction, DynError> {
    Ok(bellman_update_with_policy(s, v, cfg)?.0)
}

/// Zero function on the recurring state grid.
pub fn zero_value(s: &Scdp) -> ValueFunction {
    ValueFunction::zeros(s.model.grid_over(&s.state_vars()))
}

/// Iterates the Bellman operator from zero. Finite horizons run exactly
/// `T` updates; infinite horizons stop at `tol` or `max_iter`.
pub fn value_iteration(s: &Scdp, cfg: &DpConfig) -> Result<IterationReport, DynError> {
    let stage = Stage::new(
        &s.model,
        s.model.grid_over(&s.state_vars()),
        &s.fixed_values()?,
    )?;
    let pb = s.to_pblock()?;
    let closure = Closure::new(s, &stage.eng, &pb)?;
    iterate(s, cfg, |v| {
        let cont = |vals: &[f64], _: &[f64]| closure.value(vals, v);
        let out = stage.run(&cont, cfg.quadrature_nodes, cfg.parallel)?;
        Ok((
            ValueFunction::new(v.grid.clone(), out.values),
            out.evaluations,
        ))
    })
}

/// Value iteration where each update goes through the decomposition of
/// the period model. The reported policy comes from one undecomposed update.
pub fn value_iteration_decomposed(
    s: &Scdp,
    d: &Decomposition,
    cfg: &DpConfig,
) -> Result<IterationReport, DynError> {
    if !composition::is_orthomodular(d)? {
        return Err(DynError::NotOrthomodular);
    }
    iterate(s, cfg, |v| decomposed_bellman_update(s, d, v, cfg))
}

fn iterate(
    s: &Scdp,
    cfg: &DpConfig,
    mut update: impl FnMut(&ValueFunction) -> Result<(ValueFunction, u64), DynError>,
) -> Result<IterationReport, DynError> {
    let (limit, finite) = match s.horizon {
        Some(t) => (t, true),
        None => {
            let (_, hi) = s.discount_range();
            if hi >= 1.0 {
                return Err(DynError::NoContraction(hi));
            }
            (cfg.max_iter, false)
        }
    };
    let mut v = zero_value(s);
    let mut trace = IterationTrace::default();
    let mut evaluations = 0;
    let mut converged = finite;
    let mut previous = zero_value(s);
    for _ in 0..limit {
        let (next, n) = update(&v)?;
        evaluations += n;
        let change = next.sup_distance(&v);
        trace.sup_changes.push(change);
        trace.iterations += 1;
        if cfg.keep_snapshots {
            trace.snapshots.push(next.clone());
        }
        previous = std::mem::replace(&mut v, next);
        if !finite && change < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "value iteration stopped at {} iterations without converging",
            trace.iterations
        );
    }
    // A finite horizon's first-period policy acts against the (T-1)-period value.
    let base = if finite { &previous } else { &v };
    let (_, policy, n) = bellman_update_with_policy(s, base, cfg)?;
    Ok(IterationReport {
        value: v,
        policy,
        trace,
        converged,
        evaluations: evaluations + n,
    })
}

/// Bellman update through a decomposition of the period model: the
/// downstream stage is maximized on its root grid first, and the upstream
/// stage uses that table as its continuation.
pub fn decomposed_bellman_update(
    s: &Scdp,
    d: &Decomposition,
    v: &ValueFunction,
    cfg: &DpConfig,
) -> Result<(ValueFunction, u64), DynError> {
    if !composition::is_orthomodular(d)? {
        return Err(DynError::NotOrthomodular);
    }
    let pb = s.to_pblock()?;
    // Downstream roots: single points where the process fixes them.
    let down_roots: Vec<String> = d.m2.roots().into_iter().collect();
    let axes: Vec<Axis> = down_roots
        .iter()
        .map(|r| match pb.fixed.get(r) {
            Some(x) => Axis::new(vec![*x], false),
            None => d.m2.domain(r).axis(),
        })
        .collect();
    let down_grid = ProductGrid::new(down_roots.clone(), axes);
    let down = Stage::new(&d.m2, down_grid.clone(), &BTreeMap::new())?;
    let closure = Closure::new(s, &down.eng, &pb)?;
    let cont2 = |vals: &[f64], _: &[f64]| closure.value(vals, v);
    let out2 = down.run(&cont2, cfg.quadrature_nodes, cfg.parallel)?;
    let q = ValueFunction::new(down_grid, out2.values);

    let up = Stage::new(&d.m1, pb.states.clone(), &pb.fixed)?;
    let sources: Vec<(Option<usize>, Option<usize>, Option<f64>)> = down_roots
        .iter()
        .map(|r| {
            (
                up.eng.slot(r),
                pb.states.names().iter().position(|n| n == r),
                pb.fixed.get(r).copied(),
            )
        })
        .collect();
    let cont1 = |vals: &[f64], point: &[f64]| {
        q.eval_by(|k| match sources[k] {
            (Some(slot), _, _) => vals[slot],
            (None, Some(i), _) => point[i],
            (None, None, Some(x)) => x,
            _ => f64::NAN,
        })
    };
    let out1 = up.run(&cont1, cfg.quadrature_nodes, cfg.parallel)?;
    Ok((
        ValueFunction::new(pb.states, out1.values),
        out2.evaluations + out1.evaluations,
    ))
}

/// How actions are chosen along a simulated path.
#[derive(Debug, Clone)]
pub enum Controller {
    /// Maximize reward plus discounted value at the realized state and shocks.
    Lookahead(ValueFunction),
    /// Fixed tabular rules.
    Rules(PolicyProfile),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: BTreeMap<String, f64>,
    pub shocks: BTreeMap<String, f64>,
    pub actions: BTreeMap<String, f64>,
    pub reward: f64,
    pub discount: f64,
    /// Reward discounted by the running product of realized discounts, summed.
    pub cumulative: f64,
}

/// Seeded forward simulation of `periods` steps from `x0`.
pub fn simulate(
    s: &Scdp,
    controller: &Controller,
    x0: &BTreeMap<String, f64>,
    periods: usize,
    seed: u64,
) -> Result<Vec<Step>, DynError> {
    simulate_stream(s, controller, x0, periods, seed, 0)
}

/// `paths` independent trajectories; path `i` draws from stream `i` of the
/// seeded generator, so the result does not depend on scheduling.
pub fn simulate_paths(
    s: &Scdp,
    controller: &Controller,
    x0: &BTreeMap<String, f64>,
    periods: usize,
    paths: usize,
    seed: u64,
    parallel: bool,
) -> Result<Vec<Vec<Step>>, DynError> {
    let one = |i: usize| simulate_stream(s, controller, x0, periods, seed, i as u64);
    if parallel {
        (0..paths).into_par_iter().map(one).collect()
    } else {
        (0..paths).map(one).collect()
    }
}

fn simulate_stream(
    s: &Scdp,
    controller: &Controller,
    x0: &BTreeMap<String, f64>,
    periods: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<Step>, DynError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let pb = s.to_pblock()?;
    let stage = Stage::new(&s.model, pb.states.clone(), &pb.fixed)?;
    let eng = &stage.eng;
    let closure = Closure::new(s, eng, &pb)?;
    for n in pb.states.names() {
        if !x0.contains_key(n) {
            return Err(EvalError::MissingRoot(n.clone()).into());
        }
    }
    let mut state: BTreeMap<String, f64> = pb
        .states
        .names()
        .iter()
        .map(|n| (n.clone(), x0[n]))
        .collect();
    let mut path = Vec::with_capacity(periods);
    let mut weight = 1.0;
    let mut cumulative = 0.0;
    for step in 0..periods {
        let mut roots = pb.fixed.clone();
        roots.extend(state.iter().map(|(k, v)| (k.clone(), *v)));
        let shocks = quadrature::sample_exogenous(&s.model, &roots, &mut rng);
        let vals = match controller {
            Controller::Rules(profile) => match eng.realize_slots(profile, &roots, &shocks) {
                Ok(v) => v,
                Err(EvalError::Infeasible { decision, .. }) => {
                    return Err(DynError::InfeasibleStep { decision, step })
                }
                Err(e) => return Err(e.into()),
            },
            Controller::Lookahead(v) => stage.lookahead(&closure, v, &roots, &shocks, step)?,
        };
        let reward = eng.total_utility(&vals);
        let beta = closure
            .beta_slot
            .map(|b| vals[b])
            .unwrap_or(closure.beta_const);
        cumulative += weight * reward;
        weight *= beta;
        let map = eng.to_map(&vals);
        path.push(Step {
            state: state.clone(),
            shocks,
            actions: s
                .model
                .decisions()
                .into_iter()
                .map(|d| (d.clone(), map[&d]))
                .collect(),
            reward,
            discount: beta,
            cumulative,
        });
        for (k, name) in pb.states.names().iter().enumerate() {
            state.insert(name.clone(), vals[closure.images[k]]);
        }
    }
    Ok(path)
}

/// Delimited trajectory, one step per row.
pub fn trajectory_table(path: &[Step]) -> String {
    let Some(first) = path.first() else {
        return String::new();
    };
    let mut head = vec!["step".to_string()];
    head.extend(first.state.keys().cloned());
    head.extend(first.shocks.keys().cloned());
    head.extend(first.actions.keys().cloned());
    head.extend(["reward", "discount", "cumulative"].map(String::from));
    let mut out = head.join(",") + "\n";
    for (t, s) in path.iter().enumerate() {
        let mut row = vec![t.to_string()];
        for m in [&s.state, &s.shocks, &s.actions] {
            row.extend(m.values().map(|v| crate::solver::fmt_num(*v)));
        }
        row.extend([s.reward, s.discount, s.cumulative].map(crate::solver::fmt_num));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Replaces the domain of a recurring state root and its image together.
pub fn with_state_domain(s: &Scdp, root: &str, domain: Domain) -> Result<Scdp, DynError> {
    let mut parts = s.model.to_parts();
    parts.domains.insert(root.to_string(), domain.clone());
    if let Some(img) = s.end_state.get(root) {
        parts.domains.insert(img.clone(), domain);
    }
    let m = parts.build().map_err(CompositionError::Model)?;
    s.with_model(m)
}
