//! Static solvers: exhaustive rule enumeration, decomposed backward solving
//! through a bridge value function, and omniscient action search.
//!
//! Rules are enumerated lazily: at each root point only the rule entries that
//! the forward evaluation actually consults are branched on, so two profiles
//! that differ only in unconsulted entries count once.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::composition::{self, CompositionError, Decomposition};
use crate::eval::{DecisionInfo, DecisionRule, Engine, EvalError, PolicyProfile};
use crate::graph::VariableKind;
use crate::grid::{ProductGrid, ValueFunction};
use crate::model::Scdm;
use crate::quadrature;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error("search refused: more than {cap} policy evaluations needed (full tabular profile space has {size:.3e} profiles)")]
    TooLarge { size: f64, cap: u64 },
    #[error("decision `{decision}` has no feasible action at {at}")]
    EmptyFeasibleSet { decision: String, at: String },
    #[error("every candidate is infeasible at {at}")]
    InfeasibleCell { at: String },
    #[error("decomposition is not orthomodular: bridge {bridge} is not d-separated from the downstream utilities given the downstream decisions and their parents")]
    NotOrthomodular { bridge: String },
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Gauss–Hermite nodes per normal shock.
    pub quadrature_nodes: usize,
    /// Refuse searches needing more evaluations than this.
    pub max_evaluations: u64,
    pub parallel: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            quadrature_nodes: 11,
            max_evaluations: 200_000_000,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub profile: PolicyProfile,
    pub value: ValueFunction,
    /// Complete expected-utility evaluations of candidate profiles.
    pub policy_evaluations: u64,
    pub wall_time: Duration,
}

type Continuation<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

/// Best assignment found at one root point.
struct PointResult {
    value: f64,
    assignment: Vec<(usize, usize, f64)>,
    evaluations: u64,
}

struct Search<'a> {
    eng: &'a Engine,
    scenarios: &'a [(Vec<f64>, f64)],
    base: Vec<f64>,
    cont: Option<Continuation<'a>>,
    assign: Vec<Vec<f64>>,
    candidates: HashMap<(usize, usize), Vec<f64>>,
    trail: Vec<(usize, usize)>,
    best: f64,
    best_assign: Option<Vec<(usize, usize, f64)>>,
    evaluations: u64,
    cap: u64,
    /// Evaluations spent by all points of the current solve.
    spent: &'a AtomicU64,
    error: Option<SolveError>,
}

/// Leaves between updates of the shared evaluation count.
const BUDGET_BATCH: u64 = 1024;

impl<'a> Search<'a> {
    fn new(
        eng: &'a Engine,
        scenarios: &'a [(Vec<f64>, f64)],
        base: Vec<f64>,
        cont: Option<Continuation<'a>>,
        cap: u64,
        spent: &'a AtomicU64,
    ) -> Self {
        Search {
            eng,
            scenarios,
            base,
            cont,
            assign: eng
                .decisions
                .iter()
                .map(|d| vec![f64::NAN; d.grid.len()])
                .collect(),
            candidates: HashMap::new(),
            trail: Vec::new(),
            best: f64::NEG_INFINITY,
            best_assign: None,
            evaluations: 0,
            cap,
            spent,
            error: None,
        }
    }

    fn scenario_vals(&self, s: usize) -> Vec<f64> {
        let mut vals = self.base.clone();
        for (k, &z) in self.eng.shocks.iter().enumerate() {
            vals[z] = self.scenarios[s].0[k];
        }
        vals
    }

    fn leaf(&mut self, value: f64) {
        self.evaluations += 1;
        let over = if self.evaluations.is_multiple_of(BUDGET_BATCH) {
            self.spent.fetch_add(BUDGET_BATCH, Ordering::Relaxed) + BUDGET_BATCH > self.cap
        } else {
            self.evaluations > self.cap
        };
        if over && self.error.is_none() {
            self.error = Some(SolveError::TooLarge {
                size: f64::NAN,
                cap: self.cap,
            });
        }
        if self.best_assign.is_none() || value > self.best {
            self.best = value;
            self.best_assign = Some(
                self.trail
                    .iter()
                    .map(|&(d, e)| (d, e, self.assign[d][e]))
                    .collect(),
            );
        }
    }

    fn candidates_at(&mut self, di: usize, entry: usize) -> Vec<f64> {
        if let Some(c) = self.candidates.get(&(di, entry)) {
            return c.clone();
        }
        let d: &DecisionInfo = &self.eng.decisions[di];
        let mut scratch = vec![0.0; self.eng.len()];
        self.eng.entry_vals(d, entry, &mut scratch);
        let c = d.candidates(&scratch);
        self.candidates.insert((di, entry), c.clone());
        c
    }

    fn run(&mut self) {
        if self.scenarios.is_empty() {
            return;
        }
        let mut vals = self.scenario_vals(0);
        self.go(0, 0, &mut vals, 0.0);
    }

    fn go(&mut self, s: usize, pos: usize, vals: &mut Vec<f64>, acc: f64) {
        if self.error.is_some() {
            return;
        }
        let eng = self.eng;
        if pos == eng.order.len() {
            let mut u = eng.total_utility(vals);
            if let Some(c) = self.cont {
                let cv = c(vals);
                u = if cv.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    u + cv
                };
            }
            let acc = acc + self.scenarios[s].1 * u;
            if acc == f64::NEG_INFINITY || s + 1 == self.scenarios.len() {
                self.leaf(acc);
                return;
            }
            let mut next = self.scenario_vals(s + 1);
            self.go(s + 1, 0, &mut next, acc);
            return;
        }
        let v = eng.order[pos];
        match eng.kinds[v] {
            VariableKind::Exogenous => self.go(s, pos + 1, vals, acc),
            VariableKind::State if eng.equations[v].is_none() => self.go(s, pos + 1, vals, acc),
            VariableKind::Decision => {
                let di = eng.decision_of[v].expect("decision");
                let d = &eng.decisions[di];
                let pt = eng.parent_point(d, vals);
                let stencil = d.grid.stencil(&pt, d.interpolate);
                if let Some(&(entry, _)) =
                    stencil.iter().find(|(e, _)| self.assign[di][*e].is_nan())
                {
                    let cands = self.candidates_at(di, entry);
                    if cands.is_empty() {
                        self.error = Some(SolveError::EmptyFeasibleSet {
                            decision: d.name.clone(),
                            at: d.grid.describe(entry),
                        });
                        return;
                    }
                    for a in cands {
                        self.assign[di][entry] = a;
                        self.trail.push((di, entry));
                        self.go(s, pos, vals, acc);
                        self.trail.pop();
                        if self.error.is_some() {
                            break;
                        }
                    }
                    self.assign[di][entry] = f64::NAN;
                    return;
                }
                let a: f64 = stencil.iter().map(|&(e, w)| w * self.assign[di][e]).sum();
                if !d.feasible(a, vals) {
                    self.leaf(f64::NEG_INFINITY);
                    return;
                }
                vals[v] = a;
                self.go(s, pos + 1, vals, acc)
            }
            _ => {
                eng.eval_equation(v, vals);
                self.go(s, pos + 1, vals, acc)
            }
        }
    }
}

fn base_vals(eng: &Engine, grid: &ProductGrid, point: &[f64]) -> Vec<f64> {
    let mut vals = vec![f64::NAN; eng.len()];
    for (k, name) in grid.names().iter().enumerate() {
        if let Some(s) = eng.slot(name) {
            vals[s] = point[k];
        }
    }
    vals
}

fn all_shocks(eng: &Engine) -> Vec<usize> {
    (0..eng.shocks.len()).collect()
}

/// Product of candidate counts over every rule entry: the size of the full
/// tabular profile space.
pub fn profile_space_size(m: &Scdm) -> Result<f64, SolveError> {
    let eng = Engine::new(m)?;
    let mut size = 1.0f64;
    let mut scratch = vec![0.0; eng.len()];
    for d in &eng.decisions {
        for e in 0..d.grid.len() {
            eng.entry_vals(d, e, &mut scratch);
            size *= d.candidates(&scratch).len() as f64;
        }
    }
    Ok(size)
}

fn map_points<T: Send>(n: usize, parallel: bool, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Best rule assignment and value at every point of `grid` (whose names
/// must include every root of the engine's model).
fn solve_on_grid(
    m: &Scdm,
    eng: &Engine,
    grid: &ProductGrid,
    cfg: &SolverConfig,
    cont: Option<&(dyn Fn(&[f64], &[f64]) -> f64 + Sync)>,
) -> Result<Vec<PointResult>, SolveError> {
    let shocks = all_shocks(eng);
    let spent = AtomicU64::new(0);
    let results = map_points(grid.len(), cfg.parallel, |i| {
        let point = grid.point(i);
        let base = base_vals(eng, grid, &point);
        let scenarios = eng.scenarios(&shocks, &base, cfg.quadrature_nodes);
        let bound;
        let cont_ref: Option<Continuation<'_>> = match cont {
            Some(c) => {
                bound = move |vals: &[f64]| c(vals, &point);
                Some(&bound)
            }
            None => None,
        };
        let mut search = Search::new(eng, &scenarios, base, cont_ref, cfg.max_evaluations, &spent);
        search.run();
        spent.fetch_add(search.evaluations % BUDGET_BATCH, Ordering::Relaxed);
        match search.error {
            Some(SolveError::TooLarge { cap, .. }) => Err(SolveError::TooLarge {
                size: profile_space_size(m).unwrap_or(f64::NAN),
                cap,
            }),
            Some(e) => Err(e),
            None => {
                if search.best == f64::NEG_INFINITY {
                    return Err(SolveError::InfeasibleCell {
                        at: grid.describe(i),
                    });
                }
                Ok(PointResult {
                    value: search.best,
                    assignment: search.best_assign.unwrap_or_default(),
                    evaluations: search.evaluations,
                })
            }
        }
    });
    let out: Vec<PointResult> = results.into_iter().collect::<Result<_, _>>()?;
    let total: u64 = out.iter().map(|r| r.evaluations).sum();
    if total > cfg.max_evaluations {
        return Err(SolveError::TooLarge {
            size: profile_space_size(m)?,
            cap: cfg.max_evaluations,
        });
    }
    Ok(out)
}

/// Merges per-point assignments into one profile: earlier grid points win,
/// entries never consulted take their smallest feasible action.
fn stitch(eng: &Engine, results: &[PointResult]) -> Result<PolicyProfile, SolveError> {
    let mut tables: Vec<Vec<f64>> = eng
        .decisions
        .iter()
        .map(|d| vec![f64::NAN; d.grid.len()])
        .collect();
    for r in results {
        for &(d, e, a) in &r.assignment {
            if tables[d][e].is_nan() {
                tables[d][e] = a;
            }
        }
    }
    let mut scratch = vec![0.0; eng.len()];
    let mut rules = BTreeMap::new();
    for (di, d) in eng.decisions.iter().enumerate() {
        for e in 0..d.grid.len() {
            if tables[di][e].is_nan() {
                eng.entry_vals(d, e, &mut scratch);
                tables[di][e] = *d.candidates(&scratch).first().ok_or_else(|| {
                    SolveError::EmptyFeasibleSet {
                        decision: d.name.clone(),
                        at: d.grid.describe(e),
                    }
                })?;
            }
        }
        rules.insert(
            d.name.clone(),
            DecisionRule {
                decision: d.name.clone(),
                grid: d.grid.clone(),
                table: std::mem::take(&mut tables[di]),
            },
        );
    }
    Ok(PolicyProfile { rules })
}

/// Exhaustive search over rule profiles at every root grid point.
pub fn solve_enumerate(m: &Scdm, cfg: &SolverConfig) -> Result<SolveReport, SolveError> {
    let start = Instant::now();
    let eng = Engine::new(m)?;
    let grid = m.root_grid();
    let results = solve_on_grid(m, &eng, &grid, cfg, None)?;
    let profile = stitch(&eng, &results)?;
    Ok(SolveReport {
        policy_evaluations: results.iter().map(|r| r.evaluations).sum(),
        value: ValueFunction::new(grid, results.iter().map(|r| r.value).collect()),
        profile,
        wall_time: start.elapsed(),
    })
}

/// Value of the downstream component at each point of its root grid,
/// together with the rules that attain it.
pub fn bridge_value(m2: &Scdm, cfg: &SolverConfig) -> Result<SolveReport, SolveError> {
    solve_enumerate(m2, cfg)
}

/// Backward solve: downstream component first, then the upstream component
/// with the bridge value as continuation.
pub fn solve_decomposed(d: &Decomposition, cfg: &SolverConfig) -> Result<SolveReport, SolveError> {
    let start = Instant::now();
    if !composition::is_orthomodular(d)? {
        return Err(SolveError::NotOrthomodular {
            bridge: format!(
                "{{{}}}",
                d.bridge.iter().cloned().collect::<Vec<_>>().join(", ")
            ),
        });
    }
    let downstream = bridge_value(&d.m2, cfg)?;
    let v2 = &downstream.value;
    let eng1 = Engine::new(&d.m1)?;
    let grid0 = d.m0.root_grid();
    // Where each downstream root comes from: an upstream slot or the root point.
    let sources: Vec<(Option<usize>, Option<usize>)> = v2
        .over()
        .iter()
        .map(|name| {
            (
                eng1.slot(name),
                grid0.names().iter().position(|n| n == name),
            )
        })
        .collect();
    let cont = |vals: &[f64], point: &[f64]| -> f64 {
        let y: Vec<f64> = sources
            .iter()
            .map(|(s1, s0)| match (s1, s0) {
                (Some(s), _) => vals[*s],
                (None, Some(k)) => point[*k],
                (None, None) => f64::NAN,
            })
            .collect();
        v2.eval(&y)
    };
    let results = solve_on_grid(&d.m1, &eng1, &grid0, cfg, Some(&cont))?;
    let mut profile = stitch(&eng1, &results)?;
    profile.rules.extend(downstream.profile.rules);
    Ok(SolveReport {
        policy_evaluations: downstream.policy_evaluations
            + results.iter().map(|r| r.evaluations).sum::<u64>(),
        value: ValueFunction::new(grid0, results.iter().map(|r| r.value).collect()),
        profile,
        wall_time: start.elapsed(),
    })
}

/// Expected total utility of a profile at one root point, by quadrature.
/// An infeasible decision anywhere yields negative infinity.
pub fn expected_utility(
    m: &Scdm,
    profile: &PolicyProfile,
    roots: &BTreeMap<String, f64>,
    cfg: &SolverConfig,
) -> Result<f64, SolveError> {
    let eng = Engine::new(m)?;
    eng.check_profile(profile)?;
    let mut base = vec![f64::NAN; eng.len()];
    for &r in &eng.roots {
        base[r] = *roots
            .get(&eng.names[r])
            .ok_or_else(|| EvalError::MissingRoot(eng.names[r].clone()))?;
    }
    let scenarios = eng.scenarios(&all_shocks(&eng), &base, cfg.quadrature_nodes);
    let mut total = 0.0;
    for (shock_vals, w) in &scenarios {
        let shocks: BTreeMap<String, f64> = eng
            .shocks
            .iter()
            .map(|&z| eng.names[z].clone())
            .zip(shock_vals.iter().copied())
            .collect();
        match eng.realize_slots(profile, roots, &shocks) {
            Ok(vals) => total += w * eng.total_utility(&vals),
            Err(EvalError::Infeasible { .. }) => return Ok(f64::NEG_INFINITY),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(total)
}

/// Seeded Monte Carlo estimate of expected utility: (mean, standard error).
pub fn expected_utility_monte_carlo(
    m: &Scdm,
    profile: &PolicyProfile,
    roots: &BTreeMap<String, f64>,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64), SolveError> {
    let eng = Engine::new(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let shocks = quadrature::sample_exogenous(m, roots, &mut rng);
        let u = match eng.realize_slots(profile, roots, &shocks) {
            Ok(vals) => eng.total_utility(&vals),
            Err(EvalError::Infeasible { .. }) => f64::NEG_INFINITY,
            Err(e) => return Err(e.into()),
        };
        sum += u;
        sum_sq += u * u;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Best joint action, chosen before the shocks are seen, at one root point.
pub fn omniscient_actions(
    m: &Scdm,
    roots: &BTreeMap<String, f64>,
    cfg: &SolverConfig,
) -> Result<(BTreeMap<String, f64>, f64), SolveError> {
    let eng = Engine::new(m)?;
    let mut base = vec![f64::NAN; eng.len()];
    for &r in &eng.roots {
        base[r] = *roots
            .get(&eng.names[r])
            .ok_or_else(|| EvalError::MissingRoot(eng.names[r].clone()))?;
    }
    let scenarios = eng.scenarios(&all_shocks(&eng), &base, cfg.quadrature_nodes);
    let mut first = base.clone();
    for (k, &z) in eng.shocks.iter().enumerate() {
        first[z] = scenarios[0].0[k];
    }
    let mut best = (f64::NEG_INFINITY, None::<Vec<f64>>);
    let mut actions = vec![f64::NAN; eng.decisions.len()];
    joint_search(&eng, 0, &mut first, &mut actions, &mut |acts| {
        let v = fixed_action_value(&eng, &base, &scenarios, acts);
        if best.1.is_none() || v > best.0 {
            best = (v, Some(acts.to_vec()));
        }
    })?;
    let acts = best.1.ok_or_else(|| SolveError::InfeasibleCell {
        at: format!("{roots:?}"),
    })?;
    if best.0 == f64::NEG_INFINITY {
        return Err(SolveError::InfeasibleCell {
            at: format!("{roots:?}"),
        });
    }
    let map = eng
        .decisions
        .iter()
        .zip(acts)
        .map(|(d, a)| (d.name.clone(), a))
        .collect();
    Ok((map, best.0))
}

/// Depth-first over joint actions in topological order, with candidate sets
/// taken from the values in `vals`.
fn joint_search(
    eng: &Engine,
    pos: usize,
    vals: &mut Vec<f64>,
    actions: &mut Vec<f64>,
    visit: &mut dyn FnMut(&[f64]),
) -> Result<(), SolveError> {
    if pos == eng.order.len() {
        visit(actions);
        return Ok(());
    }
    let v = eng.order[pos];
    match eng.kinds[v] {
        VariableKind::Exogenous => joint_search(eng, pos + 1, vals, actions, visit),
        VariableKind::State if eng.equations[v].is_none() => {
            joint_search(eng, pos + 1, vals, actions, visit)
        }
        VariableKind::Decision => {
            let di = eng.decision_of[v].expect("decision");
            let d = &eng.decisions[di];
            let cands = d.candidates(vals);
            if cands.is_empty() {
                return Err(SolveError::EmptyFeasibleSet {
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
                joint_search(eng, pos + 1, vals, actions, visit)?;
            }
            Ok(())
        }
        _ => {
            eng.eval_equation(v, vals);
            joint_search(eng, pos + 1, vals, actions, visit)
        }
    }
}

fn fixed_action_value(
    eng: &Engine,
    base: &[f64],
    scenarios: &[(Vec<f64>, f64)],
    actions: &[f64],
) -> f64 {
    let mut total = 0.0;
    for (shock_vals, w) in scenarios {
        let mut vals = base.to_vec();
        for (k, &z) in eng.shocks.iter().enumerate() {
            vals[z] = shock_vals[k];
        }
        for &v in &eng.order {
            match eng.kinds[v] {
                VariableKind::Exogenous => {}
                VariableKind::State if eng.equations[v].is_none() => {}
                VariableKind::Decision => {
                    let di = eng.decision_of[v].expect("decision");
                    if !eng.decisions[di].feasible(actions[di], &vals) {
                        return f64::NEG_INFINITY;
                    }
                    vals[v] = actions[di];
                }
                _ => eng.eval_equation(v, &mut vals),
            }
        }
        total += w * eng.total_utility(&vals);
    }
    total
}

/// Realized action of every decision whose parents are all roots, at each
/// root grid point, for tabulation next to the value.
pub fn root_actions(
    m: &Scdm,
    profile: &PolicyProfile,
    grid: &ProductGrid,
) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for d in m.decisions() {
        let parents = m.graph.parents(&d).expect("declared decision");
        if !parents.iter().all(|p| m.graph.is_root(p)) {
            continue;
        }
        let rule = &profile.rules[&d];
        let col = (0..grid.len())
            .map(|i| {
                let pt = grid.point(i);
                let ppt: Vec<f64> = rule
                    .grid
                    .names()
                    .iter()
                    .map(|n| {
                        grid.names()
                            .iter()
                            .position(|x| x == n)
                            .map(|k| pt[k])
                            .unwrap_or(f64::NAN)
                    })
                    .collect();
                let interp = matches!(m.domains[&d], crate::model::Domain::Interval { .. });
                rule.grid
                    .stencil(&ppt, interp)
                    .iter()
                    .map(|&(e, w)| w * rule.table[e])
                    .sum()
            })
            .collect();
        out.push((d, col));
    }
    out
}

/// 17 significant digits, fixed layout.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Delimited table: one row per grid point, extra columns, value last.
pub fn value_table(value: &ValueFunction, extra: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    let mut header: Vec<String> = value.over().to_vec();
    header.extend(extra.iter().map(|(n, _)| n.clone()));
    header.push("value".into());
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..value.grid.len() {
        let mut row: Vec<String> = value.grid.point(i).into_iter().map(fmt_num).collect();
        row.extend(extra.iter().map(|(_, c)| fmt_num(c[i])));
        row.push(fmt_num(value.values[i]));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Decomposes at a bridge and solves, or enumerates when that is refused.
pub fn solve_auto(
    m: &Scdm,
    bridge: Option<&std::collections::BTreeSet<String>>,
    force_enumerate: bool,
    cfg: &SolverConfig,
) -> Result<(SolveReport, bool), SolveError> {
    if let (Some(b), false) = (bridge, force_enumerate) {
        let verdict = composition::check_bridge(m, b)?;
        if verdict.orthomodular {
            let d = verdict.decomposition.expect("valid decomposition");
            return Ok((solve_decomposed(&d, cfg)?, true));
        }
    }
    Ok((solve_enumerate(m, cfg)?, false))
}
