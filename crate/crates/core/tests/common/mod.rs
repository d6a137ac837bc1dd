//! Shared test support: a path-enumeration d-separation oracle, DAG
//! generators, a generator of random valid model sources, and a
//! brute-force strategic reliance oracle.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scdm::dsl::{load_file, lower_str, LowerOptions, Lowered};
use scdm::eval::{induce, DecisionRule, PolicyProfile};
use scdm::{CausalGraph, Scdm, VariableKind};

pub const CORPUS: [&str; 7] = [
    "consumption_portfolio",
    "consumption_saving",
    "costly_memory",
    "latent_income",
    "stochastic_beta",
    "two_period",
    "two_period_habit",
];

pub fn model_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("models")
        .join(format!("{name}.scdm"))
}

pub fn load(name: &str) -> Lowered {
    load_with(name, &[])
}

pub fn load_with(name: &str, variants: &[&str]) -> Lowered {
    let opts = LowerOptions {
        variants: variants.iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    };
    load_file(&model_path(name), &opts).unwrap_or_else(|d| panic!("{name}: {d:?}"))
}

pub fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// A DAG as an edge list over nodes `0..n`.
#[derive(Debug, Clone)]
pub struct Dag {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
}

impl Dag {
    pub fn name(i: usize) -> String {
        format!("v{i}")
    }

    pub fn graph(&self) -> CausalGraph {
        let mut b = CausalGraph::builder();
        for i in 0..self.n {
            b.variable(Dag::name(i), VariableKind::State);
        }
        for &(a, c) in &self.edges {
            b.edge(Dag::name(a), Dag::name(c));
        }
        b.finalize().expect("acyclic by construction")
    }

    fn parents(&self, v: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.1 == v)
            .map(|e| e.0)
            .collect()
    }

    fn children(&self, v: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.0 == v)
            .map(|e| e.1)
            .collect()
    }

    fn descendants_or_self(&self, v: usize) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        let mut stack = vec![v];
        seen[v] = true;
        while let Some(u) = stack.pop() {
            for c in self.children(u) {
                if !seen[c] {
                    seen[c] = true;
                    stack.push(c);
                }
            }
        }
        seen
    }
}

/// Every DAG on `n` nodes whose edges all point from lower to higher index.
/// Up to relabeling this covers every DAG on `n` nodes.
pub fn all_ordered_dags(n: usize) -> impl Iterator<Item = Dag> {
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .collect();
    let count = 1u64 << pairs.len();
    (0..count).map(move |mask| Dag {
        n,
        edges: pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, &e)| e)
            .collect(),
    })
}

/// A random DAG: random node order, each forward pair joined with probability `p`.
pub fn random_dag(rng: &mut impl Rng, n: usize, p: f64) -> Dag {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((order[i], order[j]));
            }
        }
    }
    Dag { n, edges }
}

/// d-separation by enumerating every simple path in the skeleton and
/// checking each interior node: a collider must be in `z` or have a
/// descendant in `z`; any other node must be outside `z`. Members of `z`
/// are removed from `x` and `y` first.
pub struct PathOracle {
    n: usize,
    edge: Vec<Vec<bool>>,
    /// `desc[v]` has bit `w` set when `w` is `v` or a descendant of `v`.
    desc: Vec<u32>,
    neighbours: Vec<Vec<usize>>,
}

impl PathOracle {
    pub fn new(dag: &Dag) -> PathOracle {
        let n = dag.n;
        let mut edge = vec![vec![false; n]; n];
        for &(a, b) in &dag.edges {
            edge[a][b] = true;
        }
        let desc = (0..n)
            .map(|v| {
                dag.descendants_or_self(v)
                    .iter()
                    .enumerate()
                    .filter(|(_, &d)| d)
                    .fold(0u32, |acc, (w, _)| acc | 1 << w)
            })
            .collect();
        let neighbours = (0..n)
            .map(|v| (0..n).filter(|&w| edge[v][w] || edge[w][v]).collect())
            .collect();
        PathOracle {
            n,
            edge,
            desc,
            neighbours,
        }
    }

    fn open(&self, a: usize, m: usize, b: usize, z: u32) -> bool {
        if self.edge[a][m] && self.edge[b][m] {
            self.desc[m] & z != 0
        } else {
            z >> m & 1 == 0
        }
    }

    fn walk(&self, path: &mut Vec<usize>, on_path: &mut u32, targets: u32, z: u32) -> bool {
        let last = *path.last().expect("nonempty path");
        if path.len() > 1 && targets >> last & 1 == 1 {
            return true;
        }
        for &w in &self.neighbours[last] {
            if *on_path >> w & 1 == 1 {
                continue;
            }
            // Extending the path makes `last` interior; prune when it blocks.
            if path.len() >= 2 && !self.open(path[path.len() - 2], last, w, z) {
                continue;
            }
            path.push(w);
            *on_path |= 1 << w;
            if self.walk(path, on_path, targets, z) {
                return true;
            }
            *on_path &= !(1 << w);
            path.pop();
        }
        false
    }

    pub fn separated(&self, x: &[usize], y: &[usize], z: &[usize]) -> bool {
        let zm = z.iter().fold(0u32, |acc, &v| acc | 1 << v);
        let ym = y
            .iter()
            .filter(|&&v| zm >> v & 1 == 0)
            .fold(0u32, |acc, &v| acc | 1 << v);
        for &s in x.iter().filter(|&&v| zm >> v & 1 == 0) {
            if ym >> s & 1 == 1 {
                return false;
            }
            let mut path = vec![s];
            let mut on_path = 1u32 << s;
            if self.walk(&mut path, &mut on_path, ym, zm) {
                return false;
            }
        }
        debug_assert!(self.n <= 32);
        true
    }
}

/// One-off oracle query.
pub fn oracle_d_separated(dag: &Dag, x: &[usize], y: &[usize], z: &[usize]) -> bool {
    PathOracle::new(dag).separated(x, y, z)
}

fn num(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo..hi) * 4.0).round() / 4.0
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn expr(rng: &mut impl Rng, vars: &[String], params: &[String], depth: usize) -> String {
    let leaf = depth == 0 || rng.random_bool(0.3);
    if leaf {
        let pick = rng.random_range(0..10);
        return if pick < 6 && !vars.is_empty() {
            vars[rng.random_range(0..vars.len())].clone()
        } else if pick < 8 && !params.is_empty() {
            params[rng.random_range(0..params.len())].clone()
        } else {
            fmt(num(rng, 0.25, 5.0))
        };
    }
    let a = expr(rng, vars, params, depth - 1);
    let b = expr(rng, vars, params, depth - 1);
    match rng.random_range(0..11) {
        0 => format!("{a} + {b}"),
        1 => format!("{a} - ({b})"),
        2 => format!("({a}) * ({b})"),
        3 => format!("({a}) / ({b})"),
        4 => format!("({a})^{}", rng.random_range(1..4)),
        5 => format!("-({a})"),
        6 => format!("exp(({a}) / 10)"),
        7 => format!("ln(1 + ({a})^2)"),
        8 => format!("min({a}, {b})"),
        9 => format!("max({a}, {b}, 0.5)"),
        _ => format!("indicator({a} <= {b})"),
    }
}

/// An expression mentioning at least one variable. A state without parents
/// would be a root, and roots may not carry equations.
fn grounded(rng: &mut impl Rng, vars: &[String], params: &[String], depth: usize) -> String {
    let e = expr(rng, vars, params, depth);
    if vars.iter().any(|v| mentions(&e, v)) {
        e
    } else {
        format!("{} + ({e})", vars[rng.random_range(0..vars.len())])
    }
}

fn mentions(e: &str, name: &str) -> bool {
    e.split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '\''))
        .any(|w| w == name)
}

fn domain(rng: &mut impl Rng) -> String {
    if rng.random_bool(0.5) {
        let mut vals: Vec<f64> = (0..rng.random_range(1..4))
            .map(|_| num(rng, 0.0, 3.0))
            .collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        format!(
            "in {{{}}}",
            vals.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(", ")
        )
    } else {
        let lo = num(rng, 0.0, 1.0);
        let hi = lo + num(rng, 0.5, 3.0);
        format!(
            "in [{}, {}] grid {}",
            fmt(lo),
            fmt(hi),
            rng.random_range(2..12)
        )
    }
}

/// Source text of a random valid model. Some carry a recurring process, a
/// Markov shock, or a bridge declaration.
pub fn random_model_source(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = format!("model random_{seed};\n");
    let params: Vec<String> = (0..rng.random_range(0..3))
        .map(|i| format!("p{i}"))
        .collect();
    for p in &params {
        src += &format!("param {p} = {};\n", fmt(num(&mut rng, -2.0, 2.0)));
    }
    let mut bounded: Vec<String> = Vec::new();
    let mut all: Vec<String> = Vec::new();
    let roots = rng.random_range(1..4);
    for i in 0..roots {
        let r = format!("r{i}");
        src += &format!("state {r} {};\n", domain(&mut rng));
        bounded.push(r.clone());
        all.push(r);
    }
    let markov = rng.random_bool(0.25);
    if markov {
        src += "state m in {0.5, 1.5};\n";
        src += "exogenous q ~ Markov(states=[0.5, 1.5], matrix=[[0.9, 0.1], [0.25, 0.75]], given=m);\n";
        bounded.push("m".into());
        all.push("m".into());
        all.push("q".into());
    }
    for i in 0..rng.random_range(0..3) {
        let e = format!("e{i}");
        if rng.random_bool(0.5) {
            src += &format!(
                "exogenous {e} ~ Normal(mean={}, sd={});\n",
                fmt(num(&mut rng, -1.0, 1.0)),
                fmt(num(&mut rng, 0.25, 2.0))
            );
        } else {
            src +=
                &format!("exogenous {e} ~ Iid(states=[0.0, 1.0, 2.5], probs=[0.25, 0.5, 0.25]);\n");
        }
        all.push(e);
    }
    let mut utilities = 0;
    for j in 0..rng.random_range(1..5) {
        if rng.random_bool(0.4) {
            let d = format!("d{j}");
            let k = rng.random_range(0..=bounded.len().min(2));
            let mut obs: Vec<String> = bounded.choose_multiple(&mut rng, k).cloned().collect();
            obs.sort();
            if rng.random_bool(0.5) {
                src += &format!(
                    "decision {d} in {{0.0, 1.0, 2.0}} observes {{{}}};\n",
                    obs.join(", ")
                );
                src += &format!("constraint {d} in {{0.0, 1.0, 2.0}};\n");
            } else {
                src += &format!(
                    "decision {d} in [0, 2] grid 5 observes {{{}}};\n",
                    obs.join(", ")
                );
                let upper = if obs.is_empty() {
                    "2".to_string()
                } else {
                    format!("min(2, 1 + {})", obs[0])
                };
                src += &format!("constraint {d} in [0, {upper}];\n");
            }
            bounded.push(d.clone());
            all.push(d);
        } else {
            let s = format!("s{j}");
            let e = grounded(&mut rng, &all, &params, 3);
            if rng.random_bool(0.5) {
                src += &format!("state {s} {};\n", domain(&mut rng));
                bounded.push(s.clone());
            } else {
                src += &format!("state {s};\n");
            }
            src += &format!("{s} = {e};\n");
            all.push(s);
        }
        if rng.random_bool(0.5) {
            let u = format!("u{utilities}");
            utilities += 1;
            src += &format!(
                "utility {u};\n{u} = {};\n",
                expr(&mut rng, &all, &params, 2)
            );
        }
    }
    if utilities == 0 {
        src += &format!("utility u0;\nu0 = {};\n", expr(&mut rng, &all, &params, 2));
    }
    if rng.random_bool(0.4) {
        // Every root recurs so the process needs no fixed values.
        for i in 0..roots {
            src += &format!("r{i}' = {};\n", grounded(&mut rng, &all, &params, 2));
        }
        if markov {
            src += "m' = q;\n";
        }
        src += "param disc = 0.9;\ndiscount disc;\n";
    }
    src
}

/// Random discrete model with binary shocks, binary observable states,
/// and up to three binary decisions.
pub struct RelianceModel {
    pub model: Scdm,
    pub shocks: Vec<(String, f64)>,
}

pub fn reliance_model(seed: u64) -> RelianceModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = String::from("model reliance;\n");
    let mut shocks = Vec::new();
    let mut observable: Vec<String> = Vec::new();
    let mut all: Vec<String> = Vec::new();
    for i in 0..rng.random_range(1..4) {
        let p = [0.2, 0.35, 0.6, 0.75][rng.random_range(0..4)];
        src += &format!(
            "exogenous e{i} ~ Iid(states=[0.0, 1.0], probs=[{:?}, {:?}]);\n",
            1.0 - p,
            p
        );
        shocks.push((format!("e{i}"), p));
        all.push(format!("e{i}"));
    }
    let decisions = rng.random_range(2..4);
    let mut states = 0;
    for j in 0..decisions {
        // A few observable states built from what exists so far.
        for _ in 0..rng.random_range(0..3) {
            let a = &all[rng.random_range(0..all.len())];
            let b = &all[rng.random_range(0..all.len())];
            let s = format!("s{states}");
            states += 1;
            let body = match rng.random_range(0..3) {
                0 => a.clone(),
                1 => format!("indicator({a} + {b} >= 1)"),
                _ => format!("indicator({a} + {b} >= 2)"),
            };
            src += &format!("state {s} in {{0.0, 1.0}};\n{s} = {body};\n");
            observable.push(s.clone());
            all.push(s);
        }
        let k = rng.random_range(0..=observable.len().min(2));
        let mut obs: Vec<String> = observable.clone();
        for i in (1..obs.len()).rev() {
            obs.swap(i, rng.random_range(0..=i));
        }
        obs.truncate(k);
        obs.sort();
        let d = format!("d{j}");
        src += &format!(
            "decision {d} in {{0.0, 1.0}} observes {{{}}};\nconstraint {d} in {{0.0, 1.0}};\n",
            obs.join(", ")
        );
        observable.push(d.clone());
        all.push(d);
    }
    for i in 0..rng.random_range(1..4) {
        let mut terms = Vec::new();
        for _ in 0..rng.random_range(1..4) {
            let a = &all[rng.random_range(0..all.len())];
            let b = &all[rng.random_range(0..all.len())];
            let c = rng.random_range(-3..4);
            terms.push(format!("{c} * {a} * {b}"));
        }
        src += &format!("utility u{i};\nu{i} = {};\n", terms.join(" + "));
    }
    let model = lower_str(&src, &LowerOptions::default())
        .unwrap_or_else(|d| panic!("{src}\n{d:?}"))
        .model;
    RelianceModel { model, shocks }
}

pub fn rules_for(m: &Scdm, d: &str) -> Vec<DecisionRule> {
    let grid = m.grid_over(&m.graph.parents(d).unwrap());
    let n = grid.len();
    (0..1u32 << n)
        .map(|mask| DecisionRule {
            decision: d.to_string(),
            grid: grid.clone(),
            table: (0..n).map(|i| f64::from(mask >> i & 1)).collect(),
        })
        .collect()
}

/// Per context of `d`: its probability and the expected utility of each
/// action restricted to that context, by exhaustive shock enumeration.
fn context_table(rm: &RelianceModel, others: &PolicyProfile, d: &str) -> Vec<(f64, [f64; 2])> {
    let m = &rm.model;
    let grid = m.grid_over(&m.graph.parents(d).unwrap());
    let mut out = vec![(0.0, [0.0; 2]); grid.len()];
    for a in 0..2 {
        let mut profile = others.clone();
        profile.rules.insert(
            d.to_string(),
            DecisionRule {
                decision: d.to_string(),
                grid: grid.clone(),
                table: vec![a as f64; grid.len()],
            },
        );
        let scm = induce(m, &profile, &BTreeMap::new()).unwrap();
        for mask in 0..1u32 << rm.shocks.len() {
            let mut shocks = BTreeMap::new();
            let mut p = 1.0;
            for (i, (name, p1)) in rm.shocks.iter().enumerate() {
                let on = mask >> i & 1 == 1;
                shocks.insert(name.clone(), if on { 1.0 } else { 0.0 });
                p *= if on { *p1 } else { 1.0 - p1 };
            }
            let r = scm.realize(&shocks).unwrap();
            let pt: Vec<f64> = grid.names().iter().map(|n| r[n]).collect();
            let ctx = grid.stencil(&pt, false)[0].0;
            let u: f64 = m.utilities().iter().map(|u| r[u]).sum();
            if a == 0 {
                out[ctx].0 += p;
            }
            out[ctx].1[a] += p * u;
        }
    }
    out
}

fn best_actions(entry: &(f64, [f64; 2])) -> u8 {
    let [u0, u1] = entry.1;
    if (u0 - u1).abs() <= 1e-9 {
        3
    } else if u0 > u1 {
        1
    } else {
        2
    }
}

/// Whether the optimal actions at `d` change with the rule at `d2` in some
/// context that both rules reach with positive probability.
pub fn relies(rm: &RelianceModel, d: &str, d2: &str) -> bool {
    let m = &rm.model;
    let rest: Vec<String> = m
        .decisions()
        .into_iter()
        .filter(|x| x != d && x != d2)
        .collect();
    let mut fixed = vec![PolicyProfile::default()];
    for r in &rest {
        let mut next = Vec::new();
        for p in &fixed {
            for rule in rules_for(m, r) {
                let mut q = p.clone();
                q.rules.insert(r.clone(), rule);
                next.push(q);
            }
        }
        fixed = next;
    }
    for base in &fixed {
        let tables: Vec<Vec<(f64, [f64; 2])>> = rules_for(m, d2)
            .into_iter()
            .map(|rule| {
                let mut p = base.clone();
                p.rules.insert(d2.to_string(), rule);
                context_table(rm, &p, d)
            })
            .collect();
        for t1 in &tables {
            for t2 in &tables {
                for (a, b) in t1.iter().zip(t2) {
                    if a.0 > 1e-12 && b.0 > 1e-12 {
                        let ca = (a.0, [a.1[0] / a.0, a.1[1] / a.0]);
                        let cb = (b.0, [b.1[0] / b.0, b.1[1] / b.0]);
                        if best_actions(&ca) != best_actions(&cb) {
                            return true;
                        }
                    }
                }
            }
        }
    }
    false
}
