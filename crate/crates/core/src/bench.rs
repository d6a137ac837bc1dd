//! Parametric family for comparing enumeration with decomposed solving.
//!
//! Member `k` has a root `x` on ten points, an upstream decision with `k`
//! actions that moves the bridge `y`, and a downstream decision with `k`
//! actions facing a normal shock.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use crate::composition::check_bridge;
use crate::dsl::{lower_str, LowerOptions, Lowered};
use crate::solver::{solve_decomposed, solve_enumerate, SolveError, SolverConfig};

/// Points on the root and bridge grids.
pub const GRID_POINTS: usize = 10;

fn ints(n: usize) -> String {
    (0..n)
        .map(|i| format!("{i}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Source text of family member `k`.
pub fn family_source(k: usize) -> String {
    let top = GRID_POINTS - 1;
    let pts = ints(GRID_POINTS);
    let acts = ints(k);
    format!(
        "model bench_k{k};\n\
         state x in {{{pts}}};\n\
         decision d1 in {{{acts}}} observes {{x}};\n\
         constraint d1 in {{{acts}}};\n\
         state y in {{{pts}}};\n\
         y = min(x + d1, {top});\n\
         exogenous eps ~ Normal(mean=0, sd=1);\n\
         decision d2 in {{{acts}}} observes {{y}};\n\
         constraint d2 in {{{acts}}};\n\
         utility u1;\n\
         u1 = -0.1 * d1;\n\
         utility u2;\n\
         u2 = -(d2 - y / 3 - 0.5 * eps)^2;\n\
         bridge {{y}};\n"
    )
}

/// Lowered family member `k`.
pub fn family_model(k: usize) -> Lowered {
    lower_str(&family_source(k), &LowerOptions::default()).expect("family member lowers")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub root_points: usize,
    pub bridge_points: usize,
    pub enumeration_evaluations: u64,
    pub decomposed_evaluations: u64,
    pub enumeration_time: Duration,
    pub decomposed_time: Duration,
    /// Sup-norm gap between the two value tables.
    pub value_gap: f64,
}

/// Solves member `k` both ways. Times are the minimum over `repeats` runs.
pub fn bench_one(k: usize, repeats: usize, cfg: &SolverConfig) -> Result<BenchRow, SolveError> {
    let l = family_model(k);
    let bridge: BTreeSet<String> = l.bridge.clone().expect("family declares a bridge");
    let d = check_bridge(&l.model, &bridge)?
        .decomposition
        .expect("family bridge is orthomodular");
    let mut best = (Duration::MAX, Duration::MAX);
    let mut reports = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let full = solve_enumerate(&l.model, cfg)?;
        let t_full = t.elapsed();
        let t = Instant::now();
        let dec = solve_decomposed(&d, cfg)?;
        let t_dec = t.elapsed();
        best = (best.0.min(t_full), best.1.min(t_dec));
        reports = Some((full, dec));
    }
    let (full, dec) = reports.expect("at least one run");
    Ok(BenchRow {
        k,
        root_points: full.value.grid.len(),
        bridge_points: d.m2.root_grid().len(),
        enumeration_evaluations: full.policy_evaluations,
        decomposed_evaluations: dec.policy_evaluations,
        enumeration_time: best.0,
        decomposed_time: best.1,
        value_gap: full.value.sup_distance(&dec.value),
    })
}

/// Delimited table of bench rows; wall times only when `timing` is set so
/// that the default output is reproducible.
pub fn bench_table(rows: &[BenchRow], timing: bool) -> String {
    let mut out = String::from(
        "k,root_points,bridge_points,enumeration_evaluations,decomposed_evaluations,value_gap",
    );
    if timing {
        out.push_str(",enumeration_seconds,decomposed_seconds");
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            r.k,
            r.root_points,
            r.bridge_points,
            r.enumeration_evaluations,
            r.decomposed_evaluations,
            crate::solver::fmt_num(r.value_gap)
        ));
        if timing {
            out.push_str(&format!(
                ",{:.6},{:.6}",
                r.enumeration_time.as_secs_f64(),
                r.decomposed_time.as_secs_f64()
            ));
        }
        out.push('\n');
    }
    out
}
