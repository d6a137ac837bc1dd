mod common;

use std::collections::BTreeSet;

use common::{load, reliance_model, relies, set};
use scdm::composition::{
    check_bridge, compose, decompose, is_orthomodular, partition_from_bridge, CompositionError,
};
use scdm::dsl::{lower_str, LowerOptions};
use scdm::{Scdm, VariableKind};

fn lower(src: &str) -> Scdm {
    lower_str(src, &LowerOptions::default())
        .unwrap_or_else(|d| panic!("{d:?}"))
        .model
}

const PERIOD_ONE: &str = "
model period_one;
param gamma = 1.0;
state b1 in {1.0};
state y1 in {1.0};
decision c1 in [0, 2] grid 101 observes {b1, y1};
constraint c1 in [0, b1 + y1];
utility u1;
u1 = ln(c1);
state a1 in [0, 2] grid 101;
a1 = b1 + y1 - c1;
";

const PERIOD_TWO: &str = "
model period_two;
param gamma = 1.0;
state a1 in [0, 2] grid 101;
state y2 in {1.0};
state R in {1.04};
state beta in {0.96};
state b2 in [0, 2.08] grid 101;
b2 = R * a1;
decision c2 in [0, 3.08] grid 155 observes {b2, y2};
constraint c2 in [0, b2 + y2];
utility u2;
u2 = beta * gamma * ln(c2);
";

const ALLOCATION: &str = "
model allocation;
param rf = 1.02;
param mu_r = 0.04;
param sigma_r = 0.15;
state a in [0, 4] grid 101;
decision alpha in [0, 1] grid 11 observes {a};
constraint alpha in [0, 1];
exogenous eps_r ~ Normal(mean=0, sd=1);
state rr;
rr = exp(mu_r + sigma_r * eps_r);
state r;
r = (1 - alpha) * rf + alpha * rr;
";

fn shared(m1: &Scdm, m2: &Scdm) -> BTreeSet<String> {
    let a: BTreeSet<String> = m1.graph.names().iter().cloned().collect();
    m2.graph
        .names()
        .iter()
        .filter(|n| a.contains(*n))
        .cloned()
        .collect()
}

#[test]
fn consumption_and_allocation_compose_to_the_portfolio_model() {
    let consumption = load("consumption_saving").model;
    let allocation = lower(ALLOCATION);
    assert_eq!(shared(&consumption, &allocation), set(&["a", "r"]));
    let composed = compose(&consumption, &allocation).unwrap();
    assert!(composed.validate().is_empty());
    assert_eq!(composed, load("consumption_portfolio").model);
    // r is defined by the allocation side, a by the consumption side.
    assert!(!composed.graph.is_root("r") && !composed.graph.is_root("a"));
}

#[test]
fn two_periods_compose_to_the_two_period_model() {
    let composed = compose(&lower(PERIOD_ONE), &lower(PERIOD_TWO)).unwrap();
    assert_eq!(composed, load("two_period").model);
    assert_eq!(shared(&lower(PERIOD_ONE), &lower(PERIOD_TWO)), set(&["a1"]));
}

#[test]
fn disjoint_models_compose_with_empty_bridge() {
    let x = lower("model x; state p in {1.0}; decision d in {0, 1} observes {p}; constraint d in {0, 1}; utility u; u = d * p;");
    let y = lower("model y; exogenous z ~ Normal(mean=0, sd=1); state q; q = z; utility v; v = q;");
    assert!(shared(&x, &y).is_empty());
    let m = compose(&x, &y).unwrap();
    assert!(m.validate().is_empty());
    assert_eq!(m.graph.len(), x.graph.len() + y.graph.len());
    assert_eq!(compose(&x, &y).unwrap(), compose(&y, &x).unwrap());
}

#[test]
fn composition_folds_in_any_order_on_disjoint_bridges() {
    let p1 = lower(PERIOD_ONE);
    let p2 = lower(PERIOD_TWO);
    let side = lower("model side; param k = 2.0; state s in {0.5}; utility w; w = k * s;");
    let left = compose(&compose(&p1, &p2).unwrap(), &side).unwrap();
    let right = compose(&p1, &compose(&p2, &side).unwrap()).unwrap();
    assert_eq!(left, right);
}

#[test]
fn conflicting_parameters_are_rejected() {
    let a = lower("model a; param k = 1.0; state s in {0.5}; utility u; u = k * s;");
    let b = lower("model b; param k = 2.0; state t in {0.5}; utility v; v = k * t;");
    assert_eq!(
        compose(&a, &b).unwrap_err(),
        CompositionError::ParamConflict("k".into())
    );
    let same = lower("model c; param k = 1.0; state t in {0.5}; utility v; v = k * t;");
    assert!(compose(&a, &same).is_ok());
}

#[test]
fn shared_variable_defined_twice_is_rejected() {
    let a = lower("model a; state s in {1.0}; state x; x = s + 1; utility u; u = x;");
    let b = lower("model b; state s in {1.0}; state x; x = s * 2; utility v; v = x;");
    assert_eq!(
        compose(&a, &b).unwrap_err(),
        CompositionError::Conflict("x".into())
    );
    let c = lower("model a; state s in {1.0}; state x; x = s + 1; utility v; v = 2 * x;");
    assert!(compose(&a, &c).is_ok());
}

#[test]
fn mismatched_root_domains_are_rejected() {
    let a = lower("model a; state s in {1.0}; utility u; u = s;");
    let b = lower("model b; state s in {2.0}; utility v; v = s;");
    assert_eq!(
        compose(&a, &b).unwrap_err(),
        CompositionError::Conflict("s".into())
    );
}

#[test]
fn decomposition_round_trips_on_corpus_bridges() {
    for (name, bridge) in [
        ("two_period", set(&["a1"])),
        ("two_period_habit", set(&["b2", "h2"])),
        ("consumption_portfolio", set(&["a"])),
    ] {
        let m0 = load(name).model;
        let v = check_bridge(&m0, &bridge).unwrap();
        let d = v
            .decomposition
            .unwrap_or_else(|| panic!("{name}: {}", v.reason));
        assert!(d.m1.validate().is_empty() && d.m2.validate().is_empty());
        for b in &bridge {
            assert!(
                d.m2.graph.is_root(b),
                "{name}: {b} is not a downstream root"
            );
        }
        assert_eq!(compose(&d.m1, &d.m2).unwrap(), m0, "{name}");
    }
}

#[test]
fn two_period_split_at_savings() {
    let m0 = load("two_period").model;
    let d = check_bridge(&m0, &set(&["a1"]))
        .unwrap()
        .decomposition
        .unwrap();
    assert_eq!(d.m1.decisions(), set(&["c1"]));
    assert_eq!(d.m2.decisions(), set(&["c2"]));
    assert_eq!(d.m2.roots(), set(&["R", "a1", "beta", "y2"]));
    assert!(is_orthomodular(&d).unwrap());
}

#[test]
fn orthomodularity_fixtures() {
    let tp = load("two_period").model;
    assert!(check_bridge(&tp, &set(&["a1"])).unwrap().orthomodular);

    let habit = load("two_period_habit").model;
    assert!(!check_bridge(&habit, &set(&["a1"])).unwrap().orthomodular);
    assert!(!check_bridge(&habit, &set(&["b2"])).unwrap().orthomodular);
    assert!(
        check_bridge(&habit, &set(&["b2", "h2"]))
            .unwrap()
            .orthomodular
    );
}

#[test]
fn bypassing_edge_from_first_consumption_to_second_utility_breaks_orthomodularity() {
    let src = std::fs::read_to_string(common::model_path("two_period")).unwrap();
    let src = src.replace(
        "u2 = beta * gamma * ln(c2);",
        "u2 = beta * gamma * ln(c2) + 0.01 * c1;",
    );
    let m0 = lower(&src);
    assert!(m0.graph.parents("u2").unwrap().contains("c1"));
    assert!(!check_bridge(&m0, &set(&["a1"])).unwrap().orthomodular);

    // The same edge under an explicit partition that shares c1 as well.
    let up: BTreeSet<String> = ["b1", "y1", "c1", "u1", "a1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let down: BTreeSet<String> = ["a1", "c1", "b2", "R", "y2", "beta", "c2", "u2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let d = decompose(&m0, &up, &down, &set(&["a1"])).unwrap();
    assert!(!is_orthomodular(&d).unwrap());
}

#[test]
fn crossing_edge_is_a_partition_error() {
    let m0 = load("two_period").model;
    let all: BTreeSet<String> = m0.graph.names().iter().cloned().collect();
    // u1 sits downstream while its parent c1 stays upstream.
    let up: BTreeSet<String> = set(&["b1", "y1", "c1", "a1"]);
    let mut down: BTreeSet<String> = all.difference(&up).cloned().collect();
    down.insert("a1".into());
    let err = decompose(&m0, &up, &down, &set(&["a1"])).unwrap_err();
    assert!(
        matches!(err, CompositionError::Partition(ref s) if s.contains("u1")),
        "{err}"
    );

    let missing = decompose(&m0, &up, &set(&["u1"]), &BTreeSet::new()).unwrap_err();
    assert!(matches!(missing, CompositionError::Partition(_)));
}

#[test]
fn bridge_errors() {
    let m0 = load("consumption_saving").model;
    assert!(matches!(
        check_bridge(&m0, &set(&["nope"])),
        Err(CompositionError::Graph(_))
    ));
    assert!(matches!(
        partition_from_bridge(&m0, &BTreeSet::new()),
        Err(CompositionError::Partition(_))
    ));
    assert_eq!(
        partition_from_bridge(&m0, &set(&["eps_y"])).unwrap_err(),
        CompositionError::SharedExogenous("eps_y".into())
    );
}

#[test]
fn bridge_expansion_only_flips_false_to_true_in_the_habit_model() {
    let habit = load("two_period_habit").model;
    let chain = [
        set(&["b2"]),
        set(&["b2", "h2"]),
        set(&["b2", "h2", "y2"]),
        set(&["b2", "h2", "y2", "R"]),
    ];
    let verdicts: Vec<bool> = chain
        .iter()
        .map(|b| check_bridge(&habit, b).unwrap().orthomodular)
        .collect();
    assert_eq!(verdicts[0..2], [false, true]);
    assert!(verdicts.windows(2).all(|w| w[0] <= w[1]), "{verdicts:?}");
}

#[test]
fn orthomodular_splits_admit_no_reliance_of_downstream_on_upstream_decisions() {
    let mut splits = 0;
    for seed in 0..120 {
        let rm = reliance_model(seed);
        let m0 = &rm.model;
        let candidates: Vec<String> = m0
            .graph
            .names()
            .iter()
            .filter(|n| {
                m0.kind(n) != VariableKind::Exogenous && m0.kind(n) != VariableKind::Utility
            })
            .cloned()
            .collect();
        for y in &candidates {
            let bridge = set(&[y.as_str()]);
            let Ok(v) = check_bridge(m0, &bridge) else {
                continue;
            };
            let Some(d) = v.decomposition else { continue };
            let downstream = d.m2.decisions();
            let upstream: Vec<String> =
                d.m1.decisions()
                    .into_iter()
                    .filter(|x| !downstream.contains(x))
                    .collect();
            if downstream.is_empty() || upstream.is_empty() {
                continue;
            }
            splits += 1;
            for d2 in &downstream {
                for d1 in &upstream {
                    assert!(
                        !relies(&rm, d2, d1),
                        "seed {seed}: bridge {y}: {d2} relies on {d1}"
                    );
                }
            }
        }
    }
    eprintln!("{splits} orthomodular splits checked");
    assert!(splits >= 10, "{splits}");
}
