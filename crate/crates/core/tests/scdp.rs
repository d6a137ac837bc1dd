mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{load, set};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scdm::composition::{check_bridge, decompose};
use scdm::dsl::{lower_str, LowerOptions, Lowered};
use scdm::eval::{rule_from_fn, PolicyProfile};
use scdm::grid::ValueFunction;
use scdm::quadrature::gauss_hermite_normal;
use scdm::scdp::{
    bellman_update, bellman_update_with_policy, decomposed_bellman_update, simulate,
    simulate_paths, value_iteration, zero_value, Controller, Discount, DpConfig, DynError, Scdp,
};

fn lower(src: &str) -> Lowered {
    lower_str(src, &LowerOptions::default()).unwrap_or_else(|d| panic!("{d:?}"))
}

fn process(src: &str) -> Scdp {
    lower(src).process.expect("declares a process")
}

fn serial() -> DpConfig {
    DpConfig {
        parallel: false,
        ..Default::default()
    }
}

fn map(items: &[(&str, f64)]) -> BTreeMap<String, f64> {
    items.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn saving(sigma_y: f64, beta: f64) -> Scdp {
    let l = load("consumption_saving");
    let m = l
        .model
        .with_param("sigma_y", sigma_y)
        .unwrap()
        .with_param("beta", beta)
        .unwrap();
    l.process.unwrap().with_model(m).unwrap()
}

#[test]
fn consumption_saving_pblock() {
    let s = load("consumption_saving").process.unwrap();
    let pb = s.to_pblock().unwrap();
    assert_eq!(pb.states.names(), ["w".to_string()]);
    assert_eq!(pb.transition, ["w'".to_string()]);
    assert_eq!(pb.fixed, map(&[("r", 1.04)]));
    assert_eq!(pb.pre_shocks, ["eps_y".to_string()]);
    assert!(pb.post_shocks.is_empty());
    assert_eq!(pb.decisions, ["c".to_string()]);
    assert_eq!(pb.utilities, ["u".to_string()]);
    assert_eq!(pb.discount, Discount::Parameter("beta".into()));
    assert_eq!(s.discount_range(), (0.96, 0.96));

    // g(w, eps, c) = r (w + exp(mu + sigma eps) - c), checked through one realization.
    let p = PolicyProfile {
        rules: [(
            "c".to_string(),
            rule_from_fn(&s.model, "c", |pt| pt["m"] * 0.25),
        )]
        .into(),
    };
    let r = scdm::eval::realize(
        &s.model,
        &p,
        &map(&[("w", 2.0), ("r", 1.04)]),
        &map(&[("eps_y", 0.7)]),
    )
    .unwrap();
    let m = 2.0 + (0.0 + 0.1 * 0.7f64).exp();
    assert!((r["w'"] - 1.04 * (m - 0.25 * m)).abs() < 1e-12);
}

#[test]
fn stochastic_discount_is_part_of_the_state() {
    let s = load("stochastic_beta").process.unwrap();
    let pb = s.to_pblock().unwrap();
    assert!(pb.states.names().contains(&"beta".to_string()));
    assert!(pb.transition.contains(&"beta'".to_string()));
    assert_eq!(pb.discount, Discount::Variable("beta".into()));
    assert_eq!(s.discount_range(), (0.94, 0.96));
    assert_eq!(
        pb.post_shocks,
        ["eps_beta".to_string(), "eps_y".to_string()]
    );
}

#[test]
fn update_of_zero_is_the_expected_one_period_optimum() {
    let s = saving(0.1, 0.96);
    let v1 = bellman_update(&s, &zero_value(&s), &serial()).unwrap();
    let nodes = gauss_hermite_normal(11);
    for i in 0..v1.grid.len() {
        let w = v1.grid.point(i)[0];
        // Spending all cash on hand is optimal for a myopic log agent.
        let want: f64 = nodes
            .iter()
            .map(|(z, p)| p * (w + (0.1 * z).exp()).ln())
            .sum();
        assert!(
            (v1.values[i] - want).abs() < 1e-12,
            "w={w}: {} vs {want}",
            v1.values[i]
        );
    }
}

#[test]
fn zero_discount_is_a_fixed_point_after_one_update() {
    let s = saving(0.1, 0.0);
    let r = value_iteration(&s, &serial()).unwrap();
    assert!(r.converged);
    assert_eq!(r.trace.iterations, 2);
    assert_eq!(r.trace.sup_changes[1], 0.0);
}

/// Value of every stationary policy of a finite MDP by iterating its
/// linear Bellman equation to machine precision; the pointwise maximum.
fn brute_force_mdp(
    states: usize,
    actions: usize,
    reward: &dyn Fn(usize, usize) -> f64,
    next: &dyn Fn(usize, usize) -> Vec<(usize, f64)>,
    beta: f64,
) -> Vec<f64> {
    let mut best = vec![f64::NEG_INFINITY; states];
    for code in 0..actions.pow(states as u32) {
        let policy: Vec<usize> = (0..states)
            .map(|s| code / actions.pow(s as u32) % actions)
            .collect();
        let mut v = vec![0.0; states];
        for _ in 0..5000 {
            v = (0..states)
                .map(|s| {
                    reward(s, policy[s])
                        + beta
                            * next(s, policy[s])
                                .iter()
                                .map(|(t, p)| p * v[*t])
                                .sum::<f64>()
                })
                .collect();
        }
        for s in 0..states {
            best[s] = best[s].max(v[s]);
        }
    }
    best
}

#[test]
fn deterministic_chain_matches_backward_induction_over_all_policies() {
    let s = process(
        "model chain; param beta = 0.9;
         state s in {0, 1, 2};
         decision a in {0, 1} observes {s}; constraint a in {0, 1};
         utility u; u = s * s / 4 - 0.3 * a;
         s' = min(s + a, 2);
         discount beta;",
    );
    let cfg = DpConfig {
        tol: 1e-13,
        ..serial()
    };
    let r = value_iteration(&s, &cfg).unwrap();
    let want = brute_force_mdp(
        3,
        2,
        &|s, a| (s * s) as f64 / 4.0 - 0.3 * a as f64,
        &|s, a| vec![((s + a).min(2), 1.0)],
        0.9,
    );
    for (got, want) in r.value.values.iter().zip(&want) {
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

/// Random fully observed MDP over three states with a binary shock
/// realized after the action.
fn random_mdp(seed: u64) -> (String, [[f64; 3]; 3], f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef: [[f64; 3]; 3] =
        std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-2..3) as f64));
    let p = [0.2, 0.5, 0.9][rng.random_range(0..3)];
    let beta = [0.5, 0.8, 0.95][rng.random_range(0..3)];
    let reward = (0..3)
        .flat_map(|s| (0..3).map(move |a| (s, a)))
        .map(|(s, a)| {
            format!(
                "{:?} * indicator(s == {s}) * indicator(a == {a})",
                coef[s][a]
            )
        })
        .collect::<Vec<_>>()
        .join(" + ");
    let src = format!(
        "model mdp; param beta = {beta:?};
         state s in {{0, 1, 2}};
         exogenous e ~ Iid(states=[0, 1], probs=[{:?}, {p:?}]);
         decision a in {{0, 1, 2}} observes {{s}}; constraint a in {{0, 1, 2}};
         utility u; u = {reward};
         s' = min(max(s + a - 1 + e, 0), 2);
         discount beta;",
        1.0 - p
    );
    (src, coef, p, beta)
}

#[test]
fn fully_observed_processes_solve_like_their_explicit_mdp() {
    for seed in 0..12 {
        let (src, coef, p, beta) = random_mdp(seed);
        let s = process(&src);
        let r = value_iteration(
            &s,
            &DpConfig {
                tol: 1e-13,
                ..serial()
            },
        )
        .unwrap();
        let next = |s: usize, a: usize| {
            let t = |e: i64| (s as i64 + a as i64 - 1 + e).clamp(0, 2) as usize;
            vec![(t(0), 1.0 - p), (t(1), p)]
        };
        let want = brute_force_mdp(3, 3, &|s, a| coef[s][a], &next, beta);
        for (got, want) in r.value.values.iter().zip(&want) {
            assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn successive_changes_contract_by_the_discount() {
    let (src, ..) = random_mdp(3);
    let s = process(&src);
    let beta = s.discount_range().1;
    let r = value_iteration(
        &s,
        &DpConfig {
            tol: 1e-12,
            ..serial()
        },
    )
    .unwrap();
    let d = &r.trace.sup_changes;
    for k in 3..d.len() {
        if d[k - 1] > 1e-11 {
            assert!(
                d[k] <= (beta + 1e-9) * d[k - 1],
                "iteration {k}: {} after {}",
                d[k],
                d[k - 1]
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn bellman_update_is_monotone(seed in 0u64..12, v in proptest::collection::vec(-5.0f64..5.0, 3), bump in proptest::collection::vec(0.0f64..3.0, 3)) {
        let (src, ..) = random_mdp(seed);
        let s = process(&src);
        let grid = zero_value(&s).grid;
        let lo = ValueFunction::new(grid.clone(), v.clone());
        let hi = ValueFunction::new(grid, v.iter().zip(&bump).map(|(a, b)| a + b).collect());
        let (tl, th) = (bellman_update(&s, &lo, &serial()).unwrap(), bellman_update(&s, &hi, &serial()).unwrap());
        for (a, b) in tl.values.iter().zip(&th.values) {
            prop_assert!(a <= b);
        }
    }
}

#[test]
fn monotone_on_consumption_saving() {
    let s = saving(0.1, 0.96);
    let g = zero_value(&s).grid;
    let lo = ValueFunction::new(
        g.clone(),
        (0..g.len()).map(|i| (i as f64 * 0.3).sin()).collect(),
    );
    let hi = ValueFunction::new(
        g.clone(),
        lo.values
            .iter()
            .enumerate()
            .map(|(i, v)| v + (i % 3) as f64 * 0.1)
            .collect(),
    );
    let (a, b) = (
        bellman_update(&s, &lo, &serial()).unwrap(),
        bellman_update(&s, &hi, &serial()).unwrap(),
    );
    assert!(a.values.iter().zip(&b.values).all(|(x, y)| x <= y));
}

const SAVING_PERIOD: &str = "
model saving_period;
param beta = 0.96;
param R = 1.04;
state b in [0, 2.08] grid 101;
state y in {1.0};
decision c in [0, 3.08] grid 155 observes {b, y};
constraint c in [0, b + y];
utility u;
u = ln(c);
b' = R * (b + y - c);
discount beta;
horizon 2;
";

/// The period model written out twice as a static two-period model: the
/// first period's end state is the second period's resources.
const SAVING_TWICE: &str = "
model saving_twice;
param beta = 0.96;
param R = 1.04;
state b1 in [0, 2.08] grid 101;
state y1 in {1.0};
decision c1 in [0, 3.08] grid 155 observes {b1, y1};
constraint c1 in [0, b1 + y1];
utility u1;
u1 = ln(c1);
state b2 in [0, 2.08] grid 101;
b2 = R * (b1 + y1 - c1);
state y2 in {1.0};
decision c2 in [0, 3.08] grid 155 observes {b2, y2};
constraint c2 in [0, b2 + y2];
utility u2;
u2 = beta * ln(c2);
";

#[test]
fn two_period_horizon_matches_the_static_decomposed_solve() {
    let s = process(SAVING_PERIOD);
    assert_eq!(s.horizon, Some(2));
    let dp = value_iteration(&s, &serial()).unwrap();
    assert_eq!(dp.trace.iterations, 2);
    let twice = lower(SAVING_TWICE);
    let d = check_bridge(&twice.model, &set(&["b2"]))
        .unwrap()
        .decomposition
        .unwrap();
    let stat = scdm::solver::solve_decomposed(
        &d,
        &scdm::solver::SolverConfig {
            parallel: false,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(
        stat.value.over(),
        ["b1".to_string(), "y1".to_string(), "y2".to_string()]
    );
    assert_eq!(stat.value.values.len(), dp.value.values.len());
    let gap = dp
        .value
        .values
        .iter()
        .zip(&stat.value.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(gap <= 1e-8, "{gap}");
}

#[test]
fn decomposed_update_matches_the_plain_update_when_bridge_values_stay_on_grid() {
    // Without income risk, cash on hand w + 1 and savings stay on the 0.04 lattice.
    let l = load("consumption_portfolio");
    let m = l.model.with_param("sigma_y", 0.0).unwrap();
    let s = l.process.unwrap().with_model(m.clone()).unwrap();
    let d = check_bridge(&m, &set(&["a"]))
        .unwrap()
        .decomposition
        .unwrap();
    let cfg = DpConfig {
        quadrature_nodes: 5,
        ..serial()
    };
    let mut v = zero_value(&s);
    for _ in 0..2 {
        let (plain, _, n_plain) = bellman_update_with_policy(&s, &v, &cfg).unwrap();
        let (dec, n_dec) = decomposed_bellman_update(&s, &d, &v, &cfg).unwrap();
        let gap = plain.sup_distance(&dec);
        assert!(gap <= 1e-8, "{gap}");
        assert!(n_dec < n_plain, "{n_dec} vs {n_plain}");
        v = plain;
    }
}

#[test]
fn decomposed_update_count_on_five_by_five_action_spaces() {
    let src = "model five; param beta = 0.9;
         state x in {0, 1, 2, 3, 4};
         decision d1 in {0, 1, 2, 3, 4} observes {x}; constraint d1 in {0, 1, 2, 3, 4};
         state y in {0, 1, 2, 3, 4, 5, 6, 7, 8}; y = x + d1;
         decision d2 in {0, 1, 2, 3, 4} observes {y}; constraint d2 in {0, 1, 2, 3, 4};
         utility u1; u1 = -0.1 * d1;
         utility u2; u2 = -0.2 * (d2 - 2)^2 + 0.1 * y;
         x' = min(max(y - d2, 0), 4);
         discount beta;";
    let l = lower(src);
    let s = l.process.clone().unwrap();
    let d = check_bridge(&l.model, &set(&["y"]))
        .unwrap()
        .decomposition
        .unwrap();
    let v = zero_value(&s);
    let (plain, _, n_plain) = bellman_update_with_policy(&s, &v, &serial()).unwrap();
    let (dec, n_dec) = decomposed_bellman_update(&s, &d, &v, &serial()).unwrap();
    assert_eq!(plain, dec);
    let (pi1, pi2, states, bridge) = (5u64, 5u64, 5u64, 9u64);
    assert_eq!(n_plain, pi1 * pi2 * states);
    let bound = pi2 * bridge + pi1 * states;
    let ratio = n_dec as f64 / bound as f64;
    assert!((0.5..=2.0).contains(&ratio), "{n_dec} vs {bound}");
    // Iterating to convergence through the decomposition gives the same fixed point.
    let full = value_iteration(&s, &serial()).unwrap();
    let through = scdm::scdp::value_iteration_decomposed(&s, &d, &serial()).unwrap();
    assert!(full.value.sup_distance(&through.value) < 1e-12);
}

#[test]
fn decomposed_update_refuses_non_orthomodular_splits() {
    let src = std::fs::read_to_string(common::model_path("two_period"))
        .unwrap()
        .replace(
            "u2 = beta * gamma * ln(c2);",
            "u2 = beta * gamma * ln(c2) + 0.01 * c1;",
        );
    let m0 = lower(&src).model;
    let up: BTreeSet<String> = set(&["b1", "y1", "c1", "u1", "a1"]);
    let down: BTreeSet<String> = set(&["a1", "c1", "b2", "R", "y2", "beta", "c2", "u2"]);
    let d = decompose(&m0, &up, &down, &set(&["a1"])).unwrap();
    let s = saving(0.1, 0.96);
    assert_eq!(
        decomposed_bellman_update(&s, &d, &zero_value(&s), &serial()).unwrap_err(),
        DynError::NotOrthomodular
    );
}

#[test]
fn myopic_simulation_accumulates_only_the_first_reward() {
    let s = saving(0.1, 0.0);
    let path = simulate(
        &s,
        &Controller::Lookahead(zero_value(&s)),
        &map(&[("w", 1.0)]),
        5,
        3,
    )
    .unwrap();
    assert_eq!(path.len(), 5);
    for step in &path {
        assert_eq!(step.cumulative, path[0].reward);
    }
}

#[test]
fn deterministic_simulation_follows_the_closed_form_recursion() {
    let s = saving(0.0, 0.96);
    let p = PolicyProfile {
        rules: [(
            "c".to_string(),
            rule_from_fn(&s.model, "c", |pt| pt["m"] / 2.0),
        )]
        .into(),
    };
    let path = simulate(&s, &Controller::Rules(p), &map(&[("w", 1.0)]), 8, 0).unwrap();
    let (mut w, mut total, mut weight) = (1.0f64, 0.0, 1.0);
    for step in &path {
        assert!((step.state["w"] - w).abs() < 1e-12);
        let c = (w + 1.0) / 2.0;
        assert!((step.actions["c"] - c).abs() < 1e-12);
        total += weight * c.ln();
        weight *= 0.96;
        assert!((step.cumulative - total).abs() < 1e-12);
        w = 1.04 * (w + 1.0 - c);
    }
}

#[test]
fn simulation_is_reproducible_and_schedule_independent() {
    let s = saving(0.1, 0.96);
    let r = value_iteration(
        &s,
        &DpConfig {
            max_iter: 40,
            ..Default::default()
        },
    )
    .unwrap();
    let ctl = Controller::Lookahead(r.value);
    let x0 = map(&[("w", 2.0)]);
    let a = simulate(&s, &ctl, &x0, 12, 9).unwrap();
    assert_eq!(a, simulate(&s, &ctl, &x0, 12, 9).unwrap());
    assert_ne!(a, simulate(&s, &ctl, &x0, 12, 10).unwrap());
    let serial_paths = simulate_paths(&s, &ctl, &x0, 12, 6, 9, false).unwrap();
    let parallel_paths = simulate_paths(&s, &ctl, &x0, 12, 6, 9, true).unwrap();
    assert_eq!(serial_paths, parallel_paths);
    assert_eq!(serial_paths[0], a);
}

#[test]
fn infeasible_rule_reports_the_step() {
    let s = saving(0.0, 0.96);
    let p = PolicyProfile {
        rules: [("c".to_string(), rule_from_fn(&s.model, "c", |_| 1.5))].into(),
    };
    let err = simulate(&s, &Controller::Rules(p), &map(&[("w", 1.0)]), 10, 0).unwrap_err();
    assert_eq!(
        err,
        DynError::InfeasibleStep {
            decision: "c".into(),
            step: 2
        }
    );
}

#[test]
fn empty_feasible_set_names_the_point() {
    // The interval is never empty but at s = 0 it holds no grid action.
    let s = process(
        "model sparse; param beta = 0.5;
         state s in {0, 1};
         decision a in {1, 2} observes {s}; constraint a in [0, s + 0.5];
         utility u; u = a;
         s' = s;
         discount beta;",
    );
    match bellman_update(&s, &zero_value(&s), &serial()) {
        Err(DynError::EmptyFeasibleSet { decision, at }) => {
            assert_eq!(decision, "a");
            assert!(at.contains("s=0"), "{at}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn closure_errors() {
    let cs = load("consumption_saving");
    let m = cs.model.clone();
    let es = |pairs: &[(&str, &str)]| -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    };
    assert_eq!(
        Scdp::new(m.clone(), es(&[("w", "w'")]), "delta", None).unwrap_err(),
        DynError::UnknownDiscount("delta".into())
    );
    assert_eq!(
        Scdp::new(m.clone(), es(&[("m", "w'")]), "beta", None).unwrap_err(),
        DynError::NotRoot("m".into())
    );
    assert_eq!(
        Scdp::new(m.clone(), es(&[("w", "nothing")]), "beta", None).unwrap_err(),
        DynError::MissingImage("nothing".into())
    );
    assert!(matches!(
        Scdp::new(m.clone(), es(&[("w", "m")]), "beta", None).unwrap_err(),
        DynError::DomainMismatch { .. }
    ));
    let hot = m.with_param("beta", 1.2).unwrap();
    assert!(matches!(
        Scdp::new(hot, es(&[("w", "w'")]), "beta", None).unwrap_err(),
        DynError::DiscountRange { .. }
    ));
    let unit = m.with_param("beta", 1.0).unwrap();
    let s = Scdp::new(unit, es(&[("w", "w'")]), "beta", None).unwrap();
    assert_eq!(
        value_iteration(&s, &serial()).unwrap_err(),
        DynError::NoContraction(1.0)
    );

    let s = cs.process.unwrap();
    assert_eq!(s.uncovered_roots(), ["r".to_string()]);
    assert_eq!(s.fix("w", 1.0).unwrap_err(), DynError::BadFix("w".into()));
    let wide = s
        .with_model(
            m.with_domain("r", scdm::Domain::Discrete(vec![1.0, 1.04]))
                .unwrap(),
        )
        .unwrap();
    assert_eq!(
        wide.to_pblock().unwrap_err(),
        DynError::UnfixedRoot("r".into())
    );
    assert_eq!(
        wide.fix("r", 1.0).unwrap().to_pblock().unwrap().fixed,
        map(&[("r", 1.0)])
    );
}

#[test]
fn parallel_and_serial_iteration_are_bit_identical() {
    let s = load("stochastic_beta").process.unwrap();
    let cfg = DpConfig {
        max_iter: 4,
        ..serial()
    };
    let a = value_iteration(&s, &cfg).unwrap();
    let b = value_iteration(
        &s,
        &DpConfig {
            parallel: true,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(a.value, b.value);
    assert_eq!(a.policy, b.policy);
    assert_eq!(a.trace, b.trace);
}
