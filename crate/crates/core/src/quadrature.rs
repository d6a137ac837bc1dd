//! Discretization of shock distributions into weighted scenarios, plus
//! seeded sampling for Monte Carlo checks.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use crate::model::{Distribution, Scdm};

/// Gauss–Hermite nodes and weights for the standard normal density
/// (weights sum to one), via the Golub–Welsch eigenproblem.
pub fn gauss_hermite_normal(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1, "at least one quadrature node");
    if n == 1 {
        return vec![(0.0, 1.0)];
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        jacobi[(i, i - 1)] = b;
        jacobi[(i - 1, i)] = b;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (std::f64::consts::SQRT_2 * eig.eigenvalues[k], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize to remove eigen-solver noise.
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    pairs.iter().map(|&(x, w)| (x, w / total)).collect()
}

/// Index of the state nearest to `v` (ties resolve to the earlier state).
pub fn nearest_state(states: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (i, s) in states.iter().enumerate() {
        if (s - v).abs() < (states[best] - v).abs() {
            best = i;
        }
    }
    best
}

/// Support points and probabilities of one shock, given the current
/// value of a Markov chain's state variable when relevant.
pub fn nodes(dist: &Distribution, nodes: usize, chain_state: Option<f64>) -> Vec<(f64, f64)> {
    match dist {
        Distribution::Normal { mean, sd } => {
            if *sd == 0.0 {
                vec![(*mean, 1.0)]
            } else {
                gauss_hermite_normal(nodes)
                    .into_iter()
                    .map(|(x, w)| (mean + sd * x, w))
                    .collect()
            }
        }
        Distribution::Iid { states, probs } => states
            .iter()
            .zip(probs)
            .filter(|(_, p)| **p > 0.0)
            .map(|(s, p)| (*s, *p))
            .collect(),
        Distribution::Markov { states, matrix, .. } => {
            let row = nearest_state(states, chain_state.unwrap_or(states[0]));
            states
                .iter()
                .zip(&matrix[row])
                .filter(|(_, p)| **p > 0.0)
                .map(|(s, p)| (*s, *p))
                .collect()
        }
    }
}

/// Tensor product of per-shock nodes: each scenario lists one value per
/// shock (in the order of `per_shock`) and its probability.
pub fn tensor(per_shock: &[Vec<(f64, f64)>]) -> Vec<(Vec<f64>, f64)> {
    let mut out = vec![(Vec::with_capacity(per_shock.len()), 1.0)];
    for list in per_shock {
        let mut next = Vec::with_capacity(out.len() * list.len());
        for (vals, w) in &out {
            for &(x, p) in list {
                let mut v = vals.clone();
                v.push(x);
                next.push((v, w * p));
            }
        }
        out = next;
    }
    out
}

/// Draws one value per exogenous variable from its distribution.
/// Markov chains use the value of their state variable in `roots`.
pub fn sample_exogenous<R: Rng>(
    m: &Scdm,
    roots: &BTreeMap<String, f64>,
    rng: &mut R,
) -> BTreeMap<String, f64> {
    m.exogenous
        .iter()
        .map(|(name, dist)| {
            let v = match dist {
                Distribution::Normal { mean, sd } => {
                    if *sd == 0.0 {
                        *mean
                    } else {
                        Normal::new(*mean, *sd)
                            .expect("validated normal")
                            .sample(rng)
                    }
                }
                Distribution::Iid { states, probs } => states[draw_index(probs, rng)],
                Distribution::Markov {
                    states,
                    matrix,
                    given,
                } => {
                    let row = nearest_state(states, roots.get(given).copied().unwrap_or(states[0]));
                    states[draw_index(&matrix[row], rng)]
                }
            };
            (name.clone(), v)
        })
        .collect()
}

fn draw_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Seeded convenience wrapper around [`sample_exogenous`].
pub fn sample_exogenous_seeded(
    m: &Scdm,
    roots: &BTreeMap<String, f64>,
    seed: u64,
) -> BTreeMap<String, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_exogenous(m, roots, &mut rng)
}
