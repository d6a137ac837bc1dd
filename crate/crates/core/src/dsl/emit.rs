use std::collections::BTreeSet;
use std::fmt::Write;

use super::Lowered;
use crate::graph::VariableKind;
use crate::model::{Constraint, Distribution, Domain, Scdm};
use crate::scdp::Scdp;

fn list(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn domain(d: &Domain) -> String {
    match d {
        Domain::Discrete(v) => format!(" in {{{}}}", list(v)),
        Domain::Interval { lo, hi, points } if lo.is_finite() && hi.is_finite() => {
            format!(" in [{lo:?}, {hi:?}] grid {points}")
        }
        Domain::Interval { .. } => String::new(),
    }
}

fn distribution(d: &Distribution) -> String {
    match d {
        Distribution::Normal { mean, sd } => format!(" ~ Normal(mean={mean:?}, sd={sd:?})"),
        Distribution::Iid { states, probs } => {
            format!(" ~ Iid(states=[{}], probs=[{}])", list(states), list(probs))
        }
        Distribution::Markov {
            states,
            matrix,
            given,
        } => format!(
            " ~ Markov(states=[{}], matrix=[{}], given={given})",
            list(states),
            matrix
                .iter()
                .map(|r| format!("[{}]", list(r)))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

fn names(set: impl IntoIterator<Item = String>) -> String {
    set.into_iter().collect::<Vec<_>>().join(", ")
}

/// Canonical text for a model: sorted declarations, normalized expressions.
pub fn emit_model(
    name: &str,
    m: &Scdm,
    process: Option<&Scdp>,
    bridge: Option<&BTreeSet<String>>,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "model {name};");
    if !m.params.is_empty() {
        out.push('\n');
        for (p, v) in &m.params {
            let _ = writeln!(out, "param {p} = {v:?};");
        }
    }
    out.push('\n');
    for n in m.graph.names() {
        let kind = m.kind(n);
        let _ = write!(out, "{} {n}{}", kind.keyword(), domain(&m.domains[n]));
        if kind == VariableKind::Decision {
            let _ = write!(
                out,
                " observes {{{}}}",
                names(m.graph.parents(n).expect("own variable"))
            );
        }
        if let Some(d) = m.exogenous.get(n) {
            out.push_str(&distribution(d));
        }
        out.push_str(";\n");
    }
    if !m.equations.is_empty() {
        out.push('\n');
        for (t, e) in &m.equations {
            let _ = writeln!(out, "{t} = {e};");
        }
    }
    if !m.constraints.is_empty() {
        out.push('\n');
        for (t, c) in &m.constraints {
            match c {
                Constraint::Interval { lower, upper } => {
                    let _ = writeln!(out, "constraint {t} in [{lower}, {upper}];");
                }
                Constraint::Set(v) => {
                    let _ = writeln!(out, "constraint {t} in {{{}}};", list(v));
                }
            }
        }
    }
    if let Some(p) = process {
        out.push('\n');
        let _ = writeln!(out, "discount {};", p.discount_name());
        let pairs: Vec<String> = p
            .end_state
            .iter()
            .map(|(a, b)| format!("{a} -> {b}"))
            .collect();
        let _ = writeln!(out, "endstate {{{}}};", pairs.join(", "));
        if let Some(h) = p.horizon {
            let _ = writeln!(out, "horizon {h};");
        }
    }
    if let Some(b) = bridge {
        out.push('\n');
        let _ = writeln!(out, "bridge {{{}}};", names(b.iter().cloned()));
    }
    out
}

/// Canonical text for a lowered file.
pub fn emit(l: &Lowered) -> String {
    emit_model(&l.name, &l.model, l.process.as_ref(), l.bridge.as_ref())
}
