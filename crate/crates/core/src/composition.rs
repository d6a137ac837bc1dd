//! Gluing models along shared variables and cutting a model at a bridge.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::graph::{GraphError, VariableKind};
use crate::model::{Diagnostic, ModelParts, Scdm};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompositionError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid model: {}", join_diags(.0))]
    Model(Vec<Diagnostic>),
    #[error("shared variable `{0}` is defined differently by the two components")]
    Conflict(String),
    #[error("parameter `{0}` has different values in the two components")]
    ParamConflict(String),
    #[error("exogenous variable `{0}` would be shared between components")]
    SharedExogenous(String),
    #[error("invalid partition: {0}")]
    Partition(String),
}

fn join_diags(d: &[Diagnostic]) -> String {
    d.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl From<Vec<Diagnostic>> for CompositionError {
    fn from(d: Vec<Diagnostic>) -> Self {
        CompositionError::Model(d)
    }
}

/// A model split into an upstream and a downstream component that share
/// the bridge variables (and possibly some exogenous-free roots).
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub m0: Scdm,
    pub m1: Scdm,
    pub m2: Scdm,
    pub bridge: BTreeSet<String>,
}

impl Decomposition {
    pub fn shared(&self) -> BTreeSet<String> {
        let v1: BTreeSet<String> = self.m1.graph.names().iter().cloned().collect();
        self.m2
            .graph
            .names()
            .iter()
            .filter(|n| v1.contains(*n))
            .cloned()
            .collect()
    }
}

/// Vertex partition induced by a bridge.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub upstream: BTreeSet<String>,
    pub downstream: BTreeSet<String>,
    pub shared: BTreeSet<String>,
    /// Non-root variables that must be shared besides the declared bridge.
    pub extra_shared: BTreeSet<String>,
}

/// Outcome of a bridge check.
#[derive(Debug, Clone)]
pub struct BridgeVerdict {
    pub orthomodular: bool,
    pub reason: String,
    pub decomposition: Option<Decomposition>,
}

fn is_defined(m: &Scdm, v: &str) -> bool {
    !m.graph.is_root(v) || m.kind(v) != VariableKind::State
}

/// Union of two models. Each shared variable takes its definition from the
/// side where it is not a free root; defining it on both sides is allowed
/// only when the definitions coincide.
pub fn compose(m1: &Scdm, m2: &Scdm) -> Result<Scdm, CompositionError> {
    let p1 = m1.to_parts();
    let p2 = m2.to_parts();
    let mut out = p1.clone();
    for (name, kind2) in &p2.kinds {
        let Some(kind1) = p1.kinds.get(name).copied() else {
            out.kinds.insert(name.clone(), *kind2);
            copy_definition(&p2, &mut out, name);
            continue;
        };
        if kind1 == VariableKind::Exogenous || *kind2 == VariableKind::Exogenous {
            if kind1 != *kind2 || p1.exogenous.get(name) != p2.exogenous.get(name) {
                return Err(CompositionError::Conflict(name.clone()));
            }
            continue;
        }
        match (is_defined(m1, name), is_defined(m2, name)) {
            (false, true) => {
                clear_definition(&mut out, name);
                out.kinds.insert(name.clone(), *kind2);
                copy_definition(&p2, &mut out, name);
            }
            (true, true) => {
                if kind1 != *kind2
                    || p1.equations.get(name) != p2.equations.get(name)
                    || p1.observes.get(name) != p2.observes.get(name)
                    || p1.constraints.get(name) != p2.constraints.get(name)
                {
                    return Err(CompositionError::Conflict(name.clone()));
                }
            }
            (_, false) => {}
        }
        if p1.domains.get(name) != p2.domains.get(name)
            && !is_defined(m1, name)
            && !is_defined(m2, name)
        {
            return Err(CompositionError::Conflict(name.clone()));
        }
    }
    for (p, v) in &p2.params {
        match out.params.get(p) {
            Some(w) if w != v => return Err(CompositionError::ParamConflict(p.clone())),
            _ => {
                out.params.insert(p.clone(), *v);
            }
        }
    }
    Ok(out.build()?)
}

fn clear_definition(p: &mut ModelParts, name: &str) {
    p.equations.remove(name);
    p.observes.remove(name);
    p.constraints.remove(name);
    p.domains.remove(name);
}

fn copy_definition(from: &ModelParts, to: &mut ModelParts, name: &str) {
    if let Some(e) = from.equations.get(name) {
        to.equations.insert(name.into(), e.clone());
    }
    if let Some(o) = from.observes.get(name) {
        to.observes.insert(name.into(), o.clone());
    }
    if let Some(c) = from.constraints.get(name) {
        to.constraints.insert(name.into(), c.clone());
    }
    if let Some(x) = from.exogenous.get(name) {
        to.exogenous.insert(name.into(), x.clone());
    }
    if let Some(d) = from.domains.get(name) {
        to.domains.insert(name.into(), d.clone());
    }
}

/// Sub-model on `vars`. Shared variables whose parents fall outside become
/// free root states; any other variable must have all parents inside.
fn component(
    m0: &Scdm,
    vars: &BTreeSet<String>,
    shared: &BTreeSet<String>,
) -> Result<Scdm, CompositionError> {
    let full = m0.to_parts();
    let mut p = ModelParts {
        params: full.params.clone(),
        ..Default::default()
    };
    for v in vars {
        let parents = m0.graph.parents(v)?;
        let inside = parents.iter().all(|x| vars.contains(x));
        if inside {
            p.kinds.insert(v.clone(), m0.kind(v));
            copy_definition(&full, &mut p, v);
        } else if shared.contains(v) {
            p.kinds.insert(v.clone(), VariableKind::State);
            if let Some(d) = full.domains.get(v) {
                p.domains.insert(v.clone(), d.clone());
            }
        } else {
            let outside: Vec<_> = parents
                .iter()
                .filter(|x| !vars.contains(*x))
                .cloned()
                .collect();
            return Err(CompositionError::Partition(format!(
                "`{v}` has parents outside its component: {}",
                outside.join(", ")
            )));
        }
    }
    Ok(p.build()?)
}

/// Splits `m0` along an explicit vertex partition; variables in both sets
/// are shared.
pub fn decompose(
    m0: &Scdm,
    upstream: &BTreeSet<String>,
    downstream: &BTreeSet<String>,
    bridge: &BTreeSet<String>,
) -> Result<Decomposition, CompositionError> {
    let all: BTreeSet<String> = m0.graph.names().iter().cloned().collect();
    let covered: BTreeSet<String> = upstream.union(downstream).cloned().collect();
    if covered != all {
        let missing: Vec<_> = all.difference(&covered).cloned().collect();
        let unknown: Vec<_> = covered.difference(&all).cloned().collect();
        return Err(CompositionError::Partition(format!(
            "partition must cover exactly the model's variables (missing: [{}], unknown: [{}])",
            missing.join(", "),
            unknown.join(", ")
        )));
    }
    let shared: BTreeSet<String> = upstream.intersection(downstream).cloned().collect();
    if let Some(z) = shared
        .iter()
        .find(|v| m0.kind(v) == VariableKind::Exogenous)
    {
        return Err(CompositionError::SharedExogenous(z.clone()));
    }
    if let Some(b) = bridge.iter().find(|b| !shared.contains(*b)) {
        return Err(CompositionError::Partition(format!(
            "bridge variable `{b}` is not shared"
        )));
    }
    Ok(Decomposition {
        m0: m0.clone(),
        m1: component(m0, upstream, &shared)?,
        m2: component(m0, downstream, &shared)?,
        bridge: bridge.clone(),
    })
}

/// Partition induced by a bridge: the downstream side holds the bridge, its
/// descendants and the roots feeding only them.
pub fn partition_from_bridge(
    m0: &Scdm,
    bridge: &BTreeSet<String>,
) -> Result<Partition, CompositionError> {
    let g = &m0.graph;
    if bridge.is_empty() {
        return Err(CompositionError::Partition("bridge is empty".into()));
    }
    let mut core = BTreeSet::new();
    for y in bridge {
        if m0.kind(y) == VariableKind::Exogenous {
            return Err(CompositionError::SharedExogenous(y.clone()));
        }
        core.insert(y.clone());
        core.extend(g.descendants(y)?);
    }
    // Variables that only feed the downstream side move there with it.
    // Children precede parents in reverse topological order, so one pass
    // reaches the fixpoint.
    let mut below: BTreeSet<String> = core.difference(bridge).cloned().collect();
    for &id in g.topological().iter().rev() {
        let v = g.name(id);
        let kids = g.child_ids(id);
        if !core.contains(v) && !kids.is_empty() && kids.iter().all(|&c| below.contains(g.name(c)))
        {
            below.insert(v.to_string());
        }
    }
    let mut downstream: BTreeSet<String> = core.union(&below).cloned().collect();
    let mut upstream: BTreeSet<String> = bridge.clone();
    let mut shared = bridge.clone();
    let mut extra = BTreeSet::new();
    for v in g.names() {
        if downstream.contains(v) {
            continue;
        }
        let children = g.children(v)?;
        let feeds_below = children.iter().any(|c| below.contains(c));
        let parentless = g.parents(v)?.is_empty();
        if feeds_below {
            if m0.kind(v) == VariableKind::Exogenous {
                return Err(CompositionError::SharedExogenous(v.clone()));
            }
            if !parentless {
                extra.insert(v.clone());
            }
            shared.insert(v.clone());
            downstream.insert(v.clone());
            upstream.insert(v.clone());
        } else {
            upstream.insert(v.clone());
        }
    }
    Ok(Partition {
        upstream,
        downstream,
        shared,
        extra_shared: extra,
    })
}

/// The downstream utilities are d-separated from the bridge given the
/// downstream decisions and their parents, in the full graph.
pub fn is_orthomodular(d: &Decomposition) -> Result<bool, CompositionError> {
    let g = &d.m0.graph;
    let decisions = d.m2.decisions();
    let mut given = decisions.clone();
    for dec in &decisions {
        given.extend(g.parents(dec)?);
    }
    Ok(g.d_separated(&d.bridge, &d.m2.utilities(), &given)?)
}

/// Decides whether cutting `m0` at `bridge` yields an orthomodular
/// decomposition, returning it when it does.
pub fn check_bridge(
    m0: &Scdm,
    bridge: &BTreeSet<String>,
) -> Result<BridgeVerdict, CompositionError> {
    for b in bridge {
        m0.graph.id(b)?;
    }
    let part = partition_from_bridge(m0, bridge)?;
    if !part.extra_shared.is_empty() {
        return Ok(BridgeVerdict {
            orthomodular: false,
            reason: format!(
                "not a bridge: the downstream side is also fed by {}",
                part.extra_shared
                    .iter()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
            decomposition: None,
        });
    }
    let d = decompose(m0, &part.upstream, &part.downstream, bridge)?;
    let ok = is_orthomodular(&d)?;
    let reason = if ok {
        "bridge separates downstream utilities from upstream given downstream information"
            .to_string()
    } else {
        "an active path joins the bridge to a downstream utility around the downstream information"
            .to_string()
    };
    Ok(BridgeVerdict {
        orthomodular: ok,
        reason,
        decomposition: if ok { Some(d) } else { None },
    })
}

/// Renames variables throughout a model (used when importing components).
pub fn rename(m: &Scdm, map: &BTreeMap<String, String>) -> Result<Scdm, CompositionError> {
    let p = m.to_parts();
    let r = |s: &String| map.get(s).cloned().unwrap_or_else(|| s.clone());
    let out = ModelParts {
        kinds: p.kinds.iter().map(|(k, v)| (r(k), *v)).collect(),
        observes: p
            .observes
            .iter()
            .map(|(k, v)| (r(k), v.iter().map(r).collect()))
            .collect(),
        equations: p
            .equations
            .into_iter()
            .map(|(k, e)| (r(&k), e.rename(map)))
            .collect(),
        constraints: p
            .constraints
            .into_iter()
            .map(|(k, c)| {
                let c = match c {
                    crate::model::Constraint::Interval { lower, upper } => {
                        crate::model::Constraint::Interval {
                            lower: lower.rename(map),
                            upper: upper.rename(map),
                        }
                    }
                    s => s,
                };
                (r(&k), c)
            })
            .collect(),
        exogenous: p
            .exogenous
            .into_iter()
            .map(|(k, d)| {
                let d = match d {
                    crate::model::Distribution::Markov {
                        states,
                        matrix,
                        given,
                    } => crate::model::Distribution::Markov {
                        states,
                        matrix,
                        given: r(&given),
                    },
                    other => other,
                };
                (r(&k), d)
            })
            .collect(),
        params: p.params,
        domains: p.domains.into_iter().map(|(k, d)| (r(&k), d)).collect(),
    };
    Ok(out.build()?)
}
