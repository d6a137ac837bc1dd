//! Typed directed acyclic graphs over model variables.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

/// The role a variable plays in a decision model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VariableKind {
    State,
    Decision,
    Utility,
    Exogenous,
}

impl VariableKind {
    pub fn keyword(self) -> &'static str {
        match self {
            VariableKind::State => "state",
            VariableKind::Decision => "decision",
            VariableKind::Utility => "utility",
            VariableKind::Exogenous => "exogenous",
        }
    }

    fn dot_shape(self) -> &'static str {
        match self {
            VariableKind::State => "ellipse",
            VariableKind::Decision => "box",
            VariableKind::Utility => "diamond",
            VariableKind::Exogenous => "doublecircle",
        }
    }
}

impl fmt::Display for VariableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("variable `{0}` declared twice")]
    DuplicateVariable(String),
    #[error("cycle through {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("self loop on `{0}`")]
    SelfLoop(String),
    #[error("exogenous variable `{0}` has parent `{1}`")]
    ExogenousWithParent(String, String),
    #[error("`{0}` is not a decision variable")]
    NotDecision(String),
    #[error("variable sets overlap on `{0}`")]
    Overlap(String),
}

/// Mutable staging area for a [`CausalGraph`].
#[derive(Debug, Clone, Default)]
pub struct GraphBuilder {
    kinds: BTreeMap<String, VariableKind>,
    edges: BTreeSet<(String, String)>,
    duplicates: Vec<String>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn variable(&mut self, name: impl Into<String>, kind: VariableKind) -> &mut Self {
        let name = name.into();
        if self.kinds.insert(name.clone(), kind).is_some() {
            self.duplicates.push(name);
        }
        self
    }

    pub fn edge(&mut self, from: impl Into<String>, to: impl Into<String>) -> &mut Self {
        self.edges.insert((from.into(), to.into()));
        self
    }

    /// Validates the staged graph and freezes it.
    pub fn finalize(&self) -> Result<CausalGraph, GraphError> {
        if let Some(d) = self.duplicates.first() {
            return Err(GraphError::DuplicateVariable(d.clone()));
        }
        let names: Vec<String> = self.kinds.keys().cloned().collect();
        let kinds: Vec<VariableKind> = self.kinds.values().copied().collect();
        let index: BTreeMap<String, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let n = names.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for (from, to) in &self.edges {
            let f = *index
                .get(from)
                .ok_or_else(|| GraphError::UnknownVariable(from.clone()))?;
            let t = *index
                .get(to)
                .ok_or_else(|| GraphError::UnknownVariable(to.clone()))?;
            if f == t {
                return Err(GraphError::SelfLoop(from.clone()));
            }
            if kinds[t] == VariableKind::Exogenous {
                return Err(GraphError::ExogenousWithParent(to.clone(), from.clone()));
            }
            parents[t].push(f);
            children[f].push(t);
        }
        for list in parents.iter_mut().chain(children.iter_mut()) {
            list.sort_unstable();
        }
        let topo = topological_order(&parents, &children).map_err(|cycle| {
            GraphError::Cycle(cycle.into_iter().map(|i| names[i].clone()).collect())
        })?;
        Ok(CausalGraph {
            names,
            kinds,
            index,
            parents,
            children,
            topo,
        })
    }
}

fn topological_order(
    parents: &[Vec<usize>],
    children: &[Vec<usize>],
) -> Result<Vec<usize>, Vec<usize>> {
    let n = parents.len();
    let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&v) = ready.iter().next() {
        ready.remove(&v);
        order.push(v);
        for &c in &children[v] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Walk parent links among the unresolved nodes until one repeats.
    let stuck: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] > 0).collect();
    let mut path = Vec::new();
    let mut seen = BTreeMap::new();
    let mut cur = *stuck.iter().next().expect("unresolved node");
    loop {
        if let Some(&pos) = seen.get(&cur) {
            let mut cycle: Vec<usize> = path[pos..].to_vec();
            cycle.reverse();
            cycle.push(cycle[0]);
            return Err(cycle);
        }
        seen.insert(cur, path.len());
        path.push(cur);
        cur = *parents[cur]
            .iter()
            .find(|p| stuck.contains(p))
            .expect("unresolved node has an unresolved parent");
    }
}

/// A finalized, immutable DAG. Variables are indexed in alphabetical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalGraph {
    names: Vec<String>,
    kinds: Vec<VariableKind>,
    index: BTreeMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

impl CausalGraph {
    pub fn builder() -> GraphBuilder {
        GraphBuilder::new()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize, GraphError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownVariable(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kind(&self, name: &str) -> Result<VariableKind, GraphError> {
        Ok(self.kinds[self.id(name)?])
    }

    pub fn kind_of(&self, id: usize) -> VariableKind {
        self.kinds[id]
    }

    pub fn parent_ids(&self, id: usize) -> &[usize] {
        &self.parents[id]
    }

    pub fn child_ids(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    /// Variable ids in a deterministic topological order.
    pub fn topological(&self) -> &[usize] {
        &self.topo
    }

    pub fn edges(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (t, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                out.push((self.names[p].clone(), self.names[t].clone()));
            }
        }
        out.sort();
        out
    }

    pub fn variables_of(&self, kind: VariableKind) -> BTreeSet<String> {
        self.names
            .iter()
            .zip(&self.kinds)
            .filter(|(_, k)| **k == kind)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Rebuilds the graph in a builder so it can be edited and re-validated.
    pub fn to_builder(&self) -> GraphBuilder {
        let mut b = GraphBuilder::new();
        for (n, k) in self.names.iter().zip(&self.kinds) {
            b.variable(n.clone(), *k);
        }
        for (f, t) in self.edges() {
            b.edge(f, t);
        }
        b
    }

    /// Returns a copy with one more edge, re-checking every invariant.
    pub fn with_edge(&self, from: &str, to: &str) -> Result<CausalGraph, GraphError> {
        let mut b = self.to_builder();
        b.edge(from, to);
        b.finalize()
    }

    pub fn parents(&self, v: &str) -> Result<BTreeSet<String>, GraphError> {
        let id = self.id(v)?;
        Ok(self.parents[id]
            .iter()
            .map(|&p| self.names[p].clone())
            .collect())
    }

    pub fn children(&self, v: &str) -> Result<BTreeSet<String>, GraphError> {
        let id = self.id(v)?;
        Ok(self.children[id]
            .iter()
            .map(|&c| self.names[c].clone())
            .collect())
    }

    /// Parentless state variables. Exogenous variables are never roots.
    pub fn roots(&self) -> BTreeSet<String> {
        (0..self.len())
            .filter(|&i| self.kinds[i] == VariableKind::State && self.parents[i].is_empty())
            .map(|i| self.names[i].clone())
            .collect()
    }

    /// Endogenous variables without children.
    pub fn leaves(&self) -> BTreeSet<String> {
        (0..self.len())
            .filter(|&i| self.kinds[i] != VariableKind::Exogenous && self.children[i].is_empty())
            .map(|i| self.names[i].clone())
            .collect()
    }

    pub fn is_root(&self, v: &str) -> bool {
        self.id(v)
            .map(|i| self.kinds[i] == VariableKind::State && self.parents[i].is_empty())
            .unwrap_or(false)
    }

    fn closure(&self, start: &[usize], up: bool) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut stack: Vec<usize> = start.to_vec();
        while let Some(v) = stack.pop() {
            let next = if up {
                &self.parents[v]
            } else {
                &self.children[v]
            };
            for &w in next {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen
    }

    /// Strict descendants of `v`.
    pub fn descendants(&self, v: &str) -> Result<BTreeSet<String>, GraphError> {
        let id = self.id(v)?;
        Ok(self.collect(&self.closure(&[id], false)))
    }

    /// Strict ancestors of `v`.
    pub fn ancestors(&self, v: &str) -> Result<BTreeSet<String>, GraphError> {
        let id = self.id(v)?;
        Ok(self.collect(&self.closure(&[id], true)))
    }

    fn collect(&self, mask: &[bool]) -> BTreeSet<String> {
        mask.iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| self.names[i].clone())
            .collect()
    }

    fn ids<'a, I: IntoIterator<Item = &'a String>>(
        &self,
        set: I,
    ) -> Result<Vec<usize>, GraphError> {
        set.into_iter().map(|n| self.id(n)).collect()
    }

    /// Utility variables reachable from `d` along directed edges.
    pub fn utility_descendants(&self, d: &str) -> Result<BTreeSet<String>, GraphError> {
        Ok(self
            .descendants(d)?
            .into_iter()
            .filter(|n| self.kinds[self.index[n]] == VariableKind::Utility)
            .collect())
    }

    /// Reachability-based d-separation test.
    ///
    /// A variable that is itself conditioned on carries no further
    /// information, so members of `zs` are dropped from `xs` and `ys` first.
    pub fn d_separated(
        &self,
        xs: &BTreeSet<String>,
        ys: &BTreeSet<String>,
        zs: &BTreeSet<String>,
    ) -> Result<bool, GraphError> {
        let x = self.ids(xs)?;
        let y = self.ids(ys)?;
        let z = self.ids(zs)?;
        if let Some(common) = xs.intersection(ys).find(|v| !zs.contains(*v)) {
            return Err(GraphError::Overlap(common.clone()));
        }
        Ok(self.d_separated_ids(&x, &y, &z))
    }

    pub fn d_separated_ids(&self, x: &[usize], y: &[usize], z: &[usize]) -> bool {
        let n = self.len();
        let mut in_z = vec![false; n];
        for &v in z {
            in_z[v] = true;
        }
        // Z together with its ancestors: colliders in this set are open.
        let mut opens_collider = self.closure(z, true);
        for &v in z {
            opens_collider[v] = true;
        }
        let mut target = vec![false; n];
        for &v in y {
            if !in_z[v] {
                target[v] = true;
            }
        }
        // visited[v][0]: arrived from a child (moving up); [1]: from a parent.
        let mut visited = vec![[false; 2]; n];
        let mut queue = VecDeque::new();
        for &v in x {
            if !in_z[v] {
                queue.push_back((v, 0usize));
            }
        }
        while let Some((v, dir)) = queue.pop_front() {
            if visited[v][dir] {
                continue;
            }
            visited[v][dir] = true;
            if !in_z[v] && target[v] {
                return false;
            }
            if dir == 0 {
                if in_z[v] {
                    continue;
                }
                for &p in &self.parents[v] {
                    queue.push_back((p, 0));
                }
                for &c in &self.children[v] {
                    queue.push_back((c, 1));
                }
            } else {
                if !in_z[v] {
                    for &c in &self.children[v] {
                        queue.push_back((c, 1));
                    }
                }
                if opens_collider[v] {
                    for &p in &self.parents[v] {
                        queue.push_back((p, 0));
                    }
                }
            }
        }
        true
    }

    /// Whether a fresh parent attached to `d_to` has an active path to the
    /// parents of some utility in `utilities_of_d_from`, given `d_from` and
    /// its parents. The input graph is left untouched.
    pub fn s_reachable(
        &self,
        d_from: &str,
        d_to: &str,
        utilities_of_d_from: &BTreeSet<String>,
    ) -> Result<bool, GraphError> {
        for d in [d_from, d_to] {
            if self.kind(d)? != VariableKind::Decision {
                return Err(GraphError::NotDecision(d.to_string()));
            }
        }
        let mut fresh = format!("{d_to}^");
        while self.contains(&fresh) {
            fresh.push('^');
        }
        let mut b = self.to_builder();
        b.variable(fresh.clone(), VariableKind::State)
            .edge(fresh.clone(), d_to);
        let scratch = b.finalize()?;
        let mut given = self.parents(d_from)?;
        given.insert(d_from.to_string());
        let mut targets = BTreeSet::new();
        for u in utilities_of_d_from {
            targets.extend(self.parents(u)?);
        }
        targets.remove(&fresh);
        let x = scratch.ids([&fresh])?;
        let y = scratch.ids(&targets)?;
        let z = scratch.ids(&given)?;
        Ok(!scratch.d_separated_ids(&x, &y, &z))
    }

    /// Graphviz rendering with kind-specific node shapes, sorted for stable output.
    pub fn to_dot(&self, name: &str) -> String {
        let mut out = format!("digraph \"{name}\" {{\n");
        for (n, k) in self.names.iter().zip(&self.kinds) {
            out.push_str(&format!("  \"{n}\" [shape={}];\n", k.dot_shape()));
        }
        for (f, t) in self.edges() {
            out.push_str(&format!("  \"{f}\" -> \"{t}\";\n"));
        }
        out.push_str("}\n");
        out
    }
}

/// Convenience for building name sets in queries.
pub fn set<I, S>(items: I) -> BTreeSet<String>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    items.into_iter().map(Into::into).collect()
}
