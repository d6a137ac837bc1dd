use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::parser::{
    parse, Arg, Ast, ConstraintSpec, DistSpec, DomainSpec, Item, ItemKind, VarDecl,
};
use super::{Diag, Span};
use crate::composition;
use crate::expr::Expr;
use crate::graph::VariableKind;
use crate::model::{Constraint, Distribution, Domain, ModelParts, Scdm};
use crate::scdp::Scdp;

/// Interval domains without an explicit `grid` get this many points.
pub const DEFAULT_GRID_POINTS: usize = 101;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LowerOptions {
    /// Variant blocks to switch on.
    pub variants: BTreeSet<String>,
    /// Parameter values replacing the declared ones.
    pub params: BTreeMap<String, f64>,
    /// Grid sizes replacing declared ones for interval domains.
    pub grids: BTreeMap<String, usize>,
}

/// A lowered file: the model plus whatever process, bridge and variant
/// information it declares.
#[derive(Debug, Clone)]
pub struct Lowered {
    pub name: String,
    pub model: Scdm,
    pub process: Option<Scdp>,
    pub bridge: Option<BTreeSet<String>>,
    /// Variant blocks present in the file.
    pub variants: BTreeSet<String>,
}

type Loader<'a> = &'a mut dyn FnMut(&str) -> Result<Lowered, String>;

/// Lowers source text that does not import other files.
pub fn lower_str(src: &str, opts: &LowerOptions) -> Result<Lowered, Vec<Diag>> {
    let ast = parse(src)?;
    lower(&ast, opts, &mut |p: &str| {
        Err(format!("cannot import \"{p}\" here: no file context"))
    })
}

/// Lowers a parsed file; `loader` resolves `use` directives.
pub fn lower(ast: &Ast, opts: &LowerOptions, loader: Loader<'_>) -> Result<Lowered, Vec<Diag>> {
    lower_impl(ast, opts, loader, false)
}

/// Reads, parses and lowers a file, resolving imports relative to it.
pub fn load_file(path: &Path, opts: &LowerOptions) -> Result<Lowered, Vec<Diag>> {
    load_inner(path, opts, &mut Vec::new(), false)
}

fn load_inner(
    path: &Path,
    opts: &LowerOptions,
    stack: &mut Vec<PathBuf>,
    nested: bool,
) -> Result<Lowered, Vec<Diag>> {
    let canon = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
    if stack.contains(&canon) {
        return Err(vec![Diag::new(
            Span::origin(),
            format!("import cycle through {}", path.display()),
        )]);
    }
    let src = std::fs::read_to_string(path).map_err(|e| {
        vec![Diag::new(
            Span::origin(),
            format!("cannot read {}: {e}", path.display()),
        )]
    })?;
    let ast = parse(&src)?;
    stack.push(canon);
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let inner = LowerOptions {
        variants: BTreeSet::new(),
        ..opts.clone()
    };
    let result = lower_impl(
        &ast,
        opts,
        &mut |rel: &str| {
            load_inner(&dir.join(rel), &inner, stack, true).map_err(|ds| {
                ds.iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("; ")
            })
        },
        nested,
    );
    stack.pop();
    result
}

fn item_key(k: &ItemKind) -> Option<String> {
    Some(match k {
        ItemKind::Model(_) => "model".into(),
        ItemKind::Param(n, _) => format!("param {n}"),
        ItemKind::Var(d) => format!("var {}", d.name),
        ItemKind::Equation(t, _) => format!("eq {t}"),
        ItemKind::Constraint(t, _) => format!("con {t}"),
        ItemKind::Discount(_) => "discount".into(),
        ItemKind::Horizon(_) => "horizon".into(),
        ItemKind::Bridge(_) => "bridge".into(),
        _ => return None,
    })
}

/// Base items with enabled variant blocks applied; a variant item replaces
/// the base item declaring the same thing.
fn flatten(items: &[Item], enabled: &BTreeSet<String>) -> Vec<Item> {
    let mut out: Vec<Item> = items
        .iter()
        .filter(|i| !matches!(i.kind, ItemKind::Variant(..)))
        .cloned()
        .collect();
    for item in items {
        let ItemKind::Variant(name, inner) = &item.kind else {
            continue;
        };
        if !enabled.contains(name) {
            continue;
        }
        for it in inner {
            let key = item_key(&it.kind);
            match key.and_then(|k| {
                out.iter()
                    .position(|o| item_key(&o.kind).as_deref() == Some(k.as_str()))
            }) {
                Some(pos) => out[pos] = it.clone(),
                None => out.push(it.clone()),
            }
        }
    }
    out
}

fn base_name(n: &str) -> Option<&str> {
    n.strip_suffix('\'')
}

fn domain_of(spec: &Option<DomainSpec>) -> Domain {
    match spec {
        None => Domain::real(),
        Some(DomainSpec::Set(v)) => Domain::Discrete(v.clone()),
        Some(DomainSpec::Interval { lo, hi, points }) => {
            Domain::interval(*lo, *hi, points.unwrap_or(DEFAULT_GRID_POINTS))
        }
    }
}

struct Ctx<'a> {
    params: &'a BTreeMap<String, f64>,
    diags: Vec<Diag>,
}

impl Ctx<'_> {
    fn number(&mut self, a: &Arg, span: Span) -> Option<f64> {
        match a {
            Arg::Num(v) => Some(*v),
            Arg::Name(n) => match self.params.get(n) {
                Some(v) => Some(*v),
                None => {
                    self.diags
                        .push(Diag::new(span, format!("`{n}` is not a parameter")));
                    None
                }
            },
            Arg::List(_) => {
                self.diags
                    .push(Diag::new(span, "expected a number, found a list"));
                None
            }
        }
    }

    fn numbers(&mut self, a: &Arg, span: Span) -> Option<Vec<f64>> {
        match a {
            Arg::List(items) => items.iter().map(|x| self.number(x, span)).collect(),
            _ => {
                self.diags.push(Diag::new(span, "expected a list"));
                None
            }
        }
    }

    fn distribution(&mut self, d: &DistSpec) -> Option<Distribution> {
        let mut args: BTreeMap<&str, (&Arg, Span)> = BTreeMap::new();
        for (k, v, sp) in &d.args {
            if args.insert(k.as_str(), (v, *sp)).is_some() {
                self.diags
                    .push(Diag::new(*sp, format!("argument `{k}` given twice")));
            }
        }
        let allowed: &[&str] = match d.family.as_str() {
            "Normal" => &["mean", "sd"],
            "Iid" => &["states", "probs"],
            "Markov" => &["states", "matrix", "given"],
            other => {
                self.diags.push(Diag::new(
                    d.span,
                    format!("unknown distribution `{other}` (expected Normal, Iid or Markov)"),
                ));
                return None;
            }
        };
        for (k, (_, sp)) in &args {
            if !allowed.contains(k) {
                self.diags.push(Diag::new(
                    *sp,
                    format!("`{}` takes no argument `{k}`", d.family),
                ));
            }
        }
        let mut required = |name: &str| -> Option<(&Arg, Span)> {
            let r = args.get(name).copied();
            if r.is_none() {
                self.diags.push(Diag::new(
                    d.span,
                    format!("`{}` needs argument `{name}`", d.family),
                ));
            }
            r
        };
        match d.family.as_str() {
            "Normal" => {
                let mean = args.get("mean").copied();
                let sd = args.get("sd").copied();
                let mean = match mean {
                    Some((a, sp)) => self.number(a, sp)?,
                    None => 0.0,
                };
                let sd = match sd {
                    Some((a, sp)) => self.number(a, sp)?,
                    None => 1.0,
                };
                Some(Distribution::Normal { mean, sd })
            }
            "Iid" => {
                let s = required("states");
                let p = required("probs");
                let (s, p) = (s?, p?);
                Some(Distribution::Iid {
                    states: self.numbers(s.0, s.1)?,
                    probs: self.numbers(p.0, p.1)?,
                })
            }
            _ => {
                let s = required("states");
                let m = required("matrix");
                let g = required("given");
                let (s, m, g) = (s?, m?, g?);
                let states = self.numbers(s.0, s.1)?;
                let matrix = match m.0 {
                    Arg::List(rows) => rows
                        .iter()
                        .map(|r| self.numbers(r, m.1))
                        .collect::<Option<Vec<_>>>()?,
                    _ => {
                        self.diags
                            .push(Diag::new(m.1, "matrix must be a list of rows"));
                        return None;
                    }
                };
                let given = match g.0 {
                    Arg::Name(n) => n.clone(),
                    _ => {
                        self.diags
                            .push(Diag::new(g.1, "`given` must name a root variable"));
                        return None;
                    }
                };
                Some(Distribution::Markov {
                    states,
                    matrix,
                    given,
                })
            }
        }
    }
}

fn lower_impl(
    ast: &Ast,
    opts: &LowerOptions,
    loader: Loader<'_>,
    nested: bool,
) -> Result<Lowered, Vec<Diag>> {
    let mut diags = Vec::new();
    let variants: BTreeSet<String> = ast
        .items
        .iter()
        .filter_map(|i| match &i.kind {
            ItemKind::Variant(n, _) => Some(n.clone()),
            _ => None,
        })
        .collect();
    if !nested {
        for v in opts.variants.difference(&variants) {
            diags.push(Diag::new(Span::origin(), format!("unknown variant `{v}`")));
        }
    }
    let items = flatten(&ast.items, &opts.variants);

    let mut name = None;
    let mut params: BTreeMap<String, f64> = BTreeMap::new();
    let mut decls: BTreeMap<String, (VarDecl, Span)> = BTreeMap::new();
    let mut equations: BTreeMap<String, (Expr, Span)> = BTreeMap::new();
    let mut constraints: BTreeMap<String, (ConstraintSpec, Span)> = BTreeMap::new();
    let mut discount = None;
    let mut end_pairs: Vec<(String, String, Span)> = Vec::new();
    let mut horizon = None;
    let mut bridge = None;
    let mut uses = Vec::new();
    let dup = |what: &str, n: &str, sp: Span| Diag::new(sp, format!("duplicate {what} `{n}`"));
    for item in &items {
        let sp = item.span;
        match &item.kind {
            ItemKind::Model(n) => {
                if name.replace(n.clone()).is_some() {
                    diags.push(Diag::new(sp, "duplicate model name"));
                }
            }
            ItemKind::Param(n, v) => {
                if params
                    .insert(n.clone(), opts.params.get(n).copied().unwrap_or(*v))
                    .is_some()
                {
                    diags.push(dup("parameter", n, sp));
                }
            }
            ItemKind::Var(d) => {
                if decls.insert(d.name.clone(), (d.clone(), sp)).is_some() {
                    diags.push(dup("variable", &d.name, sp));
                }
            }
            ItemKind::Equation(t, e) => {
                if equations.insert(t.clone(), (e.clone(), sp)).is_some() {
                    diags.push(dup("equation for", t, sp));
                }
            }
            ItemKind::Constraint(t, c) => {
                if constraints.insert(t.clone(), (c.clone(), sp)).is_some() {
                    diags.push(dup("constraint on", t, sp));
                }
            }
            ItemKind::Discount(n) => {
                if discount.replace((n.clone(), sp)).is_some() {
                    diags.push(Diag::new(sp, "duplicate discount"));
                }
            }
            ItemKind::EndState(pairs) => {
                end_pairs.extend(pairs.iter().map(|(a, b)| (a.clone(), b.clone(), sp)))
            }
            ItemKind::Horizon(n) => {
                if horizon.replace((*n, sp)).is_some() {
                    diags.push(Diag::new(sp, "duplicate horizon"));
                }
            }
            ItemKind::Bridge(names) => {
                if bridge.replace((names.clone(), sp)).is_some() {
                    diags.push(Diag::new(sp, "duplicate bridge"));
                }
            }
            ItemKind::Use(path, sharing) => uses.push((path.clone(), sharing.clone(), sp)),
            ItemKind::Variant(..) => {}
        }
    }
    for p in params.keys() {
        if decls.contains_key(p) {
            diags.push(Diag::new(
                decls[p].1,
                format!("`{p}` is both a parameter and a variable"),
            ));
        }
    }

    // Imported components.
    let mut imported: Vec<(Lowered, BTreeSet<String>, Span)> = Vec::new();
    for (path, sharing, sp) in &uses {
        match loader(path) {
            Ok(l) => {
                for s in sharing {
                    if !l.model.graph.contains(s) {
                        diags.push(Diag::new(
                            *sp,
                            format!("`{s}` is not a variable of \"{path}\""),
                        ));
                    }
                }
                for n in decls.keys() {
                    if l.model.graph.contains(n) && !sharing.contains(n) {
                        diags.push(Diag::new(
                            decls[n].1,
                            format!("`{n}` is also declared in \"{path}\" but not shared"),
                        ));
                    }
                }
                for (p, v) in &l.model.params {
                    match params.get(p) {
                        Some(w) if w != v => diags.push(Diag::new(
                            *sp,
                            format!("parameter `{p}` differs from \"{path}\""),
                        )),
                        _ => {
                            params.insert(p.clone(), *v);
                        }
                    }
                }
                imported.push((l, sharing.iter().cloned().collect(), *sp));
            }
            Err(e) => diags.push(Diag::new(*sp, format!("in \"{path}\": {e}"))),
        }
    }
    let imported_domain = |n: &str| -> Option<Domain> {
        imported
            .iter()
            .find_map(|(l, _, _)| l.model.domains.get(n).cloned())
    };

    // Domains with grid overrides.
    let mut domains: BTreeMap<String, Domain> = BTreeMap::new();
    for (n, (d, sp)) in &decls {
        let mut dom = domain_of(&d.domain);
        let over = opts
            .grids
            .get(n)
            .or_else(|| base_name(n).and_then(|b| opts.grids.get(b)));
        if let Some(&pts) = over {
            match dom {
                Domain::Interval { lo, hi, .. } if lo.is_finite() && hi.is_finite() => {
                    dom = Domain::interval(lo, hi, pts)
                }
                _ => diags.push(Diag::new(
                    *sp,
                    format!("grid override needs a bounded interval domain on `{n}`"),
                )),
            }
        }
        domains.insert(n.clone(), dom);
    }

    let mut parts = ModelParts::default();
    let mut spans: BTreeMap<String, Span> = BTreeMap::new();
    for (n, (d, sp)) in &decls {
        parts.kinds.insert(n.clone(), d.kind);
        spans.insert(n.clone(), *sp);
        parts.domains.insert(n.clone(), domains[n].clone());
    }
    for (_, sharing, sp) in &imported {
        for s in sharing {
            if !parts.kinds.contains_key(s) {
                parts.kinds.insert(s.clone(), VariableKind::State);
                spans.insert(s.clone(), *sp);
                if let Some(dom) = imported_domain(s) {
                    parts.domains.insert(s.clone(), dom);
                }
            }
        }
    }

    // Names referenced anywhere, for primed auto-declaration.
    let mut referenced: Vec<(String, Span)> = Vec::new();
    for (t, (e, sp)) in &equations {
        referenced.push((t.clone(), *sp));
        referenced.extend(e.variables().into_iter().map(|v| (v, *sp)));
    }
    for (t, (c, sp)) in &constraints {
        referenced.push((t.clone(), *sp));
        if let ConstraintSpec::Interval(l, h) = c {
            referenced.extend(
                l.variables()
                    .into_iter()
                    .chain(h.variables())
                    .map(|v| (v, *sp)),
            );
        }
    }
    for (d, sp) in decls.values() {
        if let Some(obs) = &d.observes {
            referenced.extend(obs.iter().map(|o| (o.clone(), *sp)));
        }
    }
    for (a, b, sp) in &end_pairs {
        referenced.push((a.clone(), *sp));
        referenced.push((b.clone(), *sp));
    }
    for (n, sp) in &referenced {
        if parts.kinds.contains_key(n) || params.contains_key(n) {
            continue;
        }
        let Some(base) = base_name(n) else { continue };
        let dom = parts
            .domains
            .get(base)
            .cloned()
            .or_else(|| imported_domain(base));
        if let Some(dom) = dom {
            let dom = match (opts.grids.get(base), &dom) {
                (Some(&pts), Domain::Interval { lo, hi, .. })
                    if lo.is_finite() && hi.is_finite() && !decls.contains_key(base) =>
                {
                    Domain::interval(*lo, *hi, pts)
                }
                _ => dom,
            };
            parts.kinds.insert(n.clone(), VariableKind::State);
            parts.domains.insert(n.clone(), dom);
            spans.insert(n.clone(), *sp);
        }
    }

    let param_names: BTreeSet<String> = params.keys().cloned().collect();
    let mut ctx = Ctx {
        params: &params,
        diags: Vec::new(),
    };
    let check_names =
        |e: &Expr, sp: Span, kinds: &BTreeMap<String, VariableKind>, out: &mut Vec<Diag>| {
            for v in e.variables() {
                if !kinds.contains_key(&v) && !param_names.contains(&v) {
                    out.push(Diag::new(sp, format!("unknown name `{v}`")));
                }
            }
        };
    for (t, (e, sp)) in &equations {
        if !parts.kinds.contains_key(t) {
            diags.push(Diag::new(
                *sp,
                format!("equation for undeclared variable `{t}`"),
            ));
            continue;
        }
        check_names(e, *sp, &parts.kinds, &mut diags);
        let e = e.clone().resolve_params(&param_names);
        parts.equations.insert(t.clone(), e);
        spans.entry(t.clone()).or_insert(*sp);
    }
    for (t, (c, sp)) in &constraints {
        if !parts.kinds.contains_key(t) {
            diags.push(Diag::new(
                *sp,
                format!("constraint on undeclared variable `{t}`"),
            ));
            continue;
        }
        let c = match c {
            ConstraintSpec::Set(v) => Constraint::Set(v.clone()),
            ConstraintSpec::Interval(l, h) => {
                check_names(l, *sp, &parts.kinds, &mut diags);
                check_names(h, *sp, &parts.kinds, &mut diags);
                Constraint::Interval {
                    lower: l.clone().resolve_params(&param_names),
                    upper: h.clone().resolve_params(&param_names),
                }
            }
        };
        parts.constraints.insert(t.clone(), c);
    }
    for (n, (d, sp)) in &decls {
        if let Some(obs) = &d.observes {
            if d.kind != VariableKind::Decision {
                diags.push(Diag::new(*sp, format!("only decisions observe (on `{n}`)")));
            }
            for o in obs {
                if !parts.kinds.contains_key(o) {
                    diags.push(Diag::new(*sp, format!("unknown name `{o}`")));
                }
            }
            parts
                .observes
                .insert(n.clone(), obs.iter().cloned().collect());
        } else if d.kind == VariableKind::Decision {
            parts.observes.insert(n.clone(), BTreeSet::new());
        }
        match (&d.dist, d.kind) {
            (Some(spec), VariableKind::Exogenous) => {
                if let Some(dist) = ctx.distribution(spec) {
                    parts.exogenous.insert(n.clone(), dist);
                }
            }
            (Some(spec), _) => diags.push(Diag::new(
                spec.span,
                format!("only exogenous variables have distributions (on `{n}`)"),
            )),
            (None, VariableKind::Exogenous) => diags.push(Diag::new(
                *sp,
                format!("exogenous `{n}` needs a distribution"),
            )),
            _ => {}
        }
    }
    diags.append(&mut ctx.diags);
    parts.params = params.clone();
    if !nested {
        for p in opts.params.keys() {
            if !params.contains_key(p) {
                diags.push(Diag::new(
                    Span::origin(),
                    format!("override for unknown parameter `{p}`"),
                ));
            }
        }
        for g in opts.grids.keys() {
            let known = parts.kinds.contains_key(g)
                || imported.iter().any(|(l, _, _)| l.model.graph.contains(g));
            if !known {
                diags.push(Diag::new(
                    Span::origin(),
                    format!("grid override for unknown variable `{g}`"),
                ));
            }
        }
    }
    if !diags.is_empty() {
        diags.sort_by_key(|d| d.span.start);
        return Err(diags);
    }

    let file_span = items.first().map(|i| i.span).unwrap_or_else(Span::origin);
    let locate = |subject: &Option<String>| -> Span {
        subject
            .as_ref()
            .and_then(|s| spans.get(s).copied())
            .unwrap_or(Span {
                end: file_span.start,
                ..file_span
            })
    };
    let mut model = parts.build().map_err(|ds| {
        ds.into_iter()
            .map(|d| Diag::new(locate(&d.subject), d.to_string()))
            .collect::<Vec<_>>()
    })?;
    for (l, _, sp) in &imported {
        model = composition::compose(&l.model, &model)
            .map_err(|e| vec![Diag::new(*sp, e.to_string())])?;
    }

    let mut process = None;
    match discount {
        Some((beta, sp)) => {
            let mut end_state: BTreeMap<String, String> = BTreeMap::new();
            for (a, b, psp) in &end_pairs {
                if end_state.insert(a.clone(), b.clone()).is_some() {
                    return Err(vec![Diag::new(*psp, format!("`{a}` mapped twice"))]);
                }
            }
            for n in model.graph.names() {
                if let Some(base) = base_name(n) {
                    if model.graph.contains(base)
                        && model.graph.is_root(base)
                        && model.kind(base) == VariableKind::State
                        && !end_state.contains_key(base)
                    {
                        end_state.insert(base.to_string(), n.clone());
                    }
                }
            }
            let h = horizon.map(|(n, _)| n);
            process = Some(
                Scdp::new(model.clone(), end_state, &beta, h)
                    .map_err(|e| vec![Diag::new(sp, e.to_string())])?,
            );
        }
        None => {
            if let Some((_, _, sp)) = end_pairs.first() {
                return Err(vec![Diag::new(
                    *sp,
                    "an end-state mapping needs a discount",
                )]);
            }
            if let Some((_, sp)) = horizon {
                return Err(vec![Diag::new(sp, "a horizon needs a discount")]);
            }
        }
    }
    let bridge = match bridge {
        Some((names, sp)) => {
            if let Some(n) = names.iter().find(|n| !model.graph.contains(n)) {
                return Err(vec![Diag::new(
                    sp,
                    format!("bridge names unknown variable `{n}`"),
                )]);
            }
            Some(names.into_iter().collect())
        }
        None => None,
    };
    Ok(Lowered {
        name: name.unwrap_or_else(|| "model".into()),
        model,
        process,
        bridge,
        variants,
    })
}
