//! Arithmetic expressions used for structural equations and constraint bounds.
//!
//! Evaluation is total: logarithms of non-positive numbers give negative
//! infinity and undefined operations give NaN, which the solvers treat as an
//! infeasible outcome.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Ln,
    Min,
    Max,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        match name {
            "exp" => Some(Func::Exp),
            "ln" | "log" => Some(Func::Ln),
            "min" => Some(Func::Min),
            "max" => Some(Func::Max),
            _ => None,
        }
    }

    /// Accepted argument counts (inclusive).
    pub fn arity(self) -> (usize, usize) {
        match self {
            Func::Exp | Func::Ln => (1, 1),
            Func::Min | Func::Max => (2, usize::MAX),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }

    fn test(self, a: f64, b: f64) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Param(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
    /// 1 when the comparison holds, 0 otherwise.
    Indicator(CmpOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    /// Negation that folds into numeric literals, so printing and parsing agree.
    pub fn neg(e: Expr) -> Expr {
        match e {
            Expr::Num(v) => Expr::Num(-v),
            other => Expr::Neg(Box::new(other)),
        }
    }

    pub fn bin(op: BinOp, l: Expr, r: Expr) -> Expr {
        Expr::Bin(op, Box::new(l), Box::new(r))
    }

    /// Variable names referenced by the expression.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.walk(&mut |e| {
            if let Expr::Var(n) = e {
                out.insert(n.clone());
            }
        });
        out
    }

    pub fn parameters(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.walk(&mut |e| {
            if let Expr::Param(n) = e {
                out.insert(n.clone());
            }
        });
        out
    }

    fn walk(&self, f: &mut dyn FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Num(_) | Expr::Var(_) | Expr::Param(_) => {}
            Expr::Neg(e) => e.walk(f),
            Expr::Bin(_, l, r) | Expr::Indicator(_, l, r) => {
                l.walk(f);
                r.walk(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.walk(f)),
        }
    }

    /// Rewrites identifiers: names in `params` become parameter references.
    pub fn resolve_params(self, params: &BTreeSet<String>) -> Expr {
        self.map_leaves(&mut |e| match e {
            Expr::Var(n) if params.contains(&n) => Expr::Param(n),
            other => other,
        })
    }

    /// Renames variable references.
    pub fn rename(self, map: &BTreeMap<String, String>) -> Expr {
        self.map_leaves(&mut |e| match e {
            Expr::Var(n) => Expr::Var(map.get(&n).cloned().unwrap_or(n)),
            other => other,
        })
    }

    fn map_leaves(self, f: &mut dyn FnMut(Expr) -> Expr) -> Expr {
        match self {
            Expr::Neg(e) => Expr::Neg(Box::new(e.map_leaves(f))),
            Expr::Bin(op, l, r) => {
                Expr::Bin(op, Box::new(l.map_leaves(f)), Box::new(r.map_leaves(f)))
            }
            Expr::Indicator(op, l, r) => {
                Expr::Indicator(op, Box::new(l.map_leaves(f)), Box::new(r.map_leaves(f)))
            }
            Expr::Call(func, args) => {
                Expr::Call(func, args.into_iter().map(|a| a.map_leaves(f)).collect())
            }
            leaf => f(leaf),
        }
    }

    /// Evaluates with name lookups. Unknown names evaluate to NaN.
    pub fn eval(&self, vars: &dyn Fn(&str) -> Option<f64>, params: &BTreeMap<String, f64>) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(n) => vars(n).unwrap_or(f64::NAN),
            Expr::Param(n) => params.get(n).copied().unwrap_or(f64::NAN),
            Expr::Neg(e) => -e.eval(vars, params),
            Expr::Bin(op, l, r) => apply_bin(*op, l.eval(vars, params), r.eval(vars, params)),
            Expr::Call(func, args) => {
                let vals: Vec<f64> = args.iter().map(|a| a.eval(vars, params)).collect();
                apply_call(*func, &vals)
            }
            Expr::Indicator(op, l, r) => apply_cmp(*op, l.eval(vars, params), r.eval(vars, params)),
        }
    }

    /// Lowers to slot-indexed form with parameters substituted as constants.
    pub fn compile(
        &self,
        slot: &dyn Fn(&str) -> Option<usize>,
        params: &BTreeMap<String, f64>,
    ) -> Result<Compiled, String> {
        Ok(match self {
            Expr::Num(v) => Compiled::Const(*v),
            Expr::Var(n) => {
                Compiled::Slot(slot(n).ok_or_else(|| format!("unknown variable `{n}`"))?)
            }
            Expr::Param(n) => Compiled::Const(
                *params
                    .get(n)
                    .ok_or_else(|| format!("unknown parameter `{n}`"))?,
            ),
            Expr::Neg(e) => Compiled::Neg(Box::new(e.compile(slot, params)?)),
            Expr::Bin(op, l, r) => Compiled::Bin(
                *op,
                Box::new(l.compile(slot, params)?),
                Box::new(r.compile(slot, params)?),
            ),
            Expr::Call(func, args) => Compiled::Call(
                *func,
                args.iter()
                    .map(|a| a.compile(slot, params))
                    .collect::<Result<_, _>>()?,
            ),
            Expr::Indicator(op, l, r) => Compiled::Cmp(
                *op,
                Box::new(l.compile(slot, params)?),
                Box::new(r.compile(slot, params)?),
            ),
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Num(v) if v.is_sign_negative() => 3,
            Expr::Bin(BinOp::Pow, ..) => 4,
            _ => 5,
        }
    }

    fn write_at(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        if self.precedence() < min {
            write!(f, "(")?;
            self.write_at(f, 0)?;
            return write!(f, ")");
        }
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(n) | Expr::Param(n) => f.write_str(n),
            Expr::Neg(e) => {
                write!(f, "-")?;
                e.write_at(f, 3)
            }
            Expr::Bin(op, l, r) => {
                let (sym, lmin, rmin) = match op {
                    BinOp::Add => (" + ", 1, 2),
                    BinOp::Sub => (" - ", 1, 2),
                    BinOp::Mul => (" * ", 2, 3),
                    BinOp::Div => (" / ", 2, 3),
                    BinOp::Pow => ("^", 5, 3),
                };
                l.write_at(f, lmin)?;
                f.write_str(sym)?;
                r.write_at(f, rmin)
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    a.write_at(f, 0)?;
                }
                write!(f, ")")
            }
            Expr::Indicator(op, l, r) => {
                write!(f, "indicator(")?;
                l.write_at(f, 0)?;
                write!(f, " {} ", op.symbol())?;
                r.write_at(f, 0)?;
                write!(f, ")")
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_at(f, 0)
    }
}

fn apply_bin(op: BinOp, a: f64, b: f64) -> f64 {
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => {
            if b == 0.0 {
                f64::NAN
            } else {
                a / b
            }
        }
        BinOp::Pow => a.powf(b),
    }
}

fn apply_call(func: Func, vals: &[f64]) -> f64 {
    if vals.iter().any(|v| v.is_nan()) {
        return f64::NAN;
    }
    match func {
        Func::Exp => vals[0].exp(),
        Func::Ln => {
            if vals[0] > 0.0 {
                vals[0].ln()
            } else {
                f64::NEG_INFINITY
            }
        }
        Func::Min => vals.iter().copied().fold(f64::INFINITY, f64::min),
        Func::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

fn apply_cmp(op: CmpOp, a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else if op.test(a, b) {
        1.0
    } else {
        0.0
    }
}

/// Slot-indexed expression ready for repeated evaluation.
#[derive(Debug, Clone)]
pub enum Compiled {
    Const(f64),
    Slot(usize),
    Neg(Box<Compiled>),
    Bin(BinOp, Box<Compiled>, Box<Compiled>),
    Call(Func, Vec<Compiled>),
    Cmp(CmpOp, Box<Compiled>, Box<Compiled>),
}

impl Compiled {
    pub fn eval(&self, vals: &[f64]) -> f64 {
        match self {
            Compiled::Const(v) => *v,
            Compiled::Slot(i) => vals[*i],
            Compiled::Neg(e) => -e.eval(vals),
            Compiled::Bin(op, l, r) => apply_bin(*op, l.eval(vals), r.eval(vals)),
            Compiled::Call(func, args) => match args.len() {
                1 => apply_call(*func, &[args[0].eval(vals)]),
                2 => apply_call(*func, &[args[0].eval(vals), args[1].eval(vals)]),
                _ => {
                    let v: Vec<f64> = args.iter().map(|a| a.eval(vals)).collect();
                    apply_call(*func, &v)
                }
            },
            Compiled::Cmp(op, l, r) => apply_cmp(*op, l.eval(vals), r.eval(vals)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(e: &Expr) -> f64 {
        e.eval(&|_| None, &BTreeMap::new())
    }

    #[test]
    fn total_semantics() {
        assert_eq!(
            ev(&Expr::Call(Func::Ln, vec![Expr::num(0.0)])),
            f64::NEG_INFINITY
        );
        assert_eq!(
            ev(&Expr::Call(Func::Ln, vec![Expr::num(-2.0)])),
            f64::NEG_INFINITY
        );
        assert!(ev(&Expr::bin(BinOp::Div, Expr::num(1.0), Expr::num(0.0))).is_nan());
        assert_eq!(
            ev(&Expr::Indicator(
                CmpOp::Eq,
                Box::new(Expr::num(1.0)),
                Box::new(Expr::num(1.0))
            )),
            1.0
        );
    }

    #[test]
    fn printing_parenthesizes_by_precedence() {
        let e = Expr::bin(
            BinOp::Sub,
            Expr::var("a"),
            Expr::bin(BinOp::Sub, Expr::var("b"), Expr::var("c")),
        );
        assert_eq!(e.to_string(), "a - (b - c)");
        let p = Expr::bin(BinOp::Pow, Expr::num(-2.0), Expr::num(2.0));
        assert_eq!(p.to_string(), "(-2.0)^2.0");
        let n = Expr::neg(Expr::bin(BinOp::Pow, Expr::var("x"), Expr::num(2.0)));
        assert_eq!(n.to_string(), "-x^2.0");
    }
}
