use super::lexer::{lex, Tok, Token};
use super::{Diag, Span};
use crate::expr::{BinOp, CmpOp, Expr, Func};
use crate::graph::VariableKind;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ast {
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DomainSpec {
    Set(Vec<f64>),
    Interval {
        lo: f64,
        hi: f64,
        points: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arg {
    Num(f64),
    Name(String),
    List(Vec<Arg>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistSpec {
    pub family: String,
    pub args: Vec<(String, Arg, Span)>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarDecl {
    pub kind: VariableKind,
    pub name: String,
    pub domain: Option<DomainSpec>,
    pub observes: Option<Vec<String>>,
    pub dist: Option<DistSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSpec {
    Interval(Expr, Expr),
    Set(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ItemKind {
    Model(String),
    Param(String, f64),
    Var(VarDecl),
    Equation(String, Expr),
    Constraint(String, ConstraintSpec),
    Discount(String),
    EndState(Vec<(String, String)>),
    Horizon(usize),
    Bridge(Vec<String>),
    Use(String, Vec<String>),
    Variant(String, Vec<Item>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub kind: ItemKind,
    pub span: Span,
}

/// Parses a whole source file. Syntax errors are collected; the parser
/// resynchronizes at the next `;` and keeps going.
pub fn parse(src: &str) -> Result<Ast, Vec<Diag>> {
    let (toks, mut diags) = lex(src);
    let mut p = Parser {
        toks,
        pos: 0,
        diags: Vec::new(),
    };
    let items = p.items(false);
    diags.append(&mut p.diags);
    if diags.is_empty() {
        Ok(Ast { items })
    } else {
        diags.sort_by_key(|d| d.span.start);
        Err(diags)
    }
}

/// Parses a standalone expression.
pub fn parse_expr(src: &str) -> Result<Expr, Vec<Diag>> {
    let (toks, mut diags) = lex(src);
    let mut p = Parser {
        toks,
        pos: 0,
        diags: Vec::new(),
    };
    let e = p.expr();
    if e.is_ok() {
        if !matches!(p.peek(), Tok::Eof) {
            let sp = p.span();
            p.diags
                .push(Diag::new(sp, "unexpected input after expression"));
        }
    }
    diags.append(&mut p.diags);
    match e {
        Ok(e) if diags.is_empty() => Ok(e),
        Err(d) => {
            diags.push(d);
            Err(diags)
        }
        _ => Err(diags),
    }
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    diags: Vec<Diag>,
}

type PResult<T> = Result<T, Diag>;

fn kind_keyword(s: &str) -> Option<VariableKind> {
    match s {
        "state" => Some(VariableKind::State),
        "decision" => Some(VariableKind::Decision),
        "utility" => Some(VariableKind::Utility),
        "exogenous" => Some(VariableKind::Exogenous),
        _ => None,
    }
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        &self.toks[(self.pos + k).min(self.toks.len() - 1)].tok
    }

    fn span(&self) -> Span {
        self.toks[self.pos].span
    }

    fn prev_end(&self) -> usize {
        if self.pos == 0 {
            0
        } else {
            self.toks[self.pos - 1].span.end
        }
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Sym(x) if *x == s)
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(self.peek(), Tok::Ident(x) if x == w)
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.is_sym(s) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn describe(t: &Tok) -> String {
        match t {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Num(v) => format!("number {v}"),
            Tok::Str(s) => format!("string \"{s}\""),
            Tok::Sym(s) => format!("`{s}`"),
            Tok::Eof => "end of file".into(),
        }
    }

    fn expected(&self, what: &str) -> Diag {
        Diag::new(
            self.span(),
            format!("expected {what}, found {}", Self::describe(self.peek())),
        )
    }

    fn expect_sym(&mut self, s: &str) -> PResult<()> {
        if self.eat_sym(s) {
            Ok(())
        } else {
            Err(self.expected(&format!("`{s}`")))
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            _ => Err(self.expected("a name")),
        }
    }

    fn number(&mut self) -> PResult<f64> {
        let neg = self.eat_sym("-");
        match *self.peek() {
            Tok::Num(v) => {
                self.bump();
                Ok(if neg { -v } else { v })
            }
            _ => Err(self.expected("a number")),
        }
    }

    fn list<T>(
        &mut self,
        open: &str,
        close: &str,
        mut f: impl FnMut(&mut Self) -> PResult<T>,
    ) -> PResult<Vec<T>> {
        self.expect_sym(open)?;
        let mut out = Vec::new();
        if self.eat_sym(close) {
            return Ok(out);
        }
        loop {
            out.push(f(self)?);
            if self.eat_sym(close) {
                return Ok(out);
            }
            self.expect_sym(",")?;
        }
    }

    /// Skips to just past the next `;` at the current nesting level, or to
    /// a closing `}` that ends the enclosing block.
    fn recover(&mut self) {
        let mut depth = 0i32;
        loop {
            match self.peek() {
                Tok::Eof => return,
                Tok::Sym(";") if depth <= 0 => {
                    self.bump();
                    return;
                }
                Tok::Sym("{") | Tok::Sym("[") | Tok::Sym("(") => depth += 1,
                Tok::Sym("}") if depth <= 0 => return,
                Tok::Sym("}") | Tok::Sym("]") | Tok::Sym(")") => depth -= 1,
                _ => {}
            }
            self.bump();
        }
    }

    fn items(&mut self, nested: bool) -> Vec<Item> {
        let mut items = Vec::new();
        loop {
            match self.peek() {
                Tok::Eof => {
                    if nested {
                        let d = self.expected("`}`");
                        self.diags.push(d);
                    }
                    return items;
                }
                Tok::Sym("}") if nested => return items,
                _ => {}
            }
            let start = self.span();
            let before = self.pos;
            match self.item() {
                Ok(kind) => items.push(Item {
                    kind,
                    span: start.to(self.prev_end()),
                }),
                Err(d) => {
                    self.diags.push(d);
                    self.recover();
                    if self.pos == before {
                        self.bump();
                    }
                }
            }
        }
    }

    fn end(&mut self) -> PResult<()> {
        self.expect_sym(";")
    }

    fn item(&mut self) -> PResult<ItemKind> {
        let word = match self.peek().clone() {
            Tok::Ident(w) => w,
            _ => return Err(self.expected("a declaration")),
        };
        if matches!(self.peek_at(1), Tok::Sym("=")) && word != "param" {
            let target = self.ident()?;
            self.bump();
            let e = self.expr()?;
            self.end()?;
            return Ok(ItemKind::Equation(target, e));
        }
        if let Some(kind) = kind_keyword(&word) {
            self.bump();
            return self.var_decl(kind);
        }
        let kw_span = self.span();
        self.bump();
        let item = match word.as_str() {
            "model" => ItemKind::Model(self.ident()?),
            "param" => {
                let name = self.ident()?;
                self.expect_sym("=")?;
                ItemKind::Param(name, self.number()?)
            }
            "constraint" => {
                let target = self.ident()?;
                if !self.is_word("in") {
                    return Err(self.expected("`in`"));
                }
                self.bump();
                let spec = if self.is_sym("{") {
                    ConstraintSpec::Set(self.list("{", "}", |p| p.number())?)
                } else {
                    self.expect_sym("[")?;
                    let lo = self.expr()?;
                    self.expect_sym(",")?;
                    let hi = self.expr()?;
                    self.expect_sym("]")?;
                    ConstraintSpec::Interval(lo, hi)
                };
                ItemKind::Constraint(target, spec)
            }
            "discount" => ItemKind::Discount(self.ident()?),
            "endstate" => {
                let pairs = self.list("{", "}", |p| {
                    let root = p.ident()?;
                    p.expect_sym("->")?;
                    Ok((root, p.ident()?))
                })?;
                self.eat_sym(";");
                return Ok(ItemKind::EndState(pairs));
            }
            "horizon" => {
                let sp = self.span();
                let n = self.number()?;
                if n < 0.0 || n.fract() != 0.0 {
                    return Err(Diag::new(sp, "horizon must be a non-negative integer"));
                }
                ItemKind::Horizon(n as usize)
            }
            "bridge" => ItemKind::Bridge(self.list("{", "}", |p| p.ident())?),
            "use" => {
                let path = match self.peek().clone() {
                    Tok::Str(s) => {
                        self.bump();
                        s
                    }
                    _ => return Err(self.expected("a quoted file name")),
                };
                if !self.is_word("sharing") {
                    return Err(self.expected("`sharing`"));
                }
                self.bump();
                ItemKind::Use(path, self.list("{", "}", |p| p.ident())?)
            }
            "variant" => {
                let name = self.ident()?;
                self.expect_sym("{")?;
                let inner = self.items(true);
                self.expect_sym("}")?;
                return Ok(ItemKind::Variant(name, inner));
            }
            other => {
                return Err(Diag::new(
                    kw_span,
                    format!("unknown declaration keyword `{other}`"),
                ));
            }
        };
        self.end()?;
        Ok(item)
    }

    fn var_decl(&mut self, kind: VariableKind) -> PResult<ItemKind> {
        let name = self.ident()?;
        let mut decl = VarDecl {
            kind,
            name,
            domain: None,
            observes: None,
            dist: None,
        };
        loop {
            if self.is_word("in") {
                self.bump();
                decl.domain = Some(if self.is_sym("{") {
                    DomainSpec::Set(self.list("{", "}", |p| p.number())?)
                } else {
                    self.expect_sym("[")?;
                    let lo = self.number()?;
                    self.expect_sym(",")?;
                    let hi = self.number()?;
                    self.expect_sym("]")?;
                    let points = if self.is_word("grid") {
                        self.bump();
                        let sp = self.span();
                        let n = self.number()?;
                        if n < 1.0 || n.fract() != 0.0 {
                            return Err(Diag::new(sp, "grid size must be a positive integer"));
                        }
                        Some(n as usize)
                    } else {
                        None
                    };
                    DomainSpec::Interval { lo, hi, points }
                });
            } else if self.is_word("observes") {
                self.bump();
                decl.observes = Some(self.list("{", "}", |p| p.ident())?);
            } else if self.is_sym("~") {
                self.bump();
                let start = self.span();
                let family = self.ident()?;
                let args = self.list("(", ")", |p| {
                    let sp = p.span();
                    let key = p.ident()?;
                    p.expect_sym("=")?;
                    Ok((key, p.arg()?, sp))
                })?;
                decl.dist = Some(DistSpec {
                    family,
                    args,
                    span: start.to(self.prev_end()),
                });
            } else {
                break;
            }
        }
        self.end()?;
        Ok(ItemKind::Var(decl))
    }

    fn arg(&mut self) -> PResult<Arg> {
        if self.is_sym("[") {
            return Ok(Arg::List(self.list("[", "]", |p| p.arg())?));
        }
        if let Tok::Ident(n) = self.peek().clone() {
            self.bump();
            return Ok(Arg::Name(n));
        }
        Ok(Arg::Num(self.number()?))
    }

    pub fn expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.is_sym("+") {
                BinOp::Add
            } else if self.is_sym("-") {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            self.bump();
            lhs = Expr::bin(op, lhs, self.term()?);
        }
    }

    fn term(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.is_sym("*") {
                BinOp::Mul
            } else if self.is_sym("/") {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            self.bump();
            lhs = Expr::bin(op, lhs, self.unary()?);
        }
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.eat_sym("-") {
            return Ok(Expr::neg(self.unary()?));
        }
        let base = self.atom()?;
        if self.eat_sym("^") {
            return Ok(Expr::bin(BinOp::Pow, base, self.unary()?));
        }
        Ok(base)
    }

    fn atom(&mut self) -> PResult<Expr> {
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::Sym("(") => {
                self.bump();
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let sp = self.span();
                self.bump();
                if !self.is_sym("(") {
                    return Ok(Expr::Var(name));
                }
                if name == "indicator" {
                    self.bump();
                    let l = self.expr()?;
                    let op = match self.peek() {
                        Tok::Sym("<") => CmpOp::Lt,
                        Tok::Sym("<=") => CmpOp::Le,
                        Tok::Sym(">") => CmpOp::Gt,
                        Tok::Sym(">=") => CmpOp::Ge,
                        Tok::Sym("==") => CmpOp::Eq,
                        Tok::Sym("!=") => CmpOp::Ne,
                        _ => return Err(self.expected("a comparison")),
                    };
                    self.bump();
                    let r = self.expr()?;
                    self.expect_sym(")")?;
                    return Ok(Expr::Indicator(op, Box::new(l), Box::new(r)));
                }
                let func = Func::from_name(&name)
                    .ok_or_else(|| Diag::new(sp, format!("unknown function `{name}`")))?;
                let args = self.list("(", ")", |p| p.expr())?;
                let (lo, hi) = func.arity();
                if args.len() < lo || args.len() > hi {
                    return Err(Diag::new(
                        sp.to(self.prev_end()),
                        format!(
                            "`{name}` takes {} argument(s), got {}",
                            if lo == hi {
                                lo.to_string()
                            } else {
                                format!("at least {lo}")
                            },
                            args.len()
                        ),
                    ));
                }
                Ok(Expr::Call(func, args))
            }
            _ => Err(self.expected("an expression")),
        }
    }
}
