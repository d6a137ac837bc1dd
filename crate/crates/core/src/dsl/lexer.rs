use super::{Diag, Span};

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Num(f64),
    Str(String),
    Sym(&'static str),
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub span: Span,
}

const SYMBOLS: [&str; 20] = [
    "->", "<=", ">=", "==", "!=", ";", ",", "{", "}", "[", "]", "(", ")", "=", "~", "+", "-", "*",
    "/", "^",
];
const SINGLE: [&str; 2] = ["<", ">"];

/// Splits source text into tokens. Bad characters produce diagnostics and
/// are skipped.
pub fn lex(src: &str) -> (Vec<Token>, Vec<Diag>) {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut diags = Vec::new();
    let mut i = 0;
    let mut line = 1;
    let mut col = 1;
    let span_at = |start: usize, end: usize, line: usize, col: usize| Span {
        start,
        end,
        line,
        col,
    };
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let (sl, sc) = (line, col);
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            while i < bytes.len() && bytes[i] == b'\'' {
                i += 1;
            }
            col += i - start;
            toks.push(Token {
                tok: Tok::Ident(src[start..i].to_string()),
                span: span_at(start, i, sl, sc),
            });
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit()))
        {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            col += i - start;
            let text = &src[start..i];
            let span = span_at(start, i, sl, sc);
            match text.parse::<f64>() {
                Ok(v) => toks.push(Token {
                    tok: Tok::Num(v),
                    span,
                }),
                Err(_) => diags.push(Diag::new(span, format!("malformed number `{text}`"))),
            }
            continue;
        }
        if c == '"' {
            i += 1;
            while i < bytes.len() && bytes[i] != b'"' && bytes[i] != b'\n' {
                i += 1;
            }
            let closed = i < bytes.len() && bytes[i] == b'"';
            let end = if closed { i + 1 } else { i };
            let span = span_at(start, end, sl, sc);
            if closed {
                toks.push(Token {
                    tok: Tok::Str(src[start + 1..i].to_string()),
                    span,
                });
            } else {
                diags.push(Diag::new(span, "unterminated string"));
            }
            col += end - start;
            i = end;
            continue;
        }
        let rest = &src[i..];
        if let Some(sym) = SYMBOLS
            .iter()
            .chain(SINGLE.iter())
            .find(|s| rest.starts_with(**s))
        {
            i += sym.len();
            col += sym.len();
            toks.push(Token {
                tok: Tok::Sym(sym),
                span: span_at(start, i, sl, sc),
            });
            continue;
        }
        let ch = rest.chars().next().expect("non-empty");
        i += ch.len_utf8();
        col += 1;
        diags.push(Diag::new(
            span_at(start, i, sl, sc),
            format!("unexpected character `{ch}`"),
        ));
    }
    toks.push(Token {
        tok: Tok::Eof,
        span: span_at(src.len(), src.len(), line, col),
    });
    (toks, diags)
}
