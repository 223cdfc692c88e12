//! Arithmetic expression language for model coefficients.
//!
//! Coefficients in a model file are written as expressions over a declared
//! variable set (`t`, `x1..xd`, `e1..ed`, `y`, `z1..zd`). Parsing resolves
//! every identifier against that set, so unknown names fail at parse time
//! rather than deep inside a solve.

use std::fmt;
use thiserror::Error;

/// Binary operators, in source form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

/// Built-in functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Sqrt,
    Abs,
    Sin,
    Cos,
    Min,
    Max,
    Pow,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "min" => Func::Min,
            "max" => Func::Max,
            "pow" => Func::Pow,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Min => "min",
            Func::Max => "max",
            Func::Pow => "pow",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max | Func::Pow => 2,
            _ => 1,
        }
    }
}

type Span = (usize, usize);

#[derive(Debug, Clone)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>, Span),
    Call(Func, Vec<Node>, Span),
}

/// A parsed expression bound to a fixed variable table.
#[derive(Debug, Clone)]
pub struct Expr {
    source: String,
    vars: Vec<String>,
    root: Node,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: found {found}, expected {expected}")]
    Syntax {
        offset: usize,
        found: String,
        expected: String,
    },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdent { offset: usize, name: String },
    #[error("function `{func}` takes {expected} argument(s), got {got} (byte {offset})")]
    Arity {
        offset: usize,
        func: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("evaluation error: {message} in `{snippet}`")]
pub struct EvalError {
    pub message: String,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

struct Lexer<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Lexer {
            text,
            bytes: text.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Returns the next token and its starting byte offset.
    fn next(&mut self) -> Result<(Tok, usize), ExprError> {
        self.skip_ws();
        let start = self.pos;
        if self.pos >= self.bytes.len() {
            return Ok((Tok::End, start));
        }
        let c = self.bytes[self.pos];
        match c {
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                self.pos += 1;
                Ok((Tok::Op(c as char), start))
            }
            b'(' => {
                self.pos += 1;
                Ok((Tok::LParen, start))
            }
            b')' => {
                self.pos += 1;
                Ok((Tok::RParen, start))
            }
            b',' => {
                self.pos += 1;
                Ok((Tok::Comma, start))
            }
            b'0'..=b'9' | b'.' => {
                let mut end = self.pos;
                while end < self.bytes.len() && (self.bytes[end].is_ascii_digit() || self.bytes[end] == b'.') {
                    end += 1;
                }
                // optional exponent part
                if end < self.bytes.len() && (self.bytes[end] == b'e' || self.bytes[end] == b'E') {
                    let mut e = end + 1;
                    if e < self.bytes.len() && (self.bytes[e] == b'+' || self.bytes[e] == b'-') {
                        e += 1;
                    }
                    if e < self.bytes.len() && self.bytes[e].is_ascii_digit() {
                        end = e;
                        while end < self.bytes.len() && self.bytes[end].is_ascii_digit() {
                            end += 1;
                        }
                    }
                }
                let s = &self.text[start..end];
                let v: f64 = s.parse().map_err(|_| ExprError::Syntax {
                    offset: start,
                    found: format!("`{s}`"),
                    expected: "a number".into(),
                })?;
                self.pos = end;
                Ok((Tok::Num(v), start))
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let mut end = self.pos;
                while end < self.bytes.len()
                    && (self.bytes[end].is_ascii_alphanumeric() || self.bytes[end] == b'_')
                {
                    end += 1;
                }
                let s = self.text[start..end].to_string();
                self.pos = end;
                Ok((Tok::Ident(s), start))
            }
            _ => Err(ExprError::Syntax {
                offset: start,
                found: format!("`{}`", c as char),
                expected: "a number, identifier, operator or parenthesis".into(),
            }),
        }
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    tok: Tok,
    tok_at: usize,
    vars: &'a [&'a str],
}

impl<'a> Parser<'a> {
    fn new(text: &'a str, vars: &'a [&'a str]) -> Result<Self, ExprError> {
        let mut lexer = Lexer::new(text);
        let (tok, tok_at) = lexer.next()?;
        Ok(Parser {
            lexer,
            tok,
            tok_at,
            vars,
        })
    }

    fn bump(&mut self) -> Result<(), ExprError> {
        let (tok, at) = self.lexer.next()?;
        self.tok = tok;
        self.tok_at = at;
        Ok(())
    }

    fn found(&self) -> String {
        match &self.tok {
            Tok::Num(v) => format!("number `{v}`"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Op(c) => format!("`{c}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::End => "end of input".into(),
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let start = self.tok_at;
        let mut lhs = self.term()?;
        loop {
            let op = match self.tok {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => break,
            };
            self.bump()?;
            let rhs = self.term()?;
            let end = self.tok_at;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs), (start, end));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let start = self.tok_at;
        let mut lhs = self.unary()?;
        loop {
            let op = match self.tok {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => break,
            };
            self.bump()?;
            let rhs = self.unary()?;
            let end = self.tok_at;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs), (start, end));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        match self.tok {
            Tok::Op('-') => {
                self.bump()?;
                let inner = self.unary()?;
                Ok(Node::Neg(Box::new(inner)))
            }
            Tok::Op('+') => {
                self.bump()?;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let start = self.tok_at;
        let base = self.atom()?;
        if let Tok::Op('^') = self.tok {
            self.bump()?;
            // right-associative; the exponent may carry a unary minus
            let exponent = self.unary()?;
            let end = self.tok_at;
            return Ok(Node::Bin(
                BinOp::Pow,
                Box::new(base),
                Box::new(exponent),
                (start, end),
            ));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let at = self.tok_at;
        match self.tok.clone() {
            Tok::Num(v) => {
                self.bump()?;
                Ok(Node::Num(v))
            }
            Tok::Ident(name) => {
                self.bump()?;
                if let Tok::LParen = self.tok {
                    let func = Func::from_name(&name).ok_or_else(|| ExprError::UnknownIdent {
                        offset: at,
                        name: name.clone(),
                    })?;
                    self.bump()?;
                    let mut args = vec![self.expr()?];
                    while let Tok::Comma = self.tok {
                        self.bump()?;
                        args.push(self.expr()?);
                    }
                    match self.tok {
                        Tok::RParen => self.bump()?,
                        _ => {
                            return Err(ExprError::Syntax {
                                offset: self.tok_at,
                                found: self.found(),
                                expected: "`)` or `,`".into(),
                            })
                        }
                    }
                    if args.len() != func.arity() {
                        return Err(ExprError::Arity {
                            offset: at,
                            func: name,
                            expected: func.arity(),
                            got: args.len(),
                        });
                    }
                    let end = self.tok_at;
                    Ok(Node::Call(func, args, (at, end)))
                } else if let Some(idx) = self.vars.iter().position(|v| *v == name) {
                    Ok(Node::Var(idx))
                } else if Func::from_name(&name).is_some() {
                    Err(ExprError::Syntax {
                        offset: self.tok_at,
                        found: self.found(),
                        expected: "`(` after function name".into(),
                    })
                } else {
                    Err(ExprError::UnknownIdent { offset: at, name })
                }
            }
            Tok::LParen => {
                self.bump()?;
                let inner = self.expr()?;
                match self.tok {
                    Tok::RParen => self.bump()?,
                    _ => {
                        return Err(ExprError::Syntax {
                            offset: self.tok_at,
                            found: self.found(),
                            expected: "`)`".into(),
                        })
                    }
                }
                Ok(inner)
            }
            _ => Err(ExprError::Syntax {
                offset: at,
                found: self.found(),
                expected: "a number, variable, function call or `(`".into(),
            }),
        }
    }
}

/// Parses `text` against the given variable names.
///
/// Operator precedence: `^` binds tightest (right-associative), then unary
/// minus, then `*` `/`, then `+` `-` (left-associative).
pub fn parse_expr(text: &str, vars: &[&str]) -> Result<Expr, ExprError> {
    if text.trim().is_empty() {
        return Err(ExprError::Syntax {
            offset: 0,
            found: "end of input".into(),
            expected: "an expression".into(),
        });
    }
    let mut parser = Parser::new(text, vars)?;
    let root = parser.expr()?;
    match parser.tok {
        Tok::End => Ok(Expr {
            source: text.to_string(),
            vars: vars.iter().map(|s| s.to_string()).collect(),
            root,
        }),
        _ => Err(ExprError::Syntax {
            offset: parser.tok_at,
            found: parser.found(),
            expected: "an operator or end of input".into(),
        }),
    }
}

impl Expr {
    /// Evaluates against `env`, indexed like the variable table used at parse time.
    pub fn eval(&self, env: &[f64]) -> Result<f64, EvalError> {
        debug_assert!(env.len() >= self.vars.len());
        self.eval_node(&self.root, env)
    }

    pub fn variables(&self) -> &[String] {
        &self.vars
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    fn snippet(&self, span: Span) -> String {
        let (a, b) = span;
        let b = b.min(self.source.len());
        if a >= b {
            self.source.clone()
        } else {
            self.source[a..b].trim().to_string()
        }
    }

    fn fail(&self, message: &str, span: Span) -> EvalError {
        EvalError {
            message: message.to_string(),
            snippet: self.snippet(span),
        }
    }

    fn eval_node(&self, node: &Node, env: &[f64]) -> Result<f64, EvalError> {
        match node {
            Node::Num(v) => Ok(*v),
            Node::Var(i) => Ok(env[*i]),
            Node::Neg(inner) => Ok(-self.eval_node(inner, env)?),
            Node::Bin(op, lhs, rhs, span) => {
                let a = self.eval_node(lhs, env)?;
                let b = self.eval_node(rhs, env)?;
                let v = match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(self.fail("division by zero", *span));
                        }
                        a / b
                    }
                    BinOp::Pow => a.powf(b),
                };
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(self.fail("non-finite result", *span))
                }
            }
            Node::Call(func, args, span) => {
                let a = self.eval_node(&args[0], env)?;
                let v = match func {
                    Func::Exp => a.exp(),
                    Func::Log => {
                        if a <= 0.0 {
                            return Err(self.fail("log of a non-positive value", *span));
                        }
                        a.ln()
                    }
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(self.fail("sqrt of a negative value", *span));
                        }
                        a.sqrt()
                    }
                    Func::Abs => a.abs(),
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Min => a.min(self.eval_node(&args[1], env)?),
                    Func::Max => a.max(self.eval_node(&args[1], env)?),
                    Func::Pow => a.powf(self.eval_node(&args[1], env)?),
                };
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(self.fail("non-finite result", *span))
                }
            }
        }
    }

    fn fmt_node(&self, node: &Node, out: &mut String) {
        match node {
            Node::Num(v) => {
                if *v < 0.0 {
                    out.push_str(&format!("({v})"));
                } else {
                    out.push_str(&format!("{v}"));
                }
            }
            Node::Var(i) => out.push_str(&self.vars[*i]),
            Node::Neg(inner) => {
                out.push_str("(-");
                self.fmt_node(inner, out);
                out.push(')');
            }
            Node::Bin(op, lhs, rhs, _) => {
                out.push('(');
                self.fmt_node(lhs, out);
                out.push_str(&format!(" {} ", op.symbol()));
                self.fmt_node(rhs, out);
                out.push(')');
            }
            Node::Call(func, args, _) => {
                out.push_str(func.name());
                out.push('(');
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    self.fmt_node(a, out);
                }
                out.push(')');
            }
        }
    }
}

impl fmt::Display for Expr {
    /// Emits a fully parenthesized form that re-parses to an equivalent tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        self.fmt_node(&self.root, &mut out);
        write!(f, "{out}")
    }
}
