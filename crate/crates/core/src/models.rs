//! Built-in test models, their block structures and reference indices, and
//! a small arithmetic expression language for user-defined models.

use crate::depmodel::{CopulaSpec, DmFamily};
use crate::error::{Error, Result};
use crate::margins::MarginSpec;
use crate::representations::{BlockStructure, DependentBlock};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// A deterministic map `R^d -> R^N`.
pub trait Model: Send + Sync + fmt::Debug {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Writes `N` outputs; an `Err` carries a human-readable reason.
    fn evaluate(&self, x: &[f64], out: &mut [f64]) -> std::result::Result<(), String>;
}

// ---------------------------------------------------------------------------
// Expression language

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
    Abs,
    Exp,
    Sqrt,
    Log,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Log => "log",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "abs" => Func::Abs,
            "exp" => Func::Exp,
            "sqrt" => Func::Sqrt,
            "log" => Func::Log,
            _ => return None,
        })
    }
}

/// Expression tree. Variables are 1-based (`x1` is `Var(1)`).
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    /// Largest variable index referenced (0 when none).
    pub fn max_variable(&self) -> usize {
        match self {
            Expr::Num(_) => 0,
            Expr::Var(i) => *i,
            Expr::Neg(e) | Expr::Call(_, e) => e.max_variable(),
            Expr::Bin(_, a, b) => a.max_variable().max(b.max_variable()),
        }
    }

    pub fn eval(&self, x: &[f64]) -> std::result::Result<f64, String> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(i) => x[*i - 1],
            Expr::Neg(e) => -e.eval(x)?,
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(x)?, b.eval(x)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err("division by zero".into());
                        }
                        a / b
                    }
                    BinOp::Pow => a.powf(b),
                }
            }
            Expr::Call(f, e) => {
                let v = e.eval(x)?;
                match f {
                    Func::Abs => v.abs(),
                    Func::Exp => v.exp(),
                    Func::Sqrt => {
                        if v < 0.0 {
                            return Err(format!("sqrt of negative value {v}"));
                        }
                        v.sqrt()
                    }
                    Func::Log => {
                        if v <= 0.0 {
                            return Err(format!("log of nonpositive value {v}"));
                        }
                        v.ln()
                    }
                }
            }
        })
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Bin(BinOp::Pow, ..) => 4,
            Expr::Num(v) if *v < 0.0 => 3,
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
            Expr::Var(i) => write!(f, "x{i}"),
            Expr::Neg(e) => {
                write!(f, "-")?;
                e.write_at(f, 3)
            }
            Expr::Bin(op, a, b) => {
                let (sym, lmin, rmin) = match op {
                    BinOp::Add => (" + ", 1, 2),
                    BinOp::Sub => (" - ", 1, 2),
                    BinOp::Mul => ("*", 2, 3),
                    BinOp::Div => ("/", 2, 3),
                    BinOp::Pow => ("^", 5, 3),
                };
                a.write_at(f, lmin)?;
                write!(f, "{sym}")?;
                b.write_at(f, rmin)
            }
            Expr::Call(func, e) => {
                write!(f, "{}(", func.name())?;
                e.write_at(f, 0)?;
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

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let start = (i, col);
        if c.is_ascii_digit() || c == '.' {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start.0..i].iter().collect();
            let v = text.parse::<f64>().map_err(|_| Error::Parse {
                line,
                column: start.1,
                message: format!("malformed number '{text}'"),
            })?;
            col += i - start.0;
            out.push(Token {
                tok: Tok::Num(v),
                line,
                column: start.1,
            });
        } else if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start.0;
            out.push(Token {
                tok: Tok::Ident(chars[start.0..i].iter().collect()),
                line,
                column: start.1,
            });
        } else if "+-*/^(),".contains(c) {
            i += 1;
            col += 1;
            out.push(Token {
                tok: Tok::Op(c),
                line,
                column: start.1,
            });
        } else {
            return Err(Error::Parse {
                line,
                column: col,
                message: format!("unexpected character '{c}'"),
            });
        }
    }
    out.push(Token {
        tok: Tok::End,
        line,
        column: col,
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        let t = self.peek();
        Err(Error::Parse {
            line: t.line,
            column: t.column,
            message: message.into(),
        })
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek().tok == Tok::Op(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat('+') {
                BinOp::Add
            } else if self.eat('-') {
                BinOp::Sub
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                BinOp::Mul
            } else if self.eat('/') {
                BinOp::Div
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        if self.eat('^') {
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Num(v) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Tok::Op('(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return self.err("expected ')'");
                }
                Ok(e)
            }
            Tok::Ident(name) => {
                if let Some(f) = Func::from_name(&name) {
                    self.pos += 1;
                    if !self.eat('(') {
                        return self.err(format!("expected '(' after {name}"));
                    }
                    let arg = self.expr()?;
                    if self.peek().tok == Tok::Op(',') {
                        return self.err(format!("{name} takes exactly one argument"));
                    }
                    if !self.eat(')') {
                        return self.err("expected ')'");
                    }
                    return Ok(Expr::Call(f, Box::new(arg)));
                }
                let index = name
                    .strip_prefix('x')
                    .filter(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && !s.starts_with('0'))
                    .and_then(|s| s.parse::<usize>().ok());
                match index {
                    Some(i) => {
                        self.pos += 1;
                        Ok(Expr::Var(i))
                    }
                    None => self.err(format!("unknown identifier '{name}'")),
                }
            }
            Tok::End => self.err("unexpected end of input"),
            Tok::Op(c) => self.err(format!("unexpected '{c}'")),
        }
    }
}

/// Parses one expression; errors carry 1-based line and column.
pub fn parse_expression(src: &str) -> Result<Expr> {
    let mut p = Parser { toks: lex(src)?, pos: 0 };
    let e = p.expr()?;
    if p.peek().tok != Tok::End {
        return p.err("unexpected trailing input");
    }
    Ok(e)
}

/// A model given by one expression per output.
#[derive(Debug, Clone)]
pub struct ExpressionModel {
    d: usize,
    outputs: Vec<Expr>,
    sources: Vec<String>,
}

impl ExpressionModel {
    pub fn new(d: usize, sources: &[String]) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Config("expression model needs at least one output".into()));
        }
        let mut outputs = Vec::new();
        for (k, s) in sources.iter().enumerate() {
            let e = parse_expression(s).map_err(|e| match e {
                Error::Parse { line, column, message } => Error::Parse {
                    line,
                    column,
                    message: format!("output {}: {message}", k + 1),
                },
                other => other,
            })?;
            if e.max_variable() > d {
                return Err(Error::Config(format!(
                    "output {} references x{} but the model has {d} inputs",
                    k + 1,
                    e.max_variable()
                )));
            }
            outputs.push(e);
        }
        Ok(ExpressionModel {
            d,
            outputs,
            sources: sources.to_vec(),
        })
    }

    pub fn expressions(&self) -> &[Expr] {
        &self.outputs
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }
}

fn check_finite(out: &[f64]) -> std::result::Result<(), String> {
    match out.iter().position(|v| !v.is_finite()) {
        Some(k) => Err(format!("output {} is not finite ({})", k + 1, out[k])),
        None => Ok(()),
    }
}

impl Model for ExpressionModel {
    fn input_dim(&self) -> usize {
        self.d
    }

    fn output_dim(&self) -> usize {
        self.outputs.len()
    }

    fn evaluate(&self, x: &[f64], out: &mut [f64]) -> std::result::Result<(), String> {
        for (k, e) in self.outputs.iter().enumerate() {
            out[k] = e.eval(x).map_err(|m| format!("output {}: {m}", k + 1))?;
        }
        check_finite(out)
    }
}

// ---------------------------------------------------------------------------
// Built-in models

/// `x1 + x2 + x3`.
#[derive(Debug, Clone, Copy)]
pub struct LinearSum;

impl Model for LinearSum {
    fn input_dim(&self) -> usize {
        3
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn evaluate(&self, x: &[f64], out: &mut [f64]) -> std::result::Result<(), String> {
        out[0] = x[0] + x[1] + x[2];
        check_finite(out)
    }
}

/// `x1 x2 + x3 x4`.
#[derive(Debug, Clone, Copy)]
pub struct Portfolio;

impl Model for Portfolio {
    fn input_dim(&self) -> usize {
        4
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn evaluate(&self, x: &[f64], out: &mut [f64]) -> std::result::Result<(), String> {
        out[0] = x[0] * x[1] + x[2] * x[3];
        check_finite(out)
    }
}

/// Row `i` of the output is `Π_j (|4 x_j - 2| + a_ij) / (1 + a_ij)`.
#[derive(Debug, Clone)]
pub struct GSobol {
    a: Vec<Vec<f64>>,
}

impl GSobol {
    pub fn new(a: Vec<Vec<f64>>) -> Result<Self> {
        let d = a.first().map_or(0, |r| r.len());
        if a.is_empty() || d == 0 || a.iter().any(|r| r.len() != d) {
            return Err(Error::Parameter("g-function coefficient matrix must be a nonempty rectangle".into()));
        }
        if a.iter().flatten().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Parameter("g-function coefficients must be finite and nonnegative".into()));
        }
        Ok(GSobol { a })
    }

    /// The 4 × 10 matrix with rows 10, 20, 50, 60.
    pub fn reference() -> Self {
        GSobol {
            a: [10.0, 20.0, 50.0, 60.0].iter().map(|&v| vec![v; 10]).collect(),
        }
    }

    pub fn coefficients(&self) -> &[Vec<f64>] {
        &self.a
    }
}

impl Model for GSobol {
    fn input_dim(&self) -> usize {
        self.a[0].len()
    }

    fn output_dim(&self) -> usize {
        self.a.len()
    }

    fn evaluate(&self, x: &[f64], out: &mut [f64]) -> std::result::Result<(), String> {
        for (o, row) in out.iter_mut().zip(&self.a) {
            *o = row
                .iter()
                .zip(x)
                .map(|(&a, &xj)| ((4.0 * xj - 2.0).abs() + a) / (1.0 + a))
                .product();
        }
        check_finite(out)
    }
}

/// A model plus the parameters describing its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `x1 + x2 + x3` with jointly Gaussian inputs.
    LinearGaussian {
        sigma: [f64; 3],
        rho12: f64,
        rho13: f64,
        rho23: f64,
    },
    /// `x1 x2 + x3 x4`; `(x1, x2)` Gaussian, `(x3, x4)` Student with `nu`.
    Portfolio {
        sigma: [f64; 4],
        rho12: f64,
        rho34: f64,
        nu: f64,
    },
    /// Multivariate g-function; `a` defaults to the 4 × 10 reference matrix.
    #[serde(rename = "gsobol")]
    GSobol {
        #[serde(default)]
        a: Option<Vec<Vec<f64>>>,
    },
    Expression {
        inputs: usize,
        outputs: Vec<String>,
    },
}

impl ModelSpec {
    pub fn linear_reference() -> Self {
        ModelSpec::LinearGaussian {
            sigma: [1.0; 3],
            rho12: 0.5,
            rho13: 0.2,
            rho23: 0.3,
        }
    }

    pub fn portfolio_reference() -> Self {
        ModelSpec::Portfolio {
            sigma: [1.0; 4],
            rho12: 0.5,
            rho34: 0.3,
            nu: 5.0,
        }
    }

    pub fn gsobol_reference() -> Self {
        ModelSpec::GSobol { a: None }
    }

    pub fn validate(&self) -> Result<()> {
        let rho_ok = |r: f64| r.is_finite() && r.abs() < 1.0;
        let sig_ok = |s: &[f64]| s.iter().all(|v| v.is_finite() && *v > 0.0);
        match self {
            ModelSpec::LinearGaussian {
                sigma,
                rho12,
                rho13,
                rho23,
            } => {
                if !sig_ok(sigma) || ![*rho12, *rho13, *rho23].iter().all(|&r| rho_ok(r)) {
                    return Err(Error::Parameter("linear model needs sigma > 0 and |rho| < 1".into()));
                }
            }
            ModelSpec::Portfolio { sigma, rho12, rho34, nu } => {
                if !sig_ok(sigma) || !rho_ok(*rho12) || !rho_ok(*rho34) {
                    return Err(Error::Parameter("portfolio model needs sigma > 0 and |rho| < 1".into()));
                }
                if !(nu.is_finite() && *nu > 4.0) {
                    return Err(Error::Parameter(format!(
                        "portfolio model needs nu > 4 for finite fourth moments, got {nu}"
                    )));
                }
            }
            ModelSpec::GSobol { a } => {
                if let Some(a) = a {
                    GSobol::new(a.clone())?;
                }
            }
            ModelSpec::Expression { inputs, outputs } => {
                ExpressionModel::new(*inputs, outputs)?;
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelSpec::LinearGaussian { .. } => 3,
            ModelSpec::Portfolio { .. } => 4,
            ModelSpec::GSobol { a } => a.as_ref().and_then(|a| a.first()).map_or(10, |r| r.len()),
            ModelSpec::Expression { inputs, .. } => *inputs,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Model>> {
        self.validate()?;
        Ok(match self {
            ModelSpec::LinearGaussian { .. } => Arc::new(LinearSum),
            ModelSpec::Portfolio { .. } => Arc::new(Portfolio),
            ModelSpec::GSobol { a: None } => Arc::new(GSobol::reference()),
            ModelSpec::GSobol { a: Some(a) } => Arc::new(GSobol::new(a.clone())?),
            ModelSpec::Expression { inputs, outputs } => Arc::new(ExpressionModel::new(*inputs, outputs)?),
        })
    }

    /// The input structure that goes with the model; `None` for expression
    /// models, whose inputs come from the configuration.
    pub fn default_structure(&self) -> Result<Option<BlockStructure>> {
        self.validate()?;
        Ok(Some(match self {
            ModelSpec::LinearGaussian {
                sigma,
                rho12,
                rho13,
                rho23,
            } => {
                let copula = CopulaSpec::gaussian(vec![
                    vec![1.0, *rho12, *rho13],
                    vec![*rho12, 1.0, *rho23],
                    vec![*rho13, *rho23, 1.0],
                ])?;
                let margins = sigma.iter().map(|&s| MarginSpec::Normal { mu: 0.0, sigma: s }).collect();
                BlockStructure::new(
                    vec![],
                    vec![DependentBlock {
                        indices: vec![1, 2, 3],
                        family: DmFamily::Copula { copula, margins },
                    }],
                )?
            }
            ModelSpec::Portfolio { sigma, rho12, rho34, nu } => {
                let g = CopulaSpec::gaussian(vec![vec![1.0, *rho12], vec![*rho12, 1.0]])?;
                let t = CopulaSpec::student(*nu, vec![vec![1.0, *rho34], vec![*rho34, 1.0]])?;
                BlockStructure::new(
                    vec![],
                    vec![
                        DependentBlock {
                            indices: vec![1, 2],
                            family: DmFamily::Copula {
                                copula: g,
                                margins: sigma[..2].iter().map(|&s| MarginSpec::Normal { mu: 0.0, sigma: s }).collect(),
                            },
                        },
                        DependentBlock {
                            indices: vec![3, 4],
                            family: DmFamily::Copula {
                                copula: t,
                                margins: sigma[2..]
                                    .iter()
                                    .map(|&s| MarginSpec::StudentT {
                                        nu: *nu,
                                        location: 0.0,
                                        scale: s,
                                    })
                                    .collect(),
                            },
                        },
                    ],
                )?
            }
            ModelSpec::GSobol { .. } => {
                let d = self.input_dim();
                if d == 10 {
                    gsobol_structure()?
                } else {
                    BlockStructure::new((1..=d).map(|i| (i, MarginSpec::standard_uniform())).collect(), vec![])?
                }
            }
            ModelSpec::Expression { .. } => return Ok(None),
        }))
    }
}

/// Ten uniform inputs: `x4..x8` independent, `(x1, x2, x3)` under a
/// Gaussian copula with `ρ12 = 0, ρ13 = 0.01, ρ23 = 0.85`, and `(x9, x10)`
/// uniform on the simplex.
pub fn gsobol_structure() -> Result<BlockStructure> {
    let copula = CopulaSpec::gaussian(vec![vec![1.0, 0.0, 0.01], vec![0.0, 1.0, 0.85], vec![0.01, 0.85, 1.0]])?;
    BlockStructure::new(
        (4..=8).map(|i| (i, MarginSpec::standard_uniform())).collect(),
        vec![
            DependentBlock {
                indices: vec![1, 2, 3],
                family: DmFamily::Copula {
                    copula,
                    margins: vec![MarginSpec::standard_uniform(); 3],
                },
            },
            DependentBlock {
                indices: vec![9, 10],
                family: DmFamily::Simplex,
            },
        ],
    )
}

// ---------------------------------------------------------------------------
// Reference indices

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticIndex {
    pub subset: Vec<usize>,
    pub first: f64,
    pub total: f64,
}

/// Closed-form indices of a built-in scalar model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticReport {
    /// Output variance used as denominator by `exact`.
    pub variance: f64,
    /// Compact closed forms, evaluated literally term by term.
    pub compact: Vec<AnalyticIndex>,
    /// Variances of conditional expectations computed from first principles.
    pub exact: Vec<AnalyticIndex>,
}

impl AnalyticReport {
    pub fn compact_for(&self, subset: &[usize]) -> Option<&AnalyticIndex> {
        find_index(&self.compact, subset)
    }

    pub fn exact_for(&self, subset: &[usize]) -> Option<&AnalyticIndex> {
        find_index(&self.exact, subset)
    }
}

fn find_index<'a>(list: &'a [AnalyticIndex], subset: &[usize]) -> Option<&'a AnalyticIndex> {
    let mut key = subset.to_vec();
    key.sort_unstable();
    list.iter().find(|a| a.subset == key)
}

fn all_subsets(d: usize) -> Vec<Vec<usize>> {
    (1u32..1 << d)
        .map(|m| (0..d).filter(|k| m >> k & 1 == 1).map(|k| k + 1).collect())
        .collect()
}

fn idx(subset: &[usize], first: f64, total: f64) -> AnalyticIndex {
    AnalyticIndex {
        subset: subset.to_vec(),
        first,
        total,
    }
}

/// Reference indices for the linear and portfolio models; `None` when no
/// closed form is available.
pub fn analytic_indices(spec: &ModelSpec) -> Result<Option<AnalyticReport>> {
    spec.validate()?;
    match spec {
        ModelSpec::LinearGaussian {
            sigma,
            rho12,
            rho13,
            rho23,
        } => Ok(Some(linear_indices(*sigma, *rho12, *rho13, *rho23))),
        ModelSpec::Portfolio { sigma, rho12, rho34, nu } => Ok(Some(portfolio_indices(*sigma, *rho12, *rho34, *nu))),
        _ => Ok(None),
    }
}

fn linear_indices(s: [f64; 3], r12: f64, r13: f64, r23: f64) -> AnalyticReport {
    let [s1, s2, s3] = s;
    let v = s1 * s1 + s2 * s2 + s3 * s3 + 2.0 * r12 * s1 * s2 + 2.0 * r13 * s1 * s3 + 2.0 * r23 * s2 * s3;
    let single = |a: f64| a * a / v;
    let pair = |r: f64, lead: f64, other: f64| ((1.0 - r * r) * lead * lead + other * other) / ((1.0 - r * r) * v);
    let a1 = s1 + r12 * s2 + r13 * s3;
    let a2 = s2 + r12 * s1 + r23 * s3;
    let a3 = s3 + r13 * s1 + r23 * s2;
    let p12 = pair(r12, a1, s2 * (1.0 - r12 * r12) + s3 * (r23 - r12 * r13));
    let p23 = pair(r23, a2, s3 * (1.0 - r23 * r23) + s1 * (r13 - r12 * r23));
    let p13 = pair(r13, a3, s1 * (1.0 - r13 * r13) + s2 * (r12 - r13 * r23));
    let compact = vec![
        idx(&[1], single(a1), single(a1)),
        idx(&[2], single(a2), single(a2)),
        idx(&[3], single(a3), single(a3)),
        idx(&[1, 2], p12, p12),
        idx(&[2, 3], p23, p23),
        idx(&[1, 3], p13, p13),
    ];

    // Var E[1'X | X_u] = b' Σ_uu^{-1} b with b = Σ_{u,·} 1; the sum is
    // linear, so the total index of u equals its first-order index.
    let cov = [
        [s1 * s1, r12 * s1 * s2, r13 * s1 * s3],
        [r12 * s1 * s2, s2 * s2, r23 * s2 * s3],
        [r13 * s1 * s3, r23 * s2 * s3, s3 * s3],
    ];
    let exact = all_subsets(3)
        .into_iter()
        .map(|u| {
            let n = u.len();
            let b: Vec<f64> = u.iter().map(|&i| cov[i - 1].iter().sum()).collect();
            let sub = nalgebra::DMatrix::from_fn(n, n, |a, c| cov[u[a] - 1][u[c] - 1]);
            let bv = nalgebra::DVector::from_vec(b);
            let sol = sub.cholesky().expect("positive definite").solve(&bv);
            let val = bv.dot(&sol) / v;
            idx(&u, val, val)
        })
        .collect();
    AnalyticReport {
        variance: v,
        compact,
        exact,
    }
}

fn portfolio_indices(s: [f64; 4], r12: f64, r34: f64, nu: f64) -> AnalyticReport {
    let [s1, s2, s3, s4] = s;
    let q12 = s1 * s1 * s2 * s2;
    let q34 = s3 * s3 * s4 * s4;

    let c3 = (6.0 * (nu - 2.0).powi(2) - nu * nu * (nu - 4.0)) / ((nu - 4.0) * (nu - 2.0).powi(2));
    let c4 = (nu * nu * (nu - 4.0) + 6.0 * (nu - 2.0)) / ((nu - 1.0) * (nu - 2.0) * (nu - 4.0));
    let d_compact = q12 * (1.0 + r12 * r12) + r34 * r34 * q34 * c3 + q34 * (1.0 - r34 * r34) * c4;
    let p1 = 2.0 * r12 * r12 * q12 / d_compact;
    let pt1 = q12 * (1.0 + r12 * r12) / d_compact;
    let p3 = r34 * r34 * q34 * c3 / d_compact;
    let pt3 = (r34 * r34 * q34 * c3 + q34 * (1.0 - r34 * r34) * c4) / d_compact;
    let p13 = p1 + p3;
    let compact = vec![
        idx(&[1], p1, pt1),
        idx(&[2], p1, pt1),
        idx(&[3], p3, pt3),
        idx(&[4], p3, pt3),
        idx(&[1, 2], pt1, pt1),
        idx(&[3, 4], pt3, pt3),
        idx(&[1, 3], p13, 1.0),
        idx(&[1, 4], p13, 1.0),
        idx(&[2, 3], p13, 1.0),
        idx(&[2, 4], p13, 1.0),
    ];

    // Direct moments: for (x3, x4) ~ t_nu with scale sigma,
    // Var(x3^2) = s3^4 nu^2 (2 nu - 2) / ((nu-2)^2 (nu-4)) and
    // Var(x3 x4) = s3^2 s4^2 nu^2 ((nu-2) + rho^2 nu) / ((nu-2)^2 (nu-4)).
    let g_block = q12 * (1.0 + r12 * r12);
    let g_single = 2.0 * r12 * r12 * q12;
    let t_block = q34 * nu * nu * ((nu - 2.0) + r34 * r34 * nu) / ((nu - 2.0).powi(2) * (nu - 4.0));
    let t_single = r34 * r34 * q34 * nu * nu * (2.0 * nu - 2.0) / ((nu - 2.0).powi(2) * (nu - 4.0));
    let v = g_block + t_block;
    // Within a block a singleton explains `single` to first order and the
    // whole block in total (its partner enters only through a latent
    // independent of it); contributions of the two blocks add.
    let part = |n: usize, single: f64, block: f64| match n {
        0 => (0.0, 0.0),
        1 => (single, block),
        _ => (block, block),
    };
    let exact = all_subsets(4)
        .into_iter()
        .map(|u| {
            let n12 = u.iter().filter(|&&i| i <= 2).count();
            let n34 = u.len() - n12;
            let (f1, t1) = part(n12, g_single, g_block);
            let (f2, t2) = part(n34, t_single, t_block);
            idx(&u, (f1 + f2) / v, (t1 + t2) / v)
        })
        .collect();
    AnalyticReport {
        variance: v,
        compact,
        exact,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval1(m: &dyn Model, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m.output_dim()];
        m.evaluate(x, &mut out).unwrap();
        out
    }

    #[test]
    fn builtin_values() {
        assert_eq!(eval1(&LinearSum, &[1.0, 2.0, 3.0]), vec![6.0]);
        assert_eq!(eval1(&Portfolio, &[1.0, 2.0, 3.0, 4.0]), vec![14.0]);
        let g = eval1(&GSobol::reference(), &[0.5; 10]);
        assert_relative_eq!(g[0], (10.0f64 / 11.0).powi(10), max_relative = 1e-15);
        assert_relative_eq!(g[0], 0.385_543_289, epsilon = 1e-9);
        assert_relative_eq!(g[3], (60.0f64 / 61.0).powi(10), max_relative = 1e-15);
    }

    #[test]
    fn gsobol_factor_bounds() {
        let g = GSobol::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..10).map(|_| rng.random()).collect();
            let out = eval1(&g, &x);
            for (row, &v) in out.iter().enumerate() {
                let a = g.coefficients()[row][0];
                assert!(v > 0.0);
                assert!(v >= (a / (1.0 + a)).powi(10) - 1e-15 && v <= ((2.0 + a) / (1.0 + a)).powi(10) + 1e-12);
            }
        }
    }

    #[test]
    fn parse_shapes() {
        use Expr::*;
        let b = Box::new;
        assert_eq!(
            parse_expression("x1 + x2*x3").unwrap(),
            Bin(BinOp::Add, b(Var(1)), b(Bin(BinOp::Mul, b(Var(2)), b(Var(3)))))
        );
        assert_eq!(
            parse_expression("abs(4*x1 - 2)").unwrap(),
            Call(Func::Abs, b(Bin(BinOp::Sub, b(Bin(BinOp::Mul, b(Num(4.0)), b(Var(1)))), b(Num(2.0)))))
        );
        assert_eq!(
            parse_expression("2^3^2").unwrap(),
            Bin(BinOp::Pow, b(Num(2.0)), b(Bin(BinOp::Pow, b(Num(3.0)), b(Num(2.0)))))
        );
        assert_eq!(
            parse_expression("-x1^2").unwrap(),
            Neg(b(Bin(BinOp::Pow, b(Var(1)), b(Num(2.0)))))
        );
        assert_eq!(parse_expression("x1 - x2 - x3").unwrap().eval(&[1.0, 2.0, 3.0]).unwrap(), -4.0);
        assert_eq!(parse_expression("2^-1").unwrap().eval(&[]).unwrap(), 0.5);
        assert_eq!(parse_expression("1.5e2").unwrap(), Num(150.0));
    }

    fn parse_error(src: &str) -> (usize, usize, String) {
        match parse_expression(src) {
            Err(Error::Parse { line, column, message }) => (line, column, message),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_have_positions() {
        assert_eq!(parse_error("x1 + ").1, 6);
        let (_, col, msg) = parse_error("x1 + y");
        assert_eq!(col, 6);
        assert!(msg.contains("unknown identifier"));
        assert!(parse_error("abs(x1, x2)").2.contains("exactly one"));
        assert_eq!(parse_error("x1 +\n  (x2").0, 2);
        assert_eq!(parse_error("x0").1, 1);
        assert_eq!(parse_error("x1 $ x2").1, 4);
        assert!(parse_error("x1 x2").2.contains("trailing"));
    }

    #[test]
    fn evaluation_errors() {
        let m = ExpressionModel::new(2, &["x1/x2".to_string(), "log(x1)".to_string()]).unwrap();
        let mut out = [0.0; 2];
        assert!(m.evaluate(&[1.0, 0.0], &mut out).unwrap_err().contains("division by zero"));
        assert!(m.evaluate(&[-1.0, 1.0], &mut out).unwrap_err().contains("log"));
        assert!(m.evaluate(&[2.0, 1.0], &mut out).is_ok());
        assert!(ExpressionModel::new(2, &["x3".to_string()]).is_err());
        let big = ExpressionModel::new(1, &["exp(x1)".to_string()]).unwrap();
        assert!(big.evaluate(&[1000.0], &mut [0.0]).is_err());
    }

    #[test]
    fn expressions_match_builtins() {
        let lin = ExpressionModel::new(3, &["x1 + x2 + x3".to_string()]).unwrap();
        let port = ExpressionModel::new(4, &["x1*x2 + x3*x4".to_string()]).unwrap();
        let g_src = (1..=10)
            .map(|j| format!("(abs(4*x{j} - 2) + 10)/11"))
            .collect::<Vec<_>>()
            .join("*");
        let gs = ExpressionModel::new(10, &[g_src]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            assert_relative_eq!(eval1(&lin, &x[..3])[0], eval1(&LinearSum, &x[..3])[0], max_relative = 1e-12);
            assert_relative_eq!(eval1(&port, &x[..4])[0], eval1(&Portfolio, &x[..4])[0], max_relative = 1e-12);
            let u: Vec<f64> = x.iter().map(|v| (v + 2.0) / 4.0).collect();
            assert_relative_eq!(eval1(&gs, &u)[0], eval1(&GSobol::reference(), &u)[0], max_relative = 1e-12);
        }
    }

    #[test]
    fn pretty_print_round_trip() {
        for src in [
            "x1 + x2*x3",
            "abs(4*x1 - 2)",
            "-(x1 + x2)^2",
            "(-x1)^2",
            "x1 - (x2 - x3)",
            "x1/(x2/x3)",
            "(x1^x2)^x3",
            "--x1",
            "2^-x1",
            "exp(-x1*x1/2)/sqrt(2*3.141592653589793)",
            "1e-7*x1 + 1e300",
        ] {
            let e = parse_expression(src).unwrap();
            let again = parse_expression(&e.to_string()).unwrap();
            assert_eq!(e, again, "{src} -> {e}");
        }
    }

    proptest::proptest! {
        #[test]
        fn random_trees_round_trip(seed in 0u64..5000) {
            fn gen(rng: &mut ChaCha8Rng, depth: u32) -> Expr {
                if depth == 0 || rng.random_bool(0.3) {
                    return if rng.random_bool(0.5) {
                        Expr::Var(rng.random_range(1..5))
                    } else {
                        Expr::Num((rng.random::<f64>() * 100.0).round() / 8.0)
                    };
                }
                match rng.random_range(0..7) {
                    0 => Expr::Neg(Box::new(gen(rng, depth - 1))),
                    1 => Expr::Call(Func::Sqrt, Box::new(gen(rng, depth - 1))),
                    k => {
                        let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Pow][k - 2];
                        Expr::Bin(op, Box::new(gen(rng, depth - 1)), Box::new(gen(rng, depth - 1)))
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = gen(&mut rng, 5);
            let printed = e.to_string();
            proptest::prop_assert_eq!(parse_expression(&printed).unwrap(), e, "{}", printed);
        }
    }

    #[test]
    fn linear_reference_values() {
        let r = analytic_indices(&ModelSpec::linear_reference()).unwrap().unwrap();
        assert_relative_eq!(r.variance, 5.0, epsilon = 1e-14);
        let expect = [
            (vec![1], 0.578),
            (vec![2], 0.648),
            (vec![3], 0.45),
            (vec![1, 2], 0.818_666_666_666_666_7),
            (vec![2, 3], 0.850_549_450_549_450_5),
            (vec![1, 3], 0.858_333_333_333_333_3),
        ];
        for (u, v) in expect {
            let p = r.compact_for(&u).unwrap();
            let e = r.exact_for(&u).unwrap();
            assert_relative_eq!(p.first, v, epsilon = 1e-12);
            assert_eq!(p.first, p.total);
            assert_relative_eq!(e.first, v, epsilon = 1e-12);
        }
        assert_relative_eq!(r.exact_for(&[1, 2, 3]).unwrap().first, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn portfolio_reference_values() {
        let r = analytic_indices(&ModelSpec::portfolio_reference()).unwrap().unwrap();
        let t1 = r.compact_for(&[1]).unwrap();
        let t3 = r.compact_for(&[3]).unwrap();
        assert_relative_eq!(t1.total + t3.total, 1.0, epsilon = 1e-14);
        let d_compact = 1.25 / t1.total;
        assert_relative_eq!(d_compact, 1.25 + 0.09 * 29.0 / 9.0 + 0.91 * 43.0 / 12.0, epsilon = 1e-12);
        assert_relative_eq!(r.variance, 1.25 + 25.0 * 1.18 / 3.0 - 0.25, epsilon = 1e-12);
        let e1 = r.exact_for(&[1]).unwrap();
        assert_relative_eq!(e1.first, 0.5 / r.variance, epsilon = 1e-14);
        assert_relative_eq!(r.exact_for(&[3]).unwrap().first, 2.0 / r.variance, epsilon = 1e-14);
        assert_relative_eq!(r.exact_for(&[1, 3]).unwrap().total, 1.0, epsilon = 1e-14);
        assert_eq!(r.exact_for(&[2]).unwrap(), &AnalyticIndex { subset: vec![2], ..e1.clone() });

        let zero = ModelSpec::Portfolio {
            sigma: [1.0; 4],
            rho12: 0.0,
            rho34: 0.0,
            nu: 5.0,
        };
        let z = analytic_indices(&zero).unwrap().unwrap();
        assert_eq!(z.compact_for(&[1]).unwrap().first, 0.0);
        assert_eq!(z.exact_for(&[1]).unwrap().first, 0.0);
    }

    #[test]
    fn portfolio_variance_matches_monte_carlo() {
        // (x3, x4) drawn as W G with W^2 = nu / chi2_nu; nu = 12 keeps the
        // eighth moments finite so the sample variance settles.
        let nu = 12.0;
        let rho = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 400_000;
        let normal = |rng: &mut ChaCha8Rng| crate::special::norm_quantile(rng.random_range(1e-12..1.0 - 1e-12));
        let (mut s, mut s2, mut q, mut q2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let chi: f64 = (0..12).map(|_| normal(&mut rng).powi(2)).sum();
            let w = (nu / chi).sqrt();
            let g3 = normal(&mut rng);
            let g4 = rho * g3 + (1.0 - rho * rho).sqrt() * normal(&mut rng);
            let v = w * w * g3 * g4;
            let x3sq = w * w * g3 * g3;
            s += v;
            s2 += v * v;
            q += x3sq;
            q2 += x3sq * x3sq;
        }
        let var = s2 / n as f64 - (s / n as f64).powi(2);
        let var_sq = q2 / n as f64 - (q / n as f64).powi(2);
        let spec = ModelSpec::Portfolio {
            sigma: [1.0; 4],
            rho12: 0.5,
            rho34: rho,
            nu,
        };
        let r = analytic_indices(&spec).unwrap().unwrap();
        let t_block = r.variance - 1.25;
        assert!((var - t_block).abs() < 0.02 * t_block, "{var} vs {t_block}");
        // First-order part of x3 is rho^2 Var(x3^2).
        let t_single = r.exact_for(&[3]).unwrap().first * r.variance;
        assert!((rho * rho * var_sq - t_single).abs() < 0.03 * t_single, "{var_sq} vs {t_single}");
    }

    #[test]
    fn portfolio_requires_nu_above_four() {
        let bad = ModelSpec::Portfolio {
            sigma: [1.0; 4],
            rho12: 0.5,
            rho34: 0.3,
            nu: 4.0,
        };
        assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
        assert!(analytic_indices(&ModelSpec::gsobol_reference()).unwrap().is_none());
    }

    #[test]
    fn spec_serde() {
        let s: ModelSpec = serde_json::from_str(r#"{"kind":"gsobol"}"#).unwrap();
        assert_eq!(s, ModelSpec::GSobol { a: None });
        let s: ModelSpec = serde_json::from_str(r#"{"kind":"expression","inputs":2,"outputs":["x1*x2"]}"#).unwrap();
        assert_eq!(s.build().unwrap().output_dim(), 1);
        assert_eq!(ModelSpec::gsobol_reference().default_structure().unwrap().unwrap().d(), 10);
        assert_eq!(ModelSpec::portfolio_reference().default_structure().unwrap().unwrap().k(), 3);
    }
}
