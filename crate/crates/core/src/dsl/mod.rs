//! A line-oriented language for parametrized first-order ODE systems.
//!
//! ```text
//! # exponential growth
//! system lin
//! channels 1
//! constants a=1.0
//! init 1.0
//! duration_unit "s"
//! duration 1.0
//! d0 = a * x0
//! ```
//!
//! Channel symbols are `x0..x{C-1}`, the time symbol is `t`, and every other
//! identifier must be a declared constant. Constant values may be written as
//! literal arithmetic (`beta=8/3`). `duration` is optional and gives the
//! system's reference duration (defaults to 1).

mod expr;
mod parse;

use std::fmt;

use thiserror::Error;

pub use expr::{BinaryOp, Expr, UnaryOp, Var};
pub use parse::parse_system;

use expr::EvalContext;

/// A parsed ODE system `x' = f(t, x; a)` with literature constants and
/// initial values.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub name: String,
    pub channels: usize,
    pub constants: Vec<(String, f64)>,
    pub initial_values: Vec<f64>,
    pub rhs: Vec<Expr>,
    pub duration_unit: Option<String>,
    pub default_duration: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DslErrorKind {
    Syntax(String),
    UnknownSymbol(String),
    ArityMismatch { what: &'static str, expected: usize, found: usize },
    DuplicateName(String),
}

/// Parse failure with a 1-based source position.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct DslError {
    pub line: usize,
    pub col: usize,
    pub kind: DslErrorKind,
}

impl fmt::Display for DslError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: ", self.line, self.col)?;
        match &self.kind {
            DslErrorKind::Syntax(msg) => write!(f, "syntax error: {msg}"),
            DslErrorKind::UnknownSymbol(s) => write!(f, "unknown symbol `{s}`"),
            DslErrorKind::ArityMismatch { what, expected, found } => {
                write!(f, "expected {expected} {what}, found {found}")
            }
            DslErrorKind::DuplicateName(s) => write!(f, "duplicate name `{s}`"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    NonFiniteInput,
    DivisionByZero,
    LogNonPositive,
    SqrtNegative,
    InvalidPower,
    NonFiniteResult,
}

/// Right-hand side evaluation failure, tagged with the offending channel.
///
/// For [`DomainKind::NonFiniteInput`] the index is the input state
/// component that was not finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("domain error in channel {channel}: {kind:?}")]
pub struct EvalError {
    pub channel: usize,
    pub kind: DomainKind,
}

impl SystemSpec {
    pub fn constant_values(&self) -> Vec<f64> {
        self.constants.iter().map(|(_, v)| *v).collect()
    }

    pub fn constant_index(&self, name: &str) -> Option<usize> {
        self.constants.iter().position(|(n, _)| n == name)
    }

    /// Evaluates `x'(t)` into `out`.
    pub fn eval_rhs_into(
        &self,
        t: f64,
        x: &[f64],
        a: &[f64],
        out: &mut [f64],
    ) -> Result<(), EvalError> {
        assert_eq!(x.len(), self.channels, "state length must equal channel count");
        assert_eq!(a.len(), self.constants.len(), "one value per declared constant");
        if let Some(c) = x.iter().position(|v| !v.is_finite()) {
            return Err(EvalError { channel: c, kind: DomainKind::NonFiniteInput });
        }
        let ctx = EvalContext { t, x, a };
        for (c, (rhs, slot)) in self.rhs.iter().zip(out.iter_mut()).enumerate() {
            let v = rhs.eval(&ctx).map_err(|kind| EvalError { channel: c, kind })?;
            if !v.is_finite() {
                return Err(EvalError { channel: c, kind: DomainKind::NonFiniteResult });
            }
            *slot = v;
        }
        Ok(())
    }

    pub fn eval_rhs(&self, t: f64, x: &[f64], a: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut out = vec![0.0; self.channels];
        self.eval_rhs_into(t, x, a, &mut out)?;
        Ok(out)
    }

    /// Renders the system back into DSL source. Reparsing the output yields an
    /// identical `SystemSpec`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out).expect("writing to a String cannot fail");
        out
    }

    fn render_into(&self, out: &mut String) -> fmt::Result {
        use fmt::Write;
        writeln!(out, "system {}", self.name)?;
        writeln!(out, "channels {}", self.channels)?;
        if !self.constants.is_empty() {
            out.write_str("constants")?;
            for (name, value) in &self.constants {
                write!(out, " {name}={value:?}")?;
            }
            out.write_char('\n')?;
        }
        out.write_str("init")?;
        for v in &self.initial_values {
            write!(out, " {v:?}")?;
        }
        out.write_char('\n')?;
        if let Some(unit) = &self.duration_unit {
            writeln!(out, "duration_unit \"{unit}\"")?;
        }
        writeln!(out, "duration {:?}", self.default_duration)?;
        for (c, rhs) in self.rhs.iter().enumerate() {
            write!(out, "d{c} = ")?;
            rhs.render(self, out)?;
            out.write_char('\n')?;
        }
        Ok(())
    }
}
