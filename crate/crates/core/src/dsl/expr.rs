use std::fmt::{self, Write};

use super::{DomainKind, SystemSpec};

/// A resolved symbol reference inside a right-hand side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    Time,
    Channel(usize),
    Constant(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
}

impl UnaryOp {
    pub(crate) fn from_function(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Self::Sin,
            "cos" => Self::Cos,
            "exp" => Self::Exp,
            "log" => Self::Log,
            "sqrt" => Self::Sqrt,
            "abs" => Self::Abs,
            "tanh" => Self::Tanh,
            _ => return None,
        })
    }

    fn function_name(self) -> Option<&'static str> {
        Some(match self {
            Self::Neg => return None,
            Self::Sin => "sin",
            Self::Cos => "cos",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::Sqrt => "sqrt",
            Self::Abs => "abs",
            Self::Tanh => "tanh",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    fn symbol(self) -> char {
        match self {
            Self::Add => '+',
            Self::Sub => '-',
            Self::Mul => '*',
            Self::Div => '/',
            Self::Pow => '^',
        }
    }

    fn precedence(self) -> u8 {
        match self {
            Self::Add | Self::Sub => PREC_SUM,
            Self::Mul | Self::Div => PREC_PRODUCT,
            Self::Pow => PREC_POWER,
        }
    }
}

const PREC_SUM: u8 = 1;
const PREC_PRODUCT: u8 = 2;
const PREC_UNARY: u8 = 3;
const PREC_POWER: u8 = 4;
const PREC_ATOM: u8 = 5;

/// Expression tree for one channel derivative.
///
/// Literals produced by the parser are always finite and non-negative; a
/// leading minus is a [`UnaryOp::Neg`] node.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(f64),
    Var(Var),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

pub(crate) struct EvalContext<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub a: &'a [f64],
}

impl Expr {
    pub(crate) fn eval(&self, ctx: &EvalContext<'_>) -> Result<f64, DomainKind> {
        match self {
            Expr::Literal(v) => Ok(*v),
            Expr::Var(Var::Time) => Ok(ctx.t),
            Expr::Var(Var::Channel(c)) => Ok(ctx.x[*c]),
            Expr::Var(Var::Constant(j)) => Ok(ctx.a[*j]),
            Expr::Unary(op, arg) => {
                let v = arg.eval(ctx)?;
                match op {
                    UnaryOp::Neg => Ok(-v),
                    UnaryOp::Sin => Ok(v.sin()),
                    UnaryOp::Cos => Ok(v.cos()),
                    UnaryOp::Exp => Ok(v.exp()),
                    UnaryOp::Log if v <= 0.0 => Err(DomainKind::LogNonPositive),
                    UnaryOp::Log => Ok(v.ln()),
                    UnaryOp::Sqrt if v < 0.0 => Err(DomainKind::SqrtNegative),
                    UnaryOp::Sqrt => Ok(v.sqrt()),
                    UnaryOp::Abs => Ok(v.abs()),
                    UnaryOp::Tanh => Ok(v.tanh()),
                }
            }
            Expr::Binary(op, lhs, rhs) => {
                let l = lhs.eval(ctx)?;
                let r = rhs.eval(ctx)?;
                match op {
                    BinaryOp::Add => Ok(l + r),
                    BinaryOp::Sub => Ok(l - r),
                    BinaryOp::Mul => Ok(l * r),
                    BinaryOp::Div if r == 0.0 => Err(DomainKind::DivisionByZero),
                    BinaryOp::Div => Ok(l / r),
                    BinaryOp::Pow => {
                        let v = l.powf(r);
                        if v.is_nan() {
                            Err(DomainKind::InvalidPower)
                        } else {
                            Ok(v)
                        }
                    }
                }
            }
        }
    }

    /// Visits every variable reference.
    pub fn for_each_var(&self, f: &mut impl FnMut(Var)) {
        match self {
            Expr::Literal(_) => {}
            Expr::Var(v) => f(*v),
            Expr::Unary(_, arg) => arg.for_each_var(f),
            Expr::Binary(_, l, r) => {
                l.for_each_var(f);
                r.for_each_var(f);
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Literal(_) | Expr::Var(_) => PREC_ATOM,
            Expr::Unary(UnaryOp::Neg, _) => PREC_UNARY,
            Expr::Unary(..) => PREC_ATOM,
            Expr::Binary(op, ..) => op.precedence(),
        }
    }

    pub(crate) fn render(&self, spec: &SystemSpec, out: &mut String) -> fmt::Result {
        match self {
            Expr::Literal(v) => write!(out, "{v:?}"),
            Expr::Var(Var::Time) => out.write_char('t'),
            Expr::Var(Var::Channel(c)) => write!(out, "x{c}"),
            Expr::Var(Var::Constant(j)) => out.write_str(&spec.constants[*j].0),
            Expr::Unary(UnaryOp::Neg, arg) => {
                out.write_char('-')?;
                render_child(arg, PREC_UNARY, spec, out)
            }
            Expr::Unary(op, arg) => {
                out.write_str(op.function_name().unwrap_or_default())?;
                out.write_char('(')?;
                arg.render(spec, out)?;
                out.write_char(')')
            }
            Expr::Binary(op, lhs, rhs) => {
                let prec = op.precedence();
                // `^` is right-associative and its exponent is parsed as a unary operand
                let (left_min, right_min) = match op {
                    BinaryOp::Pow => (PREC_POWER + 1, PREC_UNARY),
                    _ => (prec, prec + 1),
                };
                render_child(lhs, left_min, spec, out)?;
                write!(out, " {} ", op.symbol())?;
                render_child(rhs, right_min, spec, out)
            }
        }
    }
}

fn render_child(child: &Expr, min_prec: u8, spec: &SystemSpec, out: &mut String) -> fmt::Result {
    if child.precedence() < min_prec {
        out.write_char('(')?;
        child.render(spec, out)?;
        out.write_char(')')
    } else {
        child.render(spec, out)
    }
}
