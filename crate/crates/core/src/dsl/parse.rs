use super::expr::{BinaryOp, Expr, UnaryOp, Var};
use super::{DslError, DslErrorKind, SystemSpec};

const MAX_DEPTH: usize = 200;
const MAX_CHANNELS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64, String),
    Str(String),
    Sym(char),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    col: usize,
}

fn err(line: usize, col: usize, kind: DslErrorKind) -> DslError {
    DslError { line, col, kind }
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> DslError {
    err(line, col, DslErrorKind::Syntax(msg.into()))
}

fn lex_line(text: &str, line: usize) -> Result<Vec<Token>, DslError> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let ch = chars[i];
        let col = i + 1;
        if ch == '#' {
            break;
        }
        if ch.is_whitespace() {
            i += 1;
            continue;
        }
        if ch.is_ascii_alphabetic() || ch == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            tokens.push(Token { tok: Tok::Ident(chars[start..i].iter().collect()), col });
            continue;
        }
        if ch.is_ascii_digit() || (ch == '.' && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let raw: String = chars[start..i].iter().collect();
            let value: f64 = raw
                .parse()
                .map_err(|_| syntax(line, col, format!("malformed number `{raw}`")))?;
            if !value.is_finite() {
                return Err(syntax(line, col, format!("number `{raw}` is out of range")));
            }
            tokens.push(Token { tok: Tok::Number(value, raw), col });
            continue;
        }
        if ch == '"' {
            let start = i + 1;
            let mut j = start;
            while j < chars.len() && chars[j] != '"' {
                j += 1;
            }
            if j == chars.len() {
                return Err(syntax(line, col, "unterminated string"));
            }
            tokens.push(Token { tok: Tok::Str(chars[start..j].iter().collect()), col });
            i = j + 1;
            continue;
        }
        if "+-*/^(),=".contains(ch) {
            tokens.push(Token { tok: Tok::Sym(ch), col });
            i += 1;
            continue;
        }
        return Err(syntax(line, col, format!("unexpected character `{ch}`")));
    }
    Ok(tokens)
}

/// Symbol table used while resolving identifiers in expressions.
struct Symbols<'a> {
    channels: usize,
    constants: &'a [(String, f64)],
}

impl Symbols<'_> {
    fn resolve(&self, name: &str) -> Option<Var> {
        if name == "t" {
            return Some(Var::Time);
        }
        if let Some(j) = self.constants.iter().position(|(n, _)| n == name) {
            return Some(Var::Constant(j));
        }
        channel_index(name).filter(|&c| c < self.channels).map(Var::Channel)
    }
}

/// `x<digits>` without leading zeros.
fn channel_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix('x')?;
    index_suffix(digits)
}

fn index_suffix(digits: &str) -> Option<usize> {
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return None;
    }
    digits.parse().ok()
}

fn is_reserved(name: &str) -> bool {
    name == "t" || name == "pow" || UnaryOp::from_function(name).is_some()
}

struct ExprParser<'a> {
    tokens: &'a [Token],
    pos: usize,
    line: usize,
    line_len: usize,
    /// `None` restricts the expression to literals only.
    symbols: Option<&'a Symbols<'a>>,
    depth: usize,
}

impl<'a> ExprParser<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos)
    }

    fn peek_sym(&self, ch: char) -> bool {
        matches!(self.peek(), Some(Token { tok: Tok::Sym(c), .. }) if *c == ch)
    }

    fn here(&self) -> usize {
        self.peek().map_or(self.line_len + 1, |t| t.col)
    }

    fn expect_sym(&mut self, ch: char) -> Result<(), DslError> {
        if self.peek_sym(ch) {
            self.pos += 1;
            Ok(())
        } else {
            Err(syntax(self.line, self.here(), format!("expected `{ch}`")))
        }
    }

    fn enter(&mut self) -> Result<(), DslError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(syntax(self.line, self.here(), "expression nested too deeply"));
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr, DslError> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            let op = if self.peek_sym('+') {
                BinaryOp::Add
            } else if self.peek_sym('-') {
                BinaryOp::Sub
            } else {
                break;
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.peek_sym('*') {
                BinaryOp::Mul
            } else if self.peek_sym('/') {
                BinaryOp::Div
            } else {
                break;
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, DslError> {
        self.enter()?;
        let out = if self.peek_sym('-') {
            self.pos += 1;
            Expr::Unary(UnaryOp::Neg, Box::new(self.unary()?))
        } else if self.peek_sym('+') {
            self.pos += 1;
            self.unary()?
        } else {
            self.power()?
        };
        self.depth -= 1;
        Ok(out)
    }

    fn power(&mut self) -> Result<Expr, DslError> {
        let base = self.primary()?;
        if self.peek_sym('^') {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Expr::Binary(BinaryOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, DslError> {
        let Some(token) = self.peek() else {
            return Err(syntax(self.line, self.here(), "unexpected end of expression"));
        };
        match &token.tok {
            Tok::Number(v, _) => {
                self.pos += 1;
                Ok(Expr::Literal(*v))
            }
            Tok::Sym('(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect_sym(')')?;
                Ok(inner)
            }
            Tok::Ident(name) if self.tokens.get(self.pos + 1).is_some_and(|t| t.tok == Tok::Sym('(')) => {
                let col = token.col;
                self.pos += 2;
                let mut args = Vec::new();
                if !self.peek_sym(')') {
                    args.push(self.expr()?);
                    while self.peek_sym(',') {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                }
                self.expect_sym(')')?;
                self.call(name, col, args)
            }
            Tok::Ident(name) => {
                self.pos += 1;
                let Some(symbols) = self.symbols else {
                    return Err(syntax(self.line, token.col, format!("`{name}` is not a literal value")));
                };
                symbols
                    .resolve(name)
                    .map(Expr::Var)
                    .ok_or_else(|| err(self.line, token.col, DslErrorKind::UnknownSymbol(name.clone())))
            }
            Tok::Str(_) => Err(syntax(self.line, token.col, "unexpected string")),
            Tok::Sym(c) => Err(syntax(self.line, token.col, format!("unexpected `{c}`"))),
        }
    }

    fn call(&self, name: &str, col: usize, mut args: Vec<Expr>) -> Result<Expr, DslError> {
        let want = if name == "pow" {
            2
        } else if UnaryOp::from_function(name).is_some() {
            1
        } else {
            return Err(err(self.line, col, DslErrorKind::UnknownSymbol(name.to_string())));
        };
        if args.len() != want {
            return Err(syntax(
                self.line,
                col,
                format!("`{name}` takes {want} argument(s), got {}", args.len()),
            ));
        }
        if want == 2 {
            let rhs = args.pop().expect("two args");
            let lhs = args.pop().expect("two args");
            return Ok(Expr::Binary(BinaryOp::Pow, Box::new(lhs), Box::new(rhs)));
        }
        let op = UnaryOp::from_function(name).expect("checked above");
        Ok(Expr::Unary(op, Box::new(args.pop().expect("one arg"))))
    }
}

fn literal_value(expr: &Expr) -> f64 {
    let ctx = super::expr::EvalContext { t: 0.0, x: &[], a: &[] };
    expr.eval(&ctx).unwrap_or(f64::NAN)
}

struct PendingRhs {
    line: usize,
    col: usize,
    index: usize,
    tokens: Vec<Token>,
    start: usize,
    line_len: usize,
}

/// Parses DSL source into a validated [`SystemSpec`].
pub fn parse_system(source: &str) -> Result<SystemSpec, DslError> {
    let mut name: Option<String> = None;
    let mut channels: Option<(usize, usize)> = None;
    let mut constants: Vec<(String, f64)> = Vec::new();
    let mut constant_pos: Vec<(usize, usize)> = Vec::new();
    let mut init: Vec<f64> = Vec::new();
    let mut init_line = 0;
    let mut duration_unit: Option<String> = None;
    let mut duration: Option<f64> = None;
    let mut pending: Vec<PendingRhs> = Vec::new();
    let mut last_line = 0;

    for (idx, text) in source.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let tokens = lex_line(text, line)?;
        let line_len = text.chars().count();
        let Some(first) = tokens.first() else { continue };
        let Tok::Ident(keyword) = &first.tok else {
            return Err(syntax(line, first.col, "expected a directive"));
        };
        let rest = &tokens[1..];
        let end_col = line_len + 1;
        match keyword.as_str() {
            "system" => {
                if name.is_some() {
                    return Err(syntax(line, first.col, "`system` given twice"));
                }
                match rest {
                    [Token { tok: Tok::Ident(n), .. }] => name = Some(n.clone()),
                    [t, ..] => return Err(syntax(line, t.col, "expected a single system name")),
                    [] => return Err(syntax(line, end_col, "expected a system name")),
                }
            }
            "channels" => {
                if channels.is_some() {
                    return Err(syntax(line, first.col, "`channels` given twice"));
                }
                match rest {
                    [Token { tok: Tok::Number(_, raw), col }] => {
                        let n: usize = raw
                            .parse()
                            .ok()
                            .filter(|n| (1..=MAX_CHANNELS).contains(n))
                            .ok_or_else(|| syntax(line, *col, "channel count must be a positive integer"))?;
                        channels = Some((n, line));
                    }
                    [t, ..] => return Err(syntax(line, t.col, "expected a channel count")),
                    [] => return Err(syntax(line, end_col, "expected a channel count")),
                }
            }
            "constants" => {
                if rest.is_empty() {
                    return Err(syntax(line, end_col, "expected name=value pairs"));
                }
                let mut pos = 0;
                while pos < rest.len() {
                    let Token { tok: Tok::Ident(cname), col } = &rest[pos] else {
                        return Err(syntax(line, rest[pos].col, "expected a constant name"));
                    };
                    if !matches!(rest.get(pos + 1), Some(Token { tok: Tok::Sym('='), .. })) {
                        let at = rest.get(pos + 1).map_or(end_col, |t| t.col);
                        return Err(syntax(line, at, "expected `=`"));
                    }
                    let mut parser = ExprParser {
                        tokens: rest,
                        pos: pos + 2,
                        line,
                        line_len,
                        symbols: None,
                        depth: 0,
                    };
                    let value_expr = parser.expr()?;
                    let value = literal_value(&value_expr);
                    if !value.is_finite() {
                        return Err(syntax(line, rest[pos + 2].col, "constant value is not a finite real"));
                    }
                    if is_reserved(cname) || constants.iter().any(|(n, _)| n == cname) {
                        return Err(err(line, *col, DslErrorKind::DuplicateName(cname.clone())));
                    }
                    constants.push((cname.clone(), value));
                    constant_pos.push((line, *col));
                    pos = parser.pos;
                }
            }
            "init" => {
                if rest.is_empty() {
                    return Err(syntax(line, end_col, "expected initial values"));
                }
                init_line = line;
                let mut pos = 0;
                while pos < rest.len() {
                    let negative = match &rest[pos].tok {
                        Tok::Sym('-') => {
                            pos += 1;
                            true
                        }
                        Tok::Sym('+') => {
                            pos += 1;
                            false
                        }
                        _ => false,
                    };
                    match rest.get(pos) {
                        Some(Token { tok: Tok::Number(v, _), .. }) => {
                            init.push(if negative { -v } else { *v });
                            pos += 1;
                        }
                        Some(t) => return Err(syntax(line, t.col, "expected a number")),
                        None => return Err(syntax(line, end_col, "expected a number")),
                    }
                }
            }
            "duration_unit" => match rest {
                [Token { tok: Tok::Str(s), .. }] => duration_unit = Some(s.clone()),
                [t, ..] => return Err(syntax(line, t.col, "expected a quoted string")),
                [] => return Err(syntax(line, end_col, "expected a quoted string")),
            },
            "duration" => {
                let value = match rest {
                    [Token { tok: Tok::Number(v, _), .. }] => *v,
                    [t, ..] => return Err(syntax(line, t.col, "expected a positive duration")),
                    [] => return Err(syntax(line, end_col, "expected a positive duration")),
                };
                if value <= 0.0 {
                    return Err(syntax(line, rest[0].col, "duration must be positive"));
                }
                duration = Some(value);
            }
            kw if kw.starts_with('d') && index_suffix(&kw[1..]).is_some() => {
                let index = index_suffix(&kw[1..]).expect("checked");
                if !matches!(rest.first(), Some(Token { tok: Tok::Sym('='), .. })) {
                    let at = rest.first().map_or(end_col, |t| t.col);
                    return Err(syntax(line, at, "expected `=`"));
                }
                pending.push(PendingRhs {
                    line,
                    col: first.col,
                    index,
                    tokens: tokens.clone(),
                    start: 2,
                    line_len,
                });
            }
            other => {
                return Err(syntax(line, first.col, format!("unknown directive `{other}`")));
            }
        }
    }

    let eof = last_line + 1;
    let name = name.ok_or_else(|| syntax(eof, 1, "missing `system` directive"))?;
    let (channels, channels_line) = channels.ok_or_else(|| syntax(eof, 1, "missing `channels` directive"))?;

    for ((cname, _), &(line, col)) in constants.iter().zip(&constant_pos) {
        if channel_index(cname).is_some_and(|c| c < channels) {
            return Err(err(line, col, DslErrorKind::DuplicateName(cname.clone())));
        }
    }
    if init.len() != channels {
        return Err(err(
            if init_line == 0 { eof } else { init_line },
            1,
            DslErrorKind::ArityMismatch { what: "initial values", expected: channels, found: init.len() },
        ));
    }

    let symbols = Symbols { channels, constants: &constants };
    let mut rhs: Vec<Option<Expr>> = vec![None; channels];
    for p in &pending {
        if p.index >= channels {
            return Err(err(
                p.line,
                p.col,
                DslErrorKind::ArityMismatch { what: "derivative lines", expected: channels, found: p.index + 1 },
            ));
        }
        let mut parser = ExprParser {
            tokens: &p.tokens,
            pos: p.start,
            line: p.line,
            line_len: p.line_len,
            symbols: Some(&symbols),
            depth: 0,
        };
        let expr = parser.expr()?;
        if let Some(extra) = parser.peek() {
            return Err(syntax(p.line, extra.col, "unexpected trailing input"));
        }
        if rhs[p.index].is_some() {
            return Err(err(p.line, p.col, DslErrorKind::DuplicateName(format!("d{}", p.index))));
        }
        rhs[p.index] = Some(expr);
    }
    let found = rhs.iter().filter(|r| r.is_some()).count();
    if found != channels {
        return Err(err(
            channels_line,
            1,
            DslErrorKind::ArityMismatch { what: "derivative lines", expected: channels, found },
        ));
    }

    Ok(SystemSpec {
        name,
        channels,
        constants,
        initial_values: init,
        rhs: rhs.into_iter().map(|r| r.expect("all present")).collect(),
        duration_unit,
        default_duration: duration.unwrap_or(1.0),
    })
}
