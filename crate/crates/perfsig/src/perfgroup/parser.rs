//! Group file parser and printer.
//!
//! Format (one entry per line, `#` starts a comment):
//!
//! ```text
//! SHORT <description>
//! EVENTSET
//! <SLOT> <EVENT>
//! ...
//! METRICS
//! <NAME>[<unit>] <expr>
//! ...
//! ```
//!
//! Expressions use `+ - * /`, unary minus, parentheses, numeric literals with
//! optional exponent (`1.0E-06`), counter slots and the builtin `time`.

use super::{BinOp, EventSetEntry, Expr, GroupError, MetricFormula, PerformanceGroup};
use crate::session::is_valid_event_name;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    col_base: usize,
    peeked: Option<Option<(Tok, usize)>>,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str, line: usize, col_base: usize) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
            line,
            col_base,
            peeked: None,
        }
    }

    fn col(&self, pos: usize) -> usize {
        self.col_base + pos + 1
    }

    fn error(&self, pos: usize, message: impl Into<String>) -> GroupError {
        GroupError::Syntax {
            line: self.line,
            col: self.col(pos),
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && (self.src[self.pos] as char).is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn lex(&mut self) -> Result<Option<(Tok, usize)>, GroupError> {
        self.skip_ws();
        if self.pos >= self.src.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = self.src[self.pos] as char;
        let tok = match c {
            '+' => {
                self.pos += 1;
                Tok::Plus
            }
            '-' => {
                self.pos += 1;
                Tok::Minus
            }
            '*' => {
                self.pos += 1;
                Tok::Star
            }
            '/' => {
                self.pos += 1;
                Tok::Slash
            }
            '(' => {
                self.pos += 1;
                Tok::LParen
            }
            ')' => {
                self.pos += 1;
                Tok::RParen
            }
            c if c.is_ascii_digit() => {
                while self.pos < self.src.len() && (self.src[self.pos] as char).is_ascii_digit() {
                    self.pos += 1;
                }
                if self.pos < self.src.len() && self.src[self.pos] == b'.' {
                    self.pos += 1;
                    while self.pos < self.src.len() && (self.src[self.pos] as char).is_ascii_digit()
                    {
                        self.pos += 1;
                    }
                }
                if self.pos < self.src.len() && matches!(self.src[self.pos], b'e' | b'E') {
                    let mark = self.pos;
                    self.pos += 1;
                    if self.pos < self.src.len() && matches!(self.src[self.pos], b'+' | b'-') {
                        self.pos += 1;
                    }
                    if self.pos < self.src.len() && (self.src[self.pos] as char).is_ascii_digit() {
                        while self.pos < self.src.len()
                            && (self.src[self.pos] as char).is_ascii_digit()
                        {
                            self.pos += 1;
                        }
                    } else {
                        // not an exponent after all (e.g. slot follows)
                        self.pos = mark;
                    }
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                let value: f64 = text
                    .parse()
                    .map_err(|_| self.error(start, format!("invalid number `{text}`")))?;
                Tok::Number(value)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while self.pos < self.src.len()
                    && ((self.src[self.pos] as char).is_ascii_alphanumeric()
                        || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                Tok::Ident(text.to_string())
            }
            other => return Err(self.error(start, format!("unexpected character `{other}`"))),
        };
        Ok(Some((tok, start)))
    }

    fn peek(&mut self) -> Result<Option<(Tok, usize)>, GroupError> {
        if self.peeked.is_none() {
            self.peeked = Some(self.lex()?);
        }
        Ok(self.peeked.clone().unwrap())
    }

    fn next(&mut self) -> Result<Option<(Tok, usize)>, GroupError> {
        match self.peeked.take() {
            Some(t) => Ok(t),
            None => self.lex(),
        }
    }
}

/// Parse one expression occupying `src` (a slice of a metric line).
/// Positions in errors are reported relative to the original group file.
fn parse_expr_at(src: &str, line: usize, col_base: usize) -> Result<Expr, GroupError> {
    let mut lexer = Lexer::new(src, line, col_base);
    let expr = parse_sum(&mut lexer)?;
    if let Some((tok, pos)) = lexer.peek()? {
        return Err(lexer.error(pos, format!("unexpected trailing token {tok:?}")));
    }
    Ok(expr)
}

/// Parse a bare expression (positions reported as line 1).
pub fn parse_expr(src: &str) -> Result<Expr, GroupError> {
    parse_expr_at(src, 1, 0)
}

fn parse_sum(lexer: &mut Lexer) -> Result<Expr, GroupError> {
    let mut lhs = parse_term(lexer)?;
    while let Some((tok, _)) = lexer.peek()? {
        let op = match tok {
            Tok::Plus => BinOp::Add,
            Tok::Minus => BinOp::Sub,
            _ => break,
        };
        lexer.next()?;
        let rhs = parse_term(lexer)?;
        lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
    }
    Ok(lhs)
}

fn parse_term(lexer: &mut Lexer) -> Result<Expr, GroupError> {
    let mut lhs = parse_factor(lexer)?;
    while let Some((tok, _)) = lexer.peek()? {
        let op = match tok {
            Tok::Star => BinOp::Mul,
            Tok::Slash => BinOp::Div,
            _ => break,
        };
        lexer.next()?;
        let rhs = parse_factor(lexer)?;
        lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
    }
    Ok(lhs)
}

fn parse_factor(lexer: &mut Lexer) -> Result<Expr, GroupError> {
    let Some((tok, pos)) = lexer.next()? else {
        return Err(lexer.error(
            lexer.src.len(),
            "expected a number, slot, `time`, `(` or `-`",
        ));
    };
    match tok {
        Tok::Number(x) => Ok(Expr::Number(x)),
        Tok::Ident(name) => {
            if name == "time" {
                Ok(Expr::Time)
            } else {
                Ok(Expr::Slot(name))
            }
        }
        Tok::Minus => Ok(Expr::Neg(Box::new(parse_factor(lexer)?))),
        Tok::LParen => {
            let inner = parse_sum(lexer)?;
            match lexer.next()? {
                Some((Tok::RParen, _)) => Ok(inner),
                Some((tok, pos)) => Err(lexer.error(pos, format!("expected `)`, found {tok:?}"))),
                None => Err(lexer.error(lexer.src.len(), "expected `)`")),
            }
        }
        other => Err(lexer.error(pos, format!("expected a number, slot, `time`, `(` or `-`, found {other:?}"))),
    }
}

fn is_valid_slot_name(name: &str) -> bool {
    is_valid_event_name(name)
}

fn is_valid_metric_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Parse a group file. The group name comes from the caller (by convention
/// the file stem), since the format itself carries no name line.
pub fn parse_group_file(group_name: &str, text: &str) -> Result<PerformanceGroup, GroupError> {
    #[derive(PartialEq)]
    enum Section {
        ExpectShort,
        ExpectEventset,
        Events,
        Metrics,
    }

    let syntax = |line: usize, col: usize, message: String| GroupError::Syntax { line, col, message };

    let mut section = Section::ExpectShort;
    let mut short_description = String::new();
    let mut event_set: Vec<EventSetEntry> = Vec::new();
    let mut metrics: Vec<MetricFormula> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        if line.trim().is_empty() {
            continue;
        }
        match section {
            Section::ExpectShort => {
                let trimmed = line.trim_start();
                if let Some(rest) = trimmed.strip_prefix("SHORT") {
                    short_description = rest.trim().to_string();
                    section = Section::ExpectEventset;
                } else {
                    return Err(syntax(lineno, 1, "expected `SHORT <description>`".into()));
                }
            }
            Section::ExpectEventset => {
                if line.trim() == "EVENTSET" {
                    section = Section::Events;
                } else {
                    return Err(syntax(lineno, 1, "expected `EVENTSET`".into()));
                }
            }
            Section::Events => {
                if line.trim() == "METRICS" {
                    section = Section::Metrics;
                    continue;
                }
                let mut parts = line.split_whitespace();
                let slot = parts.next().unwrap().to_string();
                let event = parts
                    .next()
                    .ok_or_else(|| syntax(lineno, 1, "expected `SLOT EVENT`".into()))?
                    .to_string();
                if parts.next().is_some() {
                    return Err(syntax(lineno, 1, "expected exactly `SLOT EVENT`".into()));
                }
                if !is_valid_slot_name(&slot) {
                    return Err(syntax(lineno, 1, format!("invalid slot name `{slot}`")));
                }
                if !is_valid_event_name(&event) {
                    return Err(syntax(lineno, 1, format!("invalid event name `{event}`")));
                }
                if event_set.iter().any(|e| e.counter_slot == slot) {
                    return Err(syntax(lineno, 1, format!("duplicate counter slot `{slot}`")));
                }
                event_set.push(EventSetEntry {
                    counter_slot: slot,
                    event_name: event,
                });
            }
            Section::Metrics => {
                let trimmed = line.trim_start();
                let indent = line.len() - trimmed.len();
                let name_end = trimmed
                    .find(char::is_whitespace)
                    .ok_or_else(|| syntax(lineno, 1, "expected `NAME <expr>`".into()))?;
                let name_tok = &trimmed[..name_end];
                let expr_off = indent + name_end;
                let expr_src = &trimmed[name_end..];

                let (name, unit) = match name_tok.find('[') {
                    Some(b) => {
                        if !name_tok.ends_with(']') {
                            return Err(syntax(lineno, indent + b + 1, "unterminated `[unit]`".into()));
                        }
                        (
                            name_tok[..b].to_string(),
                            name_tok[b + 1..name_tok.len() - 1].to_string(),
                        )
                    }
                    None => (name_tok.to_string(), String::new()),
                };
                if !is_valid_metric_name(&name) {
                    return Err(syntax(lineno, indent + 1, format!("invalid metric name `{name}`")));
                }
                let expression = parse_expr_at(expr_src, lineno, expr_off)?;
                metrics.push(MetricFormula {
                    metric_name: name,
                    unit,
                    expression,
                });
            }
        }
    }

    match section {
        Section::ExpectShort => return Err(syntax(1, 1, "empty group file".into())),
        Section::ExpectEventset | Section::Events => {
            return Err(syntax(text.lines().count().max(1), 1, "missing `METRICS` section".into()))
        }
        Section::Metrics => {}
    }
    if metrics.is_empty() {
        return Err(syntax(
            text.lines().count().max(1),
            1,
            "a group needs at least one metric".into(),
        ));
    }

    // Every referenced slot must be declared in EVENTSET.
    for metric in &metrics {
        for slot in metric.expression.slots() {
            if !event_set.iter().any(|e| e.counter_slot == slot) {
                return Err(GroupError::UnknownSlot {
                    metric: metric.metric_name.clone(),
                    slot,
                });
            }
        }
    }

    Ok(PerformanceGroup {
        group_name: group_name.to_string(),
        short_description,
        event_set,
        metrics,
    })
}

fn op_symbol(op: BinOp) -> char {
    match op {
        BinOp::Add => '+',
        BinOp::Sub => '-',
        BinOp::Mul => '*',
        BinOp::Div => '/',
    }
}

fn op_prec(op: BinOp) -> u8 {
    match op {
        BinOp::Add | BinOp::Sub => 1,
        BinOp::Mul | BinOp::Div => 2,
    }
}

fn print_with(expr: &Expr, min_prec: u8, out: &mut String) {
    match expr {
        Expr::Number(x) => out.push_str(&format!("{x}")),
        Expr::Slot(s) => out.push_str(s),
        Expr::Time => out.push_str("time"),
        Expr::Neg(inner) => {
            out.push('-');
            print_with(inner, 3, out);
        }
        Expr::Bin(op, l, r) => {
            let p = op_prec(*op);
            let need_parens = p < min_prec;
            if need_parens {
                out.push('(');
            }
            // The grammar is left-associative, so an equal-precedence right
            // child must be parenthesized to survive a round trip.
            print_with(l, p, out);
            out.push(op_symbol(*op));
            print_with(r, p + 1, out);
            if need_parens {
                out.push(')');
            }
        }
    }
}

/// Render an expression so that re-parsing yields a structurally equal AST.
pub fn print_expr(expr: &Expr) -> String {
    let mut out = String::new();
    print_with(expr, 0, &mut out);
    out
}

/// Render a whole group in the group file format.
pub fn print_group(group: &PerformanceGroup) -> String {
    let mut out = String::new();
    out.push_str(&format!("SHORT {}\n\nEVENTSET\n", group.short_description));
    for entry in &group.event_set {
        out.push_str(&format!("{} {}\n", entry.counter_slot, entry.event_name));
    }
    out.push_str("\nMETRICS\n");
    for metric in &group.metrics {
        if metric.unit.is_empty() {
            out.push_str(&format!("{} {}\n", metric.metric_name, print_expr(&metric.expression)));
        } else {
            out.push_str(&format!(
                "{}[{}] {}\n",
                metric.metric_name,
                metric.unit,
                print_expr(&metric.expression)
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_unary_minus() {
        let e = parse_expr("1.0+2.0*3.0").unwrap();
        // multiplication binds tighter
        match e {
            Expr::Bin(BinOp::Add, _, rhs) => assert!(matches!(*rhs, Expr::Bin(BinOp::Mul, _, _))),
            other => panic!("{other:?}"),
        }
        let e = parse_expr("-PMC0/time").unwrap();
        match e {
            Expr::Bin(BinOp::Div, lhs, _) => assert!(matches!(*lhs, Expr::Neg(_))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exponent_numbers() {
        assert_eq!(parse_expr("1.0E-06").unwrap(), Expr::Number(1.0e-6));
        assert_eq!(parse_expr("2E3").unwrap(), Expr::Number(2000.0));
        assert_eq!(parse_expr("5.5e+1").unwrap(), Expr::Number(55.0));
    }

    #[test]
    fn syntax_error_carries_position() {
        match parse_expr("1.0+") {
            Err(GroupError::Syntax { line, col, .. }) => {
                assert_eq!(line, 1);
                assert!(col >= 4, "col {col}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn printer_round_trips_tricky_shapes() {
        for src in [
            "A-(B-C)",
            "A-B-C",
            "A/(B/C)",
            "(A+B)*C",
            "-(A+B)",
            "--A",
            "A*-B",
            "1.0E-06*(PMC0*2.0+PMC1)/time",
        ] {
            let ast = parse_expr(src).unwrap();
            let printed = print_expr(&ast);
            let reparsed = parse_expr(&printed).unwrap();
            assert_eq!(ast, reparsed, "src `{src}` printed `{printed}`");
        }
    }
}
