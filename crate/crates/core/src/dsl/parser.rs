use super::ast::{Aggregator, BinaryOp, Builtin, Expr, Lambda, Pipeline, Stage, UnaryOp, WindowMode};
use super::lexer::{tokenize, Tok, Token};
use super::{ParseError, QueryError, ValidationError};
use crate::value::Value;

const MAX_DEPTH: usize = 256;

pub fn parse(text: &str) -> Result<Pipeline, QueryError> {
    let tokens = tokenize(text)?;
    let mut p = Parser { tokens, pos: 0, depth: 0 };
    let mut stages = vec![p.stage()?];
    while p.eat(&Tok::Pipe) {
        stages.push(p.stage()?);
    }
    if p.peek() != &Tok::Eof {
        return Err(p.unexpected("'|' or end of query").into());
    }
    let pipeline = Pipeline { stages };
    validate(&pipeline)?;
    Ok(pipeline)
}

pub fn parse_expr(text: &str) -> Result<Expr, ParseError> {
    let tokens = tokenize(text)?;
    let mut p = Parser { tokens, pos: 0, depth: 0 };
    let e = p.expr()?;
    if p.peek() != &Tok::Eof {
        return Err(p.unexpected("end of expression"));
    }
    Ok(e)
}

pub fn validate(p: &Pipeline) -> Result<(), ValidationError> {
    let reduces = p.stages.iter().filter(|s| matches!(s, Stage::Reduce(..))).count();
    let windows = p.stages.iter().filter(|s| matches!(s, Stage::Window(_))).count();
    if reduces > 1 {
        return Err(ValidationError("at most one reduce stage is allowed".into()));
    }
    if windows > 1 {
        return Err(ValidationError("at most one window stage is allowed".into()));
    }
    if windows == 1 && reduces == 0 {
        return Err(ValidationError("a window stage requires a reduce stage".into()));
    }
    if let Some(at) = p.stages.iter().position(|s| matches!(s, Stage::Reduce(..))) {
        if p.stages[at + 1..].iter().any(|s| !matches!(s, Stage::Window(_))) {
            return Err(ValidationError("reduce must be the last stage apart from window".into()));
        }
    }
    for s in &p.stages {
        match s {
            Stage::Reduce(Aggregator::Hist(0), _) => return Err(ValidationError("hist needs at least one bin".into())),
            Stage::Reduce(agg, None) if *agg != Aggregator::Count => {
                return Err(ValidationError(format!("reduce({agg}) requires a lambda")));
            }
            Stage::Window(WindowMode::Count(0)) => return Err(ValidationError("window count must be >= 1".into())),
            Stage::Window(WindowMode::Time(s)) if !(*s > 0.0 && s.is_finite()) => {
                return Err(ValidationError("window seconds must be > 0".into()));
            }
            _ => {}
        }
    }
    Ok(())
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn advance(&mut self) -> Tok {
        let t = self.tokens[self.pos].tok.clone();
        if t != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek() == t {
            self.advance();
            true
        } else {
            false
        }
    }

    fn err_here(&self, message: impl Into<String>) -> ParseError {
        let t = &self.tokens[self.pos];
        ParseError { line: t.line, column: t.column, message: message.into() }
    }

    fn unexpected(&self, wanted: &str) -> ParseError {
        self.err_here(format!("expected {wanted}, found {}", self.peek().describe()))
    }

    fn expect(&mut self, t: Tok, wanted: &str) -> Result<(), ParseError> {
        if self.eat(&t) {
            Ok(())
        } else {
            Err(self.unexpected(wanted))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.advance();
                Ok(s)
            }
            _ => Err(self.unexpected("identifier")),
        }
    }

    fn stage(&mut self) -> Result<Stage, ParseError> {
        let name = self.ident()?;
        self.expect(Tok::LParen, "'('")?;
        let stage = match name.as_str() {
            "map" => Stage::Map(self.lambda()?),
            "where" => Stage::Where(self.lambda()?),
            "reduce" => {
                let agg = self.aggregator()?;
                let lambda = if self.eat(&Tok::Comma) { Some(self.lambda()?) } else { None };
                Stage::Reduce(agg, lambda)
            }
            "window" => Stage::Window(self.window()?),
            other => {
                self.pos -= 2;
                return Err(self.err_here(format!("unknown stage '{other}' (expected map, where, reduce or window)")));
            }
        };
        self.expect(Tok::RParen, "')'")?;
        Ok(stage)
    }

    fn lambda(&mut self) -> Result<Lambda, ParseError> {
        let binder = self.ident()?;
        self.expect(Tok::Arrow, "'->'")?;
        Ok(Lambda { binder, body: self.expr()? })
    }

    fn aggregator(&mut self) -> Result<Aggregator, ParseError> {
        let name = self.ident()?;
        Ok(match name.as_str() {
            "sum" => Aggregator::Sum,
            "avg" => Aggregator::Avg,
            "min" => Aggregator::Min,
            "max" => Aggregator::Max,
            "count" => Aggregator::Count,
            "last" => Aggregator::Last,
            "hist" => {
                self.expect(Tok::LBracket, "'['")?;
                let k = match self.advance() {
                    Tok::Int(k) if k >= 1 => k as usize,
                    _ => {
                        self.pos -= 1;
                        return Err(self.err_here("hist bin count must be a positive integer"));
                    }
                };
                self.expect(Tok::RBracket, "']'")?;
                Aggregator::Hist(k)
            }
            other => {
                self.pos -= 1;
                return Err(self.err_here(format!("unknown aggregator '{other}'")));
            }
        })
    }

    fn window(&mut self) -> Result<WindowMode, ParseError> {
        let name = self.ident()?;
        match name.as_str() {
            "group" => Ok(WindowMode::Group),
            "count" => {
                self.expect(Tok::Assign, "'='")?;
                match self.advance() {
                    Tok::Int(n) if n >= 1 => Ok(WindowMode::Count(n as u64)),
                    _ => {
                        self.pos -= 1;
                        Err(self.err_here("window count must be a positive integer"))
                    }
                }
            }
            "seconds" => {
                self.expect(Tok::Assign, "'='")?;
                let secs = match self.advance() {
                    Tok::Int(n) => n as f64,
                    Tok::Float(f) => f,
                    _ => {
                        self.pos -= 1;
                        return Err(self.err_here("window seconds must be a number"));
                    }
                };
                if secs <= 0.0 {
                    self.pos -= 1;
                    return Err(self.err_here("window seconds must be > 0"));
                }
                Ok(WindowMode::Time(secs))
            }
            other => {
                self.pos -= 1;
                Err(self.err_here(format!("unknown window '{other}' (expected group, count=N or seconds=T)")))
            }
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.err_here("expression nested too deeply"));
        }
        let e = self.or_expr();
        self.depth -= 1;
        e
    }

    fn binary_level(
        &mut self,
        next: fn(&mut Self) -> Result<Expr, ParseError>,
        ops: &[(Tok, BinaryOp)],
    ) -> Result<Expr, ParseError> {
        let mut lhs = next(self)?;
        'outer: loop {
            for (tok, op) in ops {
                if self.eat(tok) {
                    let rhs = next(self)?;
                    lhs = Expr::Binary(*op, Box::new(lhs), Box::new(rhs));
                    continue 'outer;
                }
            }
            return Ok(lhs);
        }
    }

    fn or_expr(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(Self::and_expr, &[(Tok::OrOr, BinaryOp::Or)])
    }

    fn and_expr(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(Self::cmp_expr, &[(Tok::AndAnd, BinaryOp::And)])
    }

    fn cmp_expr(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(
            Self::add_expr,
            &[
                (Tok::EqEq, BinaryOp::Eq),
                (Tok::NotEq, BinaryOp::Ne),
                (Tok::Le, BinaryOp::Le),
                (Tok::Lt, BinaryOp::Lt),
                (Tok::Ge, BinaryOp::Ge),
                (Tok::Gt, BinaryOp::Gt),
            ],
        )
    }

    fn add_expr(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(Self::mul_expr, &[(Tok::Plus, BinaryOp::Add), (Tok::Minus, BinaryOp::Sub)])
    }

    fn mul_expr(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(
            Self::unary_expr,
            &[(Tok::Star, BinaryOp::Mul), (Tok::Slash, BinaryOp::Div), (Tok::Percent, BinaryOp::Rem)],
        )
    }

    fn unary_expr(&mut self) -> Result<Expr, ParseError> {
        let op = match self.peek() {
            Tok::Minus => UnaryOp::Neg,
            Tok::Bang => UnaryOp::Not,
            _ => return self.postfix_expr(),
        };
        self.advance();
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.err_here("expression nested too deeply"));
        }
        let inner = self.unary_expr();
        self.depth -= 1;
        Ok(Expr::Unary(op, Box::new(inner?)))
    }

    fn postfix_expr(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.primary()?;
        loop {
            if self.eat(&Tok::Dot) {
                e = Expr::Field(Box::new(e), self.ident()?);
            } else if self.eat(&Tok::LBracket) {
                let idx = self.expr()?;
                self.expect(Tok::RBracket, "']'")?;
                e = Expr::Index(Box::new(e), Box::new(idx));
            } else {
                return Ok(e);
            }
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        match self.advance() {
            Tok::Int(i) => Ok(Expr::Literal(Value::Int(i))),
            Tok::Float(f) => Ok(Expr::Literal(Value::Float(f))),
            Tok::Str(s) => Ok(Expr::Literal(Value::Str(s))),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Tok::Ident(name) => match name.as_str() {
                "true" => Ok(Expr::Literal(Value::Bool(true))),
                "false" => Ok(Expr::Literal(Value::Bool(false))),
                "null" => Ok(Expr::Literal(Value::Null)),
                _ if self.peek() == &Tok::LParen => {
                    let Some(builtin) = Builtin::from_name(&name) else {
                        self.pos = start;
                        return Err(self.err_here(format!("unknown function '{name}'")));
                    };
                    self.advance();
                    let mut args = Vec::new();
                    if !self.eat(&Tok::RParen) {
                        loop {
                            args.push(self.expr()?);
                            if self.eat(&Tok::RParen) {
                                break;
                            }
                            self.expect(Tok::Comma, "',' or ')'")?;
                        }
                    }
                    if args.len() != builtin.arity() {
                        self.pos = start;
                        return Err(self.err_here(format!(
                            "{}() takes {} argument(s), got {}",
                            builtin.name(),
                            builtin.arity(),
                            args.len()
                        )));
                    }
                    Ok(Expr::Call(builtin, args))
                }
                _ => Ok(Expr::Ident(name)),
            },
            _ => {
                self.pos = start;
                Err(self.unexpected("expression"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_stage_has_no_free_identifiers() {
        let p = parse("map(b -> b.loss)").unwrap();
        assert!(matches!(p.stages.as_slice(), [Stage::Map(_)]));
        assert!(p.free_identifiers().is_empty());
    }

    #[test]
    fn reduce_defaults_to_group_window() {
        let p = parse("reduce(avg, b -> b.duration)").unwrap();
        assert!(matches!(p.stages.as_slice(), [Stage::Reduce(Aggregator::Avg, Some(_))]));
        assert_eq!(p.window(), WindowMode::Group);
    }

    #[test]
    fn stage_after_reduce_is_rejected() {
        let err = parse("map(x -> x.a) | reduce(sum, x -> x) | map(y -> y)").unwrap_err();
        assert!(matches!(err, QueryError::Validation(_)), "{err:?}");
    }

    #[test]
    fn free_identifier_examples() {
        let names = |q: &str| parse(q).unwrap().free_identifiers().into_iter().collect::<Vec<_>>();
        assert_eq!(names("map(b -> b.loss + lr)"), vec!["lr"]);
        assert!(names("where(b -> b.idx % 2 == 0) | reduce(count)").is_empty());
    }

    #[test]
    fn window_placement() {
        assert!(parse("reduce(sum, b -> b.n) | window(count=3)").is_ok());
        assert!(matches!(parse("map(b -> b) | window(count=3)"), Err(QueryError::Validation(_))));
        assert!(matches!(
            parse("reduce(sum, b -> b) | window(count=3) | window(group)"),
            Err(QueryError::Validation(_))
        ));
        assert!(matches!(parse("reduce(sum, b -> b) | window(count=0)"), Err(QueryError::Parse(_))));
        assert!(matches!(parse("reduce(sum, b -> b) | window(seconds=0.5)").unwrap().window(), WindowMode::Time(s) if s == 0.5));
    }

    #[test]
    fn lambda_requirements() {
        assert!(parse("reduce(count)").is_ok());
        assert!(matches!(parse("reduce(sum)"), Err(QueryError::Validation(_))));
        assert!(parse("reduce(hist[8], b -> b.x)").is_ok());
        assert!(parse("reduce(hist[0], b -> b.x)").is_err());
    }

    #[test]
    fn syntax_errors_carry_position() {
        let QueryError::Parse(e) = parse("map(b -> ").unwrap_err() else { panic!() };
        assert_eq!((e.line, e.column), (1, 10));
        let QueryError::Parse(e) = parse("map(b ->\n b.x +)").unwrap_err() else { panic!() };
        assert_eq!(e.line, 2);
        assert!(parse("map(b -> sqrt(1, 2))").is_err());
        assert!(parse("map(b -> foo(1))").is_err());
        assert!(parse("frob(b -> b)").is_err());
    }

    #[test]
    fn precedence() {
        let e = parse_expr("1 + 2 * 3 < 4 && !x || y").unwrap();
        assert_eq!(e.to_string(), "((((1 + (2 * 3)) < 4) && (!x)) || y)");
        assert_eq!(parse_expr("-a.b[0]").unwrap().to_string(), "(-a.b[0])");
    }

    #[test]
    fn needed_fields_follow_binder_scope() {
        use super::super::ast::FieldNeeds;
        let fields = |q: &str| match parse(q).unwrap().needed_fields() {
            FieldNeeds::Fields(f) => Some(f.into_iter().collect::<Vec<_>>()),
            FieldNeeds::All => None,
        };
        assert_eq!(fields("map(b -> b.loss)").unwrap(), vec!["loss"]);
        assert_eq!(fields("where(b -> b.i > 0) | map(b -> b.loss + lr) | map(x -> x.z)").unwrap(), vec!["i", "loss", "lr"]);
        assert_eq!(fields("reduce(count)").unwrap(), Vec::<String>::new());
        assert_eq!(fields("map(b -> b)"), None);
    }
}
