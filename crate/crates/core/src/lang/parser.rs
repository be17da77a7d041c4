use super::ast::*;
use super::lexer::{lex, Tok, Token};
use super::ParseError;

/// Parses program text into an AST.
pub fn parse(src: &str) -> Result<SpecProgram, ParseError> {
    let toks = lex(src)?;
    Parser { toks, i: 0 }.program()
}

struct Parser {
    toks: Vec<Token>,
    i: usize,
}

type PResult<T> = Result<T, ParseError>;

fn kw_eq(s: &str, kw: &str) -> bool {
    s.eq_ignore_ascii_case(kw)
}

const STAT_KEYWORDS: [(&str, StatKind); 4] = [
    ("E", StatKind::Expectation),
    ("VAR", StatKind::Variance),
    ("STD", StatKind::StdDev),
    ("ENTROPY", StatKind::Entropy),
];

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.i].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        let j = (self.i + k).min(self.toks.len() - 1);
        &self.toks[j].tok
    }

    fn span(&self) -> Span {
        self.toks[self.i].span
    }

    fn prev_span(&self) -> Span {
        self.toks[self.i.saturating_sub(1)].span
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.i].clone();
        if self.i + 1 < self.toks.len() {
            self.i += 1;
        }
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> PResult<T> {
        Err(ParseError::Syntax {
            message: message.into(),
            span: self.span(),
        })
    }

    fn expected<T>(&self, what: &str) -> PResult<T> {
        self.err(format!("expected {what}, found {}", self.peek().describe()))
    }

    fn at_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if kw_eq(s, kw))
    }

    fn at_kw_at(&self, k: usize, kw: &str) -> bool {
        matches!(self.peek_at(k), Tok::Ident(s) if kw_eq(s, kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.at_kw(kw) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> PResult<Span> {
        if self.at_kw(kw) {
            Ok(self.bump().span)
        } else {
            self.expected(&format!("`{kw}`"))
        }
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek() == t {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, t: Tok, what: &str) -> PResult<Span> {
        if self.peek() == &t {
            Ok(self.bump().span)
        } else {
            self.expected(what)
        }
    }

    fn program(mut self) -> PResult<SpecProgram> {
        self.expect_kw("SYNTHESIZE")?;
        self.expect(Tok::Colon, "`:`")?;
        let source = self.name("dataset name")?;
        self.expect(Tok::Semi, "`;`")?;
        let mut commands: Vec<Command> = Vec::new();
        loop {
            if self.at_kw("END") {
                self.bump();
                self.expect(Tok::Semi, "`;` after END")?;
                if self.peek() != &Tok::Eof {
                    return self.err(format!("unexpected {} after END;", self.peek().describe()));
                }
                break;
            }
            if self.peek() == &Tok::Eof {
                return Err(ParseError::MissingEnd { span: self.span() });
            }
            let cmd = self.command()?;
            if matches!(cmd.kind, CommandKind::DifferentialPrivacy { .. }) {
                if commands.iter().any(|c| matches!(c.kind, CommandKind::DifferentialPrivacy { .. })) {
                    return Err(ParseError::DuplicateDp { span: cmd.span });
                }
                if !commands.is_empty() {
                    return Err(ParseError::MisplacedDp { span: cmd.span });
                }
            }
            commands.push(cmd);
        }
        Ok(SpecProgram { source, commands })
    }

    /// Identifier, joining directly adjacent `-` pieces (`Never-married`).
    fn name(&mut self, what: &str) -> PResult<String> {
        let Tok::Ident(first) = self.peek().clone() else {
            return self.expected(what);
        };
        self.bump();
        let mut out = first;
        loop {
            let end = self.prev_span().end.offset;
            let starts_at = |k: usize, at: usize| self.toks.get(self.i + k).is_some_and(|t| t.span.start.offset == at);
            if self.peek() != &Tok::Minus || !starts_at(0, end) || !starts_at(1, end + 1) {
                break;
            }
            let piece = match self.peek_at(1) {
                Tok::Ident(s) => s.clone(),
                Tok::Number(_, t) => t.clone(),
                _ => break,
            };
            out.push('-');
            out.push_str(&piece);
            self.bump();
            self.bump();
        }
        Ok(out)
    }

    fn number(&mut self, what: &str) -> PResult<Number> {
        let neg = self.eat(&Tok::Minus);
        match self.peek().clone() {
            Tok::Number(v, t) => {
                self.bump();
                Ok(if neg {
                    Number {
                        value: -v,
                        text: format!("-{t}"),
                    }
                } else {
                    Number { value: v, text: t }
                })
            }
            _ => self.expected(what),
        }
    }

    fn command(&mut self) -> PResult<Command> {
        let start = self.span();
        let action = if self.eat_kw("MAXIMIZE") {
            Action::Maximize
        } else if self.eat_kw("MINIMIZE") {
            Action::Minimize
        } else if self.eat_kw("ENFORCE") {
            Action::Enforce
        } else if self.eat_kw("ENSURE") {
            Action::Ensure
        } else {
            return self.expected("an action (MAXIMIZE, MINIMIZE, ENFORCE, ENSURE) or END");
        };
        self.expect(Tok::Colon, "`:` after action")?;

        #[derive(PartialEq)]
        enum Ty {
            Dp,
            Row,
            Imp,
            Stat,
            Fair,
            Util,
        }
        let ty = if self.at_kw("DIFFERENTIAL") && self.at_kw_at(1, "PRIVACY") {
            self.bump();
            self.bump();
            Ty::Dp
        } else if (self.at_kw("ROW") || self.at_kw("LINE")) && self.at_kw_at(1, "CONSTRAINT") {
            self.bump();
            self.bump();
            Ty::Row
        } else if self.eat_kw("IMPLICATION") {
            Ty::Imp
        } else if self.eat_kw("STATISTICAL") {
            Ty::Stat
        } else if self.eat_kw("FAIRNESS") {
            Ty::Fair
        } else if self.eat_kw("UTILITY") || self.eat_kw("DOWNSTREAM") {
            Ty::Util
        } else {
            return self.expected("a command type (DIFFERENTIAL PRIVACY, ROW CONSTRAINT, IMPLICATION, STATISTICAL, FAIRNESS, UTILITY)");
        };

        let mut weight = self.param()?;
        self.expect(Tok::Colon, "`:` after command type")?;
        if weight.is_none() && self.at_kw("PARAM") && matches!(self.peek_at(1), Tok::Number(..) | Tok::Assign) {
            weight = self.param()?;
            self.expect(Tok::Colon, "`:` after PARAM")?;
        }
        if ty == Ty::Dp && weight.is_some() {
            return self.err("PARAM is not allowed on DIFFERENTIAL PRIVACY");
        }

        let kind = match ty {
            Ty::Dp => self.dp_args()?,
            Ty::Row => CommandKind::RowConstraint(self.row_or()?),
            Ty::Imp => {
                let lhs = self.row_or()?;
                self.expect_kw("IMPLIES")?;
                let rhs = self.row_or()?;
                CommandKind::Implication { lhs, rhs }
            }
            Ty::Stat => {
                let e = self.stat_or()?;
                check_stat(&e, true)?;
                CommandKind::Statistical(e)
            }
            Ty::Fair => {
                let metric = if self.eat_kw("DEMOGRAPHIC_PARITY") {
                    FairnessMetric::DemographicParity
                } else if self.eat_kw("EQUALIZED_ODDS") {
                    FairnessMetric::EqualizedOdds
                } else if self.eat_kw("EQUALITY_OF_OPPORTUNITY") {
                    FairnessMetric::EqualityOfOpportunity
                } else {
                    return self.expected("DEMOGRAPHIC_PARITY, EQUALIZED_ODDS or EQUALITY_OF_OPPORTUNITY");
                };
                CommandKind::Fairness {
                    metric,
                    args: self.call_args()?,
                }
            }
            Ty::Util => {
                self.expect_kw("DOWNSTREAM_ACCURACY")?;
                CommandKind::Utility { args: self.call_args()? }
            }
        };
        let end = self.expect(Tok::Semi, "`;` at end of command")?;
        Ok(Command {
            action,
            weight,
            kind,
            span: start.join(end),
        })
    }

    fn param(&mut self) -> PResult<Option<Number>> {
        if !self.eat_kw("PARAM") {
            return Ok(None);
        }
        self.eat(&Tok::Assign);
        Ok(Some(self.number("a number after PARAM")?))
    }

    fn dp_args(&mut self) -> PResult<CommandKind> {
        let (mut epsilon, mut delta) = (None, None);
        loop {
            let span = self.span();
            let slot = if self.eat_kw("EPSILON") {
                &mut epsilon
            } else if self.eat_kw("DELTA") {
                &mut delta
            } else {
                return self.expected("EPSILON or DELTA");
            };
            self.expect(Tok::Assign, "`=`")?;
            let value = if self.at_kw("INF") || self.at_kw("INFINITY") {
                let t = self.bump();
                let Tok::Ident(text) = t.tok else { unreachable!() };
                Number {
                    value: f64::INFINITY,
                    text,
                }
            } else {
                self.number("a number")?
            };
            if slot.replace(value).is_some() {
                return Err(ParseError::Syntax {
                    message: "repeated privacy parameter".into(),
                    span,
                });
            }
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        match (epsilon, delta) {
            (Some(epsilon), Some(delta)) => Ok(CommandKind::DifferentialPrivacy { epsilon, delta }),
            _ => self.err("DIFFERENTIAL PRIVACY needs both EPSILON and DELTA"),
        }
    }

    fn call_args(&mut self) -> PResult<Vec<Arg>> {
        self.expect(Tok::LParen, "`(`")?;
        let mut args = Vec::new();
        if self.eat(&Tok::RParen) {
            return Ok(args);
        }
        loop {
            let start = self.span();
            let name = self.name("argument name")?;
            self.expect(Tok::Assign, "`=`")?;
            let value = match self.peek().clone() {
                Tok::LBrace => ArgValue::List(self.literal_set()?),
                Tok::Number(..) | Tok::Minus => ArgValue::Number(self.number("a number")?),
                Tok::Ident(_) => ArgValue::Ident(self.name("a value")?),
                Tok::Str(s) => {
                    self.bump();
                    ArgValue::Ident(s)
                }
                _ => return self.expected("an argument value"),
            };
            args.push(Arg {
                name,
                value,
                span: start.join(self.prev_span()),
            });
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        self.expect(Tok::RParen, "`)`")?;
        Ok(args)
    }

    fn literal(&mut self) -> PResult<Literal> {
        match self.peek().clone() {
            Tok::Number(..) | Tok::Minus => Ok(Literal::Number(self.number("a literal")?)),
            Tok::Str(s) => {
                self.bump();
                Ok(Literal::Str(s))
            }
            Tok::Ident(_) => Ok(Literal::Ident(self.name("a literal")?)),
            _ => self.expected("a literal value"),
        }
    }

    fn literal_set(&mut self) -> PResult<Vec<Literal>> {
        self.expect(Tok::LBrace, "`{`")?;
        let mut out = vec![self.literal()?];
        while self.eat(&Tok::Comma) {
            out.push(self.literal()?);
        }
        self.expect(Tok::RBrace, "`}`")?;
        Ok(out)
    }

    fn row_or(&mut self) -> PResult<RowExpr> {
        let mut e = self.row_and()?;
        while self.eat_kw("OR") {
            let r = self.row_and()?;
            e = RowExpr::Or(Box::new(e), Box::new(r));
        }
        Ok(e)
    }

    fn row_and(&mut self) -> PResult<RowExpr> {
        let mut e = self.row_atom()?;
        while self.eat_kw("AND") {
            let r = self.row_atom()?;
            e = RowExpr::And(Box::new(e), Box::new(r));
        }
        Ok(e)
    }

    fn cmp_op(&mut self) -> Option<CmpOp> {
        let op = match self.peek() {
            Tok::EqEq | Tok::Assign => CmpOp::Eq,
            Tok::NotEq => CmpOp::Ne,
            Tok::Lt => CmpOp::Lt,
            Tok::Le => CmpOp::Le,
            Tok::Gt => CmpOp::Gt,
            Tok::Ge => CmpOp::Ge,
            _ => return None,
        };
        self.bump();
        Some(op)
    }

    fn row_atom(&mut self) -> PResult<RowExpr> {
        if self.eat(&Tok::LParen) {
            let e = self.row_or()?;
            self.expect(Tok::RParen, "`)`")?;
            return Ok(e);
        }
        let start = self.span();
        let feature = self.name("a feature name")?;
        if let Some(op) = self.cmp_op() {
            let value = self.literal()?;
            return Ok(RowExpr::Compare {
                feature,
                op,
                value,
                span: start.join(self.prev_span()),
            });
        }
        let negated = if self.at_kw("NOT") && self.at_kw_at(1, "IN") {
            self.bump();
            true
        } else {
            false
        };
        if self.eat_kw("IN") {
            let values = self.literal_set()?;
            return Ok(RowExpr::InSet {
                feature,
                values,
                negated,
                span: start.join(self.prev_span()),
            });
        }
        self.expected("a comparison operator, IN or NOT IN")
    }

    fn stat_or(&mut self) -> PResult<StatExpr> {
        let mut e = self.stat_and()?;
        while self.eat_kw("OR") {
            let r = self.stat_and()?;
            e = StatExpr::Logic(LogicOp::Or, Box::new(e), Box::new(r));
        }
        Ok(e)
    }

    fn stat_and(&mut self) -> PResult<StatExpr> {
        let mut e = self.stat_rel()?;
        while self.eat_kw("AND") {
            let r = self.stat_rel()?;
            e = StatExpr::Logic(LogicOp::And, Box::new(e), Box::new(r));
        }
        Ok(e)
    }

    fn stat_rel(&mut self) -> PResult<StatExpr> {
        let lhs = self.stat_add()?;
        match self.cmp_op() {
            Some(op) => {
                let rhs = self.stat_add()?;
                Ok(StatExpr::Rel(op, Box::new(lhs), Box::new(rhs)))
            }
            None => Ok(lhs),
        }
    }

    fn stat_add(&mut self) -> PResult<StatExpr> {
        let mut e = self.stat_mul()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => ArithOp::Add,
                Tok::Minus => ArithOp::Sub,
                _ => return Ok(e),
            };
            self.bump();
            let r = self.stat_mul()?;
            e = StatExpr::Arith(op, Box::new(e), Box::new(r));
        }
    }

    fn stat_mul(&mut self) -> PResult<StatExpr> {
        let mut e = self.stat_unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => ArithOp::Mul,
                Tok::Slash => ArithOp::Div,
                _ => return Ok(e),
            };
            self.bump();
            let r = self.stat_unary()?;
            e = StatExpr::Arith(op, Box::new(e), Box::new(r));
        }
    }

    fn stat_unary(&mut self) -> PResult<StatExpr> {
        if self.eat(&Tok::Minus) {
            return Ok(StatExpr::Neg(Box::new(self.stat_unary()?)));
        }
        self.stat_primary()
    }

    fn stat_primary(&mut self) -> PResult<StatExpr> {
        let start = self.span();
        match self.peek().clone() {
            Tok::Number(v, t) => {
                self.bump();
                Ok(StatExpr::Const(Number { value: v, text: t }, start))
            }
            Tok::LParen => {
                self.bump();
                let e = self.stat_or()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(s) => {
                let Some(kind) = STAT_KEYWORDS.iter().find(|(k, _)| kw_eq(&s, k)).map(|(_, k)| *k) else {
                    return self.expected("a statistical operator (E, VAR, STD, ENTROPY), a number or `(`");
                };
                self.bump();
                self.expect(Tok::LBracket, "`[`")?;
                let term = self.term_add()?;
                let condition = if self.eat(&Tok::Pipe) { Some(self.row_or()?) } else { None };
                let end = self.expect(Tok::RBracket, "`]`")?;
                Ok(StatExpr::Op {
                    kind,
                    term,
                    condition,
                    span: start.join(end),
                })
            }
            _ => self.expected("a statistical operator, a number or `(`"),
        }
    }

    fn term_add(&mut self) -> PResult<FeatureTerm> {
        let mut e = self.term_mul()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => ArithOp::Add,
                Tok::Minus => ArithOp::Sub,
                _ => return Ok(e),
            };
            self.bump();
            let r = self.term_mul()?;
            e = FeatureTerm::Binary(op, Box::new(e), Box::new(r));
        }
    }

    fn term_mul(&mut self) -> PResult<FeatureTerm> {
        let mut e = self.term_unary()?;
        while self.eat(&Tok::Star) {
            let r = self.term_unary()?;
            e = FeatureTerm::Binary(ArithOp::Mul, Box::new(e), Box::new(r));
        }
        Ok(e)
    }

    fn term_unary(&mut self) -> PResult<FeatureTerm> {
        if self.eat(&Tok::Minus) {
            return Ok(FeatureTerm::Neg(Box::new(self.term_unary()?)));
        }
        let start = self.span();
        match self.peek().clone() {
            Tok::Number(v, t) => {
                self.bump();
                Ok(FeatureTerm::Const(Number { value: v, text: t }))
            }
            Tok::Ident(s) => {
                self.bump();
                Ok(FeatureTerm::Feature(s, start))
            }
            Tok::LParen => {
                self.bump();
                let e = self.term_add()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            _ => self.expected("a feature, a number or `(`"),
        }
    }
}

fn stat_span(e: &StatExpr) -> Span {
    match e {
        StatExpr::Op { span, .. } | StatExpr::Const(_, span) => *span,
        StatExpr::Neg(a) => stat_span(a),
        StatExpr::Arith(_, a, b) | StatExpr::Rel(_, a, b) | StatExpr::Logic(_, a, b) => stat_span(a).join(stat_span(b)),
    }
}

/// Rejects ill-typed mixes of arithmetic and boolean nodes.
fn check_stat(e: &StatExpr, top: bool) -> PResult<()> {
    let fail = |message: &str| {
        Err(ParseError::Syntax {
            message: message.into(),
            span: stat_span(e),
        })
    };
    if top && !e.is_boolean() {
        return fail("a statistical command must be a comparison or a logical combination of comparisons");
    }
    match e {
        StatExpr::Op { .. } | StatExpr::Const(..) => Ok(()),
        StatExpr::Neg(a) => {
            if a.is_boolean() {
                return fail("cannot negate a comparison arithmetically");
            }
            check_stat(a, false)
        }
        StatExpr::Arith(_, a, b) | StatExpr::Rel(_, a, b) => {
            if a.is_boolean() || b.is_boolean() {
                return fail("operands of arithmetic and comparisons must be numeric");
            }
            check_stat(a, false)?;
            check_stat(b, false)
        }
        StatExpr::Logic(_, a, b) => {
            if !a.is_boolean() || !b.is_boolean() {
                return fail("operands of AND/OR must be comparisons");
            }
            check_stat(a, false)?;
            check_stat(b, false)
        }
    }
}
