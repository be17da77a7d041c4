use std::fmt;

/// 1-based source position.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
    pub offset: usize,
}

/// Source range of a node. Spans never take part in AST equality, so a
/// reparsed program compares equal to the original regardless of layout.
#[derive(Debug, Clone, Copy, Default)]
pub struct Span {
    pub start: Pos,
    pub end: Pos,
}

impl PartialEq for Span {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.start.line, self.start.col)
    }
}

impl Span {
    pub fn join(self, other: Span) -> Span {
        Span {
            start: self.start,
            end: other.end,
        }
    }
}

/// A numeric literal together with its source spelling.
#[derive(Debug, Clone)]
pub struct Number {
    pub value: f64,
    pub text: String,
}

impl Number {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            text: format_number(value),
        }
    }
}

impl PartialEq for Number {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}

pub(crate) fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Maximize,
    Minimize,
    Enforce,
    Ensure,
}

impl Action {
    pub fn keyword(self) -> &'static str {
        match self {
            Action::Maximize => "MAXIMIZE",
            Action::Minimize => "MINIMIZE",
            Action::Enforce => "ENFORCE",
            Action::Ensure => "ENSURE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub fn negated(self) -> CmpOp {
        match self {
            CmpOp::Eq => CmpOp::Ne,
            CmpOp::Ne => CmpOp::Eq,
            CmpOp::Lt => CmpOp::Ge,
            CmpOp::Le => CmpOp::Gt,
            CmpOp::Gt => CmpOp::Le,
            CmpOp::Ge => CmpOp::Lt,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Ident(String),
    Str(String),
    Number(Number),
}

impl Literal {
    /// Text used to match category names.
    pub fn text(&self) -> &str {
        match self {
            Literal::Ident(s) | Literal::Str(s) => s,
            Literal::Number(n) => &n.text,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowExpr {
    Compare {
        feature: String,
        op: CmpOp,
        value: Literal,
        span: Span,
    },
    InSet {
        feature: String,
        values: Vec<Literal>,
        negated: bool,
        span: Span,
    },
    And(Box<RowExpr>, Box<RowExpr>),
    Or(Box<RowExpr>, Box<RowExpr>),
}

impl RowExpr {
    pub fn span(&self) -> Span {
        match self {
            RowExpr::Compare { span, .. } | RowExpr::InSet { span, .. } => *span,
            RowExpr::And(a, b) | RowExpr::Or(a, b) => a.span().join(b.span()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatKind {
    Expectation,
    Variance,
    StdDev,
    Entropy,
}

impl StatKind {
    pub fn keyword(self) -> &'static str {
        match self {
            StatKind::Expectation => "E",
            StatKind::Variance => "VAR",
            StatKind::StdDev => "STD",
            StatKind::Entropy => "ENTROPY",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ArithOp {
    pub fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "*",
            ArithOp::Div => "/",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogicOp {
    And,
    Or,
}

/// Function of features inside a statistical operator, e.g. `sex * salary`.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureTerm {
    Feature(String, Span),
    Const(Number),
    Neg(Box<FeatureTerm>),
    Binary(ArithOp, Box<FeatureTerm>, Box<FeatureTerm>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StatExpr {
    Op {
        kind: StatKind,
        term: FeatureTerm,
        condition: Option<RowExpr>,
        span: Span,
    },
    Const(Number, Span),
    Neg(Box<StatExpr>),
    Arith(ArithOp, Box<StatExpr>, Box<StatExpr>),
    Rel(CmpOp, Box<StatExpr>, Box<StatExpr>),
    Logic(LogicOp, Box<StatExpr>, Box<StatExpr>),
}

impl StatExpr {
    pub fn is_boolean(&self) -> bool {
        matches!(self, StatExpr::Rel(..) | StatExpr::Logic(..))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FairnessMetric {
    DemographicParity,
    EqualizedOdds,
    EqualityOfOpportunity,
}

impl FairnessMetric {
    pub fn keyword(self) -> &'static str {
        match self {
            FairnessMetric::DemographicParity => "DEMOGRAPHIC_PARITY",
            FairnessMetric::EqualizedOdds => "EQUALIZED_ODDS",
            FairnessMetric::EqualityOfOpportunity => "EQUALITY_OF_OPPORTUNITY",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArgValue {
    Ident(String),
    Number(Number),
    List(Vec<Literal>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arg {
    pub name: String,
    pub value: ArgValue,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CommandKind {
    DifferentialPrivacy { epsilon: Number, delta: Number },
    RowConstraint(RowExpr),
    Implication { lhs: RowExpr, rhs: RowExpr },
    Statistical(StatExpr),
    Fairness { metric: FairnessMetric, args: Vec<Arg> },
    Utility { args: Vec<Arg> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub action: Action,
    pub weight: Option<Number>,
    pub kind: CommandKind,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecProgram {
    pub source: String,
    pub commands: Vec<Command>,
}

impl SpecProgram {
    pub fn dp(&self) -> Option<(f64, f64)> {
        self.commands.iter().find_map(|c| match &c.kind {
            CommandKind::DifferentialPrivacy { epsilon, delta } => Some((epsilon.value, delta.value)),
            _ => None,
        })
    }
}
