use std::collections::BTreeSet;

use thiserror::Error;

use super::ast::*;
use super::format::format_command;
use crate::compile::SurrogateConfig;
use crate::schema::{ColumnKind, Role, Schema};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidateError {
    #[error("{span}: unknown feature `{name}`")]
    UnknownFeature { name: String, span: Span },
    #[error("{span}: `{value}` is not in the domain of `{feature}`")]
    UnknownCategory { feature: String, value: String, span: Span },
    #[error("{span}: {message}")]
    TypeMismatch { message: String, span: Span },
    #[error("{span}: threshold {threshold} falls inside a bin of `{feature}`; use a bin edge")]
    BinBoundary { feature: String, threshold: f64, span: Span },
    #[error("{span}: fairness needs a binary protected column (name it with protected=... or mark one in the schema)")]
    ProtectedColumnMissing { span: Span },
    #[error("{span}: target `{feature}` must be binary")]
    NonBinaryTarget { feature: String, span: Span },
    #[error("{span}: {action} is not a valid action for {kind}")]
    InvalidAction { action: String, kind: String, span: Span },
    #[error("{span}: {message}")]
    InvalidArgument { message: String, span: Span },
}

/// A row predicate resolved against a schema: every leaf is a column and
/// the set of its category/bin indices that satisfy the leaf.
#[derive(Debug, Clone, PartialEq)]
pub enum Pred {
    Leaf { column: usize, allowed: Vec<bool> },
    And(Box<Pred>, Box<Pred>),
    Or(Box<Pred>, Box<Pred>),
}

impl Pred {
    /// Negation pushed to the leaves.
    pub fn negate(&self) -> Pred {
        match self {
            Pred::Leaf { column, allowed } => Pred::Leaf {
                column: *column,
                allowed: allowed.iter().map(|a| !a).collect(),
            },
            Pred::And(a, b) => Pred::Or(Box::new(a.negate()), Box::new(b.negate())),
            Pred::Or(a, b) => Pred::And(Box::new(a.negate()), Box::new(b.negate())),
        }
    }

    /// Truth value on a row given as per-column codes.
    pub fn eval(&self, codes: &[usize]) -> bool {
        match self {
            Pred::Leaf { column, allowed } => allowed[codes[*column]],
            Pred::And(a, b) => a.eval(codes) && b.eval(codes),
            Pred::Or(a, b) => a.eval(codes) || b.eval(codes),
        }
    }

    pub fn columns(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        self.collect_columns(&mut out);
        out
    }

    fn collect_columns(&self, out: &mut BTreeSet<usize>) {
        match self {
            Pred::Leaf { column, .. } => {
                out.insert(*column);
            }
            Pred::And(a, b) | Pred::Or(a, b) => {
                a.collect_columns(out);
                b.collect_columns(out);
            }
        }
    }
}

/// Statistical expression with operators resolved to joint marginals.
#[derive(Debug, Clone, PartialEq)]
pub enum TypedStat {
    Op {
        kind: StatKind,
        /// Ascending distinct columns the term depends on.
        features: Vec<usize>,
        /// The term evaluated on each cell of the joint domain, row-major.
        values: Vec<f64>,
        condition: Option<Pred>,
    },
    Const(f64),
    Neg(Box<TypedStat>),
    Arith(ArithOp, Box<TypedStat>, Box<TypedStat>),
    Rel(CmpOp, Box<TypedStat>, Box<TypedStat>),
    Logic(LogicOp, Box<TypedStat>, Box<TypedStat>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamSpec {
    /// `None` for a utility objective.
    pub metric: Option<FairnessMetric>,
    pub target: usize,
    pub protected: Option<usize>,
    pub features: Vec<usize>,
    pub surrogate: SurrogateConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TypedKind {
    Row(Pred),
    Implication { lhs: Pred, rhs: Pred },
    Statistical(TypedStat),
    Downstream(DownstreamSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypedSpec {
    /// `spec1`, `spec2`, ... in program order, skipping the privacy command.
    pub name: String,
    pub action: Action,
    pub weight: Option<f64>,
    pub kind: TypedKind,
    /// Canonical text of the originating command.
    pub text: String,
}

impl TypedSpec {
    /// Row constraints and implications can be checked row by row.
    pub fn is_row_level(&self) -> bool {
        matches!(self.kind, TypedKind::Row(_) | TypedKind::Implication { .. })
    }

    /// Per-row satisfaction for row-level specs; `None` otherwise.
    pub fn row_ok(&self, codes: &[usize]) -> Option<bool> {
        match &self.kind {
            TypedKind::Row(p) => Some(p.eval(codes)),
            TypedKind::Implication { lhs, rhs } => Some(!lhs.eval(codes) || rhs.eval(codes)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypedProgram {
    pub source: String,
    pub dp: Option<(f64, f64)>,
    pub specs: Vec<TypedSpec>,
}

type VResult<T> = Result<T, ValidateError>;

/// Resolves names, literals and thresholds against `schema`.
pub fn validate(program: &SpecProgram, schema: &Schema) -> VResult<TypedProgram> {
    let mut specs = Vec::new();
    let mut dp = None;
    for cmd in &program.commands {
        let bad_action = |kind: &str| ValidateError::InvalidAction {
            action: cmd.action.keyword().into(),
            kind: kind.into(),
            span: cmd.span,
        };
        let kind = match &cmd.kind {
            CommandKind::DifferentialPrivacy { epsilon, delta } => {
                if cmd.action != Action::Ensure {
                    return Err(bad_action("DIFFERENTIAL PRIVACY"));
                }
                if !(epsilon.value > 0.0) || !(delta.value > 0.0 && delta.value < 1.0) {
                    return Err(ValidateError::InvalidArgument {
                        message: "EPSILON must be positive and DELTA must lie in (0, 1)".into(),
                        span: cmd.span,
                    });
                }
                dp = Some((epsilon.value, delta.value));
                continue;
            }
            CommandKind::RowConstraint(e) => {
                require_constraint_action(cmd, "ROW CONSTRAINT")?;
                TypedKind::Row(resolve_row(e, schema)?)
            }
            CommandKind::Implication { lhs, rhs } => {
                require_constraint_action(cmd, "IMPLICATION")?;
                TypedKind::Implication {
                    lhs: resolve_row(lhs, schema)?,
                    rhs: resolve_row(rhs, schema)?,
                }
            }
            CommandKind::Statistical(e) => {
                require_constraint_action(cmd, "STATISTICAL")?;
                TypedKind::Statistical(resolve_stat(e, schema)?)
            }
            CommandKind::Fairness { metric, args } => {
                if cmd.action == Action::Ensure {
                    return Err(bad_action("FAIRNESS"));
                }
                TypedKind::Downstream(resolve_downstream(Some(*metric), args, schema, cmd.span)?)
            }
            CommandKind::Utility { args } => {
                if cmd.action == Action::Ensure {
                    return Err(bad_action("UTILITY"));
                }
                TypedKind::Downstream(resolve_downstream(None, args, schema, cmd.span)?)
            }
        };
        if let Some(w) = &cmd.weight {
            if !(w.value >= 0.0) || !w.value.is_finite() {
                return Err(ValidateError::InvalidArgument {
                    message: "PARAM must be a finite non-negative weight".into(),
                    span: cmd.span,
                });
            }
        }
        specs.push(TypedSpec {
            name: format!("spec{}", specs.len() + 1),
            action: cmd.action,
            weight: cmd.weight.as_ref().map(|w| w.value),
            kind,
            text: format_command(cmd),
        });
    }
    Ok(TypedProgram {
        source: program.source.clone(),
        dp,
        specs,
    })
}

fn require_constraint_action(cmd: &Command, kind: &str) -> VResult<()> {
    match cmd.action {
        Action::Enforce | Action::Ensure => Ok(()),
        other => Err(ValidateError::InvalidAction {
            action: other.keyword().into(),
            kind: kind.into(),
            span: cmd.span,
        }),
    }
}

fn column(schema: &Schema, name: &str, span: Span) -> VResult<usize> {
    schema.column_index(name).ok_or_else(|| ValidateError::UnknownFeature {
        name: name.to_string(),
        span,
    })
}

/// Bins of a binned column that hold the numeric value `v`.
fn bin_of(schema: &Schema, col: usize, v: f64, span: Span) -> VResult<usize> {
    let spec = schema.column(col);
    let ColumnKind::Binned(edges) = &spec.kind else { unreachable!() };
    crate::schema::bin_index(edges, v).ok_or_else(|| ValidateError::UnknownCategory {
        feature: spec.name.clone(),
        value: super::ast::format_number(v),
        span,
    })
}

fn category_of(schema: &Schema, col: usize, lit: &Literal, span: Span) -> VResult<usize> {
    let spec = schema.column(col);
    let ColumnKind::Categorical(cats) = &spec.kind else {
        unreachable!()
    };
    let text = lit.text();
    if let Some(i) = cats.iter().position(|c| c == text) {
        return Ok(i);
    }
    // tolerate `Never_married` for a `Never-married` category and vice versa
    let norm = |s: &str| s.replace('-', "_");
    cats.iter()
        .position(|c| norm(c) == norm(text))
        .ok_or_else(|| ValidateError::UnknownCategory {
            feature: spec.name.clone(),
            value: text.to_string(),
            span,
        })
}

fn numeric(lit: &Literal, feature: &str, span: Span) -> VResult<f64> {
    match lit {
        Literal::Number(n) => Ok(n.value),
        other => Err(ValidateError::TypeMismatch {
            message: format!("`{feature}` is numeric; `{}` is not a number", other.text()),
            span,
        }),
    }
}

fn resolve_row(e: &RowExpr, schema: &Schema) -> VResult<Pred> {
    match e {
        RowExpr::And(a, b) => Ok(Pred::And(Box::new(resolve_row(a, schema)?), Box::new(resolve_row(b, schema)?))),
        RowExpr::Or(a, b) => Ok(Pred::Or(Box::new(resolve_row(a, schema)?), Box::new(resolve_row(b, schema)?))),
        RowExpr::Compare { feature, op, value, span } => {
            let col = column(schema, feature, *span)?;
            let spec = schema.column(col);
            let n = spec.domain_size();
            let allowed = match &spec.kind {
                ColumnKind::Categorical(_) => {
                    if !matches!(op, CmpOp::Eq | CmpOp::Ne) {
                        return Err(ValidateError::TypeMismatch {
                            message: format!("order comparison `{}` on categorical feature `{feature}`", op.symbol()),
                            span: *span,
                        });
                    }
                    let idx = category_of(schema, col, value, *span)?;
                    (0..n).map(|i| (i == idx) == (*op == CmpOp::Eq)).collect()
                }
                ColumnKind::Binned(edges) => {
                    let t = numeric(value, feature, *span)?;
                    match op {
                        CmpOp::Eq | CmpOp::Ne => {
                            let idx = bin_of(schema, col, t, *span)?;
                            (0..n).map(|i| (i == idx) == (*op == CmpOp::Eq)).collect()
                        }
                        _ => {
                            let first = edges[0];
                            let last = edges[edges.len() - 1];
                            if t > first && t < last && !edges.contains(&t) {
                                return Err(ValidateError::BinBoundary {
                                    feature: feature.clone(),
                                    threshold: t,
                                    span: *span,
                                });
                            }
                            (0..n)
                                .map(|i| match op {
                                    CmpOp::Gt | CmpOp::Ge => edges[i] >= t,
                                    _ => edges[i + 1] <= t,
                                })
                                .collect()
                        }
                    }
                }
            };
            Ok(Pred::Leaf { column: col, allowed })
        }
        RowExpr::InSet {
            feature,
            values,
            negated,
            span,
        } => {
            let col = column(schema, feature, *span)?;
            let spec = schema.column(col);
            let mut allowed = vec![false; spec.domain_size()];
            for v in values {
                let idx = match &spec.kind {
                    ColumnKind::Categorical(_) => category_of(schema, col, v, *span)?,
                    ColumnKind::Binned(_) => bin_of(schema, col, numeric(v, feature, *span)?, *span)?,
                };
                allowed[idx] = true;
            }
            if *negated {
                allowed.iter_mut().for_each(|a| *a = !*a);
            }
            Ok(Pred::Leaf { column: col, allowed })
        }
    }
}

fn term_columns(t: &FeatureTerm, schema: &Schema, out: &mut BTreeSet<usize>) -> VResult<()> {
    match t {
        FeatureTerm::Feature(name, span) => {
            out.insert(column(schema, name, *span)?);
        }
        FeatureTerm::Const(_) => {}
        FeatureTerm::Neg(a) => term_columns(a, schema, out)?,
        FeatureTerm::Binary(_, a, b) => {
            term_columns(a, schema, out)?;
            term_columns(b, schema, out)?;
        }
    }
    Ok(())
}

fn eval_term(t: &FeatureTerm, schema: &Schema, value_of: &dyn Fn(usize) -> f64) -> f64 {
    match t {
        FeatureTerm::Feature(name, _) => value_of(schema.column_index(name).expect("resolved")),
        FeatureTerm::Const(n) => n.value,
        FeatureTerm::Neg(a) => -eval_term(a, schema, value_of),
        FeatureTerm::Binary(op, a, b) => {
            let (x, y) = (eval_term(a, schema, value_of), eval_term(b, schema, value_of));
            match op {
                ArithOp::Add => x + y,
                ArithOp::Sub => x - y,
                ArithOp::Mul => x * y,
                ArithOp::Div => x / y,
            }
        }
    }
}

fn resolve_stat(e: &StatExpr, schema: &Schema) -> VResult<TypedStat> {
    let rec = |x: &StatExpr| resolve_stat(x, schema).map(Box::new);
    Ok(match e {
        StatExpr::Op {
            kind,
            term,
            condition,
            span,
        } => {
            let mut cols = BTreeSet::new();
            term_columns(term, schema, &mut cols)?;
            if cols.is_empty() {
                return Err(ValidateError::TypeMismatch {
                    message: format!("{}[...] must involve at least one feature", kind.keyword()),
                    span: *span,
                });
            }
            let features: Vec<usize> = cols.into_iter().collect();
            let sizes: Vec<usize> = features.iter().map(|&c| schema.column(c).domain_size()).collect();
            let total: usize = sizes.iter().product();
            let mut values = Vec::with_capacity(total);
            for cell in 0..total {
                // row-major decode: the first feature varies slowest
                let mut idx = vec![0; features.len()];
                let mut rem = cell;
                for k in (0..features.len()).rev() {
                    idx[k] = rem % sizes[k];
                    rem /= sizes[k];
                }
                let value_of = |col: usize| {
                    let k = features.iter().position(|&f| f == col).expect("collected");
                    schema.column(col).representative_values[idx[k]]
                };
                values.push(eval_term(term, schema, &value_of));
            }
            let condition = condition.as_ref().map(|c| resolve_row(c, schema)).transpose()?;
            TypedStat::Op {
                kind: *kind,
                features,
                values,
                condition,
            }
        }
        StatExpr::Const(n, _) => TypedStat::Const(n.value),
        StatExpr::Neg(a) => TypedStat::Neg(rec(a)?),
        StatExpr::Arith(op, a, b) => TypedStat::Arith(*op, rec(a)?, rec(b)?),
        StatExpr::Rel(op, a, b) => TypedStat::Rel(*op, rec(a)?, rec(b)?),
        StatExpr::Logic(op, a, b) => TypedStat::Logic(*op, rec(a)?, rec(b)?),
    })
}

fn arg_column(schema: &Schema, a: &Arg) -> VResult<usize> {
    match &a.value {
        ArgValue::Ident(name) => column(schema, name, a.span),
        _ => Err(ValidateError::InvalidArgument {
            message: format!("`{}` expects a feature name", a.name),
            span: a.span,
        }),
    }
}

fn arg_number(a: &Arg) -> VResult<f64> {
    match &a.value {
        ArgValue::Number(n) => Ok(n.value),
        _ => Err(ValidateError::InvalidArgument {
            message: format!("`{}` expects a number", a.name),
            span: a.span,
        }),
    }
}

fn arg_count(a: &Arg) -> VResult<usize> {
    let v = arg_number(a)?;
    if v >= 1.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(ValidateError::InvalidArgument {
            message: format!("`{}` expects a positive integer", a.name),
            span: a.span,
        })
    }
}

fn arg_flag(a: &Arg) -> VResult<bool> {
    match &a.value {
        ArgValue::Ident(s) if s.eq_ignore_ascii_case("true") => Ok(true),
        ArgValue::Ident(s) if s.eq_ignore_ascii_case("false") => Ok(false),
        ArgValue::Number(n) if n.value == 1.0 || n.value == 0.0 => Ok(n.value == 1.0),
        _ => Err(ValidateError::InvalidArgument {
            message: format!("`{}` expects true or false", a.name),
            span: a.span,
        }),
    }
}

fn resolve_downstream(metric: Option<FairnessMetric>, args: &[Arg], schema: &Schema, span: Span) -> VResult<DownstreamSpec> {
    let mut target = None;
    let mut protected = None;
    let mut features: Option<(Vec<usize>, Span)> = None;
    let mut exclude_protected = false;
    let mut surrogate = SurrogateConfig::default();
    for a in args {
        match a.name.to_ascii_lowercase().as_str() {
            "target" => target = Some(arg_column(schema, a)?),
            "protected" if metric.is_some() => protected = Some(arg_column(schema, a)?),
            "features" => {
                let cols = match &a.value {
                    ArgValue::Ident(s) if s.eq_ignore_ascii_case("all") => (0..schema.k()).collect(),
                    ArgValue::Ident(s) => vec![column(schema, s, a.span)?],
                    ArgValue::List(items) => items
                        .iter()
                        .map(|l| column(schema, l.text(), a.span))
                        .collect::<VResult<Vec<_>>>()?,
                    ArgValue::Number(_) => {
                        return Err(ValidateError::InvalidArgument {
                            message: "`features` expects `all` or a set of feature names".into(),
                            span: a.span,
                        })
                    }
                };
                features = Some((cols, a.span));
            }
            "exclude_protected" if metric.is_some() => exclude_protected = arg_flag(a)?,
            "lr" => {
                surrogate.lr = arg_number(a)?;
                if !(surrogate.lr > 0.0) {
                    return Err(ValidateError::InvalidArgument {
                        message: "`lr` must be positive".into(),
                        span: a.span,
                    });
                }
            }
            "n_epochs" => surrogate.n_epochs = arg_count(a)?,
            "batch_size" => surrogate.batch_size = arg_count(a)?,
            other => {
                return Err(ValidateError::InvalidArgument {
                    message: format!("unknown argument `{other}`"),
                    span: a.span,
                })
            }
        }
    }
    let target = match target.or_else(|| schema.label_column()) {
        Some(t) => t,
        None => {
            return Err(ValidateError::InvalidArgument {
                message: "no target given and the schema has no label column".into(),
                span,
            })
        }
    };
    if schema.column(target).domain_size() != 2 {
        return Err(ValidateError::NonBinaryTarget {
            feature: schema.column(target).name.clone(),
            span,
        });
    }
    if metric.is_some() {
        let p = protected.or_else(|| schema.columns().iter().position(|c| c.has_role(Role::Protected)));
        match p {
            Some(p) if schema.column(p).domain_size() == 2 && p != target => protected = Some(p),
            _ => return Err(ValidateError::ProtectedColumnMissing { span }),
        }
    }
    let (mut cols, fspan) = features.unwrap_or_else(|| ((0..schema.k()).collect(), span));
    let explicit = args
        .iter()
        .any(|a| a.name.eq_ignore_ascii_case("features") && matches!(a.value, ArgValue::List(_)));
    if explicit && cols.contains(&target) {
        return Err(ValidateError::InvalidArgument {
            message: "the target cannot also be a feature".into(),
            span: fspan,
        });
    }
    cols.retain(|&c| c != target && !(exclude_protected && Some(c) == protected));
    cols.sort_unstable();
    cols.dedup();
    if cols.is_empty() {
        return Err(ValidateError::InvalidArgument {
            message: "the downstream classifier needs at least one feature".into(),
            span: fspan,
        });
    }
    Ok(DownstreamSpec {
        metric,
        target,
        protected,
        features: cols,
        surrogate,
    })
}
