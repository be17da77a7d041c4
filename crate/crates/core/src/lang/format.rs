use super::ast::*;

const INDENT: &str = "    ";

/// Canonical program text: upper-case keywords, one command per line,
/// `ROW CONSTRAINT` spelling and parentheses only where precedence needs them.
pub fn format_program(p: &SpecProgram) -> String {
    let mut out = format!("SYNTHESIZE: {};\n", p.source);
    for c in &p.commands {
        out.push_str(INDENT);
        out.push_str(&format_command(c));
        out.push('\n');
    }
    out.push_str("END;\n");
    out
}

pub fn format_command(c: &Command) -> String {
    let ty = match &c.kind {
        CommandKind::DifferentialPrivacy { .. } => "DIFFERENTIAL PRIVACY",
        CommandKind::RowConstraint(_) => "ROW CONSTRAINT",
        CommandKind::Implication { .. } => "IMPLICATION",
        CommandKind::Statistical(_) => "STATISTICAL",
        CommandKind::Fairness { .. } => "FAIRNESS",
        CommandKind::Utility { .. } => "UTILITY",
    };
    let param = c.weight.as_ref().map(|w| format!(" PARAM {}", w.text)).unwrap_or_default();
    let body = match &c.kind {
        CommandKind::DifferentialPrivacy { epsilon, delta } => format!("EPSILON={}, DELTA={}", epsilon.text, delta.text),
        CommandKind::RowConstraint(e) => format_row(e),
        CommandKind::Implication { lhs, rhs } => format!("{} IMPLIES {}", format_row(lhs), format_row(rhs)),
        CommandKind::Statistical(e) => format_stat(e),
        CommandKind::Fairness { metric, args } => format!("{}({})", metric.keyword(), format_args(args)),
        CommandKind::Utility { args } => format!("DOWNSTREAM_ACCURACY({})", format_args(args)),
    };
    format!("{}: {ty}{param}: {body};", c.action.keyword())
}

fn format_args(args: &[Arg]) -> String {
    args.iter()
        .map(|a| {
            let v = match &a.value {
                ArgValue::Ident(s) => format_name(s),
                ArgValue::Number(n) => n.text.clone(),
                ArgValue::List(items) => format!("{{{}}}", items.iter().map(format_literal).collect::<Vec<_>>().join(", ")),
            };
            format!("{}={v}", a.name)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn is_plain_name(s: &str) -> bool {
    let mut pieces = s.split('-');
    let first_ok = pieces.next().is_some_and(|p| {
        p.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
    });
    first_ok && pieces.all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
}

fn quote(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

fn format_name(s: &str) -> String {
    if is_plain_name(s) {
        s.to_string()
    } else {
        quote(s)
    }
}

pub fn format_literal(l: &Literal) -> String {
    match l {
        Literal::Ident(s) => format_name(s),
        Literal::Str(s) => quote(s),
        Literal::Number(n) => n.text.clone(),
    }
}

fn row_prec(e: &RowExpr) -> u8 {
    match e {
        RowExpr::Or(..) => 1,
        RowExpr::And(..) => 2,
        _ => 3,
    }
}

pub fn format_row(e: &RowExpr) -> String {
    fn child(e: &RowExpr, parent: u8, right: bool) -> String {
        let p = row_prec(e);
        let s = format_row(e);
        if p < parent || (right && p == parent) {
            format!("({s})")
        } else {
            s
        }
    }
    match e {
        RowExpr::Compare { feature, op, value, .. } => format!("{feature} {} {}", op.symbol(), format_literal(value)),
        RowExpr::InSet {
            feature, values, negated, ..
        } => format!(
            "{feature} {}IN {{{}}}",
            if *negated { "NOT " } else { "" },
            values.iter().map(format_literal).collect::<Vec<_>>().join(", ")
        ),
        RowExpr::And(a, b) => format!("{} AND {}", child(a, 2, false), child(b, 2, true)),
        RowExpr::Or(a, b) => format!("{} OR {}", child(a, 1, false), child(b, 1, true)),
    }
}

fn stat_prec(e: &StatExpr) -> u8 {
    match e {
        StatExpr::Logic(LogicOp::Or, ..) => 1,
        StatExpr::Logic(LogicOp::And, ..) => 2,
        StatExpr::Rel(..) => 3,
        StatExpr::Arith(ArithOp::Add | ArithOp::Sub, ..) => 4,
        StatExpr::Arith(ArithOp::Mul | ArithOp::Div, ..) => 5,
        StatExpr::Neg(_) => 6,
        StatExpr::Op { .. } | StatExpr::Const(..) => 7,
    }
}

pub fn format_stat(e: &StatExpr) -> String {
    fn child(e: &StatExpr, parent: u8, right: bool) -> String {
        let p = stat_prec(e);
        let s = format_stat(e);
        // comparisons do not chain, so a comparison child always needs parentheses
        if p < parent || (right && p == parent) || (parent == 3 && p == 3) {
            format!("({s})")
        } else {
            s
        }
    }
    match e {
        StatExpr::Op { kind, term, condition, .. } => {
            let cond = condition.as_ref().map(|c| format!("|{}", format_row(c))).unwrap_or_default();
            format!("{}[{}{cond}]", kind.keyword(), format_term(term))
        }
        StatExpr::Const(n, _) => n.text.clone(),
        StatExpr::Neg(a) => format!("-{}", child(a, 6, false)),
        StatExpr::Arith(op, a, b) => {
            let p = stat_prec(e);
            format!("{} {} {}", child(a, p, false), op.symbol(), child(b, p, true))
        }
        StatExpr::Rel(op, a, b) => format!("{} {} {}", child(a, 3, false), op.symbol(), child(b, 3, true)),
        StatExpr::Logic(op, a, b) => {
            let p = stat_prec(e);
            let kw = if *op == LogicOp::And { "AND" } else { "OR" };
            format!("{} {kw} {}", child(a, p, false), child(b, p, true))
        }
    }
}

fn term_prec(t: &FeatureTerm) -> u8 {
    match t {
        FeatureTerm::Binary(ArithOp::Add | ArithOp::Sub, ..) => 1,
        FeatureTerm::Binary(..) => 2,
        FeatureTerm::Neg(_) => 3,
        _ => 4,
    }
}

pub fn format_term(t: &FeatureTerm) -> String {
    fn child(t: &FeatureTerm, parent: u8, right: bool) -> String {
        let p = term_prec(t);
        let s = format_term(t);
        if p < parent || (right && p == parent) {
            format!("({s})")
        } else {
            s
        }
    }
    match t {
        FeatureTerm::Feature(name, _) => name.clone(),
        FeatureTerm::Const(n) => n.text.clone(),
        FeatureTerm::Neg(a) => format!("-{}", child(a, 3, false)),
        FeatureTerm::Binary(op, a, b) => {
            let p = term_prec(t);
            format!("{} {} {}", child(a, p, false), op.symbol(), child(b, p, true))
        }
    }
}
