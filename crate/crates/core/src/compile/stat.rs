use ndarray::Array2;

use super::mask::row_mask;
use crate::grad::{Result, Tape, Var};
use crate::lang::ast::{ArithOp, CmpOp, LogicOp, StatKind};
use crate::lang::{Pred, TypedStat};
use crate::schema::Schema;

/// Guard added to the condition mass in conditional marginals.
pub const CONDITION_EPS: f64 = 1e-12;
/// Guard inside `log` for entropy and inside `sqrt` for standard deviation.
pub const STAT_EPS: f64 = 1e-8;
/// Slack used to turn strict comparisons into non-strict ones.
pub const MARGIN: f64 = 1e-6;

/// Joint distribution of `features` over the rows selected by `condition`,
/// as a `1 x prod(domain)` node in row-major order.
pub fn conditional_marginal(tape: &mut Tape, batch: Var, schema: &Schema, features: &[usize], condition: Option<&Pred>) -> Result<Var> {
    let mut parts = Vec::with_capacity(features.len() + 1);
    for &f in features {
        let r = schema.block(f);
        parts.push(tape.slice_cols(batch, r.start, r.end)?);
    }
    let Some(cond) = condition else {
        return tape.kron_mean(&parts);
    };
    let b = row_mask(tape, batch, schema, cond)?;
    parts.push(b);
    let weighted = tape.kron_mean(&parts)?;
    let rows = tape.shape(batch).0 as f64;
    let mass = tape.mean(b);
    if tape.scalar_value(mass) * rows < 1.0 {
        log::warn!("statistical condition selects fewer than one row of the batch");
    }
    let denom = tape.add_scalar(mass, CONDITION_EPS / rows.max(1.0));
    tape.div(weighted, denom)
}

/// `E`, `VAR`, `STD` or `ENTROPY` of a distribution `p` (`1 x D`) whose cells
/// carry the term values `values`.
pub fn stat_value(tape: &mut Tape, kind: StatKind, values: &[f64], p: Var) -> Result<Var> {
    let v = tape.constant(Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column vector"));
    match kind {
        StatKind::Expectation => tape.matmul(p, v),
        StatKind::Variance | StatKind::StdDev => {
            let e = tape.matmul(p, v)?;
            let v2 =
                tape.constant(Array2::from_shape_vec((values.len(), 1), values.iter().map(|x| x * x).collect()).expect("column vector"));
            let e2 = tape.matmul(p, v2)?;
            let sq = tape.mul(e, e)?;
            let var = tape.sub(e2, sq)?;
            if kind == StatKind::Variance {
                Ok(var)
            } else {
                let g = tape.add_scalar(var, STAT_EPS);
                tape.sqrt(g)
            }
        }
        StatKind::Entropy => {
            let shifted = tape.add_scalar(p, STAT_EPS);
            let l = tape.log(shifted)?;
            let pl = tape.mul(p, l)?;
            let s = tape.sum(pl);
            Ok(tape.neg(s))
        }
    }
}

/// Penalty for `a op b` being false; zero when it holds (up to [`MARGIN`]
/// for strict and inequality operators).
pub fn relation_loss(tape: &mut Tape, op: CmpOp, a: Var, b: Var, margin: f64) -> Result<Var> {
    let zero = tape.scalar(0.0);
    match op {
        CmpOp::Eq => {
            let d = tape.sub(a, b)?;
            Ok(tape.abs(d))
        }
        CmpOp::Le | CmpOp::Lt => {
            let d = tape.sub(a, b)?;
            let d = if op == CmpOp::Lt { tape.add_scalar(d, margin) } else { d };
            tape.maximum(d, zero)
        }
        CmpOp::Ge | CmpOp::Gt => relation_loss(tape, if op == CmpOp::Ge { CmpOp::Le } else { CmpOp::Lt }, b, a, margin),
        CmpOp::Ne => {
            let d = tape.sub(a, b)?;
            let d = tape.abs(d);
            let m = tape.neg(d);
            let m = tape.add_scalar(m, margin);
            tape.maximum(m, zero)
        }
    }
}

/// Node for an arithmetic sub-expression, or the loss of a boolean one.
pub fn stat_node(tape: &mut Tape, batch: Var, schema: &Schema, e: &TypedStat) -> Result<Var> {
    match e {
        TypedStat::Op {
            kind,
            features,
            values,
            condition,
        } => {
            let p = conditional_marginal(tape, batch, schema, features, condition.as_ref())?;
            stat_value(tape, *kind, values, p)
        }
        TypedStat::Const(c) => Ok(tape.scalar(*c)),
        TypedStat::Neg(a) => {
            let a = stat_node(tape, batch, schema, a)?;
            Ok(tape.neg(a))
        }
        TypedStat::Arith(op, a, b) => {
            let a = stat_node(tape, batch, schema, a)?;
            let b = stat_node(tape, batch, schema, b)?;
            match op {
                ArithOp::Add => tape.add(a, b),
                ArithOp::Sub => tape.sub(a, b),
                ArithOp::Mul => tape.mul(a, b),
                ArithOp::Div => tape.div(a, b),
            }
        }
        TypedStat::Rel(op, a, b) => {
            let a = stat_node(tape, batch, schema, a)?;
            let b = stat_node(tape, batch, schema, b)?;
            relation_loss(tape, *op, a, b, MARGIN)
        }
        TypedStat::Logic(op, a, b) => {
            let a = stat_node(tape, batch, schema, a)?;
            let b = stat_node(tape, batch, schema, b)?;
            match op {
                LogicOp::And => tape.add(a, b),
                LogicOp::Or => tape.mul(a, b),
            }
        }
    }
}

/// Numeric check of a boolean statistical expression on a hard batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatCheck {
    /// Loss of the expression evaluated without margins.
    pub residual: f64,
    /// Every comparison holds within `rel_tol * max(1, |lhs|, |rhs|)`,
    /// combined through AND/OR.
    pub satisfied: bool,
}

pub fn check_stat(tape: &mut Tape, batch: Var, schema: &Schema, e: &TypedStat, rel_tol: f64) -> Result<StatCheck> {
    match e {
        TypedStat::Rel(op, a, b) => {
            let a = stat_node(tape, batch, schema, a)?;
            let b = stat_node(tape, batch, schema, b)?;
            let (va, vb) = (tape.scalar_value(a), tape.scalar_value(b));
            let tol = rel_tol * va.abs().max(vb.abs()).max(1.0);
            let l = relation_loss(tape, *op, a, b, 0.0)?;
            let residual = tape.scalar_value(l);
            let satisfied = match op {
                CmpOp::Ne => (va - vb).abs() > 0.0,
                _ => residual <= tol,
            };
            Ok(StatCheck { residual, satisfied })
        }
        TypedStat::Logic(op, a, b) => {
            let a = check_stat(tape, batch, schema, a, rel_tol)?;
            let b = check_stat(tape, batch, schema, b, rel_tol)?;
            Ok(match op {
                LogicOp::And => StatCheck {
                    residual: a.residual + b.residual,
                    satisfied: a.satisfied && b.satisfied,
                },
                LogicOp::Or => StatCheck {
                    residual: a.residual * b.residual,
                    satisfied: a.satisfied || b.satisfied,
                },
            })
        }
        _ => {
            let v = stat_node(tape, batch, schema, e)?;
            let residual = tape.scalar_value(v);
            Ok(StatCheck { residual, satisfied: true })
        }
    }
}
