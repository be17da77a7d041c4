use ndarray::Array2;

use crate::grad::{Result, Tape, Var};
use crate::lang::Pred;
use crate::schema::Schema;

/// Row indicator `b_phi` of a predicate as a `B x 1` node.
///
/// A leaf is the column block of `batch` times the 0/1 vector of allowed
/// categories; conjunction is the product and disjunction `a + b - ab`.
/// On hard one-hot input every entry is exactly 0 or 1.
pub fn row_mask(tape: &mut Tape, batch: Var, schema: &Schema, pred: &Pred) -> Result<Var> {
    match pred {
        Pred::Leaf { column, allowed } => {
            let r = schema.block(*column);
            let block = tape.slice_cols(batch, r.start, r.end)?;
            let m = Array2::from_shape_fn((allowed.len(), 1), |(i, _)| if allowed[i] { 1.0 } else { 0.0 });
            let m = tape.constant(m);
            tape.matmul(block, m)
        }
        Pred::And(a, b) => {
            let a = row_mask(tape, batch, schema, a)?;
            let b = row_mask(tape, batch, schema, b)?;
            tape.mul(a, b)
        }
        Pred::Or(a, b) => {
            let a = row_mask(tape, batch, schema, a)?;
            let b = row_mask(tape, batch, schema, b)?;
            let s = tape.add(a, b)?;
            let p = tape.mul(a, b)?;
            tape.sub(s, p)
        }
    }
}

/// Fraction of rows violating `pred`: `mean(b_not_phi)`.
pub fn row_constraint_loss(tape: &mut Tape, batch: Var, schema: &Schema, pred: &Pred) -> Result<Var> {
    let m = row_mask(tape, batch, schema, &pred.negate())?;
    Ok(tape.mean(m))
}

/// Fraction of rows with `lhs` true and `rhs` false.
pub fn implication_loss(tape: &mut Tape, batch: Var, schema: &Schema, lhs: &Pred, rhs: &Pred) -> Result<Var> {
    let l = row_mask(tape, batch, schema, lhs)?;
    let r = row_mask(tape, batch, schema, &rhs.negate())?;
    let z = tape.mul(l, r)?;
    Ok(tape.mean(z))
}
