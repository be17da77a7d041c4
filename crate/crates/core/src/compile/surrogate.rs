use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SurrogateConfig;
use crate::eval::fairness::fairness_metrics;
use crate::grad::{Result, Tape, Tensor, Var};
use crate::lang::ast::FairnessMetric;
use crate::lang::DownstreamSpec;
use crate::schema::{EncodedTable, Schema};

/// Fixed evaluation data for a downstream specification: one-hot features
/// with a trailing bias column, labels and (for fairness) the protected bit.
#[derive(Debug, Clone)]
pub struct Reference {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub protected: Option<Vec<usize>>,
}

impl Reference {
    /// Uses at most `max_rows` rows of `table`, chosen by a seeded shuffle.
    pub fn new(table: &EncodedTable, spec: &DownstreamSpec, max_rows: usize, seed: u64) -> Self {
        let table = if table.n_rows() > max_rows {
            let mut idx: Vec<usize> = (0..table.n_rows()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(max_rows);
            idx.sort_unstable();
            table.select_rows(&idx)
        } else {
            table.clone()
        };
        Self {
            x: design_values(table.data(), table.schema(), &spec.features),
            y: table.column_codes(spec.target),
            protected: spec.protected.map(|p| table.column_codes(p)),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    /// Row weights `1{s=0, cond}/n_0 - 1{s=1, cond}/n_1` as a `1 x N` row;
    /// `None` when either group is empty.
    fn gap_weights(&self, cond: impl Fn(usize) -> bool) -> Option<Tensor> {
        let s = self.protected.as_ref()?;
        let n0 = (0..s.len()).filter(|&i| s[i] == 0 && cond(i)).count();
        let n1 = (0..s.len()).filter(|&i| s[i] == 1 && cond(i)).count();
        if n0 == 0 || n1 == 0 {
            return None;
        }
        Some(Array2::from_shape_fn((1, s.len()), |(_, i)| match (s[i], cond(i)) {
            (0, true) => 1.0 / n0 as f64,
            (1, true) => -1.0 / n1 as f64,
            _ => 0.0,
        }))
    }
}

/// One-hot blocks of `features` followed by a column of ones.
pub fn design_values(data: &Tensor, schema: &Schema, features: &[usize]) -> Tensor {
    let width: usize = features.iter().map(|&f| schema.column(f).domain_size()).sum::<usize>() + 1;
    let mut out = Array2::zeros((data.nrows(), width));
    let mut col = 0;
    for &f in features {
        for j in schema.block(f) {
            out.column_mut(col).assign(&data.column(j));
            col += 1;
        }
    }
    out.column_mut(col).fill(1.0);
    out
}

pub fn design_matrix(tape: &mut Tape, batch: Var, schema: &Schema, features: &[usize]) -> Result<Var> {
    let mut parts = Vec::with_capacity(features.len() + 1);
    for &f in features {
        let r = schema.block(f);
        parts.push(tape.slice_cols(batch, r.start, r.end)?);
    }
    let rows = tape.shape(batch).0;
    parts.push(tape.constant(Array2::ones((rows, 1))));
    tape.concat(&parts)
}

/// Unrolled gradient descent on the logistic loss from `psi = 0`.
///
/// The inner gradient `X^T (sigmoid(X psi) - y) / n` is built from tape
/// primitives, so the returned weights stay differentiable in `x` and `y`.
/// Mini-batches of `batch_size` rows are visited in order; a batch no
/// larger than `batch_size` is used whole.
pub fn fit_logistic(tape: &mut Tape, x: Var, y: Var, cfg: &SurrogateConfig) -> Result<Var> {
    let (rows, d) = tape.shape(x);
    let mut psi = tape.constant(Array2::zeros((d, 1)));
    let bs = cfg.batch_size.max(1);
    let mut chunks = Vec::new();
    if rows <= bs {
        if rows > 0 {
            let xt = tape.transpose(x);
            chunks.push((x, xt, y, rows));
        }
    } else {
        let mut start = 0;
        while start < rows {
            let end = (start + bs).min(rows);
            let xb = tape.slice_rows(x, start, end)?;
            let xt = tape.transpose(xb);
            let yb = tape.slice_rows(y, start, end)?;
            chunks.push((xb, xt, yb, end - start));
            start = end;
        }
    }
    for _ in 0..cfg.n_epochs {
        for &(xb, xt, yb, n) in &chunks {
            let z = tape.matmul(xb, psi)?;
            let p = tape.sigmoid(z);
            let r = tape.sub(p, yb)?;
            let g = tape.matmul(xt, r)?;
            let step = tape.scale(g, cfg.lr / n as f64);
            psi = tape.sub(psi, step)?;
        }
    }
    Ok(psi)
}

/// Positive-class column of the target block as a `B x 1` node.
pub fn target_column(tape: &mut Tape, batch: Var, schema: &Schema, target: usize) -> Result<Var> {
    let r = schema.block(target);
    tape.slice_cols(batch, r.start + 1, r.start + 2)
}

/// Soft index `SI` of `psi` on the reference data: the relaxed fairness gap,
/// or the cross-entropy for a utility objective. `None` if a protected group
/// needed by the metric is empty.
pub fn surrogate_index(tape: &mut Tape, psi: Var, reference: &Reference, metric: Option<FairnessMetric>) -> Result<Option<Var>> {
    let x = tape.constant(reference.x.clone());
    let z = tape.matmul(x, psi)?;
    let Some(metric) = metric else {
        let y = Array2::from_shape_fn((reference.n_rows(), 1), |(i, _)| reference.y[i] as f64);
        let y = tape.constant(y);
        let sp = tape.softplus(z);
        let yz = tape.mul(y, z)?;
        let ce = tape.sub(sp, yz)?;
        return Ok(Some(tape.mean(ce)));
    };
    let p = tape.sigmoid(z);
    let y = &reference.y;
    let gap = |tape: &mut Tape, w: Option<Tensor>| -> Result<Option<Var>> {
        let Some(w) = w else { return Ok(None) };
        let w = tape.constant(w);
        let g = tape.matmul(w, p)?;
        Ok(Some(tape.abs(g)))
    };
    Ok(match metric {
        FairnessMetric::DemographicParity => gap(tape, reference.gap_weights(|_| true))?,
        FairnessMetric::EqualityOfOpportunity => gap(tape, reference.gap_weights(|i| y[i] == 1))?,
        FairnessMetric::EqualizedOdds => {
            let g0 = gap(tape, reference.gap_weights(|i| y[i] == 0))?;
            let g1 = gap(tape, reference.gap_weights(|i| y[i] == 1))?;
            match (g0, g1) {
                (Some(a), Some(b)) => Some(tape.maximum(a, b)?),
                _ => None,
            }
        }
    })
}

/// Hard counterpart of [`surrogate_index`]: thresholded predictions of
/// `psi` on the reference data. Fairness metrics report the gap, utility
/// reports accuracy.
pub fn hard_index(psi: &Tensor, reference: &Reference, metric: Option<FairnessMetric>) -> Option<f64> {
    let z = reference.x.dot(psi);
    let pred: Vec<bool> = z.column(0).iter().map(|v| *v > 0.0).collect();
    match metric {
        None => {
            let correct = pred.iter().zip(&reference.y).filter(|(p, y)| **p == (**y == 1)).count();
            Some(correct as f64 / pred.len().max(1) as f64)
        }
        Some(m) => fairness_metrics(&pred, reference.protected.as_ref()?, &reference.y).get(m),
    }
}

/// Soft index of the surrogate trained on `batch`.
pub fn downstream_loss(
    tape: &mut Tape,
    batch: Var,
    schema: &Schema,
    spec: &DownstreamSpec,
    reference: &Reference,
) -> Result<Option<(Var, Var)>> {
    let x = design_matrix(tape, batch, schema, &spec.features)?;
    let y = target_column(tape, batch, schema, spec.target)?;
    let psi = fit_logistic(tape, x, y, &spec.surrogate)?;
    Ok(surrogate_index(tape, psi, reference, spec.metric)?.map(|si| (si, psi)))
}
