use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::mask::{implication_loss, row_constraint_loss};
use super::stat::{check_stat, stat_node};
use super::surrogate::{downstream_loss, hard_index, Reference};
use super::CompileError;
use crate::eval::{fairness_metrics, LogisticModel};
use crate::grad::{Tape, Var};
use crate::lang::ast::Action;
use crate::lang::{DownstreamSpec, Pred, TypedKind, TypedProgram, TypedStat};
use crate::schema::{EncodedTable, Schema};

#[derive(Debug, Clone)]
pub enum Objective {
    Row(Pred),
    Implication { lhs: Pred, rhs: Pred },
    Statistical(TypedStat),
    Downstream { spec: DownstreamSpec, reference: Reference },
}

/// A specification turned into a weighted differentiable penalty plus a
/// tape-free check on hard samples.
#[derive(Debug, Clone)]
pub struct CompiledSpec {
    pub name: String,
    pub text: String,
    pub action: Action,
    pub weight: f64,
    pub objective: Objective,
}

/// Loss node of one spec on a batch together with the hard metric of the
/// same batch (see [`Verdict::metric`]).
#[derive(Debug, Clone, Copy)]
pub struct SpecEval {
    pub loss: Var,
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Minimum share of satisfying rows for row-level specs.
    pub min_csr: f64,
    /// Relative tolerance of statistical comparisons.
    pub stat_rel_tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            min_csr: 0.99,
            stat_rel_tol: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    /// Share of satisfying rows (row-level), residual (statistical), group
    /// gap (fairness) or accuracy (utility).
    pub metric: Option<f64>,
    /// `None` where the spec has no pass/fail threshold.
    pub satisfied: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompileOptions {
    /// Weight for specs without `PARAM` or an override.
    pub default_weight: f64,
    /// Cap on reference rows used by downstream specs.
    pub reference_rows: usize,
    pub seed: u64,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self {
            default_weight: 1.0,
            reference_rows: 2000,
            seed: 0,
        }
    }
}

/// Weight precedence: `overrides[name]`, then `PARAM`, then the default.
pub fn compile(
    program: &TypedProgram,
    reference: &EncodedTable,
    overrides: &BTreeMap<String, f64>,
    opts: &CompileOptions,
) -> Result<Vec<CompiledSpec>, CompileError> {
    for name in overrides.keys() {
        if !program.specs.iter().any(|s| &s.name == name) {
            return Err(CompileError::UnknownSpec(name.clone()));
        }
    }
    let mut out = Vec::with_capacity(program.specs.len());
    for spec in &program.specs {
        let weight = overrides.get(&spec.name).copied().or(spec.weight).unwrap_or(opts.default_weight);
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(CompileError::InvalidWeight(spec.name.clone(), weight));
        }
        let objective = match &spec.kind {
            TypedKind::Row(p) => Objective::Row(p.clone()),
            TypedKind::Implication { lhs, rhs } => Objective::Implication {
                lhs: lhs.clone(),
                rhs: rhs.clone(),
            },
            TypedKind::Statistical(s) => Objective::Statistical(s.clone()),
            TypedKind::Downstream(d) => {
                let r = Reference::new(reference, d, opts.reference_rows, opts.seed);
                if d.metric.is_some() && hard_index(&ndarray::Array2::zeros((r.x.ncols(), 1)), &r, d.metric).is_none() {
                    return Err(CompileError::EmptyProtectedGroup(spec.name.clone()));
                }
                Objective::Downstream {
                    spec: d.clone(),
                    reference: r,
                }
            }
        };
        out.push(CompiledSpec {
            name: spec.name.clone(),
            text: spec.text.clone(),
            action: spec.action,
            weight,
            objective,
        });
    }
    Ok(out)
}

impl CompiledSpec {
    /// `-1` for `MAXIMIZE`, `+1` otherwise.
    pub fn sign(&self) -> f64 {
        if self.action == Action::Maximize {
            -1.0
        } else {
            1.0
        }
    }

    pub fn is_row_level(&self) -> bool {
        matches!(self.objective, Objective::Row(_) | Objective::Implication { .. })
    }

    /// Per-row satisfaction for row-level specs.
    pub fn row_ok(&self, codes: &[usize]) -> Option<bool> {
        match &self.objective {
            Objective::Row(p) => Some(p.eval(codes)),
            Objective::Implication { lhs, rhs } => Some(!lhs.eval(codes) || rhs.eval(codes)),
            _ => None,
        }
    }

    /// Signed, unweighted penalty on `batch`.
    pub fn evaluate(&self, tape: &mut Tape, batch: Var, schema: &Schema) -> Result<SpecEval, CompileError> {
        Ok(match &self.objective {
            Objective::Row(p) => {
                let loss = row_constraint_loss(tape, batch, schema, p)?;
                let csr = 1.0 - tape.scalar_value(loss);
                SpecEval { loss, metric: Some(csr) }
            }
            Objective::Implication { lhs, rhs } => {
                let loss = implication_loss(tape, batch, schema, lhs, rhs)?;
                let csr = 1.0 - tape.scalar_value(loss);
                SpecEval { loss, metric: Some(csr) }
            }
            Objective::Statistical(e) => {
                let loss = stat_node(tape, batch, schema, e)?;
                let residual = check_stat(tape, batch, schema, e, 0.0)?.residual;
                SpecEval {
                    loss,
                    metric: Some(residual),
                }
            }
            Objective::Downstream { spec, reference } => {
                let (si, psi) = downstream_loss(tape, batch, schema, spec, reference)?
                    .ok_or_else(|| CompileError::EmptyProtectedGroup(self.name.clone()))?;
                let loss = if self.sign() < 0.0 { tape.neg(si) } else { si };
                let metric = hard_index(tape.value(psi), reference, spec.metric);
                SpecEval { loss, metric }
            }
        })
    }

    /// Checks a hard table. Downstream specs train the evaluation-grade
    /// logistic model on `table` and measure it on the reference rows.
    pub fn verify(&self, table: &EncodedTable, cfg: &VerifyConfig) -> Result<Verdict, CompileError> {
        let verdict = |metric: Option<f64>, satisfied: Option<bool>| Verdict {
            name: self.name.clone(),
            metric,
            satisfied,
        };
        Ok(match &self.objective {
            Objective::Row(_) | Objective::Implication { .. } => {
                let n = table.n_rows();
                let ok = (0..n).filter(|&r| self.row_ok(&table.row_codes(r)) == Some(true)).count();
                let csr = if n == 0 { 1.0 } else { ok as f64 / n as f64 };
                verdict(Some(csr), Some(csr >= cfg.min_csr))
            }
            Objective::Statistical(e) => {
                let mut tape = Tape::new();
                let batch = tape.constant(table.data().clone());
                let c = check_stat(&mut tape, batch, table.schema(), e, cfg.stat_rel_tol)?;
                verdict(Some(c.residual), Some(c.satisfied))
            }
            Objective::Downstream { spec, reference } => {
                let model = match LogisticModel::fit(table, spec.target, &spec.features) {
                    Ok(m) => m,
                    Err(_) => return Ok(verdict(None, None)),
                };
                let z = reference.x.dot(&model.weights);
                let pred: Vec<bool> = z.column(0).iter().map(|v| *v > 0.0).collect();
                let metric = match (spec.metric, &reference.protected) {
                    (Some(m), Some(s)) => fairness_metrics(&pred, s, &reference.y).get(m),
                    _ => Some(pred.iter().zip(&reference.y).filter(|(p, y)| **p == (**y == 1)).count() as f64 / pred.len().max(1) as f64),
                };
                verdict(metric, None)
            }
        })
    }
}

/// `sum_i lambda_i * s_i * L_i`, skipping zero weights. Returns the total
/// (if any spec is active) and the per-spec evaluations in order.
pub fn weighted_penalty(
    specs: &[CompiledSpec],
    tape: &mut Tape,
    batch: Var,
    schema: &Schema,
) -> Result<(Option<Var>, Vec<Option<SpecEval>>), CompileError> {
    let mut total: Option<Var> = None;
    let mut evals = Vec::with_capacity(specs.len());
    for s in specs {
        if s.weight == 0.0 {
            evals.push(None);
            continue;
        }
        let e = s.evaluate(tape, batch, schema)?;
        let w = tape.scale(e.loss, s.weight);
        total = Some(match total {
            Some(t) => tape.add(t, w)?,
            None => w,
        });
        evals.push(Some(e));
    }
    Ok((total, evals))
}
