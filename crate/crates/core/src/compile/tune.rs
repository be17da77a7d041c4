//! Weight selection by k-fold cross-validation over the reference table.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compile, finetune, CompileError, CompileOptions, FinetuneConfig, Verdict, VerifyConfig};
use crate::eval::downstream_eval;
use crate::generator::{Generator, GeneratorConfig};
use crate::lang::TypedProgram;
use crate::pretrain::{pretrain, PretrainConfig, PretrainError};
use crate::schema::{marginal_workload, measure_workload, EncodedTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub k: usize,
    /// Evaluate every fold instead of fold 0 only.
    pub all_folds: bool,
    pub generator: GeneratorConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub compile: CompileOptions,
    pub verify: VerifyConfig,
    /// Rows sampled from each fine-tuned candidate for verification.
    pub sample_rows: usize,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            k: 5,
            all_folds: false,
            generator: GeneratorConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            compile: CompileOptions::default(),
            verify: VerifyConfig::default(),
            sample_rows: 20_000,
            seed: 0,
        }
    }
}

/// One fold x candidate result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub fold: usize,
    pub weights: BTreeMap<String, f64>,
    /// Held-out accuracy of the logistic evaluator trained on the sample;
    /// `None` without a label column or when the sample has one class.
    pub utility: Option<f64>,
    pub verdicts: Vec<Verdict>,
}

/// Splits `0..n` into `k` seeded folds of near-equal size.
pub fn fold_indices(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..k).map(|f| idx.iter().copied().skip(f).step_by(k).collect()).collect()
}

/// Cartesian product of per-spec grids, last name varying fastest.
fn candidates(grids: &BTreeMap<String, Vec<f64>>) -> Vec<BTreeMap<String, f64>> {
    let mut out = vec![BTreeMap::new()];
    for (name, values) in grids {
        out = out
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.insert(name.clone(), *v);
                    c
                })
            })
            .collect();
    }
    out
}

/// Pretrains once per fold on the training part, then fine-tunes a copy
/// per candidate and scores it against the held-out part. Specs absent
/// from `grids` keep their program weight.
pub fn tune_weights(
    program: &TypedProgram,
    table: &EncodedTable,
    grids: &BTreeMap<String, Vec<f64>>,
    cfg: &TuneConfig,
) -> Result<Vec<TuneRow>, CompileError> {
    if cfg.k < 2 {
        return Err(CompileError::InvalidGrid(format!("k = {} must be at least 2", cfg.k)));
    }
    for (name, values) in grids {
        if values.is_empty() {
            return Err(CompileError::InvalidGrid(format!("{name}: no candidates")));
        }
    }
    let schema = table.schema().clone();
    let folds = fold_indices(table.n_rows(), cfg.k, cfg.seed);
    let n_eval = if cfg.all_folds { cfg.k } else { 1 };
    let mut rows = Vec::new();
    for (fold, held) in folds.iter().enumerate().take(n_eval) {
        let train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        let train = table.select_rows(&train_idx);
        let valid = table.select_rows(held);
        let mut base = Generator::new(schema.clone(), cfg.generator.clone(), cfg.seed.wrapping_add(fold as u64))?;
        pretrain(&mut base, &train, &cfg.pretrain)?;
        let workload = marginal_workload(&schema, cfg.pretrain.workload, cfg.pretrain.workload_degrade).map_err(PretrainError::from)?;
        let targets = measure_workload(&train, &workload).map_err(PretrainError::from)?;
        for weights in candidates(grids) {
            let specs = compile(program, &train, &weights, &cfg.compile)?;
            let mut gen = base.clone();
            finetune(&mut gen, &specs, &targets, &cfg.finetune)?;
            let sample = gen.sample(cfg.sample_rows, cfg.seed.wrapping_add(1000 + fold as u64));
            let utility = schema
                .label_column()
                .and_then(|l| downstream_eval(&sample, &valid, l).ok())
                .map(|s| s.accuracy);
            let verdicts = specs
                .iter()
                .map(|s| s.verify(&sample, &cfg.verify))
                .collect::<Result<Vec<_>, _>>()?;
            let all_weights: BTreeMap<String, f64> = specs.iter().map(|s| (s.name.clone(), s.weight)).collect();
            log::info!("fold {fold} weights {all_weights:?}: utility {utility:?}");
            rows.push(TuneRow {
                fold,
                weights: all_weights,
                utility,
                verdicts,
            });
        }
    }
    Ok(rows)
}
