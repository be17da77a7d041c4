//! Non-private pre-training by total-variation marginal matching.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::generator::{Generator, GeneratorError};
use crate::grad::{cosine_lr, Adam, AdamConfig, GradError, Tape, Var};
use crate::schema::{marginal_workload, measure_workload, EncodedTable, MarginalSpec, MarginalVector, Schema, SchemaError, WorkloadMode};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no target marginals to fit")]
    EmptyWorkload,
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PretrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub group_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub workload: WorkloadMode,
    /// Fall back to narrower marginals when the schema has fewer than three columns.
    pub workload_degrade: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 15_000,
            epochs: 2_000,
            group_size: 16,
            lr: 1e-3,
            seed: 0,
            workload: WorkloadMode::ThreeWayWithLabel,
            workload_degrade: false,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PretrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.group_size == 0 {
            return Err(PretrainError::InvalidConfig("group_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(PretrainError::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean TV over the targets, measured on the training batches of the epoch.
    pub mean_tv: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochLog>,
}

impl History {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,mean_tv,lr")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{}", e.epoch, e.mean_tv, e.lr)?;
        }
        Ok(())
    }

    pub fn last_tv(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_tv)
    }
}

/// Normalized marginal of a batch node over the columns of `spec`.
pub fn tape_marginal(tape: &mut Tape, batch: Var, schema: &Schema, spec: &MarginalSpec) -> Result<Var, GradError> {
    let mut parts = Vec::with_capacity(spec.features().len());
    for &f in spec.features() {
        let r = schema.block(f);
        parts.push(tape.slice_cols(batch, r.start, r.end)?);
    }
    tape.kron_mean(&parts)
}

/// `sum_r 1/2 |target_r - marginal_r(batch)|_1` over the given targets.
pub fn marginal_loss(tape: &mut Tape, batch: Var, schema: &Schema, targets: &[(MarginalSpec, MarginalVector)]) -> Result<Var, GradError> {
    let mut total: Option<Var> = None;
    for (spec, target) in targets {
        let m = tape_marginal(tape, batch, schema, spec)?;
        if target.len() != tape.shape(m).1 {
            return Err(GradError::ShapeMismatch {
                op: "marginal_loss",
                lhs: tape.shape(m),
                rhs: (1, target.len()),
            });
        }
        let t = tape.constant(Array2::from_shape_vec((1, target.len()), target.values.clone()).expect("row vector"));
        let d = tape.sub(m, t)?;
        let a = tape.abs(d);
        let s = tape.sum(a);
        let tv = tape.scale(s, 0.5);
        total = Some(match total {
            Some(acc) => tape.add(acc, tv)?,
            None => tv,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.scalar(0.0)),
    }
}

/// Additional loss terms evaluated on each training batch, added to `L_M`.
pub type ExtraLoss<'a> = dyn FnMut(&mut Tape, Var) -> Result<Option<Var>, GradError> + 'a;

/// Training state that may persist across calls to [`fit_marginals`].
pub struct FitState<'a> {
    pub adam: Option<&'a mut Adam>,
    pub extra: Option<&'a mut ExtraLoss<'a>>,
}

/// Minimizes the summed TV loss of `gen` against fixed target marginals.
///
/// One epoch is one pass over the targets in shuffled groups of
/// `config.group_size`; each update draws fresh noise.
pub fn fit_marginals(
    gen: &mut Generator,
    targets: &[(MarginalSpec, MarginalVector)],
    config: &PretrainConfig,
    state: FitState<'_>,
) -> Result<History> {
    config.validate()?;
    if targets.is_empty() {
        return Err(PretrainError::EmptyWorkload);
    }
    let FitState { adam, mut extra } = state;
    let mut own_adam;
    let adam = match adam {
        Some(a) => a,
        None => {
            own_adam = Adam::new(gen.params(), AdamConfig::default());
            &mut own_adam
        }
    };
    let schema = gen.schema().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let groups_per_epoch = targets.len().div_ceil(config.group_size);
    let total_steps = config.epochs * groups_per_epoch;
    let mut step = 0;
    let mut history = History::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut tv_sum = 0.0;
        let mut lr = config.lr;
        for group in order.chunks(config.group_size) {
            let members: Vec<_> = group.iter().map(|&i| targets[i].clone()).collect();
            let mut tape = Tape::new();
            let vars = gen.register(&mut tape);
            let batch = gen.forward_batch(&mut tape, &vars, config.batch_size, &mut rng)?;
            let lm = marginal_loss(&mut tape, batch, &schema, &members)?;
            tv_sum += tape.scalar_value(lm);
            let mut loss = lm;
            if let Some(f) = extra.as_deref_mut() {
                if let Some(e) = f(&mut tape, batch)? {
                    loss = tape.add(loss, e)?;
                }
            }
            let mut grads = tape.backward(loss)?;
            let g: Vec<_> = vars
                .0
                .iter()
                .map(|v| grads.take(*v).unwrap_or_else(|| Array2::zeros(tape.shape(*v))))
                .collect();
            lr = cosine_lr(config.lr, step, total_steps);
            adam.step(gen.params_mut(), &g, lr);
            step += 1;
        }
        let mean_tv = tv_sum / targets.len() as f64;
        log::debug!("epoch {epoch}: mean tv {mean_tv:.5}, lr {lr:.3e}");
        history.epochs.push(EpochLog { epoch, mean_tv, lr });
    }
    Ok(history)
}

/// Measures the configured workload on `table` and fits `gen` to it.
pub fn pretrain(gen: &mut Generator, table: &EncodedTable, config: &PretrainConfig) -> Result<History> {
    config.validate()?;
    let workload = marginal_workload(gen.schema(), config.workload, config.workload_degrade)?;
    let targets = measure_workload(table, &workload)?;
    fit_marginals(gen, &targets, config, FitState { adam: None, extra: None })
}
