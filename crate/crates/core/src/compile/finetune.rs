use std::io::Write;

use serde::{Deserialize, Serialize};

use super::spec::{weighted_penalty, CompiledSpec};
use super::CompileError;
use crate::generator::Generator;
use crate::grad::{Adam, AdamConfig, GradError};
use crate::pretrain::{fit_marginals, FitState, PretrainConfig};
use crate::schema::{MarginalSpec, MarginalVector, WorkloadMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub group_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 15_000,
            epochs: 100,
            group_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    fn as_fit(&self) -> PretrainConfig {
        PretrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            group_size: self.group_size,
            lr: self.lr,
            seed: self.seed,
            workload: WorkloadMode::ThreeWayWithLabel,
            workload_degrade: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub mean_tv: f64,
    /// Per spec, mean unweighted loss over the epoch (`None` when inactive).
    pub losses: Vec<Option<f64>>,
    /// Per spec, mean hard metric of the training batches.
    pub metrics: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub spec_names: Vec<String>,
    pub epochs: Vec<FinetuneEpoch>,
}

impl FinetuneLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = vec!["epoch".to_string(), "mean_tv".to_string()];
        for n in &self.spec_names {
            header.push(format!("{n}_loss"));
            header.push(format!("{n}_metric"));
        }
        writeln!(w, "{}", header.join(","))?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string(), e.mean_tv.to_string()];
            for (l, m) in e.losses.iter().zip(&e.metrics) {
                row.push(cell(*l));
                row.push(cell(*m));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&FinetuneEpoch> {
        self.epochs.last()
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Minimizes `L_M + sum_i lambda_i * s_i * L_i` starting from the current
/// parameters. Specs with zero weight are skipped, so an all-zero program
/// performs exactly the marginal-matching updates.
pub fn finetune(
    gen: &mut Generator,
    specs: &[CompiledSpec],
    targets: &[(MarginalSpec, MarginalVector)],
    config: &FinetuneConfig,
) -> Result<FinetuneLog, CompileError> {
    let schema = gen.schema().clone();
    let mut steps: Vec<Vec<Option<(f64, Option<f64>)>>> = Vec::new();
    let mut failure: Option<CompileError> = None;
    let mut extra = |tape: &mut crate::grad::Tape, batch| -> Result<_, GradError> {
        match weighted_penalty(specs, tape, batch, &schema) {
            Ok((total, evals)) => {
                steps.push(evals.iter().map(|e| e.map(|e| (tape.scalar_value(e.loss), e.metric))).collect());
                Ok(total)
            }
            Err(CompileError::Grad(e)) => Err(e),
            Err(e) => {
                failure = Some(e);
                Err(GradError::DomainError { op: "spec" })
            }
        }
    };
    let mut adam = Adam::new(gen.params(), AdamConfig::default());
    let result = fit_marginals(
        gen,
        targets,
        &config.as_fit(),
        FitState {
            adam: Some(&mut adam),
            extra: Some(&mut extra),
        },
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let history = result?;
    let per_epoch = targets.len().div_ceil(config.group_size.max(1));
    let epochs = history
        .epochs
        .iter()
        .zip(steps.chunks(per_epoch.max(1)))
        .map(|(h, chunk)| FinetuneEpoch {
            epoch: h.epoch,
            mean_tv: h.mean_tv,
            losses: (0..specs.len()).map(|i| mean(chunk.iter().map(|s| s[i].map(|x| x.0)))).collect(),
            metrics: (0..specs.len())
                .map(|i| mean(chunk.iter().map(|s| s[i].and_then(|x| x.1))))
                .collect(),
        })
        .collect();
    Ok(FinetuneLog {
        spec_names: specs.iter().map(|s| s.name.clone()).collect(),
        epochs,
    })
}
