use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tabsynth::compile::{CompileOptions, FinetuneConfig, VerifyConfig};
use tabsynth::generator::GeneratorConfig;
use tabsynth::pretrain::PretrainConfig;
use tabsynth::privacy::DpConfig;

use crate::error::{CliError, Result};

/// Input locations. Relative paths in a config file resolve against the
/// file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub program: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        for p in [&mut self.data, &mut self.test, &mut self.schema, &mut self.program, &mut self.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// CLI values win over file values.
    pub fn merge(&mut self, flags: &Paths) {
        let pairs = [
            (&mut self.data, &flags.data),
            (&mut self.test, &flags.test),
            (&mut self.schema, &flags.schema),
            (&mut self.program, &flags.program),
            (&mut self.out, &flags.out),
        ];
        for (mine, theirs) in pairs {
            if theirs.is_some() {
                mine.clone_from(theirs);
            }
        }
    }
}

/// Everything that shapes the artifacts of a run apart from input files.
///
/// Stage seeds inside the nested sections are ignored; they are derived
/// from `seed` (see [`stage_seed`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Share of the data held out for evaluation when no test file is given.
    pub test_fraction: f64,
    /// Rows to sample; defaults to the number of training rows.
    pub n_samples: Option<usize>,
    pub max_rounds: usize,
    /// Independent pretrain and fine-tune repetitions.
    pub repeats: usize,
    /// Samples drawn from each repetition.
    pub samples: usize,
    pub generator: GeneratorConfig,
    pub pretrain: PretrainConfig,
    pub dp: DpConfig,
    pub finetune: FinetuneConfig,
    pub compile: CompileOptions,
    pub verify: VerifyConfig,
    /// Per-spec weight overrides.
    pub lambda: BTreeMap<String, f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            test_fraction: 0.2,
            n_samples: None,
            max_rounds: 50,
            repeats: 1,
            samples: 1,
            generator: GeneratorConfig::default(),
            pretrain: PretrainConfig::default(),
            dp: DpConfig::default(),
            finetune: FinetuneConfig::default(),
            compile: CompileOptions::default(),
            verify: VerifyConfig::default(),
            lambda: BTreeMap::new(),
        }
    }
}

/// Reads an optional TOML config file. The `[paths]` table holds input
/// locations; every other key belongs to [`RunConfig`].
pub fn load(path: Option<&Path>) -> Result<(Paths, RunConfig)> {
    let Some(path) = path else {
        return Ok((Paths::default(), RunConfig::default()));
    };
    let bad = |e: &dyn std::fmt::Display| CliError::invalid(format!("{}: {e}", path.display()));
    let text = std::fs::read_to_string(path).map_err(|e| bad(&e))?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| bad(&e))?;
    let mut paths = match table.remove("paths") {
        Some(v) => v.try_into::<Paths>().map_err(|e| bad(&e))?,
        None => Paths::default(),
    };
    let run: RunConfig = toml::Value::Table(table).try_into().map_err(|e| bad(&e))?;
    paths.rebase(path.parent().unwrap_or(Path::new(".")));
    Ok((paths, run))
}

/// Hyperparameter flags shared by the training subcommands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Master seed; every stage seed is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pretraining epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Generator batch size for pretraining and fine-tuning.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate for pretraining and fine-tuning.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Privacy budget; only valid when the program requests privacy.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Spend leftover privacy budget on a final measurement round.
    #[arg(long)]
    pub spend_remainder: Option<bool>,
    /// Fall back to narrower marginals for tables with fewer than three columns.
    #[arg(long)]
    pub workload_degrade: bool,
    /// Spec weight override, repeatable.
    #[arg(long = "lambda", value_name = "NAME=VALUE", value_parser = parse_lambda)]
    pub lambda: Vec<(String, f64)>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
}

fn parse_lambda(s: &str) -> std::result::Result<(String, f64), String> {
    let (name, value) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got `{s}`"))?;
    let value: f64 = value.trim().parse().map_err(|e| format!("`{value}`: {e}"))?;
    Ok((name.trim().to_string(), value))
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.pretrain.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.pretrain.batch_size = v;
            cfg.finetune.batch_size = v;
            cfg.dp.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.pretrain.lr = v;
            cfg.finetune.lr = v;
            cfg.dp.lr = v;
        }
        if let Some(v) = self.finetune_epochs {
            cfg.finetune.epochs = v;
        }
        if let Some(v) = self.spend_remainder {
            cfg.dp.spend_remainder = v;
        }
        if self.workload_degrade {
            cfg.pretrain.workload_degrade = true;
        }
        for (name, value) in &self.lambda {
            cfg.lambda.insert(name.clone(), *value);
        }
        if let Some(v) = self.n_samples {
            cfg.n_samples = Some(v);
        }
        if let Some(v) = self.max_rounds {
            cfg.max_rounds = v;
        }
        if let Some(v) = self.repeats {
            cfg.repeats = v;
        }
        if let Some(v) = self.samples {
            cfg.samples = v;
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CliError::invalid("test_fraction must lie in (0, 1)"));
        }
        if self.max_rounds == 0 || self.repeats == 0 || self.samples == 0 {
            return Err(CliError::invalid("max_rounds, repeats and samples must be at least 1"));
        }
        if self.n_samples == Some(0) {
            return Err(CliError::invalid("n_samples must be at least 1"));
        }
        self.pretrain.validate().map_err(|e| CliError::invalid(e.to_string()))?;
        for (name, w) in &self.lambda {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(CliError::invalid(format!("lambda {name}={w} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Copy with the stage seeds of repetition `repeat` filled in.
    pub fn seeded(&self, repeat: usize) -> RunConfig {
        let mut c = self.clone();
        c.pretrain.seed = stage_seed(self.seed, "pretrain", repeat);
        c.dp.seed = stage_seed(self.seed, "pretrain", repeat);
        c.finetune.seed = stage_seed(self.seed, "finetune", repeat);
        c.compile.seed = stage_seed(self.seed, "compile", repeat);
        c
    }
}

/// First eight bytes of `SHA-256(seed || stage || repeat)`.
pub fn stage_seed(seed: u64, stage: &str, repeat: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    h.update((repeat as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest is 32 bytes"))
}
