//! Stage implementations shared by the subcommands.
//!
//! Every stage writes its artifacts into a directory and returns what the
//! next stage needs in memory. Private runs read the data only inside
//! [`pretrain_stage`]; later stages see the noisy targets and a reference
//! sample drawn from the pretrained model.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tabsynth::compile::{compile, finetune, CompiledSpec};
use tabsynth::eval::{evaluate, rejection_sample, EvalReport, RejectionStats};
use tabsynth::generator::Generator;
use tabsynth::lang::{check, TypedProgram};
use tabsynth::pretrain::{pretrain, PretrainConfig};
use tabsynth::privacy::{dp_pretrain, DpConfig};
use tabsynth::schema::{marginal_workload, measure_workload, EncodedTable, MarginalSpec, MarginalVector, Schema, WorkloadMode};

use crate::artifacts::{sha256_file, write_atomic, write_with, Manifest, Mode};
use crate::config::{stage_seed, Paths, RunConfig};
use crate::error::{CliError, Result, StageExt};

pub const SCHEMA: &str = "schema.json";
pub const PROGRAM: &str = "program.tsl";
pub const PRETRAINED: &str = "pretrained.ckpt";
pub const FINETUNED: &str = "finetuned.ckpt";
pub const TARGETS: &str = "targets.json";
pub const REFERENCE: &str = "reference.csv";
pub const LEDGER: &str = "ledger.csv";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const FINETUNE_LOG: &str = "finetune_log.csv";

const EMPTY_PROGRAM: &str = "SYNTHESIZE: data;\nEND;\n";

pub fn load_schema(path: &Path) -> Result<Arc<Schema>> {
    Schema::load(path)
        .map(Arc::new)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

/// Source text and checked program; no path means the empty program.
pub fn load_program(path: Option<&Path>, schema: &Schema) -> Result<(String, TypedProgram)> {
    let src = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::invalid(format!("{}: {e}", p.display())))?,
        None => EMPTY_PROGRAM.to_string(),
    };
    let name = path.map(|p| p.display().to_string()).unwrap_or_else(|| "<empty program>".into());
    let program = check(&src, schema).map_err(|e| CliError::invalid(format!("{name}: {e}")))?;
    Ok((src, program))
}

pub fn load_table(path: &Path, schema: &Arc<Schema>) -> Result<EncodedTable> {
    EncodedTable::load_csv(path, schema.clone()).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| CliError::invalid(format!("missing {what} path")))
}

/// Effective privacy parameters: the program decides the mode, flags may
/// replace its budget.
pub fn privacy(program: &TypedProgram, epsilon: Option<f64>, delta: Option<f64>) -> Result<Option<(f64, f64)>> {
    match program.dp {
        Some((e, d)) => {
            let (e, d) = (epsilon.unwrap_or(e), delta.unwrap_or(d));
            tabsynth::privacy::eps_delta_to_rho(e, d).map_err(|err| CliError::invalid(err.to_string()))?;
            Ok(Some((e, d)))
        }
        None if epsilon.is_some() || delta.is_some() => Err(CliError::invalid(
            "--epsilon/--delta need a program with a DIFFERENTIAL PRIVACY command",
        )),
        None => Ok(None),
    }
}

/// Rejects weight overrides that name no spec before any training starts.
pub fn check_lambda(program: &TypedProgram, lambda: &BTreeMap<String, f64>) -> Result<()> {
    for name in lambda.keys() {
        if !program.specs.iter().any(|s| &s.name == name) {
            let known: Vec<&str> = program.specs.iter().map(|s| s.name.as_str()).collect();
            return Err(CliError::invalid(format!(
                "--lambda {name}: no such spec (known: {})",
                known.join(", ")
            )));
        }
    }
    Ok(())
}

/// Pretraining settings for `schema`; label-anchored workloads fall back to
/// all triples when the schema has no label column.
fn pretrain_config(schema: &Schema, cfg: &RunConfig) -> PretrainConfig {
    let mut p = cfg.pretrain.clone();
    if p.workload == WorkloadMode::ThreeWayWithLabel && schema.label_column().is_none() {
        log::warn!("schema has no label column; fitting all three-way marginals");
        p.workload = WorkloadMode::AllThreeWay;
    }
    p
}

pub struct Pretrained {
    pub gen: Generator,
    pub targets: Vec<(MarginalSpec, MarginalVector)>,
    /// Rows the regularizers are compiled against.
    pub reference: EncodedTable,
}

/// Fits a fresh generator to `train` and writes the checkpoint, training
/// log, marginal targets and reference table (plus the privacy ledger in
/// private mode). `cfg` must already carry the stage seeds.
pub fn pretrain_stage(
    dir: &Path,
    train: &EncodedTable,
    dp: Option<(f64, f64)>,
    cfg: &RunConfig,
    init_seed: u64,
    reference_seed: u64,
) -> Result<Pretrained> {
    let schema = train.schema().clone();
    let mut gen = Generator::new(schema.clone(), cfg.generator.clone(), init_seed).map_err(|e| CliError::invalid(e.to_string()))?;
    let (history, targets, reference) = match dp {
        Some((epsilon, delta)) => {
            let dp_cfg = DpConfig {
                epsilon,
                delta,
                ..cfg.dp.clone()
            };
            let out = dp_pretrain(&mut gen, train, &dp_cfg).at("pretrain")?;
            if !out.ledger.audit() {
                return Err(CliError::Stage {
                    stage: "pretrain",
                    message: "privacy ledger audit failed".into(),
                });
            }
            write_with(&dir.join(LEDGER), |w| out.ledger.write_csv(w))?;
            let n_ref = (out.n_hat.round().max(1.0)) as usize;
            let reference = gen.sample(n_ref, reference_seed);
            (out.history, out.targets, reference)
        }
        None => {
            let p = pretrain_config(&schema, cfg);
            let history = pretrain(&mut gen, train, &p).at("pretrain")?;
            let workload = marginal_workload(&schema, p.workload, p.workload_degrade).at("pretrain")?;
            let targets = measure_workload(train, &workload).at("pretrain")?;
            (history, targets, train.clone())
        }
    };
    write_with(&dir.join(PRETRAIN_LOG), |w| history.write_csv(w))?;
    write_with(&dir.join(TARGETS), |w| serde_json::to_writer_pretty(w, &targets))?;
    write_with(&dir.join(REFERENCE), |w| reference.write_csv(w))?;
    write_atomic(&dir.join(SCHEMA), schema.to_json().as_bytes())?;
    write_atomic(&dir.join(PRETRAINED), &gen.to_bytes())?;
    if let Some(tv) = history.last_tv() {
        log::info!("pretraining done: final mean TV {tv:.4}");
    }
    Ok(Pretrained { gen, targets, reference })
}

/// Reloads what [`pretrain_stage`] wrote.
pub fn load_pretrained(dir: &Path) -> Result<Pretrained> {
    let schema = load_schema(&dir.join(SCHEMA))?;
    let gen = Generator::load(dir.join(PRETRAINED), schema.clone()).map_err(|e| CliError::invalid(e.to_string()))?;
    let text = std::fs::read_to_string(dir.join(TARGETS)).map_err(|e| CliError::invalid(format!("{TARGETS}: {e}")))?;
    let raw: Vec<(MarginalSpec, MarginalVector)> = serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{TARGETS}: {e}")))?;
    let mut targets = Vec::with_capacity(raw.len());
    for (spec, values) in raw {
        let spec = MarginalSpec::new(spec.features().to_vec(), &schema).map_err(|e| CliError::invalid(format!("{TARGETS}: {e}")))?;
        if values.len() != spec.domain_size(&schema) {
            return Err(CliError::invalid(format!(
                "{TARGETS}: marginal {} has the wrong length",
                spec.label(&schema)
            )));
        }
        targets.push((spec, values));
    }
    let reference = load_table(&dir.join(REFERENCE), &schema)?;
    Ok(Pretrained { gen, targets, reference })
}

/// Compiles the program against the reference rows.
pub fn compile_specs(program: &TypedProgram, reference: &EncodedTable, cfg: &RunConfig) -> Result<Vec<CompiledSpec>> {
    compile(program, reference, &cfg.lambda, &cfg.compile).map_err(|e| CliError::invalid(e.to_string()))
}

/// Fine-tunes in place and writes the checkpoint and per-epoch log.
pub fn finetune_stage(dir: &Path, pre: &mut Pretrained, specs: &[CompiledSpec], cfg: &RunConfig) -> Result<()> {
    let log = finetune(&mut pre.gen, specs, &pre.targets, &cfg.finetune).at("finetune")?;
    write_with(&dir.join(FINETUNE_LOG), |w| log.write_csv(w))?;
    write_atomic(&dir.join(FINETUNED), &pre.gen.to_bytes())?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub stats: RejectionStats,
}

/// Rejection-samples `n` rows into `path` and records the stats next to it.
pub fn sample_stage(
    path: &Path,
    gen: &Generator,
    specs: &[CompiledSpec],
    n: usize,
    max_rounds: usize,
    seed: u64,
) -> Result<RejectionStats> {
    let (table, stats) = rejection_sample(gen, specs, n, max_rounds, seed).at("sample")?;
    write_with(path, |w| table.write_csv(w))?;
    let record = SampleRecord {
        seed,
        stats: stats.clone(),
    };
    write_with(&path.with_extension("json"), |w| serde_json::to_writer_pretty(w, &record))?;
    log::info!(
        "sampled {} rows in {} rounds (acceptance {:.4})",
        stats.accepted,
        stats.rounds,
        stats.acceptance_rate
    );
    Ok(stats)
}

/// Scores the synthetic CSV at `synthetic` (re-read from disk) and writes
/// `<stem>.txt` and `<stem>.csv` reports into `dir`.
pub fn eval_stage(
    dir: &Path,
    stem: &str,
    synthetic: &Path,
    train: &EncodedTable,
    test: &EncodedTable,
    specs: &[CompiledSpec],
    cfg: &RunConfig,
    seeds: BTreeMap<String, u64>,
) -> Result<EvalReport> {
    let synth = load_table(synthetic, train.schema()).map_err(|e| CliError::Stage {
        stage: "eval",
        message: e.to_string(),
    })?;
    let report = evaluate(&synth, train, test, specs, &cfg.verify, seeds).at("eval")?;
    write_atomic(&dir.join(format!("{stem}.txt")), report.render_text().as_bytes())?;
    write_with(&dir.join(format!("{stem}.csv")), |w| report.write_csv(w))?;
    Ok(report)
}

/// Inputs of a full pipeline run.
pub struct RunRequest {
    pub paths: Paths,
    pub config: RunConfig,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
}

/// Pretrain, fine-tune (when the program has specs), sample and evaluate,
/// `repeats x samples` times, into `out/run-<manifest id>`.
pub fn run_pipeline(req: RunRequest) -> Result<PathBuf> {
    let RunRequest {
        paths,
        config: cfg,
        epsilon,
        delta,
    } = req;
    cfg.validate()?;
    let schema_path = require(&paths.schema, "schema")?;
    let data_path = require(&paths.data, "data")?;
    let out = require(&paths.out, "output")?;
    let schema = load_schema(schema_path)?;
    let (_, program) = load_program(paths.program.as_deref(), &schema)?;
    check_lambda(&program, &cfg.lambda)?;
    let dp = privacy(&program, epsilon, delta)?;
    let data = load_table(data_path, &schema)?;
    let (train, test) = match &paths.test {
        Some(p) => (data, load_table(p, &schema)?),
        None => data.split(cfg.test_fraction, stage_seed(cfg.seed, "split", 0)),
    };
    if train.n_rows() == 0 || test.n_rows() == 0 {
        return Err(CliError::invalid("training and test data must both be non-empty"));
    }

    let mode = if dp.is_some() { Mode::Dp } else { Mode::Nonprivate };
    let mut manifest = Manifest::new("run", mode, cfg.clone());
    manifest.privacy = dp;
    manifest.inputs.insert("schema".into(), sha256_file(schema_path)?);
    manifest.inputs.insert("data".into(), sha256_file(data_path)?);
    if let Some(p) = &paths.test {
        manifest.inputs.insert("test".into(), sha256_file(p)?);
    }
    if let Some(p) = &paths.program {
        manifest.inputs.insert("program".into(), sha256_file(p)?);
    }
    let mut seed_plan = Vec::new();
    for r in 0..cfg.repeats {
        let seeded = cfg.seeded(r);
        let mut seeds = BTreeMap::from([
            ("init".to_string(), stage_seed(cfg.seed, "init", r)),
            ("pretrain".to_string(), seeded.pretrain.seed),
            ("reference".to_string(), stage_seed(cfg.seed, "reference", r)),
            ("compile".to_string(), seeded.compile.seed),
            ("finetune".to_string(), seeded.finetune.seed),
        ]);
        for s in 0..cfg.samples {
            seeds.insert(format!("sample{s}"), stage_seed(cfg.seed, &format!("sample{s}"), r));
        }
        for (k, v) in &seeds {
            manifest.seeds.insert(format!("{k}/{r}"), *v);
        }
        seed_plan.push((seeded, seeds));
    }
    let dir = manifest.open_dir(out)?;
    if let Some(p) = &paths.program {
        std::fs::copy(p, dir.join(PROGRAM)).at("output")?;
    }
    log::info!("run directory {}", dir.display());

    let n = cfg.n_samples.unwrap_or(train.n_rows());
    let mut reports = Vec::new();
    for (r, (seeded, seeds)) in seed_plan.into_iter().enumerate() {
        let sub = if cfg.repeats > 1 {
            dir.join(format!("rep{r}"))
        } else {
            dir.clone()
        };
        std::fs::create_dir_all(&sub).at("output")?;
        let mut pre = pretrain_stage(&sub, &train, dp, &seeded, seeds["init"], seeds["reference"])?;
        let specs = compile_specs(&program, &pre.reference, &seeded)?;
        if !specs.is_empty() {
            finetune_stage(&sub, &mut pre, &specs, &seeded)?;
        }
        for s in 0..cfg.samples {
            let suffix = if cfg.samples > 1 { format!("_{s}") } else { String::new() };
            let sample_seed = seeds[&format!("sample{s}")];
            let csv = sub.join(format!("synthetic{suffix}.csv"));
            sample_stage(&csv, &pre.gen, &specs, n, cfg.max_rounds, sample_seed)?;
            let report_seeds = BTreeMap::from([
                ("pretrain".to_string(), seeds["pretrain"]),
                ("finetune".to_string(), seeds["finetune"]),
                ("sample".to_string(), sample_seed),
            ]);
            reports.push(eval_stage(
                &sub,
                &format!("report{suffix}"),
                &csv,
                &train,
                &test,
                &specs,
                &seeded,
                report_seeds,
            )?);
        }
    }
    if reports.len() > 1 {
        write_with(&dir.join("summary.csv"), |w| write_summary(&reports, w))?;
    }
    Ok(dir)
}

/// Mean and sample standard deviation of every numeric report metric.
fn write_summary(reports: &[EvalReport], w: &mut Vec<u8>) -> std::result::Result<(), tabsynth::eval::EvalError> {
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in reports {
        let mut buf = Vec::new();
        r.write_csv(&mut buf)?;
        let mut rdr = csv::ReaderBuilder::new().from_reader(buf.as_slice());
        for rec in rdr.records() {
            let rec = rec?;
            if let Ok(v) = rec[1].parse::<f64>() {
                if !columns.contains_key(&rec[0]) {
                    order.push(rec[0].to_string());
                }
                columns.entry(rec[0].to_string()).or_default().push(v);
            }
        }
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["metric", "mean", "std", "count"])?;
    for name in order {
        let vals = &columns[&name];
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        wtr.write_record([name, mean.to_string(), std.to_string(), vals.len().to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
