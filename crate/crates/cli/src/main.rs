mod artifacts;
mod config;
mod error;
mod pipeline;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tabsynth::compile::{tune_weights, TuneConfig};
use tabsynth::eval::export_for_external_eval;
use tabsynth::generator::Generator;
use tabsynth::lang::{format_program, parse, TypedKind};
use tabsynth::schema::EncodedTable;

use crate::artifacts::{sha256_file, write_atomic, Manifest, Mode};
use crate::config::{stage_seed, Overrides, Paths, RunConfig};
use crate::error::{CliError, Result, StageExt};
use crate::pipeline::*;

/// Synthetic tabular data with user-specified constraints.
///
/// Exit codes: 0 success, 1 runtime failure, 2 invalid input.
#[derive(Parser)]
#[command(name = "tabsynth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, fine-tune, sample and evaluate in one run directory.
    Run(TrainArgs),
    /// Pretrain a generator on the data (privately if the program asks for it).
    Synth(TrainArgs),
    /// Fine-tune a pretrained generator towards the program's specs.
    Finetune(FinetuneArgs),
    /// Draw rows from a checkpoint, rejecting rows that break row-level specs.
    Sample(SampleArgs),
    /// Score a synthetic table against real train and test data.
    Eval(EvalArgs),
    /// Pick spec weights by k-fold cross-validation.
    Tune(TuneArgs),
    /// Write decoded train/test CSVs and a manifest for an external evaluator.
    Export(ExportArgs),
    /// Print programs in canonical form.
    Fmt(FmtArgs),
    /// Parse and validate programs against a schema.
    Check(CheckArgs),
}

#[derive(Args, Clone, Default)]
struct PathArgs {
    /// Training data CSV with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out test CSV; without it a share of the data is held out.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Schema JSON.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Program file; without it the empty program is used.
    #[arg(long)]
    program: Option<PathBuf>,
    /// Root under which run directories are created.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl PathArgs {
    fn paths(&self) -> Paths {
        Paths {
            data: self.data.clone(),
            test: self.test.clone(),
            schema: self.schema.clone(),
            program: self.program.clone(),
            out: self.out.clone(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    paths: PathArgs,
    #[command(flatten)]
    overrides: Overrides,
}

impl TrainArgs {
    fn resolve(&self) -> Result<(Paths, RunConfig)> {
        let (mut paths, mut cfg) = config::load(self.config.as_deref())?;
        paths.merge(&self.paths.paths());
        self.overrides.apply(&mut cfg);
        cfg.validate()?;
        Ok((paths, cfg))
    }
}

#[derive(Args)]
struct FinetuneArgs {
    /// Directory written by `synth`.
    #[arg(long)]
    pretrained: PathBuf,
    #[arg(long)]
    program: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Program whose row constraints and implications are enforced.
    #[arg(long)]
    program: Option<PathBuf>,
    /// Output CSV; stats go to a JSON file beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    n_samples: usize,
    #[arg(long, default_value_t = 50)]
    max_rounds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Program whose specs are verified on the synthetic table.
    #[arg(long)]
    program: Option<PathBuf>,
    /// Directory for report.txt and report.csv.
    #[arg(long)]
    out: PathBuf,
    /// Seed recorded in the report.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Candidate weights for one spec, e.g. `spec1=1,3,10`; repeatable.
    #[arg(long = "grid", value_name = "NAME=V1,V2,...", required = true, value_parser = parse_grid)]
    grid: Vec<(String, Vec<f64>)>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Score every fold instead of the first only.
    #[arg(long)]
    all_folds: bool,
}

fn parse_grid(s: &str) -> std::result::Result<(String, Vec<f64>), String> {
    let (name, values) = s.split_once('=').ok_or_else(|| format!("expected NAME=V1,V2,..., got `{s}`"))?;
    let values = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((name.trim().to_string(), values))
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FmtArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Rewrite files in place.
    #[arg(long, conflicts_with = "check")]
    write: bool,
    /// Fail when a file is not in canonical form.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Export(a) => cmd_export(a),
        Command::Fmt(a) => cmd_fmt(a),
        Command::Check(a) => cmd_check(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn cmd_run(a: TrainArgs) -> Result<()> {
    let (paths, config) = a.resolve()?;
    let dir = run_pipeline(RunRequest {
        paths,
        config,
        epsilon: a.overrides.epsilon,
        delta: a.overrides.delta,
    })?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_synth(a: TrainArgs) -> Result<()> {
    let (paths, cfg) = a.resolve()?;
    let schema_path = require(&paths.schema, "schema")?;
    let data_path = require(&paths.data, "data")?;
    let schema = load_schema(schema_path)?;
    let (_, program) = load_program(paths.program.as_deref(), &schema)?;
    let dp = privacy(&program, a.overrides.epsilon, a.overrides.delta)?;
    let train = load_table(data_path, &schema)?;

    let seeded = cfg.seeded(0);
    let mut manifest = Manifest::new("synth", if dp.is_some() { Mode::Dp } else { Mode::Nonprivate }, cfg.clone());
    manifest.privacy = dp;
    manifest.inputs.insert("schema".into(), sha256_file(schema_path)?);
    manifest.inputs.insert("data".into(), sha256_file(data_path)?);
    if let Some(p) = &paths.program {
        manifest.inputs.insert("program".into(), sha256_file(p)?);
    }
    let (init, reference) = (stage_seed(cfg.seed, "init", 0), stage_seed(cfg.seed, "reference", 0));
    manifest.seeds = BTreeMap::from([
        ("init".to_string(), init),
        ("pretrain".to_string(), seeded.pretrain.seed),
        ("reference".to_string(), reference),
    ]);
    let dir = manifest.open_dir(require(&paths.out, "output")?)?;
    pretrain_stage(&dir, &train, dp, &seeded, init, reference)?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let (_, mut cfg) = config::load(a.config.as_deref())?;
    a.overrides.apply(&mut cfg);
    cfg.validate()?;
    let base: Manifest = serde_json::from_str(
        &std::fs::read_to_string(a.pretrained.join(artifacts::MANIFEST))
            .map_err(|e| CliError::invalid(format!("{}: {e}", a.pretrained.display())))?,
    )
    .map_err(|e| CliError::invalid(format!("{}: {e}", a.pretrained.display())))?;
    let mut pre = load_pretrained(&a.pretrained)?;
    let schema = pre.gen.schema().clone();
    let (_, program) = load_program(Some(&a.program), &schema)?;
    if program.dp.is_some() && base.mode != Mode::Dp {
        return Err(CliError::invalid(
            "the program asks for privacy but the generator was pretrained without it",
        ));
    }
    check_lambda(&program, &cfg.lambda)?;
    let seeded = cfg.seeded(0);

    let mut manifest = Manifest::new("finetune", base.mode, cfg.clone());
    manifest.privacy = base.privacy;
    for name in [PRETRAINED, TARGETS, REFERENCE] {
        manifest.inputs.insert(name.into(), sha256_file(&a.pretrained.join(name))?);
    }
    manifest.inputs.insert("program".into(), sha256_file(&a.program)?);
    manifest.seeds = BTreeMap::from([
        ("compile".to_string(), seeded.compile.seed),
        ("finetune".to_string(), seeded.finetune.seed),
    ]);
    let dir = manifest.open_dir(&a.out)?;
    write_atomic(&dir.join(SCHEMA), schema.to_json().as_bytes())?;
    std::fs::copy(&a.program, dir.join(PROGRAM)).at("output")?;
    let specs = compile_specs(&program, &pre.reference, &seeded)?;
    finetune_stage(&dir, &mut pre, &specs, &seeded)?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    if a.n_samples == 0 || a.max_rounds == 0 {
        return Err(CliError::invalid("--n-samples and --max-rounds must be at least 1"));
    }
    let schema = load_schema(&a.schema)?;
    let gen = Generator::load(&a.checkpoint, schema.clone()).map_err(|e| CliError::invalid(format!("{}: {e}", a.checkpoint.display())))?;
    let (_, mut program) = load_program(a.program.as_deref(), &schema)?;
    // Only row-level specs take part in rejection, and they ignore the reference table.
    program
        .specs
        .retain(|s| matches!(s.kind, TypedKind::Row(_) | TypedKind::Implication { .. }));
    let specs = compile_specs(&program, &EncodedTable::empty(schema), &RunConfig::default())?;
    let stats = sample_stage(&a.out, &gen, &specs, a.n_samples, a.max_rounds, a.seed)?;
    println!(
        "{} rows in {} rounds, acceptance {:.4}",
        stats.accepted, stats.rounds, stats.acceptance_rate
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let schema = load_schema(&a.schema)?;
    let (_, program) = load_program(a.program.as_deref(), &schema)?;
    let train = load_table(&a.train, &schema)?;
    let test = load_table(&a.test, &schema)?;
    let cfg = RunConfig::default();
    let specs = compile_specs(&program, &train, &cfg)?;
    std::fs::create_dir_all(&a.out).at("output")?;
    let seeds = a.seed.map(|s| BTreeMap::from([("sample".to_string(), s)])).unwrap_or_default();
    let report = eval_stage(&a.out, "report", &a.synthetic, &train, &test, &specs, &cfg, seeds)?;
    print!("{}", report.render_text());
    Ok(())
}

fn cmd_tune(a: TuneArgs) -> Result<()> {
    let (paths, cfg) = a.train.resolve()?;
    let schema = load_schema(require(&paths.schema, "schema")?)?;
    let (_, program) = load_program(Some(require(&paths.program, "program")?), &schema)?;
    if program.dp.is_some() {
        return Err(CliError::invalid(
            "tuning reads the data repeatedly and is not available for private programs",
        ));
    }
    let table = load_table(require(&paths.data, "data")?, &schema)?;
    let grids: BTreeMap<String, Vec<f64>> = a.grid.into_iter().collect();
    check_lambda(&program, &grids.keys().map(|k| (k.clone(), 0.0)).collect())?;
    let seeded = cfg.seeded(0);
    let tune_cfg = TuneConfig {
        k: a.folds,
        all_folds: a.all_folds,
        generator: cfg.generator.clone(),
        pretrain: seeded.pretrain.clone(),
        finetune: seeded.finetune,
        compile: seeded.compile,
        verify: cfg.verify,
        sample_rows: cfg.n_samples.unwrap_or(20_000),
        seed: stage_seed(cfg.seed, "tune", 0),
    };
    let rows = tune_weights(&program, &table, &grids, &tune_cfg).map_err(|e| match e {
        tabsynth::compile::CompileError::InvalidGrid(m) => CliError::invalid(m),
        e => CliError::Stage {
            stage: "tune",
            message: e.to_string(),
        },
    })?;

    let mut header = vec!["fold".to_string()];
    header.extend(grids.keys().cloned());
    header.push("utility".into());
    for s in &program.specs {
        header.push(format!("{}_metric", s.name));
        header.push(format!("{}_satisfied", s.name));
    }
    let mut out = Vec::new();
    {
        let mut wtr = csv::Writer::from_writer(&mut out);
        wtr.write_record(&header).at("tune")?;
        for r in &rows {
            let mut rec = vec![r.fold.to_string()];
            rec.extend(grids.keys().map(|k| r.weights[k].to_string()));
            rec.push(r.utility.map(|u| u.to_string()).unwrap_or_default());
            for v in &r.verdicts {
                rec.push(v.metric.map(|m| m.to_string()).unwrap_or_default());
                rec.push(v.satisfied.map(|b| b.to_string()).unwrap_or_default());
            }
            wtr.write_record(&rec).at("tune")?;
        }
        wtr.flush().at("tune")?;
    }
    match &paths.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).at("output")?;
            write_atomic(&dir.join("tune.csv"), &out)?;
        }
        None => print!("{}", String::from_utf8_lossy(&out)),
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let schema = load_schema(&a.schema)?;
    let train = load_table(&a.train, &schema)?;
    let test = load_table(&a.test, &schema)?;
    let manifest = export_for_external_eval(&train, &test, &a.out, a.seed).at("export")?;
    println!("{}", manifest.display());
    Ok(())
}

fn read_source(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

fn cmd_fmt(a: FmtArgs) -> Result<()> {
    let mut unformatted = Vec::new();
    for path in &a.files {
        let src = read_source(path)?;
        let program = parse(&src).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
        let text = format_program(&program);
        if a.check {
            if text != src {
                unformatted.push(path.display().to_string());
            }
        } else if a.write {
            if text != src {
                write_atomic(path, text.as_bytes())?;
            }
        } else {
            print!("{text}");
        }
    }
    if !unformatted.is_empty() {
        return Err(CliError::Stage {
            stage: "fmt",
            message: format!("not in canonical form: {}", unformatted.join(", ")),
        });
    }
    Ok(())
}

fn cmd_check(a: CheckArgs) -> Result<()> {
    let schema = load_schema(&a.schema)?;
    let mut failures = Vec::new();
    for path in &a.files {
        match load_program(Some(path), &schema) {
            Ok((_, p)) => println!(
                "{}: ok ({} specs{})",
                path.display(),
                p.specs.len(),
                if p.dp.is_some() { ", private" } else { "" }
            ),
            Err(e) => {
                eprintln!("{e}");
                failures.push(path.display().to_string());
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::invalid(format!(
            "{} of {} programs failed",
            failures.len(),
            a.files.len()
        )))
    }
}
