use std::collections::BTreeMap;
use std::sync::Arc;

use tabsynth::compile::{compile, finetune, CompileOptions, FinetuneConfig, VerifyConfig};
use tabsynth::datasets::{product_table, toy_adult, toy_adult_schema};
use tabsynth::eval::{downstream_eval, evaluate, export_for_external_eval, rejection_sample, EvalError, ExportManifest, LogisticModel};
use tabsynth::generator::{Generator, GeneratorConfig};
use tabsynth::lang::check;
use tabsynth::pretrain::{fit_marginals, FitState, PretrainConfig};
use tabsynth::schema::{marginal_workload, measure_workload, ColumnSpec, EncodedTable, Role, Schema, WorkloadMode};

fn small_gen(schema: Arc<Schema>, seed: u64) -> Generator {
    let cfg = GeneratorConfig {
        noise_dim: 16,
        hidden: vec![32, 32],
        temperature: 1.0,
    };
    Generator::new(schema, cfg, seed).unwrap()
}

fn xy_schema() -> Arc<Schema> {
    Arc::new(
        Schema::new(vec![
            ColumnSpec::categorical("x", &["a", "b"]),
            ColumnSpec::categorical("noise", &["0", "1"]),
            ColumnSpec::categorical("y", &["no", "yes"]).with_role(Role::Label),
        ])
        .unwrap(),
    )
}

#[test]
fn separable_target_is_learned_exactly() {
    let rows: Vec<Vec<usize>> = (0..400).map(|i| vec![i % 2, (i / 2) % 2, i % 2]).collect();
    let t = EncodedTable::from_codes(&rows, xy_schema()).unwrap();
    let s = downstream_eval(&t, &t, 2).unwrap();
    assert_eq!(s.accuracy, 1.0);
    assert_eq!(s.balanced_accuracy, 1.0);
}

#[test]
fn independent_target_scores_near_chance() {
    let train = product_table(&[0.5, 0.5, 0.5, 0.5], 4000, 1);
    let test = product_table(&[0.5, 0.5, 0.5, 0.5], 4000, 2);
    let s = downstream_eval(&train, &test, 3).unwrap();
    assert!((s.balanced_accuracy - 0.5).abs() < 0.04, "{s:?}");
}

#[test]
fn single_class_training_is_an_error() {
    let rows: Vec<Vec<usize>> = (0..50).map(|i| vec![i % 2, 0, 1]).collect();
    let t = EncodedTable::from_codes(&rows, xy_schema()).unwrap();
    assert!(matches!(LogisticModel::fit(&t, 2, &[0, 1]), Err(EvalError::SingleClassTrain)));
}

#[test]
fn rejection_output_satisfies_every_row_spec() {
    let schema = Arc::new(toy_adult_schema());
    let data = toy_adult(500, 3, 0.8);
    let prog = check(
        "SYNTHESIZE: A; ENFORCE: ROW CONSTRAINT: age > 35 AND age < 55; ENFORCE: IMPLICATION: sex == Male IMPLIES relationship != Wife; END;",
        &schema,
    )
    .unwrap();
    let specs = compile(&prog, &data, &BTreeMap::new(), &CompileOptions::default()).unwrap();
    let gen = small_gen(schema, 5);
    let (t, stats) = rejection_sample(&gen, &specs, 3000, 50, 9).unwrap();
    assert_eq!(t.n_rows(), 3000);
    assert_eq!(stats.accepted, 3000);
    assert!(stats.acceptance_rate > 0.0 && stats.acceptance_rate < 1.0);
    for r in 0..t.n_rows() {
        assert!(specs.iter().all(|s| s.row_ok(&t.row_codes(r)) == Some(true)));
    }
    for s in &specs {
        assert_eq!(s.verify(&t, &VerifyConfig::default()).unwrap().metric, Some(1.0));
    }
    let (a, _) = rejection_sample(&gen, &specs, 200, 50, 4).unwrap();
    let (b, _) = rejection_sample(&gen, &specs, 200, 50, 4).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn unsatisfiable_constraint_stops_early() {
    let schema = Arc::new(toy_adult_schema());
    let data = toy_adult(200, 3, 0.8);
    let prog = check(
        "SYNTHESIZE: A; ENFORCE: ROW CONSTRAINT: sex == Male AND sex == Female; END;",
        &schema,
    )
    .unwrap();
    let specs = compile(&prog, &data, &BTreeMap::new(), &CompileOptions::default()).unwrap();
    let gen = small_gen(schema, 5);
    assert!(matches!(
        rejection_sample(&gen, &specs, 10, 50, 1),
        Err(EvalError::AcceptanceTooLow { .. })
    ));
    assert!(matches!(
        rejection_sample(&gen, &specs, 10, 2, 1),
        Err(EvalError::RoundsExhausted { accepted: 0, .. })
    ));
}

#[test]
fn export_round_trips() {
    let data = toy_adult(300, 8, 0.8);
    let train = data.select_rows(&(0..200).collect::<Vec<_>>());
    let test = data.select_rows(&(200..300).collect::<Vec<_>>());
    let dir = tempfile::tempdir().unwrap();
    let path = export_for_external_eval(&train, &test, dir.path(), 17).unwrap();
    let manifest: ExportManifest = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(manifest.seed, 17);
    assert_eq!(manifest.schema_hash, train.schema().hash_hex());
    assert_eq!((manifest.train_rows, manifest.test_rows), (200, 100));
    let back = EncodedTable::load_csv(dir.path().join(&manifest.train_file), train.schema().clone()).unwrap();
    assert_eq!(back.data(), train.data());
    let back = EncodedTable::load_csv(dir.path().join(&manifest.test_file), test.schema().clone()).unwrap();
    assert_eq!(back.data(), test.data());
}

#[test]
fn report_is_reproducible() {
    let data = toy_adult(3000, 2, 0.8);
    let train = data.select_rows(&(0..2000).collect::<Vec<_>>());
    let test = data.select_rows(&(2000..3000).collect::<Vec<_>>());
    let gen = small_gen(train.schema().clone(), 1);
    let synth = gen.sample(2000, 3);
    let prog = check(
        "SYNTHESIZE: A; ENFORCE: STATISTICAL: E[age] == 30; MINIMIZE: FAIRNESS: DEMOGRAPHIC_PARITY(); END;",
        train.schema(),
    )
    .unwrap();
    let specs = compile(&prog, &train, &BTreeMap::new(), &CompileOptions::default()).unwrap();
    let seeds: BTreeMap<String, u64> = [("sample".to_string(), 3)].into();
    let a = evaluate(&synth, &train, &test, &specs, &VerifyConfig::default(), seeds.clone()).unwrap();
    let b = evaluate(&synth, &train, &test, &specs, &VerifyConfig::default(), seeds).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.render_text(), b.render_text());
    assert_eq!(a.target.as_deref(), Some("salary"));
    assert_eq!(a.protected.as_deref(), Some("sex"));
    assert_eq!(a.specs.len(), 2);
    let mut csv = Vec::new();
    a.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("metric,value\n"));
    assert!(text.contains("workload_mean_tv,"));

    let self_report = evaluate(&train, &train, &test, &[], &VerifyConfig::default(), BTreeMap::new()).unwrap();
    assert_eq!(self_report.workload_mean_tv, 0.0);
}

#[test]
fn zero_weights_reproduce_pretraining_bitwise() {
    let data = toy_adult(600, 4, 0.8);
    let schema = data.schema().clone();
    let prog = check(
        "SYNTHESIZE: A; ENFORCE: ROW CONSTRAINT: age > 35; MINIMIZE: FAIRNESS: DEMOGRAPHIC_PARITY(); ENFORCE: STATISTICAL: E[age] == 30; END;",
        &schema,
    )
    .unwrap();
    let opts = CompileOptions {
        default_weight: 0.0,
        ..Default::default()
    };
    let specs = compile(&prog, &data, &BTreeMap::new(), &opts).unwrap();
    let wl = marginal_workload(&schema, WorkloadMode::ThreeWayWithLabel, false).unwrap();
    let targets = measure_workload(&data, &wl).unwrap();
    let base = small_gen(schema, 2);

    let fc = FinetuneConfig {
        batch_size: 128,
        epochs: 3,
        group_size: 4,
        lr: 1e-3,
        seed: 6,
    };
    let mut a = base.clone();
    let log = finetune(&mut a, &specs, &targets, &fc).unwrap();
    assert!(log.epochs.iter().all(|e| e.losses.iter().all(Option::is_none)));

    let pc = PretrainConfig {
        batch_size: 128,
        epochs: 3,
        group_size: 4,
        lr: 1e-3,
        seed: 6,
        ..Default::default()
    };
    let mut b = base.clone();
    fit_marginals(&mut b, &targets, &pc, FitState { adam: None, extra: None }).unwrap();
    for (x, y) in a.params().iter().zip(b.params()) {
        assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert_ne!(a.params()[0], base.params()[0]);
}
