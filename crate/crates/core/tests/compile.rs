use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{arr2, Array2};
use tabsynth::compile::surrogate::{design_matrix, target_column, Reference};
use tabsynth::compile::*;
use tabsynth::datasets::toy_adult;
use tabsynth::grad::{gradient_check, Tape, Tensor};
use tabsynth::lang::ast::{CmpOp, FairnessMetric, StatKind};
use tabsynth::lang::{check, Pred, TypedKind, TypedStat};
use tabsynth::schema::{ColumnSpec, EncodedTable, Schema};

fn binary_schema(names: &[&str]) -> Arc<Schema> {
    Arc::new(Schema::new(names.iter().map(|n| ColumnSpec::categorical(n, &["0", "1"])).collect()).unwrap())
}

fn one_hot(schema: &Arc<Schema>, rows: &[&[usize]]) -> Tensor {
    let codes: Vec<Vec<usize>> = rows.iter().map(|r| r.to_vec()).collect();
    EncodedTable::from_codes(&codes, schema.clone()).unwrap().data().clone()
}

fn pred(src: &str, schema: &Schema) -> Pred {
    let t = check(&format!("SYNTHESIZE: T; ENFORCE: ROW CONSTRAINT: {src}; END;"), schema).unwrap();
    match &t.specs[0].kind {
        TypedKind::Row(p) => p.clone(),
        _ => unreachable!(),
    }
}

fn column(t: &Tape, v: tabsynth::grad::Var) -> Vec<f64> {
    t.value(v).iter().copied().collect()
}

#[test]
fn conjunction_mask_matches_truth_table() {
    let s = binary_schema(&["A", "B"]);
    let mut tape = Tape::new();
    let x = tape.constant(one_hot(&s, &[&[0, 0], &[0, 1], &[1, 1], &[1, 1]]));
    let m = row_mask(&mut tape, x, &s, &pred("A == 1 AND B == 1", &s)).unwrap();
    assert_eq!(column(&tape, m), vec![0.0, 0.0, 1.0, 1.0]);
    let t = row_mask(&mut tape, x, &s, &pred("A == 0 OR A == 1", &s)).unwrap();
    assert_eq!(column(&tape, t), vec![1.0; 4]);
}

#[test]
fn de_morgan_on_full_domain() {
    let s = binary_schema(&["a", "b", "c"]);
    let rows: Vec<Vec<usize>> = (0..8).map(|i| vec![i >> 2 & 1, i >> 1 & 1, i & 1]).collect();
    let refs: Vec<&[usize]> = rows.iter().map(|r| r.as_slice()).collect();
    let mut tape = Tape::new();
    let x = tape.constant(one_hot(&s, &refs));
    let p = pred("a == 1 AND (b == 0 OR c == 1)", &s);
    let lhs = row_mask(&mut tape, x, &s, &p.negate()).unwrap();
    let rhs = row_mask(&mut tape, x, &s, &pred("a == 0 OR b == 1 AND c == 0", &s)).unwrap();
    assert_eq!(column(&tape, lhs), column(&tape, rhs));
    for (r, v) in rows.iter().zip(column(&tape, lhs)) {
        assert_eq!(v == 1.0, !p.eval(r));
    }
}

#[test]
fn row_constraint_loss_counts() {
    let s = binary_schema(&["A", "B"]);
    let p = pred("A == 1", &s);
    let loss = |rows: &[&[usize]]| {
        let mut tape = Tape::new();
        let x = tape.constant(one_hot(&s, rows));
        let l = row_constraint_loss(&mut tape, x, &s, &p).unwrap();
        tape.scalar_value(l)
    };
    assert_eq!(loss(&[&[1, 0], &[1, 1]]), 0.0);
    assert_eq!(loss(&[&[0, 0], &[0, 1]]), 1.0);
    assert_eq!(loss(&[&[1, 0], &[1, 1], &[0, 1], &[1, 1]]), 0.25);
}

#[test]
fn implication_loss_counts() {
    let s = binary_schema(&["A", "B"]);
    let imp = |lhs: &str, rhs: &str, rows: &[&[usize]]| {
        let mut tape = Tape::new();
        let x = tape.constant(one_hot(&s, rows));
        let l = implication_loss(&mut tape, x, &s, &pred(lhs, &s), &pred(rhs, &s)).unwrap();
        tape.scalar_value(l)
    };
    let rows: &[&[usize]] = &[&[1, 0], &[1, 1], &[0, 0]];
    assert!((imp("A == 1", "B == 1", rows) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(imp("A == 1 AND A == 0", "B == 1", rows), 0.0);
    assert_eq!(imp("A == 1 OR B == 1", "A == 1 OR B == 1", rows), 0.0);
}

#[test]
fn conditional_marginal_oracles() {
    // sex, age bin (3 bins)
    let schema = Arc::new(
        Schema::new(vec![
            ColumnSpec::categorical("sex", &["Male", "Female"]),
            ColumnSpec::binned("age", &[18.0, 35.0, 55.0, 80.0]),
        ])
        .unwrap(),
    );
    let rows: &[&[usize]] = &[&[0, 0], &[0, 1], &[1, 2], &[0, 1], &[1, 0], &[0, 2]];
    let mut tape = Tape::new();
    let x = tape.constant(one_hot(&schema, rows));
    let male = pred("sex == Male", &schema);
    let m = conditional_marginal(&mut tape, x, &schema, &[1], Some(&male)).unwrap();
    // males: ages 0, 1, 1, 2
    let expected = [0.25, 0.5, 0.25];
    for (a, b) in column(&tape, m).iter().zip(expected) {
        assert!((a - b).abs() < 1e-9);
    }
    let all = pred("sex == Male OR sex == Female", &schema);
    let c = conditional_marginal(&mut tape, x, &schema, &[0, 1], Some(&all)).unwrap();
    let u = conditional_marginal(&mut tape, x, &schema, &[0, 1], None).unwrap();
    for (a, b) in column(&tape, c).iter().zip(column(&tape, u)) {
        assert!((a - b).abs() < 1e-9);
    }
    let one = pred("sex == Female AND age > 55", &schema);
    let p = conditional_marginal(&mut tape, x, &schema, &[0, 1], Some(&one)).unwrap();
    let v = column(&tape, p);
    assert!((v[5] - 1.0).abs() < 1e-9 && v.iter().sum::<f64>() - 1.0 < 1e-9);
}

#[test]
fn stat_value_examples() {
    let mut tape = Tape::new();
    let uniform = tape.constant(Array2::from_elem((1, 4), 0.25));
    let h = stat_value(&mut tape, StatKind::Entropy, &[0.0; 4], uniform).unwrap();
    assert!((tape.scalar_value(h) - 4f64.ln()).abs() < 1e-6);
    let e = stat_value(&mut tape, StatKind::Expectation, &[26.5, 40.0, 49.5, 67.0], uniform).unwrap();
    assert!((tape.scalar_value(e) - 45.75).abs() < 1e-12);
    let point = tape.constant(arr2(&[[0.0, 1.0, 0.0]]));
    let h = stat_value(&mut tape, StatKind::Entropy, &[1.0, 2.0, 3.0], point).unwrap();
    assert!(tape.scalar_value(h).abs() < 1e-7);
    let v = stat_value(&mut tape, StatKind::Variance, &[1.0, 2.0, 3.0], point).unwrap();
    assert_eq!(tape.scalar_value(v), 0.0);
    let half = uniform_of(&mut tape, 2);
    let sd = stat_value(&mut tape, StatKind::StdDev, &[0.0, 2.0], half).unwrap();
    assert!((tape.scalar_value(sd) - 1.0).abs() < 1e-8);
}

fn uniform_of(tape: &mut Tape, k: usize) -> tabsynth::grad::Var {
    tape.constant(Array2::from_elem((1, k), 1.0 / k as f64))
}

#[test]
fn relation_losses() {
    let mut tape = Tape::new();
    let a = tape.scalar(2.0);
    let b = tape.scalar(5.0);
    let cases = [
        (CmpOp::Eq, 3.0),
        (CmpOp::Le, 0.0),
        (CmpOp::Lt, 0.0),
        (CmpOp::Ge, 3.0),
        (CmpOp::Gt, 3.0 + 1e-6),
        (CmpOp::Ne, 0.0),
    ];
    for (op, want) in cases {
        let l = relation_loss(&mut tape, op, a, b, 1e-6).unwrap();
        assert!((tape.scalar_value(l) - want).abs() < 1e-12, "{op:?}");
    }
    let l = relation_loss(&mut tape, CmpOp::Ne, a, a, 1e-6).unwrap();
    assert!((tape.scalar_value(l) - 1e-6).abs() < 1e-18);
}

#[test]
fn mean_age_constraint_is_zero_when_met() {
    let schema = Arc::new(Schema::new(vec![ColumnSpec::binned("age", &[20.0, 30.0, 40.0])]).unwrap());
    let t = check("SYNTHESIZE: T; ENFORCE: STATISTICAL: E[age] == 30; END;", &schema).unwrap();
    let TypedKind::Statistical(e) = &t.specs[0].kind else {
        unreachable!()
    };
    let mut tape = Tape::new();
    let x = tape.constant(one_hot(&schema, &[&[0], &[1], &[1], &[0]]));
    let l = stat_node(&mut tape, x, &schema, e).unwrap();
    assert_eq!(tape.scalar_value(l), 0.0);
    let TypedStat::Rel(..) = e else { panic!() };
}

#[test]
fn constant_surrogate_has_zero_parity_gap() {
    let table = toy_adult(400, 1, 1.5);
    let t = check("SYNTHESIZE: A; MINIMIZE: FAIRNESS: DEMOGRAPHIC_PARITY(); END;", table.schema()).unwrap();
    let TypedKind::Downstream(d) = &t.specs[0].kind else {
        unreachable!()
    };
    let r = Reference::new(&table, d, 1000, 0);
    let mut tape = Tape::new();
    let psi = tape.constant(Array2::zeros((r.x.ncols(), 1)));
    let si = surrogate_index(&mut tape, psi, &r, Some(FairnessMetric::DemographicParity))
        .unwrap()
        .unwrap();
    assert!(tape.scalar_value(si).abs() < 1e-12);
}

#[test]
fn unrolled_surrogate_gradient_matches_finite_differences() {
    let schema = binary_schema(&["f", "g", "y"]);
    let table = EncodedTable::from_codes(
        &[
            vec![0, 1, 1],
            vec![1, 0, 0],
            vec![1, 1, 1],
            vec![0, 0, 0],
            vec![1, 0, 1],
            vec![0, 1, 0],
            vec![1, 1, 0],
            vec![0, 0, 1],
        ],
        schema.clone(),
    )
    .unwrap();
    let spec = tabsynth::lang::DownstreamSpec {
        metric: Some(FairnessMetric::DemographicParity),
        target: 2,
        protected: Some(0),
        features: vec![0, 1],
        surrogate: SurrogateConfig {
            lr: 0.5,
            n_epochs: 2,
            batch_size: 256,
        },
    };
    let r = Reference::new(&table, &spec, 100, 0);
    let soft = table.data().mapv(|v| 0.2 + 0.6 * v);
    let err = gradient_check(&[soft], 1e-6, |tape, v| {
        let x = design_matrix(tape, v[0], &schema, &spec.features)?;
        let y = target_column(tape, v[0], &schema, spec.target)?;
        let psi = fit_logistic(tape, x, y, &spec.surrogate)?;
        let z = tape_matmul_ref(tape, &r, psi)?;
        let p = tape.sigmoid(z);
        let s = tape.sum(p);
        Ok(s)
    })
    .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

fn tape_matmul_ref(tape: &mut Tape, r: &Reference, psi: tabsynth::grad::Var) -> tabsynth::grad::Result<tabsynth::grad::Var> {
    let x = tape.constant(r.x.clone());
    tape.matmul(x, psi)
}

#[test]
fn compile_weights_and_verifiers() {
    let table = toy_adult(2000, 5, 1.5);
    let prog = check(
        "SYNTHESIZE: A; ENFORCE: ROW CONSTRAINT PARAM 2: age > 35; ENFORCE: IMPLICATION: sex == Female IMPLIES relationship != Husband; \
         ENFORCE: STATISTICAL: E[age] == 30; MINIMIZE: FAIRNESS: DEMOGRAPHIC_PARITY(); END;",
        table.schema(),
    )
    .unwrap();
    let mut overrides = BTreeMap::new();
    overrides.insert("spec3".to_string(), 0.0);
    let specs = compile(&prog, &table, &overrides, &CompileOptions::default()).unwrap();
    assert_eq!(specs.iter().map(|s| s.weight).collect::<Vec<_>>(), vec![2.0, 1.0, 0.0, 1.0]);
    let cfg = VerifyConfig::default();
    let v = specs[1].verify(&table, &cfg).unwrap();
    let schema = table.schema();
    let (sex, rel) = (schema.column_index("sex").unwrap(), schema.column_index("relationship").unwrap());
    let (female, husband) = (schema.column(sex).encode("Female").unwrap(), schema.column(rel).encode("Husband").unwrap());
    let codes = table.codes();
    let ok = codes.iter().filter(|r| r[sex] != female || r[rel] != husband).count();
    let csr = ok as f64 / codes.len() as f64;
    assert!(csr > 0.9 && csr < 1.0);
    assert!((v.metric.unwrap() - csr).abs() < 1e-12);
    assert_eq!(v.satisfied, Some(csr >= cfg.min_csr));
    let v0 = specs[0].verify(&table, &cfg).unwrap();
    assert!(v0.metric.unwrap() < 0.8 && v0.satisfied == Some(false));
    let fair = specs[3].verify(&table, &cfg).unwrap();
    assert!(fair.metric.unwrap() > 0.05, "{fair:?}");
    // hard batch metrics agree with the verifier
    let mut tape = Tape::new();
    let x = tape.constant(table.data().clone());
    let e = specs[0].evaluate(&mut tape, x, table.schema()).unwrap();
    assert!((e.metric.unwrap() - v0.metric.unwrap()).abs() < 1e-12);
    let mut bad = BTreeMap::new();
    bad.insert("spec9".to_string(), 1.0);
    assert!(matches!(
        compile(&prog, &table, &bad, &CompileOptions::default()),
        Err(CompileError::UnknownSpec(_))
    ));
}

#[test]
fn empty_protected_group_is_reported() {
    let table = toy_adult(300, 2, 1.5);
    let males: Vec<usize> = (0..table.n_rows()).filter(|&r| table.row_codes(r)[5] == 0).collect();
    let only_males = table.select_rows(&males);
    let prog = check("SYNTHESIZE: A; MINIMIZE: FAIRNESS: DEMOGRAPHIC_PARITY(); END;", table.schema()).unwrap();
    let err = compile(&prog, &only_males, &BTreeMap::new(), &CompileOptions::default()).unwrap_err();
    assert!(matches!(err, CompileError::EmptyProtectedGroup(_)));
}
