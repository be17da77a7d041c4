use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabsynth::generator::{Generator, GeneratorConfig};
use tabsynth::privacy::{dp_pretrain, eps_delta_to_rho, DpConfig};
use tabsynth::schema::{marginal_workload, workload_tv, ColumnSpec, EncodedTable, Schema, WorkloadMode};

fn product_table(probs: &[f64], n: usize, seed: u64) -> EncodedTable {
    let cols: Vec<_> = (0..probs.len())
        .map(|i| ColumnSpec::categorical(&format!("f{i}"), &["0", "1"]))
        .collect();
    let schema = Arc::new(Schema::new(cols).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes: Vec<Vec<usize>> = (0..n)
        .map(|_| probs.iter().map(|p| rng.random_bool(*p) as usize).collect())
        .collect();
    EncodedTable::from_codes(&codes, schema).unwrap()
}

fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        noise_dim: 32,
        hidden: vec![32, 64, 64],
        temperature: 1.0,
    }
}

#[test]
fn toy_dp_run_fits_and_stays_in_budget() {
    let table = product_table(&[0.3, 0.6, 0.5, 0.7], 10_000, 1);
    let mut g = Generator::new(table.schema().clone(), small_generator(), 2).unwrap();
    let cfg = DpConfig {
        epsilon: 5.0,
        refit_epochs: 40,
        seed: 4,
        ..Default::default()
    };
    let t = Instant::now();
    let out = dp_pretrain(&mut g, &table, &cfg).unwrap();
    let rho = eps_delta_to_rho(5.0, 1e-9).unwrap();
    assert!(out.ledger.audit());
    assert!(out.ledger.spent() <= rho);
    assert!(
        out.ledger.spent() > 0.99 * rho,
        "remainder left unspent: {} of {rho}",
        out.ledger.spent()
    );
    let wl = marginal_workload(table.schema(), WorkloadMode::AllThreeWay, false).unwrap();
    let (mean, _) = workload_tv(&g.sample(100_000, 9), &table, &wl).unwrap();
    eprintln!("{} rounds in {:?}, tv {mean}", out.ledger.rounds.len(), t.elapsed());
    assert!(mean < 0.15);
}

#[test]
fn infinite_epsilon_measures_exactly() {
    let table = product_table(&[0.2, 0.5, 0.8], 2_000, 3);
    let mut g = Generator::new(table.schema().clone(), small_generator(), 2).unwrap();
    let cfg = DpConfig {
        epsilon: f64::INFINITY,
        refit_epochs: 200,
        ..Default::default()
    };
    let out = dp_pretrain(&mut g, &table, &cfg).unwrap();
    assert_eq!(out.ledger.rounds.len(), 1);
    let wl = marginal_workload(table.schema(), WorkloadMode::AllThreeWay, false).unwrap();
    let exact = tabsynth::schema::marginal(&table, &wl[0], true).unwrap();
    assert_eq!(out.targets[0].1.values, exact.values);
    let (mean, _) = workload_tv(&g.sample(50_000, 9), &table, &wl).unwrap();
    assert!(mean < 0.05, "tv {mean}");
}

#[test]
fn ledger_csv_has_one_line_per_round() {
    let table = product_table(&[0.3, 0.6, 0.5], 1_000, 5);
    let mut g = Generator::new(table.schema().clone(), small_generator(), 2).unwrap();
    let cfg = DpConfig {
        epsilon: 0.5,
        refit_epochs: 2,
        batch_size: 200,
        ..Default::default()
    };
    let out = dp_pretrain(&mut g, &table, &cfg).unwrap();
    let mut buf = Vec::new();
    out.ledger.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "round,gamma,sigma,spec,rho_cost,cumulative_rho");
    assert_eq!(lines.count(), out.ledger.rounds.len());
    assert!(out.ledger.audit());
}
