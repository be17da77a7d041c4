//! Seeded synthetic datasets for tests, demos and the acceptance suite.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::schema::{ColumnSpec, EncodedTable, Role, Schema};

/// Independent binary features `f0..f{k-1}` with `P(f_i = 1) = probs[i]`.
/// The last column carries the label role.
pub fn product_table(probs: &[f64], n: usize, seed: u64) -> EncodedTable {
    let cols: Vec<_> = probs
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let c = ColumnSpec::categorical(&format!("f{i}"), &["0", "1"]);
            if i + 1 == probs.len() {
                c.with_role(Role::Label)
            } else {
                c
            }
        })
        .collect();
    let schema = Arc::new(Schema::new(cols).expect("valid schema"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes: Vec<Vec<usize>> = (0..n)
        .map(|_| probs.iter().map(|p| rng.random_bool(*p) as usize).collect())
        .collect();
    EncodedTable::from_codes(&codes, schema).expect("codes in range")
}

pub const AGE_EDGES: [f64; 7] = [17.0, 25.0, 35.0, 45.0, 55.0, 65.0, 90.0];

/// Census-like schema with Adult column names and a reduced domain.
pub fn toy_adult_schema() -> Schema {
    Schema::new(vec![
        ColumnSpec::binned("age", &AGE_EDGES),
        ColumnSpec::categorical("workclass", &["Private", "Self_emp", "Federal_gov", "Local_gov", "State_gov"]),
        ColumnSpec::categorical("education", &["HS_grad", "Some_college", "Bachelors", "Masters", "Doctorate"]),
        ColumnSpec::categorical("marital_status", &["Married", "Divorced", "Never_married", "Widowed"]),
        ColumnSpec::categorical("relationship", &["Husband", "Wife", "Own_child", "Not_in_family"]),
        ColumnSpec::categorical("sex", &["Male", "Female"]).with_role(Role::Protected),
        ColumnSpec::categorical("salary", &["<=50K", ">50K"]).with_role(Role::Label),
    ])
    .expect("valid schema")
}

fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    WeightedIndex::new(weights).expect("positive weights").sample(rng)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws `n` rows from a fixed dependency structure. Salary depends on sex
/// with strength `sex_bias` (0 removes the direct effect).
pub fn toy_adult(n: usize, seed: u64, sex_bias: f64) -> EncodedTable {
    let schema = Arc::new(toy_adult_schema());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let female = rng.random_bool(0.35);
        let age = if female {
            pick(&mut rng, &[0.22, 0.24, 0.22, 0.14, 0.11, 0.07])
        } else {
            pick(&mut rng, &[0.12, 0.18, 0.22, 0.20, 0.17, 0.11])
        };
        let marital = match age {
            0 => pick(&mut rng, &[0.25, 0.05, 0.68, 0.02]),
            1..=3 => pick(&mut rng, &[0.55, 0.17, 0.23, 0.05]),
            _ => pick(&mut rng, &[0.55, 0.15, 0.10, 0.20]),
        };
        let structured = match (marital, female) {
            (0, false) => pick(&mut rng, &[0.95, 0.0, 0.0, 0.05]),
            (0, true) => pick(&mut rng, &[0.0, 0.9, 0.0, 0.1]),
            (1, false) => pick(&mut rng, &[0.08, 0.0, 0.1, 0.82]),
            (1, true) => pick(&mut rng, &[0.0, 0.06, 0.1, 0.84]),
            _ if age == 0 => pick(&mut rng, &[0.0, 0.0, 0.6, 0.4]),
            _ => pick(&mut rng, &[0.02, 0.02, 0.16, 0.8]),
        };
        let relationship = if rng.random_bool(0.15) {
            rng.random_range(0..4)
        } else {
            structured
        };
        let workclass = pick(&mut rng, &[0.70, 0.10, 0.05, 0.08, 0.07]);
        let education = if workclass >= 2 {
            pick(&mut rng, &[0.2, 0.25, 0.3, 0.15, 0.1])
        } else {
            pick(&mut rng, &[0.38, 0.26, 0.24, 0.08, 0.04])
        };
        let logit = -2.6
            + 0.55 * education as f64
            + if (2..=4).contains(&age) { 0.8 } else { 0.0 }
            + if marital == 0 { 1.0 } else { 0.0 }
            + if female { 0.0 } else { sex_bias };
        let salary = rng.random_bool(sigmoid(logit)) as usize;
        rows.push(vec![age, workclass, education, marital, relationship, female as usize, salary]);
    }
    EncodedTable::from_codes(&rows, schema).expect("codes in range")
}
