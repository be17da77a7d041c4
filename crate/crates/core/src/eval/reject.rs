use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::compile::CompiledSpec;
use crate::generator::Generator;
use crate::schema::EncodedTable;

pub const MIN_BATCH: usize = 10_000;
pub const MIN_ACCEPTANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectionStats {
    pub rounds: usize,
    pub drawn: usize,
    pub accepted: usize,
    /// Share of inspected rows that passed. Rows left over in the final
    /// batch after `n` were collected are not inspected.
    pub acceptance_rate: f64,
}

/// Draws batches of `max(n, 10^4)` rows and keeps rows that satisfy every
/// row-level spec until `n` rows are collected. Other spec kinds are
/// ignored. Fails when acceptance stays below 1e-4 after three rounds or
/// `max_rounds` runs out.
pub fn rejection_sample(
    gen: &Generator,
    specs: &[CompiledSpec],
    n: usize,
    max_rounds: usize,
    seed: u64,
) -> Result<(EncodedTable, RejectionStats), EvalError> {
    let checks: Vec<&CompiledSpec> = specs.iter().filter(|s| s.is_row_level()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if checks.is_empty() {
        let table = gen.sample_with_rng(n, &mut rng);
        let stats = RejectionStats {
            rounds: 1,
            drawn: n,
            accepted: n,
            acceptance_rate: 1.0,
        };
        return Ok((table, stats));
    }
    let batch = n.max(MIN_BATCH);
    let mut kept: Vec<usize> = Vec::new();
    let mut out = EncodedTable::empty(gen.schema().clone());
    let (mut drawn, mut inspected, mut accepted, mut rounds) = (0usize, 0usize, 0usize, 0usize);
    while accepted < n {
        if rounds == max_rounds {
            return Err(EvalError::RoundsExhausted {
                accepted,
                requested: n,
                rate: accepted as f64 / inspected.max(1) as f64,
            });
        }
        let t = gen.sample_with_rng(batch, &mut rng);
        rounds += 1;
        drawn += batch;
        kept.clear();
        for r in 0..t.n_rows() {
            if accepted + kept.len() == n {
                break;
            }
            inspected += 1;
            let codes = t.row_codes(r);
            if checks.iter().all(|s| s.row_ok(&codes) == Some(true)) {
                kept.push(r);
            }
        }
        accepted += kept.len();
        out = out.concat(&t.select_rows(&kept)).expect("same schema");
        let rate = accepted as f64 / inspected as f64;
        log::debug!("rejection round {rounds}: {accepted}/{n} rows, acceptance {rate:.4}");
        if rounds >= 3 && accepted < n && rate < MIN_ACCEPTANCE {
            return Err(EvalError::AcceptanceTooLow { rate });
        }
    }
    let stats = RejectionStats {
        rounds,
        drawn,
        accepted,
        acceptance_rate: accepted as f64 / inspected as f64,
    };
    Ok((out, stats))
}
