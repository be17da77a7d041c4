//! Private pre-training under zero-concentrated differential privacy.
//!
//! Rounds alternate between selecting a marginal with the exponential
//! mechanism, measuring it with the Gaussian mechanism and refitting the
//! generator on every noisy measurement so far. The per-round noise scale
//! and selection parameter adapt to how much the model moved.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::generator::Generator;
use crate::pretrain::{fit_marginals, FitState, History, PretrainConfig, PretrainError};
use crate::schema::{marginal, marginal_workload, EncodedTable, MarginalSpec, MarginalVector, SchemaError, WorkloadMode};

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("invalid privacy budget: {0}")]
    InvalidBudget(String),
    #[error("privacy budget exhausted: cost {cost} exceeds remaining {remaining}")]
    BudgetExhausted { cost: f64, remaining: f64 },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Train(#[from] PretrainError),
}

pub type Result<T, E = PrivacyError> = std::result::Result<T, E>;

/// Largest `rho` with `rho + 2 sqrt(rho ln(1/delta)) <= epsilon`.
///
/// `epsilon = inf` maps to `rho = inf`.
pub fn eps_delta_to_rho(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(PrivacyError::InvalidBudget(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::InvalidBudget(format!("delta must lie in (0, 1), got {delta}")));
    }
    if epsilon.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let l = (1.0 / delta).ln();
    let f = |rho: f64| rho + 2.0 * (rho * l).sqrt();
    let (mut lo, mut hi) = (0.0, epsilon);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if f(mid) <= epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

pub fn gaussian_cost(sigma: f64) -> f64 {
    1.0 / (2.0 * sigma * sigma)
}

pub fn exponential_cost(gamma: f64) -> f64 {
    gamma * gamma / 8.0
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub gamma: f64,
    pub sigma: f64,
    pub spec: MarginalSpec,
    pub spec_label: String,
    pub rho_cost: f64,
    pub cumulative_rho: f64,
    pub measurement: MarginalVector,
}

/// zCDP budget state and per-round log.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    pub epsilon: f64,
    pub delta: f64,
    pub total_rho: f64,
    spent_rho: f64,
    pub rounds: Vec<RoundRecord>,
}

impl PrivacyLedger {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        Ok(Self {
            epsilon,
            delta,
            total_rho: eps_delta_to_rho(epsilon, delta)?,
            spent_rho: 0.0,
            rounds: Vec::new(),
        })
    }

    pub fn is_unbounded(&self) -> bool {
        self.total_rho.is_infinite()
    }

    pub fn spent(&self) -> f64 {
        self.spent_rho
    }

    pub fn remaining(&self) -> f64 {
        if self.is_unbounded() {
            f64::INFINITY
        } else {
            (self.total_rho - self.spent_rho).max(0.0)
        }
    }

    /// Adds `cost` to the spent budget, refusing anything that would overdraw it.
    pub fn charge(&mut self, cost: f64) -> Result<()> {
        if !(cost >= 0.0) {
            return Err(PrivacyError::InvalidBudget(format!("negative cost {cost}")));
        }
        if !self.is_unbounded() && self.spent_rho + cost > self.total_rho {
            return Err(PrivacyError::BudgetExhausted {
                cost,
                remaining: self.remaining(),
            });
        }
        self.spent_rho += cost;
        Ok(())
    }

    /// Recomputes the spend from the round log and checks it against the budget.
    pub fn audit(&self) -> bool {
        let mut total = 0.0;
        for r in &self.rounds {
            total += r.rho_cost;
            if total > self.total_rho {
                return false;
            }
        }
        total <= self.total_rho
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["round", "gamma", "sigma", "spec", "rho_cost", "cumulative_rho"])?;
        for r in &self.rounds {
            wtr.write_record([
                r.round.to_string(),
                r.gamma.to_string(),
                r.sigma.to_string(),
                r.spec_label.clone(),
                r.rho_cost.to_string(),
                r.cumulative_rho.to_string(),
            ])?;
        }
        wtr.flush()
    }
}

/// Adds `N(0, sigma^2)` to every cell of the unnormalized marginal.
/// Returns the measurement and its zCDP cost. `sigma = 0` measures exactly
/// at infinite cost.
pub fn gaussian_measure<R: Rng>(table: &EncodedTable, spec: &MarginalSpec, sigma: f64, rng: &mut R) -> Result<(MarginalVector, f64)> {
    let mut m = marginal(table, spec, false)?;
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).map_err(|e| PrivacyError::InvalidBudget(e.to_string()))?;
        for v in &mut m.values {
            *v += noise.sample(rng);
        }
        Ok((m, gaussian_cost(sigma)))
    } else if sigma == 0.0 {
        Ok((m, f64::INFINITY))
    } else {
        Err(PrivacyError::InvalidBudget(format!("sigma must be non-negative, got {sigma}")))
    }
}

/// Samples an index with probability proportional to `exp(gamma * score / 2)`.
/// `gamma = inf` selects the first maximizer.
pub fn exp_select<R: Rng>(scores: &[f64], gamma: f64, rng: &mut R) -> Result<(usize, f64)> {
    if scores.is_empty() {
        return Err(PrivacyError::InvalidBudget("no candidates to select from".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) || !(gamma >= 0.0) {
        return Err(PrivacyError::InvalidBudget(
            "scores and gamma must be finite and non-negative".into(),
        ));
    }
    if gamma.is_infinite() {
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        return Ok((best, f64::INFINITY));
    }
    let logits: Vec<f64> = scores.iter().map(|s| 0.5 * gamma * s).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok((i, exponential_cost(gamma)));
        }
        u -= w;
    }
    Ok((weights.len() - 1, exponential_cost(gamma)))
}

/// One annealing update. Returns `(sigma', gamma', xi)`.
///
/// `current` and `previous` are the model's marginals for the selected spec
/// before and after refitting, on the count scale of the measurements.
pub fn anneal(current: &[f64], previous: &[f64], sigma: f64, gamma: f64, n_r: usize) -> (f64, f64, f64) {
    let l1: f64 = current.iter().zip(previous).map(|(a, b)| (a - b).abs()).sum();
    let xi = l1 / ((2.0 / std::f64::consts::PI).sqrt() * sigma * n_r as f64);
    let factor = if xi <= 1.0 {
        xi.max(std::f64::consts::FRAC_1_SQRT_2)
    } else {
        xi.min(std::f64::consts::SQRT_2)
    };
    (factor * sigma, gamma / factor, xi)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// Generator batch size during refits and the size of the sample used for scoring and annealing.
    pub batch_size: usize,
    pub refit_epochs: usize,
    pub group_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Planned rounds per column when initialising the noise scale.
    pub rounds_per_column: usize,
    /// Share of each round's budget spent on selection.
    pub selection_share: f64,
    pub spend_remainder: bool,
    /// Hard cap on rounds; defaults to twice the planned count.
    pub max_rounds: Option<usize>,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            delta: 1e-9,
            batch_size: 1000,
            refit_epochs: 1000,
            group_size: 16,
            lr: 1e-3,
            seed: 0,
            rounds_per_column: 16,
            selection_share: 0.1,
            spend_remainder: true,
            max_rounds: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DpOutcome {
    pub ledger: PrivacyLedger,
    /// Clamped and renormalized targets the generator was last fitted to.
    pub targets: Vec<(MarginalSpec, MarginalVector)>,
    /// Record count estimated from the noisy measurements.
    pub n_hat: f64,
    pub history: History,
}

/// Inverse-variance combination of repeated measurements of one marginal.
#[derive(Debug, Clone)]
struct Measured {
    weighted: Vec<f64>,
    weight: f64,
    exact: Option<Vec<f64>>,
}

impl Measured {
    fn add(&mut self, values: &[f64], sigma: f64) {
        if sigma == 0.0 {
            self.exact = Some(values.to_vec());
            return;
        }
        let w = 1.0 / (sigma * sigma);
        for (acc, v) in self.weighted.iter_mut().zip(values) {
            *acc += w * v;
        }
        self.weight += w;
    }

    fn estimate(&self) -> MarginalVector {
        let values = match &self.exact {
            Some(v) => v.clone(),
            None => self.weighted.iter().map(|v| v / self.weight).collect(),
        };
        MarginalVector { values, normalized: false }
    }
}

fn model_marginal(sample: &EncodedTable, spec: &MarginalSpec, n_hat: f64) -> Result<Vec<f64>> {
    Ok(marginal(sample, spec, true)?.values.iter().map(|v| v * n_hat).collect())
}

/// Private pre-training over all three-way marginals.
///
/// The original table is read only through the selection scores and the
/// Gaussian measurements.
pub fn dp_pretrain(gen: &mut Generator, table: &EncodedTable, config: &DpConfig) -> Result<DpOutcome> {
    let schema = gen.schema().clone();
    let workload = marginal_workload(&schema, WorkloadMode::AllThreeWay, true)?;
    let mut ledger = PrivacyLedger::new(config.epsilon, config.delta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = History::default();
    let refit = |round: usize| PretrainConfig {
        batch_size: config.batch_size,
        epochs: config.refit_epochs,
        group_size: config.group_size,
        lr: config.lr,
        seed: config.seed.wrapping_add(1 + round as u64),
        workload: WorkloadMode::AllThreeWay,
        workload_degrade: true,
    };

    if ledger.is_unbounded() {
        // Without a budget every marginal is measured exactly in one round each.
        let mut targets = Vec::new();
        for (round, spec) in workload.iter().enumerate() {
            let (m, cost) = gaussian_measure(table, spec, 0.0, &mut rng)?;
            ledger.charge(cost)?;
            ledger.rounds.push(RoundRecord {
                round,
                gamma: f64::INFINITY,
                sigma: 0.0,
                spec: spec.clone(),
                spec_label: spec.label(&schema),
                rho_cost: cost,
                cumulative_rho: ledger.spent(),
                measurement: m.clone(),
            });
            targets.push((spec.clone(), m.clamp_normalize()));
        }
        let n_hat = table.n_rows() as f64;
        history = fit_marginals(gen, &targets, &refit(0), FitState { adam: None, extra: None })?;
        return Ok(DpOutcome {
            ledger,
            targets,
            n_hat,
            history,
        });
    }

    let truth: Vec<Vec<f64>> = workload
        .iter()
        .map(|s| marginal(table, s, false).map(|m| m.values))
        .collect::<Result<_, _>>()?;
    let rho = ledger.total_rho;
    let planned = (config.rounds_per_column * schema.k()).max(1) as f64;
    let mut sigma = (planned / (2.0 * (1.0 - config.selection_share) * rho)).sqrt();
    let mut gamma = (8.0 * config.selection_share * rho / planned).sqrt();
    let max_rounds = config.max_rounds.unwrap_or(2 * planned as usize);

    let mut measured: BTreeMap<usize, Measured> = BTreeMap::new();
    let mut n_hat: Option<f64> = None;
    // Scoring and annealing reuse one noise draw so that marginal changes
    // reflect parameter updates rather than resampling.
    let probe_seed = config.seed ^ 0x5eed_5eed_5eed_5eed;
    let mut sample = gen.sample(config.batch_size, probe_seed);
    let mut targets = Vec::new();

    for round in 0..max_rounds {
        let round_cost = exponential_cost(gamma) + gaussian_cost(sigma);
        let remaining = ledger.remaining();
        let mut last = false;
        if remaining < 2.0 * round_cost || round + 1 == max_rounds {
            if remaining < round_cost && !config.spend_remainder {
                break;
            }
            if config.spend_remainder {
                // Rescale both mechanisms so this round consumes what is left.
                let scale = (remaining * (1.0 - 1e-9) / round_cost).sqrt();
                gamma *= scale;
                sigma /= scale;
            }
            last = true;
        }

        let scores: Vec<f64> = match n_hat {
            None => vec![0.0; workload.len()],
            Some(n) => workload
                .iter()
                .zip(&truth)
                .map(|(spec, t)| {
                    let est = model_marginal(&sample, spec, n)?;
                    let l1: f64 = t.iter().zip(&est).map(|(a, b)| (a - b).abs()).sum();
                    let expected = (2.0 / std::f64::consts::PI).sqrt() * sigma * t.len() as f64;
                    Ok((l1 - expected).max(0.0))
                })
                .collect::<Result<_>>()?,
        };
        let (pick, select_cost) = exp_select(&scores, gamma, &mut rng)?;
        ledger.charge(select_cost)?;
        let spec = &workload[pick];
        let (noisy, measure_cost) = gaussian_measure(table, spec, sigma, &mut rng)?;
        ledger.charge(measure_cost)?;
        let entry = measured.entry(pick).or_insert_with(|| Measured {
            weighted: vec![0.0; noisy.len()],
            weight: 0.0,
            exact: None,
        });
        entry.add(&noisy.values, sigma);
        let n = noisy.values.iter().sum::<f64>().max(1.0);
        n_hat = Some(n);
        ledger.rounds.push(RoundRecord {
            round,
            gamma,
            sigma,
            spec: spec.clone(),
            spec_label: spec.label(&schema),
            rho_cost: select_cost + measure_cost,
            cumulative_rho: ledger.spent(),
            measurement: noisy,
        });
        debug_assert!(ledger.audit());

        let previous = model_marginal(&sample, spec, n)?;
        targets = measured
            .iter()
            .map(|(&i, m)| (workload[i].clone(), m.estimate().clamp_normalize()))
            .collect();
        let h = fit_marginals(gen, &targets, &refit(round), FitState { adam: None, extra: None })?;
        history.epochs.extend(h.epochs);
        sample = gen.sample(config.batch_size, probe_seed);
        if last {
            break;
        }
        let current = model_marginal(&sample, spec, n)?;
        let (s, g, xi) = anneal(&current, &previous, sigma, gamma, spec.domain_size(&schema));
        log::debug!("round {round}: spec {} xi {xi:.3} sigma {sigma:.3} -> {s:.3}", spec.label(&schema));
        sigma = s;
        gamma = g;
    }

    Ok(DpOutcome {
        ledger,
        targets,
        n_hat: n_hat.unwrap_or(0.0),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_matches_closed_form() {
        for &(eps, delta) in &[(1.0, 1e-9), (0.1, 1e-5), (5.0, 1e-9), (10.0, 1e-6)] {
            let l: f64 = (1.0f64 / delta).ln();
            let closed = ((l + eps).sqrt() - l.sqrt()).powi(2);
            let rho = eps_delta_to_rho(eps, delta).unwrap();
            assert!((rho - closed).abs() < 1e-10, "{eps} {delta}: {rho} vs {closed}");
            assert!(rho + 2.0 * (rho * l).sqrt() <= eps);
        }
    }

    #[test]
    fn budget_errors() {
        assert!(matches!(eps_delta_to_rho(0.0, 1e-9), Err(PrivacyError::InvalidBudget(_))));
        assert!(matches!(eps_delta_to_rho(1.0, 0.0), Err(PrivacyError::InvalidBudget(_))));
        assert!(matches!(eps_delta_to_rho(1.0, 1.0), Err(PrivacyError::InvalidBudget(_))));
        assert_eq!(eps_delta_to_rho(f64::INFINITY, 1e-9).unwrap(), f64::INFINITY);
    }

    #[test]
    fn mechanism_costs() {
        assert_eq!(gaussian_cost(1.0), 0.5);
        assert_eq!(exponential_cost(2.0), 0.5);
    }

    #[test]
    fn ledger_refuses_overdraw() {
        let mut l = PrivacyLedger::new(1.0, 1e-9).unwrap();
        let total = l.total_rho;
        l.charge(total * 0.75).unwrap();
        assert!(matches!(l.charge(total * 0.5), Err(PrivacyError::BudgetExhausted { .. })));
        assert!((l.remaining() - total * 0.25).abs() < 1e-15);
    }

    #[test]
    fn anneal_hand_values() {
        let s2 = std::f64::consts::SQRT_2;
        let unit = (2.0 / std::f64::consts::PI).sqrt();
        // a single cell differing by xi * unit * sigma * n_r gives the requested xi
        for (xi, sf, gf) in [(1.0, 1.0, 1.0), (0.5, 1.0 / s2, s2), (4.0, s2, 1.0 / s2)] {
            let sigma = 2.0;
            let n_r = 4;
            let cur = [xi * unit * sigma * n_r as f64, 0.0, 0.0, 0.0];
            let (s, g, x) = anneal(&cur, &[0.0; 4], sigma, 3.0, n_r);
            assert!((x - xi).abs() < 1e-12);
            assert!((s - sf * sigma).abs() < 1e-12);
            assert!((g - gf * 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (i, cost) = exp_select(&[3.0], 1.0, &mut rng).unwrap();
        assert_eq!((i, cost), (0, 0.125));
        let mut counts = [0usize; 4];
        for _ in 0..40_000 {
            counts[exp_select(&[0.0, 5.0, -1.0, 2.0], 0.0, &mut rng).unwrap().0] += 1;
        }
        assert!(counts.iter().all(|c| (*c as f64 / 40_000.0 - 0.25).abs() < 0.01));
        assert_eq!(exp_select(&[0.0, 5.0, 5.0], f64::INFINITY, &mut rng).unwrap().0, 1);
    }
}
