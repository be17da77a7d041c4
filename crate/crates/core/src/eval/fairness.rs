use serde::{Deserialize, Serialize};

use crate::lang::ast::FairnessMetric;

/// Group disparities of binary predictions. `None` marks a metric whose
/// conditioning cell has no rows.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FairnessReport {
    pub demographic_parity: Option<f64>,
    pub equalized_odds: Option<f64>,
    pub equality_of_opportunity: Option<f64>,
}

impl FairnessReport {
    pub fn get(&self, metric: FairnessMetric) -> Option<f64> {
        match metric {
            FairnessMetric::DemographicParity => self.demographic_parity,
            FairnessMetric::EqualizedOdds => self.equalized_odds,
            FairnessMetric::EqualityOfOpportunity => self.equality_of_opportunity,
        }
    }
}

/// Positive rate of `pred` over rows where `keep` holds.
fn rate(pred: &[bool], keep: impl Fn(usize) -> bool) -> Option<f64> {
    let (mut n, mut pos) = (0usize, 0usize);
    for (i, p) in pred.iter().enumerate() {
        if keep(i) {
            n += 1;
            pos += *p as usize;
        }
    }
    (n > 0).then(|| pos as f64 / n as f64)
}

/// `|E[f|s=0] - E[f|s=1]|`, the worst of the two label-conditional gaps,
/// and the gap among positives. `protected` and `target` hold 0/1 codes.
pub fn fairness_metrics(pred: &[bool], protected: &[usize], target: &[usize]) -> FairnessReport {
    assert_eq!(pred.len(), protected.len());
    assert_eq!(pred.len(), target.len());
    let gap = |cond: &dyn Fn(usize) -> bool| {
        let a = rate(pred, |i| protected[i] == 0 && cond(i))?;
        let b = rate(pred, |i| protected[i] == 1 && cond(i))?;
        Some((a - b).abs())
    };
    let dp = gap(&|_| true);
    let g0 = gap(&|i| target[i] == 0);
    let g1 = gap(&|i| target[i] == 1);
    FairnessReport {
        demographic_parity: dp,
        equalized_odds: g0.zip(g1).map(|(a, b)| a.max(b)),
        equality_of_opportunity: g1,
    }
}
