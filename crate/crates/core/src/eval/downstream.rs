use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::compile::surrogate::design_values;
use crate::grad::Tensor;
use crate::schema::EncodedTable;

pub const L2: f64 = 1e-3;
pub const STEPS: usize = 500;
pub const LR: f64 = 0.5;

/// L2-regularized logistic regression on one-hot features, trained by
/// full-batch gradient descent from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub features: Vec<usize>,
    pub target: usize,
    pub weights: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownstreamScore {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
}

impl LogisticModel {
    pub fn fit(train: &EncodedTable, target: usize, features: &[usize]) -> Result<Self, EvalError> {
        let y: Vec<f64> = train.column_codes(target).iter().map(|&c| c as f64).collect();
        let pos = y.iter().filter(|v| **v > 0.5).count();
        if train.schema().column(target).domain_size() != 2 {
            return Err(EvalError::NonBinaryTarget(train.schema().column(target).name.clone()));
        }
        if pos == 0 || pos == y.len() {
            return Err(EvalError::SingleClassTrain);
        }
        let x = design_values(train.data(), train.schema(), features);
        let n = x.nrows() as f64;
        let y = Array2::from_shape_vec((y.len(), 1), y).expect("column vector");
        let xt = x.t().to_owned();
        let mut w: Tensor = Array2::zeros((x.ncols(), 1));
        let bias = x.ncols() - 1;
        for _ in 0..STEPS {
            let p = x.dot(&w).mapv(|z| 1.0 / (1.0 + (-z).exp()));
            let mut g = xt.dot(&(p - &y)) / n;
            for j in 0..bias {
                g[[j, 0]] += L2 * w[[j, 0]];
            }
            w.scaled_add(-LR, &g);
        }
        Ok(Self {
            features: features.to_vec(),
            target,
            weights: w,
        })
    }

    /// Thresholded predictions at probability 0.5.
    pub fn predict(&self, table: &EncodedTable) -> Vec<bool> {
        let x = design_values(table.data(), table.schema(), &self.features);
        x.dot(&self.weights).column(0).iter().map(|z| *z > 0.0).collect()
    }

    pub fn score(&self, test: &EncodedTable) -> DownstreamScore {
        let pred = self.predict(test);
        let y = test.column_codes(self.target);
        let mut cells = [[0usize; 2]; 2];
        for (p, t) in pred.iter().zip(&y) {
            cells[*t][*p as usize] += 1;
        }
        let n = pred.len().max(1) as f64;
        let accuracy = (cells[0][0] + cells[1][1]) as f64 / n;
        let recall = |c: usize| {
            let total = cells[c][0] + cells[c][1];
            (total > 0).then(|| cells[c][c] as f64 / total as f64)
        };
        let balanced_accuracy = match (recall(0), recall(1)) {
            (Some(a), Some(b)) => 0.5 * (a + b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => 0.0,
        };
        DownstreamScore {
            accuracy,
            balanced_accuracy,
        }
    }
}

/// Trains on `train` and scores on `test`, using every non-target column.
pub fn downstream_eval(train: &EncodedTable, test: &EncodedTable, target: usize) -> Result<DownstreamScore, EvalError> {
    let features: Vec<usize> = (0..train.schema().k()).filter(|&c| c != target).collect();
    Ok(LogisticModel::fit(train, target, &features)?.score(test))
}
