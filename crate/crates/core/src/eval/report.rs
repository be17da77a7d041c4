use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{fairness_metrics, DownstreamScore, EvalError, FairnessReport, LogisticModel};
use crate::compile::{CompiledSpec, Verdict, VerifyConfig};
use crate::schema::{marginal_workload, workload_tv, EncodedTable, WorkloadMode};

pub const EVALUATOR_NOTE: &str = "downstream scores come from the built-in logistic-regression evaluator, \
not gradient-boosted trees; use the export command to score with an external model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub synthetic_rows: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub workload_mean_tv: f64,
    pub workload_max_tv: f64,
    pub target: Option<String>,
    pub downstream: Option<DownstreamScore>,
    pub protected: Option<String>,
    pub fairness: Option<FairnessReport>,
    pub specs: Vec<Verdict>,
    pub seeds: BTreeMap<String, u64>,
}

/// Scores `synthetic` against real `train` (fidelity) and `test`
/// (downstream accuracy and fairness of a model trained on `synthetic`).
pub fn evaluate(
    synthetic: &EncodedTable,
    train: &EncodedTable,
    test: &EncodedTable,
    specs: &[CompiledSpec],
    verify: &VerifyConfig,
    seeds: BTreeMap<String, u64>,
) -> Result<EvalReport, EvalError> {
    let schema = train.schema();
    let mode = if schema.label_column().is_some() {
        WorkloadMode::ThreeWayWithLabel
    } else {
        WorkloadMode::AllThreeWay
    };
    let workload = marginal_workload(schema, mode, true)?;
    let (mean_tv, max_tv) = workload_tv(synthetic, train, &workload)?;
    let target = schema.label_column().filter(|&t| schema.column(t).domain_size() == 2);
    let model = match target {
        Some(t) => {
            let features: Vec<usize> = (0..schema.k()).filter(|&c| c != t).collect();
            match LogisticModel::fit(synthetic, t, &features) {
                Ok(m) => Some(m),
                Err(EvalError::SingleClassTrain) => None,
                Err(e) => return Err(e),
            }
        }
        None => None,
    };
    let protected = schema.protected_column().filter(|&p| schema.column(p).domain_size() == 2);
    let fairness = match (&model, protected) {
        (Some(m), Some(p)) => Some(fairness_metrics(
            &m.predict(test),
            &test.column_codes(p),
            &test.column_codes(m.target),
        )),
        _ => None,
    };
    let specs = specs.iter().map(|s| s.verify(synthetic, verify)).collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport {
        synthetic_rows: synthetic.n_rows(),
        train_rows: train.n_rows(),
        test_rows: test.n_rows(),
        workload_mean_tv: mean_tv,
        workload_max_tv: max_tv,
        target: target.map(|t| schema.column(t).name.clone()),
        downstream: model.as_ref().map(|m| m.score(test)),
        protected: protected.map(|p| schema.column(p).name.clone()),
        fairness,
        specs,
        seeds,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into())
}

impl EvalReport {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# note: {EVALUATOR_NOTE}");
        let _ = writeln!(
            s,
            "rows: synthetic {}, train {}, test {}",
            self.synthetic_rows, self.train_rows, self.test_rows
        );
        let _ = writeln!(s, "workload TV: mean {:.4}, max {:.4}", self.workload_mean_tv, self.workload_max_tv);
        if let (Some(t), Some(d)) = (&self.target, &self.downstream) {
            let _ = writeln!(
                s,
                "downstream ({t}): accuracy {:.4}, balanced accuracy {:.4}",
                d.accuracy, d.balanced_accuracy
            );
        }
        if let (Some(p), Some(f)) = (&self.protected, &self.fairness) {
            let _ = writeln!(
                s,
                "fairness ({p}): demographic parity {}, equalized odds {}, equality of opportunity {}",
                opt(f.demographic_parity),
                opt(f.equalized_odds),
                opt(f.equality_of_opportunity)
            );
        }
        for v in &self.specs {
            let status = match v.satisfied {
                Some(true) => "ok",
                Some(false) => "violated",
                None => "-",
            };
            let _ = writeln!(s, "{}: metric {} [{status}]", v.name, opt(v.metric));
        }
        for (k, v) in &self.seeds {
            let _ = writeln!(s, "seed {k}: {v}");
        }
        s
    }

    /// `metric,value` rows with full precision.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["metric", "value"])?;
        let mut row = |k: &str, v: String| wtr.write_record([k, v.as_str()]);
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        row("synthetic_rows", self.synthetic_rows.to_string())?;
        row("train_rows", self.train_rows.to_string())?;
        row("test_rows", self.test_rows.to_string())?;
        row("workload_mean_tv", self.workload_mean_tv.to_string())?;
        row("workload_max_tv", self.workload_max_tv.to_string())?;
        row("accuracy", cell(self.downstream.map(|d| d.accuracy)))?;
        row("balanced_accuracy", cell(self.downstream.map(|d| d.balanced_accuracy)))?;
        let f = self.fairness.unwrap_or_default();
        row("demographic_parity", cell(f.demographic_parity))?;
        row("equalized_odds", cell(f.equalized_odds))?;
        row("equality_of_opportunity", cell(f.equality_of_opportunity))?;
        for v in &self.specs {
            row(&format!("{}_metric", v.name), cell(v.metric))?;
            row(
                &format!("{}_satisfied", v.name),
                v.satisfied.map(|b| b.to_string()).unwrap_or_default(),
            )?;
        }
        for (k, v) in &self.seeds {
            row(&format!("seed_{k}"), v.to_string())?;
        }
        wtr.flush()?;
        Ok(())
    }
}
