use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::schema::EncodedTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub schema_hash: String,
    pub seed: u64,
    pub train_file: String,
    pub test_file: String,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Writes decoded `train.csv`, `test.csv` and `manifest.json` into `dir`.
pub fn export_for_external_eval(train: &EncodedTable, test: &EncodedTable, dir: &Path, seed: u64) -> Result<PathBuf, EvalError> {
    fs::create_dir_all(dir)?;
    train.save_csv(dir.join("train.csv"))?;
    test.save_csv(dir.join("test.csv"))?;
    let manifest = ExportManifest {
        schema_hash: train.schema().hash_hex(),
        seed,
        train_file: "train.csv".into(),
        test_file: "test.csv".into(),
        train_rows: train.n_rows(),
        test_rows: test.n_rows(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable") + "\n")?;
    Ok(path)
}
