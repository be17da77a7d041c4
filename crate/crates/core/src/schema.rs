//! Dataset schema, CSV ingestion, one-hot encoding and marginals.
//!
//! Every column is discrete: categorical columns list their categories,
//! numeric columns are pre-binned by ascending edges. A row is encoded as
//! the concatenation of one indicator block per column, so an encoded table
//! with `K` columns has exactly `K` non-zero entries per row.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("schema json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("row {row}: value `{value}` is outside the domain of column `{column}`")]
    OutOfDomainValue { row: usize, column: String, value: String },
    #[error("row {row}: expected {expected} cells, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("row {row} is not a valid one-hot encoding")]
    InvalidEncoding { row: usize },
    #[error("table is empty")]
    EmptyTable,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no column carries the `label` role")]
    MissingLabel,
    #[error("workload needs at least {needed} features, schema has {k}")]
    InsufficientFeatures { k: usize, needed: usize },
    #[error("invalid marginal: {0}")]
    InvalidMarginal(String),
}

pub type Result<T, E = SchemaError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Label,
    Protected,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnKind {
    Categorical(Vec<String>),
    /// Ascending bin edges; bin `i` is `[edges[i], edges[i+1])`, the last bin is closed.
    Binned(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    /// One value per category or bin, used by statistical operators.
    pub representative_values: Vec<f64>,
    pub roles: BTreeSet<Role>,
}

impl ColumnSpec {
    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        let categories: Vec<String> = categories.iter().map(|c| c.to_string()).collect();
        let representative_values = (0..categories.len()).map(|i| i as f64).collect();
        Self {
            name: name.to_string(),
            kind: ColumnKind::Categorical(categories),
            representative_values,
            roles: BTreeSet::new(),
        }
    }

    pub fn binned(name: &str, edges: &[f64]) -> Self {
        let representative_values = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Self {
            name: name.to_string(),
            kind: ColumnKind::Binned(edges.to_vec()),
            representative_values,
            roles: BTreeSet::new(),
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.roles.insert(role);
        self
    }

    pub fn with_representative_values(mut self, values: Vec<f64>) -> Self {
        self.representative_values = values;
        self
    }

    pub fn domain_size(&self) -> usize {
        match &self.kind {
            ColumnKind::Categorical(c) => c.len(),
            ColumnKind::Binned(e) => e.len().saturating_sub(1),
        }
    }

    pub fn is_binned(&self) -> bool {
        matches!(self.kind, ColumnKind::Binned(_))
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }

    /// Maps a raw cell to its category or bin index.
    pub fn encode(&self, cell: &str) -> Option<usize> {
        match &self.kind {
            ColumnKind::Categorical(cats) => cats.iter().position(|c| c == cell),
            ColumnKind::Binned(edges) => cell.trim().parse::<f64>().ok().and_then(|v| bin_index(edges, v)),
        }
    }

    /// Human-readable value for an index: the category name or the bin midpoint.
    pub fn decode(&self, index: usize) -> String {
        match &self.kind {
            ColumnKind::Categorical(cats) => cats[index].clone(),
            ColumnKind::Binned(edges) => format!("{}", 0.5 * (edges[index] + edges[index + 1])),
        }
    }

    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SchemaError::InvalidSchema(format!("column `{}`: {m}", self.name)));
        match &self.kind {
            ColumnKind::Categorical(cats) => {
                if cats.is_empty() {
                    return err("no categories".into());
                }
                let distinct: BTreeSet<&String> = cats.iter().collect();
                if distinct.len() != cats.len() {
                    return err("duplicate categories".into());
                }
            }
            ColumnKind::Binned(edges) => {
                if edges.len() < 2 {
                    return err("need at least two bin edges".into());
                }
                if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
                    return err("bin edges must be finite and strictly ascending".into());
                }
            }
        }
        if self.representative_values.len() != self.domain_size() {
            return err(format!(
                "{} representative values for a domain of size {}",
                self.representative_values.len(),
                self.domain_size()
            ));
        }
        Ok(())
    }
}

/// Half-open binning with a closed last bin.
pub fn bin_index(edges: &[f64], value: f64) -> Option<usize> {
    let last = *edges.last()?;
    if !(value >= edges[0] && value <= last) {
        return None;
    }
    if value == last {
        return Some(edges.len() - 2);
    }
    // first edge strictly greater than value, minus one
    let upper = edges.partition_point(|e| *e <= value);
    Some(upper - 1)
}

#[derive(Debug, Serialize, Deserialize)]
struct RawColumn {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    categories: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bin_edges: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    representative_values: Option<Vec<f64>>,
    #[serde(default)]
    roles: Vec<Role>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSchema {
    columns: Vec<RawColumn>,
}

/// Ordered column descriptions plus the derived one-hot block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    columns: Vec<ColumnSpec>,
    offsets: Vec<usize>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        if columns.is_empty() {
            return Err(SchemaError::InvalidSchema("schema has no columns".into()));
        }
        let mut names = BTreeSet::new();
        for c in &columns {
            c.validate()?;
            if !names.insert(c.name.as_str()) {
                return Err(SchemaError::InvalidSchema(format!("duplicate column `{}`", c.name)));
            }
        }
        if columns.iter().filter(|c| c.has_role(Role::Label)).count() > 1 {
            return Err(SchemaError::InvalidSchema("more than one label column".into()));
        }
        let mut offsets = Vec::with_capacity(columns.len() + 1);
        offsets.push(0);
        for c in &columns {
            offsets.push(offsets.last().unwrap() + c.domain_size());
        }
        Ok(Self { columns, offsets })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawSchema = serde_json::from_str(text)?;
        let mut columns = Vec::with_capacity(raw.columns.len());
        for rc in raw.columns {
            let mut col = match rc.kind.as_str() {
                "categorical" => {
                    let cats = rc
                        .categories
                        .ok_or_else(|| SchemaError::InvalidSchema(format!("column `{}` lacks `categories`", rc.name)))?;
                    let refs: Vec<&str> = cats.iter().map(String::as_str).collect();
                    ColumnSpec::categorical(&rc.name, &refs)
                }
                "binned-numeric" | "binned" | "numeric" => {
                    let edges = rc
                        .bin_edges
                        .ok_or_else(|| SchemaError::InvalidSchema(format!("column `{}` lacks `bin_edges`", rc.name)))?;
                    ColumnSpec::binned(&rc.name, &edges)
                }
                other => {
                    return Err(SchemaError::InvalidSchema(format!(
                        "column `{}` has unknown kind `{other}`",
                        rc.name
                    )))
                }
            };
            if let Some(values) = rc.representative_values {
                col.representative_values = values;
            }
            col.roles = rc.roles.into_iter().collect();
            columns.push(col);
        }
        Self::new(columns)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Canonical JSON form; always spells out representative values.
    pub fn to_json(&self) -> String {
        let raw = RawSchema {
            columns: self
                .columns
                .iter()
                .map(|c| {
                    let (kind, categories, bin_edges) = match &c.kind {
                        ColumnKind::Categorical(cats) => ("categorical", Some(cats.clone()), None),
                        ColumnKind::Binned(edges) => ("binned-numeric", None, Some(edges.clone())),
                    };
                    RawColumn {
                        name: c.name.clone(),
                        kind: kind.to_string(),
                        categories,
                        bin_edges,
                        representative_values: Some(c.representative_values.clone()),
                        roles: c.roles.iter().copied().collect(),
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("schema serialization cannot fail")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.to_json().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(digest.as_slice());
        out
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn column(&self, index: usize) -> &ColumnSpec {
        &self.columns[index]
    }

    /// Number of columns (feature blocks).
    pub fn k(&self) -> usize {
        self.columns.len()
    }

    /// Width of the one-hot encoding.
    pub fn q(&self) -> usize {
        self.offsets[self.columns.len()]
    }

    pub fn block_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn block(&self, column: usize) -> std::ops::Range<usize> {
        self.offsets[column]..self.offsets[column + 1]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn label_column(&self) -> Option<usize> {
        self.columns.iter().position(|c| c.has_role(Role::Label))
    }

    pub fn protected_column(&self) -> Option<usize> {
        self.columns.iter().position(|c| c.has_role(Role::Protected))
    }
}

/// An `N × q` one-hot matrix together with its schema.
#[derive(Debug, Clone)]
pub struct EncodedTable {
    data: Array2<f64>,
    schema: Arc<Schema>,
}

impl EncodedTable {
    /// Wraps a one-hot matrix, checking that every block of every row is an indicator.
    pub fn from_one_hot(data: Array2<f64>, schema: Arc<Schema>) -> Result<Self> {
        if data.ncols() != schema.q() {
            return Err(SchemaError::LengthMismatch {
                left: data.ncols(),
                right: schema.q(),
            });
        }
        for (r, row) in data.outer_iter().enumerate() {
            for c in 0..schema.k() {
                let block = row.slice(ndarray::s![schema.block(c)]);
                let ones = block.iter().filter(|v| **v == 1.0).count();
                let zeros = block.iter().filter(|v| **v == 0.0).count();
                if ones != 1 || ones + zeros != block.len() {
                    return Err(SchemaError::InvalidEncoding { row: r });
                }
            }
        }
        Ok(Self { data, schema })
    }

    /// Builds the one-hot matrix from per-row category/bin indices.
    pub fn from_codes(codes: &[Vec<usize>], schema: Arc<Schema>) -> Result<Self> {
        let mut data = Array2::zeros((codes.len(), schema.q()));
        for (r, row) in codes.iter().enumerate() {
            if row.len() != schema.k() {
                return Err(SchemaError::RaggedRow {
                    row: r,
                    expected: schema.k(),
                    found: row.len(),
                });
            }
            for (c, &code) in row.iter().enumerate() {
                let col = schema.column(c);
                if code >= col.domain_size() {
                    return Err(SchemaError::OutOfDomainValue {
                        row: r,
                        column: col.name.clone(),
                        value: code.to_string(),
                    });
                }
                data[[r, schema.block_offsets()[c] + code]] = 1.0;
            }
        }
        Ok(Self { data, schema })
    }

    /// Skips validation; callers guarantee indicator blocks.
    pub(crate) fn from_one_hot_unchecked(data: Array2<f64>, schema: Arc<Schema>) -> Self {
        debug_assert_eq!(data.ncols(), schema.q());
        Self { data, schema }
    }

    pub fn empty(schema: Arc<Schema>) -> Self {
        Self {
            data: Array2::zeros((0, schema.q())),
            schema,
        }
    }

    pub fn read_csv<R: Read>(reader: R, schema: Arc<Schema>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut column_of_field = Vec::with_capacity(headers.len());
        for h in headers.iter() {
            let idx = schema
                .column_index(h.trim())
                .ok_or_else(|| SchemaError::UnknownColumn(h.to_string()))?;
            column_of_field.push(idx);
        }
        for (i, c) in schema.columns().iter().enumerate() {
            if !column_of_field.contains(&i) {
                return Err(SchemaError::UnknownColumn(c.name.clone()));
            }
        }
        let mut codes = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != headers.len() {
                return Err(SchemaError::RaggedRow {
                    row: r,
                    expected: headers.len(),
                    found: record.len(),
                });
            }
            let mut row = vec![0usize; schema.k()];
            for (field, cell) in record.iter().enumerate() {
                let col = schema.column(column_of_field[field]);
                row[column_of_field[field]] = col.encode(cell).ok_or_else(|| SchemaError::OutOfDomainValue {
                    row: r,
                    column: col.name.clone(),
                    value: cell.to_string(),
                })?;
            }
            codes.push(row);
        }
        Self::from_codes(&codes, schema)
    }

    pub fn load_csv(path: impl AsRef<Path>, schema: Arc<Schema>) -> Result<Self> {
        Self::read_csv(File::open(path)?, schema)
    }

    /// Writes decoded rows (category names, bin midpoints) with a header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(self.schema.columns().iter().map(|c| c.name.as_str()))?;
        for r in 0..self.n_rows() {
            let row = self.row_codes(r);
            wtr.write_record(row.iter().enumerate().map(|(c, &code)| self.schema.column(c).decode(code)))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn block_offsets(&self) -> &[usize] {
        self.schema.block_offsets()
    }

    /// Index of the active entry in each block of row `r`.
    pub fn row_codes(&self, r: usize) -> Vec<usize> {
        let row = self.data.row(r);
        (0..self.schema.k())
            .map(|c| self.schema.block(c).position(|j| row[j] != 0.0).unwrap_or(0))
            .collect()
    }

    pub fn codes(&self) -> Vec<Vec<usize>> {
        (0..self.n_rows()).map(|r| self.row_codes(r)).collect()
    }

    /// Codes of a single column for every row.
    pub fn column_codes(&self, column: usize) -> Vec<usize> {
        let block = self.schema.block(column);
        self.data
            .outer_iter()
            .map(|row| block.clone().position(|j| row[j] != 0.0).unwrap_or(0))
            .collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            data: self.data.select(ndarray::Axis(0), rows),
            schema: self.schema.clone(),
        }
    }

    /// Seeded shuffle split into `(train, test)` with
    /// `round(n * test_fraction)` test rows, each part in original row order.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (Self, Self) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = self.n_rows();
        let n_test = ((n as f64 * test_fraction.clamp(0.0, 1.0)).round() as usize).min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (test, train) = idx.split_at_mut(n_test);
        train.sort_unstable();
        test.sort_unstable();
        (self.select_rows(train), self.select_rows(test))
    }

    /// Row-wise concatenation; both tables must share a schema.
    pub fn concat(&self, other: &EncodedTable) -> Result<Self> {
        if self.schema != other.schema {
            return Err(SchemaError::InvalidSchema(
                "cannot concatenate tables with different schemas".into(),
            ));
        }
        let data = ndarray::concatenate(ndarray::Axis(0), &[self.data.view(), other.data.view()]).expect("column counts agree");
        Ok(Self {
            data,
            schema: self.schema.clone(),
        })
    }
}

/// An ordered, duplicate-free subset of columns.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MarginalSpec {
    features: Vec<usize>,
}

impl MarginalSpec {
    pub fn new(features: Vec<usize>, schema: &Schema) -> Result<Self> {
        if features.is_empty() {
            return Err(SchemaError::InvalidMarginal("no features".into()));
        }
        if features.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SchemaError::InvalidMarginal(format!(
                "features {features:?} must be distinct and ascending"
            )));
        }
        if features.iter().any(|&f| f >= schema.k()) {
            return Err(SchemaError::InvalidMarginal(format!(
                "features {features:?} out of range for {} columns",
                schema.k()
            )));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &[usize] {
        &self.features
    }

    pub fn domain_size(&self, schema: &Schema) -> usize {
        self.features.iter().map(|&f| schema.column(f).domain_size()).product()
    }

    pub fn label(&self, schema: &Schema) -> String {
        self.features
            .iter()
            .map(|&f| schema.column(f).name.as_str())
            .collect::<Vec<_>>()
            .join("|")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl MarginalVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Clamps negative mass to zero and rescales to a probability vector.
    /// An all-zero vector becomes uniform.
    pub fn clamp_normalize(&self) -> MarginalVector {
        let clamped: Vec<f64> = self.values.iter().map(|v| v.max(0.0)).collect();
        let total: f64 = clamped.iter().sum();
        let values = if total > 0.0 {
            clamped.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / clamped.len() as f64; clamped.len()]
        };
        MarginalVector { values, normalized: true }
    }

    pub fn scaled(&self, factor: f64) -> MarginalVector {
        MarginalVector {
            values: self.values.iter().map(|v| v * factor).collect(),
            normalized: false,
        }
    }

    pub fn l1_distance(&self, other: &MarginalVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(SchemaError::LengthMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum())
    }
}

/// Kronecker product of two dense vectors, skipping zero entries of `left`.
fn kron_into(left: &[f64], right: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.resize(left.len() * right.len(), 0.0);
    for (i, &a) in left.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let base = i * right.len();
        for (j, &b) in right.iter().enumerate() {
            out[base + j] = a * b;
        }
    }
}

/// Sums the per-row Kronecker product of the selected feature blocks.
pub fn marginal(table: &EncodedTable, spec: &MarginalSpec, normalize: bool) -> Result<MarginalVector> {
    let schema = table.schema();
    if let Some(&bad) = spec.features().iter().find(|&&f| f >= schema.k()) {
        return Err(SchemaError::InvalidMarginal(format!("feature {bad} out of range")));
    }
    if normalize && table.n_rows() == 0 {
        return Err(SchemaError::EmptyTable);
    }
    let size = spec.domain_size(schema);
    let mut acc = vec![0.0; size];
    let mut cur = Vec::with_capacity(size);
    let mut next = Vec::with_capacity(size);
    for row in table.data().outer_iter() {
        cur.clear();
        cur.push(1.0);
        for &f in spec.features() {
            let block = row.slice(ndarray::s![schema.block(f)]);
            let block = block.as_slice().expect("rows of a standard-layout matrix are contiguous");
            kron_into(&cur, block, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        for (a, v) in acc.iter_mut().zip(&cur) {
            *a += v;
        }
    }
    if normalize {
        let n = table.n_rows() as f64;
        acc.iter_mut().for_each(|v| *v /= n);
    }
    Ok(MarginalVector {
        values: acc,
        normalized: normalize,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadMode {
    /// Every triple of columns.
    AllThreeWay,
    /// Every triple that contains the label column.
    ThreeWayWithLabel,
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn rec(items: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            rec(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(items, k, 0, &mut Vec::new(), &mut out);
    out
}

/// Builds the marginal workload in lexicographic order.
///
/// With `degrade` set, schemas with fewer than three columns fall back to
/// the widest marginals they admit instead of failing.
pub fn marginal_workload(schema: &Schema, mode: WorkloadMode, degrade: bool) -> Result<Vec<MarginalSpec>> {
    let k = schema.k();
    let width = if k >= 3 {
        3
    } else if degrade {
        k
    } else {
        return Err(SchemaError::InsufficientFeatures { k, needed: 3 });
    };
    let mut triples: Vec<Vec<usize>> = match mode {
        WorkloadMode::AllThreeWay => combinations(&(0..k).collect::<Vec<_>>(), width),
        WorkloadMode::ThreeWayWithLabel => {
            let label = schema.label_column().ok_or(SchemaError::MissingLabel)?;
            let others: Vec<usize> = (0..k).filter(|&c| c != label).collect();
            combinations(&others, width - 1)
                .into_iter()
                .map(|mut c| {
                    c.push(label);
                    c.sort_unstable();
                    c
                })
                .collect()
        }
    };
    triples.sort();
    triples.dedup();
    triples.into_iter().map(|f| MarginalSpec::new(f, schema)).collect()
}

/// Half the L1 distance between two probability vectors.
pub fn tv_distance(a: &MarginalVector, b: &MarginalVector) -> Result<f64> {
    Ok(0.5 * a.l1_distance(b)?)
}

/// Normalized marginals of `table` for every spec of a workload.
pub fn measure_workload(table: &EncodedTable, workload: &[MarginalSpec]) -> Result<Vec<(MarginalSpec, MarginalVector)>> {
    workload.iter().map(|s| Ok((s.clone(), marginal(table, s, true)?))).collect()
}

/// Mean and max TV distance between two tables over a workload.
pub fn workload_tv(a: &EncodedTable, b: &EncodedTable, workload: &[MarginalSpec]) -> Result<(f64, f64)> {
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for s in workload {
        let tv = tv_distance(&marginal(a, s, true)?, &marginal(b, s, true)?)?;
        sum += tv;
        max = max.max(tv);
    }
    Ok((sum / workload.len().max(1) as f64, max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab_schema() -> Arc<Schema> {
        Arc::new(
            Schema::new(vec![
                ColumnSpec::categorical("A", &["x", "y"]),
                ColumnSpec::categorical("B", &["u", "v"]),
            ])
            .unwrap(),
        )
    }

    #[test]
    fn two_column_csv_encodes_to_one_hot() {
        let csv = "A,B\nx,u\ny,v\n";
        let t = EncodedTable::read_csv(csv.as_bytes(), ab_schema()).unwrap();
        assert_eq!(t.data(), &ndarray::arr2(&[[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]]));
    }

    #[test]
    fn half_open_binning_with_closed_last_bin() {
        let edges = [18.0, 35.0, 55.0, 80.0];
        assert_eq!(bin_index(&edges, 35.0), Some(1));
        assert_eq!(bin_index(&edges, 18.0), Some(0));
        assert_eq!(bin_index(&edges, 54.999), Some(1));
        assert_eq!(bin_index(&edges, 80.0), Some(2));
        assert_eq!(bin_index(&edges, 80.5), None);
        assert_eq!(bin_index(&edges, 17.0), None);
        assert_eq!(bin_index(&edges, f64::NAN), None);
    }

    #[test]
    fn unknown_category_is_out_of_domain() {
        let err = EncodedTable::read_csv("A,B\nz,u\n".as_bytes(), ab_schema()).unwrap_err();
        match err {
            SchemaError::OutOfDomainValue { row, column, value } => {
                assert_eq!((row, column.as_str(), value.as_str()), (0, "A", "z"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_errors() {
        assert!(matches!(
            EncodedTable::read_csv("A,C\nx,u\n".as_bytes(), ab_schema()),
            Err(SchemaError::UnknownColumn(c)) if c == "C"
        ));
        assert!(matches!(
            EncodedTable::read_csv("A\nx\n".as_bytes(), ab_schema()),
            Err(SchemaError::UnknownColumn(c)) if c == "B"
        ));
        assert!(matches!(
            EncodedTable::read_csv("A,B\nx\n".as_bytes(), ab_schema()),
            Err(SchemaError::RaggedRow { row: 0, .. })
        ));
    }

    #[test]
    fn two_way_marginal_matches_counting() {
        let t = EncodedTable::from_codes(&[vec![0, 0], vec![0, 1], vec![1, 1], vec![1, 1]], ab_schema()).unwrap();
        let spec = MarginalSpec::new(vec![0, 1], t.schema()).unwrap();
        let m = marginal(&t, &spec, true).unwrap();
        assert_eq!(m.values, vec![0.25, 0.25, 0.0, 0.5]);
        let one = marginal(&t, &MarginalSpec::new(vec![1], t.schema()).unwrap(), true).unwrap();
        assert_eq!(one.values, vec![0.25, 0.75]);
    }

    #[test]
    fn constant_column_gives_point_mass() {
        let t = EncodedTable::from_codes(&[vec![0, 0], vec![0, 1], vec![0, 1]], ab_schema()).unwrap();
        let m = marginal(&t, &MarginalSpec::new(vec![0], t.schema()).unwrap(), true).unwrap();
        assert_eq!(m.values, vec![1.0, 0.0]);
    }

    #[test]
    fn normalized_marginal_of_empty_table_errors() {
        let t = EncodedTable::empty(ab_schema());
        let spec = MarginalSpec::new(vec![0], t.schema()).unwrap();
        assert!(matches!(marginal(&t, &spec, true), Err(SchemaError::EmptyTable)));
        assert_eq!(marginal(&t, &spec, false).unwrap().values, vec![0.0, 0.0]);
    }

    fn binary_schema(k: usize, label: Option<usize>) -> Schema {
        Schema::new(
            (0..k)
                .map(|i| {
                    let c = ColumnSpec::categorical(&format!("f{i}"), &["0", "1"]);
                    if Some(i) == label {
                        c.with_role(Role::Label)
                    } else {
                        c
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn workload_with_label() {
        let s = binary_schema(4, Some(3));
        let w = marginal_workload(&s, WorkloadMode::ThreeWayWithLabel, false).unwrap();
        let f: Vec<Vec<usize>> = w.iter().map(|m| m.features().to_vec()).collect();
        assert_eq!(f, vec![vec![0, 1, 3], vec![0, 2, 3], vec![1, 2, 3]]);
    }

    #[test]
    fn workload_boundaries() {
        let s = binary_schema(3, None);
        let w = marginal_workload(&s, WorkloadMode::AllThreeWay, false).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].features(), &[0, 1, 2]);

        let s2 = binary_schema(2, None);
        assert!(matches!(
            marginal_workload(&s2, WorkloadMode::AllThreeWay, false),
            Err(SchemaError::InsufficientFeatures { k: 2, needed: 3 })
        ));
        let w2 = marginal_workload(&s2, WorkloadMode::AllThreeWay, true).unwrap();
        assert_eq!(w2.len(), 1);
        assert_eq!(w2[0].features(), &[0, 1]);

        assert!(matches!(
            marginal_workload(&s, WorkloadMode::ThreeWayWithLabel, false),
            Err(SchemaError::MissingLabel)
        ));
    }

    #[test]
    fn tv_examples() {
        let v = |x: &[f64]| MarginalVector {
            values: x.to_vec(),
            normalized: true,
        };
        assert_eq!(tv_distance(&v(&[0.3, 0.7]), &v(&[0.3, 0.7])).unwrap(), 0.0);
        assert_eq!(tv_distance(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(tv_distance(&v(&[0.5, 0.5]), &v(&[0.75, 0.25])).unwrap(), 0.25);
        assert!(matches!(
            tv_distance(&v(&[1.0]), &v(&[0.5, 0.5])),
            Err(SchemaError::LengthMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn schema_json_roundtrip_and_defaults() {
        let text = r#"{"columns":[
            {"name":"age","kind":"binned-numeric","bin_edges":[18,35,55,80],"roles":["protected"]},
            {"name":"sex","kind":"categorical","categories":["Male","Female"],"roles":["label"]}
        ]}"#;
        let s = Schema::from_json(text).unwrap();
        assert_eq!(s.column(0).representative_values, vec![26.5, 45.0, 67.5]);
        assert_eq!(s.column(1).representative_values, vec![0.0, 1.0]);
        assert_eq!(s.q(), 5);
        assert_eq!(s.label_column(), Some(1));
        assert_eq!(s.protected_column(), Some(0));
        let again = Schema::from_json(&s.to_json()).unwrap();
        assert_eq!(again, s);
        assert_eq!(again.hash(), s.hash());
    }

    #[test]
    fn schema_invariants_are_enforced() {
        let bad_edges = r#"{"columns":[{"name":"a","kind":"binned-numeric","bin_edges":[1,1,2]}]}"#;
        assert!(Schema::from_json(bad_edges).is_err());
        let bad_reps = r#"{"columns":[{"name":"a","kind":"categorical","categories":["x"],"representative_values":[1,2]}]}"#;
        assert!(Schema::from_json(bad_reps).is_err());
        let dup =
            r#"{"columns":[{"name":"a","kind":"categorical","categories":["x"]},{"name":"a","kind":"categorical","categories":["y"]}]}"#;
        assert!(Schema::from_json(dup).is_err());
    }

    #[test]
    fn split_partitions_rows() {
        let codes: Vec<Vec<usize>> = (0..10).map(|i| vec![i % 2, (i / 2) % 2]).collect();
        let t = EncodedTable::from_codes(&codes, ab_schema()).unwrap();
        let (train, test) = t.split(0.3, 5);
        assert_eq!((train.n_rows(), test.n_rows()), (7, 3));
        let mut all = train.codes();
        all.extend(test.codes());
        all.sort();
        let mut want = codes.clone();
        want.sort();
        assert_eq!(all, want);
        assert_eq!(t.split(0.3, 5).1.data(), test.data());
    }
}
