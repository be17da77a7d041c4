//! Python bindings: schemas, encoded tables, constraint programs and the
//! generator lifecycle (pretrain, fine-tune, sample, evaluate).

use std::collections::BTreeMap;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use tabsynth::compile::{compile, finetune, CompileOptions, CompiledSpec, FinetuneConfig, VerifyConfig};
use tabsynth::eval::{evaluate as eval_report, rejection_sample};
use tabsynth::generator::{Generator, GeneratorConfig};
use tabsynth::lang::{self, TypedProgram};
use tabsynth::pretrain::{pretrain, PretrainConfig};
use tabsynth::privacy::{dp_pretrain, DpConfig};
use tabsynth::schema::{marginal_workload, measure_workload, EncodedTable, MarginalSpec, MarginalVector, WorkloadMode};
use tabsynth::{datasets, schema};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Reads an optional dict of overrides into a config with serde defaults.
fn config<T: DeserializeOwned + Default>(py: Python<'_>, dict: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(dict) = dict else {
        return Ok(T::default());
    };
    let text: String = py.import("json")?.call_method1("dumps", (dict,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Schema", module = "tabsynth", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySchema {
    inner: Arc<schema::Schema>,
}

#[pymethods]
impl PySchema {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = schema::Schema::from_json(text).map_err(value_err)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = schema::Schema::load(path).map_err(value_err)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn columns(&self) -> Vec<String> {
        self.inner.columns().iter().map(|c| c.name.clone()).collect()
    }

    /// Category labels of each column in code order.
    fn categories(&self, column: &str) -> PyResult<Vec<String>> {
        let c = self
            .inner
            .column_index(column)
            .ok_or_else(|| PyValueError::new_err(format!("unknown column `{column}`")))?;
        let spec = self.inner.column(c);
        Ok((0..spec.domain_size()).map(|i| spec.decode(i)).collect())
    }

    #[getter]
    fn label(&self) -> Option<String> {
        self.inner.label_column().map(|c| self.inner.column(c).name.clone())
    }

    #[getter]
    fn protected(&self) -> Option<String> {
        self.inner.protected_column().map(|c| self.inner.column(c).name.clone())
    }

    /// One-hot width.
    #[getter]
    fn q(&self) -> usize {
        self.inner.q()
    }

    fn __len__(&self) -> usize {
        self.inner.k()
    }

    fn __repr__(&self) -> String {
        format!("Schema(columns={:?})", self.columns())
    }
}

/// Rows of a schema, stored one-hot.
#[pyclass(name = "Table", module = "tabsynth", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTable {
    inner: EncodedTable,
}

#[pymethods]
impl PyTable {
    #[staticmethod]
    fn load_csv(path: &str, schema: &PySchema) -> PyResult<Self> {
        let inner = EncodedTable::load_csv(path, schema.inner.clone()).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_codes(codes: Vec<Vec<usize>>, schema: &PySchema) -> PyResult<Self> {
        let inner = EncodedTable::from_codes(&codes, schema.inner.clone()).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn save_csv(&self, path: &str) -> PyResult<()> {
        self.inner.save_csv(path).map_err(runtime_err)
    }

    /// Per-row category codes.
    fn codes(&self) -> Vec<Vec<usize>> {
        self.inner.codes()
    }

    /// Decoded cells of one column.
    fn column(&self, name: &str) -> PyResult<Vec<String>> {
        let schema = self.inner.schema();
        let c = schema
            .column_index(name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown column `{name}`")))?;
        let spec = schema.column(c);
        Ok(self.inner.column_codes(c).into_iter().map(|i| spec.decode(i)).collect())
    }

    /// Returns `(train, test)` with `test_fraction` of the rows held out.
    #[pyo3(signature = (test_fraction, seed = 0))]
    fn split(&self, test_fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(PyValueError::new_err("test_fraction must be in [0, 1)"));
        }
        let (a, b) = self.inner.split(test_fraction, seed);
        Ok((Self { inner: a }, Self { inner: b }))
    }

    /// Normalized marginal over the named columns, flattened in code order.
    fn marginal(&self, columns: Vec<String>) -> PyResult<Vec<f64>> {
        let schema = self.inner.schema();
        let features = columns
            .iter()
            .map(|n| {
                schema
                    .column_index(n)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown column `{n}`")))
            })
            .collect::<PyResult<Vec<_>>>()?;
        let spec = MarginalSpec::new(features, schema).map_err(value_err)?;
        Ok(schema::marginal(&self.inner, &spec, true).map_err(value_err)?.values)
    }

    #[getter]
    fn schema(&self) -> PySchema {
        PySchema {
            inner: self.inner.schema().clone(),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.n_rows()
    }

    fn __repr__(&self) -> String {
        format!("Table(rows={}, columns={})", self.inner.n_rows(), self.inner.schema().k())
    }
}

/// A parsed and schema-checked constraint program.
#[pyclass(name = "Program", module = "tabsynth", frozen, skip_from_py_object)]
struct PyProgram {
    typed: TypedProgram,
    canonical: String,
}

#[pymethods]
impl PyProgram {
    #[new]
    fn new(source: &str, schema: &PySchema) -> PyResult<Self> {
        let parsed = lang::parse(source).map_err(value_err)?;
        let typed = lang::validate(&parsed, &schema.inner).map_err(value_err)?;
        Ok(Self {
            canonical: lang::format_program(&parsed),
            typed,
        })
    }

    #[getter]
    fn spec_names(&self) -> Vec<String> {
        self.typed.specs.iter().map(|s| s.name.clone()).collect()
    }

    /// `(epsilon, delta)` when the program requests differential privacy.
    #[getter]
    fn privacy(&self) -> Option<(f64, f64)> {
        self.typed.dp
    }

    fn format(&self) -> String {
        self.canonical.clone()
    }

    fn __repr__(&self) -> String {
        format!("Program(specs={:?})", self.spec_names())
    }
}

impl PyProgram {
    fn compile(
        &self,
        reference: &EncodedTable,
        lambdas: Option<BTreeMap<String, f64>>,
        opts: &CompileOptions,
    ) -> PyResult<Vec<CompiledSpec>> {
        compile(&self.typed, reference, &lambdas.unwrap_or_default(), opts).map_err(value_err)
    }
}

/// Generator plus the marginal targets and reference rows that fine-tuning
/// reuses after pretraining.
#[pyclass(name = "Generator", module = "tabsynth")]
struct PyGenerator {
    gen: Generator,
    targets: Option<Vec<(MarginalSpec, MarginalVector)>>,
    reference: Option<EncodedTable>,
}

#[pymethods]
impl PyGenerator {
    #[new]
    #[pyo3(signature = (schema, seed = 0, config = None))]
    fn new(py: Python<'_>, schema: &PySchema, seed: u64, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg: GeneratorConfig = self::config(py, config)?;
        let gen = Generator::new(schema.inner.clone(), cfg, seed).map_err(value_err)?;
        Ok(Self {
            gen,
            targets: None,
            reference: None,
        })
    }

    /// Loads parameters written by `save`. Fine-tuning needs a fresh
    /// `pretrain` or `dp_pretrain` call since targets are not stored.
    #[staticmethod]
    fn load(path: &str, schema: &PySchema) -> PyResult<Self> {
        let gen = Generator::load(path, schema.inner.clone()).map_err(value_err)?;
        Ok(Self {
            gen,
            targets: None,
            reference: None,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.gen.save(path).map_err(runtime_err)
    }

    /// Non-private marginal matching. Returns the mean TV of each epoch.
    #[pyo3(signature = (table, config = None))]
    fn pretrain(&mut self, py: Python<'_>, table: &PyTable, config: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<f64>> {
        let cfg: PretrainConfig = self::config(py, config)?;
        let history = py.detach(|| pretrain(&mut self.gen, &table.inner, &cfg)).map_err(runtime_err)?;
        let workload = marginal_workload(table.inner.schema(), cfg.workload, cfg.workload_degrade).map_err(value_err)?;
        self.targets = Some(measure_workload(&table.inner, &workload).map_err(runtime_err)?);
        self.reference = Some(table.inner.clone());
        Ok(history.epochs.iter().map(|e| e.mean_tv).collect())
    }

    /// Private pretraining under `(epsilon, delta)`. Fine-tuning afterwards
    /// only sees the noisy targets and rows sampled from the model.
    #[pyo3(signature = (table, epsilon, delta, config = None))]
    fn dp_pretrain<'py>(
        &mut self,
        py: Python<'py>,
        table: &PyTable,
        epsilon: f64,
        delta: f64,
        config: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = DpConfig {
            epsilon,
            delta,
            ..self::config(py, config)?
        };
        let out = py.detach(|| dp_pretrain(&mut self.gen, &table.inner, &cfg)).map_err(runtime_err)?;
        let n_ref = out.n_hat.round().max(1.0) as usize;
        self.reference = Some(self.gen.sample(n_ref, cfg.seed.wrapping_add(1)));
        self.targets = Some(out.targets);
        let d = PyDict::new(py);
        d.set_item("rounds", out.ledger.rounds.len())?;
        d.set_item("rho_total", out.ledger.total_rho)?;
        d.set_item("rho_spent", out.ledger.spent())?;
        d.set_item("n_hat", out.n_hat)?;
        d.set_item("audit", out.ledger.audit())?;
        Ok(d)
    }

    /// Fine-tunes against the program's specs. Returns the per-epoch log.
    #[pyo3(signature = (program, config = None, lambdas = None, compile_options = None))]
    fn finetune<'py>(
        &mut self,
        py: Python<'py>,
        program: &PyProgram,
        config: Option<&Bound<'py, PyDict>>,
        lambdas: Option<BTreeMap<String, f64>>,
        compile_options: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (Some(targets), Some(reference)) = (&self.targets, &self.reference) else {
            return Err(PyRuntimeError::new_err("call pretrain or dp_pretrain before finetune"));
        };
        let cfg: FinetuneConfig = self::config(py, config)?;
        let opts: CompileOptions = self::config(py, compile_options)?;
        let specs = program.compile(reference, lambdas, &opts)?;
        let gen = &mut self.gen;
        let log = py.detach(|| finetune(gen, &specs, targets, &cfg)).map_err(runtime_err)?;
        to_py(py, &log)
    }

    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> PyTable {
        PyTable {
            inner: self.gen.sample(n, seed),
        }
    }

    /// Samples `n` rows that satisfy every row-level spec of `program`.
    /// Returns the table and the rejection statistics.
    #[pyo3(signature = (program, n, max_rounds = 50, seed = 0))]
    fn reject_sample<'py>(
        &self,
        py: Python<'py>,
        program: &PyProgram,
        n: usize,
        max_rounds: usize,
        seed: u64,
    ) -> PyResult<(PyTable, Bound<'py, PyAny>)> {
        let empty = EncodedTable::empty(self.gen.schema().clone());
        let all = program.compile(self.reference.as_ref().unwrap_or(&empty), None, &CompileOptions::default())?;
        let row_level: Vec<CompiledSpec> = all.into_iter().filter(|s| s.is_row_level()).collect();
        let (table, stats) = py
            .detach(|| rejection_sample(&self.gen, &row_level, n, max_rounds, seed))
            .map_err(runtime_err)?;
        Ok((PyTable { inner: table }, to_py(py, &stats)?))
    }

    fn __repr__(&self) -> String {
        format!("Generator(params={}, pretrained={})", self.gen.n_params(), self.targets.is_some())
    }
}

/// Fidelity, downstream and fairness report of `synthetic` as a dict.
#[pyfunction]
#[pyo3(signature = (synthetic, train, test, program = None, seed = 0))]
fn evaluate<'py>(
    py: Python<'py>,
    synthetic: &PyTable,
    train: &PyTable,
    test: &PyTable,
    program: Option<&PyProgram>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let specs = match program {
        Some(p) => p.compile(
            &train.inner,
            None,
            &CompileOptions {
                seed,
                ..Default::default()
            },
        )?,
        None => Vec::new(),
    };
    let seeds = BTreeMap::from([("eval".to_string(), seed)]);
    let report = py
        .detach(|| eval_report(&synthetic.inner, &train.inner, &test.inner, &specs, &VerifyConfig::default(), seeds))
        .map_err(runtime_err)?;
    to_py(py, &report)
}

/// Canonical text of a program; raises on syntax errors.
#[pyfunction]
fn format_program(source: &str) -> PyResult<String> {
    Ok(lang::format_program(&lang::parse(source).map_err(value_err)?))
}

/// Synthetic census-like table with a sex/salary dependence of strength `sex_bias`.
#[pyfunction]
#[pyo3(signature = (n, seed = 0, sex_bias = 0.8))]
fn toy_adult(n: usize, seed: u64, sex_bias: f64) -> PyTable {
    PyTable {
        inner: datasets::toy_adult(n, seed, sex_bias),
    }
}

/// Names of the three-way marginals pretraining matches for `schema`.
#[pyfunction]
fn workload(schema: &PySchema) -> PyResult<Vec<String>> {
    let mode = if schema.inner.label_column().is_some() {
        WorkloadMode::ThreeWayWithLabel
    } else {
        WorkloadMode::AllThreeWay
    };
    let specs = marginal_workload(&schema.inner, mode, true).map_err(value_err)?;
    Ok(specs.iter().map(|s| s.label(&schema.inner)).collect())
}

#[pymodule]
#[pyo3(name = "tabsynth")]
fn tabsynth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchema>()?;
    m.add_class::<PyTable>()?;
    m.add_class::<PyProgram>()?;
    m.add_class::<PyGenerator>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(format_program, m)?)?;
    m.add_function(wrap_pyfunction!(toy_adult, m)?)?;
    m.add_function(wrap_pyfunction!(workload, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
