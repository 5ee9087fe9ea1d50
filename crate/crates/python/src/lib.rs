//! Python bindings: configuration runs, dependency models, permutation
//! plans, the expression language and reference indices.

use dgsi::cli::{self, Overrides};
use dgsi::depmodel;
use dgsi::models::{self, ModelSpec};
use dgsi::representations::{self, PermutationPlan};
use dgsi::sensitivity::{self, IndexEstimate};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::{Rng, SeedableRng};
use std::path::PathBuf;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_err(e: dgsi::Error) -> PyErr {
    match cli::exit_code(&e) {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// One index estimate.
#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct Estimate {
    estimate: f64,
    display: f64,
    stderr: Option<f64>,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
    flag: Option<String>,
}

impl From<&IndexEstimate> for Estimate {
    fn from(e: &IndexEstimate) -> Self {
        Estimate {
            estimate: e.estimate,
            display: e.display,
            stderr: e.stderr,
            ci_lo: e.ci_lo,
            ci_hi: e.ci_hi,
            flag: e.flag.clone(),
        }
    }
}

#[pymethods]
impl Estimate {
    fn __repr__(&self) -> String {
        match self.stderr {
            Some(s) => format!("Estimate({:.6} ± {:.6})", self.estimate, s),
            None => format!("Estimate({:.6})", self.estimate),
        }
    }
}

/// Indices of one subset.
#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct Entry {
    subset: Vec<usize>,
    representation: usize,
    first_type1: Estimate,
    total_type1: Estimate,
    first_type2: Estimate,
    total_type2: Estimate,
}

#[pymethods]
impl Entry {
    fn __repr__(&self) -> String {
        format!(
            "Entry({:?}, first={:.4}, total={:.4})",
            self.subset, self.first_type1.estimate, self.total_type1.estimate
        )
    }
}

/// Result of a run: the index report and the audit record.
#[pyclass(frozen)]
struct Report {
    inner: sensitivity::IndexReport,
    audit: String,
}

#[pymethods]
impl Report {
    #[getter]
    fn entries(&self) -> Vec<Entry> {
        self.inner.entries.iter().map(entry).collect()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim
    }

    /// Entry of `subset` (1-based indices, any order).
    fn entry(&self, subset: Vec<usize>) -> PyResult<Entry> {
        self.inner
            .entry(&subset)
            .map(entry)
            .ok_or_else(|| PyValueError::new_err(format!("subset {subset:?} was not requested")))
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Audit record as JSON text.
    fn audit_json(&self) -> String {
        self.audit.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.entries.len()
    }
}

fn entry(e: &sensitivity::IndexEntry) -> Entry {
    Entry {
        subset: e.subset.clone(),
        representation: e.representation,
        first_type1: (&e.first_type1).into(),
        total_type1: (&e.total_type1).into(),
        first_type2: (&e.first_type2).into(),
        total_type2: (&e.total_type2).into(),
    }
}

/// Problems found in a JSON configuration (empty when valid).
#[pyfunction]
fn validate_config(text: &str) -> Vec<String> {
    match cli::validate_config(text) {
        Ok(_) => Vec::new(),
        Err(errs) => errs,
    }
}

/// Runs a JSON configuration. Result files are written only when `out` is
/// given.
#[pyfunction]
#[pyo3(signature = (text, out=None, seed=None))]
fn run_config(py: Python<'_>, text: &str, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<Report> {
    let config = cli::validate_config(text).map_err(|errs| PyValueError::new_err(errs.join("\n")))?;
    let cleanup = out.is_none();
    let out_dir = out.unwrap_or_else(|| std::env::temp_dir().join(format!("dgsi-py-{}", std::process::id())));
    let overrides = Overrides {
        out: Some(out_dir.clone()),
        seed,
        ..Default::default()
    };
    let res = py.detach(|| cli::run(config, &overrides));
    if cleanup {
        let _ = std::fs::remove_dir_all(&out_dir);
    }
    let res = res.map_err(run_err)?;
    Ok(Report {
        inner: res.analysis.report,
        audit: serde_json::to_string_pretty(&res.audit).expect("audit serializes"),
    })
}

/// Selected permutations of a block of `d` inputs (1-based).
#[pyfunction]
fn select_permutations(d: usize) -> PyResult<Vec<Vec<usize>>> {
    Ok(representations::select_permutations(d).map_err(value_err)?.permutations)
}

/// Minimal number of representations for dependent blocks of these sizes.
#[pyfunction]
fn r_min(dims: Vec<usize>) -> PyResult<u128> {
    representations::r_min(&dims).map_err(value_err)
}

/// Permutation plan of a preset model as JSON.
#[pyfunction]
fn permutation_plan(preset: &str) -> PyResult<String> {
    let spec = preset_spec(preset)?;
    let structure = spec.default_structure().map_err(value_err)?.expect("presets have structures");
    Ok(PermutationPlan::for_structure(&structure).map_err(value_err)?.to_json())
}

fn preset_spec(name: &str) -> PyResult<ModelSpec> {
    match name {
        "linear_gaussian" => Ok(ModelSpec::linear_reference()),
        "portfolio" => Ok(ModelSpec::portfolio_reference()),
        "gsobol" => Ok(ModelSpec::gsobol_reference()),
        _ => Err(PyValueError::new_err(format!("unknown preset '{name}'"))),
    }
}

/// Closed-form indices of a model given as JSON (or a preset name), as a
/// dict with `variance`, `compact` and `exact` lists; `None` when no closed
/// form exists.
#[pyfunction]
fn analytic_indices<'py>(py: Python<'py>, model: &str) -> PyResult<Option<Bound<'py, PyDict>>> {
    let spec = match preset_spec(model) {
        Ok(s) => s,
        Err(_) => serde_json::from_str(model).map_err(value_err)?,
    };
    let Some(rep) = models::analytic_indices(&spec).map_err(value_err)? else {
        return Ok(None);
    };
    let d = PyDict::new(py);
    d.set_item("variance", rep.variance)?;
    let list = |v: &[models::AnalyticIndex]| v.iter().map(|a| (a.subset.clone(), a.first, a.total)).collect::<Vec<_>>();
    d.set_item("compact", list(&rep.compact))?;
    d.set_item("exact", list(&rep.exact))?;
    Ok(Some(d))
}

/// Parses an expression and returns its canonical text.
#[pyfunction]
fn parse_expression(src: &str) -> PyResult<String> {
    Ok(models::parse_expression(src).map_err(value_err)?.to_string())
}

#[pyfunction]
fn evaluate_expression(src: &str, x: Vec<f64>) -> PyResult<f64> {
    let e = models::parse_expression(src).map_err(value_err)?;
    e.eval(&x).map_err(PyValueError::new_err)
}

/// A dependency model of one block, built from the JSON block description
/// and a lead order (0-based local indices, lead first).
#[pyclass]
struct DependencyModel {
    dm: depmodel::DependencyModel,
}

#[pymethods]
impl DependencyModel {
    #[new]
    fn new(family_json: &str, order: Vec<usize>) -> PyResult<Self> {
        let fam = cli::family_from_json(family_json).map_err(value_err)?;
        Ok(DependencyModel {
            dm: fam.build(&order).map_err(value_err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.dm.dim()
    }

    #[getter]
    fn order(&self) -> Vec<usize> {
        self.dm.order().to_vec()
    }

    /// Slot kinds in input order.
    fn slots(&self) -> Vec<String> {
        self.dm
            .slots()
            .iter()
            .map(|s| format!("{}:{:?}", s.position, s.kind))
            .collect()
    }

    /// Components (lead first, in `order`) from slot values.
    fn evaluate(&self, inputs: Vec<f64>) -> PyResult<Vec<f64>> {
        if inputs.len() != self.dm.slots().len() {
            return Err(PyValueError::new_err(format!(
                "expected {} slot values, got {}",
                self.dm.slots().len(),
                inputs.len()
            )));
        }
        let mut out = vec![0.0; self.dm.dim()];
        self.dm.evaluate(&inputs, &mut out);
        Ok(out)
    }

    /// `n` draws, rows in local block order.
    fn sample(&self, py: Python<'_>, n: usize, seed: u64) -> Vec<Vec<f64>> {
        py.detach(|| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut inputs = vec![0.0; self.dm.slots().len()];
            let mut out = vec![0.0; self.dm.dim()];
            (0..n)
                .map(|_| {
                    for (k, v) in inputs.iter_mut().enumerate() {
                        let u: f64 = rng.random();
                        *v = self.dm.sample_slot(k, u);
                    }
                    self.dm.evaluate(&inputs, &mut out);
                    let mut row = vec![0.0; out.len()];
                    for (pos, &local) in self.dm.order().iter().enumerate() {
                        row[local] = out[pos];
                    }
                    row
                })
                .collect()
        })
    }
}

#[pymodule]
fn dgsi_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Estimate>()?;
    m.add_class::<Entry>()?;
    m.add_class::<Report>()?;
    m.add_class::<DependencyModel>()?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(select_permutations, m)?)?;
    m.add_function(wrap_pyfunction!(r_min, m)?)?;
    m.add_function(wrap_pyfunction!(permutation_plan, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_indices, m)?)?;
    m.add_function(wrap_pyfunction!(parse_expression, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_expression, m)?)?;
    Ok(())
}
