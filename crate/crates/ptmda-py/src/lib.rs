//! Python bindings over the adaptation laboratory: synthetic benchmark
//! generation, the two-stage trainer, and trained-model inference. All
//! bound models run at 64-bit precision; reports cross the boundary as
//! JSON strings so Python's own parser owns the decoding.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ptmda::autodiff::Tensor;
use ptmda::config::{config_to_text, set_key};
use ptmda::data::{gen_synthetic, load_csv_domain, DomainRole, SyntheticFamily, SyntheticSpec};
use ptmda::eval::accuracy;
use ptmda::nn::{
    load_checkpoint, peek_checkpoint_precision, predict_average, save_checkpoint, ModelBundle,
};
use ptmda::trainer::{run_ptmda, TrainConfig as CoreConfig};

fn err(e: ptmda::Error) -> PyErr {
    match e {
        ptmda::Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor_from_rows(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    Tensor::from_rows(rows).map_err(err)
}

fn tensor_to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.values().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn parse_role(role: &str) -> PyResult<DomainRole> {
    match role {
        "source" => Ok(DomainRole::Source),
        "target" => Ok(DomainRole::Target),
        other => Err(PyValueError::new_err(format!(
            "role must be \"source\" or \"target\", got {other:?}"
        ))),
    }
}

/// One labeled or unlabeled dataset with a name and a role.
#[pyclass]
#[derive(Clone)]
struct Domain {
    inner: ptmda::data::Domain<f64>,
}

#[pymethods]
impl Domain {
    #[new]
    #[pyo3(signature = (name, x, y=None, role="source"))]
    fn new(name: &str, x: Vec<Vec<f64>>, y: Option<Vec<usize>>, role: &str) -> PyResult<Self> {
        let inner =
            ptmda::data::Domain::new(name, tensor_from_rows(&x)?, y, parse_role(role)?)
                .map_err(err)?;
        Ok(Domain { inner })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn role(&self) -> String {
        self.inner.role.to_string()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        tensor_to_rows(&self.inner.x)
    }

    #[getter]
    fn y(&self) -> Option<Vec<usize>> {
        self.inner.y.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Domain({:?}, {}x{}, {}, {})",
            self.inner.name,
            self.inner.len(),
            self.inner.dim(),
            if self.inner.y.is_some() { "labeled" } else { "unlabeled" },
            self.inner.role,
        )
    }
}

/// Training hyperparameters. Construct with keyword overrides over the
/// defaults; values route through the same parser as config files, so the
/// two surfaces validate identically.
#[pyclass]
#[derive(Clone)]
struct TrainConfig {
    inner: CoreConfig,
}

fn kwarg_text(key: &str, value: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(b) = value.extract::<bool>() {
        return Ok(if b { "true" } else { "false" }.to_string());
    }
    if let Ok(dims) = value.extract::<Vec<usize>>() {
        return Ok(dims.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    }
    if let Ok(s) = value.extract::<String>() {
        return Ok(s);
    }
    if let Ok(n) = value.extract::<i64>() {
        return Ok(n.to_string());
    }
    if let Ok(f) = value.extract::<f64>() {
        return Ok(format!("{f}"));
    }
    Err(PyValueError::new_err(format!("unsupported value type for key {key:?}")))
}

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = CoreConfig::default();
        if let Some(kwargs) = kwargs {
            for (key, value) in kwargs.iter() {
                let key: String = key.extract()?;
                set_key(&mut inner, &key, &kwarg_text(&key, &value)?).map_err(err)?;
            }
        }
        Ok(TrainConfig { inner })
    }

    /// One `key = value` line per field, in config-file syntax.
    fn text(&self) -> String {
        config_to_text(&self.inner)
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        set_key(&mut self.inner, key, &kwarg_text(key, value)?).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(\n{})", self.text())
    }
}

/// A trained bundle: shared extractor, per-source classifiers, and the
/// conditioned discriminators, ready for inference or checkpointing.
#[pyclass]
struct Model {
    inner: ModelBundle<f64>,
}

#[pymethods]
impl Model {
    /// Ensemble prediction: (labels, confidences).
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, Vec<f64>)> {
        predict_average(&self.inner, &tensor_from_rows(&x)?).map_err(err)
    }

    /// Feature-extractor output, one row per input row.
    fn embed(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let f = self.inner.embed(&tensor_from_rows(&x)?).map_err(err)?;
        Ok(tensor_to_rows(&f))
    }

    /// Ensemble accuracy against ground-truth labels.
    fn accuracy(&self, x: Vec<Vec<f64>>, y: Vec<usize>) -> PyResult<f64> {
        let (pred, _) = predict_average(&self.inner, &tensor_from_rows(&x)?).map_err(err)?;
        accuracy(&pred, &y).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let precision = peek_checkpoint_precision(&path).map_err(err)?;
        if precision != "f64" {
            return Err(PyValueError::new_err(format!(
                "checkpoint precision {precision:?} is not supported here; re-train at f64"
            )));
        }
        Ok(Model { inner: load_checkpoint(&path).map_err(err)? })
    }

    #[getter]
    fn source_names(&self) -> Vec<String> {
        self.inner.source_names.clone()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.arch.input_dim
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.arch.n_classes
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(inputs {}, classes {}, sources {:?})",
            self.inner.arch.input_dim, self.inner.arch.n_classes, self.inner.source_names,
        )
    }
}

/// Builds a synthetic benchmark family. Every listed domain is returned in
/// order; the last one is the unlabeled-role target.
#[pyfunction]
#[pyo3(signature = (
    family="rotated-moons",
    angles=None,
    shifts=None,
    cov_scales=None,
    n_classes=2,
    n_per_domain=500,
    noise_std=0.1,
    seed=0,
))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic(
    family: &str,
    angles: Option<Vec<f64>>,
    shifts: Option<Vec<Vec<f64>>>,
    cov_scales: Option<Vec<f64>>,
    n_classes: usize,
    n_per_domain: usize,
    noise_std: f64,
    seed: u64,
) -> PyResult<Vec<Domain>> {
    let family = match family {
        "rotated-moons" => SyntheticFamily::RotatedMoons {
            angles_deg: angles.unwrap_or_else(|| vec![0.0, 30.0, 60.0, 90.0]),
        },
        "shifted-gaussians" => {
            let shifts = shifts.ok_or_else(|| {
                PyValueError::new_err("shifted-gaussians requires shifts, one point per domain")
            })?;
            let cov_scales = cov_scales.unwrap_or_else(|| vec![1.0; shifts.len()]);
            SyntheticFamily::ShiftedGaussians { shifts, cov_scales, n_classes }
        }
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown family {other:?}; expected rotated-moons or shifted-gaussians"
            )))
        }
    };
    let spec = SyntheticSpec { family, n_per_domain, noise_std, seed };
    let domains = gen_synthetic::<f64>(&spec).map_err(err)?;
    Ok(domains.into_iter().map(|inner| Domain { inner }).collect())
}

/// Loads one domain from CSV (all columns are features except an optional
/// `label` column).
#[pyfunction]
#[pyo3(signature = (path, name=None, role="source"))]
fn load_domain(path: PathBuf, name: Option<String>, role: &str) -> PyResult<Domain> {
    let name = match name {
        Some(name) => name,
        None => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| PyValueError::new_err("cannot derive a domain name from path"))?,
    };
    let inner = load_csv_domain(&path, name, parse_role(role)?).map_err(err)?;
    Ok(Domain { inner })
}

/// Runs the full two-stage pipeline. Roles follow argument position: every
/// domain in `sources` trains as a source, `target` as the target,
/// whatever their constructed roles say. Returns the trained model and the
/// training report as a JSON string.
#[pyfunction]
#[pyo3(signature = (sources, target, config=None))]
fn train(
    py: Python<'_>,
    sources: Vec<Py<Domain>>,
    target: Py<Domain>,
    config: Option<Py<TrainConfig>>,
) -> PyResult<(Model, String)> {
    let cfg = match &config {
        Some(c) => c.borrow(py).inner.clone(),
        None => CoreConfig::default(),
    };
    cfg.validate().map_err(err)?;
    let sources: Vec<ptmda::data::Domain<f64>> = sources
        .iter()
        .map(|d| {
            let mut inner = d.borrow(py).inner.clone();
            inner.role = DomainRole::Source;
            inner
        })
        .collect();
    let mut target = target.borrow(py).inner.clone();
    target.role = DomainRole::Target;
    let (bundle, report) = run_ptmda(&sources, &target, &cfg).map_err(err)?;
    let json = serde_json::to_string(&report)
        .map_err(|e| PyRuntimeError::new_err(format!("report serialization: {e}")))?;
    Ok((Model { inner: bundle }, json))
}

#[pymodule]
fn ptmda_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Domain>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_domain, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
