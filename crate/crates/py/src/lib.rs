//! Python module `acfr`.
//!
//! Matrices cross the boundary as lists of row lists.

use acfr_core::datagen::{self, DatasetKind, DatasetSpec, Split};
use acfr_core::diffmath::Tensor;
use acfr_core::model::{Activation, Method, ModelConfig, ModelParams};
use acfr_core::spline::SplineConfig;
use acfr_core::theory;
use acfr_core::trainer::{self, AdversaryConfig, Checkpoint, Optimizer, TrainConfig, Trainer};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

fn err(e: acfr_core::Error) -> PyErr {
    use acfr_core::Error as E;
    match e {
        E::Io { .. } => PyIOError::new_err(e.to_string()),
        E::Divergence { .. } | E::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix must have at least one row"));
    }
    Tensor::from_rows(&rows).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn parse<T: std::str::FromStr<Err = acfr_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn kind(s: &str) -> PyResult<DatasetKind> {
    match s {
        "tcga-like" => Ok(DatasetKind::TcgaLike),
        "news-like" => Ok(DatasetKind::NewsLike),
        _ => Err(PyValueError::new_err(format!("unknown dataset kind '{s}' (expected tcga-like or news-like)"))),
    }
}

/// Semi-synthetic dataset with known response curves.
#[pyclass(module = "acfr", frozen)]
struct Dataset {
    inner: datagen::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    #[pyo3(signature = (kind_name, n, d, alpha=2.0, seed=0, noise_std=0.2))]
    fn new(kind_name: &str, n: usize, d: usize, alpha: f64, seed: u64, noise_std: f64) -> PyResult<Self> {
        let spec = DatasetSpec {
            noise_std,
            ..DatasetSpec::new(kind(kind_name)?, n, d, alpha, seed)
        };
        Ok(Self {
            inner: datagen::make_dataset(&spec).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: datagen::Dataset::load(&dir).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.x)
    }

    #[getter]
    fn t(&self) -> Vec<f64> {
        self.inner.t.clone()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.clone()
    }

    /// Row indices of `train`, `val` or `test`.
    fn split(&self, name: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.splits.get(parse::<Split>(name)?).to_vec())
    }

    fn optimal_treatment(&self, i: usize) -> PyResult<f64> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("unit {i} out of range")));
        }
        Ok(self.inner.optimal_treatment(i))
    }

    /// True response curves on the 65-point grid for the given units.
    fn response_grid(&self, indices: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let g = self.inner.response_grid(&indices, &datagen::treatment_grid()).map_err(err)?;
        Ok(rows(&g))
    }
}

/// Model parameters for one of `acfr`, `acfr-no-attn` or `mlp`.
#[pyclass(module = "acfr", frozen)]
struct Model {
    inner: ModelParams,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (
        method="acfr", input_dim=100, hidden=100, hidden_layers=1, repr_dim=64, tokens=8,
        key_dim=32, value_dim=32, head_dim=16, activation="relu", fixed_query=false,
        spline_degree=2, knots=None, seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        method: &str,
        input_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        repr_dim: usize,
        tokens: usize,
        key_dim: usize,
        value_dim: usize,
        head_dim: usize,
        activation: &str,
        fixed_query: bool,
        spline_degree: usize,
        knots: Option<Vec<f64>>,
        seed: u64,
    ) -> PyResult<Self> {
        let activation = match activation {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            other => return Err(PyValueError::new_err(format!("unknown activation '{other}'"))),
        };
        let cfg = ModelConfig {
            method: parse::<Method>(method)?,
            input_dim,
            hidden,
            hidden_layers,
            repr_dim,
            key_dim,
            value_dim,
            tokens,
            head_dim,
            spline: SplineConfig::new(spline_degree, knots.unwrap_or_else(|| SplineConfig::default().knots)).map_err(err)?,
            activation,
            fixed_query,
        };
        Ok(Self {
            inner: ModelParams::init(&cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            inner: ckpt.params().map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.inner, None, &path).map_err(err)
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.config.method.as_str()
    }

    /// Model config as a TOML document.
    #[getter]
    fn config(&self) -> PyResult<String> {
        toml::to_string(&self.inner.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.named_tensors().into_iter().map(|(n, _)| n).collect()
    }

    fn encode(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.encode(&matrix(x)?).map_err(err)?))
    }

    fn predict(&self, x: Vec<Vec<f64>>, t: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict(&matrix(x)?, &t).map_err(err)
    }

    fn predict_treatment(&self, z: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.predict_treatment(&matrix(z)?).map_err(err)
    }

    /// Predicted curves on the 65-point grid, one row per unit.
    fn predict_grid(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let g = self.inner.predict_grid(&matrix(x)?, &datagen::treatment_grid()).map_err(err)?;
        Ok(rows(&g))
    }

    fn attention_weights(&self, z: Vec<Vec<f64>>, t: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.attention_weights(&matrix(z)?, &t).map_err(err)?))
    }
}

/// Runs the adversarial training loop starting from `model`'s parameters.
/// Returns the trained model and a dict with the loss history.
#[pyfunction]
#[pyo3(signature = (
    dataset, model, iterations=1000, batch_size=64, inner_steps=10, gamma=1.0,
    lr_pred=1e-4, lr_adv=1e-4, seed=0, optimizer="sgd", checkpoint_interval=100, adversary=true
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    model: &Model,
    iterations: usize,
    batch_size: usize,
    inner_steps: usize,
    gamma: f64,
    lr_pred: f64,
    lr_adv: f64,
    seed: u64,
    optimizer: &str,
    checkpoint_interval: usize,
    adversary: bool,
) -> PyResult<(Model, Bound<'py, PyDict>)> {
    let optimizer = match optimizer {
        "sgd" => Optimizer::Sgd,
        "adam" => Optimizer::Adam,
        other => return Err(PyValueError::new_err(format!("unknown optimizer '{other}'"))),
    };
    let cfg = TrainConfig {
        iterations,
        batch_size,
        inner_steps,
        gamma,
        lr_pred,
        lr_adv,
        seed,
        optimizer,
        checkpoint_interval,
        adversary,
    };
    let mut t = Trainer::with_params(&dataset.inner, model.inner.clone(), &cfg).map_err(err)?;
    t.run().map_err(err)?;
    let (params, history) = t.into_parts();
    let h = PyDict::new(py);
    h.set_item("l_pred", history.l_pred)?;
    h.set_item("l_adv", history.l_adv)?;
    h.set_item("wall_ms", history.wall_ms)?;
    h.set_item("validation", history.validation)?;
    Ok((Model { inner: params }, h))
}

#[pyfunction]
fn treatment_grid() -> Vec<f64> {
    datagen::treatment_grid()
}

/// Truncated power basis `[1, t, ..., t^p, (t - k)_+^p ...]`.
#[pyfunction]
#[pyo3(signature = (t, degree=2, knots=None))]
fn spline_basis(t: f64, degree: usize, knots: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let cfg = SplineConfig::new(degree, knots.unwrap_or_else(|| SplineConfig::default().knots)).map_err(err)?;
    cfg.eval(t).map_err(err)
}

#[pyfunction]
fn mise(pred: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> PyResult<f64> {
    theory::mise(&matrix(pred)?, &matrix(truth)?, &datagen::treatment_grid()).map_err(err)
}

#[pyfunction]
fn policy_error(pred: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> PyResult<f64> {
    theory::policy_error(&matrix(pred)?, &matrix(truth)?, &datagen::treatment_grid()).map_err(err)
}

#[pyfunction]
fn pred_loss(y: Vec<f64>, y_hat: Vec<f64>) -> PyResult<f64> {
    trainer::pred_loss(&y, &y_hat).map_err(err)
}

#[pyfunction]
fn adv_loss(t: Vec<f64>, t_hat: Vec<f64>) -> PyResult<f64> {
    trainer::adv_loss(&t, &t_hat).map_err(err)
}

#[pyfunction]
fn discrete_kl(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    theory::discrete_kl(&p, &q).map_err(err)
}

/// `(I(T;Z), H(T), H(T|Z))` of a joint table with rows indexed by `z`.
#[pyfunction]
fn mutual_info(joint: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64)> {
    let m = theory::mutual_info(&matrix(joint)?).map_err(err)?;
    Ok((m.mi, m.h_t, m.h_t_given_z))
}

/// `(tv_sum, kl_bound, holds)`.
#[pyfunction]
fn pinsker_check(p: Vec<f64>, q: Vec<f64>) -> PyResult<(f64, f64, bool)> {
    let c = theory::pinsker_check(&p, &q).map_err(err)?;
    Ok((c.tv_sum, c.kl_bound, c.holds))
}

/// Bound sweep; returns the report as a TOML document.
#[pyfunction]
#[pyo3(signature = (instances=1000, max_z=8, max_t=8, seed=7, independent=false))]
fn verify_bounds(instances: usize, max_z: usize, max_t: usize, seed: u64, independent: bool) -> PyResult<String> {
    let cfg = theory::VerifyConfig {
        instances,
        max_z,
        max_t,
        seed,
        independent,
    };
    theory::verify_bounds(&cfg).and_then(|r| r.to_toml()).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (z, t, seed=0))]
fn balance_probe(z: Vec<Vec<f64>>, t: Vec<f64>, seed: u64) -> PyResult<f64> {
    let cfg = AdversaryConfig {
        seed,
        ..AdversaryConfig::linear()
    };
    theory::balance_probe(&matrix(z)?, &t, &cfg).map_err(err)
}

#[pymodule]
fn acfr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(treatment_grid, m)?)?;
    m.add_function(wrap_pyfunction!(spline_basis, m)?)?;
    m.add_function(wrap_pyfunction!(mise, m)?)?;
    m.add_function(wrap_pyfunction!(policy_error, m)?)?;
    m.add_function(wrap_pyfunction!(pred_loss, m)?)?;
    m.add_function(wrap_pyfunction!(adv_loss, m)?)?;
    m.add_function(wrap_pyfunction!(discrete_kl, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_info, m)?)?;
    m.add_function(wrap_pyfunction!(pinsker_check, m)?)?;
    m.add_function(wrap_pyfunction!(verify_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(balance_probe, m)?)?;
    Ok(())
}
