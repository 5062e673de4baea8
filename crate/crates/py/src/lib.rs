use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dcac_core::backbone::BackboneConfig;
use dcac_core::data::{generate_synthetic_domains, read_dataset, write_dataset, SyntheticDomainSpec};
use dcac_core::eval;
use dcac_core::model::{Model, ModelConfig, Variant};
use dcac_core::trainer::{self, load_checkpoint, save_checkpoint, CheckpointMeta, TrainConfig};
use dcac_core::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Shape(_) | Error::Dimension(_) | Error::Config(_) | Error::InvalidArgument(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A segmentation network of any variant.
#[pyclass(name = "Model", module = "dcac")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (variant = "dcac", num_domains = 3, num_classes = 2, num_blocks = 4, base_channels = 8, spatial_rank = 2, seed = 0))]
    fn new(
        variant: &str,
        num_domains: usize,
        num_classes: usize,
        num_blocks: usize,
        base_channels: usize,
        spatial_rank: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(py_err)?;
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                num_blocks,
                base_channels,
                spatial_rank,
                ..Default::default()
            },
            num_domains,
            num_classes,
            variant,
        };
        Ok(Self {
            inner: Model::new(cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_checkpoint(&path).and_then(|c| c.into_model()).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let meta = CheckpointMeta::model_only(self.inner.config());
        save_checkpoint(&path, &self.inner, None, &meta).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant().to_string()
    }

    /// Model configuration as JSON.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(json_err)
    }

    /// `(dac, cac)` dynamic parameter counts per image.
    fn dynamic_param_counts(&self) -> (usize, usize) {
        let c = self.inner.dynamic_param_counts();
        (c.dac, c.cac)
    }

    fn num_parameters(&self) -> usize {
        self.inner.store().num_scalars()
    }

    /// Segment one image given as a flat channel-major buffer with shape
    /// `[channels, spatial...]`. Returns the flat label mask and the domain
    /// code (None for DeepAll).
    fn predict(&self, image: Vec<f32>, shape: Vec<usize>) -> PyResult<(Vec<u8>, Option<Vec<f64>>)> {
        let t = Tensor::from_vec(&shape, image).map_err(py_err)?;
        let p = eval::predict(&self.inner, &t).map_err(py_err)?;
        Ok((p.mask, p.code.map(|c| c.probs().to_vec())))
    }

    /// Train on every domain of the dataset at `data_dir` except `holdout`.
    /// `config` is a JSON training configuration; missing keys use defaults.
    #[pyo3(signature = (data_dir, holdout, config = None, val_cases = 0))]
    fn train(&mut self, data_dir: PathBuf, holdout: usize, config: Option<&str>, val_cases: usize) -> PyResult<Vec<f64>> {
        let cfg: TrainConfig = match config {
            Some(s) => serde_json::from_str(s).map_err(json_err)?,
            None => TrainConfig::default(),
        };
        let (_, datasets) = read_dataset(&data_dir).map_err(py_err)?;
        let sources: Vec<_> = datasets
            .iter()
            .filter(|d| d.domain_id != holdout)
            .map(|d| d.split(val_cases).0)
            .collect();
        let out = trainer::train(&mut self.inner, &sources, &cfg, None).map_err(py_err)?;
        Ok(out.log.iter().map(|r| r.total).collect())
    }

    /// Mean foreground DSC (percent) over the cases of one domain.
    fn evaluate(&self, data_dir: PathBuf, domain: usize) -> PyResult<f64> {
        let (_, datasets) = read_dataset(&data_dir).map_err(py_err)?;
        let ds = datasets
            .iter()
            .find(|d| d.domain_id == domain)
            .ok_or_else(|| PyValueError::new_err(format!("no domain {domain}")))?;
        let cases = eval::evaluate_cases(&self.inner, ds, eval::ContentMode::Generated).map_err(py_err)?;
        Ok(eval::Report::from_cases("", self.inner.config().num_classes, cases).mean_dsc())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Model(variant='{}', K={}, C={})", c.variant, c.num_domains, c.num_classes)
    }
}

/// Write a synthetic multi-domain dataset and return its manifest as JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, domains = 4, cases = 40, size = 96, classes = 2, seed = 7))]
fn generate_synthetic(out_dir: PathBuf, domains: usize, cases: usize, size: usize, classes: usize, seed: u64) -> PyResult<String> {
    let mut spec = SyntheticDomainSpec::new(seed, vec![size, size]);
    spec.num_classes = classes;
    let ds = generate_synthetic_domains(&spec, domains, cases).map_err(py_err)?;
    let m = write_dataset(&out_dir, &ds, classes).map_err(py_err)?;
    serde_json::to_string(&m).map_err(json_err)
}

#[pyfunction]
fn dsc(pred: Vec<u8>, gt: Vec<u8>, class_id: u8) -> PyResult<f64> {
    eval::dsc(&pred, &gt, class_id).map_err(py_err)
}

/// Average surface distance, or None when either mask is empty.
#[pyfunction]
fn asd(pred: Vec<u8>, gt: Vec<u8>, shape: Vec<usize>, class_id: u8) -> PyResult<Option<f64>> {
    eval::asd(&pred, &gt, &shape, class_id).map_err(py_err)
}

/// Welch's two-sample t-test: `(t, df, p)`.
#[pyfunction]
fn ttest(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let r = eval::two_sample_ttest(&a, &b).map_err(py_err)?;
    Ok((r.t, r.df, r.p_value))
}

#[pyfunction]
fn poly_lr(epoch: usize, lr0: f64, max_epoch: usize) -> PyResult<f64> {
    trainer::poly_lr(epoch, lr0, max_epoch).map_err(py_err)
}

/// Run the command-line interface in-process; returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    dcac_core::cli::run(std::iter::once("dcac".to_string()).chain(args))
}

#[pymodule]
fn dcac(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(asd, m)?)?;
    m.add_function(wrap_pyfunction!(ttest, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("VARIANTS", Variant::ablation_set().iter().map(|v| v.to_string()).collect::<Vec<_>>())?;
    Ok(())
}
