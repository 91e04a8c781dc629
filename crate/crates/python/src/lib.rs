//! Python bindings: scene generation, event simulation, training, rendering
//! and evaluation.
//!
//! Images cross the boundary as `(height, width, values)` with row-major,
//! channel-interleaved `values`, which `numpy.reshape` turns into an array.

use std::path::PathBuf;

use evsplat_core::dataset::{
    generate_tiny_scene, load_checkpoint, load_dataset, save_checkpoint, Checkpoint, SceneSpec, SensorDataset, Split,
};
use evsplat_core::events::Event;
use evsplat_core::metrics::{evaluate, psnr as psnr_db};
use evsplat_core::raster::render;
use evsplat_core::simulator::{simulate as simulate_events, FrameSequence};
use evsplat_core::trainer::{deformed_at, TrainConfig, TrainState, Trainer};
use evsplat_core::{Error, RgbImage};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyArithmeticError::new_err(e.to_string()),
        _ => PyOSError::new_err(e.to_string()),
    }
}

fn split_of(name: &str) -> PyResult<Split> {
    name.parse().map_err(to_py)
}

type ImageParts = (usize, usize, Vec<f64>);

fn rgb_parts(img: &RgbImage) -> ImageParts {
    (img.height(), img.width(), img.pixels().iter().flatten().copied().collect())
}

fn rgb_from_parts(height: usize, width: usize, values: &[f64]) -> PyResult<RgbImage> {
    if values.len() != height * width * 3 {
        return Err(PyValueError::new_err(format!(
            "expected {} values for a {width}x{height} RGB image, got {}",
            height * width * 3,
            values.len()
        )));
    }
    RgbImage::from_vec(width, height, values.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).map_err(to_py)
}

/// A loaded multi-sensor capture.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: SensorDataset,
    #[pyo3(get)]
    warnings: Vec<String>,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let report = load_dataset(&path).map_err(to_py)?;
        Ok(PyDataset { inner: report.dataset, warnings: report.warnings })
    }

    #[getter]
    fn scene(&self) -> String {
        self.inner.meta.scene.clone()
    }

    #[getter]
    fn span(&self) -> f64 {
        self.inner.meta.span
    }

    #[getter]
    fn num_events(&self) -> usize {
        self.inner.events.len()
    }

    #[getter]
    fn num_depth(&self) -> usize {
        self.inner.depth.len()
    }

    /// Number of RGB frames in `split`.
    fn num_frames(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.rgb_in(split_of(split)?).len())
    }

    /// Ground-truth image `index` of `split`.
    fn frame(&self, split: &str, index: usize) -> PyResult<(f64, ImageParts)> {
        let f = self.frame_ref(split, index)?;
        Ok((f.camera.timestamp, rgb_parts(&f.image)))
    }

    /// Events as `(x, y, t, polarity)` tuples.
    fn events(&self) -> Vec<(u16, u16, f64, i8)> {
        self.inner.events.events.iter().map(|e| (e.x, e.y, e.t, e.p)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(scene={:?}, rgb={}, depth={}, events={})",
            self.inner.meta.scene,
            self.inner.rgb.len(),
            self.inner.depth.len(),
            self.inner.events.len()
        )
    }
}

impl PyDataset {
    fn frame_ref(&self, split: &str, index: usize) -> PyResult<&evsplat_core::dataset::RgbFrame> {
        let frames = self.inner.rgb_in(split_of(split)?);
        let i = frames
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("split {split} has {} frames", frames.len())))?;
        Ok(&self.inner.rgb[*i])
    }
}

/// Trained Gaussians, deformation field and optimizer state.
#[pyclass(name = "Model")]
struct PyModel {
    config: TrainConfig,
    state: TrainState,
}

#[pymethods]
impl PyModel {
    /// Trains on `dataset`; `config` uses the `key = value` format of the CLI.
    #[staticmethod]
    #[pyo3(signature = (dataset, config = "", steps = None, seed = None))]
    fn train(py: Python<'_>, dataset: &PyDataset, config: &str, steps: Option<u64>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = TrainConfig::parse(config).map_err(to_py)?;
        if let Some(s) = steps {
            cfg.total_steps = s;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let ds = &dataset.inner;
        py.detach(|| {
            let trainer = Trainer::new(ds, cfg.clone())?;
            let mut state = trainer.init_state()?;
            trainer.train(&mut state, |_, _| Ok(()))?;
            Ok(PyModel { config: cfg, state })
        })
        .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(to_py)?;
        Ok(PyModel { config: ck.config, state: ck.state })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint { config: self.config.clone(), state: self.state.clone() };
        save_checkpoint(&ck, &path).map_err(to_py)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    #[getter]
    fn num_gaussians(&self) -> usize {
        self.state.gaussians.len()
    }

    /// Renders the viewpoint of frame `index` in `split`.
    #[pyo3(signature = (dataset, index, split = "eval"))]
    fn render(&self, dataset: &PyDataset, index: usize, split: &str) -> PyResult<ImageParts> {
        let f = dataset.frame_ref(split, index)?;
        let ds = &dataset.inner;
        let gs = deformed_at(&self.state, ds.meta.span, f.camera.timestamp).map_err(to_py)?;
        let out = render(&gs, &f.camera, self.config.background.unwrap_or(ds.meta.background)).map_err(to_py)?;
        Ok(rgb_parts(&out.color))
    }

    /// Mean PSNR and DRMS over `split`; `None` where nothing was measured.
    #[pyo3(signature = (dataset, split = "eval"))]
    fn evaluate(&self, py: Python<'_>, dataset: &PyDataset, split: &str) -> PyResult<(Option<f64>, Option<f64>)> {
        let split = split_of(split)?;
        let ds = &dataset.inner;
        let background = self.config.background.unwrap_or(ds.meta.background);
        let report = py.detach(|| evaluate(&self.state, ds, split, background)).map_err(to_py)?;
        Ok((report.mean_psnr(), report.mean_drms()))
    }
}

/// Generates a built-in analytic scene into `out` and loads it back.
#[pyfunction]
#[pyo3(signature = (scene, out, seed = 0))]
fn generate(py: Python<'_>, scene: &str, out: PathBuf, seed: u64) -> PyResult<PyDataset> {
    let mut spec = SceneSpec::new(scene);
    spec.noise.seed = seed;
    py.detach(|| generate_tiny_scene(&spec, &out)).map_err(to_py)?;
    PyDataset::load(out)
}

/// Noise-free events from `frames`, a list of `(height, width, values)`
/// images, at `timestamps`.
#[pyfunction]
#[pyo3(signature = (frames, timestamps, contrast = 0.2))]
fn simulate(frames: Vec<ImageParts>, timestamps: Vec<f64>, contrast: f64) -> PyResult<Vec<(u16, u16, f64, i8)>> {
    let images = frames
        .iter()
        .map(|(h, w, v)| rgb_from_parts(*h, *w, v))
        .collect::<PyResult<Vec<_>>>()?;
    let seq = FrameSequence::new(images, timestamps).map_err(to_py)?;
    let stream = simulate_events(&seq, contrast).map_err(to_py)?;
    Ok(stream.events.iter().map(|&Event { x, y, t, p }| (x, y, t, p)).collect())
}

/// PSNR in decibels between two `(height, width, values)` images; infinite
/// when they are identical.
#[pyfunction]
fn psnr(a: ImageParts, b: ImageParts) -> PyResult<f64> {
    let a = rgb_from_parts(a.0, a.1, &a.2)?;
    let b = rgb_from_parts(b.0, b.1, &b.2)?;
    Ok(psnr_db(&a, &b).map_err(to_py)?.value())
}

#[pymodule]
fn evsplat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    Ok(())
}
