//! Python bindings: panoramas, reprojection, training, rendering and
//! metrics. Build the importable module with the `extension-module`
//! feature and copy `libpanonerf.so` to `panonerf.so`.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use panonerf_core::config::RunConfig;
use panonerf_core::evaluation::{psnr as core_psnr, ssim as core_ssim, Psnr};
use panonerf_core::field::{load_checkpoint, save_checkpoint, Checkpoint};
use panonerf_core::geometry::{CameraPose, Vec3};
use panonerf_core::io::{load_panorama, save_panorama};
use panonerf_core::panorama::Panorama;
use panonerf_core::rendering::render_panorama;
use panonerf_core::reprojection::{generate_training_set, sample_virtual_poses};
use panonerf_core::scene::{synth_box_scene, BoxScene};
use panonerf_core::training::{lr_at as core_lr_at, MetricsRow, TrainConfig, Trainer};

/// Maps a core error to `IOError` or `ValueError`, keeping its kind tag.
pub fn to_py(e: panonerf_core::Error) -> PyErr {
    let msg = format!("{}: {}", e.kind(), e);
    match e {
        panonerf_core::Error::Io { .. } => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn pose(p: (f64, f64, f64)) -> PyResult<CameraPose> {
    CameraPose::new(Vec3::new(p.0, p.1, p.2)).map_err(to_py)
}

/// An equirectangular RGB-D panorama with a per-pixel valid mask.
#[pyclass(name = "Panorama", module = "panonerf", skip_from_py_object)]
#[derive(Clone)]
pub struct PyPanorama {
    pub inner: Panorama,
}

#[pymethods]
impl PyPanorama {
    #[new]
    fn new(width: usize, height: usize, rgb: Vec<f32>, depth: Vec<f32>, valid: Vec<bool>) -> PyResult<Self> {
        Ok(Self {
            inner: Panorama::new(width, height, rgb, depth, valid).map_err(to_py)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (rgb, depth, depth_scale = 0.001, mask = None))]
    fn load(rgb: PathBuf, depth: PathBuf, depth_scale: f64, mask: Option<PathBuf>) -> PyResult<Self> {
        Ok(Self {
            inner: load_panorama(rgb, depth, depth_scale, mask.as_deref()).map_err(to_py)?,
        })
    }

    #[pyo3(signature = (rgb, depth, depth_scale = 0.001, mask = None))]
    fn save(&self, rgb: PathBuf, depth: PathBuf, depth_scale: f64, mask: Option<PathBuf>) -> PyResult<()> {
        save_panorama(&self.inner, rgb, depth, depth_scale, mask.as_deref()).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    /// Row-major interleaved RGB in [0, 1].
    fn rgb(&self) -> Vec<f32> {
        self.inner.rgb().to_vec()
    }

    /// Distances in meters; 0 where invalid.
    fn depth(&self) -> Vec<f32> {
        self.inner.depth().to_vec()
    }

    fn valid(&self) -> Vec<bool> {
        self.inner.valid().to_vec()
    }

    fn valid_fraction(&self) -> f64 {
        self.inner.valid_fraction()
    }

    fn __repr__(&self) -> String {
        format!(
            "Panorama({}x{}, valid={:.3})",
            self.inner.width(),
            self.inner.height(),
            self.inner.valid_fraction()
        )
    }
}

/// Renders the analytic box room from its camera.
#[pyfunction]
#[pyo3(signature = (width = 64, height = 32))]
fn synth_box(width: usize, height: usize) -> PyResult<PyPanorama> {
    Ok(PyPanorama {
        inner: synth_box_scene(&BoxScene::default(), width, height).map_err(to_py)?,
    })
}

/// `count` positions uniform in the ball of `radius` around the origin;
/// the first is the origin.
#[pyfunction]
#[pyo3(signature = (count, radius = 0.3, seed = 1))]
fn virtual_poses(count: usize, radius: f64, seed: u64) -> PyResult<Vec<(f64, f64, f64)>> {
    let poses = sample_virtual_poses(&pose((0.0, 0.0, 0.0))?, count, radius, seed).map_err(to_py)?;
    Ok(poses.iter().map(|p| (p.position.x, p.position.y, p.position.z)).collect())
}

/// Reprojects a panorama captured at `source` to `target`.
#[pyfunction]
#[pyo3(signature = (pano, target, source = (0.0, 0.0, 0.0)))]
fn reproject(pano: &PyPanorama, target: (f64, f64, f64), source: (f64, f64, f64)) -> PyResult<PyPanorama> {
    let mut frames = generate_training_set(&pano.inner, &pose(source)?, &[pose(target)?]).map_err(to_py)?;
    Ok(PyPanorama {
        inner: frames.remove(0).pano,
    })
}

/// PSNR in dB over all pixels; `inf` for identical images.
#[pyfunction]
fn psnr(a: &PyPanorama, b: &PyPanorama) -> PyResult<f64> {
    Ok(match core_psnr(&a.inner.to_image(), &b.inner.to_image()).map_err(to_py)? {
        Psnr::Db(v) => v,
        Psnr::Identical => f64::INFINITY,
    })
}

#[pyfunction]
fn ssim(a: &PyPanorama, b: &PyPanorama) -> PyResult<f64> {
    core_ssim(&a.inner.to_image(), &b.inner.to_image()).map_err(to_py)
}

/// A run configuration addressed by dotted keys such as `train.iters`.
#[pyclass(name = "Config", module = "panonerf", skip_from_py_object)]
#[derive(Clone, Default)]
pub struct PyConfig {
    pub inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (overrides = None))]
    fn new(overrides: Option<HashMap<String, String>>) -> PyResult<Self> {
        let mut cfg = Self::default();
        let mut pairs: Vec<_> = overrides.unwrap_or_default().into_iter().collect();
        pairs.sort();
        for (k, v) in pairs {
            cfg.inner.set(&k, &v).map_err(to_py)?;
        }
        Ok(cfg)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(path).map_err(to_py)?,
        })
    }

    /// The larger preset with the original hyperparameters.
    #[staticmethod]
    fn full_scale_preset() -> Self {
        Self {
            inner: RunConfig {
                train: TrainConfig::full_scale(),
                ..RunConfig::default()
            },
        }
    }

    #[staticmethod]
    fn keys() -> Vec<(String, String)> {
        RunConfig::keys()
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn iters(&self) -> u64 {
        self.inner.train.iters
    }
}

/// Learning rate at `iter` under `config`.
#[pyfunction]
fn lr_at(iter: u64, config: &PyConfig) -> f64 {
    core_lr_at(iter, &config.inner.train)
}

/// Trained field weights with their sampling bounds.
#[pyclass(name = "Checkpoint", module = "panonerf", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCheckpoint {
    pub inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.iteration
    }

    #[getter]
    fn bounds(&self) -> (f32, f32) {
        (self.inner.near, self.inner.far)
    }

    fn param_count(&self) -> usize {
        self.inner.params.param_count()
    }

    /// Deterministic render at `position`; sample counts default to the
    /// desk preset.
    #[pyo3(signature = (position, width, height, n_coarse = None, n_fine = None))]
    fn render(
        &self,
        position: (f64, f64, f64),
        width: usize,
        height: usize,
        n_coarse: Option<usize>,
        n_fine: Option<usize>,
    ) -> PyResult<PyPanorama> {
        let mut cfg = TrainConfig::default()
            .sampling(self.inner.near as f64, self.inner.far as f64)
            .deterministic();
        cfg.n_coarse = n_coarse.unwrap_or(cfg.n_coarse);
        cfg.n_fine = n_fine.unwrap_or(cfg.n_fine);
        cfg.validate().map_err(to_py)?;
        Ok(PyPanorama {
            inner: render_panorama(&self.inner.params, &pose(position)?, width, height, &cfg).map_err(to_py)?,
        })
    }
}

fn row_dict(row: &MetricsRow) -> HashMap<&'static str, f64> {
    HashMap::from([
        ("iter", row.iter as f64),
        ("lr", row.lr),
        ("color_loss", row.color_loss),
        ("geo_loss", row.geo_loss),
        ("sc_loss", row.sc_loss),
        ("total", row.total),
    ])
}

/// Optimizes a field on one input panorama.
#[pyclass(name = "Trainer", module = "panonerf")]
pub struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(input: &PyPanorama, config: &PyConfig) -> PyResult<Self> {
        let cfg = &config.inner;
        let inner = Trainer::new(&input.inner, cfg.input_pose().map_err(to_py)?, cfg.train.clone()).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// One optimizer step; returns the logged losses.
    fn step(&mut self) -> PyResult<HashMap<&'static str, f64>> {
        Ok(row_dict(&self.inner.step().map_err(to_py)?))
    }

    /// Runs to the configured iteration count, writing checkpoints and
    /// metrics when `out_dir` is given.
    #[pyo3(signature = (out_dir = None))]
    fn run(&mut self, out_dir: Option<PathBuf>) -> PyResult<()> {
        if let Some(d) = &out_dir {
            std::fs::create_dir_all(d).map_err(|e| PyIOError::new_err(format!("io: {}: {e}", d.display())))?;
        }
        self.inner.run(out_dir.as_deref()).map_err(to_py)
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.iteration()
    }

    fn log(&self) -> Vec<HashMap<&'static str, f64>> {
        self.inner.log().iter().map(row_dict).collect()
    }

    fn checkpoint(&self) -> PyCheckpoint {
        PyCheckpoint {
            inner: self.inner.checkpoint(),
        }
    }

    fn resume(&mut self, ckpt: &PyCheckpoint) -> PyResult<()> {
        self.inner.resume(&ckpt.inner).map_err(to_py)
    }
}

#[pymodule]
pub fn panonerf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPanorama>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(synth_box, m)?)?;
    m.add_function(wrap_pyfunction!(virtual_poses, m)?)?;
    m.add_function(wrap_pyfunction!(reproject, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    Ok(())
}
