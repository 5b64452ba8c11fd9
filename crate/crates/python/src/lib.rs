//! Python bindings. Model-space arrays cross the boundary as lists of
//! float lists, one per image; 8-bit images come back as one `bytes` per
//! image and are accepted as `bytes` or int lists.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use rgflow_core::analysis::{self, Quadrants};
use rgflow_core::data::{self, Dequantizer, MsdsParams, Noise, PinwheelParams};
use rgflow_core::lattice::{self, LatentIndex, PixelRegion};
use rgflow_core::model::{LatentPyramid, ModelConfig, Prior, PriorKind, RgFlowModel, TemperatureSchedule};
use rgflow_core::Error;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows_to_array<T: Copy + Default>(rows: &[Vec<T>], cols: Option<usize>) -> PyResult<Array2<T>> {
    let width = cols.or_else(|| rows.first().map(Vec::len)).unwrap_or(0);
    if let Some(bad) = rows.iter().position(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!("row {bad} has {} values, expected {width}", rows[bad].len())));
    }
    let flat: Vec<T> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), width), flat).expect("row lengths checked"))
}

fn array_to_rows<T: Copy, U: From<T>>(a: &Array2<T>) -> Vec<Vec<U>> {
    a.outer_iter().map(|r| r.iter().map(|&v| U::from(v)).collect()).collect()
}

fn f64_rows(rows: &[Vec<f64>], cols: usize) -> PyResult<Array2<f32>> {
    Ok(rows_to_array(rows, Some(cols))?.mapv(|v| v as f32))
}

/// Lattice geometry: image size `L`, kernel `m`, channels `C`.
#[pyclass(name = "LatticeSpec", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLatticeSpec(lattice::LatticeSpec);

#[pymethods]
impl PyLatticeSpec {
    #[new]
    #[pyo3(signature = (size, kernel = 4, channels = 3))]
    fn new(size: usize, kernel: usize, channels: usize) -> PyResult<Self> {
        lattice::LatticeSpec::new(size, kernel, channels).map(Self).map_err(to_py)
    }

    #[getter]
    fn size(&self) -> usize {
        self.0.size
    }

    #[getter]
    fn kernel(&self) -> usize {
        self.0.kernel
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn num_levels(&self) -> usize {
        self.0.num_levels()
    }

    fn latent_counts(&self) -> Vec<usize> {
        self.0.latent_counts()
    }

    fn flat_index(&self, h: usize, i: usize, j: usize, c: usize) -> PyResult<usize> {
        self.0.flat_index(LatentIndex { h, i, j, c }).map_err(to_py)
    }

    /// `(h, i, j, c)` of a flat latent slot.
    fn latent_index(&self, flat: usize) -> PyResult<(usize, usize, usize, usize)> {
        let l = self.0.latent_index(flat).map_err(to_py)?;
        Ok((l.h, l.i, l.j, l.c))
    }

    /// Pixels `(row, col)` a latent can influence.
    fn generation_cone(&self, h: usize, i: usize, j: usize, c: usize) -> PyResult<Vec<(usize, usize)>> {
        let cone = self.0.generation_cone(LatentIndex { h, i, j, c }).map_err(to_py)?;
        Ok(cone.pixels())
    }

    /// Flat slots of the latents that depend on the pixel rectangle, and
    /// their per-level counts.
    fn inference_cone(&self, row: usize, col: usize, height: usize, width: usize) -> PyResult<(Vec<usize>, Vec<usize>)> {
        let cone = self.0.inference_cone(PixelRegion::new(row, col, height, width)).map_err(to_py)?;
        let region = PixelRegion::new(row, col, height, width);
        let slots = analysis::free_latents(&self.0, region, analysis::InpaintArm::Cone, 0).map_err(to_py)?;
        Ok((slots, cone.level_counts()))
    }

    fn __repr__(&self) -> String {
        format!("LatticeSpec(size={}, kernel={}, channels={})", self.0.size, self.0.kernel, self.0.channels)
    }
}

/// RG-Flow image model in single precision.
#[pyclass(name = "Model", skip_from_py_object)]
struct PyModel(RgFlowModel<f32>);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (size = 32, kernel = 4, channels = 3, hidden = 48, n_layer = vec![4], n_res = 4, prior = "laplacian", prior_scale = 1.0, share_levels = false, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        size: usize,
        kernel: usize,
        channels: usize,
        hidden: usize,
        n_layer: Vec<usize>,
        n_res: usize,
        prior: &str,
        prior_scale: f64,
        share_levels: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let kind: PriorKind = prior.parse().map_err(to_py)?;
        let config = ModelConfig {
            size,
            kernel,
            channels,
            n_layer,
            n_res,
            hidden,
            prior: Prior { kind, scale: prior_scale },
            share_levels,
        };
        RgFlowModel::new(config, seed).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RgFlowModel::load(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(to_py)
    }

    /// Replaces the near-identity initialization with random projections
    /// of scale `gain`.
    fn randomize(&mut self, seed: u64, gain: f64) {
        self.0.randomize(seed, gain);
    }

    #[getter]
    fn spec(&self) -> PyLatticeSpec {
        PyLatticeSpec(self.0.spec)
    }

    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    /// Model-space rows to flat latent rows and `log|det dz/dx|`.
    fn encode(&self, py: Python<'_>, x: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let x = f64_rows(&x, self.0.spec.dim())?;
        let (z, ld) = py.detach(|| self.0.encode(&x)).map_err(to_py)?;
        Ok((array_to_rows(&z.to_flat()), ld.iter().map(|&v| v as f64).collect()))
    }

    /// Flat latent rows to model-space rows and `log|det dx/dz|`.
    fn decode(&self, py: Python<'_>, z: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let spec = self.0.spec;
        let z = LatentPyramid::from_flat(&spec, &f64_rows(&z, spec.dim())?).map_err(to_py)?;
        let (x, ld) = py.detach(|| self.0.decode(&z)).map_err(to_py)?;
        Ok((array_to_rows(&x), ld.iter().map(|&v| v as f64).collect()))
    }

    fn log_prob(&self, py: Python<'_>, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = f64_rows(&x, self.0.spec.dim())?;
        let lp = py.detach(|| self.0.log_prob(&x)).map_err(to_py)?;
        Ok(lp.iter().map(|&v| v as f64).collect())
    }

    /// `n` model-space samples at one temperature for every level.
    #[pyo3(signature = (n, temperature = 1.0, seed = 0))]
    fn sample(&self, py: Python<'_>, n: usize, temperature: f64, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let temps = TemperatureSchedule::uniform(temperature, self.0.spec.num_levels()).map_err(to_py)?;
        let x = py.detach(|| self.0.sample(&temps, n, seed)).map_err(to_py)?;
        Ok(array_to_rows(&x))
    }

    fn __repr__(&self) -> String {
        let c = &self.0.config;
        format!("Model(size={}, kernel={}, channels={}, hidden={}, params={})", c.size, c.kernel, c.channels, c.hidden, self.0.num_params())
    }
}

/// MSDS images `start..start + n` of stream `seed`, as rows of bytes.
#[pyfunction]
#[pyo3(signature = (n, variant = 1, seed = 0, start = 0))]
fn gen_msds(n: usize, variant: u8, seed: u64, start: usize) -> PyResult<Vec<Vec<u8>>> {
    let set = data::gen_msds_range(&MsdsParams::new(variant), start, n, seed).map_err(to_py)?;
    Ok(array_to_rows(&set.pixels))
}

/// Pinwheel points and their arm labels.
#[pyfunction]
#[pyo3(signature = (n, seed = 0))]
fn gen_pinwheel(n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let p = data::gen_pinwheel(&PinwheelParams::default(), n, seed).map_err(to_py)?;
    Ok((array_to_rows(&p.points), p.labels))
}

/// Bytes to model space. With `seed` the dequantization noise is uniform,
/// otherwise the midpoint is used.
#[pyfunction]
#[pyo3(signature = (x8, seed = None))]
fn preprocess(x8: Vec<Vec<u8>>, seed: Option<u64>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let x8 = rows_to_array(&x8, None)?;
    let dq = Dequantizer::default();
    let (x, ld) = match seed {
        Some(s) => dq.preprocess::<f64, _>(x8.view(), Noise::Uniform(&mut ChaCha8Rng::seed_from_u64(s))),
        None => dq.preprocess::<f64, ChaCha8Rng>(x8.view(), Noise::Midpoint),
    };
    Ok((array_to_rows(&x), ld.to_vec()))
}

#[pyfunction]
fn postprocess(x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<u8>>> {
    let x = rows_to_array(&x, None)?;
    Ok(array_to_rows(&Dequantizer::default().postprocess(&x)))
}

#[pyfunction]
fn bits_per_dim(log_prob: f64, preprocess_logdet: f64, dims: usize) -> f64 {
    data::bits_per_dim(log_prob, preprocess_logdet, dims)
}

/// PSNR in dB for values in `[0, 1]`.
#[pyfunction]
fn psnr(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    analysis::psnr(&x, &y).map_err(to_py)
}

/// Hyperbolic mix: levels below `theta` from `xb`, the rest from `xa`.
#[pyfunction]
fn mix(py: Python<'_>, model: &PyModel, xa: Vec<Vec<f64>>, xb: Vec<Vec<f64>>, theta: usize) -> PyResult<Vec<Vec<f64>>> {
    let dim = model.0.spec.dim();
    let (xa, xb) = (f64_rows(&xa, dim)?, f64_rows(&xb, dim)?);
    let out = py.detach(|| analysis::mix_hyperbolic(&model.0, &xa, &xb, theta)).map_err(to_py)?;
    Ok(array_to_rows(&out))
}

/// Mean absolute response map (`L x L` rows) of latent `(h, i, j, c)` and
/// its total strength.
#[pyfunction]
#[pyo3(signature = (model, h, i, j, c = 0, n_samples = 16, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn receptive_field(
    py: Python<'_>,
    model: &PyModel,
    h: usize,
    i: usize,
    j: usize,
    c: usize,
    n_samples: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let l = LatentIndex { h, i, j, c };
    let rf = py.detach(|| analysis::receptive_field(&model.0, l, n_samples, seed)).map_err(to_py)?;
    Ok((array_to_rows(&rf.map), rf.strength))
}

/// Fraction of points whose latent quadrant's majority label is their own.
/// `split` is "axes" (sectors around the half-axes) or "signs".
#[pyfunction]
#[pyo3(signature = (latents, labels, split="axes"))]
fn quadrant_purity(latents: Vec<Vec<f64>>, labels: Vec<usize>, split: &str) -> PyResult<f64> {
    let split = match split {
        "axes" => Quadrants::Axes,
        "signs" => Quadrants::Signs,
        other => return Err(PyValueError::new_err(format!("unknown split {other:?}, expected \"axes\" or \"signs\""))),
    };
    let z = rows_to_array(&latents, Some(2))?;
    if z.nrows() != labels.len() {
        return Err(PyValueError::new_err(format!("{} points, {} labels", z.nrows(), labels.len())));
    }
    Ok(analysis::quadrant_purity(&z, &labels, split))
}

#[pymodule]
pub fn rgflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyLatticeSpec>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen_msds, m)?)?;
    m.add_function(wrap_pyfunction!(gen_pinwheel, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(postprocess, m)?)?;
    m.add_function(wrap_pyfunction!(bits_per_dim, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(mix, m)?)?;
    m.add_function(wrap_pyfunction!(receptive_field, m)?)?;
    m.add_function(wrap_pyfunction!(quadrant_purity, m)?)?;
    Ok(())
}
