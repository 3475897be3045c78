//! Python bindings. Tensors cross the boundary as a `Tensor` object that can
//! be built from and converted to flat lists plus a shape.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use tpie_core::checkpoint::Checkpoint;
use tpie_core::datagen::{self, DatagenConfig};
use tpie_core::diffeo::{self, DeformationField, Grid, VelocityField};
use tpie_core::diffusion::{self, GuidanceConfig};
use tpie_core::pipeline::{self, Model};
use tpie_core::{metrics, rng, Error};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type CoreTensor = tpie_core::Tensor<f64>;

#[pyclass(name = "Tensor", module = "tpie", frozen, from_py_object)]
#[derive(Clone)]
struct PyTensor(CoreTensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        CoreTensor::new(shape, data).map(Self).map_err(err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self(CoreTensor::zeros(shape))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn max_abs(&self) -> f64 {
        self.0.max_abs()
    }

    fn __len__(&self) -> usize {
        self.0.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

#[pyclass(name = "VelocityField", module = "tpie", frozen, from_py_object)]
#[derive(Clone)]
struct PyVelocity(VelocityField<f64>);

#[pymethods]
impl PyVelocity {
    /// `field` has shape `[d, *extents]`.
    #[new]
    fn new(field: PyTensor) -> PyResult<Self> {
        let shape = field.0.shape();
        if shape.len() < 2 {
            return Err(PyValueError::new_err("velocity field needs shape [d, *extents]"));
        }
        let grid = Grid::new(shape[1..].to_vec()).map_err(err)?;
        VelocityField::new(grid, field.0).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (extents, max_norm, max_freq=3, seed=0))]
    fn random(extents: Vec<usize>, max_norm: f64, max_freq: usize, seed: u64) -> PyResult<Self> {
        let grid = Grid::new(extents).map_err(err)?;
        Ok(Self(diffeo::random_smooth_velocity(&grid, max_norm, max_freq, &mut rng::stream(seed, 0))))
    }

    #[staticmethod]
    fn constant(extents: Vec<usize>, value: Vec<f64>) -> PyResult<Self> {
        let grid = Grid::new(extents).map_err(err)?;
        VelocityField::constant(grid, &value).map(Self).map_err(err)
    }

    fn tensor(&self) -> PyTensor {
        PyTensor(self.0.tensor().clone())
    }

    fn max_norm(&self) -> f64 {
        self.0.max_norm()
    }

    /// `exp(v)` by scaling and squaring. Picks the squaring count from the
    /// field norm unless one is given.
    #[pyo3(signature = (squarings=None))]
    fn exp(&self, squarings: Option<u32>) -> PyResult<PyDeformation> {
        let k = squarings.unwrap_or_else(|| diffeo::min_squarings(self.0.max_norm()));
        diffeo::exponentiate(&self.0, k).map(PyDeformation).map_err(err)
    }

    #[pyo3(signature = (squarings=None))]
    fn inverse(&self, squarings: Option<u32>) -> PyResult<PyDeformation> {
        let k = squarings.unwrap_or_else(|| diffeo::min_squarings(self.0.max_norm()));
        diffeo::invert(&self.0, k).map(PyDeformation).map_err(err)
    }
}

#[pyclass(name = "Deformation", module = "tpie", frozen, from_py_object)]
#[derive(Clone)]
struct PyDeformation(DeformationField<f64>);

#[pymethods]
impl PyDeformation {
    fn displacement(&self) -> PyTensor {
        PyTensor(self.0.displacement().clone())
    }

    fn warp(&self, image: PyTensor) -> PyResult<PyTensor> {
        diffeo::warp(&image.0, &self.0).map(PyTensor).map_err(err)
    }

    fn compose(&self, inner: &PyDeformation) -> PyResult<PyDeformation> {
        diffeo::compose(&self.0, &inner.0).map(PyDeformation).map_err(err)
    }

    fn jacobian_determinant(&self) -> PyTensor {
        PyTensor(diffeo::jacobian_determinant(&self.0))
    }

    /// `(min_det, frac_nonpositive)`.
    fn topology(&self) -> (f64, f64) {
        let r = diffeo::topology_report(&self.0);
        (r.min_det, r.frac_nonpositive)
    }

    fn grid_overlay(&self, spacing: usize) -> PyResult<PyTensor> {
        diffeo::deformation_grid_overlay(&self.0, spacing).map(PyTensor).map_err(err)
    }
}

/// Standardize a latent. Returns the scaled latent and `(max_abs, mean,
/// rms_dev)`.
#[pyfunction]
fn scale_latent(gamma: PyTensor) -> PyResult<(PyTensor, (f64, f64, f64))> {
    let (z, s) = diffusion::scale_psi(&gamma.0).map_err(err)?;
    Ok((PyTensor(z), (s.max_abs, s.mean, s.rms_dev)))
}

#[pyfunction]
fn unscale_latent(scaled: PyTensor, stats: (f64, f64, f64)) -> PyTensor {
    let stats = diffusion::LatentStats {
        max_abs: stats.0,
        mean: stats.1,
        rms_dev: stats.2,
    };
    PyTensor(diffusion::unscale_psi(&scaled.0, &stats))
}

/// Per-pixel `(mean, std, lower, upper)` over a list of samples.
#[pyfunction]
fn pixel_stats(samples: Vec<PyTensor>) -> PyResult<(PyTensor, PyTensor, PyTensor, PyTensor)> {
    let samples: Vec<CoreTensor> = samples.into_iter().map(|t| t.0).collect();
    let s = metrics::pixelwise_stats(&samples).map_err(err)?;
    Ok((PyTensor(s.mean), PyTensor(s.std), PyTensor(s.lower), PyTensor(s.upper)))
}

#[pyfunction]
fn proxy_frechet(real: PyTensor, generated: PyTensor) -> PyResult<f64> {
    metrics::proxy_frechet(&real.0, &generated.0).map_err(err)
}

/// Write a synthetic dataset and return the number of pairs per split.
#[pyfunction]
#[pyo3(signature = (n, out, seed=0))]
fn generate_dataset(py: Python<'_>, n: usize, out: PathBuf, seed: u64) -> PyResult<(usize, usize, usize)> {
    py.detach(|| datagen::generate_dataset(n, &DatagenConfig::default(), seed, &out)).map_err(err)?;
    let [a, b, c] = datagen::split_sizes(n);
    Ok((a, b, c))
}

#[pyfunction]
fn read_image(path: PathBuf) -> PyResult<PyTensor> {
    tpie_core::io::read_image(&path).map(|t| PyTensor(t.cast())).map_err(err)
}

#[pyclass(name = "Model", module = "tpie", frozen)]
struct PyModel(Model);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        Model::from_checkpoint(&ckpt).map(Self).map_err(err)
    }

    /// A freshly initialized model with default hyperparameters.
    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn untrained(seed: u64) -> PyResult<Self> {
        Model::untrained(&Default::default(), seed).map(Self).map_err(err)
    }

    #[getter]
    fn latent_shape(&self) -> Vec<usize> {
        self.0.latent_shape().to_vec()
    }

    /// Sample one edit per stream. Returns `(image, velocity, deformation)`
    /// triples.
    #[pyo3(signature = (template, instruction, count=1, guidance_image=1.5, guidance_text=7.5, steps=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        py: Python<'_>,
        template: PyTensor,
        instruction: &str,
        count: usize,
        guidance_image: f64,
        guidance_text: f64,
        steps: Option<usize>,
        seed: u64,
    ) -> PyResult<Vec<(PyTensor, PyVelocity, PyDeformation)>> {
        let template: tpie_core::Tensor<f32> = template.0.cast();
        let guidance = GuidanceConfig {
            image: guidance_image,
            text: guidance_text,
        };
        let steps = steps.unwrap_or(self.0.schedule.steps);
        let templates = vec![&template; count];
        let instructions = vec![instruction; count];
        let streams: Vec<u64> = (0..count as u64).collect();
        let out = py
            .detach(|| pipeline::sample_batch(&self.0, &templates, &instructions, &guidance, steps, seed, &streams))
            .map_err(err)?;
        Ok(out
            .into_iter()
            .map(|o| {
                let v = VelocityField::new(o.velocity.grid().clone(), o.velocity.tensor().cast()).expect("same grid");
                let phi = DeformationField::from_displacement(o.deformation.grid().clone(), o.deformation.displacement().cast())
                    .expect("same grid");
                (PyTensor(o.image.cast()), PyVelocity(v), PyDeformation(phi))
            })
            .collect())
    }
}

#[pymodule]
fn tpie(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyVelocity>()?;
    m.add_class::<PyDeformation>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(scale_latent, m)?)?;
    m.add_function(wrap_pyfunction!(unscale_latent, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_stats, m)?)?;
    m.add_function(wrap_pyfunction!(proxy_frechet, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_image, m)?)?;
    Ok(())
}
