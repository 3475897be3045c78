//! Evaluation metrics: a Fréchet distance over features of a fixed random
//! convolutional network, and pixel-wise sample statistics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape};
use crate::error::{Error, Result};
use crate::params::conv_init;
use crate::rng;
use crate::tensor::{Real, Tensor};

pub const FEATURE_DIM: usize = 16;
const FEATURE_SEED: u64 = 0x4645_4154;

/// Random three-layer stride-2 convolutional net, globally average-pooled
/// to 16 features. The weights depend only on a fixed seed.
pub struct FeatureNet {
    kernels: [Tensor<f64>; 3],
}

impl Default for FeatureNet {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureNet {
    pub fn new() -> Self {
        let mut r = rng::stream(FEATURE_SEED, 0);
        Self {
            kernels: [
                conv_init(&mut r, 8, 1, 3, 1.0),
                conv_init(&mut r, 16, 8, 3, 1.0),
                conv_init(&mut r, FEATURE_DIM, 16, 3, 1.0),
            ],
        }
    }

    /// Features of each image in a `[B, 1, H, W]` batch.
    pub fn features<T: Real>(&self, images: &Tensor<T>) -> Result<DMatrix<f64>> {
        if images.shape().len() != 4 || images.shape()[1] != 1 {
            return Err(Error::contract("features", format!("expected [B, 1, H, W], got {:?}", images.shape())));
        }
        let tape = Tape::<f64>::new();
        let mut x = tape.leaf(images.cast());
        for k in &self.kernels {
            let y = tape.conv2d(x, tape.leaf(k.clone()), 2, Padding::Zero)?;
            x = tape.leaky_relu(y, 0.2);
        }
        let out = tape.value(x);
        let (b, c) = (out.shape()[0], out.shape()[1]);
        let hw: usize = out.shape()[2..].iter().product();
        Ok(DMatrix::from_fn(b, c, |i, j| {
            out.data()[(i * c + j) * hw..(i * c + j + 1) * hw].iter().sum::<f64>() / hw as f64
        }))
    }
}

/// Mean and covariance (denominator `n − 1`) of the rows of `x`.
fn gaussian_fit(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    (mean, centered.transpose() * centered / denom)
}

/// Symmetric PSD square root by eigendecomposition; negative eigenvalues
/// from round-off are clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` between Gaussian fits of
/// two feature sets (rows are samples).
pub fn frechet_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::contract("frechet distance", "need at least two samples per set"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::shape("frechet distance", &[a.ncols()], &[b.ncols()]));
    }
    let (m1, s1) = gaussian_fit(a);
    let (m2, s2) = gaussian_fit(b);
    let r1 = sqrt_psd(&s1);
    // tr((Σ₁Σ₂)^{1/2}) = tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})
    let cross = sqrt_psd(&(&r1 * &s2 * &r1)).trace();
    let d = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Proxy Fréchet distance between two image sets, each `[B, 1, H, W]`.
pub fn proxy_frechet<T: Real>(real: &Tensor<T>, generated: &Tensor<T>) -> Result<f64> {
    let net = FeatureNet::new();
    frechet_distance(&net.features(real)?, &net.features(generated)?)
}

/// Per-pixel mean, population standard deviation and `mean ± 2·std`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelStats {
    pub mean: Tensor<f64>,
    pub std: Tensor<f64>,
    pub lower: Tensor<f64>,
    pub upper: Tensor<f64>,
}

pub fn pixelwise_stats<T: Real>(samples: &[Tensor<T>]) -> Result<PixelStats> {
    if samples.len() < 2 {
        return Err(Error::contract("pixelwise_stats", "need at least two samples"));
    }
    let shape = samples[0].shape().to_vec();
    if let Some(bad) = samples.iter().find(|s| s.shape() != shape.as_slice()) {
        return Err(Error::shape("pixelwise_stats", &shape, bad.shape()));
    }
    let n = samples.len() as f64;
    let numel = samples[0].numel();
    // Sums are shifted by the first sample so identical samples give a mean
    // equal to that sample and a spread of exactly zero.
    let base: Vec<f64> = samples[0].data().iter().map(|x| x.f64()).collect();
    let mut shift = vec![0.0; numel];
    for s in &samples[1..] {
        for ((d, x), b) in shift.iter_mut().zip(s.data()).zip(&base) {
            *d += x.f64() - b;
        }
    }
    let mean: Vec<f64> = base.iter().zip(&shift).map(|(b, d)| b + d / n).collect();
    let mut var = vec![0.0; numel];
    for s in samples {
        for ((v, x), m) in var.iter_mut().zip(s.data()).zip(&mean) {
            *v += (x.f64() - m).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    let t = |f: &dyn Fn(usize) -> f64| Tensor::from_fn(shape.clone(), f);
    Ok(PixelStats {
        mean: t(&|i| mean[i]),
        std: t(&|i| std[i]),
        lower: t(&|i| mean[i] - 2.0 * std[i]),
        upper: t(&|i| mean[i] + 2.0 * std[i]),
    })
}

/// Summary numbers of a set of values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            mean,
            std,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

pub fn ssd<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssd", a.shape(), b.shape()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum())
}
