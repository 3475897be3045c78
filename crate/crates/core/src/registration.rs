//! Autoencoder registration network: `(template, target) → γ → v`.
//!
//! The encoder is three stride-2 convolutions and a projection to the latent
//! channels, so the latent grid is the image grid divided by 8. The decoder
//! mirrors it with nearest upsampling. All convolutions use periodic padding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Var};
use crate::diffeo::{self, min_squarings, Grid, VelocityField};
use crate::error::{Error, Result};
use crate::params::{conv_init, Adam, AdamConfig, Bound, ParamStore};
use crate::tensor::{Real, Tensor};

/// Total spatial downsampling between images and latents.
pub const LATENT_FACTOR: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub image_size: [usize; 2],
    pub latent_channels: usize,
    pub widths: [usize; 3],
    pub leaky_slope: f64,
    /// Soft bound on each velocity component, in grid units.
    pub max_velocity: f64,
    /// Image-match weight.
    pub sigma: f64,
    pub weight_decay: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            image_size: [32, 32],
            latent_channels: 16,
            widths: [16, 32, 32],
            leaky_slope: 0.2,
            max_velocity: 4.0,
            sigma: 10.0,
            weight_decay: 1e-5,
        }
    }
}

impl RegistrationConfig {
    pub fn latent_shape(&self) -> [usize; 3] {
        [
            self.latent_channels,
            self.image_size[0] / LATENT_FACTOR,
            self.image_size[1] / LATENT_FACTOR,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 || h < 4 * LATENT_FACTOR / 2 {
            return Err(Error::contract(
                "registration",
                format!("image size {h}x{w} must be divisible by {LATENT_FACTOR} and at least 16"),
            ));
        }
        if self.sigma <= 0.0 {
            return Err(Error::contract("registration", "sigma must be positive"));
        }
        Ok(())
    }
}

/// A template/target pair, each `[1, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair<T> {
    pub template: Tensor<T>,
    pub target: Tensor<T>,
}

impl<T: Real> ImagePair<T> {
    pub fn new(template: Tensor<T>, target: Tensor<T>) -> Result<Self> {
        if template.shape() != target.shape() {
            return Err(Error::shape("image pair", template.shape(), target.shape()));
        }
        if template.shape().len() != 3 || template.shape()[0] != 1 {
            return Err(Error::contract(
                "image pair",
                format!("images must be [1, H, W], got {:?}", template.shape()),
            ));
        }
        let in_range = |t: &Tensor<T>| t.data().iter().all(|&x| x >= T::zero() && x <= T::one());
        if !in_range(&template) || !in_range(&target) {
            return Err(Error::contract("image pair", "intensities must lie in [0, 1]"));
        }
        Ok(Self { template, target })
    }

    pub fn extents(&self) -> [usize; 2] {
        [self.template.shape()[1], self.template.shape()[2]]
    }
}

/// Encoder `E_ω` and decoder `D_ω` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationNet<T> {
    pub config: RegistrationConfig,
    pub params: ParamStore<T>,
}

const ENCODER: [&str; 4] = ["enc0", "enc1", "enc2", "enc3"];
const DECODER: [&str; 5] = ["dec0", "dec1", "dec2", "dec3", "dec_out"];

impl<T: Real> RegistrationNet<T> {
    /// Fresh parameters; the output layer starts at zero so the initial
    /// velocity is zero and the initial deformation is the identity.
    pub fn new(config: RegistrationConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::with_output_gain(config, rng, 0.0)
    }

    /// Like [`RegistrationNet::new`] but with the output layer drawn at
    /// `gain` times the usual scale.
    pub fn with_output_gain(config: RegistrationConfig, rng: &mut impl Rng, gain: f64) -> Result<Self> {
        config.validate()?;
        let [w0, w1, w2] = config.widths;
        let c = config.latent_channels;
        let mut params = ParamStore::new();
        let mut conv = |name: &str, cout: usize, cin: usize, gain: f64| {
            params.insert(format!("{name}.w"), conv_init(rng, cout, cin, 3, gain));
            params.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
        };
        for (name, (cout, cin)) in ENCODER.iter().zip([(w0, 2), (w1, w0), (w2, w1), (c, w2)]) {
            conv(name, cout, cin, 1.0);
        }
        for (name, (cout, cin)) in DECODER[..4].iter().zip([(w2, c), (w1, w2), (w0, w1), (w0, w0)]) {
            conv(name, cout, cin, 1.0);
        }
        conv(DECODER[4], 2, w0, gain);
        Ok(Self { config, params })
    }

    fn conv_block(&self, tape: &Tape<T>, p: &Bound<'_, T>, x: Var, name: &str, stride: usize, act: bool) -> Result<Var> {
        let y = tape.conv2d(x, p.var(&format!("{name}.w"))?, stride, Padding::Wrap)?;
        let y = tape.add_channel(y, p.var(&format!("{name}.b"))?)?;
        Ok(if act {
            tape.leaky_relu(y, T::lit(self.config.leaky_slope))
        } else {
            y
        })
    }

    /// `[B, 2, H, W]` (template and target channels) → `[B, C, H/8, W/8]`.
    pub fn encode_on(&self, tape: &Tape<T>, p: &Bound<'_, T>, pair: Var) -> Result<Var> {
        let shape = tape.shape(pair);
        let [h, w] = self.config.image_size;
        if shape.len() != 4 || shape[1] != 2 || shape[2] != h || shape[3] != w {
            return Err(Error::shape("encode", &shape, &[0, 2, h, w]));
        }
        let mut x = pair;
        for name in &ENCODER[..3] {
            x = self.conv_block(tape, p, x, name, 2, true)?;
        }
        self.conv_block(tape, p, x, ENCODER[3], 1, false)
    }

    /// `[B, C, H/8, W/8]` → velocity `[B, 2, H, W]`, each component softly
    /// bounded by `max_velocity`.
    pub fn decode_on(&self, tape: &Tape<T>, p: &Bound<'_, T>, latent: Var) -> Result<Var> {
        let shape = tape.shape(latent);
        let [c, lh, lw] = self.config.latent_shape();
        if shape.len() != 4 || shape[1..] != [c, lh, lw] {
            return Err(Error::shape("decode", &shape, &[0, c, lh, lw]));
        }
        let mut x = self.conv_block(tape, p, latent, DECODER[0], 1, true)?;
        for name in &DECODER[1..4] {
            x = tape.upsample(x, 2)?;
            x = self.conv_block(tape, p, x, name, 1, true)?;
        }
        let raw = self.conv_block(tape, p, x, DECODER[4], 1, false)?;
        let vmax = T::lit(self.config.max_velocity);
        let t = tape.tanh(tape.scale(raw, T::one() / vmax));
        Ok(tape.scale(t, vmax))
    }

    /// Latent code of a single pair, `[C, H/8, W/8]`.
    pub fn encode(&self, pair: &ImagePair<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let input = tape.leaf(stack_pairs(std::slice::from_ref(pair))?);
        let z = self.encode_on(&tape, &p, input)?;
        let out = tape.value(z);
        out.index_first(0).reshape(self.config.latent_shape().to_vec())
    }

    /// Full-resolution velocity field of a single latent `[C, H/8, W/8]`.
    pub fn decode(&self, latent: &Tensor<T>) -> Result<VelocityField<T>> {
        if !latent.all_finite() {
            return Err(Error::NonFinite("decode"));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let mut shape = vec![1];
        shape.extend_from_slice(latent.shape());
        let z = tape.leaf(latent.clone().reshape(shape)?);
        let v = self.decode_on(&tape, &p, z)?;
        let field = tape.value(v).index_first(0);
        VelocityField::new(Grid::new(self.config.image_size.to_vec())?, field)
    }

    /// Decode a batch of latents `[B, C, h, w]` into velocity fields.
    pub fn decode_batch(&self, latents: &Tensor<T>) -> Result<Vec<VelocityField<T>>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let z = tape.leaf(latents.clone());
        let v = self.decode_on(&tape, &p, z)?;
        let out = tape.value(v);
        let grid = Grid::new(self.config.image_size.to_vec())?;
        (0..latents.shape()[0])
            .map(|i| VelocityField::new(grid.clone(), out.index_first(i)))
            .collect()
    }
}

/// Channel-concatenate pairs into a `[B, 2, H, W]` batch.
pub fn stack_pairs<T: Real>(pairs: &[ImagePair<T>]) -> Result<Tensor<T>> {
    let first = pairs.first().ok_or(Error::Empty("pair batch"))?;
    let [h, w] = first.extents();
    let mut data = Vec::with_capacity(pairs.len() * 2 * h * w);
    for p in pairs {
        if p.extents() != [h, w] {
            return Err(Error::shape("pair batch", &[h, w], &p.extents()));
        }
        data.extend_from_slice(p.template.data());
        data.extend_from_slice(p.target.data());
    }
    Tensor::new(vec![pairs.len(), 2, h, w], data)
}

/// `[B, 1, H, W]` stack of single images.
pub fn stack_images<'a, T: Real>(images: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = images.into_iter().cloned().collect();
    Tensor::stack(&items)
}

/// Displacement of `exp(v)` for a batch of velocities `[B, 2, H, W]`,
/// differentiable; `u ← v / 2^K`, then `u ← u + u∘(x+u)` K times.
pub fn exponentiate_on<T: Real>(tape: &Tape<T>, velocity: Var, squarings: u32) -> Result<Var> {
    let mut u = tape.scale(velocity, T::lit(f64::powi(0.5, squarings as i32)));
    for _ in 0..squarings {
        let shifted = tape.warp(u, u)?;
        u = tape.add(u, shifted)?;
    }
    Ok(u)
}

/// Number of squarings for a batch of velocities, per the `K_min` rule.
pub fn squarings_for<T: Real>(velocity: &Tensor<T>) -> u32 {
    let shape = velocity.shape();
    let n: usize = shape[2..].iter().product();
    let mut max_norm = 0.0f64;
    for b in 0..shape[0] {
        let base = b * 2 * n;
        for p in 0..n {
            let (y, x) = (velocity.data()[base + p].f64(), velocity.data()[base + n + p].f64());
            max_norm = max_norm.max((y * y + x * x).sqrt());
        }
    }
    min_squarings(max_norm)
}

/// Terms of the registration objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistrationLoss {
    pub total: f64,
    /// `σ‖m∘φ⁻¹ − f‖²`, batch mean.
    pub image: f64,
    /// `‖∇v‖²`, batch mean.
    pub smoothness: f64,
    /// `weight_decay · ‖ω‖²`.
    pub weight: f64,
}

/// Registration objective on the tape for templates/targets `[B, 1, H, W]`
/// and velocities `[B, 2, H, W]`. `weight_l2` is `‖ω‖²` (already on the tape)
/// or `None` to omit the parameter term.
#[allow(clippy::too_many_arguments)]
pub fn registration_loss_on<T: Real>(
    tape: &Tape<T>,
    templates: Var,
    targets: Var,
    velocity: Var,
    sigma: f64,
    weight_decay: f64,
    weight_l2: Option<Var>,
) -> Result<(Var, Var, Var)> {
    if sigma <= 0.0 {
        return Err(Error::contract("registration loss", "sigma must be positive"));
    }
    let b = tape.shape(templates)[0] as f64;
    let k = squarings_for(&tape.value(velocity));
    let neg = tape.scale(velocity, -T::one());
    let inverse = exponentiate_on(tape, neg, k)?;
    let warped = tape.warp(templates, inverse)?;
    let resid = tape.sub(warped, targets)?;
    let image = tape.scale(tape.sum_squares(resid)?, T::lit(sigma / b));
    let dy = tape.periodic_diff(velocity, 2)?;
    let dx = tape.periodic_diff(velocity, 3)?;
    let grad_sq = tape.add(tape.sum_squares(dy)?, tape.sum_squares(dx)?)?;
    let smooth = tape.scale(grad_sq, T::lit(1.0 / b));
    let mut total = tape.add(image, smooth)?;
    if let Some(l2) = weight_l2 {
        total = tape.add(total, tape.scale(l2, T::lit(weight_decay)))?;
    }
    Ok((total, image, smooth))
}

/// Registration loss value for one pair and a given velocity field.
pub fn registration_loss<T: Real>(
    pair: &ImagePair<T>,
    velocity: &VelocityField<T>,
    sigma: f64,
    weight_decay: f64,
    params: Option<&ParamStore<T>>,
) -> Result<RegistrationLoss> {
    if velocity.grid().extents() != pair.extents() {
        return Err(Error::shape("registration loss", velocity.grid().extents(), &pair.extents()));
    }
    let tape = Tape::new();
    let [h, w] = pair.extents();
    let m = tape.leaf(pair.template.clone().reshape(vec![1, 1, h, w])?);
    let f = tape.leaf(pair.target.clone().reshape(vec![1, 1, h, w])?);
    let v = tape.leaf(velocity.tensor().clone().reshape(vec![1, 2, h, w])?);
    let l2 = params.map(|p| tape.leaf(Tensor::scalar(p.sum_squares())));
    let (total, image, smooth) = registration_loss_on(&tape, m, f, v, sigma, weight_decay, l2)?;
    let weight = params.map_or(0.0, |p| weight_decay * p.sum_squares().f64());
    Ok(RegistrationLoss {
        total: tape.item(total).f64(),
        image: tape.item(image).f64(),
        smoothness: tape.item(smooth).f64(),
        weight,
    })
}

/// Loss and parameter gradients of the registration objective on a batch.
pub fn registration_step<T: Real>(
    net: &RegistrationNet<T>,
    pairs: &[ImagePair<T>],
) -> Result<(RegistrationLoss, ParamStore<T>)> {
    let tape = Tape::new();
    let p = net.params.bind(&tape);
    let input = tape.leaf(stack_pairs(pairs)?);
    let templates = tape.leaf(stack_images(pairs.iter().map(|x| &x.template))?);
    let targets = tape.leaf(stack_images(pairs.iter().map(|x| &x.target))?);
    let latent = net.encode_on(&tape, &p, input)?;
    let v = net.decode_on(&tape, &p, latent)?;
    let l2 = p.l2(&tape)?;
    let cfg = &net.config;
    let (total, image, smooth) =
        registration_loss_on(&tape, templates, targets, v, cfg.sigma, cfg.weight_decay, Some(l2))?;
    let grads = tape.backward(total)?;
    let loss = RegistrationLoss {
        total: tape.item(total).f64(),
        image: tape.item(image).f64(),
        smoothness: tape.item(smooth).f64(),
        weight: cfg.weight_decay * tape.item(l2).f64(),
    };
    Ok((loss, p.grads(&grads)))
}

/// Velocity `v` and warped template `m∘exp(−v)` predicted for one pair.
pub fn register<T: Real>(net: &RegistrationNet<T>, pair: &ImagePair<T>) -> Result<(VelocityField<T>, Tensor<T>)> {
    let latent = net.encode(pair)?;
    let v = net.decode(&latent)?;
    let inverse = diffeo::invert(&v, min_squarings(v.max_norm().f64()))?;
    let warped = diffeo::warp(&pair.template, &inverse)?;
    Ok((v, warped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop when the relative improvement of the epoch-mean loss stays
    /// below `tolerance` for `patience` consecutive epochs.
    pub tolerance: f64,
    pub patience: usize,
}

impl Default for RegistrationTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 200,
            tolerance: 1e-4,
            patience: 5,
        }
    }
}

/// Epoch-level convergence bookkeeping shared by every training phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub epoch_means: Vec<f64>,
    pub stalled: usize,
}

impl Convergence {
    /// An epoch counts as stalled unless it beats the best mean so far by
    /// a relative margin of `tolerance`.
    pub fn record(&mut self, mean: f64, tolerance: f64) {
        let best = self.epoch_means.iter().copied().fold(f64::INFINITY, f64::min);
        if best.is_finite() {
            if (best - mean) / best.abs().max(1e-12) < tolerance {
                self.stalled += 1;
            } else {
                self.stalled = 0;
            }
        }
        self.epoch_means.push(mean);
    }

    pub fn converged(&self, patience: usize) -> bool {
        self.stalled >= patience
    }
}

/// Resumable registration optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationTrainer {
    pub config: RegistrationTrainConfig,
    pub adam: Adam<f32>,
    pub progress: Convergence,
}

impl RegistrationTrainer {
    pub fn new(config: RegistrationTrainConfig, net: &RegistrationNet<f32>) -> Self {
        let adam = Adam::new(AdamConfig::with_lr(config.lr), &net.params);
        Self {
            config,
            adam,
            progress: Convergence::default(),
        }
    }

    pub fn done(&self) -> bool {
        self.progress.converged(self.config.patience) || self.progress.epoch_means.len() >= self.config.max_epochs
    }

    /// One pass over `pairs` in the order given by `order`; returns the
    /// epoch-mean total loss. `loss_weight` scales every gradient.
    pub fn run_epoch(
        &mut self,
        net: &mut RegistrationNet<f32>,
        pairs: &[ImagePair<f32>],
        order: &[usize],
    ) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Empty("registration dataset"));
        }
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size.max(1)) {
            let batch: Vec<ImagePair<f32>> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let (loss, grads) = registration_step(net, &batch)?;
            if !loss.total.is_finite() {
                return Err(Error::NanLoss {
                    stage: "registration",
                    detail: format!("epoch {}, batch pairs {chunk:?}", self.progress.epoch_means.len()),
                });
            }
            self.adam.update(&mut net.params, &grads)?;
            sum += loss.total;
            batches += 1;
        }
        let mean = sum / batches as f64;
        self.progress.record(mean, self.config.tolerance);
        Ok(mean)
    }
}

/// Deterministic permutation of `0..n` for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = crate::rng::stream(seed, epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Train until converged or the epoch cap; returns the epoch-mean loss curve.
pub fn train_registration(
    net: &mut RegistrationNet<f32>,
    pairs: &[ImagePair<f32>],
    config: RegistrationTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut trainer = RegistrationTrainer::new(config, net);
    while !trainer.done() {
        let order = epoch_order(pairs.len(), seed, trainer.progress.epoch_means.len());
        trainer.run_epoch(net, pairs, &order)?;
    }
    Ok(trainer.progress.epoch_means)
}
