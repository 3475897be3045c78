//! Latent conditional diffusion over registration latents: the scaling
//! module, noise schedule, conditioned denoiser and guided reverse chain.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{conv_init, linear_init, Adam, AdamConfig, Bound, ParamStore};
use crate::registration::Convergence;
use crate::rng;
use crate::tensor::{Real, Tensor};

pub const TEXT_DIM: usize = 64;
/// Channels the text embedding is projected to before tiling.
pub const TEXT_CHANNELS: usize = 4;
pub const TIME_FREQS: usize = 64;
const TEXT_HASH_SEED: u64 = 0x5449_5045_7465_7874;

/// Statistics recorded by [`scale_psi`], enough to undo it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub max_abs: f64,
    pub mean: f64,
    /// Population standard deviation of `γ / max_abs`.
    pub rms_dev: f64,
}

impl LatentStats {
    /// Field-wise mean over a dataset; used to invert generated latents,
    /// which have no statistics of their own.
    pub fn aggregate(stats: &[LatentStats]) -> Result<Self> {
        if stats.is_empty() {
            return Err(Error::Empty("latent statistics"));
        }
        let n = stats.len() as f64;
        Ok(Self {
            max_abs: stats.iter().map(|s| s.max_abs).sum::<f64>() / n,
            mean: stats.iter().map(|s| s.mean).sum::<f64>() / n,
            rms_dev: stats.iter().map(|s| s.rms_dev).sum::<f64>() / n,
        })
    }
}

/// `ψ(γ)`: divide by `max|γ|`, then standardize to zero mean and unit
/// population RMS. Degenerate (constant) latents map to zeros.
pub fn scale_psi<T: Real>(gamma: &Tensor<T>) -> Result<(Tensor<T>, LatentStats)> {
    if !gamma.all_finite() {
        return Err(Error::NonFinite("scale_psi"));
    }
    let d = gamma.numel().max(1) as f64;
    let max_abs = gamma.max_abs().f64();
    let scale = if max_abs > 0.0 { max_abs } else { 1.0 };
    let unit: Vec<f64> = gamma.data().iter().map(|x| x.f64() / scale).collect();
    let mean = unit.iter().sum::<f64>() / d;
    let rms_dev = (unit.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d).sqrt();
    let stats = LatentStats {
        max_abs: scale,
        mean,
        rms_dev,
    };
    if rms_dev == 0.0 {
        return Ok((Tensor::zeros(gamma.shape().to_vec()), LatentStats { rms_dev: 0.0, ..stats }));
    }
    let out = Tensor::from_fn(gamma.shape().to_vec(), |i| T::lit((unit[i] - mean) / rms_dev));
    Ok((out, stats))
}

/// `ψ⁻¹`: `(scaled · rms_dev + mean) · max_abs`.
pub fn unscale_psi<T: Real>(scaled: &Tensor<T>, stats: &LatentStats) -> Tensor<T> {
    scaled.map(|x| T::lit((x.f64() * stats.rms_dev + stats.mean) * stats.max_abs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// `β_τ`, `α_τ = 1 − β_τ` and `ᾱ_τ = ∏ α`, indexed `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Empty("noise schedule"));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::contract("noise schedule", format!("beta {b} outside [0, 1)")));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Betas spaced linearly from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, tau: usize) -> Result<usize> {
        if tau == 0 || tau > self.steps() {
            return Err(Error::StepOutOfRange {
                tau,
                steps: self.steps(),
            });
        }
        Ok(tau - 1)
    }

    pub fn beta(&self, tau: usize) -> Result<f64> {
        Ok(self.betas[self.check(tau)?])
    }

    pub fn alpha(&self, tau: usize) -> Result<f64> {
        Ok(1.0 - self.beta(tau)?)
    }

    pub fn alpha_bar(&self, tau: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(tau)?])
    }

    /// Schedule over `n` evenly spaced steps of this one, with the original
    /// step index of each new step. Cumulative products are preserved at the
    /// kept steps.
    pub fn respaced(&self, n: usize) -> Result<(NoiseSchedule, Vec<usize>)> {
        let t = self.steps();
        if n == 0 || n > t {
            return Err(Error::contract("respace", format!("need 1..={t} steps, got {n}")));
        }
        if n == t {
            return Ok((self.clone(), (1..=t).collect()));
        }
        let taus: Vec<usize> = (1..=n).map(|i| ((i * t) as f64 / n as f64).round() as usize).collect();
        let mut prev = 1.0;
        let betas = taus
            .iter()
            .map(|&tau| {
                let ab = self.alpha_bars[tau - 1];
                let b = 1.0 - ab / prev;
                prev = ab;
                b
            })
            .collect();
        Ok((Self::from_betas(betas)?, taus))
    }
}

/// `√ᾱ_τ γ₀ + √(1−ᾱ_τ) ε`.
pub fn q_sample<T: Real>(gamma0: &Tensor<T>, tau: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    if gamma0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", gamma0.shape(), eps.shape()));
    }
    let ab = schedule.alpha_bar(tau)?;
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    let data = gamma0.data().iter().zip(eps.data()).map(|(&g, &e)| a * g + b * e).collect();
    Tensor::new(gamma0.shape().to_vec(), data)
}

/// One reverse step `(γ_τ − (1−α_τ)/√(1−ᾱ_τ) Ẑ)/√α_τ + σ_τ ρ` with
/// `σ_τ = √β_τ`; `rho = None` means no noise.
pub fn p_sample_step<T: Real>(
    gamma_tau: &Tensor<T>,
    tau: usize,
    z_hat: &Tensor<T>,
    rho: Option<&Tensor<T>>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if gamma_tau.shape() != z_hat.shape() {
        return Err(Error::shape("p_sample_step", gamma_tau.shape(), z_hat.shape()));
    }
    if let Some(r) = rho {
        if r.shape() != gamma_tau.shape() {
            return Err(Error::shape("p_sample_step", gamma_tau.shape(), r.shape()));
        }
    }
    let (beta, alpha, ab) = (schedule.beta(tau)?, schedule.alpha(tau)?, schedule.alpha_bar(tau)?);
    let inv = 1.0 / alpha.sqrt();
    let coef = if beta == 0.0 { 0.0 } else { beta / (1.0 - ab).sqrt() };
    let sigma = beta.sqrt();
    let out = Tensor::from_fn(gamma_tau.shape().to_vec(), |i| {
        let mean = inv * (gamma_tau.data()[i].f64() - coef * z_hat.data()[i].f64());
        T::lit(mean + rho.map_or(0.0, |r| sigma * r.data()[i].f64()))
    });
    Ok(out)
}

fn text_tokens(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Bucket and sign of a token in the hashed text embedding.
pub fn token_bucket(token: &str) -> (usize, f64) {
    let h = rng::hash_str(TEXT_HASH_SEED, &token.to_lowercase());
    let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
    ((h % TEXT_DIM as u64) as usize, sign)
}

/// Signed hashed bag of tokens, L2-normalized; the empty string maps to
/// the zero vector.
pub fn embed_text<T: Real>(instruction: &str) -> Tensor<T> {
    let mut v = [0.0f64; TEXT_DIM];
    for token in text_tokens(instruction) {
        let (bucket, sign) = token_bucket(&token);
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = if norm > 0.0 { 1.0 / norm } else { 0.0 };
    Tensor::from_fn(vec![TEXT_DIM], |i| T::lit(v[i] * s))
}

/// Periodic central-difference gradient of `[1, H, W]`, average-pooled by
/// `factor`: `[2, H/factor, W/factor]`, channel 0 along rows.
pub fn embed_image<T: Real>(template: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (h, w) = match template.shape() {
        [1, h, w] => (*h, *w),
        other => return Err(Error::contract("embed_image", format!("expected [1, H, W], got {other:?}"))),
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::contract(
            "embed_image",
            format!("image {h}x{w} not divisible by factor {factor}"),
        ));
    }
    let m = template.data();
    let at = |y: usize, x: usize| m[(y % h) * w + x % w].f64();
    let (ph, pw) = (h / factor, w / factor);
    let mut out = vec![0.0f64; 2 * ph * pw];
    let norm = 1.0 / (factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            let gy = 0.5 * (at(y + 1, x) - at(y + h - 1, x));
            let gx = 0.5 * (at(y, x + 1) - at(y, x + w - 1));
            let p = (y / factor) * pw + x / factor;
            out[p] += gy * norm;
            out[ph * pw + p] += gx * norm;
        }
    }
    Ok(Tensor::from_fn(vec![2, ph, pw], |i| T::lit(out[i])))
}

/// Denoiser conditions: template-gradient channels and text embedding,
/// either of which may be nulled (replaced by zeros).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle<T> {
    pub image: Tensor<T>,
    pub text: Tensor<T>,
    pub null_image: bool,
    pub null_text: bool,
}

impl<T: Real> ConditioningBundle<T> {
    pub fn new(image: Tensor<T>, text: Tensor<T>) -> Result<Self> {
        if image.shape().len() != 3 || image.shape()[0] != 2 {
            return Err(Error::contract("conditioning", format!("image channels must be [2, h, w], got {:?}", image.shape())));
        }
        if text.shape() != [TEXT_DIM] {
            return Err(Error::shape("conditioning", text.shape(), &[TEXT_DIM]));
        }
        Ok(Self {
            image,
            text,
            null_image: false,
            null_text: false,
        })
    }

    pub fn from_template(template: &Tensor<T>, instruction: &str, factor: usize) -> Result<Self> {
        Self::new(embed_image(template, factor)?, embed_text(instruction))
    }

    /// Copy with the requested conditions replaced by their null encoding.
    pub fn nulled(&self, image: bool, text: bool) -> Self {
        let mut out = self.clone();
        if image {
            out.image = Tensor::zeros(self.image.shape().to_vec());
            out.null_image = true;
        }
        if text {
            out.text = Tensor::zeros(vec![TEXT_DIM]);
            out.null_text = true;
        }
        out
    }
}

/// Three independent events with probability `p_drop` each: drop the image,
/// drop the text, drop both.
pub fn condition_dropout<T: Real>(
    cond: &ConditioningBundle<T>,
    rng: &mut impl Rng,
    p_drop: f64,
) -> Result<ConditioningBundle<T>> {
    if !(0.0..=0.5).contains(&p_drop) {
        return Err(Error::contract("condition_dropout", format!("p_drop {p_drop} outside [0, 0.5]")));
    }
    let image = rng.random::<f64>() < p_drop;
    let text = rng.random::<f64>() < p_drop;
    let both = rng.random::<f64>() < p_drop;
    Ok(cond.nulled(image || both, text || both))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub image: f64,
    pub text: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { image: 1.5, text: 7.5 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.image.is_finite() && self.text.is_finite() && self.image >= 0.0 && self.text >= 0.0) {
            return Err(Error::contract("guidance", "scales must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub hidden: [usize; 2],
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 16,
            hidden: [32, 64],
            time_dim: 64,
        }
    }
}

/// Sinusoidal features `[sin(τ f_k), cos(τ f_k)]`, `f_k = 10000^(−k/64)`.
pub fn time_features<T: Real>(taus: &[usize]) -> Tensor<T> {
    let n = 2 * TIME_FREQS;
    Tensor::from_fn(vec![taus.len(), n], |i| {
        let (b, j) = (i / n, i % n);
        let k = j % TIME_FREQS;
        let freq = (-(10000f64.ln()) * k as f64 / TIME_FREQS as f64).exp();
        let arg = taus[b] as f64 * freq;
        T::lit(if j < TIME_FREQS { arg.sin() } else { arg.cos() })
    })
}

/// Two-level UNet over latents with time, image and text conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Denoiser<T> {
    /// Output layer starts at zero.
    pub fn new(config: DenoiserConfig, rng: &mut impl Rng) -> Self {
        Self::with_output_gain(config, rng, 0.0)
    }

    pub fn with_output_gain(config: DenoiserConfig, rng: &mut impl Rng, gain: f64) -> Self {
        let c = config.latent_channels;
        let [h1, h2] = config.hidden;
        let e = config.time_dim;
        let mut params = ParamStore::new();
        let mut linear = |name: &str, out: usize, inp: usize| {
            params.insert(format!("{name}.w"), linear_init(rng, out, inp, 1.0));
            params.insert(format!("{name}.b"), Tensor::zeros(vec![out]));
        };
        linear("time0", e, 2 * TIME_FREQS);
        linear("time1", e, e);
        linear("text", TEXT_CHANNELS, TEXT_DIM);
        linear("t_in", h1, e);
        linear("t_down", h2, e);
        linear("t_up", h1, e);
        let mut conv = |name: &str, cout: usize, cin: usize, gain: f64| {
            params.insert(format!("{name}.w"), conv_init(rng, cout, cin, 3, gain));
            params.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
        };
        conv("in", h1, c + 2 + TEXT_CHANNELS, 1.0);
        conv("mid0", h1, h1, 1.0);
        conv("down", h2, h1, 1.0);
        conv("mid1", h2, h2, 1.0);
        conv("up", h1, h2 + h1, 1.0);
        conv("out", c, h1, gain);
        Self { config, params }
    }

    fn conv(&self, tape: &Tape<T>, p: &Bound<'_, T>, x: Var, name: &str) -> Result<Var> {
        let y = tape.conv2d(x, p.var(&format!("{name}.w"))?, 1, Padding::Wrap)?;
        tape.add_channel(y, p.var(&format!("{name}.b"))?)
    }

    fn linear(&self, tape: &Tape<T>, p: &Bound<'_, T>, x: Var, name: &str) -> Result<Var> {
        tape.linear(x, p.var(&format!("{name}.w"))?, p.var(&format!("{name}.b"))?)
    }

    /// Noise prediction for latents `[B, C, h, w]` at steps `taus`, image
    /// channels `[B, 2, h, w]` and text embeddings `[B, 64]`.
    pub fn predict_on(
        &self,
        tape: &Tape<T>,
        p: &Bound<'_, T>,
        latents: Var,
        taus: &[usize],
        image: Var,
        text: Var,
    ) -> Result<Var> {
        let shape = tape.shape(latents);
        let c = self.config.latent_channels;
        if shape.len() != 4 || shape[1] != c || !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
            return Err(Error::contract(
                "predict_noise",
                format!("latents must be [B, {c}, h, w] with even h, w; got {shape:?}"),
            ));
        }
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        if taus.len() != b {
            return Err(Error::shape("predict_noise", &shape, &[taus.len()]));
        }
        if tape.shape(image) != [b, 2, h, w] {
            return Err(Error::shape("predict_noise", &shape, &tape.shape(image)));
        }
        let temb = tape.leaf(time_features(taus));
        let e = tape.silu(self.linear(tape, p, temb, "time0")?);
        let e = tape.silu(self.linear(tape, p, e, "time1")?);
        let t = self.linear(tape, p, text, "text")?;
        let tiled = tape.add_channel(tape.leaf(Tensor::zeros(vec![b, TEXT_CHANNELS, h, w])), t)?;
        let x = tape.concat(&[latents, image, tiled])?;

        let x = self.conv(tape, p, x, "in")?;
        let x = tape.silu(tape.add_channel(x, self.linear(tape, p, e, "t_in")?)?);
        let skip = tape.silu(self.conv(tape, p, x, "mid0")?);

        let d = tape.avg_pool(skip, 2)?;
        let d = self.conv(tape, p, d, "down")?;
        let d = tape.silu(tape.add_channel(d, self.linear(tape, p, e, "t_down")?)?);
        let d = tape.silu(self.conv(tape, p, d, "mid1")?);

        let u = tape.upsample(d, 2)?;
        let u = tape.concat(&[u, skip])?;
        let u = self.conv(tape, p, u, "up")?;
        let u = tape.silu(tape.add_channel(u, self.linear(tape, p, e, "t_up")?)?);
        self.conv(tape, p, u, "out")
    }

    /// Batched prediction; `conds[i]` conditions `latents[i]`.
    pub fn predict_batch(&self, latents: &Tensor<T>, taus: &[usize], conds: &[&ConditioningBundle<T>]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let (image, text) = stack_conditions(conds)?;
        let out = self.predict_on(&tape, &p, tape.leaf(latents.clone()), taus, tape.leaf(image), tape.leaf(text))?;
        Ok((*tape.value(out)).clone())
    }

    /// `Z_θ(γ_τ, τ, cond)` for a single latent `[C, h, w]`.
    pub fn predict_noise(&self, latent: &Tensor<T>, tau: usize, cond: &ConditioningBundle<T>) -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(latent.shape());
        let out = self.predict_batch(&latent.clone().reshape(shape)?, &[tau], &[cond])?;
        out.reshape(latent.shape().to_vec())
    }

    /// Guided prediction
    /// `Z(∅,∅) + δ_I (Z(∇m,∅) − Z(∅,∅)) + δ_T (Z(∇m,Λ) − Z(∇m,∅))`
    /// for a batch; the three branches run as one forward pass.
    pub fn cfg_predict(
        &self,
        latents: &Tensor<T>,
        taus: &[usize],
        conds: &[&ConditioningBundle<T>],
        guidance: &GuidanceConfig,
    ) -> Result<Tensor<T>> {
        guidance.validate()?;
        let b = latents.shape()[0];
        if conds.len() != b {
            return Err(Error::shape("cfg_predict", latents.shape(), &[conds.len()]));
        }
        let uncond: Vec<_> = conds.iter().map(|c| c.nulled(true, true)).collect();
        let image_only: Vec<_> = conds.iter().map(|c| c.nulled(false, true)).collect();
        let all: Vec<&ConditioningBundle<T>> = uncond.iter().chain(&image_only).chain(conds.iter().copied()).collect();
        let inner = latents.numel() / b.max(1);
        let mut stacked = Vec::with_capacity(3 * latents.numel());
        for _ in 0..3 {
            stacked.extend_from_slice(latents.data());
        }
        let mut shape = latents.shape().to_vec();
        shape[0] = 3 * b;
        let all_taus: Vec<usize> = taus.iter().chain(taus).chain(taus).copied().collect();
        let z = self.predict_batch(&Tensor::new(shape, stacked)?, &all_taus, &all)?;
        // Same combination regrouped per branch, so that scale settings of
        // 0 and 1 select a branch exactly.
        let w0 = T::lit(1.0 - guidance.image);
        let w1 = T::lit(guidance.image - guidance.text);
        let w2 = T::lit(guidance.text);
        let zd = z.data();
        let n = b * inner;
        let data = (0..n).map(|i| w0 * zd[i] + w1 * zd[n + i] + w2 * zd[2 * n + i]).collect();
        Tensor::new(latents.shape().to_vec(), data)
    }
}

/// `[B, 2, h, w]` image channels and `[B, 64]` text embeddings.
pub fn stack_conditions<T: Real>(conds: &[&ConditioningBundle<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let images: Vec<Tensor<T>> = conds.iter().map(|c| c.image.clone()).collect();
    let texts: Vec<Tensor<T>> = conds.iter().map(|c| c.text.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&texts)?))
}

/// Terms of the diffusion objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionLoss {
    pub total: f64,
    /// `‖ε − Z_θ‖²`, batch mean.
    pub noise: f64,
    /// `λ‖γ₀ − γ̂₀‖²`, batch mean.
    pub reconstruction: f64,
    /// `weight_decay · ‖θ‖²`.
    pub weight: f64,
}

/// Data terms of the diffusion objective on the tape, given the prediction
/// `z` for `γ_τ = q_sample(γ₀, τ, ε)`. Returns `(noise, reconstruction)`,
/// both batch means, the second already weighted by `lambda`.
pub fn diffusion_terms_on<T: Real>(
    tape: &Tape<T>,
    gamma0: &Tensor<T>,
    gamma_tau: &Tensor<T>,
    eps: &Tensor<T>,
    z: Var,
    taus: &[usize],
    schedule: &NoiseSchedule,
    lambda: f64,
) -> Result<(Var, Var)> {
    if lambda < 0.0 {
        return Err(Error::contract("diffusion loss", "lambda must be non-negative"));
    }
    let b = taus.len() as f64;
    let resid = tape.sub(tape.leaf(eps.clone()), z)?;
    let noise = tape.scale(tape.sum_squares(resid)?, T::lit(1.0 / b));
    let mut root_bar = Vec::with_capacity(taus.len());
    let mut inv_root = Vec::with_capacity(taus.len());
    for &tau in taus {
        let ab = schedule.alpha_bar(tau)?;
        root_bar.push(T::lit((1.0 - ab).sqrt()));
        inv_root.push(T::lit(1.0 / ab.sqrt()));
    }
    let shifted = tape.sub(tape.leaf(gamma_tau.clone()), tape.scale_batch(z, root_bar)?)?;
    let gamma0_hat = tape.scale_batch(shifted, inv_root)?;
    let recon_resid = tape.sub(tape.leaf(gamma0.clone()), gamma0_hat)?;
    let recon = tape.scale(tape.sum_squares(recon_resid)?, T::lit(lambda / b));
    Ok((noise, recon))
}

/// Noised latents for a batch: `q_sample` applied per entry.
pub fn q_sample_batch<T: Real>(gamma0: &Tensor<T>, taus: &[usize], eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    let b = taus.len();
    if gamma0.shape().first() != Some(&b) {
        return Err(Error::shape("q_sample", gamma0.shape(), &[b]));
    }
    let items = (0..b)
        .map(|i| q_sample(&gamma0.index_first(i), taus[i], &eps.index_first(i), schedule))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Diffusion objective value for a batch of clean latents `[B, C, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<T: Real>(
    denoiser: &Denoiser<T>,
    gamma0: &Tensor<T>,
    taus: &[usize],
    eps: &Tensor<T>,
    conds: &[&ConditioningBundle<T>],
    schedule: &NoiseSchedule,
    lambda: f64,
    weight_decay: f64,
) -> Result<DiffusionLoss> {
    let tape = Tape::new();
    let p = denoiser.params.bind(&tape);
    let gamma_tau = q_sample_batch(gamma0, taus, eps, schedule)?;
    let (image, text) = stack_conditions(conds)?;
    let z = denoiser.predict_on(&tape, &p, tape.leaf(gamma_tau.clone()), taus, tape.leaf(image), tape.leaf(text))?;
    let (noise, recon) = diffusion_terms_on(&tape, gamma0, &gamma_tau, eps, z, taus, schedule, lambda)?;
    let (noise, reconstruction) = (tape.item(noise).f64(), tape.item(recon).f64());
    let weight = weight_decay * denoiser.params.sum_squares().f64();
    Ok(DiffusionLoss {
        total: noise + reconstruction + weight,
        noise,
        reconstruction,
        weight,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub patience: usize,
    pub lambda: f64,
    pub weight_decay: f64,
    pub p_drop: f64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 16,
            max_epochs: 200,
            tolerance: 1e-4,
            patience: 5,
            lambda: 0.1,
            weight_decay: 1e-5,
            p_drop: 0.05,
        }
    }
}

/// A scaled clean latent with its conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionExample {
    pub latent: Tensor<f32>,
    pub cond: ConditioningBundle<f32>,
}

/// Random draws for one training example: step, noise and dropped
/// conditions, from a stream keyed by epoch and example index.
fn training_draw(
    seed: u64,
    epoch: usize,
    index: usize,
    ex: &DiffusionExample,
    steps: usize,
    p_drop: f64,
) -> Result<(usize, Tensor<f32>, ConditioningBundle<f32>)> {
    let mut r = rng::stream(rng::derive(seed, "diffusion-train"), ((epoch as u64) << 32) | index as u64);
    let tau = r.random_range(1..=steps);
    let eps = Tensor::from_fn(ex.latent.shape().to_vec(), |_| r.sample::<f32, _>(StandardNormal));
    let cond = condition_dropout(&ex.cond, &mut r, p_drop)?;
    Ok((tau, eps, cond))
}

/// Resumable denoiser optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrainer {
    pub config: DiffusionTrainConfig,
    pub adam: Adam<f32>,
    pub progress: Convergence,
}

impl DiffusionTrainer {
    pub fn new(config: DiffusionTrainConfig, denoiser: &Denoiser<f32>) -> Self {
        let adam = Adam::new(AdamConfig::with_lr(config.lr), &denoiser.params);
        Self {
            config,
            adam,
            progress: Convergence::default(),
        }
    }

    pub fn done(&self) -> bool {
        self.progress.converged(self.config.patience) || self.progress.epoch_means.len() >= self.config.max_epochs
    }

    /// One pass in `order`, minimizing `weight · L_θ`; returns the epoch
    /// mean of the unweighted loss.
    pub fn run_epoch(
        &mut self,
        denoiser: &mut Denoiser<f32>,
        data: &[DiffusionExample],
        order: &[usize],
        schedule: &NoiseSchedule,
        seed: u64,
        weight: f64,
    ) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("diffusion dataset"));
        }
        let epoch = self.progress.epoch_means.len();
        let cfg = self.config.clone();
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut taus = Vec::with_capacity(chunk.len());
            let mut eps = Vec::with_capacity(chunk.len());
            let mut conds = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (tau, e, c) = training_draw(seed, epoch, i, &data[i], schedule.steps(), cfg.p_drop)?;
                taus.push(tau);
                eps.push(e);
                conds.push(c);
            }
            let gamma0 = Tensor::stack(&chunk.iter().map(|&i| data[i].latent.clone()).collect::<Vec<_>>())?;
            let eps = Tensor::stack(&eps)?;
            let cond_refs: Vec<&ConditioningBundle<f32>> = conds.iter().collect();

            let tape = Tape::new();
            let p = denoiser.params.bind(&tape);
            let gamma_tau = q_sample_batch(&gamma0, &taus, &eps, schedule)?;
            let (image, text) = stack_conditions(&cond_refs)?;
            let z = denoiser.predict_on(&tape, &p, tape.leaf(gamma_tau.clone()), &taus, tape.leaf(image), tape.leaf(text))?;
            let (noise, recon) = diffusion_terms_on(&tape, &gamma0, &gamma_tau, &eps, z, &taus, schedule, cfg.lambda)?;
            let l2 = p.l2(&tape)?;
            let total = tape.add(tape.add(noise, recon)?, tape.scale(l2, cfg.weight_decay as f32))?;
            let value = tape.item(total) as f64;
            if !value.is_finite() {
                return Err(Error::NanLoss {
                    stage: "diffusion",
                    detail: format!("epoch {epoch}, batch examples {chunk:?}, steps {taus:?}"),
                });
            }
            let objective = tape.scale(total, weight as f32);
            let grads = tape.backward(objective)?;
            let grads = p.grads(&grads);
            self.adam.update(&mut denoiser.params, &grads)?;
            sum += value;
            batches += 1;
        }
        let mean = sum / batches as f64;
        self.progress.record(mean, cfg.tolerance);
        Ok(mean)
    }
}

/// Standard normal tensor `[B, ..shape]`, entry `i` drawn from `rngs[i]`.
pub fn normal_batch(rngs: &mut [ChaCha8Rng], shape: &[usize]) -> Result<Tensor<f32>> {
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(rngs.len() * per);
    for r in rngs.iter_mut() {
        data.extend((0..per).map(|_| r.sample::<f32, _>(StandardNormal)));
    }
    let mut full = vec![rngs.len()];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}

/// Guided reverse steps from `gamma` at step `top` of `schedule` down to
/// step 1; `taus[i − 1]` is the denoiser step index of schedule step `i`.
/// The last step adds no noise.
#[allow(clippy::too_many_arguments)]
pub fn denoise_from(
    denoiser: &Denoiser<f32>,
    mut gamma: Tensor<f32>,
    top: usize,
    schedule: &NoiseSchedule,
    taus: &[usize],
    conds: &[&ConditioningBundle<f32>],
    guidance: &GuidanceConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Tensor<f32>> {
    let b = conds.len();
    if rngs.len() != b || gamma.shape().first() != Some(&b) {
        return Err(Error::shape("reverse chain", gamma.shape(), &[b, rngs.len()]));
    }
    let inner = gamma.shape()[1..].to_vec();
    for step in (1..=top).rev() {
        let tau = taus[step - 1];
        let z = denoiser.cfg_predict(&gamma, &vec![tau; b], conds, guidance)?;
        let rho = if step > 1 { Some(normal_batch(rngs, &inner)?) } else { None };
        gamma = p_sample_step(&gamma, step, &z, rho.as_ref(), schedule)?;
        if !gamma.all_finite() {
            return Err(Error::NonFiniteLatent(tau));
        }
    }
    Ok(gamma)
}

/// Sampling chain for a batch: `γ_T ~ N(0, I)`, then guided reverse steps
/// over `steps` evenly spaced steps of `schedule`. Sample `i` draws from
/// stream `streams[i]` of `seed`, so each chain is independent of batching.
#[allow(clippy::too_many_arguments)]
pub fn reverse_chain(
    denoiser: &Denoiser<f32>,
    conds: &[&ConditioningBundle<f32>],
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
    steps: usize,
    latent_shape: &[usize],
    seed: u64,
    streams: &[u64],
) -> Result<Tensor<f32>> {
    if streams.len() != conds.len() {
        return Err(Error::shape("reverse chain", &[conds.len()], &[streams.len()]));
    }
    let (sched, taus) = schedule.respaced(steps)?;
    let mut rngs: Vec<_> = streams.iter().map(|&s| rng::stream(rng::derive(seed, "sample"), s)).collect();
    let start = normal_batch(&mut rngs, latent_shape)?;
    denoise_from(denoiser, start, sched.steps(), &sched, &taus, conds, guidance, &mut rngs)
}
