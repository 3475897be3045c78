//! Joint training, sampling and evaluation.
//!
//! Training alternates three phases per outer iteration: the registration
//! network is trained to convergence, the denoiser is trained on the
//! encoded and scaled latents, and the decoder is fine-tuned on latents
//! produced by the guided reverse chain so that it decodes sampler output
//! well. The outer loop stops when the joint loss `L_ω + r·L_θ` settles.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::datagen::{DatasetManifest, Split};
use crate::diffeo::{self, min_squarings, DeformationField, TopologyReport, VelocityField};
use crate::diffusion::{
    self, denoise_from, q_sample_batch, reverse_chain, scale_psi, unscale_psi, ConditioningBundle,
    Denoiser, DenoiserConfig, DiffusionExample, DiffusionTrainConfig, DiffusionTrainer, GuidanceConfig, LatentStats,
    ScheduleConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{self, Summary};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::registration::{
    epoch_order, registration_loss_on, stack_images, stack_pairs, Convergence, ImagePair, RegistrationConfig,
    RegistrationNet, RegistrationTrainConfig, RegistrationTrainer, LATENT_FACTOR,
};
use crate::rng;
use crate::tensor::Tensor;

const REG_PREFIX: &str = "registration/";
const DIFF_PREFIX: &str = "diffusion/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub registration: RegistrationConfig,
    pub registration_train: RegistrationTrainConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion_train: DiffusionTrainConfig,
    pub schedule: ScheduleConfig,
    /// Weight `r` of the diffusion loss in the joint objective.
    pub joint_weight: f64,
    pub max_outer_iterations: usize,
    /// Relative change of the joint loss below which the outer loop stops.
    pub outer_tolerance: f64,
    /// Per-step multiplicative learning-rate decay once past `lr_decay_after`.
    pub lr_decay: f64,
    pub lr_decay_after: u64,
    /// Decoder fine-tuning steps per outer iteration.
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub finetune_batch_size: usize,
    /// Noise step at which fine-tuning chains start from the noised
    /// training latent.
    pub finetune_start_step: usize,
    /// Reverse-chain length used to produce fine-tuning latents.
    pub finetune_sample_steps: usize,
    pub guidance: GuidanceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationConfig::default(),
            registration_train: RegistrationTrainConfig::default(),
            denoiser: DenoiserConfig::default(),
            diffusion_train: DiffusionTrainConfig::default(),
            schedule: ScheduleConfig::default(),
            joint_weight: 1.0,
            max_outer_iterations: 3,
            outer_tolerance: 1e-3,
            lr_decay: 1e-8,
            lr_decay_after: 1000,
            finetune_steps: 200,
            finetune_lr: 1e-4,
            finetune_batch_size: 8,
            finetune_start_step: 500,
            finetune_sample_steps: 50,
            guidance: GuidanceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.registration.validate()?;
        self.guidance.validate()?;
        let rates = [
            self.registration_train.lr,
            self.diffusion_train.lr,
            self.finetune_lr,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::contract("train config", "learning rates must be finite and non-negative"));
        }
        if !(self.joint_weight.is_finite() && self.joint_weight >= 0.0) {
            return Err(Error::contract("train config", "joint weight r must be non-negative"));
        }
        if self.denoiser.latent_channels != self.registration.latent_channels {
            return Err(Error::contract("train config", "denoiser and registration latent channels differ"));
        }
        let [lh, lw] = [self.registration.image_size[0] / LATENT_FACTOR, self.registration.image_size[1] / LATENT_FACTOR];
        if lh % 2 != 0 || lw % 2 != 0 {
            return Err(Error::contract("train config", "latent grid must have even extents"));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            decay: self.lr_decay,
            decay_after: self.lr_decay_after,
            ..AdamConfig::with_lr(lr)
        }
    }
}

/// Trained (or freshly initialized) networks plus the aggregate latent
/// statistics used to invert generated latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub registration: RegistrationNet<f32>,
    pub denoiser: Denoiser<f32>,
    pub stats: LatentStats,
    pub schedule: ScheduleConfig,
}

impl Model {
    pub fn untrained(config: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let registration = RegistrationNet::new(
            config.registration.clone(),
            &mut rng::stream(rng::derive(seed, "init-registration"), 0),
        )?;
        let denoiser = Denoiser::new(
            config.denoiser.clone(),
            &mut rng::stream(rng::derive(seed, "init-denoiser"), 0),
        );
        Ok(Self {
            registration,
            denoiser,
            stats: LatentStats {
                max_abs: 1.0,
                mean: 0.0,
                rms_dev: 1.0,
            },
            schedule: config.schedule,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let registration = RegistrationNet {
            config: ckpt.config.registration.clone(),
            params: ckpt.tensors.with_prefix(REG_PREFIX),
        };
        let denoiser = Denoiser {
            config: ckpt.config.denoiser.clone(),
            params: ckpt.tensors.with_prefix(DIFF_PREFIX),
        };
        let fresh = Model::untrained(&ckpt.config, ckpt.seed)?;
        for (name, expect) in [
            (REG_PREFIX, &fresh.registration.params),
            (DIFF_PREFIX, &fresh.denoiser.params),
        ] {
            let got = if name == REG_PREFIX { &registration.params } else { &denoiser.params };
            for (k, t) in expect.iter() {
                let have = got.get(&k.to_string()).map_err(|_| Error::Checkpoint(format!("missing `{name}{k}`")))?;
                if have.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("`{name}{k}` has shape {:?}, expected {:?}", have.shape(), t.shape())));
                }
            }
        }
        Ok(Self {
            registration,
            denoiser,
            stats: ckpt.latent_stats,
            schedule: ckpt.config.schedule,
        })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.registration.config.latent_shape()
    }

    fn params(&self) -> ParamStore<f32> {
        let mut all = ParamStore::new();
        all.extend_prefixed(REG_PREFIX, &self.registration.params);
        all.extend_prefixed(DIFF_PREFIX, &self.denoiser.params);
        all
    }

    /// Checkpoint holding only the model (no optimizer or training state).
    pub fn to_checkpoint(&self, config: &TrainConfig, seed: u64) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            seed,
            latent_stats: self.stats,
            train_state: None,
            tensors: self.params(),
        }
    }
}

/// A training pair with its instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub pair: ImagePair<f32>,
    pub instruction: String,
}

pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<TrainingPair>> {
    manifest
        .split(split)
        .into_iter()
        .map(|r| {
            Ok(TrainingPair {
                pair: manifest.load_pair(r)?,
                instruction: r.instruction.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Registration,
    Diffusion,
    Finetune,
    Done,
}

/// Joint objective `L = L_ω + r·L_θ` measured at the end of an outer
/// iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub registration: f64,
    pub diffusion: f64,
    pub weight: f64,
    pub total: f64,
}

impl JointLoss {
    pub fn new(registration: f64, diffusion: f64, weight: f64) -> Self {
        Self {
            registration,
            diffusion,
            weight,
            total: registration + weight * diffusion,
        }
    }
}

/// Everything besides tensors needed to resume training exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub outer: usize,
    pub phase: Phase,
    pub registration_epochs: usize,
    pub diffusion_epochs: usize,
    pub registration_progress: Convergence,
    pub diffusion_progress: Convergence,
    pub registration_adam_step: u64,
    pub diffusion_adam_step: u64,
    pub registration_curve: Vec<f64>,
    pub diffusion_curve: Vec<f64>,
    pub finetune_curve: Vec<f64>,
    pub joint: Vec<JointLoss>,
}

/// Resumable joint trainer. Each call to [`Trainer::step`] performs one
/// registration epoch, one diffusion epoch or one fine-tuning block.
pub struct Trainer {
    pub config: TrainConfig,
    pub seed: u64,
    pub model: Model,
    pub state: TrainState,
    registration: RegistrationTrainer,
    diffusion: DiffusionTrainer,
    pairs: Vec<TrainingPair>,
    examples: Option<Vec<DiffusionExample>>,
}

impl Trainer {
    pub fn new(config: TrainConfig, seed: u64, pairs: Vec<TrainingPair>) -> Result<Self> {
        let model = Model::untrained(&config, seed)?;
        Self::assemble(config, seed, model, None, pairs)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, pairs: Vec<TrainingPair>) -> Result<Self> {
        let model = Model::from_checkpoint(ckpt)?;
        Self::assemble(ckpt.config.clone(), ckpt.seed, model, Some(ckpt), pairs)
    }

    fn assemble(
        config: TrainConfig,
        seed: u64,
        model: Model,
        ckpt: Option<&Checkpoint>,
        pairs: Vec<TrainingPair>,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let size = config.registration.image_size;
        if let Some(p) = pairs.iter().find(|p| p.pair.extents() != size) {
            return Err(Error::shape("training set", &size, &p.pair.extents()));
        }
        let mut registration = RegistrationTrainer::new(config.registration_train.clone(), &model.registration);
        registration.adam.config = config.adam(config.registration_train.lr);
        let mut diffusion = DiffusionTrainer::new(config.diffusion_train.clone(), &model.denoiser);
        diffusion.adam.config = config.adam(config.diffusion_train.lr);
        let state = match ckpt {
            Some(c) => {
                let state = c
                    .train_state
                    .clone()
                    .ok_or_else(|| Error::Checkpoint("no training state to resume from".into()))?;
                let moments = |kind: &str, which: &str| c.tensors.with_prefix(&format!("optim/{kind}/{which}/"));
                registration.adam.first = moments("registration", "first");
                registration.adam.second = moments("registration", "second");
                registration.adam.step = state.registration_adam_step;
                registration.progress = state.registration_progress.clone();
                diffusion.adam.first = moments("diffusion", "first");
                diffusion.adam.second = moments("diffusion", "second");
                diffusion.adam.step = state.diffusion_adam_step;
                diffusion.progress = state.diffusion_progress.clone();
                if registration.adam.first.len() != model.registration.params.len()
                    || diffusion.adam.first.len() != model.denoiser.params.len()
                {
                    return Err(Error::Checkpoint("optimizer moments do not match the parameters".into()));
                }
                state
            }
            None => TrainState {
                outer: 0,
                phase: Phase::Registration,
                registration_epochs: 0,
                diffusion_epochs: 0,
                registration_progress: Convergence::default(),
                diffusion_progress: Convergence::default(),
                registration_adam_step: 0,
                diffusion_adam_step: 0,
                registration_curve: Vec::new(),
                diffusion_curve: Vec::new(),
                finetune_curve: Vec::new(),
                joint: Vec::new(),
            },
        };
        Ok(Self {
            config,
            seed,
            model,
            state,
            registration,
            diffusion,
            pairs,
            examples: None,
        })
    }

    /// Full training state, including optimizer moments.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.registration_progress = self.registration.progress.clone();
        state.diffusion_progress = self.diffusion.progress.clone();
        state.registration_adam_step = self.registration.adam.step;
        state.diffusion_adam_step = self.diffusion.adam.step;
        let mut ckpt = self.model.to_checkpoint(&self.config, self.seed);
        for (kind, adam) in [("registration", &self.registration.adam), ("diffusion", &self.diffusion.adam)] {
            ckpt.tensors.extend_prefixed(&format!("optim/{kind}/first/"), &adam.first);
            ckpt.tensors.extend_prefixed(&format!("optim/{kind}/second/"), &adam.second);
        }
        ckpt.train_state = Some(state);
        ckpt
    }

    pub fn done(&self) -> bool {
        self.state.phase == Phase::Done
    }

    /// Seed keying the registration epoch order; training the registration
    /// network alone with this seed reproduces the first phase exactly.
    pub fn registration_order_seed(seed: u64) -> u64 {
        rng::derive(seed, "registration-order")
    }

    pub fn step(&mut self) -> Result<()> {
        match self.state.phase {
            Phase::Registration => self.registration_step(),
            Phase::Diffusion => self.diffusion_step(),
            Phase::Finetune => self.finetune_step(),
            Phase::Done => Ok(()),
        }
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.done() {
            self.step()?;
        }
        Ok(())
    }

    fn registration_step(&mut self) -> Result<()> {
        if self.registration.done() {
            if self.config.joint_weight == 0.0 {
                let reg = registration_objective(&self.model.registration, &self.pairs)?;
                self.state.joint.push(JointLoss::new(reg, 0.0, 0.0));
                self.state.phase = Phase::Done;
            } else {
                self.diffusion.progress = Convergence::default();
                self.state.phase = Phase::Diffusion;
            }
            return Ok(());
        }
        let pairs: Vec<ImagePair<f32>> = self.pairs.iter().map(|p| p.pair.clone()).collect();
        let order = epoch_order(pairs.len(), Self::registration_order_seed(self.seed), self.state.registration_epochs);
        let mean = self.registration.run_epoch(&mut self.model.registration, &pairs, &order)?;
        log::info!("registration epoch {} loss {mean:.5}", self.state.registration_epochs);
        self.state.registration_epochs += 1;
        self.state.registration_curve.push(mean);
        Ok(())
    }

    fn ensure_examples(&mut self) -> Result<()> {
        if self.examples.is_none() {
            let (examples, stats) = encode_examples(&self.model.registration, &self.pairs)?;
            self.model.stats = stats;
            self.examples = Some(examples);
        }
        Ok(())
    }

    fn diffusion_step(&mut self) -> Result<()> {
        self.ensure_examples()?;
        if self.diffusion.done() {
            self.state.phase = Phase::Finetune;
            return Ok(());
        }
        let examples = self.examples.as_ref().expect("examples");
        let order = epoch_order(examples.len(), rng::derive(self.seed, "diffusion-order"), self.state.diffusion_epochs);
        let schedule = self.config.schedule.build()?;
        let mean = self.diffusion.run_epoch(
            &mut self.model.denoiser,
            examples,
            &order,
            &schedule,
            rng::derive(self.seed, &format!("diffusion-outer-{}", self.state.outer)),
            self.config.joint_weight,
        )?;
        log::info!("diffusion epoch {} loss {mean:.5}", self.state.diffusion_epochs);
        self.state.diffusion_epochs += 1;
        self.state.diffusion_curve.push(mean);
        Ok(())
    }

    fn finetune_step(&mut self) -> Result<()> {
        self.ensure_examples()?;
        let examples = self.examples.as_ref().expect("examples");
        let latents = finetune_latents(&self.model, &self.config, examples, self.seed, self.state.outer)?;
        let losses = finetune_decoder(
            &mut self.model.registration,
            &self.pairs,
            &latents,
            &self.config,
            self.seed,
            self.state.outer,
        )?;
        self.state.finetune_curve.extend(losses);

        let reg = registration_objective(&self.model.registration, &self.pairs)?;
        let diff = diffusion_objective(&self.model.denoiser, examples, &self.config, self.seed)?;
        let joint = JointLoss::new(reg, diff, self.config.joint_weight);
        log::info!("outer iteration {} joint loss {:.5}", self.state.outer, joint.total);
        let settled = self.state.joint.last().is_some_and(|prev| {
            (prev.total - joint.total).abs() / prev.total.abs().max(1e-12) < self.config.outer_tolerance
        });
        self.state.joint.push(joint);
        self.state.outer += 1;
        if settled || self.state.outer >= self.config.max_outer_iterations {
            self.state.phase = Phase::Done;
        } else {
            self.state.phase = Phase::Registration;
            self.registration.progress = Convergence::default();
            self.examples = None;
        }
        Ok(())
    }
}

/// Encode every pair, scale with `ψ`, and attach conditions. Returns the
/// examples and the aggregate statistics.
pub fn encode_examples(net: &RegistrationNet<f32>, pairs: &[TrainingPair]) -> Result<(Vec<DiffusionExample>, LatentStats)> {
    let mut examples = Vec::with_capacity(pairs.len());
    let mut stats = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (latent, s) = scale_psi(&net.encode(&p.pair)?)?;
        stats.push(s);
        let cond = ConditioningBundle::from_template(&p.pair.template, &p.instruction, LATENT_FACTOR)?;
        examples.push(DiffusionExample { latent, cond });
    }
    Ok((examples, LatentStats::aggregate(&stats)?))
}

/// `L_ω` over a set of pairs: batch-mean image and smoothness terms plus
/// the parameter penalty.
pub fn registration_objective(net: &RegistrationNet<f32>, pairs: &[TrainingPair]) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in pairs.chunks(32) {
        let batch: Vec<ImagePair<f32>> = chunk.iter().map(|p| p.pair.clone()).collect();
        let tape = Tape::new();
        let p = net.params.bind(&tape);
        let latent = net.encode_on(&tape, &p, tape.leaf(stack_pairs(&batch)?))?;
        let v = net.decode_on(&tape, &p, latent)?;
        let m = tape.leaf(stack_images(batch.iter().map(|x| &x.template))?);
        let f = tape.leaf(stack_images(batch.iter().map(|x| &x.target))?);
        let (total, _, _) = registration_loss_on(&tape, m, f, v, net.config.sigma, 0.0, None)?;
        sum += tape.item(total) as f64 * batch.len() as f64;
    }
    Ok(sum / pairs.len() as f64 + net.config.weight_decay * net.params.sum_squares() as f64)
}

/// `L_θ` over the training latents with fixed, undropped draws.
pub fn diffusion_objective(
    denoiser: &Denoiser<f32>,
    examples: &[DiffusionExample],
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let schedule = config.schedule.build()?;
    let mut sum = 0.0;
    for (c, chunk) in examples.chunks(32).enumerate() {
        let mut taus = Vec::with_capacity(chunk.len());
        let mut eps = Vec::with_capacity(chunk.len());
        for (i, ex) in chunk.iter().enumerate() {
            let mut r = rng::stream(rng::derive(seed, "joint-eval"), (c * 32 + i) as u64);
            taus.push(r.random_range(1..=schedule.steps()));
            eps.push(Tensor::from_fn(ex.latent.shape().to_vec(), |_| r.sample::<f32, _>(StandardNormal)));
        }
        let gamma0 = Tensor::stack(&chunk.iter().map(|e| e.latent.clone()).collect::<Vec<_>>())?;
        let eps = Tensor::stack(&eps)?;
        let conds: Vec<&ConditioningBundle<f32>> = chunk.iter().map(|e| &e.cond).collect();
        let loss = diffusion::diffusion_loss(
            denoiser,
            &gamma0,
            &taus,
            &eps,
            &conds,
            &schedule,
            config.diffusion_train.lambda,
            0.0,
        )?;
        sum += loss.total * chunk.len() as f64;
    }
    Ok(sum / examples.len() as f64 + config.diffusion_train.weight_decay * denoiser.params.sum_squares() as f64)
}

/// Denoised latents `γ̂₀` for fine-tuning: each scaled training latent is
/// noised to the configured step and run back through the guided chain,
/// then mapped through `ψ⁻¹` with the aggregate statistics, as at sampling
/// time.
pub fn finetune_latents(
    model: &Model,
    config: &TrainConfig,
    examples: &[DiffusionExample],
    seed: u64,
    outer: usize,
) -> Result<Vec<Tensor<f32>>> {
    let schedule = config.schedule.build()?;
    let (sched, taus) = schedule.respaced(config.finetune_sample_steps.clamp(1, schedule.steps()))?;
    let top = taus
        .iter()
        .rposition(|&t| t <= config.finetune_start_step)
        .map(|i| i + 1)
        .ok_or_else(|| Error::contract("finetune", "start step below the first sampling step"))?;
    let mut out = Vec::with_capacity(examples.len());
    for (c, chunk) in examples.chunks(64).enumerate() {
        let mut rngs: Vec<_> = (0..chunk.len())
            .map(|i| rng::stream(rng::derive(seed, "finetune-chain"), ((outer as u64) << 32) | (c * 64 + i) as u64))
            .collect();
        let gamma0 = Tensor::stack(&chunk.iter().map(|e| e.latent.clone()).collect::<Vec<_>>())?;
        let eps = diffusion::normal_batch(&mut rngs, &gamma0.shape()[1..])?;
        let start = q_sample_batch(&gamma0, &vec![top; chunk.len()], &eps, &sched)?;
        let conds: Vec<&ConditioningBundle<f32>> = chunk.iter().map(|e| &e.cond).collect();
        let denoised = denoise_from(&model.denoiser, start, top, &sched, &taus, &conds, &config.guidance, &mut rngs)?;
        for i in 0..chunk.len() {
            out.push(unscale_psi(&denoised.index_first(i), &model.stats));
        }
    }
    Ok(out)
}

/// Fine-tune decoder parameters on `latents[i] → pairs[i]` with the
/// registration objective. Each batch also decodes the (frozen) encoder's
/// latents of the same pairs so that registration quality is kept while the
/// decoder adapts to sampler output. Returns the per-step losses.
pub fn finetune_decoder(
    net: &mut RegistrationNet<f32>,
    pairs: &[TrainingPair],
    latents: &[Tensor<f32>],
    config: &TrainConfig,
    seed: u64,
    outer: usize,
) -> Result<Vec<f64>> {
    let is_decoder = |name: &str| name.starts_with("dec");
    let encoded = pairs.iter().map(|p| net.encode(&p.pair)).collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(config.adam(config.finetune_lr), &net.params.filter(is_decoder));
    let batch = config.finetune_batch_size.max(1);
    let mut order = Vec::new();
    let mut pass = 0;
    let mut losses = Vec::with_capacity(config.finetune_steps);
    for step in 0..config.finetune_steps {
        if order.len() < batch {
            order.extend(epoch_order(pairs.len(), rng::derive(seed, "finetune-order"), (outer << 20) | pass));
            pass += 1;
        }
        let idx: Vec<usize> = order.drain(..batch.min(order.len())).collect();
        let tape = Tape::new();
        let p = net.params.bind(&tape);
        let twice = || idx.iter().map(|&i| &latents[i]).chain(idx.iter().map(|&i| &encoded[i]));
        let z = tape.leaf(Tensor::stack(&twice().cloned().collect::<Vec<_>>())?);
        let v = net.decode_on(&tape, &p, z)?;
        let twice = || idx.iter().chain(&idx);
        let m = tape.leaf(stack_images(twice().map(|&i| &pairs[i].pair.template))?);
        let f = tape.leaf(stack_images(twice().map(|&i| &pairs[i].pair.target))?);
        let l2 = p.l2(&tape)?;
        let (total, _, _) = registration_loss_on(&tape, m, f, v, net.config.sigma, net.config.weight_decay, Some(l2))?;
        let value = tape.item(total) as f64;
        if !value.is_finite() {
            return Err(Error::NanLoss {
                stage: "decoder fine-tuning",
                detail: format!("outer iteration {outer}, step {step}, pairs {idx:?}"),
            });
        }
        let grads = tape.backward(total)?;
        let grads = p.grads(&grads).filter(is_decoder);
        adam.update(&mut net.params, &grads)?;
        losses.push(value);
    }
    Ok(losses)
}

/// One sampled edit.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub image: Tensor<f32>,
    pub velocity: VelocityField<f32>,
    /// The map the template is warped with, `exp(−v)`.
    pub deformation: DeformationField<f32>,
    pub topology: TopologyReport,
}

/// Sample edits for a batch of templates. Item `i` uses random stream
/// `streams[i]`, so results do not depend on how items are batched.
pub fn sample_batch(
    model: &Model,
    templates: &[&Tensor<f32>],
    instructions: &[&str],
    guidance: &GuidanceConfig,
    steps: usize,
    seed: u64,
    streams: &[u64],
) -> Result<Vec<SampleOutput>> {
    if templates.len() != instructions.len() || templates.len() != streams.len() {
        return Err(Error::contract("sample", "templates, instructions and streams differ in length"));
    }
    let size = model.registration.config.image_size;
    for t in templates {
        if t.shape() != [1, size[0], size[1]] {
            return Err(Error::shape("sample", t.shape(), &[1, size[0], size[1]]));
        }
    }
    let conds = templates
        .iter()
        .zip(instructions)
        .map(|(t, s)| ConditioningBundle::from_template(*t, s, LATENT_FACTOR))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ConditioningBundle<f32>> = conds.iter().collect();
    let schedule = model.schedule.build()?;
    let latents = reverse_chain(
        &model.denoiser,
        &refs,
        guidance,
        &schedule,
        steps,
        &model.latent_shape(),
        seed,
        streams,
    )?;
    let gammas: Vec<Tensor<f32>> = (0..templates.len())
        .map(|i| unscale_psi(&latents.index_first(i), &model.stats))
        .collect();
    let velocities = model.registration.decode_batch(&Tensor::stack(&gammas)?)?;
    crate::parallel::map(velocities.into_iter().zip(templates), |(v, t)| {
        let deformation = diffeo::invert(&v, min_squarings(v.max_norm() as f64))?;
        let image = diffeo::warp(t, &deformation)?;
        let topology = diffeo::topology_report(&deformation);
        Ok(SampleOutput {
            image,
            velocity: v,
            deformation,
            topology,
        })
    })
    .into_iter()
    .collect()
}

pub fn sample(
    model: &Model,
    template: &Tensor<f32>,
    instruction: &str,
    guidance: &GuidanceConfig,
    steps: usize,
    seed: u64,
) -> Result<SampleOutput> {
    let mut out = sample_batch(model, &[template], &[instruction], guidance, steps, seed, &[0])?;
    Ok(out.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair: usize,
    pub sample: usize,
    pub instruction: String,
    pub ssd_to_target: f64,
    pub identity_ssd: f64,
    pub min_det: f64,
    pub frac_nonpositive: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub pairs: usize,
    pub samples_per_pair: usize,
    /// Fraction of samples whose deformation has a positive Jacobian
    /// determinant everywhere.
    pub positivity_rate: f64,
    pub min_det: f64,
    pub ssd_to_target: Summary,
    pub identity_ssd: Summary,
    pub proxy_frechet: f64,
    pub records: Vec<EvalRecord>,
}

/// Sample `n_samples` edits per pair of `split` and score them against the
/// true targets.
pub fn evaluate(
    model: &Model,
    pairs: &[TrainingPair],
    split: Split,
    n_samples: usize,
    guidance: &GuidanceConfig,
    steps: usize,
    seed: u64,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let n_samples = n_samples.max(1);
    let mut templates = Vec::new();
    let mut instructions = Vec::new();
    let mut streams = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        for k in 0..n_samples {
            templates.push(&p.pair.template);
            instructions.push(p.instruction.as_str());
            streams.push((i * n_samples + k) as u64);
        }
    }
    let outputs = sample_batch(model, &templates, &instructions, guidance, steps, seed, &streams)?;
    let mut records = Vec::with_capacity(outputs.len());
    for (j, out) in outputs.iter().enumerate() {
        let p = &pairs[j / n_samples];
        records.push(EvalRecord {
            pair: j / n_samples,
            sample: j % n_samples,
            instruction: p.instruction.clone(),
            ssd_to_target: metrics::ssd(&out.image, &p.pair.target)?,
            identity_ssd: metrics::ssd(&p.pair.template, &p.pair.target)?,
            min_det: out.topology.min_det,
            frac_nonpositive: out.topology.frac_nonpositive,
        });
    }
    let size = model.registration.config.image_size;
    let stack = |imgs: Vec<Tensor<f32>>| -> Result<Tensor<f32>> {
        let n = imgs.len();
        Tensor::stack(&imgs)?.reshape(vec![n, 1, size[0], size[1]])
    };
    let real = stack(pairs.iter().map(|p| p.pair.target.clone()).collect())?;
    let generated = stack(outputs.iter().map(|o| o.image.clone()).collect())?;
    let proxy_frechet = metrics::proxy_frechet(&real, &generated)?;
    let preserved = records.iter().filter(|r| r.frac_nonpositive == 0.0).count();
    Ok(EvalReport {
        split,
        pairs: pairs.len(),
        samples_per_pair: n_samples,
        positivity_rate: preserved as f64 / records.len() as f64,
        min_det: records.iter().map(|r| r.min_det).fold(f64::INFINITY, f64::min),
        ssd_to_target: Summary::of(&records.iter().map(|r| r.ssd_to_target).collect::<Vec<_>>()),
        identity_ssd: Summary::of(&records.iter().map(|r| r.identity_ssd).collect::<Vec<_>>()),
        proxy_frechet,
        records,
    })
}
