mod common;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use tpie_core::diffusion::*;
use tpie_core::{rng, Tape, Tensor};

fn normal(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.sample(StandardNormal))
}

#[test]
fn psi_round_trips_a_thousand_latents() {
    let mut r = common::rng(1);
    for i in 0..1000 {
        let scale = 10f64.powf(r.random_range(-3.0..3.0));
        let offset = r.random_range(-2.0..2.0) * scale;
        let gamma = normal(&mut r, &[16, 4, 4]).map(|x| x * scale + offset);
        let (scaled, stats) = scale_psi(&gamma).unwrap();
        let n = scaled.numel() as f64;
        let mean = scaled.sum() / n;
        let rms = (scaled.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9 && (rms - 1.0).abs() < 1e-9, "latent {i}");
        let back = unscale_psi(&scaled, &stats);
        for (a, b) in back.data().iter().zip(gamma.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(gamma.max_abs() * 1e-3), "latent {i}: {a} vs {b}");
        }
    }
}

#[test]
fn psi_guards_constant_latents() {
    for c in [0.0f64, 3.5, -2.0] {
        let gamma = Tensor::full(vec![16, 4, 4], c);
        let (scaled, stats) = scale_psi(&gamma).unwrap();
        assert!(scaled.data().iter().all(|&x| x == 0.0));
        assert_eq!(stats.rms_dev, 0.0);
        let back = unscale_psi(&scaled, &stats);
        assert!(back.data().iter().all(|&x| (x - c).abs() < 1e-12));
    }
    assert!(scale_psi(&Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap()).is_err());
}

proptest! {
    #[test]
    fn psi_is_invariant_to_positive_rescaling(seed in 0u64..10_000, s in 0.01f64..100.0) {
        let gamma = normal(&mut common::rng(seed), &[4, 2, 2]);
        let (a, _) = scale_psi(&gamma).unwrap();
        let (b, _) = scale_psi(&gamma.map(|x| x * s)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn q_sample_moments_match_closed_form() {
    let schedule = ScheduleConfig::default().build().unwrap();
    let gamma0 = Tensor::new(vec![4], vec![-1.5, 0.0, 0.7, 2.0]).unwrap();
    let mut r = common::rng(2);
    let draws = 100_000;
    for tau in [1, 50, 250, 500] {
        let ab = schedule.alpha_bar(tau).unwrap();
        let mut sum = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        for _ in 0..draws {
            let eps = normal(&mut r, &[4]);
            let x = q_sample(&gamma0, tau, &eps, &schedule).unwrap();
            for (k, v) in x.data().iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        let var = 1.0 - ab;
        for k in 0..4 {
            let mean = sum[k] / draws as f64;
            let sample_var = sq[k] / draws as f64 - mean * mean;
            let expect = ab.sqrt() * gamma0.data()[k];
            let se = (var / draws as f64).sqrt();
            assert!((mean - expect).abs() < 4.0 * se, "tau {tau}, element {k}: mean {mean} vs {expect}");
            assert!((sample_var / var - 1.0).abs() < 0.05, "tau {tau}, element {k}: var {sample_var} vs {var}");
        }
    }
}

#[test]
fn first_step_with_true_noise_inverts_q_sample() {
    let schedule = ScheduleConfig::default().build().unwrap();
    let mut r = common::rng(3);
    for _ in 0..20 {
        let gamma0 = normal(&mut r, &[16, 4, 4]);
        let eps = normal(&mut r, &[16, 4, 4]);
        let noised = q_sample(&gamma0, 1, &eps, &schedule).unwrap();
        let back = p_sample_step(&noised, 1, &eps, None, &schedule).unwrap();
        for (a, b) in back.data().iter().zip(gamma0.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn two_step_chain_matches_hand_computation() {
    let (b1, b2) = (0.1, 0.3);
    let schedule = NoiseSchedule::from_betas(vec![b1, b2]).unwrap();
    let (a1, a2) = (1.0 - b1, 1.0 - b2);
    let ab2 = a1 * a2;
    let g2 = 0.8;
    let (z2, z1, rho) = (0.5, -0.25, 1.2);
    let t = |x: f64| Tensor::new(vec![1], vec![x]).unwrap();
    let g1 = p_sample_step(&t(g2), 2, &t(z2), Some(&t(rho)), &schedule).unwrap().data()[0];
    let g0 = p_sample_step(&t(g1), 1, &t(z1), None, &schedule).unwrap().data()[0];
    let want1 = (g2 - b2 / (1.0 - ab2).sqrt() * z2) / a2.sqrt() + b2.sqrt() * rho;
    let want0 = (want1 - b1 / (1.0 - a1).sqrt() * z1) / a1.sqrt();
    assert!((g1 - want1).abs() < 1e-12);
    assert!((g0 - want0).abs() < 1e-12);
}

fn toy_denoiser(seed: u64) -> Denoiser<f64> {
    let config = DenoiserConfig {
        latent_channels: 2,
        hidden: [3, 4],
        time_dim: 8,
    };
    Denoiser::with_output_gain(config, &mut common::rng(seed), 0.5)
}

fn toy_condition(seed: u64, instruction: &str) -> ConditioningBundle<f64> {
    let template = common::smooth_image(32, 32, seed);
    ConditioningBundle::from_template(&template, instruction, 8).unwrap()
}

#[test]
fn guidance_collapses_to_single_branches() {
    let den = toy_denoiser(4);
    let cond = toy_condition(4, "plant at 24 hours. how does it look at 72 hours?");
    let latents = normal(&mut common::rng(5), &[1, 2, 4, 4]);
    let branch = |c: ConditioningBundle<f64>| den.predict_batch(&latents, &[30], &[&c]).unwrap();
    let cases = [
        ((1.0, 1.0), branch(cond.clone())),
        ((1.0, 0.0), branch(cond.nulled(false, true))),
        ((0.0, 0.0), branch(cond.nulled(true, true))),
    ];
    for ((image, text), want) in cases {
        let got = den.cfg_predict(&latents, &[30], &[&cond], &GuidanceConfig { image, text }).unwrap();
        assert_eq!(got, want, "guidance ({image}, {text})");
    }
}

#[test]
fn guided_prediction_is_independent_of_batch_composition() {
    let den = toy_denoiser(6);
    let conds: Vec<_> = (0..3).map(|i| toy_condition(i, &format!("plant at {} hours", 24 * i))).collect();
    let refs: Vec<_> = conds.iter().collect();
    let latents = normal(&mut common::rng(7), &[3, 2, 4, 4]);
    let g = GuidanceConfig::default();
    let together = den.cfg_predict(&latents, &[5, 100, 400], &refs, &g).unwrap();
    for i in 0..3 {
        let single = latents.index_first(i).reshape(vec![1, 2, 4, 4]).unwrap();
        let alone = den.cfg_predict(&single, &[[5, 100, 400][i]], &[refs[i]], &g).unwrap();
        assert_eq!(alone.data(), together.index_first(i).data());
    }
}

/// Loss recomputed from raw predictions with plain loops.
fn reference_loss(
    den: &Denoiser<f64>,
    gamma0: &Tensor<f64>,
    taus: &[usize],
    eps: &Tensor<f64>,
    conds: &[&ConditioningBundle<f64>],
    schedule: &NoiseSchedule,
    lambda: f64,
) -> f64 {
    let b = taus.len();
    let per = gamma0.numel() / b;
    let mut noised = Vec::with_capacity(gamma0.numel());
    for i in 0..b {
        let ab = schedule.alpha_bar(taus[i]).unwrap();
        for k in 0..per {
            noised.push(ab.sqrt() * gamma0.data()[i * per + k] + (1.0 - ab).sqrt() * eps.data()[i * per + k]);
        }
    }
    let noised = Tensor::new(gamma0.shape().to_vec(), noised).unwrap();
    let z = den.predict_batch(&noised, taus, conds).unwrap();
    let mut total = 0.0;
    for i in 0..b {
        let ab = schedule.alpha_bar(taus[i]).unwrap();
        for k in 0..per {
            let j = i * per + k;
            let zhat = z.data()[j];
            let g0_hat = (noised.data()[j] - (1.0 - ab).sqrt() * zhat) / ab.sqrt();
            total += (eps.data()[j] - zhat).powi(2) + lambda * (gamma0.data()[j] - g0_hat).powi(2);
        }
    }
    total / b as f64
}

#[test]
fn diffusion_loss_matches_reference() {
    let den = toy_denoiser(8);
    let schedule = ScheduleConfig::default().build().unwrap();
    let conds: Vec<_> = (0..3).map(|i| toy_condition(i + 10, "plant at 48 hours")).collect();
    let refs: Vec<_> = conds.iter().collect();
    let mut r = common::rng(9);
    let gamma0 = normal(&mut r, &[3, 2, 4, 4]);
    let eps = normal(&mut r, &[3, 2, 4, 4]);
    let taus = [1, 120, 499];
    for lambda in [0.0, 0.1, 1.0] {
        let got = diffusion_loss(&den, &gamma0, &taus, &eps, &refs, &schedule, lambda, 1e-5).unwrap();
        let want = reference_loss(&den, &gamma0, &taus, &eps, &refs, &schedule, lambda);
        assert!((got.noise + got.reconstruction - want).abs() < 1e-9 * want.max(1.0), "{got:?} vs {want}");
        let weight = 1e-5 * den.params.sum_squares();
        assert!((got.weight - weight).abs() < 1e-15);
        assert!((got.total - want - weight).abs() < 1e-9 * want.max(1.0));
    }
}

#[test]
fn perfect_noise_prediction_leaves_only_weight_decay() {
    let den = toy_denoiser(11);
    let schedule = ScheduleConfig::default().build().unwrap();
    let mut r = common::rng(12);
    let gamma0 = normal(&mut r, &[2, 2, 4, 4]);
    let eps = normal(&mut r, &[2, 2, 4, 4]);
    let taus = [10, 300];
    let gamma_tau = q_sample_batch(&gamma0, &taus, &eps, &schedule).unwrap();
    let tape = Tape::new();
    let p = den.params.bind(&tape);
    let z = tape.leaf(eps.clone());
    let (noise, recon) = diffusion_terms_on(&tape, &gamma0, &gamma_tau, &eps, z, &taus, &schedule, 0.1).unwrap();
    let l2 = p.l2(&tape).unwrap();
    let total = tape.add(tape.add(noise, recon).unwrap(), tape.scale(l2, 1e-5)).unwrap();
    assert_eq!(tape.item(noise), 0.0);
    assert!(tape.item(recon) < 1e-20);
    assert!((tape.item(total) - 1e-5 * den.params.sum_squares()).abs() < 1e-15);
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let schedule = ScheduleConfig::default().build().unwrap();
    for seed in 0..20u64 {
        let mut den = toy_denoiser(seed);
        let conds: Vec<_> = (0..2).map(|i| toy_condition(seed + i, "plant at 24 hours")).collect();
        let refs: Vec<_> = conds.iter().collect();
        let mut r = common::rng(seed + 100);
        let gamma0 = normal(&mut r, &[2, 2, 4, 4]);
        let eps = normal(&mut r, &[2, 2, 4, 4]);
        let taus = [r.random_range(1..=500), r.random_range(1..=500)];

        let tape = Tape::new();
        let p = den.params.bind(&tape);
        let gamma_tau = q_sample_batch(&gamma0, &taus, &eps, &schedule).unwrap();
        let (image, text) = stack_conditions(&refs).unwrap();
        let z = den
            .predict_on(&tape, &p, tape.leaf(gamma_tau.clone()), &taus, tape.leaf(image), tape.leaf(text))
            .unwrap();
        let (noise, recon) = diffusion_terms_on(&tape, &gamma0, &gamma_tau, &eps, z, &taus, &schedule, 0.1).unwrap();
        let total = tape.add(noise, recon).unwrap();
        let grads = p.grads(&tape.backward(total).unwrap());

        let names: Vec<String> = den.params.names().map(|s| s.to_string()).collect();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        let h = 1e-6;
        let eval = |d: &Denoiser<f64>| diffusion_loss(d, &gamma0, &taus, &eps, &refs, &schedule, 0.1, 0.0).unwrap().total;
        for name in &names {
            let n = den.params.get(name).unwrap().numel();
            let mut fd = Vec::with_capacity(n);
            for j in 0..n {
                let orig = den.params.get(name).unwrap().data()[j];
                den.params.get_mut(name).unwrap().data_mut()[j] = orig + h;
                let plus = eval(&den);
                den.params.get_mut(name).unwrap().data_mut()[j] = orig - h;
                let minus = eval(&den);
                den.params.get_mut(name).unwrap().data_mut()[j] = orig;
                fd.push((plus - minus) / (2.0 * h));
            }
            analytic.push(grads.get(name).unwrap().data().to_vec());
            numeric.push(fd);
        }
        let err = common::relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn condition_dropout_frequencies_are_binomial() {
    let cond = toy_condition(13, "plant at 24 hours");
    let p = 0.05;
    let n = 100_000;
    let mut r = rng::stream(14, 0);
    let (mut image, mut text, mut both) = (0usize, 0usize, 0usize);
    for _ in 0..n {
        let c = condition_dropout(&cond, &mut r, p).unwrap();
        image += c.null_image as usize;
        text += c.null_text as usize;
        both += (c.null_image && c.null_text) as usize;
        if c.null_image {
            assert!(c.image.data().iter().all(|&x| x == 0.0));
        }
    }
    let p_one = 1.0 - (1.0 - p) * (1.0 - p);
    let p_both = p + (1.0 - p) * p * p;
    for (count, prob, what) in [(image, p_one, "image"), (text, p_one, "text"), (both, p_both, "both")] {
        let se = (prob * (1.0 - prob) / n as f64).sqrt();
        let freq = count as f64 / n as f64;
        assert!((freq - prob).abs() < 4.0 * se, "{what}: {freq} vs {prob}");
    }
    assert!(condition_dropout(&cond, &mut r, 0.6).is_err());
    assert!(condition_dropout(&cond, &mut r, -0.1).is_err());
}

#[test]
fn age_tokens_hash_to_distinct_embeddings() {
    assert_ne!(token_bucket("24"), token_bucket("48"));
    let a = embed_text::<f64>("plant at 24 hours. how does it look at 48 hours?");
    let b = embed_text::<f64>("plant at 48 hours. how does it look at 72 hours?");
    assert_ne!(a, b);
    assert!((a.sum_squares() - 1.0).abs() < 1e-12);
    assert_eq!(embed_text::<f64>("Plant AT 24"), embed_text::<f64>("plant at 24"));
    assert_eq!(embed_text::<f64>("").sum_squares(), 0.0);
}

#[test]
fn image_embedding_responds_only_at_edges() {
    let flat = Tensor::<f64>::full(vec![1, 32, 32], 0.4);
    assert!(embed_image(&flat, 8).unwrap().data().iter().all(|&x| x == 0.0));
    // Vertical step at column 12: only the x-gradient channel responds, and
    // only in the pooled column containing the edge.
    let step = Tensor::<f64>::from_fn(vec![1, 32, 32], |i| if (4..12).contains(&(i % 32)) { 1.0 } else { 0.0 });
    let e = embed_image(&step, 8).unwrap();
    assert_eq!(e.shape(), &[2, 4, 4]);
    assert!(e.data()[..16].iter().all(|&x| x == 0.0));
    for y in 0..4 {
        let row = &e.data()[16 + 4 * y..16 + 4 * y + 4];
        assert!(row[0] > 0.0 && row[1] < 0.0, "{row:?}");
        assert_eq!(row[2], 0.0);
        assert_eq!(row[3], 0.0);
    }
    assert!(embed_image(&flat, 5).is_err());
}

#[test]
fn reverse_chain_is_reproducible_and_batch_independent() {
    let den = Denoiser::<f32>::with_output_gain(
        DenoiserConfig {
            latent_channels: 2,
            hidden: [3, 4],
            time_dim: 8,
        },
        &mut common::rng(15),
        0.5,
    );
    let schedule = ScheduleConfig::default().build().unwrap();
    let conds: Vec<_> = (0..3)
        .map(|i| ConditioningBundle::from_template(&common::smooth_image(32, 32, i).cast::<f32>(), "plant at 24 hours", 8).unwrap())
        .collect();
    let refs: Vec<_> = conds.iter().collect();
    let g = GuidanceConfig::default();
    let run = |refs: &[&ConditioningBundle<f32>], streams: &[u64]| {
        reverse_chain(&den, refs, &g, &schedule, 25, &[2, 4, 4], 16, streams).unwrap()
    };
    let all = run(&refs, &[0, 1, 2]);
    assert_eq!(all, run(&refs, &[0, 1, 2]));
    let last = run(&refs[2..], &[2]);
    assert_eq!(last.index_first(0), all.index_first(2));
    assert!(all.all_finite());
}
