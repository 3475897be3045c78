#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpie_core::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Central finite differences of a scalar function of several tensors.
pub fn finite_difference(
    inputs: &[Tensor<f64>],
    step: f64,
    f: &dyn Fn(&Tape<f64>, &[Var]) -> Var,
) -> Vec<Vec<f64>> {
    let eval = |xs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars);
        tape.item(out)
    };
    let mut result = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            g.push((eval(&plus) - eval(&minus)) / (2.0 * step));
        }
        result.push(g);
    }
    result
}

pub fn analytic(inputs: &[Tensor<f64>], f: &dyn Fn(&Tape<f64>, &[Var]) -> Var) -> Vec<Vec<f64>> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out).unwrap();
    vars.iter().map(|&v| grads.get(v).into_data()).collect()
}

/// `‖a − n‖∞ / ‖n‖∞` over all inputs jointly.
pub fn relative_error(a: &[Vec<f64>], n: &[Vec<f64>]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (ai, ni) in a.iter().zip(n) {
        for (x, y) in ai.iter().zip(ni) {
            diff = diff.max((x - y).abs());
            scale = scale.max(y.abs());
        }
    }
    diff / scale.max(1e-12)
}

pub fn gradient_error(inputs: &[Tensor<f64>], f: &dyn Fn(&Tape<f64>, &[Var]) -> Var) -> f64 {
    let a = analytic(inputs, f);
    let n = finite_difference(inputs, 1e-5, f);
    relative_error(&a, &n)
}

/// Weighted sum `Σ w ⊙ x` with fixed random weights, so every output
/// element gets a distinct cotangent.
pub fn probe(tape: &Tape<f64>, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x);
    let mut r = rng(seed ^ 0x5eed);
    let w = tape.leaf(uniform(&mut r, &shape, -1.0, 1.0));
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod)
}

/// Explicit Euler integration of dφ/dt = v(φ), φ(0) = x, for a 2-d field
/// sampled by periodic bilinear interpolation. Returns the displacement in
/// the engine's channel-first layout. Shares no code with the squaring path.
pub fn euler_flow(v: &tpie_core::diffeo::VelocityField<f64>, substeps: usize) -> Vec<f64> {
    let ext = v.grid().extents().to_vec();
    let (h, w) = (ext[0], ext[1]);
    let n = h * w;
    let f = v.tensor().data();
    let sample = |c: usize, y: f64, x: f64| -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let yi = (y0 as i64).rem_euclid(h as i64) as usize;
        let xi = (x0 as i64).rem_euclid(w as i64) as usize;
        let (y1, x1) = ((yi + 1) % h, (xi + 1) % w);
        let at = |yy: usize, xx: usize| f[c * n + yy * w + xx];
        (1.0 - fy) * ((1.0 - fx) * at(yi, xi) + fx * at(yi, x1))
            + fy * ((1.0 - fx) * at(y1, xi) + fx * at(y1, x1))
    };
    let dt = 1.0 / substeps as f64;
    let mut out = vec![0.0; 2 * n];
    for y in 0..h {
        for x in 0..w {
            let (mut py, mut px) = (y as f64, x as f64);
            for _ in 0..substeps {
                let (vy, vx) = (sample(0, py, px), sample(1, py, px));
                py += dt * vy;
                px += dt * vx;
            }
            out[y * w + x] = py - y as f64;
            out[n + y * w + x] = px - x as f64;
        }
    }
    out
}

/// Smooth periodic test image: a few low-frequency cosines mapped into [0, 1].
pub fn smooth_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let terms: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                r.random_range(-1.0..1.0),
                r.random_range(0..3) as f64,
                r.random_range(0..3) as f64,
                r.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let raw: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            terms
                .iter()
                .map(|(a, ky, kx, ph)| {
                    a * (std::f64::consts::TAU * (ky * y / h as f64 + kx * x / w as f64) + ph).cos()
                })
                .sum()
        })
        .collect();
    let (lo, hi) = raw.iter().fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
    Tensor::new(vec![1, h, w], raw.iter().map(|v| (v - lo) / (hi - lo).max(1e-12)).collect()).unwrap()
}

/// Small but complete joint-training setup for fast pipeline tests.
pub fn tiny_train_config() -> tpie_core::pipeline::TrainConfig {
    use tpie_core::diffusion::{DenoiserConfig, ScheduleConfig};
    use tpie_core::registration::RegistrationConfig;
    let mut c = tpie_core::pipeline::TrainConfig::default();
    c.registration = RegistrationConfig {
        latent_channels: 4,
        widths: [4, 4, 4],
        sigma: 50.0,
        ..RegistrationConfig::default()
    };
    c.denoiser = DenoiserConfig {
        latent_channels: 4,
        hidden: [4, 8],
        time_dim: 8,
    };
    c.schedule = ScheduleConfig {
        steps: 50,
        ..ScheduleConfig::default()
    };
    c.registration_train.max_epochs = 3;
    c.diffusion_train.max_epochs = 3;
    c.diffusion_train.lr = 1e-3;
    c.max_outer_iterations = 2;
    c.outer_tolerance = 0.0;
    c.finetune_steps = 4;
    c.finetune_start_step = 50;
    c.finetune_sample_steps = 5;
    c
}

pub fn tiny_dataset(dir: &std::path::Path, n: usize, seed: u64) -> tpie_core::datagen::DatasetManifest {
    tpie_core::datagen::generate_dataset(n, &tpie_core::datagen::DatagenConfig::default(), seed, dir).unwrap()
}

pub fn tpie(args: &[&str], cwd: &std::path::Path) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_tpie"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run tpie")
}

fn tree_bytes(dir: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Run every CLI command twice in fresh directories with identical
/// arguments and compare all outputs byte for byte. Returns the number of
/// files compared.
pub fn cli_determinism_harness() -> Result<usize, String> {
    let config = serde_json::json!({ "train": tiny_train_config() });
    let mut trees = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::write(root.join("config.json"), config.to_string()).unwrap();
        let runs: [&[&str]; 6] = [
            &["--seed", "7", "--out", "data", "gen-data", "--n", "20"],
            &["--seed", "3", "--config", "config.json", "--out", "train", "train", "--data", "data"],
            &[
                "--seed", "5", "--out", "sample", "sample", "--checkpoint", "train/checkpoint.tpie", "--template",
                "data/pair_0000_template.pgm", "--instruction", "plant at 24 hours. how does it look at 72 hours?",
                "--steps", "10", "--count", "4",
            ],
            &["--seed", "5", "--out", "eval", "eval", "--checkpoint", "train/checkpoint.tpie", "--data", "data", "--steps", "10"],
            &["--out", "render", "render", "--samples", "sample", "--deformation-grid", "sample/deformation_000.rawf32"],
            &[
                "--seed", "3", "--out", "resumed", "train", "--data", "data", "--resume", "train/checkpoint.tpie",
                "--max-outer", "3",
            ],
        ];
        for args in runs {
            let out = tpie(args, root);
            if !out.status.success() {
                return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
            }
            if !out.stdout.is_empty() {
                return Err(format!("{args:?} wrote to stdout"));
            }
        }
        trees.push((tree_bytes(root), dir));
    }
    let (a, b) = (&trees[0].0, &trees[1].0);
    if a.len() != b.len() {
        return Err(format!("file counts differ: {} vs {}", a.len(), b.len()));
    }
    for ((pa, da), (pb, db)) in a.iter().zip(b) {
        if pa != pb || da != db {
            return Err(format!("{} differs between runs", pa.display()));
        }
    }
    Ok(a.len())
}
