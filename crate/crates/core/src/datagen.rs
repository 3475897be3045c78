//! Synthetic growth data: soft blobs ("leaves") that expand with age.
//!
//! A target is never rendered directly. It is the template warped by the
//! ground-truth deformation, `f = m ∘ exp(−v)`, so the registration loss has
//! an attainable zero.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffeo::{self, min_squarings, Grid, VelocityField};
use crate::error::{Error, Result};
use crate::io;
use crate::registration::ImagePair;
use crate::rng;
use crate::tensor::Tensor;

pub const MAX_AGE_H: u32 = 240;
pub const AGE_STEP_H: u32 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// `(row, col)` in grid units.
    pub center: [f64; 2],
    pub base_radius: f64,
    /// Radius gained per 24 simulated hours.
    pub growth_rate: f64,
    pub edge_width: f64,
}

impl Blob {
    pub fn radius_at(&self, age_h: f64) -> f64 {
        self.base_radius + self.growth_rate * age_h / 24.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeScene {
    pub size: [usize; 2],
    pub blobs: Vec<Blob>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub size: [usize; 2],
    pub max_blobs: usize,
    pub base_radius: [f64; 2],
    pub growth_rate: [f64; 2],
    pub edge_width: f64,
    pub margin: f64,
    /// Allowed age gaps `t1 − t0`, hours.
    pub age_gaps_h: Vec<u32>,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            size: [32, 32],
            max_blobs: 3,
            base_radius: [2.0, 3.0],
            growth_rate: [0.4, 0.7],
            edge_width: 0.6,
            margin: 2.0,
            age_gaps_h: vec![24, 48, 72],
        }
    }
}

impl ShapeScene {
    /// Random scene whose blobs stay inside the canvas, with `margin` to
    /// spare, up to the maximum age.
    pub fn random(config: &DatagenConfig, rng: &mut impl Rng) -> Self {
        let count = rng.random_range(1..=config.max_blobs.max(1));
        let blobs = (0..count)
            .map(|_| {
                let base_radius = rng.random_range(config.base_radius[0]..=config.base_radius[1]);
                let growth_rate = rng.random_range(config.growth_rate[0]..=config.growth_rate[1]);
                let reach = base_radius + growth_rate * MAX_AGE_H as f64 / 24.0 + config.margin;
                let center = [0, 1].map(|a| {
                    let e = config.size[a] as f64;
                    if reach < e - reach {
                        rng.random_range(reach..=e - reach)
                    } else {
                        e / 2.0
                    }
                });
                Blob {
                    center,
                    base_radius,
                    growth_rate,
                    edge_width: config.edge_width,
                }
            })
            .collect();
        let mut scene = Self {
            size: config.size,
            blobs,
        };
        scene.fit(config.margin);
        scene
    }

    /// Whether every blob keeps `margin` to the canvas edge at the maximum age.
    pub fn fits(&self, margin: f64) -> bool {
        self.blobs.iter().all(|b| {
            let r = b.radius_at(MAX_AGE_H as f64) + margin;
            (0..2).all(|a| b.center[a] - r >= 0.0 && b.center[a] + r <= self.size[a] as f64)
        })
    }

    /// Halve growth rates until the scene fits.
    fn fit(&mut self, margin: f64) {
        for _ in 0..32 {
            if self.fits(margin) {
                return;
            }
            for b in &mut self.blobs {
                b.growth_rate *= 0.5;
            }
        }
    }

    /// `[1, H, W]` rendering at `age_h`: the maximum over blobs of a logistic
    /// edge profile.
    pub fn render(&self, age_h: f64) -> Tensor<f32> {
        let [h, w] = self.size;
        Tensor::from_fn(vec![1, h, w], |i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            self.blobs
                .iter()
                .map(|b| {
                    let dist = ((y - b.center[0]).powi(2) + (x - b.center[1]).powi(2)).sqrt();
                    1.0 / (1.0 + ((dist - b.radius_at(age_h)) / b.edge_width).exp())
                })
                .fold(0.0f64, f64::max) as f32
        })
    }

    /// Pixels at or above one half.
    pub fn area(&self, age_h: f64) -> usize {
        self.render(age_h).data().iter().filter(|&&x| x >= 0.5).count()
    }

    /// Sum of radial expansion fields
    /// `g · (Δt/24) · exp(−r²/2s²) · (x − c)/s`, `s` the radius at `t0` and
    /// `g = rate·√e`, so the boundary speed is the growth rate.
    pub fn growth_velocity(&self, t0: f64, t1: f64) -> Result<VelocityField<f32>> {
        let [h, w] = self.size;
        let n = h * w;
        let mut field = vec![0.0f64; 2 * n];
        let span = (t1 - t0) / 24.0;
        for b in &self.blobs {
            let s = b.radius_at(t0);
            let g = b.growth_rate * std::f64::consts::E.sqrt() * span;
            for p in 0..n {
                let d = [(p / w) as f64 - b.center[0], (p % w) as f64 - b.center[1]];
                let r2 = d[0] * d[0] + d[1] * d[1];
                let profile = g * (-r2 / (2.0 * s * s)).exp() / s;
                field[p] += profile * d[0];
                field[n + p] += profile * d[1];
            }
        }
        let grid = Grid::new(vec![h, w])?;
        VelocityField::new(grid, Tensor::from_fn(vec![2, h, w], |i| field[i] as f32))
    }
}

/// Template at `t0`, target grown to `t1`, and the ground-truth velocity.
pub fn generate_pair(scene: &ShapeScene, t0: u32, t1: u32) -> Result<(Tensor<f32>, Tensor<f32>, VelocityField<f32>)> {
    if t0 > t1 || t1 > MAX_AGE_H {
        return Err(Error::contract(
            "generate_pair",
            format!("ages must satisfy 0 <= t0 <= t1 <= {MAX_AGE_H}, got {t0} and {t1}"),
        ));
    }
    let template = scene.render(t0 as f64);
    let v = scene.growth_velocity(t0 as f64, t1 as f64)?;
    if t0 == t1 {
        return Ok((template.clone(), template, v));
    }
    let inverse = diffeo::invert(&v, min_squarings(v.max_norm() as f64))?;
    let target = diffeo::warp(&template, &inverse)?.map(|x| x.clamp(0.0, 1.0));
    Ok((template, target, v))
}

pub fn render_instruction(t0: u32, t1: u32) -> String {
    format!("plant at {t0} hours. how does it look at {t1} hours?")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub template_path: String,
    pub target_path: String,
    pub velocity_path: String,
    pub instruction: String,
    pub age_from_h: u32,
    pub age_to_h: u32,
    pub seed: u64,
    pub split: Split,
}

/// Records plus the directory their relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<Record>, _>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn load_pair(&self, record: &Record) -> Result<ImagePair<f32>> {
        let m = io::read_image(&self.root.join(&record.template_path))?;
        let f = io::read_image(&self.root.join(&record.target_path))?;
        ImagePair::new(m, f)
    }

    pub fn load_velocity(&self, record: &Record) -> Result<VelocityField<f32>> {
        let t = io::read_rawf32(&self.root.join(&record.velocity_path))?;
        let grid = Grid::new(t.shape()[1..].to_vec())?;
        VelocityField::new(grid, t)
    }
}

/// Split sizes for `n` items: 10% validation and 10% test, rounded, the
/// rest training.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let tenth = (n as f64 / 10.0).round() as usize;
    [n - 2 * tenth, tenth, tenth]
}

/// Scene, ages and rendered pair for dataset item `index`.
pub fn generate_item(
    config: &DatagenConfig,
    seed: u64,
    index: usize,
) -> Result<(u32, u32, Tensor<f32>, Tensor<f32>, VelocityField<f32>)> {
    let mut r = rng::stream(rng::derive(seed, "datagen"), index as u64);
    let scene = ShapeScene::random(config, &mut r);
    let gap = *config.age_gaps_h.choose(&mut r).ok_or(Error::Empty("age gap list"))?;
    let gap = gap.min(MAX_AGE_H);
    let slots = (MAX_AGE_H - gap) / AGE_STEP_H;
    let t0 = r.random_range(0..=slots) * AGE_STEP_H;
    let t1 = t0 + gap;
    let (m, f, v) = generate_pair(&scene, t0, t1)?;
    Ok((t0, t1, m, f, v))
}

/// Write `n` pairs plus `manifest.jsonl` under `out`.
pub fn generate_dataset(n: usize, config: &DatagenConfig, seed: u64, out: &Path) -> Result<DatasetManifest> {
    if n < 10 {
        return Err(Error::contract("generate_dataset", format!("need at least 10 pairs, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(rng::derive(seed, "split"), 0));
    let [train, val, _] = split_sizes(n);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let items: Vec<_> = crate::parallel::map(0..n, |i| generate_item(config, seed, i))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(n);
    for (i, (t0, t1, m, f, v)) in items.into_iter().enumerate() {
        let stem = format!("pair_{i:04}");
        let names = [
            format!("{stem}_template.rawf32"),
            format!("{stem}_target.rawf32"),
            format!("{stem}_velocity.rawf32"),
        ];
        io::write_rawf32(&out.join(&names[0]), &m)?;
        io::write_rawf32(&out.join(&names[1]), &f)?;
        io::write_rawf32(&out.join(&names[2]), v.tensor())?;
        io::write_pgm(&out.join(format!("{stem}_template.pgm")), &m)?;
        io::write_pgm(&out.join(format!("{stem}_target.pgm")), &f)?;
        let [template_path, target_path, velocity_path] = names;
        records.push(Record {
            template_path,
            target_path,
            velocity_path,
            instruction: render_instruction(t0, t1),
            age_from_h: t0,
            age_to_h: t1,
            seed,
            split: splits[i],
        });
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        records,
    };
    io::write_bytes(&out.join(MANIFEST_FILE), manifest.to_jsonl()?.as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instruction_template() {
        assert_eq!(render_instruction(24, 48), "plant at 24 hours. how does it look at 48 hours?");
        assert_eq!(render_instruction(0, 0), "plant at 0 hours. how does it look at 0 hours?");
    }

    #[test]
    fn split_sizes_follow_eighty_ten_ten() {
        assert_eq!(split_sizes(10), [8, 1, 1]);
        assert_eq!(split_sizes(100), [80, 10, 10]);
        assert_eq!(split_sizes(200), [160, 20, 20]);
    }

    #[test]
    fn equal_ages_give_identity_pair() {
        let scene = ShapeScene::random(&DatagenConfig::default(), &mut rng::stream(1, 0));
        let (m, f, v) = generate_pair(&scene, 48, 48).unwrap();
        assert_eq!(m, f);
        assert!(v.tensor().data().iter().all(|&x| x == 0.0));
        assert!(generate_pair(&scene, 48, 24).is_err());
    }

    #[test]
    fn shrunk_scene_fits() {
        let mut scene = ShapeScene {
            size: [32, 32],
            blobs: vec![Blob {
                center: [16.0, 16.0],
                base_radius: 3.0,
                growth_rate: 5.0,
                edge_width: 0.5,
            }],
        };
        assert!(!scene.fits(2.0));
        scene.fit(2.0);
        assert!(scene.fits(2.0));
    }
}
