use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;
use tpie_core::datagen::*;
use tpie_core::diffeo::{exponentiate, invert, min_squarings, topology_report};
use tpie_core::rng;

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn ground_truth_deformations_preserve_topology() {
    let cfg = DatagenConfig::default();
    for i in 0..100 {
        let (_, _, _, _, v) = generate_item(&cfg, 21, i).unwrap();
        let k = min_squarings(v.max_norm() as f64);
        for phi in [exponentiate(&v, k).unwrap(), invert(&v, k).unwrap()] {
            let report = topology_report(&phi);
            assert_eq!(report.frac_nonpositive, 0.0, "item {i}: {report:?}");
            assert!(report.min_det > 0.0);
        }
    }
}

#[test]
fn images_stay_in_unit_range() {
    let cfg = DatagenConfig::default();
    for i in 0..100 {
        let (_, _, m, f, _) = generate_item(&cfg, 22, i).unwrap();
        for x in m.data().iter().chain(f.data()) {
            assert!((0.0..=1.0).contains(x), "item {i}: {x}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rendered_area_grows_with_age(seed in 0u64..100_000, a in 0u32..20, b in 0u32..20) {
        let scene = ShapeScene::random(&DatagenConfig::default(), &mut rng::stream(seed, 0));
        let (t0, t1) = (a.min(b) * AGE_STEP_H, a.max(b) * AGE_STEP_H);
        prop_assert!(scene.area(t0 as f64) <= scene.area(t1 as f64));
    }

    #[test]
    fn grown_targets_cover_at_least_the_template(seed in 0u64..100_000) {
        let (t0, t1, m, f, _) = generate_item(&DatagenConfig::default(), seed, 0).unwrap();
        prop_assert!(t0 < t1 && t1 <= MAX_AGE_H);
        let area = |t: &tpie_core::Tensor<f32>| t.data().iter().filter(|&&x| x >= 0.5).count();
        prop_assert!(area(&f) + 2 >= area(&m), "template {} target {}", area(&m), area(&f));
    }
}

#[test]
fn equal_ages_give_an_unchanged_target() {
    let scene = ShapeScene::random(&DatagenConfig::default(), &mut rng::stream(3, 0));
    let (m, f, v) = generate_pair(&scene, 48, 48).unwrap();
    assert_eq!(m, f);
    assert_eq!(v.max_norm(), 0.0);
    assert!(generate_pair(&scene, 72, 48).is_err());
    assert!(generate_pair(&scene, 0, MAX_AGE_H + 12).is_err());
}

#[test]
fn instruction_mentions_both_ages() {
    assert_eq!(render_instruction(24, 72), "plant at 24 hours. how does it look at 72 hours?");
}

#[test]
fn dataset_generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(20, &DatagenConfig::default(), 5, a.path()).unwrap();
    generate_dataset(20, &DatagenConfig::default(), 5, b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    let c = tempfile::tempdir().unwrap();
    generate_dataset(20, &DatagenConfig::default(), 6, c.path()).unwrap();
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn splits_are_disjoint_and_cover_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let written = generate_dataset(100, &DatagenConfig::default(), 7, dir.path()).unwrap();
    let manifest = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(manifest.records, written.records);
    let sizes: Vec<usize> = [Split::Train, Split::Val, Split::Test].iter().map(|&s| manifest.split(s).len()).collect();
    assert_eq!(sizes, vec![80, 10, 10]);
    let mut seen = BTreeSet::new();
    for r in &manifest.records {
        assert!(seen.insert(r.template_path.clone()), "duplicate {}", r.template_path);
        let pair = manifest.load_pair(r).unwrap();
        assert_eq!(pair.extents(), [32, 32]);
        assert_eq!(manifest.load_velocity(r).unwrap().grid().extents(), &[32, 32]);
        assert_eq!(r.instruction, render_instruction(r.age_from_h, r.age_to_h));
    }
    assert_eq!(seen.len(), 100);
    assert!(generate_dataset(5, &DatagenConfig::default(), 7, dir.path()).is_err());
}

#[test]
fn split_sizes_round_to_tenths() {
    assert_eq!(split_sizes(100), [80, 10, 10]);
    assert_eq!(split_sizes(200), [160, 20, 20]);
    assert_eq!(split_sizes(15), [11, 2, 2]);
}
