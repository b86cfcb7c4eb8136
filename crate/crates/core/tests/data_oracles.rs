use std::path::PathBuf;

use cut_core::data::*;
use cut_core::pipeline::{batch_generate, GenerationConfig};
use cut_core::types::ImageSample;
use cut_core::diffusion::{ToyBackbone, ToyBackboneConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn kshot_is_a_shuffled_prefix() {
    let c: Vec<PathBuf> = (0..5).map(|i| PathBuf::from(format!("train/good/{i:03}.png"))).collect();
    for seed in 0..5 {
        let mut order: Vec<usize> = (0..5).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let want: Vec<PathBuf> = order[..2].iter().map(|&i| c[i].clone()).collect();
        assert_eq!(select_kshot(&c, KShot::Count(2), seed).unwrap().selected, want);
    }
}

#[test]
fn kshot_parsing() {
    for ok in ["1", "2", "4", "all"] {
        assert!(ok.parse::<KShot>().is_ok());
    }
    for bad in ["0", "3", "8", "ALL", ""] {
        assert!(bad.parse::<KShot>().is_err());
    }
}

#[test]
fn toy_mask_equals_pixel_difference() {
    for i in 0..9 {
        let (clean, bad, mask) = render_toy_pair(4, i);
        for ((y, x), &m) in mask.indexed_iter() {
            let differs = (0..3).any(|c| (clean[[y, x, c]] - bad[[y, x, c]]).abs() > 1.0 / 255.0);
            assert_eq!(m == 1.0, differs);
        }
    }
}

#[test]
fn toy_dataset_is_byte_identical_for_one_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_toy_dataset(a.path(), 2, 4, 11).unwrap();
    make_toy_dataset(b.path(), 2, 4, 11).unwrap();
    let files = |root: &std::path::Path| {
        let mut v = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    v.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
                }
            }
        }
        v.sort();
        v
    };
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn toy_dataset_without_anomalies() {
    let dir = tempfile::tempdir().unwrap();
    let spec = make_toy_dataset(dir.path(), 2, 0, 0).unwrap();
    let test = load_split(&spec, TOY_CATEGORY).unwrap();
    assert_eq!(test.len(), 2);
    assert!(test.iter().all(|s| s.y_img == 0));
    assert!(make_toy_dataset(dir.path(), 0, 2, 0).is_err());
}

#[test]
fn missing_root_is_a_dataset_error() {
    let spec = DatasetSpec { root: "/nonexistent/data".into(), layout: Layout::MvtecStyle, categories: vec!["x".into()], split: Split::Test };
    assert!(spec.validate().is_err());
}

#[test]
fn generated_manifest_roundtrip() {
    let (clean, _, _) = render_toy_pair(2, 0);
    let normal = ImageSample::new(clean, "disk", Some("train/good/000.png".into())).unwrap();
    let cfg = GenerationConfig { steps: 40, ..Default::default() };
    let make = || ToyBackbone::new(ToyBackboneConfig { schedule: cut_core::diffusion::ScheduleConfig { steps: 40, ..Default::default() }, ..Default::default() });
    let ds = batch_generate(std::slice::from_ref(&normal), 2, &cfg, make).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("disk");
    let manifest = write_generated(&ds.records, &out).unwrap();
    assert_eq!(read_manifest(&out).unwrap(), manifest);
    let back = read_generated(&out).unwrap();
    assert_eq!(back.len(), 3);
    for (e, r) in back.iter().zip(&ds.records) {
        assert_eq!(e.record.y_img, r.sample.y_img);
        assert_eq!(e.y_pix, quantize_mask(&r.sample.y_pix));
        assert_eq!(e.image.category, "disk");
        let err = (&e.image.pixels - &r.sample.image.pixels).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err <= 0.5 / 255.0 + 1e-12);
    }
    assert_eq!(back[0].record.source_normal, "train/good/000.png");
}
