//! Latent gradient of the attention loss against central differences.

mod common;

use common::*;
use cut_core::attention::{AggregationConfig, LattLoss};
use cut_core::diffusion::{grad_latt_wrt_latent, Backbone};
use cut_core::pipeline::foreground_mask;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn latent_gradient_matches_central_differences() {
    let b = toy_backbone();
    let p = prompt(&b);
    let cfg = AggregationConfig::default();
    let mask = foreground_mask(&toy_image(0), b.latent_side()).unwrap();
    let loss = LattLoss { cfg: &cfg, j_set: &p.anomaly_token_indices, mask16: mask.mask16.view() };
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let z = random_latent(&b, seed, 120);
        let (_, grad) = grad_latt_wrt_latent(&b, &z, &p, &loss).unwrap();
        let f = |zz: &cut_core::types::LatentState| loss.evaluate(&b.capture_attention(zz, &p).unwrap()).unwrap().0;
        let n = grad.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for flat in sample(&mut rng, n, 64) {
            let idx = {
                let (_, h, w) = grad.dim();
                (flat / (h * w), (flat / w) % h, flat % w)
            };
            let mut zp = z.clone();
            zp.z[idx] += h;
            let mut zm = z.clone();
            zm.z[idx] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            worst = worst.max(rel_err(grad[idx], fd));
        }
    }
    assert!(worst <= 1e-3, "max relative error {worst}");
}

#[test]
fn grad_is_zero_outside_used_layers_and_finite() {
    let b = toy_backbone();
    let p = prompt(&b);
    let cfg = AggregationConfig { token_scale: 3.0, ..Default::default() };
    let mask = cut_core::types::ForegroundMask::all_foreground(64, 64, 8);
    let loss = LattLoss { cfg: &cfg, j_set: &p.anomaly_token_indices, mask16: mask.mask16.view() };
    let z = random_latent(&b, 11, 50);
    let (v, g) = grad_latt_wrt_latent(&b, &z, &p, &loss).unwrap();
    assert!((0.0..=1.0).contains(&v));
    assert!(g.iter().all(|x| x.is_finite()));
    assert!(g.iter().any(|&x| x != 0.0));
}
