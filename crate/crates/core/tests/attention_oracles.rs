mod common;

use common::*;
use cut_core::attention::*;
use cut_core::diffusion::Backbone;
use cut_core::types::{AttentionStack, ForegroundMask};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_stack(rng: &mut ChaCha8Rng, tokens: usize) -> AttentionStack {
    let mut maps = Vec::new();
    let mut ids = Vec::new();
    for (i, side) in [16usize, 8, 16, 32].into_iter().enumerate() {
        maps.push(Array3::from_shape_fn((side, side, tokens), |_| rng.random_range(0.0..1.0)));
        ids.push(format!("layer{i}"));
    }
    AttentionStack::new(maps, ids, 7, tokens).unwrap()
}

/// Straight loops: average the 16x16 maps, softmax per pixel, then 3x3
/// Gaussian smoothing with mirror padding that excludes the edge pixel.
fn aggregate_oracle(stack: &AttentionStack, sigma: f64, scale: f64) -> Array3<f64> {
    let n = stack.tokens();
    let used: Vec<&Array3<f64>> = stack.maps.iter().filter(|m| m.dim().0 == 16).collect();
    let mut probs = Array3::<f64>::zeros((16, 16, n));
    for y in 0..16 {
        for x in 0..16 {
            let mut row = vec![0.0; n];
            for (k, r) in row.iter_mut().enumerate() {
                for m in &used {
                    *r += m[[y, x, k]];
                }
                *r = *r / used.len() as f64 * scale;
            }
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for k in 0..n {
                probs[[y, x, k]] = (row[k] - mx).exp() / z;
            }
        }
    }
    let mut w = [[0.0; 3]; 3];
    let mut total = 0.0;
    for (i, wr) in w.iter_mut().enumerate() {
        for (j, v) in wr.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 1.0, j as f64 - 1.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let mirror = |i: isize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i > 15 {
            (30 - i) as usize
        } else {
            i as usize
        }
    };
    let mut out = Array3::zeros((16, 16, n));
    for k in 0..n {
        for y in 0..16isize {
            for x in 0..16isize {
                let mut acc = 0.0;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        acc += w[(dy + 1) as usize][(dx + 1) as usize] / total * probs[[mirror(y + dy), mirror(x + dx), k]];
                    }
                }
                out[[y as usize, x as usize, k]] = acc;
            }
        }
    }
    out
}

#[test]
fn aggregation_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..20 {
        let stack = random_stack(&mut rng, 3 + trial % 5);
        let scale = [1.0, 4.0, 0.5][trial % 3];
        let cfg = AggregationConfig { token_scale: scale, ..Default::default() };
        let got = aggregate_attention(&stack, &cfg).unwrap();
        let want = aggregate_oracle(&stack, 0.5, scale);
        let err = (&got.abar - &want).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-12, "trial {trial}: {err}");
    }
}

#[test]
fn step_size_grid_and_published_case() {
    for li in 0..10 {
        for ti in 0..10 {
            for ni in 0..10 {
                let lambda = 0.5 + 2.0 * li as f64;
                let t = 1 + 20 * ti;
                let n_t = 3 * ni;
                let st = SchedulerState::new(&SchedulerParams { lambda, ..Default::default() }, 200, 150, 17).unwrap();
                let want = lambda * (1.0 + t as f64 / 200.0) * n_t as f64 / 17.0;
                assert!((step_size(&st, t, n_t) - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }
    let t_start = cut_core::pipeline::start_step(200, 0.25);
    let st = SchedulerState::new(&SchedulerParams::default(), 200, t_start, 42).unwrap();
    assert_eq!(step_size(&st, t_start, 42), 17.5);
}

#[test]
fn zero_activation_at_start_is_clamped() {
    let st = SchedulerState::new(&SchedulerParams::default(), 200, 150, 0).unwrap();
    assert_eq!(st.n_start, 1);
    assert!(step_size(&st, 100, 3).is_finite());
}

fn run_trace(trace: &[usize]) -> Vec<bool> {
    let mut st = SchedulerState::new(&SchedulerParams::default(), 200, 150, 100).unwrap();
    trace.iter().enumerate().map(|(i, &n)| should_stop(&mut st, i, n)).collect()
}

#[test]
fn early_stop_scripted_traces() {
    // in range during warm-up does not stop
    let t = run_trace(&[20; 10]);
    assert!(t.iter().all(|&s| !s));
    // first in-range step after warm-up stops, and it latches
    let mut trace = vec![100; 12];
    trace.extend([30, 200, 5, 100]);
    let t = run_trace(&trace);
    assert_eq!(t.iter().position(|&s| s), Some(12));
    assert!(t[12..].iter().all(|&s| s));
    // bounds are exclusive
    let t = run_trace(&[10, 10, 10, 10, 10, 10, 10, 10, 10, 10, 10, 50, 50, 11]);
    assert_eq!(t.iter().position(|&s| s), Some(13));
    // n_t = 49 stops, 51 does not
    assert!(run_trace(&[49; 11])[10]);
    assert!(!run_trace(&[51; 11])[10]);
}

#[test]
fn refinement_checkpoints() {
    let th = RefinementThresholds::default();
    let window = 150;
    let refine: Vec<(usize, f64)> = (0..window)
        .filter_map(|s| match th.plan(s, window) {
            InnerPlan::Refine { threshold } => Some((s, threshold)),
            InnerPlan::Single => None,
        })
        .collect();
    assert_eq!(refine, vec![(38, 0.05), (75, 0.5), (113, 0.8)]);
}

#[test]
fn masked_update_leaves_background_bit_identical() {
    let b = toy_backbone();
    let p = prompt(&b);
    let cfg = AggregationConfig::default();
    let th = RefinementThresholds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..100u64 {
        let full = Array2::from_shape_fn((64, 64), |_| rng.random_bool(0.5));
        let mut mask = ForegroundMask::from_full(full, 8).unwrap();
        mask.mask_lat = Array2::from_shape_fn((8, 8), |_| rng.random_bool(0.4));
        let z = random_latent(&b, trial, rng.random_range(1..=200));
        let st = SchedulerState::new(&SchedulerParams { lambda: rng.random_range(1.0..50.0), ..Default::default() }, 200, 200, 1 + trial as usize % 30).unwrap();
        let plan = if trial % 4 == 0 { InnerPlan::Refine { threshold: 0.99 } } else { InnerPlan::Single };
        let out = optimize_step(&b, &z, &p, &mask, &st, plan, 5 + trial as usize % 40, &th, &cfg).unwrap();
        for ((c, y, x), &v) in out.latent.z.indexed_iter() {
            if !mask.mask_lat[[y, x]] {
                assert_eq!(v.to_bits(), z.z[[c, y, x]].to_bits(), "trial {trial}");
            }
        }
        assert_eq!(out.latent.t, z.t);
    }
}

#[test]
fn stopped_state_rejects_optimisation() {
    let b = toy_backbone();
    let p = prompt(&b);
    let mut st = SchedulerState::new(&SchedulerParams::default(), 200, 150, 10).unwrap();
    st.stopped = true;
    let mask = ForegroundMask::all_foreground(64, 64, b.latent_side());
    let z = random_latent(&b, 0, 100);
    let r = optimize_step(&b, &z, &p, &mask, &st, InnerPlan::Single, 20, &RefinementThresholds::default(), &AggregationConfig::default());
    assert!(r.is_err());
}

#[test]
fn zero_lambda_is_a_no_op() {
    let b = toy_backbone();
    let p = prompt(&b);
    let st = SchedulerState::new(&SchedulerParams { lambda: 0.0, ..Default::default() }, 200, 150, 10).unwrap();
    let mask = ForegroundMask::all_foreground(64, 64, b.latent_side());
    let z = random_latent(&b, 4, 100);
    let out = optimize_step(&b, &z, &p, &mask, &st, InnerPlan::Single, 20, &RefinementThresholds::default(), &AggregationConfig::default()).unwrap();
    assert_eq!(out.latent, z);
    assert_eq!(out.steps_taken, 0);
}

#[test]
fn latt_of_single_spike() {
    let mut abar = Array3::zeros((16, 16, 2));
    abar[[3, 4, 1]] = 0.9;
    let agg = AggregatedAttention { abar, t: 0 };
    let mask = Array2::from_elem((16, 16), true);
    assert!((latt(&agg, &[1], mask.view()).unwrap() - 0.1).abs() < 1e-15);
    let mut off = mask.clone();
    off[[3, 4]] = false;
    assert!((latt(&agg, &[1], off.view()).unwrap() - 1.0).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregated_tokens_sum_to_one(seed in any::<u64>(), tokens in 2usize..9, scale in 0.1f64..8.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = random_stack(&mut rng, tokens);
        let agg = aggregate_attention(&stack, &AggregationConfig { token_scale: scale, ..Default::default() }).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let s: f64 = (0..tokens).map(|k| agg.abar[[y, x, k]]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_size_is_monotone_in_activation(n1 in 0usize..256, n2 in 0usize..256, t in 1usize..200) {
        let st = SchedulerState::new(&SchedulerParams::default(), 200, 150, 64).unwrap();
        if n1 <= n2 {
            prop_assert!(step_size(&st, t, n1) <= step_size(&st, t, n2));
        }
    }

    #[test]
    fn activation_count_is_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0..1.0));
        let mask = Array2::from_shape_fn((16, 16), |_| rng.random_bool(0.7));
        let fg = mask.iter().filter(|&&m| m).count();
        let n = count_activated(map.view(), mask.view());
        prop_assert!(n <= fg);
        prop_assert!(fg == 0 || n < fg);
    }
}

#[test]
fn capture_attention_respects_token_count() {
    let b = toy_backbone();
    let p = prompt(&b);
    let st = b.capture_attention(&random_latent(&b, 3, 50), &p).unwrap();
    assert_eq!(st.tokens(), p.len());
}

#[test]
fn small_lambda_refinement_descends_monotonically() {
    let b = toy_backbone();
    let p = prompt(&b);
    let th = RefinementThresholds { max_inner_iterations: 5, ..Default::default() };
    for (seed, t) in [(0u64, 150usize), (1, 120), (2, 90), (3, 60), (4, 30)] {
        let z = random_latent(&b, seed, t);
        let mask = ForegroundMask::all_foreground(64, 64, b.latent_side());
        let st = SchedulerState::new(&SchedulerParams { lambda: 0.01, ..Default::default() }, 200, 150, 20).unwrap();
        let out = optimize_step(&b, &z, &p, &mask, &st, InnerPlan::Refine { threshold: 0.999 }, 20, &th, &AggregationConfig::default()).unwrap();
        assert_eq!(out.steps_taken, 5, "seed {seed}");
        assert_eq!(out.losses.len(), 6);
        for w in out.losses.windows(2) {
            assert!(w[1] <= w[0], "seed {seed}: {:?}", out.losses);
        }
        assert!(out.losses[5] < out.losses[0], "seed {seed}: {:?}", out.losses);
    }
}
