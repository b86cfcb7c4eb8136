//! Mask-guided attention optimisation.
//!
//! The 16x16 cross-attention maps of one step are averaged, normalised over
//! tokens, smoothed per token, and the anomaly-token map is pushed up inside
//! the foreground mask by gradient steps on the latent. Step size follows
//! `alpha_t = lambda (1 + delta_t t) n_t / n_start`, where `n_t` counts
//! foreground pixels above the foreground mean, and optimisation stops once
//! the attention has localised.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::diffusion::{grad_latt_wrt_latent, AttentionLoss, Backbone};
use crate::grid::GaussianKernel;
use crate::types::{AttentionStack, ForegroundMask, LatentState, PromptSpec, ATTENTION_SIDE};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationConfig {
    pub kernel_size: usize,
    pub sigma: f64,
    /// Multiplier applied to the averaged maps before the token softmax.
    pub token_scale: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self { kernel_size: 3, sigma: 0.5, token_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedAttention {
    /// `16 x 16 x N`.
    pub abar: Array3<f64>,
    pub t: usize,
}

impl AggregatedAttention {
    /// Mean of the maps at `j_set`, i.e. the anomaly-token map.
    pub fn token_map(&self, j_set: &[usize]) -> Result<Array2<f64>> {
        if j_set.is_empty() {
            return Err(Error::invalid("j_set", "no anomaly tokens"));
        }
        let n = self.abar.dim().2;
        let mut out = Array2::zeros((self.abar.dim().0, self.abar.dim().1));
        for &j in j_set {
            if j >= n {
                return Err(Error::invalid("j_set", format!("token {j} >= {n}")));
            }
            out += &self.abar.index_axis(Axis(2), j);
        }
        Ok(out / j_set.len() as f64)
    }
}

struct AggregateCache {
    /// token softmax before smoothing, `16 x 16 x N`
    probs: Array3<f64>,
    used: Vec<usize>,
}

fn aggregate_with_cache(stack: &AttentionStack, cfg: &AggregationConfig) -> Result<(AggregatedAttention, AggregateCache)> {
    let used: Vec<usize> = stack
        .maps
        .iter()
        .enumerate()
        .filter(|(_, m)| m.dim().0 == ATTENTION_SIDE)
        .map(|(i, _)| i)
        .collect();
    if used.is_empty() {
        return Err(Error::invalid("stack", format!("no {ATTENTION_SIDE}x{ATTENTION_SIDE} attention maps")));
    }
    let kernel = GaussianKernel::new(cfg.kernel_size, cfg.sigma)?;
    let mut mean = Array3::<f64>::zeros(stack.maps[used[0]].dim());
    for &i in &used {
        mean += &stack.maps[i];
    }
    mean /= used.len() as f64;
    let mut probs = mean * cfg.token_scale;
    for mut lane in probs.lanes_mut(Axis(2)) {
        let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - m).exp());
        let total = lane.sum();
        lane /= total;
    }
    let mut abar = Array3::zeros(probs.dim());
    for (j, plane) in probs.axis_iter(Axis(2)).enumerate() {
        abar.index_axis_mut(Axis(2), j).assign(&kernel.smooth(plane));
    }
    Ok((AggregatedAttention { abar, t: stack.t }, AggregateCache { probs, used }))
}

/// Mean over the 16x16 maps, token softmax, then per-token Gaussian smoothing.
pub fn aggregate_attention(stack: &AttentionStack, cfg: &AggregationConfig) -> Result<AggregatedAttention> {
    aggregate_with_cache(stack, cfg).map(|(a, _)| a)
}

fn check_mask16(mask16: ArrayView2<bool>, map: ArrayView2<f64>) -> Result<()> {
    if mask16.dim() != map.dim() {
        return Err(Error::Shape { what: "mask16", expected: map.shape().to_vec(), actual: mask16.shape().to_vec() });
    }
    if !mask16.iter().any(|&b| b) {
        return Err(Error::invalid("mask16", "no foreground pixel"));
    }
    Ok(())
}

fn masked_argmax(map: ArrayView2<f64>, mask16: ArrayView2<bool>) -> ((usize, usize), f64) {
    let mut best = ((0, 0), f64::NEG_INFINITY);
    for ((idx, &v), &m) in map.indexed_iter().zip(mask16.iter()) {
        if m && v > best.1 {
            best = (idx, v);
        }
    }
    best
}

/// `1 - max(anomaly map within the mask)`.
pub fn latt(abar: &AggregatedAttention, j_set: &[usize], mask16: ArrayView2<bool>) -> Result<f64> {
    let map = abar.token_map(j_set)?;
    check_mask16(mask16, map.view())?;
    Ok(1.0 - masked_argmax(map.view(), mask16).1)
}

/// Foreground pixels strictly above the foreground mean.
pub fn count_activated(map: ArrayView2<f64>, mask16: ArrayView2<bool>) -> usize {
    let fg: Vec<f64> = map.iter().zip(mask16.iter()).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    if fg.is_empty() {
        return 0;
    }
    let mean = fg.iter().sum::<f64>() / fg.len() as f64;
    // summation rounding must not make a constant map look activated
    let cut = mean + 1e-12 * mean.abs();
    fg.iter().filter(|&&v| v > cut).count()
}

/// [`latt`] as a differentiable objective over an attention stack.
#[derive(Debug, Clone)]
pub struct LattLoss<'a> {
    pub cfg: &'a AggregationConfig,
    pub j_set: &'a [usize],
    pub mask16: ArrayView2<'a, bool>,
}

impl LattLoss<'_> {
    /// Loss value together with the aggregated attention it was computed on.
    pub fn evaluate(&self, stack: &AttentionStack) -> Result<(f64, AggregatedAttention)> {
        let agg = aggregate_attention(stack, self.cfg)?;
        let value = latt(&agg, self.j_set, self.mask16)?;
        Ok((value, agg))
    }
}

impl AttentionLoss for LattLoss<'_> {
    fn value_and_grad(&self, stack: &AttentionStack) -> Result<(f64, Vec<Array3<f64>>)> {
        let (agg, cache) = aggregate_with_cache(stack, self.cfg)?;
        let map = agg.token_map(self.j_set)?;
        check_mask16(self.mask16, map.view())?;
        let ((py, px), best) = masked_argmax(map.view(), self.mask16);

        let kernel = GaussianKernel::new(self.cfg.kernel_size, self.cfg.sigma)?;
        let (h, w, n) = cache.probs.dim();
        let mut d_smoothed = Array2::zeros((h, w));
        d_smoothed[[py, px]] = -1.0 / self.j_set.len() as f64;
        let d_token = kernel.smooth_adjoint(d_smoothed.view());

        let mut d_probs = Array3::<f64>::zeros((h, w, n));
        for &j in self.j_set {
            let mut plane = d_probs.index_axis_mut(Axis(2), j);
            plane += &d_token;
        }
        // softmax backward along tokens, then the pre-softmax scale
        let mut d_mean = Array3::<f64>::zeros((h, w, n));
        Zip::from(d_mean.lanes_mut(Axis(2)))
            .and(cache.probs.lanes(Axis(2)))
            .and(d_probs.lanes(Axis(2)))
            .for_each(|mut out, p, g| {
                let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                for k in 0..n {
                    out[k] = self.cfg.token_scale * p[k] * (g[k] - dot);
                }
            });
        let share = 1.0 / cache.used.len() as f64;
        let grads = stack
            .maps
            .iter()
            .enumerate()
            .map(|(i, m)| if cache.used.contains(&i) { &d_mean * share } else { Array3::zeros(m.dim()) })
            .collect();
        Ok((1.0 - best, grads))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerParams {
    pub lambda: f64,
    /// Defaults to `1 / T` when unset.
    pub delta_t: Option<f64>,
    pub min_pixels: usize,
    pub max_pixels_for_stop: usize,
    pub warmup_steps: usize,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        Self { lambda: 10.0, delta_t: None, min_pixels: 10, max_pixels_for_stop: 50, warmup_steps: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    pub lambda: f64,
    pub delta_t: f64,
    pub n_start: usize,
    pub t_start: usize,
    pub min_pixels: usize,
    pub max_pixels_for_stop: usize,
    pub warmup_steps: usize,
    pub stopped: bool,
}

impl SchedulerState {
    /// `n_start` of zero is clamped to one.
    pub fn new(params: &SchedulerParams, total_steps: usize, t_start: usize, n_start: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::invalid("total_steps", "must be positive"));
        }
        let delta_t = params.delta_t.unwrap_or(1.0 / total_steps as f64);
        if !(delta_t > 0.0 && delta_t <= 1.0) {
            return Err(Error::invalid("delta_t", format!("must be in (0, 1], got {delta_t}")));
        }
        if !params.lambda.is_finite() || params.lambda < 0.0 {
            return Err(Error::invalid("lambda", format!("must be finite and >= 0, got {}", params.lambda)));
        }
        Ok(Self {
            lambda: params.lambda,
            delta_t,
            n_start: n_start.max(1),
            t_start,
            min_pixels: params.min_pixels,
            max_pixels_for_stop: params.max_pixels_for_stop,
            warmup_steps: params.warmup_steps,
            stopped: false,
        })
    }
}

/// `lambda (1 + delta_t t) n_t / n_start`.
pub fn step_size(state: &SchedulerState, t: usize, n_t: usize) -> f64 {
    state.lambda * (1.0 + state.delta_t * t as f64) * (n_t as f64 / state.n_start as f64)
}

/// Latched early-stop rule: true once `steps_done >= warmup` and
/// `min_pixels < n_t < max_pixels_for_stop`.
pub fn should_stop(state: &mut SchedulerState, steps_done: usize, n_t: usize) -> bool {
    if !state.stopped
        && steps_done >= state.warmup_steps
        && state.min_pixels < n_t
        && n_t < state.max_pixels_for_stop
    {
        state.stopped = true;
    }
    state.stopped
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementThresholds {
    pub thresholds: Vec<f64>,
    /// Fractions of the optimisation window at which each threshold applies.
    pub checkpoints: Vec<f64>,
    pub max_inner_iterations: usize,
}

impl Default for RefinementThresholds {
    fn default() -> Self {
        Self { thresholds: vec![0.05, 0.5, 0.8], checkpoints: vec![0.25, 0.5, 0.75], max_inner_iterations: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerPlan {
    /// One gradient step.
    Single,
    /// Repeat gradient steps until the in-mask maximum reaches the threshold.
    Refine { threshold: f64 },
}

impl RefinementThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.len() != self.checkpoints.len() {
            return Err(Error::invalid("thresholds", "one checkpoint per threshold required"));
        }
        if self.thresholds.iter().any(|&v| !(v > 0.0 && v < 1.0)) || self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("thresholds", format!("must be strictly increasing in (0, 1): {:?}", self.thresholds)));
        }
        if self.checkpoints.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::invalid("checkpoints", "fractions must be in [0, 1]"));
        }
        Ok(())
    }

    /// What to do at denoise step `steps_done` of a `window`-step run.
    pub fn plan(&self, steps_done: usize, window: usize) -> InnerPlan {
        self.checkpoints
            .iter()
            .zip(&self.thresholds)
            .filter(|(c, _)| (*c * window as f64).round() as usize == steps_done)
            .map(|(_, &threshold)| threshold)
            .fold(None, |acc: Option<f64>, th| Some(acc.map_or(th, |a| a.max(th))))
            .map_or(InnerPlan::Single, |threshold| InnerPlan::Refine { threshold })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub latent: LatentState,
    pub alpha: f64,
    /// Loss before each gradient step, plus the loss after the last one.
    pub losses: Vec<f64>,
    pub steps_taken: usize,
}

/// Gradient steps `z <- z - alpha_t (grad L_att * mask_lat)` at fixed `t`.
///
/// Entries outside `mask_lat` are never written.
#[allow(clippy::too_many_arguments)]
pub fn optimize_step<B: Backbone + ?Sized>(
    backbone: &B,
    z: &LatentState,
    prompt: &PromptSpec,
    mask: &ForegroundMask,
    state: &SchedulerState,
    plan: InnerPlan,
    n_t: usize,
    thresholds: &RefinementThresholds,
    agg: &AggregationConfig,
) -> Result<OptimizeOutcome> {
    if state.stopped {
        return Err(Error::invalid("state", "optimisation already stopped"));
    }
    let alpha = step_size(state, z.t, n_t);
    let unchanged = |losses| OptimizeOutcome { latent: z.clone(), alpha, losses, steps_taken: 0 };
    if alpha == 0.0 || !mask.mask_lat.iter().any(|&b| b) {
        return Ok(unchanged(Vec::new()));
    }
    let (c, p, q) = z.z.dim();
    if mask.mask_lat.dim() != (p, q) {
        return Err(Error::Shape { what: "mask_lat", expected: vec![p, q], actual: mask.mask_lat.shape().to_vec() });
    }
    let loss = LattLoss { cfg: agg, j_set: &prompt.anomaly_token_indices, mask16: mask.mask16.view() };
    let max_steps = match plan {
        InnerPlan::Single => 1,
        InnerPlan::Refine { .. } => thresholds.max_inner_iterations,
    };
    let mut current = z.clone();
    let mut losses = Vec::with_capacity(max_steps + 1);
    let mut steps_taken = 0;
    loop {
        let (value, grad) = grad_latt_wrt_latent(backbone, &current, prompt, &loss)?;
        losses.push(value);
        let reached = matches!(plan, InnerPlan::Refine { threshold } if 1.0 - value >= threshold);
        if reached || steps_taken == max_steps {
            break;
        }
        for ch in 0..c {
            Zip::from(current.z.index_axis_mut(Axis(0), ch))
                .and(grad.index_axis(Axis(0), ch))
                .and(&mask.mask_lat)
                .for_each(|v, &g, &m| {
                    if m {
                        *v -= alpha * g;
                    }
                });
        }
        steps_taken += 1;
    }
    if let Some((idx, _)) = current.z.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { what: "optimised latent", index: vec![idx.0, idx.1, idx.2] });
    }
    Ok(OptimizeOutcome { latent: current, alpha, losses, steps_taken })
}
