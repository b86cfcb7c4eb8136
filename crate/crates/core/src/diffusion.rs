//! Latent denoising backbone abstraction.
//!
//! [`Backbone`] is the adapter contract a pretrained latent diffusion model
//! has to satisfy: encode/decode, one ancestral denoise step, capture of the
//! cross-attention probability maps (`softmax(QK^T/sqrt(d))`, before the
//! value projection) and a vector-Jacobian product from those maps back to
//! the latent. [`ToyBackbone`] is a small, fully explicit instance used by
//! the test-suite and the desk-scale pipeline.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::grid::area_resize;
use crate::types::{
    AttentionStack, ImageSample, LatentState, PromptSpec, Token, Tokenizer, ATTENTION_SIDE,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaSchedule {
    Linear,
    ScaledLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: BetaSchedule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 200, beta_start: 1e-4, beta_end: 0.02, kind: BetaSchedule::Linear }
    }
}

/// DDPM forward process. `betas[t-1]` is the variance added at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.steps;
        if t == 0 {
            return Err(Error::invalid("steps", "must be positive"));
        }
        if !(cfg.beta_start > 0.0 && cfg.beta_end >= cfg.beta_start && cfg.beta_end < 1.0) {
            return Err(Error::invalid(
                "betas",
                format!("need 0 < start <= end < 1, got {} .. {}", cfg.beta_start, cfg.beta_end),
            ));
        }
        let lerp = |a: f64, b: f64, i: usize| {
            if t == 1 {
                a
            } else {
                a + (b - a) * i as f64 / (t - 1) as f64
            }
        };
        let betas: Vec<f64> = (0..t)
            .map(|i| match cfg.kind {
                BetaSchedule::Linear => lerp(cfg.beta_start, cfg.beta_end, i),
                BetaSchedule::ScaledLinear => lerp(cfg.beta_start.sqrt(), cfg.beta_end.sqrt(), i).powi(2),
            })
            .collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cumprod })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative signal fraction; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cumprod[t - 1]
        }
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }
}

/// Standard-normal array drawn from a ChaCha8 stream seeded by `seed`.
pub fn seeded_normal(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

/// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps(seed)`; `t = 0` returns `z0`.
pub fn forward_noise(schedule: &NoiseSchedule, z0: &Array3<f64>, t: usize, seed: u64) -> Result<Array3<f64>> {
    if t > schedule.steps() {
        return Err(Error::Range { what: "timestep", detail: format!("t={t} > T={}", schedule.steps()) });
    }
    if t == 0 {
        return Ok(z0.clone());
    }
    let ab = schedule.alpha_bar(t);
    let eps = seeded_normal(z0.dim(), seed);
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Scalar objective over captured attention maps, with its gradient with
/// respect to every map in the stack.
pub trait AttentionLoss {
    fn value_and_grad(&self, stack: &AttentionStack) -> Result<(f64, Vec<Array3<f64>>)>;
}

impl<F> AttentionLoss for F
where
    F: Fn(&AttentionStack) -> Result<(f64, Vec<Array3<f64>>)>,
{
    fn value_and_grad(&self, stack: &AttentionStack) -> Result<(f64, Vec<Array3<f64>>)> {
        self(stack)
    }
}

pub trait Backbone: Tokenizer {
    fn latent_channels(&self) -> usize;
    fn latent_side(&self) -> usize;
    fn schedule(&self) -> &NoiseSchedule;

    fn encode(&self, image: &ImageSample) -> Result<Array3<f64>>;
    /// Decodes to channel-last pixels in `[0, 1]` at `height x width`.
    fn decode(&self, z: &Array3<f64>, height: usize, width: usize) -> Result<Array3<f64>>;
    /// Per-token guidance embeddings, `N x D`.
    fn text_encode(&self, prompt: &PromptSpec) -> Result<Array2<f64>>;

    /// Attention maps produced by the denoiser at `z` without stepping.
    fn capture_attention(&self, z: &LatentState, prompt: &PromptSpec) -> Result<AttentionStack>;

    /// Pulls a gradient on the captured maps back to the latent.
    fn attention_vjp(&self, _z: &LatentState, _prompt: &PromptSpec, _grad: &[Array3<f64>]) -> Result<Array3<f64>> {
        Err(Error::Backbone("attention capture path is not differentiable (hooks not registered)".into()))
    }

    /// One ancestral step `z_t -> z_{t-1}`. Deterministic in
    /// `(z, prompt, noise_seed)`.
    fn denoise_step(
        &self,
        z: &LatentState,
        prompt: &PromptSpec,
        noise_seed: u64,
        capture: bool,
    ) -> Result<(LatentState, Option<AttentionStack>)>;
}

/// Value and latent gradient of `loss(attention(z))`.
pub fn grad_latt_wrt_latent<B: Backbone + ?Sized>(
    backbone: &B,
    z: &LatentState,
    prompt: &PromptSpec,
    loss: &dyn AttentionLoss,
) -> Result<(f64, Array3<f64>)> {
    let stack = backbone.capture_attention(z, prompt)?;
    let (value, grads) = loss.value_and_grad(&stack)?;
    if grads.len() != stack.maps.len() {
        return Err(Error::invalid("loss gradient", format!("{} maps for {} layers", grads.len(), stack.maps.len())));
    }
    let grad = backbone.attention_vjp(z, prompt, &grads)?;
    Ok((value, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBackboneConfig {
    pub latent_side: usize,
    pub channels: usize,
    pub token_limit: usize,
    pub weight_seed: u64,
    /// Width of the hidden, query and text-embedding spaces.
    pub hidden: usize,
    /// Prior variance of the lowest latent frequency.
    pub prior_variance: f64,
    /// Frequency (in DCT index units) where the prior variance has dropped
    /// to a quarter.
    pub prior_cutoff: f64,
    /// Scale of the attention-routed value injection into the clean-latent
    /// prediction.
    pub value_gain: f64,
    pub schedule: ScheduleConfig,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self {
            latent_side: 8,
            channels: 4,
            token_limit: 8,
            weight_seed: 0x5eed,
            hidden: 8,
            prior_variance: 16.0,
            prior_cutoff: 1.5,
            value_gain: 1.0,
            schedule: ScheduleConfig::default(),
        }
    }
}

const TOY_VOCAB: u32 = 4096;

/// Deterministic stand-in for a latent diffusion model.
///
/// * encoder: box-downsampled RGB mapped to `[-1, 1]`, extra channels carry
///   luma; decoder: the inverse map plus bilinear upsampling.
/// * denoiser: attention reads the clean-latent estimate `x0 = S_t z_t`,
///   where `S_t` is the exact posterior mean under a stationary Gaussian
///   prior (diagonal in the DCT basis). Features are `h = tanh(W1 x0 + b1)`
///   on the 16x16 grid (nearest-upsampled), followed by one cross-attention
///   `softmax(Wq h . (Wk e)^T / sqrt(d))` over token embeddings `e`. The
///   clean-latent prediction is `x0` plus the attention-weighted values
///   `sum_n A_n (Wv e_n)` minus their token mean, pooled back to latent
///   resolution.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    cfg: ToyBackboneConfig,
    schedule: NoiseSchedule,
    w1: Array2<f64>,
    b1: Array1<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    dct: Array2<f64>,
    prior: Array2<f64>,
}

struct LayerCache {
    side: usize,
    h: Array2<f64>,
    attn: Array2<f64>,
}

impl ToyBackbone {
    pub fn new(cfg: ToyBackboneConfig) -> Result<Self> {
        for (name, v) in [("latent_side", cfg.latent_side), ("token_limit", cfg.token_limit), ("hidden", cfg.hidden)] {
            if v < 2 {
                return Err(Error::invalid(name, format!("must be >= 2, got {v}")));
            }
        }
        if cfg.channels < 3 {
            return Err(Error::invalid("channels", format!("toy codec needs >= 3 channels, got {}", cfg.channels)));
        }
        let p = cfg.latent_side;
        if !(ATTENTION_SIDE.is_multiple_of(p) || p.is_multiple_of(ATTENTION_SIDE)) {
            return Err(Error::invalid("latent_side", format!("{p} must divide or be a multiple of {ATTENTION_SIDE}")));
        }
        if !(cfg.prior_variance > 0.0 && cfg.prior_cutoff > 0.0) {
            return Err(Error::invalid("prior", "variance and cutoff must be positive"));
        }
        let schedule = NoiseSchedule::new(&cfg.schedule)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.weight_seed);
        let d = cfg.hidden;
        let c = cfg.channels;
        let mut gauss = |shape: (usize, usize), std: f64| -> Array2<f64> {
            Array2::from_shape_simple_fn(shape, || { let v: f64 = StandardNormal.sample(&mut rng); std * v })
        };
        let w1 = gauss((d, c), (2.0 / c as f64).sqrt());
        let b1 = gauss((d, 1), 0.1).remove_axis(Axis(1));
        let wq = gauss((d, d), (2.0 / d as f64).sqrt());
        let wk = gauss((d, d), 2.0 / (d as f64).sqrt());
        let wv = gauss((c, d), 0.5 / (d as f64).sqrt());
        let dct = dct_matrix(p);
        let prior = Array2::from_shape_fn((p, p), |(u, v)| {
            let k2 = (u * u + v * v) as f64 / (cfg.prior_cutoff * cfg.prior_cutoff);
            cfg.prior_variance / (1.0 + k2).powi(2)
        });
        Ok(Self { cfg, schedule, w1, b1, wq, wk, wv, dct, prior })
    }

    pub fn config(&self) -> &ToyBackboneConfig {
        &self.cfg
    }

    fn token_embedding(&self, tok: &Token, position: usize) -> Array1<f64> {
        let d = self.cfg.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.weight_seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(tok.id as u64 + 1)));
        let mut e = Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut rng));
        for k in 0..d {
            e[k] += 0.1 * ((position as f64 + 1.0) * (k as f64 + 1.0)).sin();
        }
        e
    }

    fn check_prompt(&self, prompt: &PromptSpec) -> Result<()> {
        if prompt.len() > self.cfg.token_limit {
            return Err(Error::TokenLimit { tokens: prompt.len(), limit: self.cfg.token_limit });
        }
        if prompt.is_empty() {
            return Err(Error::invalid("prompt", "no tokens"));
        }
        Ok(())
    }

    fn check_latent(&self, z: &LatentState) -> Result<()> {
        let want = (self.cfg.channels, self.cfg.latent_side, self.cfg.latent_side);
        if z.z.dim() != want {
            return Err(Error::Shape { what: "latent", expected: vec![want.0, want.1, want.2], actual: z.z.shape().to_vec() });
        }
        Ok(())
    }

    /// Layer resolutions, attention resolution first.
    fn layer_sides(&self) -> Vec<usize> {
        let p = self.cfg.latent_side;
        if p == ATTENTION_SIDE {
            vec![ATTENTION_SIDE]
        } else {
            vec![ATTENTION_SIDE, p]
        }
    }

    /// Latent resampled to `side x side`, flattened to `(side^2, C)`.
    fn resample_latent(&self, z: &Array3<f64>, side: usize) -> Array2<f64> {
        let (c, p, _) = z.dim();
        let mut out = Array2::zeros((side * side, c));
        for y in 0..side {
            for x in 0..side {
                for ch in 0..c {
                    out[[y * side + x, ch]] = if side >= p {
                        let f = side / p;
                        z[[ch, y / f, x / f]]
                    } else {
                        let f = p / side;
                        z.slice(s![ch, y * f..(y + 1) * f, x * f..(x + 1) * f]).mean().unwrap()
                    };
                }
            }
        }
        out
    }

    fn resample_latent_adjoint(&self, grad: &Array2<f64>, side: usize) -> Array3<f64> {
        let (c, p) = (self.cfg.channels, self.cfg.latent_side);
        let mut out = Array3::zeros((c, p, p));
        for y in 0..side {
            for x in 0..side {
                for ch in 0..c {
                    let g = grad[[y * side + x, ch]];
                    if side >= p {
                        let f = side / p;
                        out[[ch, y / f, x / f]] += g;
                    } else {
                        let f = p / side;
                        let share = g / (f * f) as f64;
                        out.slice_mut(s![ch, y * f..(y + 1) * f, x * f..(x + 1) * f]).mapv_inplace(|v| v + share);
                    }
                }
            }
        }
        out
    }

    fn keys_values(&self, prompt: &PromptSpec) -> (Array2<f64>, Array2<f64>) {
        let e = self.embeddings(prompt);
        let keys = e.dot(&self.wk.t());
        (keys, e.dot(&self.wv.t()))
    }

    fn embeddings(&self, prompt: &PromptSpec) -> Array2<f64> {
        let n = prompt.len();
        let mut e = Array2::zeros((n, self.cfg.hidden));
        for (i, tok) in prompt.tokens.iter().enumerate() {
            e.row_mut(i).assign(&self.token_embedding(tok, i));
        }
        e
    }

    /// Latent the attention reads: the clean-latent estimate at `t`.
    fn read(&self, z: &Array3<f64>, t: usize) -> Array3<f64> {
        self.shrink(z, self.schedule.alpha_bar(t))
    }

    fn forward_layer(&self, z: &Array3<f64>, keys: &Array2<f64>, side: usize) -> LayerCache {
        let zin = self.resample_latent(z, side);
        let mut h = zin.dot(&self.w1.t());
        h += &self.b1;
        h.mapv_inplace(f64::tanh);
        let q = h.dot(&self.wq.t());
        let mut scores = q.dot(&keys.t()) / (self.cfg.hidden as f64).sqrt();
        for mut row in scores.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let total = row.sum();
            row /= total;
        }
        LayerCache { side, h, attn: scores }
    }

    fn backward_layer(&self, cache: &LayerCache, keys: &Array2<f64>, grad_attn: &Array2<f64>) -> Array3<f64> {
        let a = &cache.attn;
        let mut ds = a * grad_attn;
        let row_dot = ds.sum_axis(Axis(1));
        for (mut row, (arow, dot)) in ds.rows_mut().into_iter().zip(a.rows().into_iter().zip(row_dot.iter())) {
            row.zip_mut_with(&arow, |g, &p| *g -= p * dot);
        }
        let dq = ds.dot(keys) / (self.cfg.hidden as f64).sqrt();
        let dh = dq.dot(&self.wq);
        let dpre = dh * cache.h.mapv(|v| 1.0 - v * v);
        let dzin = dpre.dot(&self.w1);
        self.resample_latent_adjoint(&dzin, cache.side)
    }

    fn to_map(&self, cache: &LayerCache) -> Array3<f64> {
        let n = cache.attn.ncols();
        cache.attn.clone().into_shape_with_order((cache.side, cache.side, n)).expect("contiguous attention")
    }

    fn layer_name(side: usize) -> String {
        format!("cross{side}")
    }

    /// Posterior mean of the clean latent under the Gaussian prior.
    fn shrink(&self, z: &Array3<f64>, alpha_bar: f64) -> Array3<f64> {
        let mut out = Array3::zeros(z.dim());
        let root = alpha_bar.sqrt();
        let gain = self.prior.mapv(|v| root * v / (alpha_bar * v + 1.0 - alpha_bar));
        for (ch, plane) in z.outer_iter().enumerate() {
            let coef = self.dct.dot(&plane).dot(&self.dct.t()) * &gain;
            out.index_axis_mut(Axis(0), ch).assign(&self.dct.t().dot(&coef).dot(&self.dct));
        }
        out
    }

    /// Attention-weighted values minus their token mean, pooled to latent
    /// resolution.
    fn value_injection(&self, cache: &LayerCache, values: &Array2<f64>) -> Array3<f64> {
        let mean_v = values.mean_axis(Axis(0)).unwrap();
        let mut routed = cache.attn.dot(values);
        routed -= &mean_v;
        let side = cache.side;
        let (c, p) = (self.cfg.channels, self.cfg.latent_side);
        let grid = routed.into_shape_with_order((side, side, c)).expect("contiguous").permuted_axes([2, 0, 1]);
        let mut out = Array3::zeros((c, p, p));
        for ch in 0..c {
            let plane = grid.index_axis(Axis(0), ch).to_owned();
            out.index_axis_mut(Axis(0), ch).assign(&area_resize(plane.view(), p, p));
        }
        out
    }
}

/// Orthonormal DCT-II matrix.
fn dct_matrix(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(k, i)| {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        scale * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos()
    })
}

pub(crate) fn fnv1a(s: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in s.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

impl Tokenizer for ToyBackbone {
    /// One token per whitespace word; ids hashed from the lower-cased word.
    fn tokenize(&self, text: &str) -> Vec<Token> {
        text.split_whitespace()
            .enumerate()
            .map(|(word, w)| Token { id: fnv1a(&crate::types::normalize_word(w)) % TOY_VOCAB, word })
            .collect()
    }

    fn token_limit(&self) -> usize {
        self.cfg.token_limit
    }
}

impl Backbone for ToyBackbone {
    fn latent_channels(&self) -> usize {
        self.cfg.channels
    }

    fn latent_side(&self) -> usize {
        self.cfg.latent_side
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn encode(&self, image: &ImageSample) -> Result<Array3<f64>> {
        let p = self.cfg.latent_side;
        let c = self.cfg.channels;
        let rgb: Vec<Array2<f64>> = (0..3)
            .map(|ch| area_resize(image.pixels.index_axis(Axis(2), ch), p, p))
            .collect();
        let luma = &rgb[0] * 0.299 + &rgb[1] * 0.587 + &rgb[2] * 0.114;
        let mut z = Array3::zeros((c, p, p));
        for (ch, mut plane) in z.outer_iter_mut().enumerate() {
            let src = rgb.get(ch).unwrap_or(&luma);
            plane.assign(&src.mapv(|v| 2.0 * v - 1.0));
        }
        Ok(z)
    }

    fn decode(&self, z: &Array3<f64>, height: usize, width: usize) -> Result<Array3<f64>> {
        let (c, p, q) = z.dim();
        if c != self.cfg.channels || p != self.cfg.latent_side || q != p {
            return Err(Error::Shape { what: "latent", expected: vec![self.cfg.channels, self.cfg.latent_side, self.cfg.latent_side], actual: vec![c, p, q] });
        }
        let mut out = Array3::zeros((height, width, 3));
        for ch in 0..3 {
            let plane = z.index_axis(Axis(0), ch).mapv(|v| (v + 1.0) / 2.0);
            let up = crate::grid::bilinear_resize(plane.view(), height, width);
            out.index_axis_mut(Axis(2), ch).assign(&up.mapv(|v| v.clamp(0.0, 1.0)));
        }
        Ok(out)
    }

    fn text_encode(&self, prompt: &PromptSpec) -> Result<Array2<f64>> {
        self.check_prompt(prompt)?;
        Ok(self.embeddings(prompt))
    }

    fn capture_attention(&self, z: &LatentState, prompt: &PromptSpec) -> Result<AttentionStack> {
        self.check_prompt(prompt)?;
        self.check_latent(z)?;
        let (keys, _) = self.keys_values(prompt);
        let sides = self.layer_sides();
        let zr = self.read(&z.z, z.t);
        let maps = sides.iter().map(|&side| self.to_map(&self.forward_layer(&zr, &keys, side))).collect();
        AttentionStack::new(maps, sides.iter().map(|&s| Self::layer_name(s)).collect(), z.t, prompt.len())
    }

    fn attention_vjp(&self, z: &LatentState, prompt: &PromptSpec, grad: &[Array3<f64>]) -> Result<Array3<f64>> {
        self.check_prompt(prompt)?;
        self.check_latent(z)?;
        let sides = self.layer_sides();
        if grad.len() != sides.len() {
            return Err(Error::invalid("grad", format!("{} maps for {} layers", grad.len(), sides.len())));
        }
        let (keys, _) = self.keys_values(prompt);
        let n = prompt.len();
        let zr = self.read(&z.z, z.t);
        let mut total = Array3::zeros(z.z.dim());
        for (&side, g) in sides.iter().zip(grad) {
            if g.dim() != (side, side, n) {
                return Err(Error::Shape { what: "attention gradient", expected: vec![side, side, n], actual: g.shape().to_vec() });
            }
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let cache = self.forward_layer(&zr, &keys, side);
            let flat = g.to_owned().into_shape_with_order((side * side, n)).expect("contiguous");
            total += &self.backward_layer(&cache, &keys, &flat);
        }
        // shrink is self-adjoint, so the read step's VJP is shrink again.
        Ok(self.shrink(&total, self.schedule.alpha_bar(z.t)))
    }

    fn denoise_step(
        &self,
        z: &LatentState,
        prompt: &PromptSpec,
        noise_seed: u64,
        capture: bool,
    ) -> Result<(LatentState, Option<AttentionStack>)> {
        if z.t == 0 {
            return Err(Error::Range { what: "timestep", detail: "cannot denoise below t=0".into() });
        }
        self.check_prompt(prompt)?;
        self.check_latent(z)?;
        let t = z.t;
        let sched = &self.schedule;
        let (keys, values) = self.keys_values(prompt);
        let zr = self.read(&z.z, z.t);
        let caches: Vec<LayerCache> = self.layer_sides().iter().map(|&s| self.forward_layer(&zr, &keys, s)).collect();

        let ab_t = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t - 1);
        let beta = sched.beta(t);
        let mut x0 = self.shrink(&z.z, ab_t);
        x0.scaled_add(self.cfg.value_gain, &self.value_injection(&caches[0], &values));

        let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let c1 = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let mut next = x0 * c0 + &z.z * c1;
        if t > 1 {
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt();
            let noise = seeded_normal(next.dim(), noise_seed);
            next.scaled_add(sigma, &noise);
        }
        let stack = if capture {
            let sides = self.layer_sides();
            let maps = caches.iter().map(|c| self.to_map(c)).collect();
            Some(AttentionStack::new(maps, sides.iter().map(|&s| Self::layer_name(s)).collect(), t, prompt.len())?)
        } else {
            None
        };
        Ok((LatentState::new(next, t - 1, z.total_steps)?, stack))
    }
}
