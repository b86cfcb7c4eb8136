//! Adapter training on annotated samples, memory-bank construction and
//! evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{adapter_container, adapter_from_container, Container};
use crate::data::{GeneratedEntry, LoadedSample};
use crate::grid::{bilinear_resize, bilinear_resize_adjoint};
use crate::losses::{total_loss_grad, LossConfig, LossTerms};
use crate::metrics::{score_category, MetricSet, ScoredSample};
use crate::pipeline::mix_seed;
use crate::types::ImageSample;
use crate::vlad::{
    adapt_features, class_text_features, detect_features, normalize_rows, DetectorConfig, ExtractedFeatures,
    FeatureAdapter, FeatureExtractor, MemoryBank, StageInfo,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam: AdamParams,
    /// Side images are resized to before feature extraction.
    pub input_side: usize,
    pub loss: LossConfig,
    pub detector: DetectorConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-4,
            adam: AdamParams::default(),
            input_side: 512,
            loss: LossConfig::default(),
            detector: DetectorConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("must be finite and >= 0, got {}", self.lr)));
        }
        self.loss.validate()
    }
}

/// Cosine annealing from `base` at epoch 0 to 0 at the last epoch.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return base;
    }
    base * (1.0 + (std::f64::consts::PI * epoch as f64 / (epochs - 1) as f64).cos()) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, p: &AdamParams) {
        self.step += 1;
        let bc1 = 1.0 - p.beta1.powi(self.step as i32);
        let bc2 = 1.0 - p.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = p.beta1 * self.m[i] + (1.0 - p.beta1) * grad[i];
            self.v[i] = p.beta2 * self.v[i] + (1.0 - p.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + p.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub focal: f64,
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: ImageSample,
    pub y_img: u8,
    pub y_pix: Array2<f64>,
    /// Samples borrowed from another dataset; used for training only.
    pub auxiliary: bool,
}

impl From<GeneratedEntry> for TrainSample {
    fn from(e: GeneratedEntry) -> Self {
        Self { image: e.image, y_img: e.record.y_img, y_pix: e.y_pix, auxiliary: false }
    }
}

/// Appends auxiliary samples, tagged so evaluation code can skip them.
pub fn with_auxiliary(mut main: Vec<TrainSample>, aux: Vec<TrainSample>) -> Vec<TrainSample> {
    main.extend(aux.into_iter().map(|s| TrainSample { auxiliary: true, ..s }));
    main
}

/// Batches for one epoch. Normals and anomalies are shuffled separately;
/// each batch first receives one normal (cycling when there are fewer
/// normals than batches), then the rest fill batches in order.
pub fn make_batches(labels: &[u8], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let n = labels.len();
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xba7c_0000 + epoch as u64));
    let mut normals: Vec<usize> = (0..n).filter(|&i| labels[i] == 0).collect();
    let mut pool: Vec<usize> = (0..n).filter(|&i| labels[i] != 0).collect();
    normals.shuffle(&mut rng);
    let nb = n.div_ceil(batch_size);
    let mut batches: Vec<Vec<usize>> = vec![Vec::with_capacity(batch_size); nb];
    if !normals.is_empty() {
        for (b, batch) in batches.iter_mut().enumerate() {
            batch.push(normals[b % normals.len()]);
        }
        pool.extend(normals.iter().skip(nb));
    }
    pool.shuffle(&mut rng);
    let mut items = pool.into_iter();
    for batch in batches.iter_mut() {
        while batch.len() < batch_size {
            match items.next() {
                Some(i) => batch.push(i),
                None => break,
            }
        }
    }
    for (k, i) in items.enumerate() {
        batches[k % nb].push(i);
    }
    batches
}

/// Training forward pass: `m = M_VL / |H|` at full resolution and
/// `p_img = max(m)`.
fn forward(
    feats: &ExtractedFeatures,
    adapter: &FeatureAdapter,
    t_diff: &Array1<f64>,
    temperature: f64,
    stages: &[StageInfo],
    height: usize,
    width: usize,
) -> (Vec<StageCache>, Array2<f64>) {
    let scale = 1.0 / stages.len() as f64;
    let mut m = Array2::zeros((height, width));
    let mut caches = Vec::with_capacity(stages.len());
    for (i, st) in stages.iter().enumerate() {
        let a = adapter.apply(i, feats.patches[i].view());
        let norms: Array1<f64> = a.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
        let u = &a / &norms.view().insert_axis(Axis(1));
        let p = u.dot(t_diff).mapv(|s| 1.0 / (1.0 + (-temperature * s).exp()));
        let grid = p.view().into_shape_with_order(st.grid).expect("one value per patch");
        m.scaled_add(scale, &bilinear_resize(grid, height, width));
        caches.push(StageCache { u, norms, p });
    }
    (caches, m)
}

struct StageCache {
    u: Array2<f64>,
    norms: Array1<f64>,
    p: Array1<f64>,
}

fn argmax(m: &Array2<f64>) -> (usize, usize) {
    let mut best = ((0, 0), f64::NEG_INFINITY);
    for (ix, &v) in m.indexed_iter() {
        if v > best.1 {
            best = (ix, v);
        }
    }
    best.0
}

/// Loss terms of one sample and the gradient with respect to the adapter
/// parameters, flattened like [`FeatureAdapter::to_flat`].
pub fn sample_loss_grad(
    feats: &ExtractedFeatures,
    y_img: u8,
    y_pix: ArrayView2<f64>,
    adapter: &FeatureAdapter,
    f_text: ArrayView2<f64>,
    stages: &[StageInfo],
    cfg: &TrainConfig,
) -> Result<(LossTerms, Vec<f64>)> {
    let (h, w) = y_pix.dim();
    let text = normalize_rows(&f_text.to_owned());
    let t_diff = &text.row(1) - &text.row(0);
    let tau = cfg.detector.temperature;
    let (caches, m) = forward(feats, adapter, &t_diff, tau, stages, h, w);
    let peak = argmax(&m);
    let (terms, d_img, mut d_m) = total_loss_grad(y_img, m[peak], y_pix, m.view(), &cfg.loss)?;
    d_m[peak] += d_img;
    d_m /= stages.len() as f64;

    let mut grad = Vec::with_capacity(adapter.parameter_count());
    for (i, (st, c)) in stages.iter().zip(&caches).enumerate() {
        let g = bilinear_resize_adjoint(d_m.view(), st.grid.0, st.grid.1);
        let g = g.into_shape_with_order(st.patches()).expect("one value per patch");
        let d_s = &g * &c.p.mapv(|p| p * (1.0 - p)) * tau;
        // d_u = d_s t_diff^T; d_a = (d_u - u (u . d_u)) / |a|
        let ut = c.u.dot(&t_diff);
        let mut d_a = Array2::zeros(c.u.dim());
        for (r, mut row) in d_a.rows_mut().into_iter().enumerate() {
            let k = d_s[r] / c.norms[r];
            row.assign(&((&t_diff - &(&c.u.row(r) * ut[r])) * k));
        }
        let d_w = d_a.t().dot(&feats.patches[i]);
        grad.extend(d_w.iter());
        grad.extend(d_a.sum_axis(Axis(0)).iter());
    }
    Ok((terms, grad))
}

/// Full training state, enough to resume bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adapter: FeatureAdapter,
    pub adam: AdamState,
    pub next_epoch: usize,
    pub log: Vec<EpochLog>,
}

pub const TRAIN_STATE_KIND: &str = "train_state";

impl TrainState {
    pub fn fresh(adapter: FeatureAdapter) -> Self {
        let n = adapter.parameter_count();
        Self { adapter, adam: AdamState::new(n), next_epoch: 0, log: Vec::new() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = adapter_container(&self.adapter);
        c.kind = TRAIN_STATE_KIND.into();
        c.extra["next_epoch"] = self.next_epoch.into();
        c.extra["adam_step"] = self.adam.step.into();
        c.extra["log"] = serde_json::to_value(&self.log)?;
        c.push("adam.m", vec![self.adam.m.len()], self.adam.m.clone());
        c.push("adam.v", vec![self.adam.v.len()], self.adam.v.clone());
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?.expect_kind(TRAIN_STATE_KIND, path)?;
        let bad = |what: &str| Error::Checkpoint { path: path.to_path_buf(), reason: format!("missing {what}") };
        let adapter = adapter_from_container(&c, path)?;
        let m = c.tensor("adam.m").ok_or_else(|| bad("adam.m"))?.data.clone();
        let v = c.tensor("adam.v").ok_or_else(|| bad("adam.v"))?.data.clone();
        let step = c.extra.get("adam_step").and_then(|v| v.as_u64()).ok_or_else(|| bad("adam_step"))?;
        let next_epoch = c.extra.get("next_epoch").and_then(|v| v.as_u64()).ok_or_else(|| bad("next_epoch"))? as usize;
        let log = serde_json::from_value(c.extra.get("log").cloned().ok_or_else(|| bad("log"))?)?;
        Ok(Self { adapter, adam: AdamState { m, v, step }, next_epoch, log })
    }
}

/// What the per-epoch hook asks the trainer to do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Continue {
    Yes,
    Stop,
}

/// Trains from `state` (or a fresh adapter seeded by `cfg.seed`) through
/// `cfg.epochs`. `on_epoch` runs after every finished epoch.
pub fn train_with<E: FeatureExtractor + ?Sized>(
    samples: &[TrainSample],
    extractor: &E,
    cfg: &TrainConfig,
    state: Option<TrainState>,
    mut on_epoch: impl FnMut(&TrainState) -> Result<Continue>,
) -> Result<TrainState> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("dataset", "no training samples"));
    }
    if samples.iter().all(|s| s.y_img == samples[0].y_img) {
        return Err(Error::invalid("dataset", "training needs both normal and anomalous samples"));
    }
    let stages = extractor.stages();
    let mut state = match state {
        Some(s) => s,
        None => TrainState::fresh(FeatureAdapter::init(stages, extractor.embed_dim(), cfg.seed)?),
    };
    state.adapter.check_compatible(stages, extractor.embed_dim())?;

    let feats: Vec<ExtractedFeatures> = samples.par_iter().map(|s| extractor.extract(&s.image)).collect::<Result<_>>()?;
    let mut texts: BTreeMap<&str, Array2<f64>> = BTreeMap::new();
    for s in samples {
        if !texts.contains_key(s.image.category.as_str()) {
            texts.insert(&s.image.category, class_text_features(extractor, &s.image.category)?);
        }
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.y_img).collect();

    while state.next_epoch < cfg.epochs {
        let epoch = state.next_epoch;
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut sums = [0.0; 3];
        let mut count = 0usize;
        let mut params = state.adapter.to_flat();
        let last_good = state.adapter.clone();
        for batch in make_batches(&labels, cfg.batch_size, cfg.seed, epoch) {
            let adapter = &state.adapter;
            let results: Vec<Result<(LossTerms, Vec<f64>)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let text = &texts[s.image.category.as_str()];
                    sample_loss_grad(&feats[i], s.y_img, s.y_pix.view(), adapter, text.view(), stages, cfg)
                })
                .collect();
            let mut grad = vec![0.0; params.len()];
            for r in results {
                let (terms, g) = r?;
                if !terms.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Diverged { epoch, last_good: Box::new(last_good) });
                }
                sums[0] += terms.focal;
                sums[1] += terms.bce;
                sums[2] += terms.dice;
                count += 1;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            state.adam.update(&mut params, &grad, lr, &cfg.adam);
            state.adapter.set_flat(&params)?;
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch, last_good: Box::new(last_good) });
        }
        let n = count as f64;
        let t = LossTerms::compose(sums[0] / n, sums[1] / n, sums[2] / n, cfg.loss.omega);
        state.log.push(EpochLog { epoch, lr, focal: t.focal, bce: t.bce, dice: t.dice, total: t.total });
        state.next_epoch += 1;
        if on_epoch(&state)? == Continue::Stop {
            break;
        }
    }
    Ok(state)
}

pub fn train<E: FeatureExtractor + ?Sized>(samples: &[TrainSample], extractor: &E, cfg: &TrainConfig) -> Result<TrainState> {
    train_with(samples, extractor, cfg, None, |_| Ok(Continue::Yes))
}

/// Training log as JSON lines.
pub fn log_jsonl(log: &[EpochLog]) -> Result<String> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

/// Memory bank of the adapted patch tokens of `normals`.
pub fn build_bank<E: FeatureExtractor + ?Sized>(normals: &[ImageSample], extractor: &E, adapter: &FeatureAdapter) -> Result<MemoryBank> {
    if normals.is_empty() {
        return Err(Error::invalid("normals", "empty selection"));
    }
    adapter.check_compatible(extractor.stages(), extractor.embed_dim())?;
    let adapted = normals
        .iter()
        .map(|img| adapt_features(&extractor.extract(img)?, extractor.stages(), adapter))
        .collect::<Result<Vec<_>>>()?;
    MemoryBank::from_adapted(adapter.stage_ids.clone(), &adapted)
}

/// Anything that maps an image to an image score and a pixel map.
pub trait Scorer: Sync {
    fn score(&self, img: &ImageSample) -> Result<(f64, Array2<f64>)>;
}

pub struct VladScorer<'a, E: FeatureExtractor + ?Sized> {
    pub extractor: &'a E,
    pub adapter: &'a FeatureAdapter,
    pub bank: Option<&'a MemoryBank>,
    pub text: Array2<f64>,
    pub cfg: DetectorConfig,
}

impl<'a, E: FeatureExtractor + ?Sized> VladScorer<'a, E> {
    pub fn new(
        extractor: &'a E,
        adapter: &'a FeatureAdapter,
        bank: Option<&'a MemoryBank>,
        category: &str,
        cfg: DetectorConfig,
    ) -> Result<Self> {
        adapter.check_compatible(extractor.stages(), extractor.embed_dim())?;
        Ok(Self { extractor, adapter, bank, text: class_text_features(extractor, category)?, cfg })
    }
}

impl<E: FeatureExtractor + ?Sized> Scorer for VladScorer<'_, E> {
    fn score(&self, img: &ImageSample) -> Result<(f64, Array2<f64>)> {
        let feats = self.extractor.extract(img)?;
        let r = detect_features(&feats, self.extractor.stages(), self.adapter, self.bank, self.text.view(), &self.cfg, img.height(), img.width())?;
        Ok((r.s_img, r.m_pix))
    }
}

/// Scores every test sample and computes the five metrics.
pub fn evaluate_category<S: Scorer + ?Sized>(scorer: &S, test: &[LoadedSample], fpr_limit: f64) -> Result<MetricSet> {
    let scored = test
        .par_iter()
        .map(|s| {
            let (score, map) = scorer.score(&s.image)?;
            Ok(ScoredSample { score, map, label: s.y_img == 1, gt: s.gt.mapv(|v| v >= 0.5) })
        })
        .collect::<Result<Vec<_>>>()?;
    score_category(&scored, fpr_limit)
}
