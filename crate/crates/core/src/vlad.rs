//! Vision-language anomaly detector: a frozen two-tower feature extractor,
//! a per-stage linear adapter, vision-language and vision-vision scoring,
//! and their sum.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::grid::{area_resize, bilinear_resize};
use crate::types::{normalize_word, ImageSample, CLASS_PLACEHOLDER};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageInfo {
    pub id: String,
    pub grid: (usize, usize),
    pub dim: usize,
}

impl StageInfo {
    pub fn patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Everything the detector needs from one image. Patch tokens are stored
/// row-major over the stage grid, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedFeatures {
    pub image_token: Array1<f64>,
    pub patches: Vec<Array2<f64>>,
}

pub trait FeatureExtractor: Sync {
    fn stages(&self) -> &[StageInfo];
    /// Dimension of the shared image/text embedding space.
    fn embed_dim(&self) -> usize;
    fn image_token(&self, img: &ImageSample) -> Result<Array1<f64>>;
    /// `H_i x W_i x C_i` tokens of stage `stage`.
    fn patch_tokens(&self, img: &ImageSample, stage: usize) -> Result<Array3<f64>>;
    /// `2 x C` text embedding, row 0 normal, row 1 abnormal.
    fn text_embed(&self, normal: &[String], abnormal: &[String]) -> Result<Array2<f64>>;

    fn extract(&self, img: &ImageSample) -> Result<ExtractedFeatures> {
        let patches = (0..self.stages().len())
            .map(|i| {
                let t = self.patch_tokens(img, i)?;
                let (h, w, c) = t.dim();
                Ok(t.into_shape_with_order((h * w, c)).expect("contiguous tokens"))
            })
            .collect::<Result<_>>()?;
        Ok(ExtractedFeatures { image_token: self.image_token(img)?, patches })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEnsemble {
    pub version: u32,
    pub normal: Vec<String>,
    pub abnormal: Vec<String>,
}

impl PromptEnsemble {
    pub fn builtin() -> Self {
        serde_json::from_str(include_str!("../resources/prompts_v1.json")).expect("bundled prompt ensemble parses")
    }

    pub fn for_class(&self, class_name: &str) -> (Vec<String>, Vec<String>) {
        let fill = |v: &[String]| v.iter().map(|p| p.replace(CLASS_PLACEHOLDER, class_name)).collect();
        (fill(&self.normal), fill(&self.abnormal))
    }
}

/// Text embedding of the bundled prompt ensemble for `class_name`.
pub fn class_text_features<E: FeatureExtractor + ?Sized>(extractor: &E, class_name: &str) -> Result<Array2<f64>> {
    let (n, a) = PromptEnsemble::builtin().for_class(class_name);
    extractor.text_embed(&n, &a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyExtractorConfig {
    pub input_side: usize,
    pub grid: usize,
    pub stages: usize,
    pub stage_dim: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ToyExtractorConfig {
    fn default() -> Self {
        Self { input_side: 128, grid: 16, stages: 4, stage_dim: 32, embed_dim: 16, seed: 0xc11f }
    }
}

const RAW_DIM: usize = 13;

/// Small deterministic extractor built from local colour, contrast,
/// gradient and position statistics per patch. Stage `s` pools those over
/// a `(2s+1)^2` patch neighbourhood and applies a fixed random tanh
/// projection.
#[derive(Debug, Clone)]
pub struct ToyExtractor {
    cfg: ToyExtractorConfig,
    stages: Vec<StageInfo>,
    proj: Vec<Array2<f64>>,
    bias: Vec<Array1<f64>>,
    image_proj: Array2<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

impl ToyExtractor {
    pub fn new(cfg: ToyExtractorConfig) -> Result<Self> {
        if cfg.grid == 0 || !cfg.input_side.is_multiple_of(cfg.grid) || cfg.input_side / cfg.grid < 2 {
            return Err(Error::invalid("input_side", format!("{} must be a multiple (>= 2x) of grid {}", cfg.input_side, cfg.grid)));
        }
        if cfg.stages == 0 || cfg.stage_dim == 0 || cfg.embed_dim == 0 {
            return Err(Error::invalid("extractor", "stages, stage_dim and embed_dim must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut proj = Vec::new();
        let mut bias = Vec::new();
        for _ in 0..cfg.stages {
            proj.push(gaussian_matrix(&mut rng, cfg.stage_dim, RAW_DIM, 1.5 / (RAW_DIM as f64).sqrt()));
            bias.push(gaussian_matrix(&mut rng, 1, cfg.stage_dim, 0.3).remove_axis(Axis(0)));
        }
        let image_proj = gaussian_matrix(&mut rng, cfg.embed_dim, cfg.stage_dim, 1.0 / (cfg.stage_dim as f64).sqrt());
        let stages = (0..cfg.stages)
            .map(|i| StageInfo { id: format!("stage{i}"), grid: (cfg.grid, cfg.grid), dim: cfg.stage_dim })
            .collect();
        Ok(Self { cfg, stages, proj, bias, image_proj })
    }

    pub fn config(&self) -> &ToyExtractorConfig {
        &self.cfg
    }

    /// Per-patch raw statistics, `grid x grid x RAW_DIM`.
    fn raw_descriptors(&self, img: &ImageSample) -> Array3<f64> {
        let side = self.cfg.input_side;
        let g = self.cfg.grid;
        let ps = side / g;
        let chans: Vec<Array2<f64>> = (0..3)
            .map(|c| area_resize(img.pixels.index_axis(Axis(2), c), side, side))
            .collect();
        let luma = &chans[0] * 0.299 + &chans[1] * 0.587 + &chans[2] * 0.114;
        let mut out = Array3::zeros((g, g, RAW_DIM));
        for py in 0..g {
            for px in 0..g {
                let (y0, x0) = (py * ps, px * ps);
                let n = (ps * ps) as f64;
                let mut d = [0.0; RAW_DIM];
                for (c, ch) in chans.iter().enumerate() {
                    d[c] = ch.slice(s![y0..y0 + ps, x0..x0 + ps]).sum() / n * 2.0 - 1.0;
                }
                let block = luma.slice(s![y0..y0 + ps, x0..x0 + ps]);
                let mean = block.sum() / n;
                d[3] = 4.0 * (block.mapv(|v| (v - mean).powi(2)).sum() / n).sqrt();
                let (mut gx, mut gy, mut jxx_yy, mut jxy, mut energy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + ps {
                    for x in x0..x0 + ps {
                        let dx = luma[[y, (x + 1).min(side - 1)]] - luma[[y, x.saturating_sub(1)]];
                        let dy = luma[[(y + 1).min(side - 1), x]] - luma[[y.saturating_sub(1), x]];
                        gx += dx.abs();
                        gy += dy.abs();
                        jxx_yy += dx * dx - dy * dy;
                        jxy += 2.0 * dx * dy;
                        energy += dx * dx + dy * dy;
                    }
                }
                d[4] = 4.0 * gx / n;
                d[5] = 4.0 * gy / n;
                d[6] = jxx_yy / (energy + 1e-6);
                d[7] = jxy / (energy + 1e-6);
                d[8] = block.fold(f64::INFINITY, |a, &b| a.min(b)) * 2.0 - 1.0;
                d[9] = block.fold(f64::NEG_INFINITY, |a, &b| a.max(b)) * 2.0 - 1.0;
                let cx = (px as f64 + 0.5) / g as f64 * 2.0 - 1.0;
                let cy = (py as f64 + 0.5) / g as f64 * 2.0 - 1.0;
                d[10] = cx;
                d[11] = cy;
                d[12] = (cx * cx + cy * cy).sqrt();
                out.slice_mut(s![py, px, ..]).assign(&Array1::from(d.to_vec()));
            }
        }
        out
    }

    fn stage_tokens(&self, raw: &Array3<f64>, stage: usize) -> Array3<f64> {
        let g = self.cfg.grid;
        let r = stage;
        let mut out = Array3::zeros((g, g, self.cfg.stage_dim));
        for py in 0..g {
            for px in 0..g {
                let ys = py.saturating_sub(r)..(py + r + 1).min(g);
                let xs = px.saturating_sub(r)..(px + r + 1).min(g);
                let pooled = raw.slice(s![ys, xs, ..]).mean_axis(Axis(0)).unwrap().mean_axis(Axis(0)).unwrap();
                let tok = (self.proj[stage].dot(&pooled) + &self.bias[stage]).mapv(f64::tanh);
                out.slice_mut(s![py, px, ..]).assign(&tok);
            }
        }
        out
    }

    fn word_vector(&self, word: &str) -> Array1<f64> {
        let seed = (crate::diffusion::fnv1a(word) as u64) ^ self.cfg.seed.rotate_left(32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = gaussian_matrix(&mut rng, 1, self.cfg.embed_dim, 1.0).remove_axis(Axis(0));
        unit(v)
    }

    fn prompt_vector(&self, prompts: &[String]) -> Result<Array1<f64>> {
        if prompts.is_empty() {
            return Err(Error::invalid("prompts", "empty prompt set"));
        }
        let mut acc = Array1::zeros(self.cfg.embed_dim);
        for p in prompts {
            let mut v = Array1::zeros(self.cfg.embed_dim);
            for w in p.split_whitespace().map(normalize_word).filter(|w| !w.is_empty()) {
                v += &self.word_vector(&w);
            }
            acc += &unit(v);
        }
        Ok(unit(acc))
    }
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 { v / n } else { v }
}

impl FeatureExtractor for ToyExtractor {
    fn stages(&self) -> &[StageInfo] {
        &self.stages
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn image_token(&self, img: &ImageSample) -> Result<Array1<f64>> {
        let g = self.cfg.grid;
        let last = self.stage_tokens(&self.raw_descriptors(img), self.cfg.stages - 1);
        let pooled = last.into_shape_with_order((g * g, self.cfg.stage_dim)).expect("contiguous tokens").mean_axis(Axis(0)).unwrap();
        Ok(self.image_proj.dot(&pooled))
    }

    fn patch_tokens(&self, img: &ImageSample, stage: usize) -> Result<Array3<f64>> {
        if stage >= self.cfg.stages {
            return Err(Error::invalid("stage", format!("{stage} >= {}", self.cfg.stages)));
        }
        Ok(self.stage_tokens(&self.raw_descriptors(img), stage))
    }

    fn text_embed(&self, normal: &[String], abnormal: &[String]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((2, self.cfg.embed_dim));
        out.row_mut(0).assign(&self.prompt_vector(normal)?);
        out.row_mut(1).assign(&self.prompt_vector(abnormal)?);
        Ok(out)
    }

    fn extract(&self, img: &ImageSample) -> Result<ExtractedFeatures> {
        let raw = self.raw_descriptors(img);
        let g = self.cfg.grid;
        let mut patches = Vec::with_capacity(self.cfg.stages);
        for s in 0..self.cfg.stages {
            let t = self.stage_tokens(&raw, s);
            patches.push(t.into_shape_with_order((g * g, self.cfg.stage_dim)).expect("contiguous tokens"));
        }
        let pooled = patches[self.cfg.stages - 1].mean_axis(Axis(0)).unwrap();
        Ok(ExtractedFeatures { image_token: self.image_proj.dot(&pooled), patches })
    }
}

/// Per-stage linear maps `C_i -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureAdapter {
    pub stage_ids: Vec<String>,
    /// `C x C_i` per stage.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl FeatureAdapter {
    /// Gaussian weights with std `1/sqrt(C_i)`, zero bias.
    pub fn init(stages: &[StageInfo], embed_dim: usize, seed: u64) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::invalid("stages", "empty stage list"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = stages
            .iter()
            .map(|s| gaussian_matrix(&mut rng, embed_dim, s.dim, 1.0 / (s.dim as f64).sqrt()))
            .collect();
        Ok(Self {
            stage_ids: stages.iter().map(|s| s.id.clone()).collect(),
            weights,
            biases: stages.iter().map(|_| Array1::zeros(embed_dim)).collect(),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn check_compatible(&self, stages: &[StageInfo], embed_dim: usize) -> Result<()> {
        let ok = self.stage_ids.len() == stages.len()
            && self.weights.iter().zip(stages).all(|(w, s)| w.dim() == (embed_dim, s.dim))
            && self.stage_ids.iter().zip(stages).all(|(id, s)| *id == s.id)
            && self.biases.iter().all(|b| b.len() == embed_dim);
        if !ok {
            return Err(Error::Shape {
                what: "adapter",
                expected: stages.iter().map(|s| s.dim).collect(),
                actual: self.weights.iter().map(|w| w.ncols()).collect(),
            });
        }
        Ok(())
    }

    /// Raw (unnormalised) adapted tokens of one stage, `P x C`.
    pub fn apply(&self, stage: usize, patches: ArrayView2<f64>) -> Array2<f64> {
        patches.dot(&self.weights[stage].t()) + &self.biases[stage]
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameters flattened stage by stage, weights (row-major) then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            v.extend(w.iter());
            v.extend(b.iter());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Shape { what: "adapter parameters", expected: vec![self.parameter_count()], actual: vec![flat.len()] });
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for x in w.iter_mut().chain(b.iter_mut()) {
                *x = flat[at];
                at += 1;
            }
        }
        Ok(())
    }
}

/// Rows scaled to unit length; zero rows stay zero.
pub fn normalize_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Adapted, row-normalised tokens of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedStage {
    pub grid: (usize, usize),
    pub tokens: Array2<f64>,
}

pub fn adapt_features(feats: &ExtractedFeatures, stages: &[StageInfo], adapter: &FeatureAdapter) -> Result<Vec<AdaptedStage>> {
    if feats.patches.len() != stages.len() {
        return Err(Error::Shape { what: "feature stages", expected: vec![stages.len()], actual: vec![feats.patches.len()] });
    }
    stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = &feats.patches[i];
            if p.dim() != (s.patches(), s.dim) {
                return Err(Error::Shape { what: "patch tokens", expected: vec![s.patches(), s.dim], actual: p.shape().to_vec() });
            }
            Ok(AdaptedStage { grid: s.grid, tokens: normalize_rows(&adapter.apply(i, p.view())) })
        })
        .collect()
}

/// Abnormal probability of a two-way softmax over `(normal, abnormal)`.
pub fn two_class_softmax(normal_logit: f64, abnormal_logit: f64) -> f64 {
    1.0 / (1.0 + (normal_logit - abnormal_logit).exp())
}

fn check_text(f_text: &ArrayView2<f64>, dim: usize) -> Result<()> {
    if f_text.dim() != (2, dim) {
        return Err(Error::Shape { what: "text features", expected: vec![2, dim], actual: f_text.shape().to_vec() });
    }
    Ok(())
}

/// `S_VL`: abnormal probability of `softmax(tau cos(f_img, f_text))`.
pub fn vl_image_score(f_img: ArrayView1<f64>, f_text: ArrayView2<f64>, temperature: f64) -> Result<f64> {
    check_text(&f_text, f_img.len())?;
    let img = unit(f_img.to_owned());
    let text = normalize_rows(&f_text.to_owned());
    Ok(two_class_softmax(temperature * img.dot(&text.row(0)), temperature * img.dot(&text.row(1))))
}

/// Per-patch abnormal probabilities of normalised tokens.
pub fn patch_abnormal_probs(tokens: ArrayView2<f64>, f_text: ArrayView2<f64>, temperature: f64) -> Result<Array1<f64>> {
    check_text(&f_text, tokens.ncols())?;
    let text = normalize_rows(&f_text.to_owned());
    let logits = tokens.dot(&text.t()) * temperature;
    Ok(logits.rows().into_iter().map(|l| two_class_softmax(l[0], l[1])).collect())
}

fn upsample(values: &Array1<f64>, grid: (usize, usize), height: usize, width: usize) -> Array2<f64> {
    let m = values.view().into_shape_with_order(grid).expect("one value per patch");
    bilinear_resize(m, height, width)
}

/// `M_VL`: sum over stages of the upsampled abnormal-probability maps, in
/// `[0, |H|]`.
pub fn vl_pixel_map(stages: &[AdaptedStage], f_text: ArrayView2<f64>, temperature: f64, height: usize, width: usize) -> Result<Array2<f64>> {
    if stages.is_empty() {
        return Err(Error::invalid("stages", "empty stage list"));
    }
    let mut out = Array2::zeros((height, width));
    for st in stages {
        let p = patch_abnormal_probs(st.tokens.view(), f_text, temperature)?;
        out += &upsample(&p, st.grid, height, width);
    }
    Ok(out)
}

/// Adapted, unit-norm patch tokens of normal images, per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub stage_ids: Vec<String>,
    pub rows: Vec<Array2<f64>>,
}

impl MemoryBank {
    pub fn new(stage_ids: Vec<String>, rows: Vec<Array2<f64>>) -> Result<Self> {
        if stage_ids.len() != rows.len() || rows.is_empty() {
            return Err(Error::invalid("bank", "one row block per stage is required"));
        }
        let dim = rows[0].ncols();
        for r in &rows {
            if r.ncols() != dim {
                return Err(Error::Shape { what: "bank rows", expected: vec![dim], actual: vec![r.ncols()] });
            }
            for (i, row) in r.rows().into_iter().enumerate() {
                if (row.dot(&row).sqrt() - 1.0).abs() > 1e-5 {
                    return Err(Error::Range { what: "bank row norm", detail: format!("row {i} is not unit length") });
                }
            }
        }
        Ok(Self { stage_ids, rows })
    }

    pub fn from_adapted(stage_ids: Vec<String>, images: &[Vec<AdaptedStage>]) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::invalid("normals", "empty selection"));
        };
        let rows = (0..first.len())
            .map(|s| {
                let views: Vec<_> = images.iter().map(|im| im[s].tokens.view()).collect();
                ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid("bank", e.to_string()))
            })
            .collect::<Result<_>>()?;
        Self::new(stage_ids, rows)
    }

    pub fn rows_per_stage(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.nrows()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().any(|r| r.nrows() == 0)
    }
}

/// `1 - max cosine` of every query row against the bank rows.
pub fn nn_distance(queries: ArrayView2<f64>, bank: ArrayView2<f64>) -> Array1<f64> {
    let sims = queries.dot(&bank.t());
    sims.rows().into_iter().map(|r| 1.0 - r.fold(f64::NEG_INFINITY, |a, &b| a.max(b))).collect()
}

/// `M_VV`: sum over stages of the upsampled nearest-neighbour distances.
pub fn vv_pixel_map(stages: &[AdaptedStage], bank: &MemoryBank, height: usize, width: usize) -> Result<Array2<f64>> {
    if bank.is_empty() {
        return Err(Error::invalid("bank", "empty memory bank"));
    }
    if bank.rows.len() != stages.len() {
        return Err(Error::Shape { what: "bank stages", expected: vec![stages.len()], actual: vec![bank.rows.len()] });
    }
    let mut out = Array2::zeros((height, width));
    for (st, rows) in stages.iter().zip(&bank.rows) {
        if rows.ncols() != st.tokens.ncols() {
            return Err(Error::Shape { what: "bank dim", expected: vec![st.tokens.ncols()], actual: vec![rows.ncols()] });
        }
        out += &upsample(&nn_distance(st.tokens.view(), rows.view()), st.grid, height, width);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub temperature: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { temperature: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub s_img: f64,
    pub m_pix: Array2<f64>,
    pub s_vl: f64,
    pub s_vv: f64,
}

/// Scores already-extracted features. `m_pix = M_VL / |H| + M_VV` and
/// `s_img = S_VL + max(M_VV)`; without a bank only the VL terms are used.
#[allow(clippy::too_many_arguments)]
pub fn detect_features(
    feats: &ExtractedFeatures,
    stages: &[StageInfo],
    adapter: &FeatureAdapter,
    bank: Option<&MemoryBank>,
    f_text: ArrayView2<f64>,
    cfg: &DetectorConfig,
    height: usize,
    width: usize,
) -> Result<DetectionResult> {
    let adapted = adapt_features(feats, stages, adapter)?;
    let s_vl = vl_image_score(feats.image_token.view(), f_text, cfg.temperature)?;
    let mut m_pix = vl_pixel_map(&adapted, f_text, cfg.temperature, height, width)?;
    m_pix /= adapted.len() as f64;
    let Some(bank) = bank else {
        return Ok(DetectionResult { s_img: s_vl, m_pix, s_vl, s_vv: 0.0 });
    };
    let m_vv = vv_pixel_map(&adapted, bank, height, width)?;
    let s_vv = m_vv.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m_pix += &m_vv;
    Ok(DetectionResult { s_img: s_vl + s_vv, m_pix, s_vl, s_vv })
}

pub fn detect<E: FeatureExtractor + ?Sized>(
    extractor: &E,
    img: &ImageSample,
    adapter: &FeatureAdapter,
    bank: Option<&MemoryBank>,
    f_text: ArrayView2<f64>,
    cfg: &DetectorConfig,
) -> Result<DetectionResult> {
    adapter.check_compatible(extractor.stages(), extractor.embed_dim())?;
    let feats = extractor.extract(img)?;
    detect_features(&feats, extractor.stages(), adapter, bank, f_text, cfg, img.height(), img.width())
}
