//! One anomaly generation run and batched dataset generation.
//!
//! A normal image is encoded and forward-noised to `t_start = round(T (1 -
//! gamma))`; from there every denoise step is preceded by attention
//! optimisation on the anomaly token (until the scheduler stops it), and the
//! final smoothed anomaly-token map becomes the soft pixel annotation.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    aggregate_attention, count_activated, optimize_step, should_stop, AggregatedAttention, AggregationConfig,
    RefinementThresholds, SchedulerParams, SchedulerState,
};
use crate::diffusion::{forward_noise, Backbone};
use crate::grid::bilinear_resize;
use crate::types::{AnnotatedSample, ForegroundMask, ImageSample, LatentState, PromptSpec, CLASS_PLACEHOLDER};
use crate::{Error, Result};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "A photo of a [cls] that is damaged";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub gamma: f64,
    pub steps: usize,
    pub prompt_template: String,
    pub anomaly_word: String,
    pub seed: u64,
    pub scheduler: SchedulerParams,
    pub thresholds: RefinementThresholds,
    pub aggregation: AggregationConfig,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            steps: 200,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.into(),
            anomaly_word: "damaged".into(),
            seed: 0,
            scheduler: SchedulerParams::default(),
            thresholds: RefinementThresholds::default(),
            aggregation: AggregationConfig::default(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma", format!("must be in [0, 1], got {}", self.gamma)));
        }
        if self.steps < 10 {
            return Err(Error::invalid("steps", format!("must be >= 10, got {}", self.steps)));
        }
        if !self.prompt_template.contains(CLASS_PLACEHOLDER) {
            return Err(Error::invalid("prompt_template", format!("missing {CLASS_PLACEHOLDER}")));
        }
        self.thresholds.validate()
    }

    pub fn t_start(&self) -> usize {
        start_step(self.steps, self.gamma)
    }
}

/// `round(T (1 - gamma))`.
pub fn start_step(total_steps: usize, gamma: f64) -> usize {
    (total_steps as f64 * (1.0 - gamma)).round() as usize
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const FORWARD_NOISE_SALT: u64 = 0xf0f0;

/// Otsu threshold of values in `[0, 1]` over a 256-bin histogram. `None`
/// when all values fall in one bin.
pub fn otsu_threshold(values: ArrayView2<f64>) -> Option<f64> {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, &c) in hist.iter().enumerate().take(255) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, i);
        }
    }
    // pixels with bin <= best.1 form the lower class
    Some((best.1 as f64 + 0.5) / 255.0)
}

fn dilate(m: &Array2<bool>) -> Array2<bool> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (y.saturating_sub(1)..(y + 2).min(h)).any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| m[[yy, xx]]))
    })
}

fn erode(m: &Array2<bool>) -> Array2<bool> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (y.saturating_sub(1)..(y + 2).min(h)).all(|yy| (x.saturating_sub(1)..(x + 2).min(w)).all(|xx| m[[yy, xx]]))
    })
}

/// Otsu foreground with one 3x3 closing. The class holding the majority of
/// border pixels is background. Degenerate images get an all-foreground mask.
pub fn foreground_mask(img: &ImageSample, latent_side: usize) -> Result<ForegroundMask> {
    let gray = img.grayscale();
    let (h, w) = gray.dim();
    let Some(thr) = otsu_threshold(gray.view()) else {
        return Ok(ForegroundMask::all_foreground(h, w, latent_side));
    };
    let above = gray.mapv(|v| v > thr);
    let mut border_above = 0usize;
    let mut border_total = 0usize;
    for ((y, x), &a) in above.indexed_iter() {
        if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
            border_total += 1;
            border_above += a as usize;
        }
    }
    let background_is_above = 2 * border_above > border_total;
    let raw = above.mapv(|a| a != background_is_above);
    ForegroundMask::from_full(erode(&dilate(&raw)), latent_side)
}

/// Noised latent of the conditioning image at `t_start`.
pub fn conditioning_start<B: Backbone + ?Sized>(img: &ImageSample, cfg: &GenerationConfig, backbone: &B) -> Result<LatentState> {
    check_steps(cfg, backbone)?;
    let t_start = cfg.t_start();
    let z0 = backbone.encode(img)?;
    let z = forward_noise(backbone.schedule(), &z0, t_start, mix_seed(cfg.seed, FORWARD_NOISE_SALT))?;
    LatentState::new(z, t_start, cfg.steps)
}

fn check_steps<B: Backbone + ?Sized>(cfg: &GenerationConfig, backbone: &B) -> Result<()> {
    if backbone.schedule().steps() != cfg.steps {
        return Err(Error::invalid(
            "steps",
            format!("config has T={} but the backbone schedule has {}", cfg.steps, backbone.schedule().steps()),
        ));
    }
    Ok(())
}

/// Anomaly-token map normalised over the foreground, upsampled, and zeroed
/// on the background. A flat foreground gives an all-zero map.
pub fn extract_annotation(
    abar: &AggregatedAttention,
    j_set: &[usize],
    mask: &ForegroundMask,
    height: usize,
    width: usize,
) -> Result<Array2<f64>> {
    let map = abar.token_map(j_set)?;
    if mask.mask16.dim() != map.dim() {
        return Err(Error::Shape { what: "mask16", expected: map.shape().to_vec(), actual: mask.mask16.shape().to_vec() });
    }
    if mask.mask_full.dim() != (height, width) {
        return Err(Error::Shape { what: "mask_full", expected: vec![height, width], actual: mask.mask_full.shape().to_vec() });
    }
    let fg = || map.iter().zip(mask.mask16.iter()).filter(|(_, &m)| m).map(|(&v, _)| v);
    let lo = fg().fold(f64::INFINITY, f64::min);
    let hi = fg().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(Array2::zeros((height, width)));
    }
    let mut norm = map.clone();
    ndarray::Zip::from(&mut norm).and(&mask.mask16).for_each(|v, &m| {
        *v = if m { (*v - lo) / (hi - lo) } else { 0.0 };
    });
    let mut up = bilinear_resize(norm.view(), height, width);
    ndarray::Zip::from(&mut up).and(&mask.mask_full).for_each(|v, &m| {
        *v = if m { v.clamp(0.0, 1.0) } else { 0.0 };
    });
    Ok(up)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub n_t: usize,
    pub stopped: bool,
    pub alpha: f64,
    pub inner_steps: usize,
    /// In-mask maximum of the anomaly map before optimisation at this step.
    pub max_attention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub t_start: usize,
    pub n_start: usize,
    pub steps: Vec<StepRecord>,
    /// In-mask maximum of the final anomaly-token map.
    pub final_max_attention: f64,
    /// Steps at which a refinement target was not reached within the
    /// inner-iteration budget.
    pub exhausted_refinements: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub sample: AnnotatedSample,
    pub mask: ForegroundMask,
    pub trace: GenerationTrace,
}

fn in_mask_max(map: ArrayView2<f64>, mask16: ArrayView2<bool>) -> f64 {
    map.iter().zip(mask16.iter()).filter(|(_, &m)| m).map(|(&v, _)| v).fold(f64::NEG_INFINITY, f64::max)
}

fn attention_summary<B: Backbone + ?Sized>(
    backbone: &B,
    z: &LatentState,
    prompt: &PromptSpec,
    cfg: &GenerationConfig,
    mask: &ForegroundMask,
) -> Result<(AggregatedAttention, usize, f64)> {
    let stack = backbone.capture_attention(z, prompt)?;
    let agg = aggregate_attention(&stack, &cfg.aggregation)?;
    let map = agg.token_map(&prompt.anomaly_token_indices)?;
    let n = count_activated(map.view(), mask.mask16.view());
    let max = in_mask_max(map.view(), mask.mask16.view());
    Ok((agg, n, max))
}

pub fn build_prompt<B: Backbone + ?Sized>(cfg: &GenerationConfig, class_name: &str, backbone: &B) -> Result<PromptSpec> {
    struct Tok<'a, B: ?Sized>(&'a B);
    impl<B: Backbone + ?Sized> crate::types::Tokenizer for Tok<'_, B> {
        fn tokenize(&self, text: &str) -> Vec<crate::types::Token> {
            self.0.tokenize(text)
        }
        fn token_limit(&self) -> usize {
            self.0.token_limit()
        }
    }
    PromptSpec::from_template(&cfg.prompt_template, class_name, &cfg.anomaly_word, &Tok(backbone))
}

/// Runs one guided generation from `img`.
pub fn generate<B: Backbone + ?Sized>(img: &ImageSample, cfg: &GenerationConfig, backbone: &B) -> Result<Generated> {
    cfg.validate()?;
    let prompt = build_prompt(cfg, &img.category, backbone)?;
    let mask = foreground_mask(img, backbone.latent_side())?;
    let mut z = conditioning_start(img, cfg, backbone)?;
    let t_start = z.t;
    let at = |t: usize| move |e: Error| Error::Step { t, source: Box::new(e) };

    let (_, n_start, _) = attention_summary(backbone, &z, &prompt, cfg, &mask).map_err(at(t_start))?;
    let mut state = SchedulerState::new(&cfg.scheduler, cfg.steps, t_start, n_start)?;
    let mut records = Vec::with_capacity(t_start);
    let mut exhausted = Vec::new();
    for t in (1..=t_start).rev() {
        let steps_done = t_start - t;
        let (_, n_t, max_attention) = attention_summary(backbone, &z, &prompt, cfg, &mask).map_err(at(t))?;
        let mut record = StepRecord { t, n_t, stopped: false, alpha: 0.0, inner_steps: 0, max_attention };
        if should_stop(&mut state, steps_done, n_t) {
            record.stopped = true;
        } else {
            let plan = cfg.thresholds.plan(steps_done, t_start);
            let out = optimize_step(backbone, &z, &prompt, &mask, &state, plan, n_t, &cfg.thresholds, &cfg.aggregation)
                .map_err(at(t))?;
            if let crate::attention::InnerPlan::Refine { threshold } = plan {
                let reached = out.losses.last().is_some_and(|l| 1.0 - l >= threshold);
                if !reached && out.alpha != 0.0 {
                    exhausted.push(t);
                }
            }
            record.alpha = out.alpha;
            record.inner_steps = out.steps_taken;
            z = out.latent;
        }
        records.push(record);
        z = backbone.denoise_step(&z, &prompt, mix_seed(cfg.seed, t as u64), false).map_err(at(t))?.0;
    }

    let (final_agg, _, final_max) = attention_summary(backbone, &z, &prompt, cfg, &mask).map_err(at(0))?;
    let (h, w) = (img.height(), img.width());
    let y_pix = extract_annotation(&final_agg, &prompt.anomaly_token_indices, &mask, h, w)?;
    let pixels = backbone.decode(&z.z, h, w)?;
    let image = ImageSample::new(pixels, img.category.clone(), None)?;
    let sample = AnnotatedSample::new(image, 1, y_pix, prompt, cfg.seed, cfg.gamma)?;
    let trace = GenerationTrace { t_start, n_start, steps: records, final_max_attention: final_max, exhausted_refinements: exhausted };
    Ok(Generated { sample, mask, trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedRecord {
    pub sample: AnnotatedSample,
    /// Identifier of the conditioning normal image.
    pub source_normal: String,
}

#[derive(Debug)]
pub struct GeneratedDataset {
    pub records: Vec<GeneratedRecord>,
    /// `(source index, seed, error)` of skipped generations.
    pub failures: Vec<(usize, u64, Error)>,
}

/// `per_image` guided generations for every normal, seeds `base_seed + i`
/// over a running index, plus each conditioning normal itself as a
/// `y_img = 0` sample. Generations run in parallel with one backbone per
/// worker; output order is fixed.
pub fn batch_generate<B, F>(
    normals: &[ImageSample],
    per_image: usize,
    cfg: &GenerationConfig,
    make_backbone: F,
) -> Result<GeneratedDataset>
where
    B: Backbone,
    F: Fn() -> Result<B> + Sync,
{
    if per_image == 0 {
        return Err(Error::invalid("per_image", "must be >= 1"));
    }
    if normals.is_empty() {
        return Err(Error::invalid("normals", "empty"));
    }
    cfg.validate()?;
    let jobs: Vec<(usize, u64)> = (0..normals.len())
        .flat_map(|n| (0..per_image).map(move |k| (n, (n * per_image + k) as u64)))
        .map(|(n, i)| (n, cfg.seed.wrapping_add(i)))
        .collect();
    let results: Vec<Result<AnnotatedSample>> = jobs
        .par_iter()
        .map_init(
            &make_backbone,
            |backbone, &(n, seed)| {
                let backbone = backbone.as_ref().map_err(|e| Error::Backbone(e.to_string()))?;
                let job_cfg = GenerationConfig { seed, ..cfg.clone() };
                generate(&normals[n], &job_cfg, backbone).map(|g| g.sample)
            },
        )
        .collect();

    let backbone = make_backbone()?;
    let mut records = Vec::with_capacity(results.len() + normals.len());
    let mut failures = Vec::new();
    let mut results = results.into_iter();
    for (n, normal) in normals.iter().enumerate() {
        let source = normal.path.clone().unwrap_or_else(|| format!("normal-{n}"));
        let prompt = build_prompt(cfg, &normal.category, &backbone)?;
        let y = Array2::zeros((normal.height(), normal.width()));
        records.push(GeneratedRecord {
            sample: AnnotatedSample::new(normal.clone(), 0, y, prompt, cfg.seed, cfg.gamma)?,
            source_normal: source.clone(),
        });
        for k in 0..per_image {
            let (_, seed) = jobs[n * per_image + k];
            match results.next().expect("one result per job") {
                Ok(sample) => records.push(GeneratedRecord { sample, source_normal: source.clone() }),
                Err(e) => failures.push((n, seed, e)),
            }
        }
    }
    if failures.len() == jobs.len() {
        let (_, _, first) = failures.swap_remove(0);
        return Err(first);
    }
    Ok(GeneratedDataset { records, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{ToyBackbone, ToyBackboneConfig};
    use ndarray::{Array3, Axis};

    fn disk_image(side: usize) -> ImageSample {
        let c = side as f64 / 2.0;
        let px = Array3::from_shape_fn((side, side, 3), |(y, x, _)| {
            let d = ((y as f64 + 0.5 - c).powi(2) + (x as f64 + 0.5 - c).powi(2)).sqrt();
            if d < side as f64 * 0.3 { 0.1 } else { 0.95 }
        });
        ImageSample::new(px, "disk", None).unwrap()
    }

    #[test]
    fn white_image_falls_back_to_full_mask() {
        let img = ImageSample::new(Array3::from_elem((64, 64, 3), 1.0), "c", None).unwrap();
        let m = foreground_mask(&img, 8).unwrap();
        assert!(m.mask_full.iter().all(|&b| b) && m.mask16.iter().all(|&b| b) && m.mask_lat.iter().all(|&b| b));
    }

    #[test]
    fn dark_disk_is_foreground() {
        let img = disk_image(64);
        let m = foreground_mask(&img, 8).unwrap();
        assert!(m.mask_full[[32, 32]]);
        assert!(!m.mask_full[[0, 0]]);
        assert_eq!(crate::types::resample_mask(m.mask_full.view(), 16).unwrap(), m.mask16);
        assert_eq!(crate::types::resample_mask(m.mask_full.view(), 8).unwrap(), m.mask_lat);
    }

    #[test]
    fn start_step_grid() {
        for i in 0..=10 {
            let g = i as f64 / 10.0;
            assert_eq!(start_step(200, g), (200.0 * (1.0 - g)).round() as usize);
        }
        assert_eq!(start_step(200, 0.25), 150);
        assert_eq!(start_step(200, 1.0), 0);
        assert_eq!(start_step(200, 0.0), 200);
    }

    #[test]
    fn gamma_one_starts_from_the_clean_latent() {
        let b = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
        let img = disk_image(64);
        let cfg = GenerationConfig { gamma: 1.0, ..Default::default() };
        let z = conditioning_start(&img, &cfg, &b).unwrap();
        assert_eq!(z.t, 0);
        assert_eq!(z.z, b.encode(&img).unwrap());
    }

    #[test]
    fn flat_annotation_is_all_zero() {
        let mut abar = Array3::zeros((16, 16, 2));
        abar.index_axis_mut(Axis(2), 1).fill(0.4);
        let agg = AggregatedAttention { abar, t: 0 };
        let mask = ForegroundMask::all_foreground(64, 64, 8);
        let y = extract_annotation(&agg, &[1], &mask, 64, 64).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spike_annotation_peaks_in_its_block() {
        let mut abar = Array3::zeros((16, 16, 2));
        abar[[5, 9, 1]] = 1.0;
        let agg = AggregatedAttention { abar, t: 0 };
        let mask = ForegroundMask::all_foreground(128, 128, 8);
        let y = extract_annotation(&agg, &[1], &mask, 128, 128).unwrap();
        let max = y.iter().cloned().fold(f64::MIN, f64::max);
        for ((r, c), &v) in y.indexed_iter() {
            if v == max {
                assert_eq!((r / 8, c / 8), (5, 9));
            }
        }
    }

    #[test]
    fn batch_rejects_zero_per_image() {
        let img = disk_image(64);
        let r = batch_generate(&[img], 0, &GenerationConfig::default(), || ToyBackbone::new(ToyBackboneConfig::default()));
        assert!(r.is_err());
    }
}
