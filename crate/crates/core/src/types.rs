//! Shared domain types.
//!
//! Pixel data is channel-last `H x W x 3` in `[0, 1]`; latents are
//! channel-first `C x P x P`; attention maps are `P x P x N` over prompt
//! tokens. Binary masks are `Array2<bool>`.

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::grid::nearest_index;
use crate::{Error, Result};

pub const MIN_IMAGE_SIDE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Array3<f64>,
    pub category: String,
    pub path: Option<String>,
}

impl ImageSample {
    /// Builds a sample and checks its invariants.
    pub fn new(pixels: Array3<f64>, category: impl Into<String>, path: Option<String>) -> Result<Self> {
        validate_sample(Self { pixels, category: category.into(), path })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Rec. 601 luma.
    pub fn grayscale(&self) -> Array2<f64> {
        let (h, w, _) = self.pixels.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * self.pixels[[y, x, 0]] + 0.587 * self.pixels[[y, x, 1]] + 0.114 * self.pixels[[y, x, 2]]
        })
    }
}

/// Returns the sample unchanged when its invariants hold.
pub fn validate_sample(s: ImageSample) -> Result<ImageSample> {
    let (h, w, c) = s.pixels.dim();
    if c != 3 {
        return Err(Error::Shape { what: "image channels", expected: vec![h, w, 3], actual: vec![h, w, c] });
    }
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
        return Err(Error::Undersized { height: h, width: w, min: MIN_IMAGE_SIDE });
    }
    for ((y, x, ch), &v) in s.pixels.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "image pixels", index: vec![y, x, ch] });
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Range { what: "image pixels", detail: format!("{v} at ({y}, {x}, {ch})") });
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Array3<f64>,
    pub t: usize,
    pub total_steps: usize,
}

impl LatentState {
    pub fn new(z: Array3<f64>, t: usize, total_steps: usize) -> Result<Self> {
        if t > total_steps {
            return Err(Error::Range { what: "timestep", detail: format!("t={t} > T={total_steps}") });
        }
        if let Some((idx, _)) = z.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { what: "latent", index: vec![idx.0, idx.1, idx.2] });
        }
        Ok(Self { z, t, total_steps })
    }

    pub fn side(&self) -> usize {
        self.z.dim().1
    }
}

/// One token of a tokenised prompt, remembering which whitespace word of the
/// prompt text it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub word: usize,
}

pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token>;
    fn token_limit(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub tokens: Vec<Token>,
    /// Zero-based token positions carrying the anomaly word.
    pub anomaly_token_indices: Vec<usize>,
    pub class_name: String,
}

pub const CLASS_PLACEHOLDER: &str = "[cls]";

impl PromptSpec {
    /// Fills `[cls]` in `template` and marks every sub-token of
    /// `anomaly_word` as an anomaly token.
    pub fn from_template(
        template: &str,
        class_name: &str,
        anomaly_word: &str,
        tokenizer: &impl Tokenizer,
    ) -> Result<Self> {
        if !template.contains(CLASS_PLACEHOLDER) {
            return Err(Error::invalid("prompt_template", format!("missing {CLASS_PLACEHOLDER} in {template:?}")));
        }
        let text = template.replace(CLASS_PLACEHOLDER, class_name);
        let words: Vec<&str> = text.split_whitespace().collect();
        let target = normalize_word(anomaly_word);
        let word_idx: Vec<usize> = words
            .iter()
            .enumerate()
            .filter(|(_, w)| normalize_word(w) == target)
            .map(|(i, _)| i)
            .collect();
        if word_idx.is_empty() {
            return Err(Error::invalid("anomaly_word", format!("{anomaly_word:?} does not occur in {text:?}")));
        }
        let tokens = tokenizer.tokenize(&text);
        let anomaly_token_indices =
            tokens.iter().enumerate().filter(|(_, t)| word_idx.contains(&t.word)).map(|(i, _)| i).collect();
        Self::new(text, tokens, anomaly_token_indices, class_name.to_string(), tokenizer.token_limit())
    }

    pub fn new(
        text: String,
        tokens: Vec<Token>,
        anomaly_token_indices: Vec<usize>,
        class_name: String,
        token_limit: usize,
    ) -> Result<Self> {
        if tokens.len() > token_limit {
            return Err(Error::TokenLimit { tokens: tokens.len(), limit: token_limit });
        }
        if anomaly_token_indices.is_empty() {
            return Err(Error::invalid("anomaly_token_indices", "empty"));
        }
        if let Some(&bad) = anomaly_token_indices.iter().find(|&&i| i >= tokens.len()) {
            return Err(Error::invalid("anomaly_token_indices", format!("{bad} >= {} tokens", tokens.len())));
        }
        Ok(Self { text, tokens, anomaly_token_indices, class_name })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub(crate) fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Cross-attention probability maps captured during one denoise pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub maps: Vec<Array3<f64>>,
    pub layer_ids: Vec<String>,
    pub t: usize,
}

impl AttentionStack {
    pub fn new(maps: Vec<Array3<f64>>, layer_ids: Vec<String>, t: usize, tokens: usize) -> Result<Self> {
        if maps.len() != layer_ids.len() {
            return Err(Error::invalid("layer_ids", format!("{} ids for {} maps", layer_ids.len(), maps.len())));
        }
        for m in &maps {
            let (p, q, n) = m.dim();
            if p != q || n != tokens {
                return Err(Error::Shape { what: "attention map", expected: vec![p, p, tokens], actual: vec![p, q, n] });
            }
            if m.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Range { what: "attention map", detail: "negative or NaN entry".into() });
            }
        }
        Ok(Self { maps, layer_ids, t })
    }

    pub fn tokens(&self) -> usize {
        self.maps.first().map_or(0, |m| m.dim().2)
    }
}

/// One foreground mask rendered at full, latent and attention resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub mask16: Array2<bool>,
    pub mask_lat: Array2<bool>,
    pub mask_full: Array2<bool>,
}

pub const ATTENTION_SIDE: usize = 16;

impl ForegroundMask {
    /// Renders `full` at the two working resolutions. Falls back to an
    /// all-foreground mask if any rendering would be empty.
    pub fn from_full(full: Array2<bool>, latent_side: usize) -> Result<Self> {
        if latent_side == 0 {
            return Err(Error::invalid("latent_side", "must be positive"));
        }
        let mask16 = resample_mask(full.view(), ATTENTION_SIDE)?;
        let mask_lat = resample_mask(full.view(), latent_side)?;
        if [&full, &mask16, &mask_lat].iter().any(|m| !m.iter().any(|&v| v)) {
            let (h, w) = full.dim();
            return Ok(Self::all_foreground(h, w, latent_side));
        }
        Ok(Self { mask16, mask_lat, mask_full: full })
    }

    pub fn all_foreground(h: usize, w: usize, latent_side: usize) -> Self {
        Self {
            mask16: Array2::from_elem((ATTENTION_SIDE, ATTENTION_SIDE), true),
            mask_lat: Array2::from_elem((latent_side, latent_side), true),
            mask_full: Array2::from_elem((h, w), true),
        }
    }
}

/// Nearest-neighbour resampling of a binary mask to `target x target`.
pub fn resample_mask(m: ArrayView2<bool>, target: usize) -> Result<Array2<bool>> {
    if target == 0 {
        return Err(Error::invalid("target", "must be positive"));
    }
    let (h, w) = m.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid("mask", "empty"));
    }
    Ok(Array2::from_shape_fn((target, target), |(y, x)| {
        m[[nearest_index(y, target, h), nearest_index(x, target, w)]]
    }))
}

pub fn mask_to_f64(m: ArrayView2<bool>) -> Array2<f64> {
    m.mapv(|b| if b { 1.0 } else { 0.0 })
}

/// A generated (or conditioning) image with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub image: ImageSample,
    pub y_img: u8,
    pub y_pix: Array2<f64>,
    pub prompt: PromptSpec,
    pub seed: u64,
    pub gamma: f64,
}

impl AnnotatedSample {
    pub fn new(
        image: ImageSample,
        y_img: u8,
        y_pix: Array2<f64>,
        prompt: PromptSpec,
        seed: u64,
        gamma: f64,
    ) -> Result<Self> {
        if y_img > 1 {
            return Err(Error::Range { what: "y_img", detail: y_img.to_string() });
        }
        if y_pix.dim() != (image.height(), image.width()) {
            return Err(Error::Shape {
                what: "y_pix",
                expected: vec![image.height(), image.width()],
                actual: y_pix.shape().to_vec(),
            });
        }
        if y_pix.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Range { what: "y_pix", detail: "outside [0, 1]".into() });
        }
        if y_img == 0 && y_pix.iter().any(|&v| v != 0.0) {
            return Err(Error::Range { what: "y_pix", detail: "normal sample with nonzero annotation".into() });
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Range { what: "gamma", detail: gamma.to_string() });
        }
        Ok(Self { image, y_img, y_pix, prompt, seed, gamma })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn img(side: usize) -> Array3<f64> {
        Array3::from_shape_fn((side, side, 3), |(y, x, c)| ((y + x + c) % 7) as f64 / 7.0)
    }

    #[test]
    fn valid_image_passes_unchanged() {
        let s = ImageSample { pixels: img(256), category: "bottle".into(), path: None };
        assert_eq!(validate_sample(s.clone()).unwrap(), s);
    }

    #[test]
    fn nan_is_rejected() {
        let mut px = img(64);
        px[[3, 4, 1]] = f64::NAN;
        let err = ImageSample::new(px, "x", None).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn out_of_range_is_rejected() {
        let mut px = img(64);
        px[[0, 0, 0]] = 1.5;
        assert!(matches!(ImageSample::new(px, "x", None), Err(Error::Range { .. })));
    }

    #[test]
    fn small_image_is_rejected() {
        assert!(matches!(ImageSample::new(img(32), "x", None), Err(Error::Undersized { .. })));
    }

    #[test]
    fn resample_constant_and_identity() {
        let ones = Array2::from_elem((64, 64), true);
        assert_eq!(resample_mask(ones.view(), 16).unwrap(), Array2::from_elem((16, 16), true));
        let m = Array2::from_shape_fn((16, 16), |(y, x)| (y * 3 + x * 5) % 4 == 0);
        assert_eq!(resample_mask(m.view(), 16).unwrap(), m);
        assert!(resample_mask(m.view(), 0).is_err());
    }

    #[test]
    fn resample_checkerboard_matches_index_oracle() {
        let m = Array2::from_shape_fn((4, 4), |(y, x)| (y + x) % 2 == 0);
        let out = resample_mask(m.view(), 2).unwrap();
        // output pixel i covers source [2i, 2i+2); its centre is at 2i+1
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out[[y, x]], m[[2 * y + 1, 2 * x + 1]]);
            }
        }
    }

    #[test]
    fn normal_sample_requires_zero_annotation() {
        let image = ImageSample::new(img(64), "c", None).unwrap();
        let prompt = PromptSpec::new("a b".into(), vec![Token { id: 0, word: 0 }], vec![0], "c".into(), 8).unwrap();
        let mut y = Array2::zeros((64, 64));
        assert!(AnnotatedSample::new(image.clone(), 0, y.clone(), prompt.clone(), 0, 0.25).is_ok());
        y[[1, 1]] = 0.5;
        assert!(AnnotatedSample::new(image.clone(), 0, y.clone(), prompt.clone(), 0, 0.25).is_err());
        assert!(AnnotatedSample::new(image, 1, y, prompt, 0, 0.25).is_ok());
    }

    proptest! {
        #[test]
        fn nearest_upscale_then_downscale_is_identity(
            side in 1usize..12,
            k in 1usize..5,
            bits in proptest::collection::vec(any::<bool>(), 144),
        ) {
            let m = Array2::from_shape_fn((side, side), |(y, x)| bits[y * 12 + x]);
            let up = resample_mask(m.view(), side * k).unwrap();
            prop_assert_eq!(resample_mask(up.view(), side).unwrap(), m);
        }
    }
}
