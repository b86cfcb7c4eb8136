//! Training objective for the detector: focal loss on the image score,
//! mean pixel BCE and an adapted soft Dice loss `1 - d / (d + beta)` on the
//! pixel map. Soft targets are used as-is.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub beta: f64,
    pub omega: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 0.2, omega: 6.0, focal_gamma: 2.0, focal_alpha: 0.25 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta", format!("must be > 0, got {}", self.beta)));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::invalid("omega", format!("must be >= 0, got {}", self.omega)));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::invalid("focal_gamma", format!("must be >= 0, got {}", self.focal_gamma)));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return Err(Error::invalid("focal_alpha", format!("must be in (0, 1], got {}", self.focal_alpha)));
        }
        Ok(())
    }
}

fn check_shapes(y: &ArrayView2<f64>, yhat: &ArrayView2<f64>) -> Result<()> {
    if y.dim() != yhat.dim() {
        return Err(Error::Shape { what: "pixel maps", expected: y.shape().to_vec(), actual: yhat.shape().to_vec() });
    }
    Ok(())
}

/// Soft Dice with +1 smoothing: `(2 sum(y*yhat) + 1) / (sum y + sum yhat + 1)`.
pub fn dice_coeff(y: ArrayView2<f64>, yhat: ArrayView2<f64>) -> Result<f64> {
    check_shapes(&y, &yhat)?;
    let (num, den) = dice_parts(&y, &yhat);
    Ok(num / den)
}

fn dice_parts(y: &ArrayView2<f64>, yhat: &ArrayView2<f64>) -> (f64, f64) {
    let inter: f64 = Zip::from(y).and(yhat).fold(0.0, |acc, &a, &b| acc + a * b);
    (2.0 * inter + 1.0, y.sum() + yhat.sum() + 1.0)
}

pub fn adapted_dice_from_coeff(d: f64, beta: f64) -> f64 {
    1.0 - d / (d + beta)
}

pub fn adapted_dice_loss(y: ArrayView2<f64>, yhat: ArrayView2<f64>, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::invalid("beta", format!("must be > 0, got {beta}")));
    }
    Ok(adapted_dice_from_coeff(dice_coeff(y, yhat)?, beta))
}

/// Gradient of [`adapted_dice_loss`] with respect to `yhat`.
pub fn adapted_dice_grad(y: ArrayView2<f64>, yhat: ArrayView2<f64>, beta: f64) -> Result<Array2<f64>> {
    check_shapes(&y, &yhat)?;
    let (num, den) = dice_parts(&y, &yhat);
    let d = num / den;
    let outer = -beta / ((d + beta) * (d + beta));
    Ok(y.mapv(|yi| outer * (2.0 * yi * den - num) / (den * den)))
}

fn clamp_prob(p: f64) -> Result<f64> {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::Range { what: "probability", detail: p.to_string() });
    }
    Ok(c)
}

/// Binary focal loss `-alpha (1 - p_t)^gamma ln p_t`, with `p` clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(y_img: u8, p: f64, cfg: &LossConfig) -> Result<f64> {
    let p = clamp_prob(p)?;
    let pt = if y_img == 1 { p } else { 1.0 - p };
    Ok(-cfg.focal_alpha * (1.0 - pt).powf(cfg.focal_gamma) * pt.ln())
}

pub fn focal_grad(y_img: u8, p: f64, cfg: &LossConfig) -> Result<f64> {
    let p = clamp_prob(p)?;
    let (a, g) = (cfg.focal_alpha, cfg.focal_gamma);
    let pow_m1 = |base: f64| if g == 0.0 { 0.0 } else { g * base.powf(g - 1.0) };
    Ok(if y_img == 1 {
        a * (pow_m1(1.0 - p) * p.ln() - (1.0 - p).powf(g) / p)
    } else {
        a * (-pow_m1(p) * (1.0 - p).ln() + p.powf(g) / (1.0 - p))
    })
}

/// Mean binary cross-entropy over pixels.
pub fn bce_mean(y: ArrayView2<f64>, yhat: ArrayView2<f64>) -> Result<f64> {
    check_shapes(&y, &yhat)?;
    let n = y.len() as f64;
    let mut total = 0.0;
    for (&t, &p) in y.iter().zip(yhat.iter()) {
        let p = clamp_prob(p)?;
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(total / n)
}

pub fn bce_grad(y: ArrayView2<f64>, yhat: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_shapes(&y, &yhat)?;
    let n = y.len() as f64;
    let mut out = Array2::zeros(y.dim());
    for ((o, &t), &p) in out.iter_mut().zip(y.iter()).zip(yhat.iter()) {
        let p = clamp_prob(p)?;
        *o = (-t / p + (1.0 - t) / (1.0 - p)) / n;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub focal: f64,
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn compose(focal: f64, bce: f64, dice: f64, omega: f64) -> Self {
        Self { focal, bce, dice, total: focal + omega * (bce + dice) }
    }
}

/// `focal + omega (bce + adapted dice)`.
pub fn total_loss(y_img: u8, p_img: f64, y_pix: ArrayView2<f64>, m_pix: ArrayView2<f64>, cfg: &LossConfig) -> Result<LossTerms> {
    check_shapes(&y_pix, &m_pix)?;
    Ok(LossTerms::compose(
        focal_loss(y_img, p_img, cfg)?,
        bce_mean(y_pix, m_pix)?,
        adapted_dice_loss(y_pix, m_pix, cfg.beta)?,
        cfg.omega,
    ))
}

/// Loss terms plus gradients with respect to `p_img` and `m_pix`.
pub fn total_loss_grad(
    y_img: u8,
    p_img: f64,
    y_pix: ArrayView2<f64>,
    m_pix: ArrayView2<f64>,
    cfg: &LossConfig,
) -> Result<(LossTerms, f64, Array2<f64>)> {
    let terms = total_loss(y_img, p_img, y_pix, m_pix, cfg)?;
    let d_img = focal_grad(y_img, p_img, cfg)?;
    let mut d_pix = bce_grad(y_pix, m_pix)?;
    d_pix += &adapted_dice_grad(y_pix, m_pix, cfg.beta)?;
    d_pix *= cfg.omega;
    Ok((terms, d_img, d_pix))
}
