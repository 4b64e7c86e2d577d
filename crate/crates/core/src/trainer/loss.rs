//! Weighted Jaccard loss with optional categorical cross-entropy.
//!
//! Maps are class-major: `NUM_CLASSES` planes of `pixels` values in
//! background, tissue, fluid order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::NUM_CLASSES;

/// Probabilities are clamped to at least this before taking logs.
pub const CE_EPSILON: f64 = 1e-7;

/// Per-class weights; must be nonnegative and sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub fluid: f64,
    pub tissue: f64,
    pub background: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self {
            fluid: 0.5,
            tissue: 0.25,
            background: 0.25,
        }
    }
}

impl ClassWeights {
    /// Weights in storage class order (background, tissue, fluid).
    pub fn in_class_order(&self) -> [f64; NUM_CLASSES] {
        [self.background, self.tissue, self.fluid]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.in_class_order();
        if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::InvalidConfig(format!("class weights must be nonnegative, got {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::WeightsNotNormalized(sum));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub class_weights: ClassWeights,
    pub alpha: f64,
    pub include_cross_entropy: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            class_weights: ClassWeights::default(),
            alpha: 100.0,
            include_cross_entropy: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.class_weights.validate()?;
        check_alpha(self.alpha)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("target has {a} values, prediction {b}")));
    }
    Ok(())
}

fn jaccard_sums<T: Into<f64> + Copy>(y: &[T], yhat: &[T]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sum = 0.0;
    for (&a, &b) in y.iter().zip(yhat) {
        let (a, b) = (a.into(), b.into());
        inter += a * b;
        sum += a + b;
    }
    (inter, sum)
}

/// `(1 - (sum(y*yhat) + alpha) / (sum(y + yhat) - sum(y*yhat) + alpha)) * alpha`
/// for one class map.
pub fn jaccard_class_loss<T: Into<f64> + Copy>(y: &[T], yhat: &[T], alpha: f64) -> Result<f64> {
    check_len(y.len(), yhat.len())?;
    check_alpha(alpha)?;
    let (inter, sum) = jaccard_sums(y, yhat);
    Ok((1.0 - (inter + alpha) / (sum - inter + alpha)) * alpha)
}

/// [`jaccard_class_loss`] and its gradient with respect to `yhat`.
pub fn jaccard_class_loss_grad<T: Into<f64> + Copy>(
    y: &[T],
    yhat: &[T],
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    check_len(y.len(), yhat.len())?;
    check_alpha(alpha)?;
    let (inter, sum) = jaccard_sums(y, yhat);
    let num = inter + alpha;
    let den = sum - inter + alpha;
    let loss = (1.0 - num / den) * alpha;
    // d(num/den)/dyhat_j = (y_j * den - num * (1 - y_j)) / den^2
    let grad = y
        .iter()
        .map(|&t| {
            let t: f64 = t.into();
            -alpha * (t * den - num * (1.0 - t)) / (den * den)
        })
        .collect();
    Ok((loss, grad))
}

/// Per-class Jaccard losses in class order.
pub fn class_losses<T: Into<f64> + Copy>(
    y: &[T],
    yhat: &[T],
    pixels: usize,
    alpha: f64,
) -> Result<[f64; NUM_CLASSES]> {
    check_maps(y, yhat, pixels)?;
    let mut out = [0.0; NUM_CLASSES];
    for (c, o) in out.iter_mut().enumerate() {
        let r = c * pixels..(c + 1) * pixels;
        *o = jaccard_class_loss(&y[r.clone()], &yhat[r], alpha)?;
    }
    Ok(out)
}

fn check_maps<T>(y: &[T], yhat: &[T], pixels: usize) -> Result<()> {
    check_len(y.len(), yhat.len())?;
    if y.len() != NUM_CLASSES * pixels {
        return Err(Error::ShapeMismatch(format!(
            "expected {} values for {pixels} pixels, got {}",
            NUM_CLASSES * pixels,
            y.len()
        )));
    }
    Ok(())
}

/// Mean categorical cross-entropy over pixels.
pub fn cross_entropy<T: Into<f64> + Copy>(y: &[T], yhat: &[T], pixels: usize) -> Result<f64> {
    check_maps(y, yhat, pixels)?;
    let s: f64 = y
        .iter()
        .zip(yhat)
        .map(|(&t, &p)| {
            let t: f64 = t.into();
            if t == 0.0 {
                0.0
            } else {
                -t * p.into().clamp(CE_EPSILON, 1.0).ln()
            }
        })
        .sum();
    Ok(s / pixels as f64)
}

/// Weighted Jaccard sum plus, when enabled, mean cross-entropy.
pub fn total_loss<T: Into<f64> + Copy>(
    y: &[T],
    yhat: &[T],
    pixels: usize,
    config: &LossConfig,
) -> Result<f64> {
    config.validate()?;
    let j = class_losses(y, yhat, pixels, config.alpha)?;
    let w = config.class_weights.in_class_order();
    let mut total: f64 = j.iter().zip(&w).map(|(a, b)| a * b).sum();
    if config.include_cross_entropy {
        total += cross_entropy(y, yhat, pixels)?;
    }
    Ok(total)
}

/// [`total_loss`] and its gradient with respect to `yhat`.
pub fn total_loss_grad<T: Into<f64> + Copy>(
    y: &[T],
    yhat: &[T],
    pixels: usize,
    config: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    config.validate()?;
    check_maps(y, yhat, pixels)?;
    let w = config.class_weights.in_class_order();
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    for (c, wc) in w.iter().enumerate() {
        let r = c * pixels..(c + 1) * pixels;
        let (l, g) = jaccard_class_loss_grad(&y[r.clone()], &yhat[r], config.alpha)?;
        total += wc * l;
        grad.extend(g.into_iter().map(|v| v * wc));
    }
    if config.include_cross_entropy {
        total += cross_entropy(y, yhat, pixels)?;
        let inv = 1.0 / pixels as f64;
        for ((g, &t), &p) in grad.iter_mut().zip(y).zip(yhat) {
            let (t, p): (f64, f64) = (t.into(), p.into());
            if t != 0.0 && p > CE_EPSILON {
                *g -= t / p * inv;
            }
        }
    }
    Ok((total, grad))
}

/// Expands a label map into class-major one-hot planes.
pub fn one_hot(codes: &[u8]) -> Vec<f32> {
    let p = codes.len();
    let mut out = vec![0.0; NUM_CLASSES * p];
    for (j, &c) in codes.iter().enumerate() {
        debug_assert!((c as usize) < NUM_CLASSES);
        out[c as usize * p + j] = 1.0;
    }
    out
}
