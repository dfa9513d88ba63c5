//! Smooth-L1 training objectives, plain and latitude weighted.

use serde::{Deserialize, Serialize};

use crate::erp::DistortionMap;
use crate::error::{Result, S3poError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// The plain double sum.
    Sum,
    /// Sum divided by `channels · Σψ`, so the scale does not depend on frame size.
    WeightedMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub beta: f64,
    /// Apply the latitude weights; `false` gives plain Smooth-L1.
    pub weighted: bool,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 1.0,
            weighted: true,
            reduction: Reduction::WeightedMean,
        }
    }
}

impl LossConfig {
    pub fn unweighted() -> Self {
        LossConfig {
            weighted: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(S3poError::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Smooth-L1 of a single residual.
#[inline]
pub fn smooth_l1_term(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

/// Derivative of [`smooth_l1_term`] with respect to `d`. At `|d| = beta` the
/// linear branch is used.
#[inline]
pub fn smooth_l1_slope(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

fn check(pred: &Tensor, gt: &Tensor, map: Option<&DistortionMap>) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(S3poError::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if let Some(m) = map {
        if m.height() != pred.height() || m.width() != pred.width() {
            return Err(S3poError::shape(format!(
                "weight map {}x{} vs frame {}x{}",
                m.height(),
                m.width(),
                pred.height(),
                pred.width()
            )));
        }
    }
    Ok(())
}

/// Per-row weight, honoring `cfg.weighted`.
fn row_weights(pred: &Tensor, map: &DistortionMap, cfg: &LossConfig) -> Vec<f64> {
    if cfg.weighted {
        map.row_weights().to_vec()
    } else {
        vec![1.0; pred.height()]
    }
}

fn reduction_factor(pred: &Tensor, rows: &[f64], cfg: &LossConfig) -> f64 {
    match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::WeightedMean => {
            let total: f64 = rows.iter().sum::<f64>() * (pred.width() * pred.channels()) as f64;
            1.0 / total
        }
    }
}

/// Unweighted Smooth-L1. `cfg.weighted` must be false.
pub fn smooth_l1(pred: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<f64> {
    if cfg.weighted {
        return Err(S3poError::invalid("smooth_l1 expects an unweighted loss configuration"));
    }
    check(pred, gt, None)?;
    let uniform = DistortionMap::uniform(pred.height(), pred.width(), 1.0)?;
    wss_l1(pred, gt, &uniform, cfg)
}

/// Weighted Spherically Smooth-L1: the Smooth-L1 term of every sample scaled by
/// the latitude weight of its row (broadcast over channels).
pub fn wss_l1(pred: &Tensor, gt: &Tensor, map: &DistortionMap, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    check(pred, gt, Some(map))?;
    let rows = row_weights(pred, map, cfg);
    let mut total = 0.0;
    for (y, &w) in rows.iter().enumerate() {
        let row: f64 = gt
            .row(y)
            .iter()
            .zip(pred.row(y))
            .map(|(g, p)| smooth_l1_term(g - p, cfg.beta))
            .sum();
        total += w * row;
    }
    Ok(total * reduction_factor(pred, &rows, cfg))
}

/// Gradient of [`wss_l1`] with respect to `pred`.
pub fn wss_l1_gradient(
    pred: &Tensor,
    gt: &Tensor,
    map: &DistortionMap,
    cfg: &LossConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    check(pred, gt, Some(map))?;
    let rows = row_weights(pred, map, cfg);
    let factor = reduction_factor(pred, &rows, cfg);
    let row_len = pred.width() * pred.channels();
    let mut grad = Tensor::zeros(pred.height(), pred.width(), pred.channels());
    for (y, &w) in rows.iter().enumerate() {
        let out = &mut grad.data_mut()[y * row_len..(y + 1) * row_len];
        for ((o, g), p) in out.iter_mut().zip(gt.row(y)).zip(pred.row(y)) {
            *o = -smooth_l1_slope(g - p, cfg.beta) * w * factor;
        }
    }
    Ok(grad)
}
