//! Equirectangular geometry and pixel primitives.
//!
//! Everything here is a pure function of its inputs. Frames are stored as
//! `H×W×3` tensors with values in `[0, 1]`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, S3poError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    YCbCr,
}

/// One equirectangular video frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ErpFrame {
    pixels: Tensor,
    colorspace: ColorSpace,
}

impl ErpFrame {
    /// Wraps a three-channel RGB tensor.
    pub fn new(pixels: Tensor) -> Result<Self> {
        Self::with_colorspace(pixels, ColorSpace::Rgb)
    }

    pub fn with_colorspace(pixels: Tensor, colorspace: ColorSpace) -> Result<Self> {
        if pixels.channels() != 3 {
            return Err(S3poError::shape(format!(
                "a frame needs 3 channels, got {}",
                pixels.channels()
            )));
        }
        if pixels.height() == 0 || pixels.width() == 0 {
            return Err(S3poError::invalid("frame dimensions must be positive"));
        }
        Ok(ErpFrame { pixels, colorspace })
    }

    /// Builds a frame from an arbitrary tensor after clamping into `[0, 1]`.
    /// Non-finite values are rejected.
    pub fn normalized(pixels: Tensor) -> Result<Self> {
        if !pixels.all_finite() {
            return Err(S3poError::Numeric("frame contains non-finite values".into()));
        }
        Self::new(pixels.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::filled(height, width, 3, value))
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }
}

/// Per-pixel latitude weights. Every column of a row carries the same weight,
/// so only the row profile is stored.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortionMap {
    width: usize,
    rows: Vec<f64>,
}

impl DistortionMap {
    /// A map with the same weight everywhere. Used for metamorphic checks
    /// against the unweighted metrics and losses.
    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(S3poError::invalid("distortion map dimensions must be positive"));
        }
        if !(value > 0.0 && value.is_finite()) {
            return Err(S3poError::invalid("uniform weight must be positive and finite"));
        }
        Ok(DistortionMap {
            width,
            rows: vec![value; height],
        })
    }

    pub fn height(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn row_weight(&self, row: usize) -> f64 {
        self.rows[row]
    }

    pub fn row_weights(&self) -> &[f64] {
        &self.rows
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        debug_assert!(col < self.width);
        self.rows[row]
    }

    /// Sum of all `H×W` weights.
    pub fn total(&self) -> f64 {
        self.rows.iter().sum::<f64>() * self.width as f64
    }

    pub fn scaled(&self, factor: f64) -> DistortionMap {
        DistortionMap {
            width: self.width,
            rows: self.rows.iter().map(|w| w * factor).collect(),
        }
    }
}

/// Cosine-of-latitude weight map for an `height × width` equirectangular frame.
///
/// Row `i` (zero-based) gets `cos((i + 0.5 - height/2) * PI / height)`, which
/// is the cosine of the latitude of the row's center.
pub fn build_distortion_map(height: usize, width: usize) -> Result<DistortionMap> {
    if height == 0 || width == 0 {
        return Err(S3poError::invalid(format!(
            "distortion map needs positive dimensions, got {height}x{width}"
        )));
    }
    let h = height as f64;
    let mut rows: Vec<f64> = (0..height)
        .map(|i| ((i as f64 + 0.5 - h / 2.0) * PI / h).cos())
        .collect();
    // cos is evaluated at mirrored angles; force exact symmetry so the map does
    // not depend on rounding of the two arguments.
    for i in 0..height / 2 {
        rows[height - 1 - i] = rows[i];
    }
    Ok(DistortionMap { width, rows })
}

/// Swaps the left and right halves of a frame.
pub fn cyclic_swap(frame: &ErpFrame) -> Result<ErpFrame> {
    Ok(ErpFrame {
        pixels: cyclic_swap_tensor(&frame.pixels)?,
        colorspace: frame.colorspace,
    })
}

/// Half-width circular column shift of any tensor. An involution.
pub fn cyclic_swap_tensor(t: &Tensor) -> Result<Tensor> {
    let w = t.width();
    if w % 2 != 0 {
        return Err(S3poError::UnsupportedGeometry(format!(
            "cyclic swap needs an even width, got {w}"
        )));
    }
    let half = w / 2;
    let c = t.channels();
    let mut out = Vec::with_capacity(t.len());
    for y in 0..t.height() {
        let row = t.row(y);
        out.extend_from_slice(&row[half * c..]);
        out.extend_from_slice(&row[..half * c]);
    }
    Tensor::from_vec(t.height(), w, c, out)
}

/// Depth-to-space: `H×W×(r²c)` to `rH×rW×c`.
///
/// `out(y, x, k) = in(y / r, x / r, k·r² + (y mod r)·r + (x mod r))`.
pub fn pixel_shuffle(feat: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(S3poError::invalid("shuffle factor must be positive"));
    }
    let rr = r * r;
    if feat.channels() % rr != 0 {
        return Err(S3poError::invalid(format!(
            "{} channels are not divisible by {r}^2",
            feat.channels()
        )));
    }
    let c_out = feat.channels() / rr;
    let (h, w) = (feat.height() * r, feat.width() * r);
    Ok(Tensor::from_fn(h, w, c_out, |y, x, k| {
        feat.at(y / r, x / r, k * rr + (y % r) * r + (x % r))
    }))
}

/// Space-to-depth, the exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(t: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(S3poError::invalid("unshuffle factor must be positive"));
    }
    if t.height() % r != 0 || t.width() % r != 0 {
        return Err(S3poError::invalid(format!(
            "{}x{} is not divisible by {r}",
            t.height(),
            t.width()
        )));
    }
    let rr = r * r;
    let c = t.channels();
    Ok(Tensor::from_fn(t.height() / r, t.width() / r, c * rr, |y, x, d| {
        let (k, sub) = (d / rr, d % rr);
        t.at(y * r + sub / r, x * r + sub % r, k)
    }))
}

/// A single-channel luma plane in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LumaPlane {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl LumaPlane {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(S3poError::shape(format!(
                "{} values for a {height}x{width} plane",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(S3poError::Numeric("luma plane contains non-finite values".into()));
        }
        Ok(LumaPlane {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        LumaPlane {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Half-width circular column shift.
    pub fn cyclic_swap(&self) -> Result<LumaPlane> {
        let t = Tensor::from_vec(self.height, self.width, 1, self.values.clone())?;
        let swapped = cyclic_swap_tensor(&t)?;
        Ok(LumaPlane {
            height: self.height,
            width: self.width,
            values: swapped.into_vec(),
        })
    }
}

/// BT.601 limited-range luma of an RGB frame, scaled back to `[0, 1]`.
pub fn rgb_to_luma(frame: &ErpFrame) -> Result<LumaPlane> {
    if frame.colorspace != ColorSpace::Rgb {
        return Err(S3poError::invalid("luma conversion expects an RGB frame"));
    }
    let p = &frame.pixels;
    Ok(LumaPlane::from_fn(p.height(), p.width(), |y, x| {
        let px = p.pixel(y, x);
        let luma = (65.481 * px[0] + 128.553 * px[1] + 24.966 * px[2] + 16.0) / 255.0;
        luma.clamp(0.0, 1.0)
    }))
}

/// Channel `k` of a frame as a plane. Used by the RGB-average metric mode.
pub fn channel_plane(frame: &ErpFrame, k: usize) -> LumaPlane {
    let p = &frame.pixels;
    LumaPlane::from_fn(p.height(), p.width(), |y, x| p.at(y, x, k))
}

/// Bilinear `×r` upsampling with half-pixel sample centers and edge clamping.
pub fn bilinear_upsample(frame: &ErpFrame, r: usize) -> Result<ErpFrame> {
    Ok(ErpFrame {
        pixels: bilinear_upsample_tensor(&frame.pixels, r)?,
        colorspace: frame.colorspace,
    })
}

pub fn bilinear_upsample_tensor(t: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(S3poError::invalid("upsampling factor must be positive"));
    }
    if r == 1 {
        return Ok(t.clone());
    }
    let ys = bilinear_taps(t.height(), r);
    let xs = bilinear_taps(t.width(), r);
    let c = t.channels();
    let mut out = Tensor::zeros(t.height() * r, t.width() * r, c);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for k in 0..c {
                let top = lerp(t.at(y0, x0, k), t.at(y0, x1, k), fx);
                let bottom = lerp(t.at(y1, x0, k), t.at(y1, x1, k), fx);
                out.set(oy, ox, k, lerp(top, bottom, fy));
            }
        }
    }
    Ok(out)
}

#[inline]
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    a + f * (b - a)
}

fn bilinear_taps(n: usize, r: usize) -> Vec<(usize, usize, f64)> {
    (0..n * r)
        .map(|o| {
            let src = ((o as f64 + 0.5) / r as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_frame(values: &[f64]) -> ErpFrame {
        ErpFrame::new(Tensor::from_fn(1, values.len(), 3, |_, x, _| values[x])).unwrap()
    }

    #[test]
    fn distortion_map_height_four() {
        let map = build_distortion_map(4, 2).unwrap();
        let expected = [0.38268, 0.92388, 0.92388, 0.38268];
        for (i, e) in expected.iter().enumerate() {
            for j in 0..2 {
                assert!((map.weight(i, j) - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn distortion_map_paper_resolution() {
        let map = build_distortion_map(360, 480).unwrap();
        assert!((map.row_weight(179) - 0.9999905).abs() < 1e-7);
        assert!((map.row_weight(0) - 0.004363).abs() < 1e-6);
        assert!(map.row_weights().iter().all(|&w| w > 0.0 && w <= 1.0));
    }

    #[test]
    fn distortion_map_single_row_and_errors() {
        let map = build_distortion_map(1, 5).unwrap();
        assert_eq!(map.row_weight(0), 1.0);
        assert!(build_distortion_map(0, 5).is_err());
        assert!(build_distortion_map(3, 0).is_err());
    }

    #[test]
    fn cyclic_swap_rotates_halves() {
        let f = row_frame(&[0.1, 0.2, 0.3, 0.4]);
        let s = cyclic_swap(&f).unwrap();
        let got: Vec<f64> = (0..4).map(|x| s.pixels().at(0, x, 0)).collect();
        assert_eq!(got, vec![0.3, 0.4, 0.1, 0.2]);
        assert_eq!(cyclic_swap(&s).unwrap(), f);
    }

    #[test]
    fn cyclic_swap_rejects_odd_width() {
        let f = row_frame(&[0.1, 0.2, 0.3]);
        assert!(matches!(
            cyclic_swap(&f),
            Err(S3poError::UnsupportedGeometry(_))
        ));
    }

    #[test]
    fn shuffle_hand_example() {
        let t = Tensor::from_vec(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = pixel_shuffle(&t, 2).unwrap();
        assert_eq!(s.shape(), (2, 2, 1));
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shuffle_shapes() {
        let t = Tensor::zeros(2, 3, 48);
        assert_eq!(pixel_shuffle(&t, 4).unwrap().shape(), (8, 12, 3));
        assert!(pixel_shuffle(&Tensor::zeros(2, 3, 47), 4).is_err());

        let frame = Tensor::zeros(480, 360, 3);
        assert_eq!(pixel_unshuffle(&frame, 4).unwrap().shape(), (120, 90, 48));
        assert!(pixel_unshuffle(&Tensor::zeros(5, 4, 3), 4).is_err());
    }

    #[test]
    fn luma_reference_colors() {
        let black = rgb_to_luma(&ErpFrame::constant(2, 2, 0.0).unwrap()).unwrap();
        assert!(black.values().iter().all(|&v| (v - 16.0 / 255.0).abs() < 1e-12));
        let white = rgb_to_luma(&ErpFrame::constant(2, 2, 1.0).unwrap()).unwrap();
        assert!(white.values().iter().all(|&v| (v - 235.0 / 255.0).abs() < 1e-5));
        let red = ErpFrame::new(Tensor::from_fn(1, 1, 3, |_, _, c| (c == 0) as u8 as f64)).unwrap();
        let y = rgb_to_luma(&red).unwrap();
        assert!((y.at(0, 0) - 0.31953).abs() < 1e-5);
    }

    #[test]
    fn luma_rejects_ycbcr() {
        let f = ErpFrame::with_colorspace(Tensor::zeros(1, 1, 3), ColorSpace::YCbCr).unwrap();
        assert!(rgb_to_luma(&f).is_err());
    }

    #[test]
    fn bilinear_half_pixel_row() {
        let up = bilinear_upsample(&row_frame(&[0.0, 1.0]), 2).unwrap();
        let got: Vec<f64> = (0..4).map(|x| up.pixels().at(0, x, 1)).collect();
        assert_eq!(got, vec![0.0, 0.25, 0.75, 1.0]);
        assert_eq!(up.height(), 2);
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let c = ErpFrame::constant(3, 5, 0.37).unwrap();
        let up = bilinear_upsample(&c, 4).unwrap();
        assert!(up.pixels().data().iter().all(|&v| v == 0.37));
        assert_eq!(bilinear_upsample(&c, 1).unwrap(), c);
    }
}
