//! Separable resampling with explicit boundary handling.

use serde::{Deserialize, Serialize};

use crate::error::{Result, S3poError};
use crate::tensor::Tensor;

/// How samples outside the frame are fetched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Circular indexing. Equirectangular frames are continuous across the
    /// left and right edges.
    Wrap,
    /// Mirror without repeating the edge sample.
    Reflect,
    Replicate,
}

impl Padding {
    /// Maps a possibly out-of-range index into `0..n`.
    #[inline]
    pub fn resolve(self, i: isize, n: usize) -> usize {
        let n = n as isize;
        match self {
            Padding::Wrap => i.rem_euclid(n) as usize,
            Padding::Replicate => i.clamp(0, n - 1) as usize,
            Padding::Reflect => {
                if n == 1 {
                    return 0;
                }
                let period = 2 * (n - 1);
                let m = i.rem_euclid(period);
                (if m < n { m } else { period - m }) as usize
            }
        }
    }
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Normalized filter taps for one output sample.
#[derive(Clone, Debug)]
struct Taps {
    start: isize,
    weights: Vec<f64>,
}

/// Bicubic taps for resizing `n_in` samples to `n_out`. When shrinking, the
/// kernel is stretched by the scale factor so it acts as an anti-alias filter.
fn bicubic_taps(n_in: usize, n_out: usize) -> Vec<Taps> {
    let scale = n_in as f64 / n_out as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let start = (center - support - 0.5).floor() as isize;
            let end = (center + support + 0.5).ceil() as isize;
            let mut weights: Vec<f64> = (start..end)
                .map(|j| cubic((j as f64 + 0.5 - center) / stretch))
                .collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            Taps { start, weights }
        })
        .collect()
}

/// Bicubic resize to `out_h × out_w`. Rows are padded with `vertical`,
/// columns with `horizontal`.
pub fn bicubic_resize(
    t: &Tensor,
    out_h: usize,
    out_w: usize,
    horizontal: Padding,
    vertical: Padding,
) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(S3poError::invalid("resize target must be positive"));
    }
    let (h, w, c) = t.shape();
    let xt = bicubic_taps(w, out_w);
    let mut mid = Tensor::zeros(h, out_w, c);
    for y in 0..h {
        for (ox, taps) in xt.iter().enumerate() {
            for (k, &wt) in taps.weights.iter().enumerate() {
                let x = horizontal.resolve(taps.start + k as isize, w);
                for ch in 0..c {
                    let i = mid.index(y, ox, ch);
                    mid.data_mut()[i] += wt * t.at(y, x, ch);
                }
            }
        }
    }
    let yt = bicubic_taps(h, out_h);
    let mut out = Tensor::zeros(out_h, out_w, c);
    for (oy, taps) in yt.iter().enumerate() {
        for (k, &wt) in taps.weights.iter().enumerate() {
            let y = vertical.resolve(taps.start + k as isize, h);
            for x in 0..out_w {
                for ch in 0..c {
                    let i = out.index(oy, x, ch);
                    out.data_mut()[i] += wt * mid.at(y, x, ch);
                }
            }
        }
    }
    Ok(out)
}

/// Normalized 1D Gaussian of odd length `size`.
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable convolution with a symmetric odd-length kernel, same-size output.
pub fn separable_blur(
    t: &Tensor,
    kernel: &[f64],
    horizontal: Padding,
    vertical: Padding,
) -> Tensor {
    let (h, w, c) = t.shape();
    let r = (kernel.len() / 2) as isize;
    let mut mid = Tensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = horizontal.resolve(x as isize + k as isize - r, w);
                for ch in 0..c {
                    let i = mid.index(y, x, ch);
                    mid.data_mut()[i] += kv * t.at(y, sx, ch);
                }
            }
        }
    }
    let mut out = Tensor::zeros(h, w, c);
    for y in 0..h {
        for (k, &kv) in kernel.iter().enumerate() {
            let sy = vertical.resolve(y as isize + k as isize - r, h);
            for x in 0..w {
                for ch in 0..c {
                    let i = out.index(y, x, ch);
                    out.data_mut()[i] += kv * mid.at(sy, x, ch);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_modes() {
        assert_eq!(Padding::Wrap.resolve(-1, 5), 4);
        assert_eq!(Padding::Wrap.resolve(6, 5), 1);
        assert_eq!(Padding::Replicate.resolve(-3, 5), 0);
        assert_eq!(Padding::Replicate.resolve(9, 5), 4);
        assert_eq!(Padding::Reflect.resolve(-1, 5), 1);
        assert_eq!(Padding::Reflect.resolve(5, 5), 3);
        assert_eq!(Padding::Reflect.resolve(-2, 1), 0);
    }

    #[test]
    fn cubic_kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn taps_are_normalized() {
        for (n_in, n_out) in [(16, 4), (4, 16), (1920, 360), (7, 7)] {
            for t in bicubic_taps(n_in, n_out) {
                assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_sums_to_one() {
        let k = gaussian_kernel_1d(13, 1.6);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k[0], k[12]);
    }
}
