//! Full-reference quality metrics and spatiotemporal complexity.
//!
//! PSNR and SSIM follow their usual definitions. The `ws_` variants weight each
//! pixel (or SSIM window) by the latitude weight of its row so that the
//! over-sampled polar regions of an equirectangular frame count for less.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::erp::{channel_plane, rgb_to_luma, DistortionMap, ErpFrame, LumaPlane};
use crate::error::{Result, S3poError};
use crate::resample::gaussian_kernel_1d;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub peak: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Evaluate on BT.601 luma; otherwise average the metric over R, G and B.
    pub on_luma: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            peak: 1.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            on_luma: true,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0) {
            return Err(S3poError::invalid("peak must be positive"));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(S3poError::invalid("SSIM window must be odd and at least 3"));
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(S3poError::invalid("SSIM sigma must be positive"));
        }
        Ok(())
    }
}

fn check_pair(gt: &LumaPlane, hr: &LumaPlane) -> Result<()> {
    if gt.height() != hr.height() || gt.width() != hr.width() {
        return Err(S3poError::shape(format!(
            "reference is {}x{}, test is {}x{}",
            gt.height(),
            gt.width(),
            hr.height(),
            hr.width()
        )));
    }
    Ok(())
}

fn check_map(gt: &LumaPlane, map: &DistortionMap) -> Result<()> {
    if map.height() != gt.height() || map.width() != gt.width() {
        return Err(S3poError::shape(format!(
            "weight map is {}x{}, planes are {}x{}",
            map.height(),
            map.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// PSNR in dB. Identical planes give `f64::INFINITY`.
pub fn psnr(gt: &LumaPlane, hr: &LumaPlane, cfg: &MetricConfig) -> Result<f64> {
    check_pair(gt, hr)?;
    let sse: f64 = gt
        .values()
        .iter()
        .zip(hr.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(psnr_from_mse(sse / gt.values().len() as f64, cfg.peak))
}

/// Latitude-weighted PSNR in dB.
pub fn ws_psnr(
    gt: &LumaPlane,
    hr: &LumaPlane,
    map: &DistortionMap,
    cfg: &MetricConfig,
) -> Result<f64> {
    check_pair(gt, hr)?;
    check_map(gt, map)?;
    let w = gt.width();
    let mut weighted = 0.0;
    for y in 0..gt.height() {
        let row: f64 = (0..w)
            .map(|x| {
                let d = gt.at(y, x) - hr.at(y, x);
                d * d
            })
            .sum();
        weighted += map.row_weight(y) * row;
    }
    Ok(psnr_from_mse(weighted / map.total(), cfg.peak))
}

/// SSIM values at every valid window position, row-major.
struct SsimMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// Valid-mode separable filtering of a plane.
fn filter_valid(values: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            horiz[y * ow + x] = (0..n).map(|i| k[i] * values[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * horiz[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_map(gt: &LumaPlane, hr: &LumaPlane, cfg: &MetricConfig) -> Result<SsimMap> {
    cfg.validate()?;
    check_pair(gt, hr)?;
    let n = cfg.ssim_window;
    let (h, w) = (gt.height(), gt.width());
    if h < n || w < n {
        return Err(S3poError::invalid(format!(
            "{h}x{w} plane is smaller than the {n}x{n} SSIM window"
        )));
    }
    let k = gaussian_kernel_1d(n, cfg.ssim_sigma);
    let x = gt.values();
    let y = hr.values();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();

    let mu_x = filter_valid(x, h, w, &k);
    let mu_y = filter_valid(y, h, w, &k);
    let s_xx = filter_valid(&xx, h, w, &k);
    let s_yy = filter_valid(&yy, h, w, &k);
    let s_xy = filter_valid(&xy, h, w, &k);

    let c1 = (cfg.k1 * cfg.peak).powi(2);
    let c2 = (cfg.k2 * cfg.peak).powi(2);
    let values = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = s_xx[i] - mx * mx;
            let vy = s_yy[i] - my * my;
            let cov = s_xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .collect();
    Ok(SsimMap {
        rows: h + 1 - n,
        cols: w + 1 - n,
        values,
    })
}

/// Mean SSIM over valid window positions with a Gaussian window.
pub fn ssim(gt: &LumaPlane, hr: &LumaPlane, cfg: &MetricConfig) -> Result<f64> {
    let m = ssim_map(gt, hr, cfg)?;
    Ok(m.values.iter().sum::<f64>() / m.values.len() as f64)
}

/// SSIM map averaged with the latitude weight of each window's center row.
pub fn ws_ssim(
    gt: &LumaPlane,
    hr: &LumaPlane,
    map: &DistortionMap,
    cfg: &MetricConfig,
) -> Result<f64> {
    check_map(gt, map)?;
    let m = ssim_map(gt, hr, cfg)?;
    let half = cfg.ssim_window / 2;
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..m.rows {
        let wgt = map.row_weight(r + half);
        let row: f64 = m.values[r * m.cols..(r + 1) * m.cols].iter().sum();
        num += wgt * row;
        den += wgt * m.cols as f64;
    }
    Ok(num / den)
}

/// One frame's scores. `psnr` and `ws_psnr` may be `+inf` for exact matches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_index: usize,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub ws_psnr: f64,
    pub ws_ssim: f64,
}

/// Infinite PSNR is written as the string `"inf"`; JSON has no infinity.
pub fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("nan")
    }
}

/// Inverse of [`serialize_db`].
pub fn deserialize_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) => match t.as_str() {
            "inf" => Ok(f64::INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {other:?}"))),
        },
    }
}

pub fn format_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v > 0.0 {
        "inf".to_owned()
    } else {
        "nan".to_owned()
    }
}

/// Clip-level averages. Infinite PSNR frames are left out of the PSNR means
/// and counted in the `*_excluded` fields; if every frame is infinite the mean
/// itself is reported as infinite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub ws_psnr: f64,
    pub ws_ssim: f64,
    pub psnr_excluded: usize,
    pub ws_psnr_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clip_id: String,
    pub per_frame: Vec<FrameMetrics>,
    pub means: MetricMeans,
}

fn finite_mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = 0usize;
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        } else {
            excluded += 1;
        }
    }
    if n == 0 {
        (f64::INFINITY, excluded)
    } else {
        (sum / n as f64, excluded)
    }
}

impl MetricMeans {
    pub fn from_frames(frames: &[FrameMetrics]) -> MetricMeans {
        let n = frames.len().max(1) as f64;
        let (psnr, psnr_excluded) = finite_mean(frames.iter().map(|f| f.psnr));
        let (ws_psnr, ws_psnr_excluded) = finite_mean(frames.iter().map(|f| f.ws_psnr));
        MetricMeans {
            psnr,
            ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
            ws_psnr,
            ws_ssim: frames.iter().map(|f| f.ws_ssim).sum::<f64>() / n,
            psnr_excluded,
            ws_psnr_excluded,
        }
    }
}

impl MetricReport {
    pub fn new(clip_id: impl Into<String>, per_frame: Vec<FrameMetrics>) -> Self {
        let means = MetricMeans::from_frames(&per_frame);
        MetricReport {
            clip_id: clip_id.into(),
            per_frame,
            means,
        }
    }
}

/// Scores one frame pair. The weight map is built from the frame size.
pub fn frame_metrics(
    index: usize,
    gt: &ErpFrame,
    hr: &ErpFrame,
    cfg: &MetricConfig,
) -> Result<FrameMetrics> {
    if gt.height() != hr.height() || gt.width() != hr.width() {
        return Err(S3poError::shape(format!(
            "frame {index}: reference {}x{} vs test {}x{}",
            gt.height(),
            gt.width(),
            hr.height(),
            hr.width()
        )));
    }
    let map = crate::erp::build_distortion_map(gt.height(), gt.width())?;
    let planes: Vec<(LumaPlane, LumaPlane)> = if cfg.on_luma {
        vec![(rgb_to_luma(gt)?, rgb_to_luma(hr)?)]
    } else {
        (0..3)
            .map(|k| (channel_plane(gt, k), channel_plane(hr, k)))
            .collect()
    };
    let n = planes.len() as f64;
    let mut acc = [0.0; 4];
    for (g, h) in &planes {
        acc[0] += psnr(g, h, cfg)?;
        acc[1] += ssim(g, h, cfg)?;
        acc[2] += ws_psnr(g, h, &map, cfg)?;
        acc[3] += ws_ssim(g, h, &map, cfg)?;
    }
    Ok(FrameMetrics {
        frame_index: index,
        psnr: acc[0] / n,
        ssim: acc[1] / n,
        ws_psnr: acc[2] / n,
        ws_ssim: acc[3] / n,
    })
}

/// Scores a whole clip frame by frame.
pub fn clip_report(
    clip_id: &str,
    gt: &[ErpFrame],
    hr: &[ErpFrame],
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    if gt.len() != hr.len() {
        return Err(S3poError::shape(format!(
            "clip {clip_id}: {} reference frames vs {} test frames",
            gt.len(),
            hr.len()
        )));
    }
    if gt.is_empty() {
        return Err(S3poError::invalid(format!("clip {clip_id} has no frames")));
    }
    let per_frame = gt
        .iter()
        .zip(hr)
        .enumerate()
        .map(|(i, (g, h))| frame_metrics(i, g, h, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new(clip_id, per_frame))
}

/// Spatial and temporal information of a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityStats {
    pub si: f64,
    pub ti: f64,
    pub per_frame_si: Vec<f64>,
    pub per_frame_ti: Vec<f64>,
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    var.sqrt()
}

/// Standard deviation of the Sobel gradient magnitude over interior pixels,
/// on a `[0, 255]` luma scale.
fn spatial_information(luma: &[f64], h: usize, w: usize) -> f64 {
    if h < 3 || w < 3 {
        return 0.0;
    }
    let at = |y: usize, x: usize| luma[y * w + x];
    let mut mags = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mags.push((gx * gx + gy * gy).sqrt());
        }
    }
    population_std(mags.iter().copied())
}

/// SI/TI complexity indices. TI is zero for single-frame clips.
pub fn si_ti(frames: &[ErpFrame]) -> Result<ComplexityStats> {
    let first = frames
        .first()
        .ok_or_else(|| S3poError::invalid("SI/TI of an empty clip"))?;
    let (h, w) = (first.height(), first.width());
    let lumas = frames
        .iter()
        .map(|f| {
            if f.height() != h || f.width() != w {
                return Err(S3poError::shape("clip frames differ in size"));
            }
            Ok(rgb_to_luma(f)?
                .values()
                .iter()
                .map(|v| v * 255.0)
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;

    let per_frame_si: Vec<f64> = lumas.iter().map(|l| spatial_information(l, h, w)).collect();
    let per_frame_ti: Vec<f64> = lumas
        .windows(2)
        .map(|p| population_std(p[1].iter().zip(&p[0]).map(|(a, b)| a - b)))
        .collect();
    Ok(ComplexityStats {
        si: per_frame_si.iter().copied().fold(0.0, f64::max),
        ti: per_frame_ti.iter().copied().fold(0.0, f64::max),
        per_frame_si,
        per_frame_ti,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::erp::build_distortion_map;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(h: usize, w: usize, rng: &mut ChaCha8Rng) -> LumaPlane {
        LumaPlane::from_fn(h, w, |_, _| rng.gen::<f64>())
    }

    fn constant_plane(h: usize, w: usize, v: f64) -> LumaPlane {
        LumaPlane::from_fn(h, w, |_, _| v)
    }

    /// Direct per-window SSIM with an explicit 2D kernel.
    fn brute_ssim_map(gt: &LumaPlane, hr: &LumaPlane, cfg: &MetricConfig) -> Vec<Vec<f64>> {
        let n = cfg.ssim_window;
        let half = (n / 2) as f64;
        let mut k2 = vec![vec![0.0; n]; n];
        let mut total = 0.0;
        for (i, row) in k2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - half, j as f64 - half);
                *v = (-(di * di + dj * dj) / (2.0 * cfg.ssim_sigma.powi(2))).exp();
                total += *v;
            }
        }
        let c1 = (cfg.k1 * cfg.peak).powi(2);
        let c2 = (cfg.k2 * cfg.peak).powi(2);
        let mut out = Vec::new();
        for y0 in 0..=gt.height() - n {
            let mut row = Vec::new();
            for x0 in 0..=gt.width() - n {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let w = k2[i][j] / total;
                        mx += w * gt.at(y0 + i, x0 + j);
                        my += w * hr.at(y0 + i, x0 + j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let w = k2[i][j] / total;
                        let a = gt.at(y0 + i, x0 + j) - mx;
                        let b = hr.at(y0 + i, x0 + j) - my;
                        vx += w * a * a;
                        vy += w * b * b;
                        cov += w * a * b;
                    }
                }
                row.push(
                    ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)),
                );
            }
            out.push(row);
        }
        out
    }

    #[test]
    fn psnr_reference_values() {
        let cfg = MetricConfig::default();
        let a = constant_plane(8, 8, 0.3);
        assert_eq!(psnr(&a, &a, &cfg).unwrap(), f64::INFINITY);
        let b = constant_plane(8, 8, 0.4);
        assert!((psnr(&a, &b, &cfg).unwrap() - 20.0).abs() < 1e-9);
        let c = constant_plane(8, 8, 0.8);
        assert!((psnr(&a, &c, &cfg).unwrap() - 6.020599913279624).abs() < 1e-9);
        assert!(psnr(&a, &constant_plane(8, 9, 0.3), &cfg).is_err());
    }

    #[test]
    fn psnr_decreases_with_error() {
        let cfg = MetricConfig::default();
        let a = constant_plane(4, 4, 0.2);
        let mut last = f64::INFINITY;
        for step in 1..10 {
            let b = constant_plane(4, 4, 0.2 + step as f64 * 0.05);
            let p = psnr(&a, &b, &cfg).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ws_psnr_uniform_map_matches_psnr() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = MetricConfig::default();
        let (a, b) = (random_plane(12, 20, &mut rng), random_plane(12, 20, &mut rng));
        let map = DistortionMap::uniform(12, 20, 3.5).unwrap();
        let d = ws_psnr(&a, &b, &map, &cfg).unwrap() - psnr(&a, &b, &cfg).unwrap();
        assert!(d.abs() < 1e-9);
    }

    #[test]
    fn ws_psnr_penalizes_equator_more_than_pole() {
        let cfg = MetricConfig::default();
        let map = build_distortion_map(4, 6).unwrap();
        let gt = constant_plane(4, 6, 0.5);
        let pole = LumaPlane::from_fn(4, 6, |y, _| if y == 0 { 0.7 } else { 0.5 });
        let equator = LumaPlane::from_fn(4, 6, |y, _| if y == 1 { 0.7 } else { 0.5 });
        let p = ws_psnr(&gt, &pole, &map, &cfg).unwrap();
        let e = ws_psnr(&gt, &equator, &map, &cfg).unwrap();
        assert!(p > e);
        // Ratio of weighted errors equals the ratio of the row weights.
        let ratio = 10f64.powf((p - e) / 10.0);
        assert!((ratio - 0.9238795325112867 / 0.3826834323650898).abs() < 1e-9);
        assert_eq!(ws_psnr(&gt, &gt, &map, &cfg).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = MetricConfig::default();
        let a = random_plane(16, 16, &mut rng);
        let b = LumaPlane::from_fn(16, 16, |y, x| (a.at(y, x) + 0.2 * rng.gen::<f64>()).min(1.0));
        let brute = brute_ssim_map(&a, &b, &cfg);
        let flat: Vec<f64> = brute.iter().flatten().copied().collect();
        let expected = flat.iter().sum::<f64>() / flat.len() as f64;
        assert!((ssim(&a, &b, &cfg).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_reference_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = MetricConfig::default();
        let a = random_plane(16, 16, &mut rng);
        assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let c = constant_plane(16, 16, 0.5);
        assert!((ssim(&c, &c, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let inv = LumaPlane::from_fn(16, 16, |y, x| 1.0 - a.at(y, x));
        let s = ssim(&a, &inv, &cfg).unwrap();
        let brute = brute_ssim_map(&a, &inv, &cfg);
        let flat: Vec<f64> = brute.iter().flatten().copied().collect();
        assert!((s - flat.iter().sum::<f64>() / flat.len() as f64).abs() < 1e-12);
        assert!(s < 0.0);
        assert!(ssim(&constant_plane(10, 16, 0.1), &constant_plane(10, 16, 0.1), &cfg).is_err());
    }

    #[test]
    fn ws_ssim_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = MetricConfig::default();
        let a = random_plane(32, 24, &mut rng);
        let b = random_plane(32, 24, &mut rng);
        let uniform = DistortionMap::uniform(32, 24, 0.25).unwrap();
        let d = ws_ssim(&a, &b, &uniform, &cfg).unwrap() - ssim(&a, &b, &cfg).unwrap();
        assert!(d.abs() < 1e-12);
        let map = build_distortion_map(32, 24).unwrap();
        assert!((ws_ssim(&a, &a, &map, &cfg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ws_ssim_matches_weighted_brute_force_and_prefers_polar_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = MetricConfig::default();
        let (h, w) = (32, 24);
        let gt = random_plane(h, w, &mut rng);
        let noise: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>() - 0.5).collect();
        let distort = |rows: std::ops::Range<usize>| {
            LumaPlane::from_fn(h, w, |y, x| {
                if rows.contains(&y) {
                    (gt.at(y, x) + 0.6 * noise[y * w + x]).clamp(0.0, 1.0)
                } else {
                    gt.at(y, x)
                }
            })
        };
        let map = build_distortion_map(h, w).unwrap();
        let brute_ws = |hr: &LumaPlane| {
            let m = brute_ssim_map(&gt, hr, &cfg);
            let (mut num, mut den) = (0.0, 0.0);
            for (r, row) in m.iter().enumerate() {
                for v in row {
                    num += v * map.weight(r + 5, 0);
                    den += map.weight(r + 5, 0);
                }
            }
            num / den
        };
        let pole = distort(0..6);
        let equator = distort(13..19);
        let sp = ws_ssim(&gt, &pole, &map, &cfg).unwrap();
        let se = ws_ssim(&gt, &equator, &map, &cfg).unwrap();
        assert!((sp - brute_ws(&pole)).abs() < 1e-12);
        assert!((se - brute_ws(&equator)).abs() < 1e-12);
        assert!(se < sp);
    }

    #[test]
    fn metrics_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = MetricConfig::default();
        let (a, b) = (random_plane(16, 16, &mut rng), random_plane(16, 16, &mut rng));
        let map = build_distortion_map(16, 16).unwrap();
        for _ in 0..3 {
            assert_eq!(
                ws_ssim(&a, &b, &map, &cfg).unwrap().to_bits(),
                ws_ssim(&a, &b, &map, &cfg).unwrap().to_bits()
            );
        }
    }

    fn gray_frame(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ErpFrame {
        ErpFrame::new(Tensor::from_fn(h, w, 3, |y, x, _| f(y, x))).unwrap()
    }

    #[test]
    fn si_ti_cases() {
        let flat = vec![gray_frame(8, 8, |_, _| 0.4); 3];
        let s = si_ti(&flat).unwrap();
        assert_eq!((s.si, s.ti), (0.0, 0.0));

        let textured = gray_frame(8, 8, |y, x| ((x * 7 + y * 3) % 5) as f64 / 5.0);
        let s = si_ti(&[textured.clone(), textured.clone()]).unwrap();
        assert!(s.si > 0.0);
        assert_eq!(s.ti, 0.0);
        assert_eq!(s.per_frame_ti.len(), 1);

        // A uniform brightness change has zero temporal standard deviation.
        let brighter = gray_frame(8, 8, |y, x| ((x * 7 + y * 3) % 5) as f64 / 5.0 * 0.5 + 10.0 / 255.0);
        let base = gray_frame(8, 8, |y, x| ((x * 7 + y * 3) % 5) as f64 / 5.0 * 0.5);
        let s = si_ti(&[base, brighter]).unwrap();
        assert!(s.ti < 1e-9);

        let single = si_ti(&[textured]).unwrap();
        assert_eq!(single.ti, 0.0);
        assert!(single.per_frame_ti.is_empty());
        assert!(si_ti(&[]).is_err());
    }

    #[test]
    fn means_exclude_infinite_psnr() {
        let frames = vec![
            FrameMetrics { frame_index: 0, psnr: 30.0, ssim: 0.9, ws_psnr: 29.0, ws_ssim: 0.8 },
            FrameMetrics { frame_index: 1, psnr: f64::INFINITY, ssim: 1.0, ws_psnr: f64::INFINITY, ws_ssim: 1.0 },
        ];
        let m = MetricMeans::from_frames(&frames);
        assert_eq!((m.psnr, m.psnr_excluded), (30.0, 1));
        assert_eq!((m.ws_psnr, m.ws_psnr_excluded), (29.0, 1));
        assert!((m.ssim - 0.95).abs() < 1e-15);
        let json = serde_json::to_string(&frames[1]).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""));
    }
}
