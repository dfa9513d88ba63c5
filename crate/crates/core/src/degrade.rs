//! Synthesis of low-resolution inputs from ground-truth frames.
//!
//! Two pipelines are provided: bicubic downscaling (BI) and Gaussian blur
//! followed by decimation (BD). Both operate on each channel independently.

use serde::{Deserialize, Serialize};

use crate::erp::ErpFrame;
use crate::error::{Result, S3poError};
use crate::resample::{bicubic_resize, gaussian_kernel_1d, separable_blur, Padding};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationMode {
    Bi,
    Bd,
}

impl DegradationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DegradationMode::Bi => "bi",
            DegradationMode::Bd => "bd",
        }
    }
}

impl std::fmt::Display for DegradationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DegradationMode {
    type Err = S3poError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bi" => Ok(DegradationMode::Bi),
            "bd" => Ok(DegradationMode::Bd),
            other => Err(S3poError::invalid(format!("unknown degradation `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    pub mode: DegradationMode,
    pub scale: usize,
    pub blur_sigma: f64,
    pub kernel_size: usize,
    pub horizontal_padding: Padding,
    pub vertical_padding: Padding,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            mode: DegradationMode::Bd,
            scale: 4,
            blur_sigma: 1.6,
            kernel_size: 13,
            horizontal_padding: Padding::Wrap,
            vertical_padding: Padding::Replicate,
        }
    }
}

impl DegradationConfig {
    pub fn bi(scale: usize) -> Self {
        DegradationConfig {
            mode: DegradationMode::Bi,
            scale,
            ..Default::default()
        }
    }

    pub fn bd(scale: usize) -> Self {
        DegradationConfig {
            mode: DegradationMode::Bd,
            scale,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(S3poError::invalid("scale must be at least 1"));
        }
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(S3poError::invalid("blur sigma must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(S3poError::invalid(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.horizontal_padding == Padding::Replicate {
            return Err(S3poError::invalid("horizontal padding must be wrap or reflect"));
        }
        if self.vertical_padding == Padding::Wrap {
            return Err(S3poError::invalid("vertical padding must be replicate or reflect"));
        }
        Ok(())
    }

    fn check_frame(&self, frame: &ErpFrame) -> Result<()> {
        self.validate()?;
        if frame.height() % self.scale != 0 || frame.width() % self.scale != 0 {
            return Err(S3poError::invalid(format!(
                "{}x{} is not divisible by scale {}",
                frame.height(),
                frame.width(),
                self.scale
            )));
        }
        Ok(())
    }

    /// The normalized 2D blur kernel used by BD, row-major `k×k`.
    pub fn blur_kernel(&self) -> Vec<f64> {
        let k1 = gaussian_kernel_1d(self.kernel_size, self.blur_sigma);
        k1.iter()
            .flat_map(|a| k1.iter().map(move |b| a * b))
            .collect()
    }
}

/// Degrades with whichever pipeline `cfg.mode` selects.
pub fn degrade(frame: &ErpFrame, cfg: &DegradationConfig) -> Result<ErpFrame> {
    match cfg.mode {
        DegradationMode::Bi => degrade_bi(frame, cfg),
        DegradationMode::Bd => degrade_bd(frame, cfg),
    }
}

/// Anti-aliased bicubic downscaling by `cfg.scale`, clamped to `[0, 1]`.
pub fn degrade_bi(frame: &ErpFrame, cfg: &DegradationConfig) -> Result<ErpFrame> {
    if cfg.mode != DegradationMode::Bi {
        return Err(S3poError::invalid("degrade_bi called with a BD configuration"));
    }
    cfg.check_frame(frame)?;
    let out = bicubic_resize(
        frame.pixels(),
        frame.height() / cfg.scale,
        frame.width() / cfg.scale,
        cfg.horizontal_padding,
        cfg.vertical_padding,
    )?;
    ErpFrame::new(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Gaussian blur followed by keeping every `scale`-th sample from index 0.
pub fn degrade_bd(frame: &ErpFrame, cfg: &DegradationConfig) -> Result<ErpFrame> {
    if cfg.mode != DegradationMode::Bd {
        return Err(S3poError::invalid("degrade_bd called with a BI configuration"));
    }
    cfg.check_frame(frame)?;
    let kernel = gaussian_kernel_1d(cfg.kernel_size, cfg.blur_sigma);
    let blurred = separable_blur(
        frame.pixels(),
        &kernel,
        cfg.horizontal_padding,
        cfg.vertical_padding,
    );
    let s = cfg.scale;
    let out = Tensor::from_fn(frame.height() / s, frame.width() / s, 3, |y, x, c| {
        blurred.at(y * s, x * s, c).clamp(0.0, 1.0)
    });
    ErpFrame::new(out)
}

/// Bicubic `×scale` upsampling, the conventional baseline for comparisons.
pub fn bicubic_upsample(frame: &ErpFrame, scale: usize) -> Result<ErpFrame> {
    if scale == 0 {
        return Err(S3poError::invalid("scale must be at least 1"));
    }
    let out = bicubic_resize(
        frame.pixels(),
        frame.height() * scale,
        frame.width() * scale,
        Padding::Wrap,
        Padding::Replicate,
    )?;
    ErpFrame::new(out.map(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(h: usize, w: usize, seed: u64) -> ErpFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ErpFrame::new(Tensor::from_fn(h, w, 3, |_, _, _| rng.gen::<f64>())).unwrap()
    }

    fn shift_columns(f: &ErpFrame, by: usize) -> ErpFrame {
        let p = f.pixels();
        let w = p.width();
        ErpFrame::new(Tensor::from_fn(p.height(), w, 3, |y, x, c| {
            p.at(y, (x + w - by) % w, c)
        }))
        .unwrap()
    }

    #[test]
    fn paper_resolution_pair() {
        let gt = ErpFrame::constant(360, 480, 0.5).unwrap();
        for cfg in [DegradationConfig::bi(4), DegradationConfig::bd(4)] {
            let lr = degrade(&gt, &cfg).unwrap();
            assert_eq!((lr.height(), lr.width()), (90, 120));
        }
    }

    #[test]
    fn constant_frames_stay_constant() {
        let gt = ErpFrame::constant(16, 24, 0.625).unwrap();
        for cfg in [DegradationConfig::bi(4), DegradationConfig::bd(4)] {
            let lr = degrade(&gt, &cfg).unwrap();
            assert!(lr.pixels().data().iter().all(|v| (v - 0.625).abs() < 1e-12));
        }
    }

    #[test]
    fn indivisible_dimensions_fail() {
        let gt = ErpFrame::constant(10, 16, 0.5).unwrap();
        assert!(degrade_bi(&gt, &DegradationConfig::bi(4)).is_err());
        assert!(degrade_bd(&gt, &DegradationConfig::bd(4)).is_err());
    }

    #[test]
    fn mode_mismatch_fails() {
        let gt = ErpFrame::constant(8, 8, 0.5).unwrap();
        assert!(degrade_bi(&gt, &DegradationConfig::bd(4)).is_err());
        assert!(degrade_bd(&gt, &DegradationConfig::bi(4)).is_err());
    }

    #[test]
    fn even_kernel_rejected() {
        let cfg = DegradationConfig {
            kernel_size: 12,
            ..DegradationConfig::bd(4)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bi_is_translation_equivariant_under_wrap() {
        let cfg = DegradationConfig::bi(4);
        for seed in 0..3 {
            let f = random_frame(16, 32, seed);
            let a = degrade_bi(&shift_columns(&f, 4), &cfg).unwrap();
            let b = shift_columns(&degrade_bi(&f, &cfg).unwrap(), 1);
            assert!(a.pixels().max_abs_diff(b.pixels()) < 1e-12);
        }
    }

    #[test]
    fn bd_impulse_matches_direct_convolution() {
        // Direct 2D convolution oracle with explicit index arithmetic.
        let (h, w) = (24, 24);
        let cfg = DegradationConfig::bd(4);
        let mut t = Tensor::zeros(h, w, 3);
        for c in 0..3 {
            t.set(12, 12, c, 1.0);
        }
        let lr = degrade_bd(&ErpFrame::new(t).unwrap(), &cfg).unwrap();

        let k = cfg.blur_kernel();
        let ks = cfg.kernel_size as isize;
        let r = ks / 2;
        let mut mass = 0.0;
        for oy in 0..h / 4 {
            for ox in 0..w / 4 {
                let (y, x) = ((oy * 4) as isize, (ox * 4) as isize);
                let (dy, dx) = (12 - y + r, 12 - x + r);
                let expected = if (0..ks).contains(&dy) && (0..ks).contains(&dx) {
                    k[(dy * ks + dx) as usize]
                } else {
                    0.0
                };
                mass += expected;
                assert!((lr.pixels().at(oy, ox, 1) - expected).abs() < 1e-12);
            }
        }
        let lr_mass: f64 = (0..h / 4)
            .flat_map(|y| (0..w / 4).map(move |x| (y, x)))
            .map(|(y, x)| lr.pixels().at(y, x, 0))
            .sum();
        assert!((lr_mass - mass).abs() < 1e-12);
    }

    #[test]
    fn bd_kernel_normalized() {
        let k = DegradationConfig::default().blur_kernel();
        assert_eq!(k.len(), 169);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn channel_permutation_commutes() {
        let f = random_frame(16, 16, 7);
        let perm = |fr: &ErpFrame| {
            let p = fr.pixels();
            ErpFrame::new(Tensor::from_fn(p.height(), p.width(), 3, |y, x, c| {
                p.at(y, x, [2, 0, 1][c])
            }))
            .unwrap()
        };
        for cfg in [DegradationConfig::bi(4), DegradationConfig::bd(4)] {
            let a = degrade(&perm(&f), &cfg).unwrap();
            let b = perm(&degrade(&f, &cfg).unwrap());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let f = random_frame(32, 32, 3);
        for cfg in [DegradationConfig::bi(4), DegradationConfig::bd(4)] {
            let lr = degrade(&f, &cfg).unwrap();
            assert!(lr.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
