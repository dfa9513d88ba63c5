//! Evaluation over clip directories and rendering of comparison tables and
//! bar charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_json, write_json};
use crate::datakit::{discover_clips, gt_dir, lr_dir_name, read_frames, DatasetManifest, Split, MANIFEST_FILE};
use crate::degrade::{bicubic_upsample, DegradationMode};
use crate::erp::ErpFrame;
use crate::error::{Result, S3poError};
use crate::metrics::{clip_report, deserialize_db, format_db, serialize_db, MetricConfig, MetricReport};

pub const BASELINE_NAME: &str = "bicubic";
pub const METRICS: [Metric; 4] = [Metric::Psnr, Metric::Ssim, Metric::WsPsnr, Metric::WsSsim];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    Ssim,
    WsPsnr,
    WsSsim,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::Psnr => "PSNR",
            Metric::Ssim => "SSIM",
            Metric::WsPsnr => "WS-PSNR",
            Metric::WsSsim => "WS-SSIM",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::WsPsnr => "ws_psnr",
            Metric::WsSsim => "ws_ssim",
        }
    }

    fn decimals(self) -> usize {
        match self {
            Metric::Psnr | Metric::WsPsnr => 2,
            Metric::Ssim | Metric::WsSsim => 4,
        }
    }

    fn of_report(self, r: &MetricReport) -> f64 {
        match self {
            Metric::Psnr => r.means.psnr,
            Metric::Ssim => r.means.ssim,
            Metric::WsPsnr => r.means.ws_psnr,
            Metric::WsSsim => r.means.ws_ssim,
        }
    }

    fn of_overall(self, o: &OverallMeans) -> f64 {
        match self {
            Metric::Psnr => o.psnr,
            Metric::Ssim => o.ssim,
            Metric::WsPsnr => o.ws_psnr,
            Metric::WsSsim => o.ws_ssim,
        }
    }
}

/// Arithmetic mean over clips of the per-clip means. Clips whose PSNR mean is
/// infinite are excluded and counted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallMeans {
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub ws_psnr: f64,
    pub ws_ssim: f64,
    pub psnr_excluded: usize,
    pub ws_psnr_excluded: usize,
}

impl OverallMeans {
    pub fn from_reports(reports: &[MetricReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let finite = |m: Metric| {
            let vals: Vec<f64> = reports.iter().map(|r| m.of_report(r)).collect();
            let kept: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
            let mean = if kept.is_empty() {
                f64::INFINITY
            } else {
                kept.iter().sum::<f64>() / kept.len() as f64
            };
            (mean, vals.len() - kept.len())
        };
        let (psnr, psnr_excluded) = finite(Metric::Psnr);
        let (ws_psnr, ws_psnr_excluded) = finite(Metric::WsPsnr);
        OverallMeans {
            psnr,
            ssim: reports.iter().map(|r| r.means.ssim).sum::<f64>() / n,
            ws_psnr,
            ws_ssim: reports.iter().map(|r| r.means.ws_ssim).sum::<f64>() / n,
            psnr_excluded,
            ws_psnr_excluded,
        }
    }
}

/// Scores of one model on every clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResults {
    pub name: String,
    pub reports: Vec<MetricReport>,
    pub overall: OverallMeans,
}

impl ModelResults {
    pub fn new(name: impl Into<String>, reports: Vec<MetricReport>) -> Self {
        let overall = OverallMeans::from_reports(&reports);
        ModelResults {
            name: name.into(),
            reports,
            overall,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub reports: Vec<ModelResults>,
    pub baseline_reports: Option<ModelResults>,
    pub table_paths: Vec<String>,
    pub plot_paths: Vec<String>,
    pub config_echo: serde_json::Value,
}

impl ReportBundle {
    /// Models followed by the baseline, if any.
    pub fn rows(&self) -> Vec<&ModelResults> {
        self.reports.iter().chain(self.baseline_reports.as_ref()).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// A clip as `(clip_id, frames)`.
pub type NamedClip = (String, Vec<ErpFrame>);

/// Scores `pred` against `gt`. Clip ids and frame counts must match exactly;
/// the error lists every offender.
pub fn evaluate_clips(gt: &[NamedClip], pred: &[NamedClip], cfg: &MetricConfig) -> Result<Vec<MetricReport>> {
    cfg.validate()?;
    let mut problems = Vec::new();
    for (id, frames) in gt {
        match pred.iter().find(|(p, _)| p == id) {
            None => problems.push(format!("{id} (missing prediction)")),
            Some((_, p)) if p.len() != frames.len() => {
                problems.push(format!("{id} ({} reference frames, {} predicted)", frames.len(), p.len()))
            }
            Some(_) => {}
        }
    }
    for (id, _) in pred {
        if !gt.iter().any(|(g, _)| g == id) {
            problems.push(format!("{id} (no reference clip)"));
        }
    }
    if !problems.is_empty() {
        return Err(S3poError::shape(format!("clip mismatch: {}", problems.join(", "))));
    }
    gt.par_iter()
        .map(|(id, frames)| {
            let (_, p) = pred.iter().find(|(p, _)| p == id).expect("checked above");
            clip_report(id, frames, p, cfg)
        })
        .collect()
}

/// Reads every clip under `dir` (see [`discover_clips`]).
pub fn read_clips(dir: &Path) -> Result<Vec<(NamedClip, PathBuf)>> {
    discover_clips(dir)?
        .into_iter()
        .map(|(id, path)| Ok(((id, read_frames(&path, None)?), path)))
        .collect()
}

/// Reference clips under `dir`. A dataset root with a manifest is restricted
/// to `split`; any other directory is scanned for clips.
pub fn reference_clips(dir: &Path, split: Split) -> Result<Vec<(NamedClip, PathBuf)>> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return read_clips(dir);
    }
    let manifest = DatasetManifest::load(dir)?;
    manifest
        .split_entries(split)
        .map(|e| {
            let path = gt_dir(dir, e);
            Ok(((e.clip_id.clone(), read_frames(&path, None)?), path))
        })
        .collect()
}

pub fn evaluate_dirs(gt_dir: &Path, pred_dir: &Path, split: Split, cfg: &MetricConfig) -> Result<Vec<MetricReport>> {
    let gt: Vec<NamedClip> = reference_clips(gt_dir, split)?.into_iter().map(|(c, _)| c).collect();
    let pred: Vec<NamedClip> = reference_clips(pred_dir, split)?.into_iter().map(|(c, _)| c).collect();
    evaluate_clips(&gt, &pred, cfg)
}

/// Bicubic upsampling of the stored LR frames of every reference clip,
/// scored against the reference.
pub fn bicubic_baseline(
    gt_dir: &Path,
    split: Split,
    mode: DegradationMode,
    scale: usize,
    cfg: &MetricConfig,
) -> Result<Vec<MetricReport>> {
    let clips = reference_clips(gt_dir, split)?;
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for ((id, frames), path) in clips {
        let lr_dir = path
            .parent()
            .map(|p| p.join(lr_dir_name(mode)))
            .filter(|p| p.is_dir())
            .ok_or_else(|| {
                S3poError::invalid(format!("clip {id} has no {} directory", lr_dir_name(mode)))
            })?;
        let up = read_frames(&lr_dir, None)?
            .iter()
            .map(|f| bicubic_upsample(f, scale))
            .collect::<Result<Vec<_>>>()?;
        gt.push((id.clone(), frames));
        pred.push((id, up));
    }
    evaluate_clips(&gt, &pred, cfg)
}

/// One CSV row per frame: model, clip_id, frame_index, psnr, ssim, ws_psnr,
/// ws_ssim.
pub fn write_csv(path: &Path, rows: &[&ModelResults]) -> Result<()> {
    let mut out = String::from("model,clip_id,frame_index,psnr,ssim,ws_psnr,ws_ssim\n");
    for m in rows {
        for r in &m.reports {
            for f in &r.per_frame {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    m.name,
                    r.clip_id,
                    f.frame_index,
                    format_db(f.psnr),
                    f.ssim,
                    format_db(f.ws_psnr),
                    f.ws_ssim
                );
            }
        }
    }
    fs::write(path, out).map_err(|e| S3poError::io(path, e))
}

fn display(v: f64, decimals: usize) -> String {
    if v.is_finite() {
        format!("{v:.decimals$}")
    } else {
        format_db(v)
    }
}

/// Markdown table of overall means, one row per model. With two or more
/// rows the best displayed value of each column is bolded, ties included.
pub fn markdown_table(rows: &[&ModelResults]) -> String {
    let mut out = String::from("| Model | PSNR | SSIM | WS-PSNR | WS-SSIM | PSNR excluded |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|\n");
    let best: Vec<Option<String>> = METRICS
        .iter()
        .map(|&m| {
            if rows.len() < 2 {
                return None;
            }
            rows.iter()
                .map(|r| m.of_overall(&r.overall))
                .filter(|v| !v.is_nan())
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
                .map(|v| display(v, m.decimals()))
        })
        .collect();
    for r in rows {
        let _ = write!(out, "| {} |", r.name);
        for (&m, b) in METRICS.iter().zip(&best) {
            let s = display(m.of_overall(&r.overall), m.decimals());
            if b.as_deref() == Some(s.as_str()) {
                let _ = write!(out, " **{s}** |");
            } else {
                let _ = write!(out, " {s} |");
            }
        }
        let _ = writeln!(out, " {} |", r.overall.psnr_excluded);
    }
    out
}

const PALETTE: [&str; 8] = [
    "#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb", "#000000",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// SVG bar chart of one metric: a group per clip, a bar per model.
pub fn bar_chart_svg(metric: Metric, rows: &[&ModelResults]) -> String {
    let clips: Vec<&str> = rows
        .first()
        .map(|r| r.reports.iter().map(|c| c.clip_id.as_str()).collect())
        .unwrap_or_default();
    let value = |r: &ModelResults, clip: &str| {
        r.reports
            .iter()
            .find(|c| c.clip_id == clip)
            .map(|c| metric.of_report(c))
            .filter(|v| v.is_finite())
    };
    let values: Vec<f64> = rows
        .iter()
        .flat_map(|r| clips.iter().filter_map(|c| value(r, c)))
        .collect();
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let (lo, hi) = if values.is_empty() {
        (0.0, 1.0)
    } else {
        let pad = ((hi - lo) * 0.1).max(1e-3);
        ((lo - pad).max(0.0), hi + pad)
    };

    let bar_w = 14.0;
    let group_w = bar_w * rows.len() as f64 + 16.0;
    let (left, top, plot_h) = (60.0, 30.0, 240.0);
    let width = left + group_w * clips.len().max(1) as f64 + 140.0;
    let height = top + plot_h + 90.0;
    let y_of = |v: f64| top + plot_h * (1.0 - (v - lo) / (hi - lo));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">{}</text>"#, metric.label());
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#,
        top + plot_h
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 4.0,
            y + 4.0,
            display(v, metric.decimals())
        );
    }
    for (g, clip) in clips.iter().enumerate() {
        let x0 = left + 8.0 + g as f64 * group_w;
        let _ = writeln!(s, r#"<g class="group" data-clip="{}">"#, escape(clip));
        for (i, r) in rows.iter().enumerate() {
            if let Some(v) = value(r, clip) {
                let y = y_of(v);
                let _ = writeln!(
                    s,
                    r#"<rect class="bar" x="{:.1}" y="{y:.1}" width="{bar_w}" height="{:.1}" fill="{}"><title>{} {}</title></rect>"#,
                    x0 + i as f64 * bar_w,
                    top + plot_h - y,
                    PALETTE[i % PALETTE.len()],
                    escape(&r.name),
                    display(v, metric.decimals())
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" transform="rotate(45 {:.1} {:.1})">{}</text>"#,
            x0,
            top + plot_h + 14.0,
            x0,
            top + plot_h + 14.0,
            escape(clip)
        );
        let _ = writeln!(s, "</g>");
    }
    let lx = left + group_w * clips.len().max(1) as f64 + 20.0;
    for (i, r) in rows.iter().enumerate() {
        let y = top + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{y:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            PALETTE[i % PALETTE.len()],
            lx + 14.0,
            y + 9.0,
            escape(&r.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Written report files.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Renders `report.md` and one `plot_<metric>.svg` per metric into `out_dir`.
pub fn render_report(rows: &[&ModelResults], out_dir: &Path) -> Result<ReportFiles> {
    if rows.is_empty() {
        return Err(S3poError::invalid("nothing to report: the bundle is empty"));
    }
    fs::create_dir_all(out_dir).map_err(|e| S3poError::io(out_dir, e))?;
    let table = out_dir.join("report.md");
    let mut md = String::from("# Evaluation\n\n");
    md.push_str(&markdown_table(rows));
    fs::write(&table, md).map_err(|e| S3poError::io(&table, e))?;
    let mut plots = Vec::new();
    for m in METRICS {
        let p = out_dir.join(format!("plot_{}.svg", m.slug()));
        fs::write(&p, bar_chart_svg(m, rows)).map_err(|e| S3poError::io(&p, e))?;
        plots.push(p);
    }
    Ok(ReportFiles { table, plots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::FrameMetrics;

    fn results(name: &str, clips: &[(&str, f64, f64)]) -> ModelResults {
        let reports = clips
            .iter()
            .map(|&(id, psnr, ssim)| {
                MetricReport::new(
                    id,
                    vec![FrameMetrics {
                        frame_index: 0,
                        psnr,
                        ssim,
                        ws_psnr: psnr - 1.0,
                        ws_ssim: ssim - 0.01,
                    }],
                )
            })
            .collect();
        ModelResults::new(name, reports)
    }

    #[test]
    fn overall_is_mean_of_clip_means() {
        let r = results("m", &[("a", 30.0, 0.9), ("b", 20.0, 0.7), ("c", f64::INFINITY, 1.0)]);
        assert_eq!(r.overall.psnr, 25.0);
        assert_eq!(r.overall.psnr_excluded, 1);
        assert!((r.overall.ssim - 0.8666666666666667).abs() < 1e-12);
    }

    #[test]
    fn single_model_has_no_bolding() {
        let a = results("a", &[("x", 30.0, 0.9)]);
        assert!(!markdown_table(&[&a]).contains("**"));
    }

    #[test]
    fn best_and_ties_are_bolded() {
        let a = results("a", &[("x", 30.0, 0.8227)]);
        let b = results("b", &[("x", 29.0, 0.8227)]);
        let t = markdown_table(&[&a, &b]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[2].contains("**30.00**"));
        assert!(!lines[3].contains("**29.00**"));
        assert!(lines[2].contains("**0.8227**") && lines[3].contains("**0.8227**"));
    }

    #[test]
    fn chart_has_a_group_per_clip_and_a_bar_per_model() {
        let clips = [("c1", 30.0, 0.9), ("c2", 31.0, 0.8), ("c3", 29.0, 0.7), ("c4", 28.0, 0.6)];
        let a = results("a", &clips);
        let b = results("b", &clips);
        let svg = bar_chart_svg(Metric::WsPsnr, &[&a, &b]);
        assert_eq!(svg.matches(r#"class="group""#).count(), 4);
        assert_eq!(svg.matches(r#"class="bar""#).count(), 8);
    }

    #[test]
    fn mismatched_clips_are_listed() {
        let f = ErpFrame::constant(4, 8, 0.5).unwrap();
        let gt = vec![("a".to_string(), vec![f.clone()]), ("b".to_string(), vec![f.clone()])];
        let pred = vec![("a".to_string(), vec![f.clone(), f.clone()]), ("c".to_string(), vec![f])];
        let msg = evaluate_clips(&gt, &pred, &MetricConfig::default()).unwrap_err().to_string();
        assert!(msg.contains("a (1 reference frames, 2 predicted)"));
        assert!(msg.contains("b (missing prediction)"));
        assert!(msg.contains("c (no reference clip)"));
    }

    #[test]
    fn bundle_json_round_trip_keeps_infinity() {
        let a = results("a", &[("x", f64::INFINITY, 1.0)]);
        let bundle = ReportBundle {
            reports: vec![a],
            baseline_reports: None,
            table_paths: vec![],
            plot_paths: vec![],
            config_echo: serde_json::Value::Null,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.json");
        bundle.save(&p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("\"inf\""));
        assert_eq!(ReportBundle::load(&p).unwrap(), bundle);
    }
}
