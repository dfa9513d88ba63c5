//! Dataset ingestion: frame extraction caps, resizing, train/test split and
//! low-resolution pairing, plus synthetic clip generators for testing.
//!
//! Layout under a dataset root:
//!
//! ```text
//! root/manifest.json
//! root/{train,test}/{clip_id}/gt/frame_00000.png
//! root/{train,test}/{clip_id}/lr_bd/frame_00000.png
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_json, write_json};
use crate::degrade::{degrade, DegradationConfig, DegradationMode};
use crate::erp::ErpFrame;
use crate::error::{Result, S3poError};
use crate::metrics::si_ti;
use crate::resample::{bicubic_resize, Padding};
use crate::tensor::Tensor;
use crate::trainer::TrainingClip;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GT_DIR: &str = "gt";
const FRAME_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Frame file name for index `i`.
pub fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

/// Name of the LR subdirectory for a degradation mode.
pub fn lr_dir_name(mode: DegradationMode) -> String {
    format!("lr_{}", mode.as_str())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSequence {
    pub clip_id: String,
    pub frames: Vec<ErpFrame>,
    /// `(height, width)` of the source frames.
    pub source_resolution: (usize, usize),
}

impl ClipSequence {
    pub fn new(clip_id: impl Into<String>, frames: Vec<ErpFrame>) -> Result<Self> {
        let clip_id = clip_id.into();
        let first = frames
            .first()
            .ok_or_else(|| S3poError::invalid(format!("clip {clip_id} has no frames")))?;
        let shape = (first.height(), first.width());
        if let Some(i) = frames
            .iter()
            .position(|f| (f.height(), f.width()) != shape)
        {
            return Err(S3poError::shape(format!(
                "clip {clip_id}: frame {i} differs in size from frame 0"
            )));
        }
        Ok(ClipSequence {
            clip_id,
            frames,
            source_resolution: shape,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub split: Split,
    pub frame_count: usize,
    /// `[height, width]` of the stored GT frames.
    pub resolution: [usize; 2],
    pub source_resolution: [usize; 2],
    pub si: f64,
    pub ti: f64,
    pub lr_available: BTreeMap<String, bool>,
}

/// A clip that was skipped or only partially processed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipIssue {
    pub clip_id: String,
    pub stage: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Root relative to the manifest file; always `.` for manifests written
    /// by this module.
    pub root: String,
    pub max_frames: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub split_seed: Option<u64>,
    pub entries: Vec<ManifestEntry>,
    pub issues: Vec<ClipIssue>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let m: DatasetManifest = read_json(&root.join(MANIFEST_FILE), MANIFEST_FILE)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(root).map_err(|e| S3poError::io(root, e))?;
        write_json(&root.join(MANIFEST_FILE), self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.clip_id) {
                return Err(S3poError::format(
                    MANIFEST_FILE,
                    format!("duplicate clip id {}", e.clip_id),
                ));
            }
        }
        Ok(())
    }

    pub fn entry(&self, clip_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.clip_id == clip_id)
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    fn recount(&mut self) {
        self.train_count = self.split_entries(Split::Train).count();
        self.test_count = self.split_entries(Split::Test).count();
    }

    fn set_issues(&mut self, stage: &str, mut issues: Vec<ClipIssue>) {
        self.issues.retain(|i| i.stage != stage);
        self.issues.append(&mut issues);
        self.issues
            .sort_by(|a, b| (&a.stage, &a.clip_id).cmp(&(&b.stage, &b.clip_id)));
    }
}

pub fn clip_dir(root: &Path, entry: &ManifestEntry) -> PathBuf {
    root.join(entry.split.as_str()).join(&entry.clip_id)
}

pub fn gt_dir(root: &Path, entry: &ManifestEntry) -> PathBuf {
    clip_dir(root, entry).join(GT_DIR)
}

pub fn lr_dir(root: &Path, entry: &ManifestEntry, mode: DegradationMode) -> PathBuf {
    clip_dir(root, entry).join(lr_dir_name(mode))
}

// ---------------------------------------------------------------- frame IO

/// Decodes an image file to an RGB frame in `[0, 1]`.
pub fn read_frame(path: &Path) -> Result<ErpFrame> {
    let img = image::open(path)
        .map_err(|source| S3poError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let data = raw.iter().map(|&b| b as f64 / 255.0).collect();
    ErpFrame::new(Tensor::from_vec(h, w, 3, data)?)
}

/// Encodes a frame as 8-bit RGB PNG, rounding and clamping each value.
pub fn write_frame(path: &Path, frame: &ErpFrame) -> Result<()> {
    let raw: Vec<u8> = frame.pixels().data().iter().map(|&v| to_u8(v)).collect();
    let img = image::RgbImage::from_raw(frame.width() as u32, frame.height() as u32, raw)
        .ok_or_else(|| S3poError::shape("frame buffer does not match its size"))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| S3poError::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The values a frame takes after an 8-bit PNG round trip.
pub fn quantize_8bit(frame: &ErpFrame) -> Result<ErpFrame> {
    ErpFrame::new(frame.pixels().map(|v| to_u8(v) as f64 / 255.0))
}

fn is_frame_file(p: &Path) -> bool {
    p.is_file()
        && p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files of a directory, ordered by the number embedded in their name
/// and then by name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| S3poError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| S3poError::io(dir, e))?.path();
        if is_frame_file(&p) {
            files.push(p);
        }
    }
    files.sort_by_key(|p| {
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let digits: String = name.chars().filter(|c| c.is_ascii_digit()).collect();
        (digits.parse::<u128>().ok(), name)
    });
    Ok(files)
}

pub fn read_frames(dir: &Path, limit: Option<usize>) -> Result<Vec<ErpFrame>> {
    let mut files = list_frames(dir)?;
    if let Some(n) = limit {
        files.truncate(n);
    }
    files.iter().map(|p| read_frame(p)).collect()
}

/// Replaces the frames in `dir` with `frames` named `frame_%05d.png`.
pub fn write_frames(dir: &Path, frames: &[ErpFrame]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| S3poError::io(dir, e))?;
    for old in list_frames(dir)? {
        fs::remove_file(&old).map_err(|e| S3poError::io(&old, e))?;
    }
    for (i, f) in frames.iter().enumerate() {
        write_frame(&dir.join(frame_name(i)), f)?;
    }
    Ok(())
}

/// Finds clip directories under `dir`: any directory holding image files.
/// A directory named `gt` takes the name of its parent; `lr_*` directories
/// are ignored. Returns `(clip_id, frames_dir)` sorted by id.
pub fn discover_clips(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    fn walk(dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        let mut subdirs = Vec::new();
        let mut has_frames = false;
        for entry in fs::read_dir(dir).map_err(|e| S3poError::io(dir, e))? {
            let p = entry.map_err(|e| S3poError::io(dir, e))?.path();
            if p.is_dir() {
                subdirs.push(p);
            } else if is_frame_file(&p) {
                has_frames = true;
            }
        }
        let name = |p: &Path| p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if has_frames {
            let id = if name(dir) == GT_DIR {
                dir.parent().map(name).unwrap_or_default()
            } else {
                name(dir)
            };
            out.push((id, dir.to_path_buf()));
            return Ok(());
        }
        subdirs.sort();
        for sub in subdirs {
            if !name(&sub).starts_with("lr_") {
                walk(&sub, out)?;
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, &mut out)?;
    out.sort();
    Ok(out)
}

// ---------------------------------------------------------------- prepare

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareOptions {
    pub max_frames: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            max_frames: 20,
            width: 480,
            height: 360,
        }
    }
}

/// Resizes a frame bicubically, leaving it untouched if it already has the
/// target size.
pub fn resize_frame(frame: &ErpFrame, height: usize, width: usize) -> Result<ErpFrame> {
    if frame.height() == height && frame.width() == width {
        return Ok(frame.clone());
    }
    let t = bicubic_resize(frame.pixels(), height, width, Padding::Wrap, Padding::Replicate)?;
    ErpFrame::new(t.map(|v| v.clamp(0.0, 1.0)))
}

/// Caps, resizes and stores every clip found under `input_dir` into
/// `output_dir`, then writes the manifest. New clips go to the training split;
/// when `input_dir` is itself a prepared dataset, each clip keeps its split
/// and source resolution.
pub fn prepare(input_dir: &Path, output_dir: &Path, opts: &PrepareOptions) -> Result<DatasetManifest> {
    if opts.max_frames == 0 || opts.width == 0 || opts.height == 0 {
        return Err(S3poError::invalid("max_frames and target size must be positive"));
    }
    let clips = discover_clips(input_dir)?;
    if clips.is_empty() {
        return Err(S3poError::invalid(format!(
            "no clip directories with frames under {}",
            input_dir.display()
        )));
    }

    let mut issues = Vec::new();
    let mut unique: Vec<(String, PathBuf)> = Vec::new();
    for (id, dir) in clips {
        if unique.iter().any(|(u, _)| *u == id) {
            issues.push(ClipIssue {
                clip_id: id,
                stage: "prepare".into(),
                reason: format!("duplicate clip id at {}", dir.display()),
            });
        } else {
            unique.push((id, dir));
        }
    }

    // Re-preparing a prepared dataset keeps each clip's provenance.
    let previous = if input_dir.join(MANIFEST_FILE).is_file() {
        Some(DatasetManifest::load(input_dir)?)
    } else {
        None
    };
    let carried = |id: &str| previous.as_ref().and_then(|m| m.entry(id));

    let loaded: Vec<(String, Result<(ClipSequence, Vec<ErpFrame>)>)> = unique
        .par_iter()
        .map(|(id, dir)| (id.clone(), load_and_resize(id, dir, opts)))
        .collect();

    let mut entries = Vec::new();
    for (id, res) in loaded {
        let stored = res.and_then(|(source, frames)| {
            let stats = si_ti(&frames)?;
            Ok((source, frames, stats))
        });
        match stored {
            Ok((source, frames, stats)) => entries.push((
                ManifestEntry {
                    split: carried(&id).map_or(Split::Train, |e| e.split),
                    source_resolution: carried(&id).map_or(
                        [source.source_resolution.0, source.source_resolution.1],
                        |e| e.source_resolution,
                    ),
                    clip_id: id,
                    frame_count: frames.len(),
                    resolution: [opts.height, opts.width],
                    si: stats.si,
                    ti: stats.ti,
                    lr_available: BTreeMap::new(),
                },
                frames,
            )),
            Err(e) => issues.push(ClipIssue {
                clip_id: id,
                stage: "prepare".into(),
                reason: e.to_string(),
            }),
        }
    }

    entries
        .par_iter()
        .map(|(entry, frames)| write_frames(&gt_dir(output_dir, entry), frames))
        .collect::<Result<Vec<()>>>()?;

    let mut manifest = DatasetManifest {
        root: ".".into(),
        max_frames: opts.max_frames,
        train_count: 0,
        test_count: 0,
        split_seed: previous.as_ref().and_then(|m| m.split_seed),
        entries: entries.into_iter().map(|(e, _)| e).collect(),
        issues: Vec::new(),
    };
    manifest.set_issues("prepare", issues);
    manifest.recount();
    manifest.save(output_dir)?;
    Ok(manifest)
}

/// Loads a clip and returns it with its stored form: capped, resized and
/// 8-bit quantized.
fn load_and_resize(id: &str, dir: &Path, opts: &PrepareOptions) -> Result<(ClipSequence, Vec<ErpFrame>)> {
    let frames = read_frames(dir, Some(opts.max_frames))?;
    let seq = ClipSequence::new(id, frames)?;
    let stored = seq
        .frames
        .iter()
        .map(|f| quantize_8bit(&resize_frame(f, opts.height, opts.width)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((seq, stored))
}

// ---------------------------------------------------------------- split

/// Seeded random split. Clip ids are sorted before shuffling, so the result
/// depends only on the set of ids, `test_count` and `seed`.
pub fn split(manifest: &DatasetManifest, test_count: usize, seed: u64) -> Result<DatasetManifest> {
    let total = manifest.entries.len();
    if test_count >= total {
        return Err(S3poError::invalid(format!(
            "test_count {test_count} must be below the number of clips ({total})"
        )));
    }
    let mut ids: Vec<&str> = manifest.entries.iter().map(|e| e.clip_id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test: std::collections::BTreeSet<&str> = ids[..test_count].iter().copied().collect();

    let mut out = manifest.clone();
    for e in &mut out.entries {
        e.split = if test.contains(e.clip_id.as_str()) {
            Split::Test
        } else {
            Split::Train
        };
    }
    out.split_seed = Some(seed);
    out.recount();
    Ok(out)
}

/// Splits the dataset at `root`, moving clip directories to match, and
/// rewrites the manifest.
pub fn apply_split(root: &Path, test_count: usize, seed: u64) -> Result<DatasetManifest> {
    let old = DatasetManifest::load(root)?;
    let new = split(&old, test_count, seed)?;
    for (before, after) in old.entries.iter().zip(&new.entries) {
        if before.split != after.split {
            let (from, to) = (clip_dir(root, before), clip_dir(root, after));
            if let Some(parent) = to.parent() {
                fs::create_dir_all(parent).map_err(|e| S3poError::io(parent, e))?;
            }
            if to.exists() {
                fs::remove_dir_all(&to).map_err(|e| S3poError::io(&to, e))?;
            }
            fs::rename(&from, &to).map_err(|e| S3poError::io(&from, e))?;
        }
    }
    new.save(root)?;
    Ok(new)
}

// ---------------------------------------------------------------- LR pairs

/// Degrades every GT clip with `cfg` and stores the result under
/// `lr_{bi|bd}/`. Clips whose size is not divisible by the scale are recorded
/// as issues.
pub fn make_lr_pairs(root: &Path, cfg: &DegradationConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut manifest = DatasetManifest::load(root)?;
    let mode = cfg.mode.as_str().to_string();
    let stage = format!("make_lr_pairs.{mode}");
    let results: Vec<Result<()>> = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let [h, w] = entry.resolution;
            if h % cfg.scale != 0 || w % cfg.scale != 0 {
                return Err(S3poError::UnsupportedGeometry(format!(
                    "{h}×{w} is not divisible by scale {}",
                    cfg.scale
                )));
            }
            let gt = read_frames(&gt_dir(root, entry), None)?;
            let lr = gt
                .iter()
                .map(|f| degrade(f, cfg))
                .collect::<Result<Vec<_>>>()?;
            write_frames(&lr_dir(root, entry, cfg.mode), &lr)
        })
        .collect();

    let mut issues = Vec::new();
    for (entry, res) in manifest.entries.iter_mut().zip(results) {
        let ok = match res {
            Ok(()) => true,
            Err(e) => {
                issues.push(ClipIssue {
                    clip_id: entry.clip_id.clone(),
                    stage: stage.clone(),
                    reason: e.to_string(),
                });
                false
            }
        };
        entry.lr_available.insert(mode.clone(), ok);
    }
    manifest.set_issues(&stage, issues);
    manifest.save(root)?;
    Ok(manifest)
}

/// Loads GT/LR pairs of one split for training or evaluation.
pub fn load_pairs(root: &Path, split: Split, mode: DegradationMode) -> Result<Vec<TrainingClip>> {
    let manifest = DatasetManifest::load(root)?;
    manifest
        .split_entries(split)
        .filter(|e| e.lr_available.get(mode.as_str()).copied().unwrap_or(false))
        .map(|e| {
            let gt = read_frames(&gt_dir(root, e), None)?;
            let lr = read_frames(&lr_dir(root, e, mode), None)?;
            TrainingClip::new(e.clip_id.clone(), lr, gt)
        })
        .collect()
}

// ---------------------------------------------------------------- synthetic clips

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Flat-image content with diagonal motion and no wrap-around.
    Conventional,
    /// Horizontally periodic content panning with wrap-around, with detail
    /// stretched toward the poles.
    Panoramic,
}

struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: [f64; 3],
}

/// Generates a moving-pattern clip with values in `[0, 1]`.
pub fn synthetic_clip(
    kind: SyntheticKind,
    height: usize,
    width: usize,
    frames: usize,
    seed: u64,
) -> Result<Vec<ErpFrame>> {
    if height == 0 || width == 0 || frames == 0 {
        return Err(S3poError::invalid("synthetic clip dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<Wave> = (0..6)
        .map(|_| Wave {
            fx: rng.gen_range(1..=4) as f64,
            fy: rng.gen_range(0.5..3.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        })
        .collect();
    let base: [f64; 3] = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    let (vx, vy) = (rng.gen_range(0.5..2.0), rng.gen_range(-1.0..1.0));
    let (h, w) = (height as f64, width as f64);
    let tau = std::f64::consts::TAU;

    (0..frames)
        .map(|t| {
            let t = t as f64;
            let img = Tensor::from_fn(height, width, 3, |y, x, c| {
                let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut v = 0.0;
                for wave in &waves {
                    let arg = match kind {
                        SyntheticKind::Panoramic => {
                            let lat = ((yf / h) - 0.5) * std::f64::consts::PI;
                            let stretch = 1.0 / lat.cos().max(0.2);
                            tau * wave.fx * (xf - vx * t) / w * stretch.round()
                                + tau * wave.fy * yf / h
                                + wave.phase
                        }
                        SyntheticKind::Conventional => {
                            tau * wave.fx * 0.8 * (xf - vx * t) / w
                                + tau * wave.fy * (yf - vy * t) / h
                                + wave.phase
                        }
                    };
                    v += wave.amp[c] * arg.sin();
                }
                (base[c] + 0.12 * v).clamp(0.0, 1.0)
            });
            ErpFrame::new(img)
        })
        .collect()
}

/// Writes a synthetic clip collection in the per-clip input layout expected by
/// [`prepare`].
pub fn write_synthetic_source(
    dir: &Path,
    kind: SyntheticKind,
    clips: usize,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<()> {
    for i in 0..clips {
        let f = synthetic_clip(kind, height, width, frames, seed.wrapping_add(i as u64))?;
        write_frames(&dir.join(format!("clip_{i:03}")), &f)?;
    }
    Ok(())
}
