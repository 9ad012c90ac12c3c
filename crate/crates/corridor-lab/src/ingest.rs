//! MOTChallenge-format ground-truth parsing and segmentation-grid loading.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::core::{GridShape, Sample, Tracklet};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate (frame={frame}, id={id}) pair")]
    DuplicateFrame { line: usize, frame: i64, id: u64 },
    #[error("segmentation grid: expected {expected_h}x{expected_w}, file declares {got_h}x{got_w}")]
    ShapeMismatch { expected_h: usize, expected_w: usize, got_h: usize, got_w: usize },
    #[error("segmentation grid line {line}: {reason}")]
    BadGrid { line: usize, reason: String },
    #[error("segmentation label {label} out of range [0, {classes})")]
    LabelOutOfRange { label: i64, classes: usize },
    #[error("class mapping has no entry for raw label {0}")]
    UnmappedLabel(i64),
    #[error("scene manifest: {0}")]
    BadManifest(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Per-scene segmentation context: a label grid expanded to one-hot
/// channel-major occupancy.
#[derive(Debug, Clone)]
pub struct SceneContext {
    pub scene: String,
    pub shape: GridShape,
    pub classes: usize,
    /// C * h * w, channel-major, values 0.0 or 1.0, channels sum to 1 per pixel.
    pub seg: Vec<f64>,
    pub fps: u32,
}

impl SceneContext {
    pub fn from_labels(
        scene: &str,
        shape: GridShape,
        classes: usize,
        labels: &[i64],
        fps: u32,
    ) -> Result<Self, IngestError> {
        assert_eq!(labels.len(), shape.len());
        let mut seg = vec![0.0; classes * shape.len()];
        for (i, &lab) in labels.iter().enumerate() {
            if lab < 0 || lab as usize >= classes {
                return Err(IngestError::LabelOutOfRange { label: lab, classes });
            }
            seg[lab as usize * shape.len() + i] = 1.0;
        }
        Ok(Self { scene: scene.to_string(), shape, classes, seg, fps })
    }

    /// Label at (row, col), recovered from the one-hot channels.
    pub fn label_at(&self, r: usize, c: usize) -> usize {
        let px = r * self.shape.w + c;
        (0..self.classes)
            .find(|&ch| self.seg[ch * self.shape.len() + px] == 1.0)
            .expect("one-hot invariant")
    }
}

/// Parse MOT gt text: `frame,id,bb_left,bb_top,bb_width,bb_height,conf,...`.
/// Rows with conf == 0 are dropped; positions are bounding-box centers;
/// 1-based file frames are stored 0-based.
pub fn parse_mot_gt(text: &str, fps: u32, scene: &str) -> Result<Vec<Tracklet>, IngestError> {
    let mut by_id: BTreeMap<u64, Vec<Sample>> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 6 {
            return Err(IngestError::Malformed {
                line: line_no,
                reason: format!("expected >= 6 comma-separated fields, got {}", fields.len()),
            });
        }
        let parse_num = |s: &str, name: &str| -> Result<f64, IngestError> {
            s.trim().parse::<f64>().map_err(|_| IngestError::Malformed {
                line: line_no,
                reason: format!("field {name} is not a number: {s:?}"),
            })
        };
        let frame = parse_num(fields[0], "frame")? as i64;
        let id = parse_num(fields[1], "id")? as u64;
        let left = parse_num(fields[2], "bb_left")?;
        let top = parse_num(fields[3], "bb_top")?;
        let width = parse_num(fields[4], "bb_width")?;
        let height = parse_num(fields[5], "bb_height")?;
        if let Some(conf) = fields.get(6) {
            if parse_num(conf, "conf")? == 0.0 {
                continue;
            }
        }
        if frame < 1 {
            return Err(IngestError::Malformed {
                line: line_no,
                reason: format!("frame must be >= 1, got {frame}"),
            });
        }
        let sample = Sample { frame: frame - 1, x: left + width / 2.0, y: top + height / 2.0 };
        let samples = by_id.entry(id).or_default();
        if samples.iter().any(|s| s.frame == sample.frame) {
            return Err(IngestError::DuplicateFrame { line: line_no, frame, id });
        }
        samples.push(sample);
    }
    let mut out = Vec::new();
    for (id, mut samples) in by_id {
        samples.sort_by_key(|s| s.frame);
        out.push(Tracklet { identity: id, scene: scene.to_string(), samples, rate: fps });
    }
    Ok(out)
}

/// Serialize tracklets back to MOT rows with unit boxes centered on each
/// point. Inverse of `parse_mot_gt` up to row order.
pub fn serialize_mot(tracklets: &[Tracklet]) -> String {
    let mut rows: Vec<(i64, u64, f64, f64)> = Vec::new();
    for t in tracklets {
        for s in &t.samples {
            rows.push((s.frame, t.identity, s.x, s.y));
        }
    }
    rows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut out = String::new();
    for (frame, id, x, y) in rows {
        writeln!(out, "{},{},{},{},1,1,1", frame + 1, id, x - 0.5, y - 0.5).unwrap();
    }
    out
}

/// Load the plain-text grid format: line 1 `h w C`, then h lines of w labels.
pub fn load_segmentation_grid(
    path: &Path,
    expected: GridShape,
    classes: usize,
    scene: &str,
    fps: u32,
) -> Result<SceneContext, IngestError> {
    let text = fs::read_to_string(path)
        .map_err(|source| IngestError::Io { path: path.to_path_buf(), source })?;
    parse_segmentation_grid(&text, expected, classes, scene, fps)
}

pub fn parse_segmentation_grid(
    text: &str,
    expected: GridShape,
    classes: usize,
    scene: &str,
    fps: u32,
) -> Result<SceneContext, IngestError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| IngestError::BadGrid { line: 1, reason: "empty file".into() })?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| IngestError::BadGrid { line: 1, reason: format!("bad header: {e}") })?;
    if head.len() != 3 {
        return Err(IngestError::BadGrid { line: 1, reason: "header must be `h w C`".into() });
    }
    let (h, w, c) = (head[0], head[1], head[2]);
    if h != expected.h || w != expected.w {
        return Err(IngestError::ShapeMismatch {
            expected_h: expected.h,
            expected_w: expected.w,
            got_h: h,
            got_w: w,
        });
    }
    if c != classes {
        return Err(IngestError::BadGrid {
            line: 1,
            reason: format!("file declares {c} classes, expected {classes}"),
        });
    }
    let mut labels = Vec::with_capacity(h * w);
    for row in 0..h {
        let (idx, line) = lines.next().ok_or_else(|| IngestError::BadGrid {
            line: row + 2,
            reason: "missing grid row".into(),
        })?;
        let vals: Vec<i64> = line
            .split_whitespace()
            .map(|t| t.parse::<i64>())
            .collect::<Result<_, _>>()
            .map_err(|e| IngestError::BadGrid { line: idx + 1, reason: format!("{e}") })?;
        if vals.len() != w {
            return Err(IngestError::BadGrid {
                line: idx + 1,
                reason: format!("expected {w} labels, got {}", vals.len()),
            });
        }
        labels.extend(vals);
    }
    SceneContext::from_labels(scene, expected, classes, &labels, fps)
}

/// Serialize a label grid in the format `parse_segmentation_grid` reads.
pub fn serialize_segmentation_grid(shape: GridShape, classes: usize, labels: &[i64]) -> String {
    assert_eq!(labels.len(), shape.len());
    let mut out = format!("{} {} {}\n", shape.h, shape.w, classes);
    for r in 0..shape.h {
        let row: Vec<String> =
            labels[r * shape.w..(r + 1) * shape.w].iter().map(|l| l.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Pointwise relabeling of raw labels into the compact class space.
pub fn class_downmap(
    raw: &[i64],
    mapping: &BTreeMap<i64, i64>,
) -> Result<Vec<i64>, IngestError> {
    raw.iter()
        .map(|lab| mapping.get(lab).copied().ok_or(IngestError::UnmappedLabel(*lab)))
        .collect()
}

/// Scale tracklet coordinates between grid resolutions.
pub fn rescale_tracklets(tracklets: &[Tracklet], from: GridShape, to: GridShape) -> Vec<Tracklet> {
    let sx = to.w as f64 / from.w as f64;
    let sy = to.h as f64 / from.h as f64;
    tracklets
        .iter()
        .map(|t| Tracklet {
            identity: t.identity,
            scene: t.scene.clone(),
            samples: t
                .samples
                .iter()
                .map(|s| Sample { frame: s.frame, x: s.x * sx, y: s.y * sy })
                .collect(),
            rate: t.rate,
        })
        .collect()
}

/// One scene entry of a manifest file.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEntry {
    pub scene: String,
    pub gt_path: PathBuf,
    pub seg_path: PathBuf,
    pub fps: u32,
}

/// Parse a scene manifest: `[scene:<id>]` sections with `gt`, `seg`, `fps`
/// keys. Relative paths resolve against the manifest's directory.
pub fn parse_scene_manifest(text: &str, base_dir: &Path) -> Result<Vec<SceneEntry>, IngestError> {
    let mut entries: Vec<SceneEntry> = Vec::new();
    let mut current: Option<(String, Option<PathBuf>, Option<PathBuf>, Option<u32>)> = None;
    let finish = |cur: Option<(String, Option<PathBuf>, Option<PathBuf>, Option<u32>)>,
                  entries: &mut Vec<SceneEntry>|
     -> Result<(), IngestError> {
        if let Some((scene, gt, seg, fps)) = cur {
            let gt_path =
                gt.ok_or_else(|| IngestError::BadManifest(format!("scene {scene}: missing gt")))?;
            let seg_path = seg
                .ok_or_else(|| IngestError::BadManifest(format!("scene {scene}: missing seg")))?;
            let fps = fps
                .ok_or_else(|| IngestError::BadManifest(format!("scene {scene}: missing fps")))?;
            entries.push(SceneEntry { scene, gt_path, seg_path, fps });
        }
        Ok(())
    };
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(section) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let scene = section.strip_prefix("scene:").ok_or_else(|| {
                IngestError::BadManifest(format!("line {}: section must be [scene:<id>]", idx + 1))
            })?;
            finish(current.take(), &mut entries)?;
            current = Some((scene.to_string(), None, None, None));
        } else if let Some((key, value)) = line.split_once('=') {
            let cur = current.as_mut().ok_or_else(|| {
                IngestError::BadManifest(format!("line {}: key outside a scene section", idx + 1))
            })?;
            let value = value.trim();
            match key.trim() {
                "gt" => cur.1 = Some(base_dir.join(value)),
                "seg" => cur.2 = Some(base_dir.join(value)),
                "fps" => {
                    cur.3 = Some(value.parse().map_err(|_| {
                        IngestError::BadManifest(format!("line {}: bad fps {value:?}", idx + 1))
                    })?)
                }
                other => {
                    return Err(IngestError::BadManifest(format!(
                        "line {}: unknown key {other:?}",
                        idx + 1
                    )))
                }
            }
        } else {
            return Err(IngestError::BadManifest(format!("line {}: unparseable", idx + 1)));
        }
    }
    finish(current, &mut entries)?;
    Ok(entries)
}

/// The repo-convention reduction from a raw label taxonomy to 12 classes.
/// The upstream taxonomy is not standardized; this table is a documented
/// default, overridable in config.
pub fn default_class_mapping(raw_classes: i64) -> BTreeMap<i64, i64> {
    (0..raw_classes).map(|raw| (raw, raw % 12)).collect()
}
