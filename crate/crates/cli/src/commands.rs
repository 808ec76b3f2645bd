//! Command implementations. Each returns the value it wrote so tests can
//! inspect results without re-reading files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bsm_core::codebook::{build_model, Model, TrainingSample};
use bsm_core::detector::{Detector, Hypothesis};
use bsm_core::eval::{average_precision, coco_map, make_folds, match_ious, FoldSpec, GroundTruth, SegDetection};
use bsm_core::imagecore::{load_image, load_mask, BinaryMask, Rect};
use bsm_core::par;
use bsm_core::segmenter::{render_heatmap, render_overlay, segment};
use bsm_core::synth::{write_dataset, Manifest, SynthParams};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::Dataset;
use crate::UsageError;

pub const DETECTIONS_VERSION: u32 = 1;
pub const SEGMENTS_VERSION: u32 = 1;
pub const METRICS_VERSION: u32 = 1;

/// An image to process and the id used to name its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Input {
    pub id: String,
    pub path: PathBuf,
}

impl Input {
    pub fn from_path(path: &Path) -> Result<Self> {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("cannot derive an id from {}", path.display()))?;
        Ok(Self { id: id.to_string(), path: path.to_path_buf() })
    }
}

pub fn inputs_from_files(paths: &[PathBuf]) -> Result<Vec<Input>> {
    let inputs = paths.iter().map(|p| Input::from_path(p)).collect::<Result<Vec<_>>>()?;
    for (i, a) in inputs.iter().enumerate() {
        if let Some(b) = inputs[i + 1..].iter().find(|b| b.id == a.id) {
            bail!("{} and {} share the id {:?}", a.path.display(), b.path.display(), a.id);
        }
    }
    Ok(inputs)
}

/// Dataset images, optionally restricted to (`keep = true`) or excluding
/// (`keep = false`) one fold.
pub fn inputs_from_dataset(ds: &Dataset, fold: Option<(&FoldSpec, usize, bool)>) -> Result<Vec<Input>> {
    let mut out = Vec::new();
    for e in &ds.entries {
        if let Some((spec, k, keep)) = fold {
            let f = spec.fold_of(&e.id).with_context(|| format!("image {:?} is not in the folds file", e.id))?;
            if (f == k) != keep {
                continue;
            }
        }
        out.push(Input { id: e.id.clone(), path: e.image.clone() });
    }
    if out.is_empty() {
        bail!("no images of {} selected", ds.root.display());
    }
    Ok(out)
}

pub fn load_folds(path: &Path) -> Result<FoldSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let spec: FoldSpec = serde_json::from_str(&text).with_context(|| format!("malformed folds file {}", path.display()))?;
    if spec.format_version != 1 {
        bail!("{}: unsupported format_version {}", path.display(), spec.format_version);
    }
    if spec.assignments.values().any(|&f| f >= spec.n_folds) {
        bail!("{}: fold index out of range", path.display());
    }
    Ok(spec)
}

pub fn check_fold(spec: &FoldSpec, k: usize) -> Result<()> {
    if k >= spec.n_folds {
        return Err(UsageError(format!("fold {k} does not exist (folds file has {})", spec.n_folds)).into());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub images: usize,
    pub codewords: usize,
    pub occurrences: usize,
    pub keypoints_detected: usize,
    pub keypoints_kept: usize,
    pub shape_codebook_sizes: Vec<usize>,
}

impl TrainReport {
    pub fn of(model: &Model) -> Self {
        Self {
            images: model.stats.images,
            codewords: model.codewords.len(),
            occurrences: model.occurrence_count(),
            keypoints_detected: model.stats.keypoints_detected,
            keypoints_kept: model.stats.keypoints_kept,
            shape_codebook_sizes: model.codewords.iter().map(|c| c.shape_codebook.len()).collect(),
        }
    }
}

impl std::fmt::Display for TrainReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "images: {}", self.images)?;
        writeln!(f, "keypoints: {} detected, {} on the object", self.keypoints_detected, self.keypoints_kept)?;
        writeln!(f, "codewords: {}", self.codewords)?;
        writeln!(f, "occurrences: {}", self.occurrences)?;
        let sizes: Vec<String> = self.shape_codebook_sizes.iter().map(|s| s.to_string()).collect();
        write!(f, "shape codebook sizes: {}", sizes.join(" "))
    }
}

pub fn cmd_train(cfg: &Config, ds: &Dataset, inputs: &[Input], out: &Path) -> Result<Model> {
    let samples = par::map_slice(inputs, |inp| -> Result<TrainingSample> {
        let entry = ds.get(&inp.id).with_context(|| format!("image {:?} is not in the dataset", inp.id))?;
        let mask_path = entry.mask.as_ref().with_context(|| format!("image {} has no mask", inp.path.display()))?;
        let img = load_image(&inp.path)?;
        let mask = load_mask(mask_path)?;
        TrainingSample::new(inp.id.clone(), img.to_gray(), mask).with_context(|| format!("training image {}", inp.path.display()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let model = build_model(&samples, &cfg.class_name, &cfg.model).with_context(|| format!("training on {}", ds.root.display()))?;
    model.save(out).with_context(|| format!("cannot write {}", out.display()))?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub cx: f64,
    pub cy: f64,
    pub s: f64,
    pub score: f64,
    pub roi: Rect,
    pub refined: bool,
    pub contributors: usize,
}

impl HypothesisRecord {
    fn of(h: &Hypothesis) -> Self {
        Self { cx: h.cx, cy: h.cy, s: h.s, score: h.score, roi: h.roi, refined: h.refined, contributors: h.contributors.len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub hypotheses: Vec<HypothesisRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub format_version: u32,
    pub class_name: String,
    pub images: Vec<ImageDetections>,
}

pub fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("cannot load model {}", path.display()))
}

pub fn cmd_detect(cfg: &Config, model: &Model, inputs: &[Input]) -> Result<DetectionsFile> {
    let det = Detector::new(model, cfg.detector.clone())?;
    let images = par::map_slice(inputs, |inp| -> Result<ImageDetections> {
        let img = load_image(&inp.path)?;
        let hyps = det.detect(&img.to_gray()).with_context(|| format!("detecting in {}", inp.path.display()))?;
        log::info!("{}: {} hypotheses", inp.id, hyps.len());
        Ok(ImageDetections {
            image_id: inp.id.clone(),
            width: img.width(),
            height: img.height(),
            hypotheses: hyps.iter().map(HypothesisRecord::of).collect(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(DetectionsFile { format_version: DETECTIONS_VERSION, class_name: model.class_name.clone(), images })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    #[serde(flatten)]
    pub hypothesis: HypothesisRecord,
    /// Relative to the segments file.
    pub mask: String,
    pub pixels: usize,
    pub color_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSegments {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    /// Union of all object masks, relative to the segments file.
    pub mask: String,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentsFile {
    pub format_version: u32,
    pub class_name: String,
    pub images: Vec<ImageSegments>,
}

pub const SEGMENTS_FILE: &str = "segments.json";

/// Writes `masks/<id>.png`, `objects/<id>_<k>.png`, `segments.json` and,
/// with `debug`, likelihood heatmaps and overlays under `debug/`.
pub fn cmd_segment(cfg: &Config, model: &Model, inputs: &[Input], out: &Path, debug: bool) -> Result<SegmentsFile> {
    let det = Detector::new(model, cfg.detector.clone())?;
    for sub in ["masks", "objects"].into_iter().chain(debug.then_some("debug")) {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).with_context(|| format!("cannot create {}", d.display()))?;
    }
    let images = par::map_slice(inputs, |inp| -> Result<ImageSegments> {
        let img = load_image(&inp.path)?;
        let hyps = det.detect(&img.to_gray()).with_context(|| format!("detecting in {}", inp.path.display()))?;
        let (merged, parts) = segment(&img, &hyps, model, &cfg.segment).with_context(|| format!("segmenting {}", inp.path.display()))?;
        let mask_rel = format!("masks/{}.png", inp.id);
        merged.save_png(&out.join(&mask_rel))?;
        let mut objects = Vec::with_capacity(parts.len());
        for (k, (h, part)) in hyps.iter().zip(&parts).enumerate() {
            let rel = format!("objects/{}_{k}.png", inp.id);
            part.mask.save_png(&out.join(&rel))?;
            if debug {
                let dir = out.join("debug");
                render_heatmap(&part.likelihood).save_png(&dir.join(format!("{}_{k}_likelihood.png", inp.id)))?;
                render_overlay(&img, &part.likelihood).save_png(&dir.join(format!("{}_{k}_overlay.png", inp.id)))?;
            }
            objects.push(ObjectRecord {
                hypothesis: HypothesisRecord::of(h),
                mask: rel,
                pixels: part.mask.count(),
                color_fallback: part.color_fallback,
            });
        }
        log::info!("{}: {} objects, {} foreground pixels", inp.id, objects.len(), merged.count());
        Ok(ImageSegments { image_id: inp.id.clone(), width: img.width(), height: img.height(), mask: mask_rel, objects })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let file = SegmentsFile { format_version: SEGMENTS_VERSION, class_name: model.class_name.clone(), images };
    write_json(&out.join(SEGMENTS_FILE), &file)?;
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_name: String,
    pub images: usize,
    pub ground_truths: usize,
    pub detections: usize,
    pub ap50: f64,
    pub coco_map: f64,
    pub matched: usize,
    /// Mean IoU over matched (detection, ground truth) pairs.
    pub mean_matched_iou: f64,
    /// Mean over all ground truths, unmatched ones counting as 0.
    pub mean_object_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub format_version: u32,
    pub classes: Vec<ClassMetrics>,
    pub map50: f64,
    pub coco_map: f64,
}

impl std::fmt::Display for Metrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<20} {:>6} {:>6} {:>7} {:>7} {:>9} {:>9}", "class", "images", "dets", "AP50", "mAP", "IoU(m)", "IoU(all)")?;
        for c in &self.classes {
            writeln!(
                f,
                "{:<20} {:>6} {:>6} {:>7.4} {:>7.4} {:>9.4} {:>9.4}",
                c.class_name, c.images, c.detections, c.ap50, c.coco_map, c.mean_matched_iou, c.mean_object_iou
            )?;
        }
        write!(f, "mean AP50 {:.4}, mean COCO mAP {:.4}", self.map50, self.coco_map)
    }
}

pub fn load_segments(path: &Path) -> Result<SegmentsFile> {
    let file = if path.is_dir() { path.join(SEGMENTS_FILE) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).with_context(|| format!("cannot read {}", file.display()))?;
    let s: SegmentsFile = serde_json::from_str(&text).with_context(|| format!("malformed segments file {}", file.display()))?;
    if s.format_version != SEGMENTS_VERSION {
        bail!("{}: unsupported format_version {}", file.display(), s.format_version);
    }
    Ok(s)
}

/// Scores one class. Every predicted image must exist in `gt`; ground
/// truth is restricted to the predicted images, with one object per mask
/// file.
pub fn eval_class(pred_path: &Path, gt: &Dataset) -> Result<ClassMetrics> {
    let seg = load_segments(pred_path)?;
    let base = if pred_path.is_dir() { pred_path.to_path_buf() } else { pred_path.parent().unwrap_or(Path::new(".")).to_path_buf() };
    if seg.images.is_empty() {
        bail!("{} lists no images", pred_path.display());
    }
    let loaded = par::map_slice(&seg.images, |im| -> Result<(GroundTruth, Vec<SegDetection>)> {
        let entry = gt
            .get(&im.image_id)
            .with_context(|| format!("predicted image {:?} is not in {}", im.image_id, gt.root.display()))?;
        let gt_path = entry.mask.as_ref().with_context(|| format!("image {:?} has no ground-truth mask", im.image_id))?;
        let mask = load_mask(gt_path)?;
        let mut dets = Vec::new();
        for o in &im.objects {
            let m: BinaryMask = load_mask(&base.join(&o.mask))?;
            if (m.width(), m.height()) != (mask.width(), mask.height()) {
                bail!("{} is {}x{} but the ground truth is {}x{}", o.mask, m.width(), m.height(), mask.width(), mask.height());
            }
            dets.push(SegDetection { image_id: im.image_id.clone(), mask: m, score: o.hypothesis.score });
        }
        Ok((GroundTruth { image_id: im.image_id.clone(), mask }, dets))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (gts, dets): (Vec<GroundTruth>, Vec<Vec<SegDetection>>) = loaded.into_iter().unzip();
    let dets: Vec<SegDetection> = dets.into_iter().flatten().collect();
    let matched = match_ious(&dets, &gts)?;
    let hits: Vec<f64> = matched.iter().flatten().copied().collect();
    Ok(ClassMetrics {
        class_name: seg.class_name,
        images: gts.len(),
        ground_truths: gts.len(),
        detections: dets.len(),
        ap50: average_precision(&dets, &gts, 0.5)?,
        coco_map: coco_map(&dets, &gts)?,
        matched: hits.len(),
        mean_matched_iou: if hits.is_empty() { 0.0 } else { hits.iter().sum::<f64>() / hits.len() as f64 },
        mean_object_iou: hits.iter().sum::<f64>() / gts.len() as f64,
    })
}

/// One class per (predictions, ground-truth dataset) pair.
pub fn cmd_eval(pairs: &[(PathBuf, PathBuf)]) -> Result<Metrics> {
    let mut classes = Vec::new();
    for (pred, gt_root) in pairs {
        let gt = Dataset::open(gt_root, false)?;
        classes.push(eval_class(pred, &gt)?);
    }
    let n = classes.len().max(1) as f64;
    Ok(Metrics {
        format_version: METRICS_VERSION,
        map50: classes.iter().map(|c| c.ap50).sum::<f64>() / n,
        coco_map: classes.iter().map(|c| c.coco_map).sum::<f64>() / n,
        classes,
    })
}

pub fn cmd_folds(ds: &Dataset, n_folds: usize, seed: u64) -> Result<FoldSpec> {
    make_folds(&ds.ids(), n_folds, &ds.pairs, seed).map_err(|e| match e {
        bsm_core::Error::InvalidParam(m) => UsageError(m).into(),
        e => anyhow::Error::from(e),
    })
}

pub fn cmd_synth(params: &SynthParams, out: &Path, n: usize, seed: u64) -> Result<Manifest> {
    write_dataset(out, params, n, seed).with_context(|| format!("cannot write a synthetic dataset to {}", out.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}
