//! Appearance codebook with occurrences and per-codeword shape codebooks.
//!
//! Training detects keypoints, keeps those on the object mask, and pairs
//! each appearance descriptor with a descriptor of the mask at the same
//! location and scale. Appearance descriptors are clustered into codewords;
//! each codeword's mask descriptors are clustered again and quantized into
//! its shape codebook.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{detect_harris_laplace, FeatureParams, Keypoint, SiftDescriptor, SiftExtractor, DESCRIPTOR_LEN};
use crate::imagecore::{BinaryMask, GrayImage, Rect};
use crate::par;
use crate::shapedesc::{cell_strengths, quantize, ShapeDescriptor, StrengthGrid, DEFAULT_BETA};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// `1 - |a - b| / sqrt(2)`, clamped to [0, 1].
///
/// For unit vectors with non-negative entries the distance is at most
/// `sqrt(2)`. Zero descriptors are treated as a separate class: two of them
/// are identical, a zero and a non-zero one share nothing.
pub fn similarity(a: &SiftDescriptor, b: &SiftDescriptor) -> f64 {
    match (a.is_zero(), b.is_zero()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let d2: f64 = a.bins().iter().zip(b.bins().iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    (1.0 - d2.sqrt() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Input indices, ascending.
    pub members: Vec<usize>,
    pub centroid: SiftDescriptor,
}

/// One executed merge. Cluster ids are the ids at the time of the merge:
/// ids below the input length are singletons, later ids are merge results
/// numbered in merge order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub clusters: Vec<Cluster>,
    pub merges: Vec<Merge>,
}

struct Node {
    id: usize,
    members: Vec<usize>,
    sum: [f64; DESCRIPTOR_LEN],
    centroid: SiftDescriptor,
}

/// Reciprocal-nearest-neighbour agglomerative clustering.
///
/// A chain of nearest neighbours is grown until its last two clusters are
/// each other's nearest neighbour. That pair merges if its centroid
/// similarity reaches `t`; otherwise nothing on the chain can reach `t` any
/// more and the whole chain is finalized. Centroids are member means scaled
/// to unit length. Ties go to the lowest slot.
pub fn agglomerative_cluster(descs: &[SiftDescriptor], t: f64) -> Result<Clustering> {
    if descs.is_empty() {
        return Err(Error::EmptyInput("descriptor set"));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(invalid(format!("similarity threshold must lie in (0, 1), got {t}")));
    }
    let mut slots: Vec<Option<Node>> = descs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            Some(Node { id: i, members: vec![i], sum: *d.bins(), centroid: d.clone() })
        })
        .collect();
    let mut active: Vec<usize> = (0..descs.len()).collect();
    let mut done: Vec<Node> = Vec::new();
    let mut merges = Vec::new();
    let mut next_id = descs.len();
    let mut chain: Vec<usize> = Vec::new();

    let centroid = |slots: &[Option<Node>], s: usize| -> SiftDescriptor {
        slots[s].as_ref().map(|n| n.centroid.clone()).unwrap_or_else(SiftDescriptor::zeros)
    };

    while !active.is_empty() {
        if chain.is_empty() {
            chain.push(active[0]);
        }
        if active.len() == 1 {
            let s = active.pop().unwrap_or_default();
            done.extend(slots[s].take());
            chain.clear();
            continue;
        }
        let tail = *chain.last().unwrap_or(&active[0]);
        let prev = chain.len().checked_sub(2).map(|i| chain[i]);
        let tail_c = centroid(&slots, tail);
        let mut best: Option<(usize, f64)> = None;
        for &s in &active {
            if s == tail {
                continue;
            }
            let sim = similarity(&tail_c, &centroid(&slots, s));
            let better = match best {
                None => true,
                Some((b, bs)) => sim > bs || (sim == bs && Some(s) == prev && Some(b) != prev),
            };
            if better {
                best = Some((s, sim));
            }
        }
        let Some((nn, sim)) = best else { break };
        if Some(nn) == prev {
            chain.truncate(chain.len() - 2);
            if sim >= t {
                let (a, b) = (tail.min(nn), tail.max(nn));
                let nb = slots[b].take();
                let na = slots[a].take();
                if let (Some(mut na), Some(nb)) = (na, nb) {
                    merges.push(Merge { a: na.id.min(nb.id), b: na.id.max(nb.id), similarity: sim });
                    na.members.extend(nb.members);
                    na.members.sort_unstable();
                    for (x, y) in na.sum.iter_mut().zip(nb.sum.iter()) {
                        *x += y;
                    }
                    na.centroid = SiftDescriptor::unit(na.sum);
                    na.id = next_id;
                    next_id += 1;
                    slots[a] = Some(na);
                }
                active.retain(|&s| s != b);
            } else {
                // Similarities grow along the chain, so every earlier link
                // is below the threshold as well.
                let mut finished = std::mem::take(&mut chain);
                finished.extend([tail, nn]);
                for s in &finished {
                    done.extend(slots[*s].take());
                }
                active.retain(|s| !finished.contains(s));
            }
        } else if let Some(pos) = chain.iter().position(|&c| c == nn) {
            // A merge can make a stale link point backwards; restart there.
            chain.truncate(pos + 1);
        } else {
            chain.push(nn);
        }
    }

    done.sort_by_key(|n| n.members[0]);
    let clusters = done
        .into_iter()
        .map(|n| Cluster { members: n.members, centroid: n.centroid })
        .collect();
    Ok(Clustering { clusters, merges })
}

/// Training record of one kept keypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occurrence {
    /// Keypoint position minus object centre, training pixels.
    pub dx: f64,
    pub dy: f64,
    pub feat_scale: f64,
    pub obj_w: f64,
    pub obj_h: f64,
    pub shape_idx: usize,
    pub source_image: String,
    /// Keypoint position in the source image.
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub descriptor: ShapeDescriptor,
    pub strengths: StrengthGrid,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codeword {
    pub center: SiftDescriptor,
    pub occurrences: Vec<Occurrence>,
    pub shape_codebook: Vec<ShapeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Similarity threshold for clustering and matching.
    pub t: f64,
    pub beta: f64,
    /// Side in pixels of a splatted strength grid at the mean training scale.
    pub base_size: usize,
    pub features: FeatureParams,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self { t: 0.7, beta: DEFAULT_BETA, base_size: 21, features: FeatureParams::default() }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t < 1.0) {
            return Err(invalid(format!("t must lie in (0, 1), got {}", self.t)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(invalid(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if self.base_size < 3 || self.base_size % 2 == 0 {
            return Err(invalid(format!("base_size must be odd and >= 3, got {}", self.base_size)));
        }
        self.features.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingStats {
    pub images: usize,
    pub keypoints_detected: usize,
    pub keypoints_kept: usize,
    pub mean_obj_w: f64,
    pub mean_obj_h: f64,
    pub mean_feat_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub format_version: u32,
    pub class_name: String,
    pub params: ModelParams,
    pub stats: TrainingStats,
    pub codewords: Vec<Codeword>,
}

impl Model {
    pub fn occurrence_count(&self) -> usize {
        self.codewords.iter().map(|c| c.occurrences.len()).sum()
    }

    pub fn mean_object_size(&self) -> (f64, f64) {
        (self.stats.mean_obj_w, self.stats.mean_obj_h)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("format_version").and_then(|f| f.as_u64());
        if found != Some(MODEL_FORMAT_VERSION as u64) {
            return Err(Error::FormatVersion { found: found.unwrap_or(0) as u32, expected: MODEL_FORMAT_VERSION });
        }
        let model: Model = serde_json::from_value(v)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        self.params.validate()?;
        for (i, c) in self.codewords.iter().enumerate() {
            if c.occurrences.is_empty() {
                return Err(Error::Malformed(format!("codeword {i} has no occurrences")));
            }
            for o in &c.occurrences {
                if o.shape_idx >= c.shape_codebook.len() {
                    return Err(Error::Malformed(format!("codeword {i}: shape index {} out of range", o.shape_idx)));
                }
                if !(o.feat_scale > 0.0 && o.obj_w > 0.0 && o.obj_h > 0.0) {
                    return Err(Error::Malformed(format!("codeword {i}: non-positive occurrence size")));
                }
            }
        }
        Ok(())
    }
}

/// A training image with its object mask.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub id: String,
    pub image: GrayImage,
    pub mask: BinaryMask,
    /// Object box; its centre is the voting target.
    pub bbox: Rect,
}

impl TrainingSample {
    /// Box taken from the mask's foreground extent.
    pub fn new(id: impl Into<String>, image: GrayImage, mask: BinaryMask) -> Result<Self> {
        if image.width() != mask.width() || image.height() != mask.height() {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} vs mask {}x{}",
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        let bbox = mask.bbox().ok_or(Error::EmptyInput("object mask"))?;
        Ok(Self { id: id.into(), image, mask, bbox })
    }
}

struct Kept {
    kp: Keypoint,
    appearance: SiftDescriptor,
    shape: SiftDescriptor,
    sample: usize,
}

fn sample_features(s: &TrainingSample, index: usize, params: &FeatureParams) -> Result<(usize, Vec<Kept>)> {
    let kps = detect_harris_laplace(&s.image, params);
    let appearance = SiftExtractor::new(&s.image, params.patch_factor);
    let shape = SiftExtractor::new(&s.mask.to_gray(), params.patch_factor);
    let mut kept = Vec::new();
    for kp in kps.iter().filter(|k| s.mask.at(k.x, k.y)) {
        kept.push(Kept { kp: *kp, appearance: appearance.describe(kp)?, shape: shape.describe(kp)?, sample: index });
    }
    Ok((kps.len(), kept))
}

/// Learns a model from foreground keypoints of `samples`.
pub fn build_model(samples: &[TrainingSample], class_name: &str, params: &ModelParams) -> Result<Model> {
    params.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let per_image = par::map_range(samples.len(), |i| sample_features(&samples[i], i, &params.features));
    let mut detected = 0;
    let mut kept = Vec::new();
    for r in per_image {
        let (n, k) = r?;
        detected += n;
        kept.extend(k);
    }
    if kept.is_empty() {
        return Err(Error::NoForegroundKeypoints);
    }
    log::info!("{} of {detected} keypoints lie on the object masks", kept.len());

    let appearance: Vec<SiftDescriptor> = kept.iter().map(|k| k.appearance.clone()).collect();
    let words = agglomerative_cluster(&appearance, params.t)?;
    assert_sound(&words, params.t);
    log::info!("{} codewords after {} merges", words.clusters.len(), words.merges.len());

    let codewords = par::map_slice(&words.clusters, |cluster| -> Result<Codeword> {
        let masks: Vec<SiftDescriptor> = cluster.members.iter().map(|&m| kept[m].shape.clone()).collect();
        let shapes = agglomerative_cluster(&masks, params.t)?;
        assert_sound(&shapes, params.t);
        let mut shape_of = vec![0; masks.len()];
        let mut shape_codebook = Vec::with_capacity(shapes.clusters.len());
        for (n, sc) in shapes.clusters.iter().enumerate() {
            for &m in &sc.members {
                shape_of[m] = n;
            }
            let descriptor = quantize(&sc.centroid, params.beta)?;
            let strengths = cell_strengths(&descriptor);
            shape_codebook.push(ShapeEntry { descriptor, strengths, members: sc.members.len() });
        }
        let occurrences = cluster
            .members
            .iter()
            .enumerate()
            .map(|(local, &m)| {
                let k = &kept[m];
                let s = &samples[k.sample];
                let (cx, cy) = s.bbox.center();
                Occurrence {
                    dx: k.kp.x - cx,
                    dy: k.kp.y - cy,
                    feat_scale: k.kp.scale,
                    obj_w: s.bbox.w,
                    obj_h: s.bbox.h,
                    shape_idx: shape_of[local],
                    source_image: s.id.clone(),
                    x: k.kp.x,
                    y: k.kp.y,
                }
            })
            .collect();
        Ok(Codeword { center: cluster.centroid.clone(), occurrences, shape_codebook })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let n = samples.len() as f64;
    let stats = TrainingStats {
        images: samples.len(),
        keypoints_detected: detected,
        keypoints_kept: kept.len(),
        mean_obj_w: samples.iter().map(|s| s.bbox.w).sum::<f64>() / n,
        mean_obj_h: samples.iter().map(|s| s.bbox.h).sum::<f64>() / n,
        mean_feat_scale: kept.iter().map(|k| k.kp.scale).sum::<f64>() / kept.len() as f64,
    };
    Ok(Model {
        format_version: MODEL_FORMAT_VERSION,
        class_name: class_name.to_string(),
        params: params.clone(),
        stats,
        codewords,
    })
}

fn assert_sound(c: &Clustering, t: f64) {
    for m in &c.merges {
        log::trace!("merge {} + {} at similarity {:.4}", m.a, m.b, m.similarity);
        assert!(m.similarity >= t, "merge below threshold: {m:?}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[(usize, f64)]) -> SiftDescriptor {
        let mut b = [0.0; DESCRIPTOR_LEN];
        for &(i, x) in v {
            b[i] = x;
        }
        SiftDescriptor::unit(b)
    }

    #[test]
    fn similarity_cases() {
        let a = unit(&[(0, 1.0)]);
        let b = unit(&[(1, 1.0)]);
        assert_eq!(similarity(&a, &a), 1.0);
        assert!(similarity(&a, &b).abs() < 1e-12);
        let z = SiftDescriptor::zeros();
        assert_eq!(similarity(&z, &z), 1.0);
        assert_eq!(similarity(&z, &a), 0.0);
        // |a - c| = 0.3 sqrt(2) for c at angle theta with 2 - 2 cos = 0.18.
        let cos = 1.0 - 0.09;
        let c = unit(&[(0, cos), (1, (1.0 - cos * cos).sqrt())]);
        assert!((similarity(&a, &c) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_merges() {
        let a = unit(&[(3, 1.0), (4, 0.5)]);
        let c = agglomerative_cluster(&[a.clone(), a], 0.7).unwrap();
        assert_eq!(c.clusters.len(), 1);
        assert_eq!(c.clusters[0].members, vec![0, 1]);
        assert_eq!(c.merges.len(), 1);
    }

    #[test]
    fn dissimilar_pair_stays_apart() {
        // Similarity 0.5: distance sqrt(2)/2, i.e. cos = 0.75.
        let a = unit(&[(0, 1.0)]);
        let b = unit(&[(0, 0.75), (1, (1.0f64 - 0.5625).sqrt())]);
        assert!((similarity(&a, &b) - 0.5).abs() < 1e-12);
        let c = agglomerative_cluster(&[a, b], 0.7).unwrap();
        assert_eq!(c.clusters.len(), 2);
        assert!(c.merges.is_empty());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(agglomerative_cluster(&[], 0.7).is_err());
        assert!(agglomerative_cluster(&[SiftDescriptor::zeros()], 1.0).is_err());
    }

    #[test]
    fn model_params_validation() {
        assert!(ModelParams::default().validate().is_ok());
        let p = ModelParams { base_size: 20, ..Default::default() };
        assert!(p.validate().is_err());
        let p = ModelParams { t: 0.0, ..Default::default() };
        assert!(p.validate().is_err());
    }
}
