//! Mask IoU, average precision and cross-validation folds.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imagecore::BinaryMask;

/// Intersection over union; two empty masks give 0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(format!(
            "masks {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        inter += (*x != 0 && *y != 0) as usize;
        union += (*x != 0 || *y != 0) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegDetection {
    pub image_id: String,
    pub mask: BinaryMask,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub mask: BinaryMask,
}

/// A detection reduced to what matching needs: its score and its IoU with
/// every ground truth of its image (ground truths indexed globally).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDetection {
    pub score: f64,
    pub ious: Vec<(usize, f64)>,
}

/// Pairs every detection with the ground truths of its image. Detections
/// on images without ground truth are dropped.
pub fn score_detections(dets: &[SegDetection], gts: &[GroundTruth]) -> Result<(Vec<ScoredDetection>, usize)> {
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        if !d.score.is_finite() {
            return Err(Error::Malformed(format!("detection on {} has a non-finite score", d.image_id)));
        }
        let Some(idx) = by_image.get(d.image_id.as_str()) else { continue };
        let ious = idx.iter().map(|&g| Ok((g, iou(&d.mask, &gts[g].mask)?))).collect::<Result<Vec<_>>>()?;
        out.push(ScoredDetection { score: d.score, ious });
    }
    Ok((out, gts.len()))
}

/// All-point interpolated AP with greedy matching: detections are taken by
/// descending score (ties in input order) and each claims the unmatched
/// ground truth it overlaps most, if that IoU reaches `thresh`.
pub fn average_precision_scored(dets: &[ScoredDetection], n_gt: usize, thresh: f64) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; n_gt];
    let mut tp = 0usize;
    // (is a true positive, precision at this rank)
    let mut points = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        let best = dets[i]
            .ious
            .iter()
            .filter(|(g, v)| !taken[*g] && *v >= thresh)
            .fold(None::<(usize, f64)>, |b, &(g, v)| match b {
                Some((_, bv)) if bv >= v => b,
                _ => Some((g, v)),
            });
        if let Some((g, _)) = best {
            taken[g] = true;
            tp += 1;
        }
        points.push((best.is_some(), tp as f64 / (rank + 1) as f64));
    }
    // Recall grows by 1/n_gt at each true positive, so the area under the
    // precision envelope is the envelope summed over true positives. Summing
    // before dividing keeps a perfect ranking at exactly 1.
    let mut env = 0.0f64;
    let mut area = 0.0;
    for &(hit, precision) in points.iter().rev() {
        env = env.max(precision);
        if hit {
            area += env;
        }
    }
    area / n_gt as f64
}

pub fn average_precision(dets: &[SegDetection], gts: &[GroundTruth], thresh: f64) -> Result<f64> {
    let (scored, n) = score_detections(dets, gts)?;
    Ok(average_precision_scored(&scored, n, thresh))
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Mean AP over the ten COCO IoU thresholds.
pub fn coco_map(dets: &[SegDetection], gts: &[GroundTruth]) -> Result<f64> {
    let (scored, n) = score_detections(dets, gts)?;
    let t = coco_thresholds();
    Ok(t.iter().map(|&th| average_precision_scored(&scored, n, th)).sum::<f64>() / t.len() as f64)
}

/// Greedy one-to-one matching of detections to ground truths (descending
/// score, each detection takes the unmatched ground truth it overlaps most).
/// Returns, per ground truth, the IoU of its match; `None` when no
/// detection overlapped it at all.
pub fn match_ious(dets: &[SegDetection], gts: &[GroundTruth]) -> Result<Vec<Option<f64>>> {
    let (scored, n) = score_detections(dets, gts)?;
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].score.total_cmp(&scored[a].score).then(a.cmp(&b)));
    let mut out = vec![None; n];
    for i in order {
        let best = scored[i]
            .ious
            .iter()
            .filter(|(g, v)| out[*g].is_none() && *v > 0.0)
            .fold(None::<(usize, f64)>, |b, &(g, v)| match b {
                Some((_, bv)) if bv >= v => b,
                _ => Some((g, v)),
            });
        if let Some((g, v)) = best {
            out[g] = Some(v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub format_version: u32,
    pub n_folds: usize,
    pub seed: u64,
    /// Image id to fold index.
    pub assignments: BTreeMap<String, usize>,
    pub pairs: Vec<Vec<String>>,
}

impl FoldSpec {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Ids in fold `f`, sorted.
    pub fn members(&self, f: usize) -> Vec<String> {
        self.assignments.iter().filter(|(_, &v)| v == f).map(|(k, _)| k.clone()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_folds];
        for &f in self.assignments.values() {
            s[f] += 1;
        }
        s
    }
}

/// Seeded fold assignment that keeps each group in `pairs` together.
///
/// Groups (pairs plus singletons for the remaining ids) are shuffled with
/// the seed, then each goes to the currently smallest fold (lowest index on
/// ties). With singleton groups this is plain round-robin; in general fold
/// sizes differ by at most the largest group size.
pub fn make_folds(ids: &[String], n_folds: usize, pairs: &[Vec<String>], seed: u64) -> Result<FoldSpec> {
    if n_folds < 2 {
        return Err(invalid(format!("need at least 2 folds, got {n_folds}")));
    }
    let known: BTreeSet<&str> = ids.iter().map(|s| s.as_str()).collect();
    if known.len() != ids.len() {
        return Err(invalid("image ids must be unique"));
    }
    let mut grouped: BTreeSet<&str> = BTreeSet::new();
    let mut groups: Vec<Vec<String>> = Vec::new();
    for p in pairs {
        for id in p {
            if !known.contains(id.as_str()) {
                return Err(invalid(format!("paired id {id:?} is not in the dataset")));
            }
            if !grouped.insert(id.as_str()) {
                return Err(invalid(format!("id {id:?} appears in more than one pair group")));
            }
        }
        if !p.is_empty() {
            groups.push(p.clone());
        }
    }
    groups.extend(ids.iter().filter(|id| !grouped.contains(id.as_str())).map(|id| vec![id.clone()]));
    if n_folds > groups.len() {
        return Err(invalid(format!("{n_folds} folds requested but only {} independent groups", groups.len())));
    }
    groups.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);

    let mut load = vec![0usize; n_folds];
    let mut assignments = BTreeMap::new();
    for g in &groups {
        let f = (0..n_folds).min_by_key(|&f| (load[f], f)).unwrap_or(0);
        load[f] += g.len();
        for id in g {
            assignments.insert(id.clone(), f);
        }
    }
    Ok(FoldSpec {
        format_version: 1,
        n_folds,
        seed,
        assignments,
        pairs: pairs.iter().filter(|p| !p.is_empty()).cloned().collect(),
    })
}
