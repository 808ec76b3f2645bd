//! Codeword matching, weighted Hough voting, mean-shift mode search and
//! dense refinement of object hypotheses.

use serde::{Deserialize, Serialize};

use crate::codebook::{similarity, Model};
use crate::error::{invalid, Result};
use crate::features::{dense_sample, detect_harris_laplace, Keypoint, SiftDescriptor, SiftExtractor};
use crate::imagecore::{GrayImage, Rect};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    /// Spatial mean-shift bandwidth as a fraction of the mean training
    /// object diagonal, at scale 1.
    pub bandwidth_factor: f64,
    /// Mean-shift bandwidth along ln(s).
    pub log_scale_bandwidth: f64,
    /// Hypotheses scoring below this fraction of the best are dropped.
    pub score_ratio: f64,
    pub nms_iou: f64,
    pub max_iterations: usize,
    pub refine: bool,
    pub refine_stride: f64,
    /// Dense scales as multiples of mean training feature scale times `s`.
    pub refine_scales: Vec<f64>,
    /// Refinement keeps votes within this fraction of the ROI diagonal.
    pub refine_radius: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            bandwidth_factor: 0.1,
            log_scale_bandwidth: 0.25,
            score_ratio: 0.1,
            nms_iou: 0.5,
            max_iterations: 100,
            refine: true,
            refine_stride: 4.0,
            refine_scales: vec![0.75, 1.0, 1.5],
            refine_radius: 0.25,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bandwidth_factor", self.bandwidth_factor),
            ("log_scale_bandwidth", self.log_scale_bandwidth),
            ("refine_stride", self.refine_stride),
            ("refine_radius", self.refine_radius),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.score_ratio) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(invalid("score_ratio and nms_iou must lie in [0, 1]"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations must be >= 1"));
        }
        if self.refine_stride < 1.0 {
            return Err(invalid("refine_stride must be >= 1"));
        }
        if self.refine_scales.is_empty() || self.refine_scales.iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("refine_scales must be non-empty and positive"));
        }
        Ok(())
    }
}

/// An image feature with its appearance descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub kp: Keypoint,
    pub desc: SiftDescriptor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub feature: usize,
    pub codeword: usize,
    pub sim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteOrigin {
    Detected,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub cx: f64,
    pub cy: f64,
    pub s: f64,
    pub weight: f64,
    pub feature_id: usize,
    pub codeword_id: usize,
    pub occurrence_id: usize,
    /// The voting feature; `feature_id` indexes the list named by `origin`.
    pub kp: Keypoint,
    pub origin: VoteOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub cx: f64,
    pub cy: f64,
    pub s: f64,
    pub score: f64,
    pub roi: Rect,
    pub contributors: Vec<Vote>,
    pub refined: bool,
    /// Set when refinement found the ROI entirely off the image.
    pub outside: bool,
}

/// All (feature, codeword) pairs with similarity >= `t`.
///
/// All-zero feature descriptors (flat patches) carry no appearance and are
/// never matched.
pub fn match_features(features: &[Feature], model: &Model) -> Vec<Match> {
    let t = model.params.t;
    par::map_range(features.len(), |k| {
        let f = &features[k];
        if f.desc.is_zero() {
            return Vec::new();
        }
        model
            .codewords
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                let sim = similarity(&f.desc, &c.center);
                (sim >= t).then_some(Match { feature: k, codeword: i, sim })
            })
            .collect()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// One vote per (match, occurrence), weighted `1 / (|M_k| |O_i|)`.
pub fn cast_votes(keypoints: &[Keypoint], matches: &[Match], model: &Model, origin: VoteOrigin) -> Vec<Vote> {
    let mut per_feature = vec![0usize; keypoints.len()];
    for m in matches {
        per_feature[m.feature] += 1;
    }
    let mut votes = Vec::new();
    for m in matches {
        let kp = keypoints[m.feature];
        let occs = &model.codewords[m.codeword].occurrences;
        let weight = 1.0 / (per_feature[m.feature] as f64 * occs.len() as f64);
        for (oi, o) in occs.iter().enumerate() {
            let s = kp.scale / o.feat_scale;
            votes.push(Vote {
                cx: kp.x - o.dx * s,
                cy: kp.y - o.dy * s,
                s,
                weight,
                feature_id: m.feature,
                codeword_id: m.codeword,
                occurrence_id: oi,
                kp,
                origin,
            });
        }
    }
    votes
}

/// Mean-shift over votes in (x, y, ln s).
struct VoteSpace<'a> {
    votes: Vec<&'a Vote>,
    ln_s: Vec<f64>,
    bandwidth: f64,
    log_bw: f64,
}

const WINDOW: f64 = 4.0;
const CONTRIBUTOR_RADIUS: f64 = 1.5;

impl<'a> VoteSpace<'a> {
    fn new(votes: &'a [Vote], bandwidth: f64, log_bw: f64) -> Self {
        let mut sorted: Vec<&Vote> = votes.iter().collect();
        sorted.sort_by(|a, b| a.cx.total_cmp(&b.cx).then(a.cy.total_cmp(&b.cy)).then(a.s.total_cmp(&b.s)));
        let ln_s = sorted.iter().map(|v| v.s.ln()).collect();
        Self { votes: sorted, ln_s, bandwidth, log_bw }
    }

    /// Squared normalized distance of vote `i` from (x, y, ln s).
    fn dist2(&self, i: usize, x: f64, y: f64, ls: f64) -> f64 {
        let v = self.votes[i];
        let sp = self.bandwidth * ls.exp();
        let (dx, dy, dl) = ((v.cx - x) / sp, (v.cy - y) / sp, (self.ln_s[i] - ls) / self.log_bw);
        dx * dx + dy * dy + dl * dl
    }

    fn window(&self, x: f64, ls: f64) -> std::ops::Range<usize> {
        let r = WINDOW * self.bandwidth * ls.exp();
        let lo = self.votes.partition_point(|v| v.cx < x - r);
        let hi = self.votes.partition_point(|v| v.cx <= x + r);
        lo..hi
    }

    fn shift(&self, x: f64, y: f64, ls: f64) -> Option<(f64, f64, f64)> {
        // Offsets from the first vote in the window keep the mean of
        // coincident votes exact.
        let range = self.window(x, ls);
        let r = range.start;
        let (rx, ry, rl) = (self.votes.get(r)?.cx, self.votes.get(r)?.cy, *self.ln_s.get(r)?);
        let (mut sw, mut sx, mut sy, mut sl) = (0.0, 0.0, 0.0, 0.0);
        for i in range {
            let k = self.votes[i].weight * (-0.5 * self.dist2(i, x, y, ls)).exp();
            sw += k;
            sx += k * (self.votes[i].cx - rx);
            sy += k * (self.votes[i].cy - ry);
            sl += k * (self.ln_s[i] - rl);
        }
        (sw > 0.0).then(|| (rx + sx / sw, ry + sy / sw, rl + sl / sw))
    }

    fn climb(&self, mut p: (f64, f64, f64), max_iter: usize) -> (f64, f64, f64) {
        for _ in 0..max_iter {
            let Some(n) = self.shift(p.0, p.1, p.2) else { break };
            let sp = self.bandwidth * p.2.exp();
            let moved = (((n.0 - p.0) / sp).powi(2) + ((n.1 - p.1) / sp).powi(2) + ((n.2 - p.2) / self.log_bw).powi(2)).sqrt();
            p = n;
            if moved < 1e-3 {
                break;
            }
        }
        p
    }

    fn score(&self, x: f64, y: f64, ls: f64) -> f64 {
        self.window(x, ls)
            .map(|i| self.votes[i].weight * (-0.5 * self.dist2(i, x, y, ls)).exp())
            .sum()
    }

    fn contributors(&self, x: f64, y: f64, ls: f64) -> Vec<Vote> {
        let r2 = CONTRIBUTOR_RADIUS * CONTRIBUTOR_RADIUS;
        let mut out: Vec<Vote> =
            self.window(x, ls).filter(|&i| self.dist2(i, x, y, ls) <= r2).map(|i| *self.votes[i]).collect();
        out.sort_by(vote_order);
        out
    }

    /// Weighted means of votes grouped into bandwidth-sized bins.
    fn seeds(&self) -> Vec<(f64, f64, f64)> {
        let mut bins: std::collections::BTreeMap<(i64, i64, i64), (f64, f64, f64, f64)> = Default::default();
        for (i, v) in self.votes.iter().enumerate() {
            let sp = self.bandwidth * v.s;
            let key = (
                (v.cx / sp).floor() as i64,
                (v.cy / sp).floor() as i64,
                (self.ln_s[i] / self.log_bw).floor() as i64,
            );
            let e = bins.entry(key).or_default();
            e.0 += v.weight;
            e.1 += v.weight * v.cx;
            e.2 += v.weight * v.cy;
            e.3 += v.weight * self.ln_s[i];
        }
        bins.values().map(|&(w, x, y, l)| (x / w, y / w, l / w)).collect()
    }
}

fn vote_order(a: &Vote, b: &Vote) -> std::cmp::Ordering {
    (a.origin as u8)
        .cmp(&(b.origin as u8))
        .then(a.feature_id.cmp(&b.feature_id))
        .then(a.codeword_id.cmp(&b.codeword_id))
        .then(a.occurrence_id.cmp(&b.occurrence_id))
}

/// Mean-shift modes of the vote density, strongest first.
///
/// The spatial kernel width at scale `s` is `bandwidth * s`; `log_bw` is
/// the width along ln s. Modes closer than half a bandwidth are merged into
/// the stronger one. Scores are kernel-weighted vote mass at the mode, so a
/// mode sitting on coincident votes scores their total weight. No score
/// filtering or suppression happens here.
pub fn estimate_modes(votes: &[Vote], bandwidth: f64, log_bw: f64, max_iter: usize) -> Vec<(f64, f64, f64, f64)> {
    if votes.is_empty() || !(bandwidth > 0.0) || !(log_bw > 0.0) {
        return Vec::new();
    }
    let space = VoteSpace::new(votes, bandwidth, log_bw);
    let seeds = space.seeds();
    let mut modes: Vec<(f64, f64, f64, f64)> = par::map_slice(&seeds, |&p| {
        let (x, y, l) = space.climb(p, max_iter.max(1));
        (x, y, l, space.score(x, y, l))
    });
    modes.sort_by(|a, b| b.3.total_cmp(&a.3).then(a.1.total_cmp(&b.1)).then(a.0.total_cmp(&b.0)));
    let mut kept: Vec<(f64, f64, f64, f64)> = Vec::new();
    for m in modes {
        let dup = kept.iter().any(|k| {
            let sp = bandwidth * k.2.exp();
            let d = (((m.0 - k.0) / sp).powi(2) + ((m.1 - k.1) / sp).powi(2) + ((m.2 - k.2) / log_bw).powi(2)).sqrt();
            d < 0.5
        });
        if !dup {
            kept.push(m);
        }
    }
    kept.into_iter().map(|(x, y, l, sc)| (x, y, l.exp(), sc)).collect()
}

pub struct Detector<'m> {
    model: &'m Model,
    params: DetectorParams,
}

impl<'m> Detector<'m> {
    pub fn new(model: &'m Model, params: DetectorParams) -> Result<Self> {
        params.validate()?;
        if model.codewords.is_empty() {
            return Err(invalid("model has no codewords"));
        }
        Ok(Self { model, params })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn params(&self) -> &DetectorParams {
        &self.params
    }

    /// Spatial bandwidth at scale 1, in pixels.
    pub fn bandwidth(&self) -> f64 {
        let (w, h) = self.model.mean_object_size();
        self.params.bandwidth_factor * w.hypot(h)
    }

    pub fn roi(&self, cx: f64, cy: f64, s: f64) -> Rect {
        let (w, h) = self.model.mean_object_size();
        Rect::centered(cx, cy, w * s, h * s)
    }

    pub fn features(&self, img: &GrayImage) -> Result<Vec<Feature>> {
        let fp = &self.model.params.features;
        let kps = detect_harris_laplace(img, fp);
        let ex = SiftExtractor::new(img, fp.patch_factor);
        par::map_slice(&kps, |kp| ex.describe(kp).map(|desc| Feature { kp: *kp, desc })).into_iter().collect()
    }

    /// Hypotheses from the votes alone, before refinement.
    pub fn hypotheses(&self, votes: &[Vote]) -> Vec<Hypothesis> {
        let bw = self.bandwidth();
        let lb = self.params.log_scale_bandwidth;
        let modes = estimate_modes(votes, bw, lb, self.params.max_iterations);
        let Some(top) = modes.first().map(|m| m.3) else { return Vec::new() };
        let space = VoteSpace::new(votes, bw, lb);
        let mut out: Vec<Hypothesis> = Vec::new();
        for (cx, cy, s, score) in modes {
            if score < self.params.score_ratio * top || !(score > 0.0) {
                continue;
            }
            let roi = self.roi(cx, cy, s);
            if out.iter().any(|h| h.roi.iou(&roi) > self.params.nms_iou) {
                continue;
            }
            let contributors = space.contributors(cx, cy, s.ln());
            out.push(Hypothesis { cx, cy, s, score, roi, contributors, refined: false, outside: false });
        }
        out
    }

    /// Detect, vote, find modes and refine each surviving hypothesis.
    pub fn detect(&self, img: &GrayImage) -> Result<Vec<Hypothesis>> {
        let feats = self.features(img)?;
        let matches = match_features(&feats, self.model);
        let kps: Vec<Keypoint> = feats.iter().map(|f| f.kp).collect();
        let votes = cast_votes(&kps, &matches, self.model, VoteOrigin::Detected);
        log::debug!("{} features, {} matches, {} votes", feats.len(), matches.len(), votes.len());
        let mut hyps = self.hypotheses(&votes);
        if self.params.refine && !hyps.is_empty() {
            let ex = SiftExtractor::new(img, self.model.params.features.patch_factor);
            hyps = hyps.into_iter().map(|h| self.refine_with(h, img, &ex)).collect::<Result<_>>()?;
        }
        Ok(hyps)
    }

    pub fn refine(&self, h: Hypothesis, img: &GrayImage) -> Result<Hypothesis> {
        let ex = SiftExtractor::new(img, self.model.params.features.patch_factor);
        self.refine_with(h, img, &ex)
    }

    /// Adds votes from a dense grid over the ROI that land near the centre.
    /// The hypothesis position and scale stay fixed.
    fn refine_with(&self, mut h: Hypothesis, img: &GrayImage, ex: &SiftExtractor) -> Result<Hypothesis> {
        let frame = Rect { x: -0.5, y: -0.5, w: img.width() as f64, h: img.height() as f64 };
        let Some(area) = h.roi.intersect(&frame) else {
            h.outside = true;
            return Ok(h);
        };
        let base = self.model.stats.mean_feat_scale * h.s;
        let scales: Vec<f64> = self.params.refine_scales.iter().map(|f| f * base).collect();
        let grid = dense_sample(&area, self.params.refine_stride, &scales)?;
        let feats: Vec<Feature> = par::map_slice(&grid, |kp| ex.describe(kp).ok().map(|desc| Feature { kp: *kp, desc }))
            .into_iter()
            .flatten()
            .collect();
        let matches = match_features(&feats, self.model);
        let kps: Vec<Keypoint> = feats.iter().map(|f| f.kp).collect();
        let radius = self.params.refine_radius * h.roi.diagonal();
        let fresh = cast_votes(&kps, &matches, self.model, VoteOrigin::Dense)
            .into_iter()
            .filter(|v| (v.cx - h.cx).hypot(v.cy - h.cy) <= radius);
        h.contributors.extend(fresh);
        h.contributors.sort_by(vote_order);
        let space = VoteSpace::new(&h.contributors, self.bandwidth(), self.params.log_scale_bandwidth);
        h.score = (0..space.votes.len())
            .map(|i| space.votes[i].weight * (-0.5 * space.dist2(i, h.cx, h.cy, h.s.ln())).exp())
            .sum();
        h.refined = true;
        Ok(h)
    }
}
