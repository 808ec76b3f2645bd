//! Shape-driven segmentation of detected objects.
//!
//! The cell strengths of every contributing occurrence are summed per
//! (codeword, feature), splatted as rescaled 4x4 grids at the matched
//! feature, and the resulting likelihood image drives the unary term of a
//! dense CRF solved by mean-field inference.

mod lattice;
mod meanfield;
mod unary;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codebook::Model;
use crate::detector::{Hypothesis, VoteOrigin};
use crate::error::{invalid, Result};
use crate::features::{Keypoint, GRID};
use crate::imagecore::{BinaryMask, RgbImage, ScalarField};
use crate::shapedesc::StrengthGrid;

pub use lattice::Lattice;
pub use meanfield::{meanfield_exact_trace, meanfield_infer, InferenceMode, MarginalField, EXACT_MAX_SIDE};
pub use unary::{build_unary, ColorKde, UnaryField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    pub lambda_shape: f64,
    pub lambda_color: f64,
    pub lambda_roi: f64,
    /// Foreground cost outside the enlarged ROI.
    pub roi_penalty: f64,
    /// ROI enlargement inside which foreground is free.
    pub roi_factor: f64,
    /// Pixels outside this ROI enlargement seed the background colour model.
    pub background_roi_factor: f64,
    /// |normalized likelihood| above which a pixel seeds a colour model.
    pub seed_threshold: f64,
    /// Colour KDE bandwidth per channel, 0-255 units.
    pub kde_bandwidth: f64,
    pub min_seeds: usize,
    pub w_appearance: f64,
    pub w_smoothness: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub theta_gamma: f64,
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            lambda_shape: 1.0,
            lambda_color: 0.5,
            lambda_roi: 1.0,
            roi_penalty: 10.0,
            roi_factor: 1.2,
            background_roi_factor: 1.5,
            seed_threshold: 0.5,
            kde_bandwidth: 12.0,
            min_seeds: 50,
            w_appearance: 5.0,
            w_smoothness: 3.0,
            theta_alpha: 40.0,
            theta_beta: 13.0,
            theta_gamma: 3.0,
            iterations: 10,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_shape", self.lambda_shape),
            ("lambda_color", self.lambda_color),
            ("lambda_roi", self.lambda_roi),
            ("roi_penalty", self.roi_penalty),
            ("w_appearance", self.w_appearance),
            ("w_smoothness", self.w_smoothness),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("theta_alpha", self.theta_alpha),
            ("theta_beta", self.theta_beta),
            ("theta_gamma", self.theta_gamma),
            ("kde_bandwidth", self.kde_bandwidth),
            ("roi_factor", self.roi_factor),
            ("background_roi_factor", self.background_roi_factor),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.seed_threshold) {
            return Err(invalid("seed_threshold must lie in [0, 1)"));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentParams {
    pub crf: CrfParams,
    pub mode: InferenceMode,
}

/// Summed strengths of one codeword as matched by one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsolidatedStrength {
    pub grid: StrengthGrid,
    pub codeword_id: usize,
    pub anchor: Keypoint,
}

/// One consolidated grid per (feature, codeword) among the contributors:
/// the vote-weighted sum of the strength grids of the voting occurrences'
/// shape entries.
pub fn consolidate(h: &Hypothesis, model: &Model) -> Vec<ConsolidatedStrength> {
    let mut groups: BTreeMap<(u8, usize, usize), ConsolidatedStrength> = BTreeMap::new();
    for v in &h.contributors {
        let Some(cw) = model.codewords.get(v.codeword_id) else { continue };
        let Some(occ) = cw.occurrences.get(v.occurrence_id) else { continue };
        let Some(entry) = cw.shape_codebook.get(occ.shape_idx) else { continue };
        let origin = match v.origin {
            VoteOrigin::Detected => 0,
            VoteOrigin::Dense => 1,
        };
        groups
            .entry((origin, v.feature_id, v.codeword_id))
            .or_insert_with(|| ConsolidatedStrength { grid: StrengthGrid::zeros(), codeword_id: v.codeword_id, anchor: v.kp })
            .grid
            .add_scaled(&entry.strengths, v.weight);
    }
    groups.into_values().collect()
}

/// Adds each grid, bilinearly upscaled to a square of side
/// `base_size * scale / mean_scale` centred on its anchor, into a
/// `width x height` field. Pixel `p` is covered when
/// `c - side/2 <= p < c + side/2` on both axes.
pub fn splat_likelihood(
    strengths: &[ConsolidatedStrength],
    width: usize,
    height: usize,
    base_size: usize,
    mean_scale: f64,
) -> Result<ScalarField> {
    if base_size < 3 || base_size % 2 == 0 {
        return Err(invalid(format!("base_size must be odd and >= 3, got {base_size}")));
    }
    if !(mean_scale > 0.0) {
        return Err(invalid("mean training scale must be positive"));
    }
    let mut field = ScalarField::zeros(width, height);
    let last = (GRID - 1) as f64;
    for cs in strengths {
        let side = base_size as f64 * cs.anchor.scale / mean_scale;
        let cell = side / GRID as f64;
        let (x0, y0) = (cs.anchor.x - side / 2.0, cs.anchor.y - side / 2.0);
        let xs = (x0.ceil().max(0.0) as usize)..((x0 + side).ceil().clamp(0.0, width as f64) as usize);
        let ys = (y0.ceil().max(0.0) as usize)..((y0 + side).ceil().clamp(0.0, height as f64) as usize);
        for y in ys {
            let gy = ((y as f64 - cs.anchor.y) / cell + 1.5).clamp(0.0, last);
            let r0 = (gy.floor() as usize).min(GRID - 2);
            let fy = gy - r0 as f64;
            for x in xs.clone() {
                let gx = ((x as f64 - cs.anchor.x) / cell + 1.5).clamp(0.0, last);
                let c0 = (gx.floor() as usize).min(GRID - 2);
                let fx = gx - c0 as f64;
                let g = |r: usize, c: usize| cs.grid.get(r, c);
                let v = (1.0 - fy) * ((1.0 - fx) * g(r0, c0) + fx * g(r0, c0 + 1))
                    + fy * ((1.0 - fx) * g(r0 + 1, c0) + fx * g(r0 + 1, c0 + 1));
                field.add(x, y, v);
            }
        }
    }
    Ok(field)
}

/// Result of segmenting one hypothesis.
#[derive(Debug, Clone)]
pub struct ObjectSegment {
    pub mask: BinaryMask,
    pub likelihood: ScalarField,
    pub marginals: Option<MarginalField>,
    pub color_fallback: bool,
}

/// consolidate, splat, unary terms, mean-field, argmax.
pub fn segment_hypothesis(img: &RgbImage, h: &Hypothesis, model: &Model, params: &SegmentParams) -> Result<ObjectSegment> {
    let (w, hgt) = (img.width(), img.height());
    if h.contributors.is_empty() {
        log::warn!("hypothesis at ({:.1}, {:.1}) has no contributors; returning background", h.cx, h.cy);
        return Ok(ObjectSegment {
            mask: BinaryMask::empty(w, hgt),
            likelihood: ScalarField::zeros(w, hgt),
            marginals: None,
            color_fallback: false,
        });
    }
    let strengths = consolidate(h, model);
    let likelihood = splat_likelihood(&strengths, w, hgt, model.params.base_size, model.stats.mean_feat_scale)?;
    let unary = build_unary(&likelihood, img, &h.roi, &params.crf)?;
    let q = meanfield_infer(&unary, img, &params.crf, params.mode)?;
    Ok(ObjectSegment { mask: q.argmax(), likelihood, marginals: Some(q), color_fallback: unary.color_fallback })
}

/// Segments every hypothesis and ORs the masks.
pub fn segment(img: &RgbImage, hyps: &[Hypothesis], model: &Model, params: &SegmentParams) -> Result<(BinaryMask, Vec<ObjectSegment>)> {
    let mut merged = BinaryMask::empty(img.width(), img.height());
    let mut parts = Vec::with_capacity(hyps.len());
    for h in hyps {
        let s = segment_hypothesis(img, h, model, params)?;
        merged = merged.or(&s.mask)?;
        parts.push(s);
    }
    Ok((merged, parts))
}

/// Likelihood heatmap: green for foreground evidence, red for background,
/// black where there is none.
pub fn render_heatmap(field: &ScalarField) -> RgbImage {
    let m = field.max_abs();
    RgbImage::from_fn(field.width(), field.height(), |x, y| {
        let v = if m > 0.0 { field.get(x, y) / m } else { 0.0 };
        let a = (v.abs() * 255.0).round() as u8;
        if v >= 0.0 {
            [0, a, 0]
        } else {
            [a, 0, 0]
        }
    })
}

/// The image with the likelihood blended on top.
pub fn render_overlay(img: &RgbImage, field: &ScalarField) -> RgbImage {
    let m = field.max_abs();
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let a = if m > 0.0 { 0.6 * (field.get(x, y) / m).abs() } else { 0.0 };
        let p = img.pixel(x, y);
        let tint = if field.get(x, y) >= 0.0 { [0.0, 255.0, 0.0] } else { [255.0, 0.0, 0.0] };
        [0, 1, 2].map(|c| ((1.0 - a) * p[c] as f64 + a * tint[c]).round() as u8)
    })
}
