//! Interest points and SIFT descriptors.
//!
//! Detection combines multi-scale Harris corners, with characteristic scale
//! chosen at the extremum of the scale-normalized Laplacian, and
//! difference-of-Gaussian extrema. Descriptors are upright: the 4x4 cell grid
//! stays aligned with the image axes so that appearance and mask descriptors
//! share the same cell geometry.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imagecore::{blur_plane, gradient_plane, GrayImage, Rect};
use crate::par;

pub const DESCRIPTOR_LEN: usize = 128;
pub const GRID: usize = 4;
pub const ORIENTATIONS: usize = 8;

/// Smallest image side on which the detector runs.
pub const MIN_DETECT_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Characteristic scale in pixels.
    pub scale: f64,
    pub response: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, scale: f64) -> Self {
        Self { x, y, scale, response: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    pub harris_k: f64,
    pub levels_per_octave: usize,
    pub octaves: usize,
    /// Integration scale of the first level.
    pub base_sigma: f64,
    /// Derivation scale as a fraction of the integration scale.
    pub derivation_ratio: f64,
    /// Harris responses below this fraction of the global maximum are dropped.
    pub relative_threshold: f64,
    /// Minimum |DoG| (intensity units in [0, 1]).
    pub dog_threshold: f64,
    /// Maximum principal-curvature ratio for DoG points.
    pub edge_ratio: f64,
    /// Descriptor window side as a multiple of the keypoint scale.
    pub patch_factor: f64,
    /// Keep at most this many keypoints per image (strongest first); 0 = no cap.
    pub max_keypoints: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            harris_k: 0.04,
            levels_per_octave: 5,
            octaves: 3,
            base_sigma: 1.6,
            derivation_ratio: 0.7,
            relative_threshold: 1e-4,
            dog_threshold: 0.008,
            edge_ratio: 10.0,
            patch_factor: 6.0,
            max_keypoints: 1500,
        }
    }
}

impl FeatureParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels_per_octave == 0 || self.octaves == 0 {
            return Err(invalid("scale space needs at least one octave and one level"));
        }
        if self.octaves * self.levels_per_octave < 3 {
            return Err(invalid("scale space needs at least three levels"));
        }
        for (name, v) in [
            ("base_sigma", self.base_sigma),
            ("derivation_ratio", self.derivation_ratio),
            ("patch_factor", self.patch_factor),
            ("edge_ratio", self.edge_ratio),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.relative_threshold >= 0.0) || !(self.dog_threshold >= 0.0) {
            return Err(invalid("detector thresholds must be non-negative"));
        }
        Ok(())
    }

    pub fn level_sigma(&self, level: usize) -> f64 {
        self.base_sigma * 2f64.powf(level as f64 / self.levels_per_octave as f64)
    }

    /// |ln| distance between two adjacent levels.
    pub fn level_step(&self) -> f64 {
        std::f64::consts::LN_2 / self.levels_per_octave as f64
    }
}

/// 4x4 cells x 8 orientation bins, cell-major in row order:
/// bin `(row * 4 + col) * 8 + orientation`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SiftDescriptor(Box<[f64; DESCRIPTOR_LEN]>);

impl std::fmt::Debug for SiftDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("SiftDescriptor").field(&&self.0[..]).finish()
    }
}

impl SiftDescriptor {
    pub fn zeros() -> Self {
        Self(Box::new([0.0; DESCRIPTOR_LEN]))
    }

    pub fn from_slice(bins: &[f64]) -> Result<Self> {
        if bins.len() != DESCRIPTOR_LEN {
            return Err(Error::Malformed(format!(
                "descriptor needs {DESCRIPTOR_LEN} bins, got {}",
                bins.len()
            )));
        }
        if bins.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Malformed("descriptor bins must be finite and >= 0".into()));
        }
        let mut d = Self::zeros();
        d.0.copy_from_slice(bins);
        Ok(d)
    }

    pub fn bins(&self) -> &[f64; DESCRIPTOR_LEN] {
        &self.0
    }

    pub fn get(&self, row: usize, col: usize, orientation: usize) -> f64 {
        self.0[bin_index(row, col, orientation)]
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Mean of `descs`, rescaled to unit norm (all-zero stays all-zero).
    pub fn normalized_mean<'a>(descs: impl IntoIterator<Item = &'a SiftDescriptor>) -> Self {
        let mut sum = [0.0; DESCRIPTOR_LEN];
        for d in descs {
            for (s, v) in sum.iter_mut().zip(d.0.iter()) {
                *s += v;
            }
        }
        Self::unit(sum)
    }

    pub(crate) fn unit(mut bins: [f64; DESCRIPTOR_LEN]) -> Self {
        let norm = bins.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            bins.iter_mut().for_each(|v| *v /= norm);
        } else {
            bins = [0.0; DESCRIPTOR_LEN];
        }
        Self(Box::new(bins))
    }
}

impl TryFrom<Vec<f64>> for SiftDescriptor {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_slice(&v)
    }
}

impl From<SiftDescriptor> for Vec<f64> {
    fn from(d: SiftDescriptor) -> Self {
        d.0.to_vec()
    }
}

pub fn bin_index(row: usize, col: usize, orientation: usize) -> usize {
    (row * GRID + col) * ORIENTATIONS + orientation
}

struct Level {
    harris: Vec<f64>,
    log_abs: Vec<f64>,
    smooth: Vec<f64>,
}

fn build_level(img: &GrayImage, sigma: f64, params: &FeatureParams) -> Level {
    let (w, h) = (img.width(), img.height());
    let sigma_d = params.derivation_ratio * sigma;
    let ld = blur_plane(img.data(), w, h, sigma_d);
    let (gx, gy) = gradient_plane(&ld, w, h);
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x * y).collect() };
    let norm = sigma_d * sigma_d;
    let xx = blur_plane(&prod(&gx, &gx), w, h, sigma);
    let xy = blur_plane(&prod(&gx, &gy), w, h, sigma);
    let yy = blur_plane(&prod(&gy, &gy), w, h, sigma);
    let harris = (0..w * h)
        .map(|i| {
            let (a, b, c) = (xx[i] * norm, xy[i] * norm, yy[i] * norm);
            let det = a * c - b * b;
            let tr = a + c;
            det - params.harris_k * tr * tr
        })
        .collect();

    let smooth = blur_plane(img.data(), w, h, sigma);
    let at = |x: usize, y: usize| smooth[y * w + x];
    let mut log_abs = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let lap = at(x + 1, y) + at(x - 1, y) + at(x, y + 1) + at(x, y - 1) - 4.0 * at(x, y);
            log_abs[y * w + x] = (sigma * sigma * lap).abs();
        }
    }
    Level { harris, log_abs, smooth }
}

/// `a > b` by more than rounding noise. Blurs accumulate in a different
/// order on a transposed image, so exact comparisons would let ties on
/// symmetric structures break differently under rotation.
fn beats(a: f64, b: f64) -> bool {
    a > b + 1e-9 * a.abs().max(b.abs())
}

fn is_strict_max(plane: &[f64], w: usize, x: usize, y: usize) -> bool {
    let v = plane[y * w + x];
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let n = plane[(y as i64 + dy) as usize * w + (x as i64 + dx) as usize];
            if !beats(v, n) {
                return false;
            }
        }
    }
    true
}

/// Vertex offset of a parabola through (-1, a), (0, b), (1, c), clamped to ±0.5.
fn parabola_offset(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-300 {
        0.0
    } else {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    }
}

fn refine_position(plane: &[f64], w: usize, x: usize, y: usize) -> (f64, f64) {
    let at = |xx: usize, yy: usize| plane[yy * w + xx];
    let ox = parabola_offset(at(x - 1, y), at(x, y), at(x + 1, y));
    let oy = parabola_offset(at(x, y - 1), at(x, y), at(x, y + 1));
    (x as f64 + ox, y as f64 + oy)
}

const BORDER: usize = 3;

/// Gradient-orthogonality corner refinement: the corner `q` minimizes
/// `sum_p w_p (g_p . (q - p))^2` over a window, which puts it on every
/// edge line through the window. Falls back to `(x, y)` when the window
/// has no 2-D structure.
fn refine_corner(gx: &[f64], gy: &[f64], w: usize, h: usize, x: f64, y: f64, radius: f64) -> (f64, f64) {
    let (mut qx, mut qy) = (x, y);
    let r = radius.ceil() as i64;
    let inv_two_var = 1.0 / (2.0 * radius * radius);
    for _ in 0..5 {
        let (cx, cy) = (qx.round() as i64, qy.round() as i64);
        let (mut a, mut b, mut c, mut bx, mut by) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for py in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for px in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                let i = py as usize * w + px as usize;
                let (u, v) = (px as f64 - qx, py as f64 - qy);
                let wt = (-(u * u + v * v) * inv_two_var).exp();
                let (g1, g2) = (gx[i], gy[i]);
                let (xx, xy, yy) = (wt * g1 * g1, wt * g1 * g2, wt * g2 * g2);
                a += xx;
                b += xy;
                c += yy;
                bx += xx * px as f64 + xy * py as f64;
                by += xy * px as f64 + yy * py as f64;
            }
        }
        let det = a * c - b * b;
        if det <= 1e-12 * (a + c).powi(2) || det <= 0.0 {
            return (qx, qy);
        }
        let nx = (c * bx - b * by) / det;
        let ny = (a * by - b * bx) / det;
        if (nx - x).hypot(ny - y) > 2.0 * radius {
            return (qx, qy);
        }
        let moved = (nx - qx).hypot(ny - qy);
        (qx, qy) = (nx, ny);
        if moved < 1e-3 {
            break;
        }
    }
    (qx.clamp(0.0, (w - 1) as f64), qy.clamp(0.0, (h - 1) as f64))
}

fn harris_points(
    levels: &[Level],
    sigmas: &[f64],
    fine: &(Vec<f64>, Vec<f64>),
    w: usize,
    h: usize,
    params: &FeatureParams,
) -> Vec<Keypoint> {
    let max_r = levels
        .iter()
        .flat_map(|l| l.harris.iter())
        .fold(0.0f64, |m, &v| m.max(v));
    if max_r <= 0.0 {
        return Vec::new();
    }
    let threshold = params.relative_threshold * max_r;
    let n = levels.len();
    // The finest level is tested one-sided: an ideal step corner has a
    // normalized Laplacian that only decays with scale.
    let per_level = par::map_range(n - 1, |i| {
        let lv = &levels[i];
        let mut out = Vec::new();
        for y in BORDER..h - BORDER {
            for x in BORDER..w - BORDER {
                let idx = y * w + x;
                let r = lv.harris[idx];
                if !beats(r, threshold) || !is_strict_max(&lv.harris, w, x, y) {
                    continue;
                }
                let log = lv.log_abs[idx];
                if (i > 0 && !beats(log, levels[i - 1].log_abs[idx])) || !beats(log, levels[i + 1].log_abs[idx]) {
                    continue;
                }
                // The Harris maximum sits inside the corner by roughly the
                // integration scale; snap back onto the edge intersection.
                let (px, py) = refine_position(&lv.harris, w, x, y);
                let (px, py) = refine_corner(&fine.0, &fine.1, w, h, px, py, (1.5 * sigmas[i]).max(3.0));
                out.push(Keypoint { x: px, y: py, scale: sigmas[i], response: r / max_r });
            }
        }
        out
    });
    per_level.into_iter().flatten().collect()
}

fn dog_points(levels: &[Level], sigmas: &[f64], w: usize, h: usize, params: &FeatureParams) -> Vec<Keypoint> {
    let dogs: Vec<Vec<f64>> = levels
        .windows(2)
        .map(|p| p[1].smooth.iter().zip(&p[0].smooth).map(|(a, b)| a - b).collect())
        .collect();
    let n = dogs.len();
    let edge = (params.edge_ratio + 1.0).powi(2) / params.edge_ratio;
    let step = 2f64.powf(0.5 / params.levels_per_octave as f64);
    let per_level = par::map_range(n.saturating_sub(2), |k| {
        let i = k + 1;
        let d = &dogs[i];
        let mut out = Vec::new();
        for y in BORDER..h - BORDER {
            for x in BORDER..w - BORDER {
                let v = d[y * w + x];
                if v.abs() <= params.dog_threshold {
                    continue;
                }
                let sign = v.signum();
                let mut extremum = true;
                'scan: for (li, plane) in dogs[i - 1..=i + 1].iter().enumerate() {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if li == 1 && dx == 0 && dy == 0 {
                                continue;
                            }
                            let nv = plane[(y as i64 + dy) as usize * w + (x as i64 + dx) as usize];
                            if !beats(sign * v, sign * nv) {
                                extremum = false;
                                break 'scan;
                            }
                        }
                    }
                }
                if !extremum {
                    continue;
                }
                let at = |xx: usize, yy: usize| d[yy * w + xx];
                let dxx = at(x + 1, y) + at(x - 1, y) - 2.0 * v;
                let dyy = at(x, y + 1) + at(x, y - 1) - 2.0 * v;
                let dxy = (at(x + 1, y + 1) - at(x + 1, y - 1) - at(x - 1, y + 1) + at(x - 1, y - 1)) / 4.0;
                let tr = dxx + dyy;
                let det = dxx * dyy - dxy * dxy;
                if det <= 0.0 || tr * tr / det >= edge {
                    continue;
                }
                let abs: Vec<f64> = [
                    at(x - 1, y),
                    v,
                    at(x + 1, y),
                    at(x, y - 1),
                    at(x, y + 1),
                ]
                .iter()
                .map(|a| a.abs())
                .collect();
                let ox = parabola_offset(abs[0], abs[1], abs[2]);
                let oy = parabola_offset(abs[3], abs[1], abs[4]);
                out.push(Keypoint {
                    x: x as f64 + ox,
                    y: y as f64 + oy,
                    scale: sigmas[i] * step,
                    response: v.abs(),
                });
            }
        }
        out
    });
    let mut pts: Vec<Keypoint> = per_level.into_iter().flatten().collect();
    let max = pts.iter().fold(0.0f64, |m, k| m.max(k.response));
    if max > 0.0 {
        pts.iter_mut().for_each(|k| k.response /= max);
    }
    pts
}

fn keypoint_order(a: &Keypoint, b: &Keypoint) -> Ordering {
    b.response
        .total_cmp(&a.response)
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
        .then(a.scale.total_cmp(&b.scale))
}

/// Harris-Laplace corners plus DoG extrema, strongest first.
///
/// Responses of each detector are normalized by that detector's maximum, so
/// both lie in (0, 1]. Points within 2 px and one scale level of a stronger
/// point are dropped. Images smaller than 32x32 yield no keypoints.
pub fn detect_harris_laplace(img: &GrayImage, params: &FeatureParams) -> Vec<Keypoint> {
    let (w, h) = (img.width(), img.height());
    if w < MIN_DETECT_SIDE || h < MIN_DETECT_SIDE {
        return Vec::new();
    }
    let n = params.octaves * params.levels_per_octave;
    let sigmas: Vec<f64> = (0..n).map(|i| params.level_sigma(i)).collect();
    let levels = par::map_range(n, |i| build_level(img, sigmas[i], params));

    let fine = gradient_plane(&blur_plane(img.data(), w, h, 1.0), w, h);
    let mut candidates = harris_points(&levels, &sigmas, &fine, w, h, params);
    candidates.extend(dog_points(&levels, &sigmas, w, h, params));
    candidates.sort_by(keypoint_order);

    let scale_tol = params.level_step() + 1e-9;
    let mut kept: Vec<Keypoint> = Vec::new();
    for c in candidates {
        let dup = kept.iter().any(|k| {
            (k.x - c.x).hypot(k.y - c.y) <= 2.0 && (k.scale / c.scale).ln().abs() <= scale_tol
        });
        if !dup {
            kept.push(c);
            if params.max_keypoints > 0 && kept.len() == params.max_keypoints {
                break;
            }
        }
    }
    kept
}

/// Precomputed gradients of one image, shared by every descriptor on it.
pub struct SiftExtractor {
    width: usize,
    height: usize,
    magnitude: Vec<f64>,
    /// Orientation in bin units, [0, 8): bin b is centred on 45 b degrees,
    /// 0 = +x, angles growing clockwise on screen (y points down).
    orientation: Vec<f64>,
    patch_factor: f64,
}

impl SiftExtractor {
    pub fn new(img: &GrayImage, patch_factor: f64) -> Self {
        let (w, h) = (img.width(), img.height());
        let (gx, gy) = gradient_plane(img.data(), w, h);
        let mut magnitude = Vec::with_capacity(w * h);
        let mut orientation = Vec::with_capacity(w * h);
        let bin_width = 2.0 * PI / ORIENTATIONS as f64;
        for (dx, dy) in gx.iter().zip(&gy) {
            magnitude.push(dx.hypot(*dy));
            let mut a = dy.atan2(*dx);
            if a < 0.0 {
                a += 2.0 * PI;
            }
            let mut o = a / bin_width;
            if o >= ORIENTATIONS as f64 {
                o -= ORIENTATIONS as f64;
            }
            orientation.push(o);
        }
        Self { width: w, height: h, magnitude, orientation, patch_factor }
    }

    /// Window side in pixels for a keypoint of the given scale.
    pub fn window_side(&self, scale: f64) -> f64 {
        self.patch_factor * scale
    }

    pub fn describe(&self, kp: &Keypoint) -> Result<SiftDescriptor> {
        if !(kp.scale > 0.0) || !kp.x.is_finite() || !kp.y.is_finite() {
            return Err(invalid(format!("keypoint scale must be positive, got {}", kp.scale)));
        }
        let side = self.window_side(kp.scale);
        let half = side / 2.0;
        let cell = side / GRID as f64;
        let (wmax, hmax) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if kp.x + half < 0.0 || kp.x - half > wmax || kp.y + half < 0.0 || kp.y - half > hmax {
            return Err(Error::WindowOutside);
        }

        let reach = half + cell / 2.0;
        let x0 = (kp.x - reach).floor().max(0.0) as usize;
        let x1 = (kp.x + reach).ceil().min(wmax) as usize;
        let y0 = (kp.y - reach).floor().max(0.0) as usize;
        let y1 = (kp.y + reach).ceil().min(hmax) as usize;
        let inv_two_var = 1.0 / (2.0 * half * half);
        let centre = (GRID as f64 - 1.0) / 2.0;

        let mut hist = [0.0; DESCRIPTOR_LEN];
        for py in y0..=y1 {
            let v = py as f64 - kp.y;
            let cy = v / cell + centre;
            if cy <= -1.0 || cy >= GRID as f64 {
                continue;
            }
            for px in x0..=x1 {
                let u = px as f64 - kp.x;
                let cx = u / cell + centre;
                if cx <= -1.0 || cx >= GRID as f64 {
                    continue;
                }
                let idx = py * self.width + px;
                let mag = self.magnitude[idx];
                if mag == 0.0 {
                    continue;
                }
                let weight = mag * (-(u * u + v * v) * inv_two_var).exp();
                accumulate(&mut hist, cx, cy, self.orientation[idx], weight);
            }
        }
        Ok(finish(hist))
    }
}

fn accumulate(hist: &mut [f64; DESCRIPTOR_LEN], cx: f64, cy: f64, o: f64, weight: f64) {
    let (r0, fy) = (cy.floor(), cy - cy.floor());
    let (c0, fx) = (cx.floor(), cx - cx.floor());
    let (o0, fo) = (o.floor(), o - o.floor());
    for (dr, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        let r = r0 + dr;
        if !(0.0..GRID as f64).contains(&r) || wy == 0.0 {
            continue;
        }
        for (dc, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let c = c0 + dc;
            if !(0.0..GRID as f64).contains(&c) || wx == 0.0 {
                continue;
            }
            for (dk, wo) in [(0usize, 1.0 - fo), (1, fo)] {
                if wo == 0.0 {
                    continue;
                }
                let ob = (o0 as usize + dk) % ORIENTATIONS;
                hist[bin_index(r as usize, c as usize, ob)] += weight * wy * wx * wo;
            }
        }
    }
}

/// L2 normalize, clamp at 0.2, renormalize.
fn finish(hist: [f64; DESCRIPTOR_LEN]) -> SiftDescriptor {
    let mut d = SiftDescriptor::unit(hist);
    if d.is_zero() {
        return d;
    }
    d.0.iter_mut().for_each(|v| *v = v.min(0.2));
    SiftDescriptor::unit(*d.0)
}

pub fn compute_sift(img: &GrayImage, kp: &Keypoint, patch_factor: f64) -> Result<SiftDescriptor> {
    SiftExtractor::new(img, patch_factor).describe(kp)
}

/// Regular grid over `roi` at every requested scale, `response = 0`.
///
/// Each axis gets `ceil(extent / stride)` samples spread evenly, so the
/// spacing never exceeds `stride` and a ROI narrower than the stride still
/// gets its centre sampled.
pub fn dense_sample(roi: &Rect, stride: f64, scales: &[f64]) -> Result<Vec<Keypoint>> {
    if !(roi.w > 0.0) || !(roi.h > 0.0) {
        return Err(Error::EmptyRoi);
    }
    if !(stride >= 1.0) {
        return Err(invalid(format!("stride must be >= 1, got {stride}")));
    }
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0)) {
        return Err(invalid("dense sampling needs non-empty positive scales"));
    }
    let nx = (roi.w / stride).ceil().max(1.0) as usize;
    let ny = (roi.h / stride).ceil().max(1.0) as usize;
    let (sx, sy) = (roi.w / nx as f64, roi.h / ny as f64);
    let mut out = Vec::with_capacity(nx * ny * scales.len());
    for &scale in scales {
        for j in 0..ny {
            for i in 0..nx {
                out.push(Keypoint::new(
                    roi.x + (i as f64 + 0.5) * sx,
                    roi.y + (j as f64 + 0.5) * sy,
                    scale,
                ));
            }
        }
    }
    Ok(out)
}
