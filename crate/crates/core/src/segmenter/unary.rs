//! Per-pixel label energies: shape likelihood, colour model and ROI prior.

use crate::error::{Error, Result};
use crate::imagecore::{Rect, RgbImage, ScalarField};

use super::CrfParams;

/// Energies for labels background (0) and foreground (1), plus the terms
/// they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    width: usize,
    height: usize,
    fg: Vec<f64>,
    bg: Vec<f64>,
    /// Normalized shape likelihood; the shape term is `-upsilon` for
    /// foreground and `+upsilon` for background.
    pub upsilon: Vec<f64>,
    pub color_fg: Vec<f64>,
    pub color_bg: Vec<f64>,
    pub roi_fg: Vec<f64>,
    /// Set when a colour model had too few seeds and the colour term was
    /// dropped.
    pub color_fallback: bool,
}

impl UnaryField {
    /// Energies given directly; component terms are left at zero.
    pub fn from_energies(width: usize, height: usize, fg: Vec<f64>, bg: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if fg.len() != n || bg.len() != n {
            return Err(Error::DimensionMismatch(format!("unary energies need {n} values per label")));
        }
        if fg.iter().chain(&bg).any(|v| !v.is_finite()) {
            return Err(Error::Malformed("unary energies must be finite".into()));
        }
        Ok(Self {
            width,
            height,
            fg,
            bg,
            upsilon: vec![0.0; n],
            color_fg: vec![0.0; n],
            color_bg: vec![0.0; n],
            roi_fg: vec![0.0; n],
            color_fallback: false,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn fg(&self) -> &[f64] {
        &self.fg
    }

    pub fn bg(&self) -> &[f64] {
        &self.bg
    }

    /// The same field with the two labels exchanged.
    pub fn swapped(&self) -> Self {
        let mut s = self.clone();
        std::mem::swap(&mut s.fg, &mut s.bg);
        std::mem::swap(&mut s.color_fg, &mut s.color_bg);
        s.upsilon.iter_mut().for_each(|v| *v = -*v);
        s
    }
}

const BIN: usize = 4;
const BINS: usize = 256 / BIN;

/// Gaussian KDE over RGB, evaluated on a 4-level-per-bin histogram that is
/// blurred with the kernel (cut at three bandwidths per channel). Densities
/// are relative (not divided by the kernel volume), which is all a ratio
/// between two models needs.
pub struct ColorKde {
    density: Vec<f64>,
}

fn bin_of(c: [u8; 3]) -> usize {
    let [r, g, b] = c.map(|v| v as usize / BIN);
    (r * BINS + g) * BINS + b
}

impl ColorKde {
    pub fn fit(colors: impl IntoIterator<Item = [u8; 3]>, bandwidth: f64) -> Option<Self> {
        let mut hist = vec![0.0; BINS * BINS * BINS];
        let mut n = 0usize;
        for c in colors {
            hist[bin_of(c)] += 1.0;
            n += 1;
        }
        if n == 0 {
            return None;
        }
        let sigma = bandwidth / BIN as f64;
        let radius = (3.0 * sigma).ceil().max(1.0) as i64;
        let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let stride = [BINS * BINS, BINS, 1];
        for s in stride {
            let mut out = vec![0.0; hist.len()];
            for (i, o) in out.iter_mut().enumerate() {
                let pos = (i / s) % BINS;
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    let q = pos as i64 + t as i64 - radius;
                    if (0..BINS as i64).contains(&q) {
                        acc += kv * hist[i + q as usize * s - pos * s];
                    }
                }
                *o = acc;
            }
            hist = out;
        }
        hist.iter_mut().for_each(|v| *v /= n as f64);
        Some(Self { density: hist })
    }

    pub fn density(&self, c: [u8; 3]) -> f64 {
        self.density[bin_of(c)]
    }
}

const EPS: f64 = 1e-8;

/// Unary energies for one hypothesis ROI.
pub fn build_unary(likelihood: &ScalarField, img: &RgbImage, roi: &Rect, params: &CrfParams) -> Result<UnaryField> {
    let (w, h) = (img.width(), img.height());
    if likelihood.width() != w || likelihood.height() != h {
        return Err(Error::DimensionMismatch(format!(
            "likelihood {}x{} vs image {w}x{h}",
            likelihood.width(),
            likelihood.height()
        )));
    }
    params.validate()?;
    let n = w * h;
    let max = likelihood.max_abs();
    let upsilon: Vec<f64> = likelihood.data().iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();

    let seed_outer = roi.scaled(params.background_roi_factor);
    let t = params.seed_threshold;
    let pix = |i: usize| img.pixel(i % w, i / w);
    let fg_seeds: Vec<usize> = (0..n).filter(|&i| upsilon[i] > t).collect();
    let bg_seeds: Vec<usize> = (0..n)
        .filter(|&i| upsilon[i] < -t || !seed_outer.contains((i % w) as f64, (i / w) as f64))
        .collect();

    let mut color_fg = vec![0.0; n];
    let mut color_bg = vec![0.0; n];
    let mut color_fallback = false;
    if fg_seeds.len() < params.min_seeds || bg_seeds.len() < params.min_seeds {
        log::warn!(
            "colour model needs {} seeds per label, have {} fg / {} bg; dropping the colour term",
            params.min_seeds,
            fg_seeds.len(),
            bg_seeds.len()
        );
        color_fallback = true;
    } else if let (Some(kf), Some(kb)) = (
        ColorKde::fit(fg_seeds.iter().map(|&i| pix(i)), params.kde_bandwidth),
        ColorKde::fit(bg_seeds.iter().map(|&i| pix(i)), params.kde_bandwidth),
    ) {
        for i in 0..n {
            let c = pix(i);
            let (pf, pb) = (kf.density(c), kb.density(c));
            let (qf, qb) = if pf + pb > 0.0 { (pf / (pf + pb), pb / (pf + pb)) } else { (0.5, 0.5) };
            color_fg[i] = -(qf + EPS).ln();
            color_bg[i] = -(qb + EPS).ln();
        }
    }

    let inner = roi.scaled(params.roi_factor);
    let roi_fg: Vec<f64> = (0..n)
        .map(|i| if inner.contains((i % w) as f64, (i / w) as f64) { 0.0 } else { params.roi_penalty })
        .collect();

    let (l1, l2, l3) = (params.lambda_shape, params.lambda_color, params.lambda_roi);
    let fg = (0..n).map(|i| -l1 * upsilon[i] + l2 * color_fg[i] + l3 * roi_fg[i]).collect();
    let bg = (0..n).map(|i| l1 * upsilon[i] + l2 * color_bg[i]).collect();
    Ok(UnaryField { width: w, height: h, fg, bg, upsilon, color_fg, color_bg, roi_fg, color_fallback })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kde_matches_direct_sum_in_ratio() {
        let a: Vec<[u8; 3]> = (0..40).map(|i| [100 + (i % 7) as u8, 50, 20 + (i % 5) as u8]).collect();
        let b: Vec<[u8; 3]> = (0..40).map(|i| [30, 120 + (i % 9) as u8, 200]).collect();
        let (ka, kb) = (ColorKde::fit(a.clone(), 12.0).unwrap(), ColorKde::fit(b.clone(), 12.0).unwrap());
        let direct = |set: &[[u8; 3]], c: [u8; 3]| -> f64 {
            set.iter()
                .map(|s| {
                    let d2: f64 = (0..3).map(|k| (s[k] as f64 - c[k] as f64).powi(2)).sum();
                    (-d2 / (2.0 * 144.0)).exp()
                })
                .sum::<f64>()
                / set.len() as f64
        };
        for c in [[104u8, 52, 22], [90, 60, 40], [32, 124, 196], [40, 110, 185]] {
            let q_bin = ka.density(c) / (ka.density(c) + kb.density(c));
            let q_dir = direct(&a, c) / (direct(&a, c) + direct(&b, c));
            assert!((q_bin - q_dir).abs() < 0.1, "{c:?}: {q_bin} vs {q_dir}");
        }
        // The kernel is cut at three bandwidths per channel.
        assert_eq!(ka.density([250, 250, 250]), 0.0);
    }

    #[test]
    fn zero_likelihood_gives_zero_shape_term() {
        let img = RgbImage::from_fn(20, 20, |_, _| [10, 20, 30]);
        let f = ScalarField::zeros(20, 20);
        let u = build_unary(&f, &img, &Rect::centered(10.0, 10.0, 8.0, 8.0), &CrfParams::default()).unwrap();
        assert!(u.upsilon.iter().all(|v| *v == 0.0));
        assert!(u.color_fallback);
    }

    #[test]
    fn unit_likelihood_pixel() {
        let img = RgbImage::from_fn(20, 20, |_, _| [10, 20, 30]);
        let mut f = ScalarField::zeros(20, 20);
        f.add(10, 10, 3.0);
        f.add(3, 3, -1.5);
        let p = CrfParams { lambda_color: 0.0, lambda_roi: 0.0, ..Default::default() };
        let u = build_unary(&f, &img, &Rect::centered(10.0, 10.0, 8.0, 8.0), &p).unwrap();
        let i = 10 * 20 + 10;
        assert_eq!((u.fg()[i], u.bg()[i]), (-1.0, 1.0));
        assert_eq!(u.upsilon[3 * 20 + 3], -0.5);
    }
}
