//! Mean-field inference for the two-label dense CRF.
//!
//! Pairwise terms are Potts with an appearance kernel
//! `exp(-|dp|^2 / 2 theta_a^2 - |dI|^2 / 2 theta_b^2)` and a smoothness
//! kernel `exp(-|dp|^2 / 2 theta_g^2)`. Each kernel is used in symmetric
//! degree-normalized form `D^-1/2 K D^-1/2` (self pairs excluded), which
//! keeps messages on the scale of the weights whatever the image size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{BinaryMask, RgbImage};
use crate::par;

use super::lattice::Lattice;
use super::unary::UnaryField;
use super::CrfParams;

/// Largest side accepted by exact inference.
pub const EXACT_MAX_SIDE: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Direct O(N^2) message sums.
    Exact,
    /// Permutohedral lattice for the appearance kernel, separable
    /// convolution for the smoothness kernel.
    #[default]
    Fast,
}

/// Foreground marginals; background is `1 - fg` by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    width: usize,
    height: usize,
    fg: Vec<f64>,
}

impl MarginalField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn fg(&self) -> &[f64] {
        &self.fg
    }

    pub fn q_fg(&self, x: usize, y: usize) -> f64 {
        self.fg[y * self.width + x]
    }

    pub fn q_bg(&self, x: usize, y: usize) -> f64 {
        1.0 - self.q_fg(x, y)
    }

    /// Foreground where `Q(fg) > Q(bg)`; ties go to background.
    pub fn argmax(&self) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |x, y| self.q_fg(x, y) > 0.5)
    }
}

/// Unnormalized kernel sums without the self pair:
/// `(sum_j k_a(i, j) a_j, sum_j k_s(i, j) s_j)` over `j != i`.
trait Pairwise {
    fn apply(&self, a: &[f64], s: &[f64]) -> (Vec<f64>, Vec<f64>);
}

struct ExactKernels<'a> {
    img: &'a RgbImage,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
}

impl<'a> ExactKernels<'a> {
    fn new(img: &'a RgbImage, p: &CrfParams) -> Self {
        let (w, h) = (img.width(), img.height());
        let max_sp = (w - 1) * (w - 1) + (h - 1) * (h - 1);
        let table = |max: usize, theta: f64| -> Vec<f64> {
            (0..=max).map(|d2| (-(d2 as f64) / (2.0 * theta * theta)).exp()).collect()
        };
        Self {
            img,
            alpha: table(max_sp, p.theta_alpha),
            beta: table(3 * 255 * 255, p.theta_beta),
            gamma: table(max_sp, p.theta_gamma),
        }
    }
}

impl Pairwise for ExactKernels<'_> {
    fn apply(&self, va: &[f64], vs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (w, h) = (self.img.width(), self.img.height());
        let rgb = self.img.data();
        let rows = par::map_range(w * h, |i| {
            let (xi, yi) = ((i % w) as i64, (i / w) as i64);
            let ci = &rgb[3 * i..3 * i + 3];
            let (mut a, mut s) = (0.0, 0.0);
            for j in 0..w * h {
                if j == i {
                    continue;
                }
                let (dx, dy) = ((j % w) as i64 - xi, (j / w) as i64 - yi);
                let sp = (dx * dx + dy * dy) as usize;
                let cj = &rgb[3 * j..3 * j + 3];
                let dc: usize = (0..3).map(|k| (ci[k] as i64 - cj[k] as i64).pow(2) as usize).sum();
                a += self.alpha[sp] * self.beta[dc] * va[j];
                s += self.gamma[sp] * vs[j];
            }
            (a, s)
        });
        rows.into_iter().unzip()
    }
}

struct FastKernels {
    width: usize,
    height: usize,
    lattice: Lattice,
    lattice_self: Vec<f64>,
    taps: Vec<f64>,
}

impl FastKernels {
    fn new(img: &RgbImage, p: &CrfParams) -> Self {
        let (w, h) = (img.width(), img.height());
        let mut feats = Vec::with_capacity(w * h * 5);
        for y in 0..h {
            for x in 0..w {
                let c = img.pixel(x, y);
                feats.extend([x as f64 / p.theta_alpha, y as f64 / p.theta_alpha]);
                feats.extend(c.map(|v| v as f64 / p.theta_beta));
            }
        }
        let radius = (4.0 * p.theta_gamma).ceil() as i64;
        let taps = (-radius..=radius)
            .map(|k| (-((k * k) as f64) / (2.0 * p.theta_gamma * p.theta_gamma)).exp())
            .collect();
        let lattice = Lattice::new(&feats, 5);
        let lattice_self = lattice.self_weights();
        Self { width: w, height: h, lattice, lattice_self, taps }
    }

    /// Separable Gaussian with zero padding, i.e. a sum over image pixels.
    fn smooth(&self, v: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let r = (self.taps.len() / 2) as i64;
        let mut tmp = vec![0.0; w * h];
        par::for_each_row(&mut tmp, w, |y, row| {
            for (x, o) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (t, k) in self.taps.iter().enumerate() {
                    let xx = x as i64 + t as i64 - r;
                    if (0..w as i64).contains(&xx) {
                        acc += k * v[y * w + xx as usize];
                    }
                }
                *o = acc;
            }
        });
        let mut out = vec![0.0; w * h];
        par::for_each_row(&mut out, w, |y, row| {
            for (x, o) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (t, k) in self.taps.iter().enumerate() {
                    let yy = y as i64 + t as i64 - r;
                    if (0..h as i64).contains(&yy) {
                        acc += k * tmp[yy as usize * w + x];
                    }
                }
                *o = acc;
            }
        });
        out
    }
}

impl Pairwise for FastKernels {
    fn apply(&self, va: &[f64], vs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        // Both filters include the self pair: kernel value 1 for the
        // convolution, the lattice's own impulse response for the lattice.
        let mut a = self.lattice.filter(va, 1);
        let mut s = self.smooth(vs);
        for i in 0..va.len() {
            a[i] -= self.lattice_self[i] * va[i];
            s[i] -= vs[i];
        }
        (a, s)
    }
}

/// `M(v) = w_a D_a^-1/2 K_a D_a^-1/2 v + w_s D_s^-1/2 K_s D_s^-1/2 v`.
struct Messages<K: Pairwise> {
    kernels: K,
    inv_sqrt_a: Vec<f64>,
    inv_sqrt_s: Vec<f64>,
    w_a: f64,
    w_s: f64,
}

fn inv_sqrt(d: &[f64]) -> Vec<f64> {
    d.iter().map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect()
}

impl<K: Pairwise> Messages<K> {
    fn new(kernels: K, p: &CrfParams, n: usize) -> Self {
        let ones = vec![1.0; n];
        let (da, ds) = kernels.apply(&ones, &ones);
        Self { inv_sqrt_a: inv_sqrt(&da), inv_sqrt_s: inv_sqrt(&ds), kernels, w_a: p.w_appearance, w_s: p.w_smoothness }
    }

    fn apply(&self, q: &[f64]) -> Vec<f64> {
        if self.w_a == 0.0 && self.w_s == 0.0 {
            return vec![0.0; q.len()];
        }
        let va: Vec<f64> = q.iter().zip(&self.inv_sqrt_a).map(|(a, b)| a * b).collect();
        let vs: Vec<f64> = q.iter().zip(&self.inv_sqrt_s).map(|(a, b)| a * b).collect();
        let (ka, ks) = self.kernels.apply(&va, &vs);
        (0..q.len())
            .map(|i| self.w_a * self.inv_sqrt_a[i] * ka[i] + self.w_s * self.inv_sqrt_s[i] * ks[i])
            .collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn xlogx(q: f64) -> f64 {
    if q > 0.0 {
        q * q.ln()
    } else {
        0.0
    }
}

/// Variational free energy of `q` given messages `m_fg = M(q)` and
/// `m_bg = M(1 - q)`.
fn free_energy(u: &UnaryField, q: &[f64], m_fg: &[f64], m_bg: &[f64]) -> f64 {
    (0..q.len())
        .map(|i| {
            let (f, b) = (q[i], 1.0 - q[i]);
            f * u.fg()[i] + b * u.bg()[i] + 0.5 * (f * m_bg[i] + b * m_fg[i]) + xlogx(f) + xlogx(b)
        })
        .sum()
}

fn check(u: &UnaryField, img: &RgbImage, p: &CrfParams) -> Result<()> {
    p.validate()?;
    if u.width() != img.width() || u.height() != img.height() {
        return Err(Error::DimensionMismatch(format!(
            "unary {}x{} vs image {}x{}",
            u.width(),
            u.height(),
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

fn run<K: Pairwise>(u: &UnaryField, kernels: K, p: &CrfParams, trace: bool) -> (MarginalField, Vec<f64>) {
    let n = u.fg().len();
    let msgs = Messages::new(kernels, p, n);
    let m_one = msgs.apply(&vec![1.0; n]);
    let mut q: Vec<f64> = (0..n).map(|i| sigmoid(u.bg()[i] - u.fg()[i])).collect();
    let mut energies = Vec::new();
    for it in 0..=p.iterations {
        let m_fg = msgs.apply(&q);
        let m_bg: Vec<f64> = m_one.iter().zip(&m_fg).map(|(a, b)| a - b).collect();
        if trace {
            energies.push(free_energy(u, &q, &m_fg, &m_bg));
        }
        if it == p.iterations {
            break;
        }
        // Potts: a label pays for the other label's mass nearby.
        q = (0..n).map(|i| sigmoid((u.bg()[i] + m_fg[i]) - (u.fg()[i] + m_bg[i]))).collect();
    }
    (MarginalField { width: u.width(), height: u.height(), fg: q }, energies)
}

pub fn meanfield_infer(u: &UnaryField, img: &RgbImage, p: &CrfParams, mode: InferenceMode) -> Result<MarginalField> {
    check(u, img, p)?;
    Ok(match mode {
        InferenceMode::Exact => {
            exact_size_ok(img)?;
            run(u, ExactKernels::new(img, p), p, false).0
        }
        InferenceMode::Fast => run(u, FastKernels::new(img, p), p, false).0,
    })
}

/// Exact inference that also returns the free energy at the start and
/// after every iteration.
pub fn meanfield_exact_trace(u: &UnaryField, img: &RgbImage, p: &CrfParams) -> Result<(MarginalField, Vec<f64>)> {
    check(u, img, p)?;
    exact_size_ok(img)?;
    Ok(run(u, ExactKernels::new(img, p), p, true))
}

fn exact_size_ok(img: &RgbImage) -> Result<()> {
    if img.width() > EXACT_MAX_SIDE || img.height() > EXACT_MAX_SIDE {
        return Err(Error::ExactTooLarge { width: img.width(), height: img.height(), max: EXACT_MAX_SIDE });
    }
    Ok(())
}
