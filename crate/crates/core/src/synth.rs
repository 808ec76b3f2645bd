//! Synthetic datasets: one rigid object at fixed size on clutter.
//!
//! The object has a fixed colour scheme and internal pattern, so every
//! instance looks the same up to integer placement and pixel noise. Each
//! image draws from its own ChaCha stream, so item `i` does not depend on
//! how many items are generated.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imagecore::{BinaryMask, Rect, RgbImage};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthShape {
    NotchedDisk,
    RoundedSquare,
}

impl SynthShape {
    pub fn name(self) -> &'static str {
        match self {
            SynthShape::NotchedDisk => "notched-disk",
            SynthShape::RoundedSquare => "rounded-square",
        }
    }
}

impl std::str::FromStr for SynthShape {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "notched-disk" => Ok(SynthShape::NotchedDisk),
            "rounded-square" => Ok(SynthShape::RoundedSquare),
            _ => Err(invalid(format!("unknown shape {s:?} (notched-disk, rounded-square)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub shape: SynthShape,
    /// Object half-size in pixels.
    pub radius: usize,
    /// Clutter rectangles and disks per image.
    pub clutter: usize,
    /// Std. dev. of additive per-channel noise, 0-255 units.
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { width: 160, height: 160, shape: SynthShape::NotchedDisk, radius: 28, clutter: 40, noise: 4.0 }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let margin = 2 * (self.radius + MARGIN);
        if self.radius < 8 || self.width <= margin || self.height <= margin {
            return Err(invalid(format!(
                "a {}x{} canvas cannot hold an object of radius {}",
                self.width, self.height, self.radius
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(invalid("noise must be finite and >= 0"));
        }
        Ok(())
    }
}

const MARGIN: usize = 6;
const BODY: [u8; 3] = [232, 148, 36];
const PATCH: [u8; 3] = [110, 36, 24];
const SPOT: [u8; 3] = [250, 240, 215];
const PALETTE: [[u8; 3]; 6] = [
    [40, 70, 160],
    [52, 140, 72],
    [128, 128, 132],
    [70, 72, 84],
    [120, 160, 210],
    [30, 82, 44],
];

#[derive(Debug, Clone)]
pub struct SynthItem {
    pub id: String,
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub cx: i64,
    pub cy: i64,
}

/// Object membership relative to its centre.
fn inside(shape: SynthShape, r: f64, dx: f64, dy: f64) -> bool {
    match shape {
        SynthShape::NotchedDisk => {
            let disk = dx * dx + dy * dy <= r * r;
            let notch = dx > 0.35 * r && dy.abs() < 0.3 * r;
            disk && !notch
        }
        SynthShape::RoundedSquare => {
            let c = 0.35 * r;
            let (ax, ay) = (dx.abs(), dy.abs());
            if ax > r || ay > r {
                return false;
            }
            let (ex, ey) = ((ax - (r - c)).max(0.0), (ay - (r - c)).max(0.0));
            ex * ex + ey * ey <= c * c
        }
    }
}

/// Fixed internal pattern: a dark square and a light spot.
fn object_colour(r: f64, dx: f64, dy: f64) -> [u8; 3] {
    let (px, py) = (dx + 0.3 * r, dy + 0.3 * r);
    if px.abs() <= 0.3 * r && py.abs() <= 0.3 * r {
        return PATCH;
    }
    let (sx, sy) = (dx - 0.1 * r, dy - 0.4 * r);
    if sx * sx + sy * sy <= (0.2 * r) * (0.2 * r) {
        return SPOT;
    }
    BODY
}

pub fn item_id(index: usize) -> String {
    format!("img_{index:03}")
}

/// Item `index` of the dataset with the given seed.
pub fn generate(params: &SynthParams, seed: u64, index: usize) -> Result<SynthItem> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (w, h) = (params.width, params.height);
    let r = params.radius as f64;

    let mut bg = vec![[0u8; 3]; w * h];
    let base = PALETTE[rng.random_range(0..PALETTE.len())];
    bg.iter_mut().for_each(|p| *p = base);
    for _ in 0..params.clutter {
        let colour = PALETTE[rng.random_range(0..PALETTE.len())];
        let (x0, y0) = (rng.random_range(0..w) as i64, rng.random_range(0..h) as i64);
        let (a, b) = (rng.random_range(3..20) as i64, rng.random_range(3..20) as i64);
        let disk = rng.random_bool(0.4);
        for y in (y0 - b).max(0)..(y0 + b).min(h as i64) {
            for x in (x0 - a).max(0)..(x0 + a).min(w as i64) {
                let (u, v) = ((x - x0) as f64 / a as f64, (y - y0) as f64 / b as f64);
                if !disk || u * u + v * v <= 1.0 {
                    bg[y as usize * w + x as usize] = colour;
                }
            }
        }
    }

    let reach = params.radius + MARGIN;
    let cx = rng.random_range(reach..w - reach) as i64;
    let cy = rng.random_range(reach..h - reach) as i64;
    let noise = Normal::new(0.0, params.noise.max(1e-12)).map_err(|e| invalid(e.to_string()))?;
    let mut mask = BinaryMask::empty(w, h);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = ((x as i64 - cx) as f64, (y as i64 - cy) as f64);
            let px = if inside(params.shape, r, dx, dy) {
                mask.set(x, y, true);
                object_colour(r, dx, dy)
            } else {
                bg[y * w + x]
            };
            for c in px {
                let n = if params.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((c as f64 + n).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(SynthItem { id: item_id(index), image: RgbImage::new(w, h, data)?, mask, cx, cy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub cx: i64,
    pub cy: i64,
    pub bbox: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub class_name: String,
    pub seed: u64,
    pub params: SynthParams,
    pub items: Vec<ManifestEntry>,
}

/// Writes `images/`, `masks/` and `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, params: &SynthParams, n: usize, seed: u64) -> Result<Manifest> {
    if n == 0 {
        return Err(invalid("need at least one image"));
    }
    params.validate()?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let items = crate::par::map_range(n, |i| -> Result<ManifestEntry> {
        let it = generate(params, seed, i)?;
        let name = format!("{}.png", it.id);
        it.image.save_png(&dir.join("images").join(&name))?;
        it.mask.save_png(&dir.join("masks").join(&name))?;
        let bbox = it.mask.bbox().ok_or(crate::error::Error::EmptyInput("generated mask"))?;
        Ok(ManifestEntry {
            id: it.id,
            image: format!("images/{name}"),
            mask: format!("masks/{name}"),
            cx: it.cx,
            cy: it.cy,
            bbox,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        class_name: params.shape.name().to_string(),
        seed,
        params: params.clone(),
        items,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Straight-edge and corner masks of size `side x side` whose boundary
/// passes through the centre pixel corner `(side / 2, side / 2)`: four
/// axis-aligned edges, two diagonals and two right-angle corners with the
/// vertex at the centre.
pub fn boundary_masks(side: usize) -> Vec<(&'static str, BinaryMask)> {
    let c = (side / 2) as i64;
    let shapes: [(&'static str, fn(i64, i64) -> bool); 8] = [
        ("edge-right", |x, _| x >= 0),
        ("edge-left", |x, _| x < 0),
        ("edge-below", |_, y| y >= 0),
        ("edge-above", |_, y| y < 0),
        ("diagonal-up-right", |x, y| x > y),
        ("diagonal-down-right", |x, y| x + y > 0),
        ("corner-down-right", |x, y| x >= 0 && y >= 0),
        ("corner-up-left", |x, y| x < 0 && y < 0),
    ];
    shapes
        .iter()
        .map(|&(name, f)| (name, BinaryMask::from_fn(side, side, |x, y| f(x as i64 - c, y as i64 - c))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_object_size_constant() {
        let p = SynthParams::default();
        let a = generate(&p, 7, 3).unwrap();
        let b = generate(&p, 7, 3).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        let c = generate(&p, 7, 4).unwrap();
        let (ba, bc) = (a.mask.bbox().unwrap(), c.mask.bbox().unwrap());
        assert_eq!((ba.w, ba.h), (bc.w, bc.h));
        assert_eq!(a.mask.count(), c.mask.count());
    }

    #[test]
    fn shapes_are_non_empty() {
        for shape in [SynthShape::NotchedDisk, SynthShape::RoundedSquare] {
            let p = SynthParams { shape, ..Default::default() };
            assert!(generate(&p, 1, 0).unwrap().mask.count() > 1000);
            assert_eq!(shape.name().parse::<SynthShape>().unwrap(), shape);
        }
    }

    #[test]
    fn rejects_tiny_canvas() {
        let p = SynthParams { width: 40, ..Default::default() };
        assert!(generate(&p, 1, 0).is_err());
    }
}
