//! Boundary shape descriptors.
//!
//! A SIFT descriptor computed on a binary object mask only sees the object
//! outline. Thresholding it at `beta` times its largest bin keeps the dominant
//! boundary directions per cell. Empty cells lie wholly inside or outside
//! the object, and the activated bins of neighbouring boundary cells tell
//! which: a gradient on a mask points into the foreground.
//!
//! Grid conventions (image coordinates, y down):
//! - cell `i` sits at `(row, col)`, `i = row * 4 + col`;
//! - neighbour `j` of a cell lies in direction `45 j` degrees, `j = 0` to the
//!   right and `j` increasing clockwise on screen;
//! - orientation bin `b` is centred on `45 b` degrees with the same
//!   convention, so bin `(j + 4) % 8` of neighbour `j` points back toward the
//!   cell.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::features::{
    bin_index, Keypoint, SiftDescriptor, SiftExtractor, DESCRIPTOR_LEN, GRID, ORIENTATIONS,
};
use crate::imagecore::BinaryMask;

pub const CELLS: usize = GRID * GRID;

pub const DEFAULT_BETA: f64 = 0.4;

/// `(dcol, drow)` of neighbour `j`.
pub const NEIGHBOR_OFFSETS: [(i32, i32); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeDescriptor {
    #[serde(with = "bits")]
    bins: [u8; DESCRIPTOR_LEN],
    beta: f64,
}

mod bits {
    use super::DESCRIPTOR_LEN;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bins: &[u8; DESCRIPTOR_LEN], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(bins.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; DESCRIPTOR_LEN], D::Error> {
        let v = Vec::<u8>::deserialize(d)?;
        if v.iter().any(|&b| b > 1) {
            return Err(D::Error::custom("shape descriptor bins must be 0 or 1"));
        }
        v.try_into()
            .map_err(|v: Vec<u8>| D::Error::custom(format!("expected {DESCRIPTOR_LEN} bins, got {}", v.len())))
    }
}

impl std::fmt::Debug for ShapeDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s: String = self.bins.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
        f.debug_struct("ShapeDescriptor").field("bins", &s).field("beta", &self.beta).finish()
    }
}

impl ShapeDescriptor {
    pub fn from_bits(bins: [u8; DESCRIPTOR_LEN], beta: f64) -> Result<Self> {
        if bins.iter().any(|&b| b > 1) {
            return Err(invalid("shape descriptor bins must be 0 or 1"));
        }
        Ok(Self { bins, beta })
    }

    pub fn empty(beta: f64) -> Self {
        Self { bins: [0; DESCRIPTOR_LEN], beta }
    }

    pub fn bins(&self) -> &[u8; DESCRIPTOR_LEN] {
        &self.bins
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn bit(&self, row: usize, col: usize, orientation: usize) -> u8 {
        self.bins[bin_index(row, col, orientation)]
    }

    pub fn set(&mut self, row: usize, col: usize, orientation: usize, on: bool) {
        self.bins[bin_index(row, col, orientation)] = on as u8;
    }

    pub fn cell(&self, cell: usize) -> &[u8] {
        &self.bins[cell * ORIENTATIONS..(cell + 1) * ORIENTATIONS]
    }

    pub fn is_cell_empty(&self, cell: usize) -> bool {
        self.cell(cell).iter().all(|&b| b == 0)
    }

    pub fn is_empty(&self) -> bool {
        self.bins.iter().all(|&b| b == 0)
    }

    pub fn activated(&self) -> usize {
        self.bins.iter().map(|&b| b as usize).sum()
    }
}

/// Signed foreground (+) / background (-) strength per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct StrengthGrid([f64; CELLS]);

impl StrengthGrid {
    pub fn zeros() -> Self {
        Self([0.0; CELLS])
    }

    pub fn from_values(values: [f64; CELLS]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("strengths must be finite"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64; CELLS] {
        &self.0
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[row * GRID + col]
    }

    /// `self += other * weight`.
    pub fn add_scaled(&mut self, other: &StrengthGrid, weight: f64) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a += b * weight;
        }
    }
}

impl TryFrom<Vec<f64>> for StrengthGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        let arr: [f64; CELLS] = v
            .try_into()
            .map_err(|v: Vec<f64>| Error::Malformed(format!("expected {CELLS} strengths, got {}", v.len())))?;
        Self::from_values(arr)
    }
}

impl From<StrengthGrid> for Vec<f64> {
    fn from(g: StrengthGrid) -> Self {
        g.0.to_vec()
    }
}

/// Bin `i` is set iff `d(i) > beta * max d`; ties at the threshold stay 0.
pub fn quantize(d: &SiftDescriptor, beta: f64) -> Result<ShapeDescriptor> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(invalid(format!("beta must lie in (0, 1), got {beta}")));
    }
    let max = d.bins().iter().fold(0.0f64, |m, &v| m.max(v));
    let m = beta * max;
    let mut bins = [0u8; DESCRIPTOR_LEN];
    if max > 0.0 {
        for (b, &v) in bins.iter_mut().zip(d.bins().iter()) {
            *b = (v > m) as u8;
        }
    }
    Ok(ShapeDescriptor { bins, beta })
}

fn neighbor(cell: usize, j: usize) -> Option<usize> {
    let (row, col) = ((cell / GRID) as i32, (cell % GRID) as i32);
    let (dc, dr) = NEIGHBOR_OFFSETS[j];
    let (r, c) = (row + dr, col + dc);
    let inside = (0..GRID as i32).contains(&r) && (0..GRID as i32).contains(&c);
    inside.then(|| (r * GRID as i32 + c) as usize)
}

/// Strengths plus the number of propagation passes needed to fill the grid.
pub fn cell_strengths_with_passes(sd: &ShapeDescriptor) -> (StrengthGrid, usize) {
    if sd.is_empty() {
        return (StrengthGrid::zeros(), 0);
    }
    let empty: Vec<bool> = (0..CELLS).map(|c| sd.is_cell_empty(c)).collect();
    let mut value = [0.0; CELLS];
    let mut assigned = [false; CELLS];

    for cell in 0..CELLS {
        if !empty[cell] {
            assigned[cell] = true;
            continue;
        }
        let mut evidence = false;
        let mut sum = 0.0;
        for j in 0..ORIENTATIONS {
            let Some(n) = neighbor(cell, j) else { continue };
            if empty[n] {
                continue;
            }
            evidence = true;
            let toward = sd.cell(n)[(j + 4) % ORIENTATIONS] as f64;
            let away = sd.cell(n)[j] as f64;
            sum += toward - away;
        }
        if evidence {
            value[cell] = sum;
            assigned[cell] = true;
        }
    }

    // Cells surrounded only by empty cells take max + min of their assigned
    // neighbours, one ring per pass (Jacobi order: each pass reads the
    // previous pass's assignments only).
    let mut passes = 0;
    while assigned.iter().any(|a| !a) {
        passes += 1;
        let snapshot = assigned;
        let mut progressed = false;
        for cell in 0..CELLS {
            if snapshot[cell] {
                continue;
            }
            let vals: Vec<f64> = (0..ORIENTATIONS)
                .filter_map(|j| neighbor(cell, j))
                .filter(|&n| snapshot[n])
                .map(|n| value[n])
                .collect();
            if vals.is_empty() {
                continue;
            }
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            value[cell] = max + min;
            assigned[cell] = true;
            progressed = true;
        }
        // Unreachable for a non-empty descriptor: the 8-connected 4x4 grid
        // is connected, so every pass assigns at least one cell.
        assert!(progressed, "strength propagation stalled");
    }
    (StrengthGrid(value), passes)
}

pub fn cell_strengths(sd: &ShapeDescriptor) -> StrengthGrid {
    cell_strengths_with_passes(sd).0
}

/// SIFT of the mask at `kp`, quantized.
pub fn extract_shape_descriptor(
    mask: &BinaryMask,
    kp: &Keypoint,
    beta: f64,
    patch_factor: f64,
) -> Result<ShapeDescriptor> {
    let ex = SiftExtractor::new(&mask.to_gray(), patch_factor);
    quantize(&ex.describe(kp)?, beta)
}

const GLYPHS: [char; 8] = ['>', '\\', 'v', '/', '<', '\\', '^', '/'];

/// Text rendering of a descriptor and its strengths.
///
/// Each cell is a 3x3 block: activated bin `b` puts a glyph in the border
/// position of direction `b`, the centre shows `o` for boundary cells and
/// `+`, `-` or `.` for the sign of an empty cell's strength. The strengths
/// follow as a 4x4 table.
pub fn render_ascii(sd: &ShapeDescriptor, strengths: &StrengthGrid) -> String {
    let mut out = String::new();
    let border = "+---".repeat(GRID) + "+\n";
    for row in 0..GRID {
        out.push_str(&border);
        for line in 0..3i32 {
            for col in 0..GRID {
                out.push('|');
                for colpos in 0..3i32 {
                    let (dc, dr) = (colpos - 1, line - 1);
                    let ch = if dc == 0 && dr == 0 {
                        let cell = row * GRID + col;
                        if !sd.is_cell_empty(cell) {
                            'o'
                        } else {
                            match strengths.get(row, col) {
                                v if v > 0.0 => '+',
                                v if v < 0.0 => '-',
                                _ => '.',
                            }
                        }
                    } else {
                        let b = NEIGHBOR_OFFSETS.iter().position(|&o| o == (dc, dr)).unwrap();
                        if sd.bit(row, col, b) == 1 {
                            GLYPHS[b]
                        } else {
                            ' '
                        }
                    };
                    out.push(ch);
                }
            }
            out.push_str("|\n");
        }
    }
    out.push_str(&border);
    for row in 0..GRID {
        let cells: Vec<String> = (0..GRID).map(|c| format!("{:+6.2}", strengths.get(row, c))).collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
    out
}
