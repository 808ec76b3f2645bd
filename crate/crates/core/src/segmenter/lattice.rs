//! Permutohedral lattice for approximate high-dimensional Gaussian filtering
//! (Adams, Baek and Davis 2010), in the splat / blur / slice form used by
//! dense CRF inference.
//!
//! Features must already be divided by the kernel standard deviations.

use std::collections::HashMap;

pub struct Lattice {
    d: usize,
    n: usize,
    /// Per point and simplex vertex: lattice index and barycentric weight.
    offsets: Vec<usize>,
    weights: Vec<f64>,
    /// Per direction and lattice point: neighbour indices, `usize::MAX` if absent.
    neighbours: Vec<(usize, usize)>,
    vertices: usize,
}

impl Lattice {
    /// `features` holds `n` points of dimension `d`, row-major.
    pub fn new(features: &[f64], d: usize) -> Self {
        assert!(d > 0 && features.len() % d == 0);
        let n = features.len() / d;
        let d1 = d + 1;
        let scale: Vec<f64> = (0..d).map(|i| d1 as f64 * (2.0f64 / 3.0).sqrt() / (((i + 1) * (i + 2)) as f64).sqrt()).collect();
        let canonical: Vec<i32> = (0..d1)
            .flat_map(|i| (0..d1).map(move |j| if j <= d - i { i as i32 } else { i as i32 - d1 as i32 }))
            .collect();

        let mut table: HashMap<Vec<i32>, usize> = HashMap::new();
        let mut keys: Vec<Vec<i32>> = Vec::new();
        let mut offsets = Vec::with_capacity(n * d1);
        let mut weights = Vec::with_capacity(n * d1);
        let mut elevated = vec![0.0; d1];
        let mut rem0 = vec![0i32; d1];
        let mut rank = vec![0i32; d1];
        let mut bary = vec![0.0; d + 2];
        let down = 1.0 / d1 as f64;

        for p in 0..n {
            let f = &features[p * d..(p + 1) * d];
            let mut sm = 0.0;
            for j in (1..=d).rev() {
                let cf = f[j - 1] * scale[j - 1];
                elevated[j] = sm - j as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            // Nearest remainder-zero lattice point.
            let mut sum = 0i32;
            for i in 0..d1 {
                let v = down * elevated[i];
                let up = v.ceil() * d1 as f64;
                let dn = v.floor() * d1 as f64;
                rem0[i] = if up - elevated[i] < elevated[i] - dn { up as i32 } else { dn as i32 };
                sum += rem0[i];
            }
            let sum = sum / d1 as i32;

            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in i + 1..d1 {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }
            for i in 0..d1 {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += d1 as i32;
                    rem0[i] += d1 as i32;
                } else if rank[i] > d as i32 {
                    rank[i] -= d1 as i32;
                    rem0[i] -= d1 as i32;
                }
            }

            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..d1 {
                let v = (elevated[i] - rem0[i] as f64) * down;
                let r = rank[i] as usize;
                bary[d - r] += v;
                bary[d - r + 1] -= v;
            }
            bary[0] += 1.0 + bary[d1];

            for r in 0..d1 {
                let key: Vec<i32> = (0..d).map(|i| rem0[i] + canonical[r * d1 + rank[i] as usize]).collect();
                let idx = match table.get(&key) {
                    Some(&i) => i,
                    None => {
                        let i = keys.len();
                        table.insert(key.clone(), i);
                        keys.push(key);
                        i
                    }
                };
                offsets.push(idx);
                weights.push(bary[r]);
            }
        }

        let m = keys.len();
        let mut neighbours = Vec::with_capacity(d1 * m);
        let mut n1 = vec![0i32; d];
        let mut n2 = vec![0i32; d];
        for j in 0..d1 {
            for key in &keys {
                for k in 0..d {
                    n1[k] = key[k] - 1;
                    n2[k] = key[k] + 1;
                }
                if j < d {
                    n1[j] += d1 as i32;
                    n2[j] -= d1 as i32;
                }
                let a = table.get(&n1).copied().unwrap_or(usize::MAX);
                let b = table.get(&n2).copied().unwrap_or(usize::MAX);
                neighbours.push((a, b));
            }
        }
        Self { d, n, offsets, weights, neighbours, vertices: m }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// What each point contributes to its own filtered value per unit input:
    /// its splat weights pushed through the blur and sliced back.
    pub fn self_weights(&self) -> Vec<f64> {
        let d1 = self.d + 1;
        let m = self.vertices;
        let alpha = 1.0 / (1.0 + 2f64.powi(-(self.d as i32)));
        let mut cur: HashMap<usize, f64> = HashMap::new();
        let mut next: HashMap<usize, f64> = HashMap::new();
        (0..self.n)
            .map(|p| {
                cur.clear();
                for r in 0..d1 {
                    *cur.entry(self.offsets[p * d1 + r]).or_default() += self.weights[p * d1 + r];
                }
                for j in 0..d1 {
                    next.clear();
                    for (&v, &val) in &cur {
                        *next.entry(v).or_default() += val;
                        let (a, b) = self.neighbours[j * m + v];
                        // Blur is symmetric: v feeds whichever vertices list it
                        // as a neighbour, which are its own neighbours.
                        if a != usize::MAX {
                            *next.entry(a).or_default() += 0.5 * val;
                        }
                        if b != usize::MAX {
                            *next.entry(b).or_default() += 0.5 * val;
                        }
                    }
                    std::mem::swap(&mut cur, &mut next);
                }
                (0..d1)
                    .map(|r| self.weights[p * d1 + r] * cur.get(&self.offsets[p * d1 + r]).copied().unwrap_or(0.0))
                    .sum::<f64>()
                    * alpha
            })
            .collect()
    }

    /// Gaussian-filters `input` (`n` points x `vdim` values, row-major).
    /// The result includes each point's contribution to itself.
    pub fn filter(&self, input: &[f64], vdim: usize) -> Vec<f64> {
        assert_eq!(input.len(), self.n * vdim);
        let d1 = self.d + 1;
        let m = self.vertices;
        let mut values = vec![0.0; m * vdim];
        for p in 0..self.n {
            for r in 0..d1 {
                let o = self.offsets[p * d1 + r];
                let w = self.weights[p * d1 + r];
                for c in 0..vdim {
                    values[o * vdim + c] += w * input[p * vdim + c];
                }
            }
        }
        let mut next = vec![0.0; m * vdim];
        for j in 0..d1 {
            for i in 0..m {
                let (a, b) = self.neighbours[j * m + i];
                for c in 0..vdim {
                    let va = if a == usize::MAX { 0.0 } else { values[a * vdim + c] };
                    let vb = if b == usize::MAX { 0.0 } else { values[b * vdim + c] };
                    next[i * vdim + c] = values[i * vdim + c] + 0.5 * (va + vb);
                }
            }
            std::mem::swap(&mut values, &mut next);
        }
        let alpha = 1.0 / (1.0 + 2f64.powi(-(self.d as i32)));
        let mut out = vec![0.0; self.n * vdim];
        for p in 0..self.n {
            for r in 0..d1 {
                let o = self.offsets[p * d1 + r];
                let w = self.weights[p * d1 + r];
                for c in 0..vdim {
                    out[p * vdim + c] += w * values[o * vdim + c] * alpha;
                }
            }
        }
        out
    }
}
