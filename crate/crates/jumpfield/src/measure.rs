//! Empirical-measure operations: particle clouds, the W2 distance on
//! equal-weight clouds, and the atom-level perturbations used by the
//! measure-derivative estimators.

use crate::error::{Error, Result};
use std::io::{BufRead, Write};

/// Equal-weight empirical measure: `len` atoms in `R^dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    points: Vec<f64>,
    len: usize,
    dim: usize,
}

impl ParticleCloud {
    pub fn new(points: Vec<f64>, len: usize, dim: usize) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::structural("cloud needs len >= 1 and dim >= 1"));
        }
        if points.len() != len * dim {
            return Err(Error::structural(format!(
                "cloud storage {} != len {} * dim {}",
                points.len(),
                len,
                dim
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::structural("cloud contains non-finite coordinate"));
        }
        Ok(Self { points, len, dim })
    }

    /// Point mass at `x`, replicated `len` times.
    pub fn dirac(x: &[f64], len: usize) -> Result<Self> {
        let mut points = Vec::with_capacity(len * x.len());
        for _ in 0..len {
            points.extend_from_slice(x);
        }
        Self::new(points, len, x.len())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: len >= 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for i in 0..self.len {
            for (k, mk) in m.iter_mut().enumerate() {
                *mk += self.points[i * self.dim + k];
            }
        }
        for mk in &mut m {
            *mk /= self.len as f64;
        }
        m
    }

    /// Per-coordinate second raw moment (1/N) sum x_k^2.
    pub fn second_moment(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for i in 0..self.len {
            for (k, mk) in m.iter_mut().enumerate() {
                let v = self.points[i * self.dim + k];
                *mk += v * v;
            }
        }
        for mk in &mut m {
            *mk /= self.len as f64;
        }
        m
    }

    /// Mixture (1-eps) mu + eps delta_y with eps = 1/(N+1), realized by
    /// appending `y` as one more equal-weight atom.
    pub fn bump_add_atom(&self, y: &[f64]) -> Result<Self> {
        if y.len() != self.dim {
            return Err(Error::structural("bump point dimension mismatch"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::structural("bump point is non-finite"));
        }
        let mut points = self.points.clone();
        points.extend_from_slice(y);
        Self::new(points, self.len + 1, self.dim)
    }

    /// Push-forward perturbation of a single atom: points[index] += delta.
    pub fn shift_atom(&self, index: usize, delta: &[f64]) -> Result<Self> {
        if index >= self.len {
            return Err(Error::structural(format!(
                "atom index {} out of range (N = {})",
                index, self.len
            )));
        }
        if delta.len() != self.dim {
            return Err(Error::structural("shift delta dimension mismatch"));
        }
        let mut points = self.points.clone();
        for k in 0..self.dim {
            points[index * self.dim + k] += delta[k];
        }
        Self::new(points, self.len, self.dim)
    }

    /// Push-forward by a constant vector field: every atom += delta.
    pub fn shift_all(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.dim {
            return Err(Error::structural("shift delta dimension mismatch"));
        }
        let mut points = self.points.clone();
        for i in 0..self.len {
            for k in 0..self.dim {
                points[i * self.dim + k] += delta[k];
            }
        }
        Self::new(points, self.len, self.dim)
    }

    /// One row per particle, `dim` comma-separated columns.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        for i in 0..self.len {
            let row: Vec<String> = self.point(i).iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut points = Vec::new();
        let mut dim = 0usize;
        let mut len = 0usize;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| {
                Error::structural(format!("cloud csv line {}: {}", lineno + 1, e))
            })?;
            if dim == 0 {
                dim = row.len();
            } else if row.len() != dim {
                return Err(Error::structural(format!(
                    "cloud csv line {}: {} columns, expected {}",
                    lineno + 1,
                    row.len(),
                    dim
                )));
            }
            points.extend(row);
            len += 1;
        }
        Self::new(points, len, dim)
    }

    /// Bit-level content hash; used as a cache key for solved measure flows.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64; // FNV-1a
        for v in &self.points {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h ^= self.len as u64;
        h
    }
}

/// Empirical law per grid node: one cloud for step 0..=n.
#[derive(Debug, Clone)]
pub struct MeasureFlow {
    pub clouds: Vec<ParticleCloud>,
}

impl MeasureFlow {
    pub fn new(clouds: Vec<ParticleCloud>) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::structural("measure flow needs at least one cloud"));
        }
        let (n, d) = (clouds[0].len(), clouds[0].dim());
        if clouds.iter().any(|c| c.len() != n || c.dim() != d) {
            return Err(Error::structural("measure flow clouds must share N and d"));
        }
        Ok(Self { clouds })
    }

    pub fn at(&self, step: usize) -> &ParticleCloud {
        &self.clouds[step]
    }

    pub fn steps(&self) -> usize {
        self.clouds.len() - 1
    }
}

/// W2 result; `exact` is false when the greedy fallback produced only an
/// upper bound.
#[derive(Debug, Clone, Copy)]
pub struct W2Result {
    pub distance: f64,
    pub exact: bool,
}

/// Largest N for which the exact assignment solver is used in d >= 2.
pub const ASSIGNMENT_EXACT_LIMIT: usize = 512;

/// 2-Wasserstein distance between equal-size, equal-weight clouds.
///
/// d = 1 uses exact sorted matching. d >= 2 uses the exact assignment
/// solver up to [`ASSIGNMENT_EXACT_LIMIT`] atoms and a greedy matching
/// (an upper bound, flagged inexact) beyond that.
pub fn wasserstein2(a: &ParticleCloud, b: &ParticleCloud) -> Result<W2Result> {
    if a.len() != b.len() {
        return Err(Error::structural(
            "wasserstein2 requires equal atom counts (weighted transport not supported)",
        ));
    }
    if a.dim() != b.dim() {
        return Err(Error::structural("wasserstein2 dimension mismatch"));
    }
    let n = a.len();
    if a.dim() == 1 {
        let mut xs: Vec<f64> = a.points().to_vec();
        let mut ys: Vec<f64> = b.points().to_vec();
        xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
        ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let cost: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n as f64;
        return Ok(W2Result {
            distance: cost.sqrt(),
            exact: true,
        });
    }
    if n <= ASSIGNMENT_EXACT_LIMIT {
        let cost = assignment_cost(a, b);
        Ok(W2Result {
            distance: (cost / n as f64).sqrt(),
            exact: true,
        })
    } else {
        let cost = greedy_matching_cost(a, b);
        Ok(W2Result {
            distance: (cost / n as f64).sqrt(),
            exact: false,
        })
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Minimum total squared-distance assignment cost, via the shortest
/// augmenting path method (Jonker-Volgenant), O(n^3).
pub fn assignment_cost(a: &ParticleCloud, b: &ParticleCloud) -> f64 {
    let n = a.len();
    let cost = |i: usize, j: usize| sq_dist(a.point(i), b.point(j));

    // potentials and matching; way[j] records the augmenting path
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![n; n + 1]; // p[j] = row matched to column j (n = free)
    let mut way = vec![0usize; n + 1];

    for i in 0..n {
        p[n] = i;
        let mut j0 = n;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == n {
                break;
            }
        }
        // augment along the path
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 0..n {
        total += cost(p[j], j);
    }
    total
}

/// Greedy row-by-row matching; upper bound on the optimal cost.
fn greedy_matching_cost(a: &ParticleCloud, b: &ParticleCloud) -> f64 {
    let n = a.len();
    let mut taken = vec![false; n];
    let mut total = 0.0;
    for i in 0..n {
        let mut best = f64::INFINITY;
        let mut bj = 0;
        for (j, t) in taken.iter().enumerate() {
            if !*t {
                let c = sq_dist(a.point(i), b.point(j));
                if c < best {
                    best = c;
                    bj = j;
                }
            }
        }
        taken[bj] = true;
        total += best;
    }
    total
}
