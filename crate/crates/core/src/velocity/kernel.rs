//! Nadaraya-Watson estimate of `E[X1 - X0 | X_t = x]` from particle pairs.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_batch, TimeDomain, VelocityField};
use crate::coupling::ParticleCoupling;
use crate::error::{Error, Result};
use crate::rng;

/// Default kernel cutoff radius, in bandwidth units.
pub const DEFAULT_CUTOFF: f64 = 4.0;

/// Below this log-weight `exp` underflows and the query has no support.
const LOG_WEIGHT_FLOOR: f64 = -745.0;

/// Cells per query side are bounded so degenerate layouts cannot blow up memory.
const MAX_CELLS_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Per-coordinate standard deviation of the anchors `x_t`, times
    /// `n^(-1/(d+4))`, times `multiplier`; recomputed at every `t`.
    Scott { multiplier: f64 },
    /// The same `h` for every coordinate and time.
    Fixed(f64),
    PerCoordinate(Vec<f64>),
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Scott { multiplier: 1.0 }
    }
}

/// Gaussian-kernel regression of the displacements `x1 - x0` on the
/// interpolated anchors `x_t = (1-t) x0 + t x1`.
///
/// With a cutoff `R` only anchors within `R` bandwidths of the query are
/// summed; they are found through a uniform grid built once per evaluation
/// time. Queries with no anchor inside the cutoff fall back to the full sum
/// in log space. A query whose best log-weight is below the `exp` underflow
/// threshold is out of support: it gets the zero vector and is counted in
/// [`out_of_support_count`](Self::out_of_support_count).
#[derive(Debug)]
pub struct KernelVelocity {
    n: usize,
    d: usize,
    x0: Vec<f64>,
    disp: Vec<f64>,
    bandwidth: Bandwidth,
    cutoff: Option<f64>,
    // Brownian-bridge noise level and the fixed per-pair normals
    bridge: Option<(f64, Vec<f64>)>,
    out_of_support: AtomicUsize,
}

impl Clone for KernelVelocity {
    fn clone(&self) -> Self {
        KernelVelocity {
            n: self.n,
            d: self.d,
            x0: self.x0.clone(),
            disp: self.disp.clone(),
            bandwidth: self.bandwidth.clone(),
            cutoff: self.cutoff,
            bridge: self.bridge.clone(),
            out_of_support: AtomicUsize::new(self.out_of_support.load(Ordering::Relaxed)),
        }
    }
}

impl KernelVelocity {
    pub fn new(coupling: &ParticleCoupling, bandwidth: Bandwidth) -> Result<Self> {
        if coupling.is_empty() {
            return Err(Error::InvalidArgument("kernel field needs at least one pair".into()));
        }
        let d = coupling.dim();
        match &bandwidth {
            Bandwidth::Scott { multiplier: h } | Bandwidth::Fixed(h) => {
                if !(*h > 0.0) || !h.is_finite() {
                    return Err(Error::InvalidArgument(format!("bandwidth {h} must be > 0")));
                }
            }
            Bandwidth::PerCoordinate(h) => {
                if h.len() != d || h.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
                    return Err(Error::InvalidArgument(
                        "per-coordinate bandwidth must be positive with one entry per dimension"
                            .into(),
                    ));
                }
            }
        }
        Ok(KernelVelocity {
            n: coupling.len(),
            d,
            x0: coupling.x0().as_slice().to_vec(),
            disp: coupling.displacements().into_vec(),
            bandwidth,
            cutoff: Some(DEFAULT_CUTOFF),
            bridge: None,
            out_of_support: AtomicUsize::new(0),
        })
    }

    /// Regress the bridge drift `(x1 - y_t) / (1 - t)` on the noisy anchors
    /// `y_t = x_t + sqrt(eps t (1-t)) xi`, with one fixed normal `xi` per pair.
    pub fn with_bridge_noise(mut self, eps: f64, seed: u64) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::InvalidArgument(format!("noise level {eps} must be >= 0")));
        }
        self.bridge = (eps > 0.0).then(|| (eps, rng::standard_normals(self.n, self.d, seed)));
        Ok(self)
    }

    /// `None` sums over all anchors for every query.
    pub fn with_cutoff(mut self, cutoff: Option<f64>) -> Result<Self> {
        if let Some(r) = cutoff {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidArgument(format!("cutoff {r} must be > 0")));
            }
        }
        self.cutoff = cutoff;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Number of queries answered with the zero vector so far.
    pub fn out_of_support_count(&self) -> usize {
        self.out_of_support.load(Ordering::Relaxed)
    }

    fn anchors(&self, t: f64) -> Vec<f64> {
        let mut a: Vec<f64> = self
            .x0
            .iter()
            .zip(&self.disp)
            .map(|(a, v)| a + t * v)
            .collect();
        if let Some((eps, xi)) = &self.bridge {
            let s = (eps * t * (1.0 - t)).sqrt();
            a.iter_mut().zip(xi).for_each(|(a, x)| *a += s * x);
        }
        a
    }

    fn targets(&self, t: f64) -> std::borrow::Cow<'_, [f64]> {
        match &self.bridge {
            None => std::borrow::Cow::Borrowed(&self.disp),
            Some((eps, xi)) => {
                let s = (eps * t / (1.0 - t)).sqrt();
                std::borrow::Cow::Owned(self.disp.iter().zip(xi).map(|(v, x)| v - s * x).collect())
            }
        }
    }

    /// Bandwidth vector used at time `t`.
    pub fn bandwidth_at(&self, t: f64) -> Vec<f64> {
        self.bandwidth_for(&self.anchors(t))
    }

    fn bandwidth_for(&self, anchors: &[f64]) -> Vec<f64> {
        let d = self.d;
        match &self.bandwidth {
            Bandwidth::Fixed(h) => vec![*h; d],
            Bandwidth::PerCoordinate(h) => h.clone(),
            Bandwidth::Scott { multiplier } => {
                let n = self.n as f64;
                let mut mean = vec![0.0; d];
                for r in anchors.chunks_exact(d) {
                    for k in 0..d {
                        mean[k] += r[k];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0; d];
                for r in anchors.chunks_exact(d) {
                    for k in 0..d {
                        var[k] += (r[k] - mean[k]) * (r[k] - mean[k]);
                    }
                }
                let rate = n.powf(-1.0 / (d as f64 + 4.0)) * multiplier;
                let sd: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
                let floor = 1e-12 * sd.iter().cloned().fold(1.0, f64::max);
                sd.iter().map(|s| s.max(floor) * rate).collect()
            }
        }
    }

    /// Estimate at one point, with the out-of-support flag.
    pub fn eval_with_flag(&self, t: f64, x: &[f64]) -> Result<(Vec<f64>, bool)> {
        if x.len() != self.d {
            return Err(Error::InvalidArgument("query dimension mismatch".into()));
        }
        self.time_domain().check(t)?;
        let index = self.index(t);
        let mut out = vec![0.0; self.d];
        let ok = index.query(x, &mut out);
        if !ok {
            self.out_of_support.fetch_add(1, Ordering::Relaxed);
        }
        Ok((out, !ok))
    }

    fn index(&self, t: f64) -> Index {
        let anchors = self.anchors(t);
        let h = self.bandwidth_for(&anchors);
        Index::build(self.d, &anchors, &self.targets(t), &h, self.cutoff)
    }
}

impl VelocityField for KernelVelocity {
    fn dim(&self) -> usize {
        self.d
    }

    fn time_domain(&self) -> TimeDomain {
        match self.bridge {
            Some(_) => TimeDomain::with_singular(vec![1.0]),
            None => TimeDomain::full(),
        }
    }

    fn out_of_support_events(&self) -> usize {
        self.out_of_support_count()
    }

    fn eval_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) -> Result<()> {
        check_batch(self.d, xs, out)?;
        self.time_domain().check(t)?;
        let index = self.index(t);
        let missed: usize = out
            .par_chunks_mut(self.d)
            .zip(xs.par_chunks(self.d))
            .map(|(o, x)| usize::from(!index.query(x, o)))
            .sum();
        if missed > 0 {
            self.out_of_support.fetch_add(missed, Ordering::Relaxed);
        }
        Ok(())
    }
}

/// Anchors in bandwidth-scaled coordinates, bucketed on a grid over the first
/// (at most three) coordinates.
struct Index {
    d: usize,
    n: usize,
    inv_h: Vec<f64>,
    // coordinate-major (d blocks of n) scaled anchors and targets, in cell order
    pos: Vec<f64>,
    disp: Vec<f64>,
    grid: Option<Grid>,
}

struct Grid {
    r2: f64,
    dims: usize,
    origin: [f64; 3],
    width: f64,
    counts: [usize; 3],
    reach: i64,
    starts: Vec<usize>,
}

impl Grid {
    fn cell_coord(&self, k: usize, u: f64) -> i64 {
        ((u - self.origin[k]) / self.width).floor() as i64
    }
}

/// Anchors processed per vectorised block.
const BLOCK: usize = 64;

/// `exp(x)` for `x <= 0`, to within a few ulps; inputs below -708 are clamped.
/// Branch-free so that blocks of calls vectorise.
#[inline(always)]
fn exp_neg(x: f64) -> f64 {
    const MAGIC: f64 = 6755399441055744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.max(-708.0);
    let t = x * std::f64::consts::LOG2_E + MAGIC;
    let k = t - MAGIC;
    let r = x - k * LN2_HI - k * LN2_LO;
    // Taylor polynomial, |r| <= ln2 / 2
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // low mantissa bits of t hold k; 2^51 vanishes modulo 2^12
    let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    p * scale
}

#[inline(always)]
fn lane_sum(w: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut chunks = w.chunks_exact(4);
    for c in &mut chunks {
        for l in 0..4 {
            acc[l] += c[l];
        }
    }
    let tail: f64 = chunks.remainder().iter().sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline(always)]
fn lane_dot(w: &[f64], v: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut cw = w.chunks_exact(4);
    let mut cv = v.chunks_exact(4);
    for (a, b) in (&mut cw).zip(&mut cv) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    let tail: f64 = cw.remainder().iter().zip(cv.remainder()).map(|(a, b)| a * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Index {
    fn build(d: usize, anchors: &[f64], disp: &[f64], h: &[f64], cutoff: Option<f64>) -> Index {
        let n = anchors.len() / d;
        let inv_h: Vec<f64> = h.iter().map(|h| 1.0 / h).collect();
        let scaled = |i: usize, k: usize| anchors[i * d + k] * inv_h[k];
        let Some(r) = cutoff else {
            let mut pos = vec![0.0; n * d];
            let mut dsp = vec![0.0; n * d];
            for i in 0..n {
                for k in 0..d {
                    pos[k * n + i] = scaled(i, k);
                    dsp[k * n + i] = disp[i * d + k];
                }
            }
            return Index {
                d,
                n,
                inv_h,
                pos,
                disp: dsp,
                grid: None,
            };
        };
        let dims = d.min(3);
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for i in 0..n {
            for k in 0..dims {
                let u = scaled(i, k);
                lo[k] = lo[k].min(u);
                hi[k] = hi[k].max(u);
            }
        }
        let max_cells = (MAX_CELLS_FACTOR * n).max(64);
        let mut width = r / 2.0;
        let mut counts = [1usize; 3];
        loop {
            let mut total = 1usize;
            for k in 0..dims {
                counts[k] = ((hi[k] - lo[k]) / width).floor() as usize + 1;
                total = total.saturating_mul(counts[k]);
            }
            if total <= max_cells {
                break;
            }
            width *= 2.0;
        }
        let mut grid = Grid {
            r2: r * r,
            dims,
            origin: lo,
            width,
            counts,
            reach: (r / width).ceil() as i64,
            starts: Vec::new(),
        };
        let ncells: usize = counts[..dims].iter().product();
        let cells: Vec<usize> = (0..n)
            .map(|i| {
                let mut c = 0usize;
                for k in 0..dims {
                    let ck = (grid.cell_coord(k, scaled(i, k)).max(0) as usize).min(counts[k] - 1);
                    c = c * counts[k] + ck;
                }
                c
            })
            .collect();
        let mut starts = vec![0usize; ncells + 1];
        for &c in &cells {
            starts[c + 1] += 1;
        }
        for c in 0..ncells {
            starts[c + 1] += starts[c];
        }
        let mut next = starts.clone();
        let mut pos = vec![0.0; n * d];
        let mut dsp = vec![0.0; n * d];
        for (i, &c) in cells.iter().enumerate() {
            let j = next[c];
            next[c] += 1;
            for k in 0..d {
                pos[k * n + j] = scaled(i, k);
                dsp[k * n + j] = disp[i * d + k];
            }
        }
        grid.starts = starts;
        Index {
            d,
            n,
            inv_h,
            pos,
            disp: dsp,
            grid: Some(grid),
        }
    }

    /// Writes the estimate into `out`; returns false when out of support.
    fn query(&self, x: &[f64], out: &mut [f64]) -> bool {
        let d = self.d;
        let mut q = [0.0; 16];
        let mut qv;
        let q: &mut [f64] = if d <= 16 {
            &mut q[..d]
        } else {
            qv = vec![0.0; d];
            &mut qv
        };
        for k in 0..d {
            q[k] = x[k] * self.inv_h[k];
        }
        if let Some(g) = &self.grid {
            if self.query_grid(g, q, out) {
                return true;
            }
        }
        self.query_full(q, out)
    }

    /// Adds the truncated kernel sums over anchors `range` to `sw` and `out`.
    #[inline]
    fn accumulate(
        &self,
        q: &[f64],
        range: std::ops::Range<usize>,
        r2max: f64,
        sw: &mut f64,
        out: &mut [f64],
    ) {
        let (n, d) = (self.n, self.d);
        let mut r2 = [0.0; BLOCK];
        let mut w = [0.0; BLOCK];
        let mut start = range.start;
        while start < range.end {
            let end = (start + BLOCK).min(range.end);
            let len = end - start;
            let r2 = &mut r2[..len];
            let w = &mut w[..len];
            r2.fill(0.0);
            for k in 0..d {
                let qk = q[k];
                for (r, p) in r2.iter_mut().zip(&self.pos[k * n + start..k * n + end]) {
                    let t = qk - p;
                    *r += t * t;
                }
            }
            for (w, &r) in w.iter_mut().zip(r2.iter()) {
                let keep = if r <= r2max { 1.0 } else { 0.0 };
                *w = exp_neg(-0.5 * r) * keep;
            }
            *sw += lane_sum(w);
            for k in 0..d {
                out[k] += lane_dot(w, &self.disp[k * n + start..k * n + end]);
            }
            start = end;
        }
    }

    fn query_grid(&self, g: &Grid, q: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        let mut sw = 0.0;
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for k in 0..g.dims {
            let c = g.cell_coord(k, q[k]);
            lo[k] = (c - g.reach).max(0);
            hi[k] = (c + g.reach).min(g.counts[k] as i64 - 1);
            if lo[k] > hi[k] {
                return false;
            }
        }
        let last = g.dims - 1;
        // walk all cell rows; cells along the last grid coordinate are contiguous
        let mut idx = lo;
        loop {
            let mut base = 0usize;
            for k in 0..last {
                base = base * g.counts[k] + idx[k] as usize;
            }
            let first = base * g.counts[last] + lo[last] as usize;
            let end = base * g.counts[last] + hi[last] as usize;
            self.accumulate(q, g.starts[first]..g.starts[end + 1], g.r2, &mut sw, out);
            let mut k = last;
            loop {
                if k == 0 {
                    if sw > 0.0 {
                        out.iter_mut().for_each(|o| *o /= sw);
                        return true;
                    }
                    return false;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] <= hi[k] {
                    break;
                }
                idx[k] = lo[k];
            }
        }
    }

    fn query_full(&self, q: &[f64], out: &mut [f64]) -> bool {
        let (n, d) = (self.n, self.d);
        let log_w = |j: usize| -> f64 {
            let mut r2 = 0.0;
            for k in 0..d {
                let t = q[k] - self.pos[k * n + j];
                r2 += t * t;
            }
            -0.5 * r2
        };
        let max = (0..n).map(log_w).fold(f64::NEG_INFINITY, f64::max);
        out.fill(0.0);
        if !(max >= LOG_WEIGHT_FLOOR) {
            return false;
        }
        let mut sw = 0.0;
        for j in 0..n {
            let w = (log_w(j) - max).exp();
            sw += w;
            for k in 0..d {
                out[k] += w * self.disp[k * n + j];
            }
        }
        out.iter_mut().for_each(|o| *o /= sw);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::GaussianJointCoupling;
    use crate::distributions::ParticleSet;
    use crate::linalg::{Matrix, Vector};
    use crate::velocity::GaussianVelocity;

    fn pairs(x0: &[[f64; 2]], x1: &[[f64; 2]]) -> ParticleCoupling {
        ParticleCoupling::new(
            ParticleSet::from_rows(x0).unwrap(),
            ParticleSet::from_rows(x1).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn fast_exp_is_accurate() {
        let mut x = 0.0;
        while x > -720.0 {
            let (a, b) = (exp_neg(x), x.max(-708.0).exp());
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b, "{x}: {a} vs {b}");
            x -= 0.0137;
        }
    }

    #[test]
    fn single_pair_is_constant() {
        let c = pairs(&[[0.0, 1.0]], &[[2.0, -1.0]]);
        let k = KernelVelocity::new(&c, Bandwidth::Fixed(0.5)).unwrap();
        for (t, x) in [(0.0, [0.0, 0.0]), (0.7, [3.0, 2.0]), (1.0, [-5.0, 4.0])] {
            assert_eq!(k.eval(t, &x).unwrap(), vec![2.0, -2.0]);
        }
        // far beyond exp underflow: zero and flagged
        let (v, flag) = k.eval_with_flag(0.5, &[1e3, 0.0]).unwrap();
        assert!(flag);
        assert_eq!(v, vec![0.0, 0.0]);
        assert_eq!(k.out_of_support_count(), 1);
    }

    #[test]
    fn equidistant_query_averages() {
        let c = pairs(&[[-1.0, 0.0], [1.0, 0.0]], &[[-1.0, 2.0], [1.0, 4.0]]);
        for cutoff in [None, Some(DEFAULT_CUTOFF)] {
            let k = KernelVelocity::new(&c, Bandwidth::Fixed(0.8))
                .unwrap()
                .with_cutoff(cutoff)
                .unwrap();
            let v = k.eval(0.0, &[0.0, 0.3]).unwrap();
            assert!(v[0].abs() < 1e-15 && (v[1] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_matches_truncated_brute_force() {
        let g = GaussianJointCoupling::new(
            Vector::zeros(3),
            Vector::from_vec(vec![1.0, 0.0, -1.0]),
            Matrix::identity(3, 3),
            Matrix::identity(3, 3) * 2.0,
            Matrix::zeros(3, 3),
        )
        .unwrap();
        let c = g.to_particles(2000, 4).unwrap();
        let k = KernelVelocity::new(&c, Bandwidth::default()).unwrap();
        let t = 0.4;
        let h = k.bandwidth_at(t);
        let anchors = k.anchors(t);
        let queries = g.to_particles(50, 9).unwrap().interpolate(t, 0.0, 0).unwrap();
        for x in queries.rows() {
            let got = k.eval(t, x).unwrap();
            let mut sw = 0.0;
            let mut acc = [0.0; 3];
            for (a, v) in anchors.chunks_exact(3).zip(k.disp.chunks_exact(3)) {
                let r2: f64 = (0..3).map(|i| ((x[i] - a[i]) / h[i]).powi(2)).sum();
                if r2 <= DEFAULT_CUTOFF * DEFAULT_CUTOFF {
                    let w = (-0.5 * r2).exp();
                    sw += w;
                    for i in 0..3 {
                        acc[i] += w * v[i];
                    }
                }
            }
            for i in 0..3 {
                assert!((got[i] - acc[i] / sw).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn approaches_gaussian_field() {
        let g = GaussianJointCoupling::new(
            Vector::zeros(2),
            Vector::zeros(2),
            Matrix::identity(2, 2),
            Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 1.0])),
            Matrix::zeros(2, 2),
        )
        .unwrap();
        let exact = GaussianVelocity::new(g.clone());
        let c = g.to_particles(20_000, 1).unwrap();
        let k = KernelVelocity::new(&c, Bandwidth::default()).unwrap();
        let q = g.to_particles(500, 2).unwrap().interpolate(0.5, 0.0, 0).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for x in q.rows() {
            let a = k.eval(0.5, x).unwrap();
            let b = exact.eval(0.5, x).unwrap();
            num += (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
            den += b[0] * b[0] + b[1] * b[1];
        }
        assert!((num / den).sqrt() < 0.25, "relative error {}", (num / den).sqrt());
    }
}
