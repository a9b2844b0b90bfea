//! Gaussians, Gaussian mixtures and empirical particle sets.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SpdInverse, Vector};
use crate::rng;

/// `n` points in `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl ParticleSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::InvalidArgument(format!(
                "particle buffer has {} values, expected {n}x{d}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite particle coordinate at row {}",
                pos / d.max(1)
            )));
        }
        Ok(ParticleSet { n, d, data })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        ParticleSet {
            n,
            d,
            data: vec![0.0; n * d],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::InvalidArgument("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        ParticleSet::new(rows.len(), d, data)
    }

    pub(crate) fn from_raw(n: usize, d: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n * d);
        ParticleSet { n, d, data }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.d.max(1)).take(self.n)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for r in self.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|a| *a /= self.n.max(1) as f64);
        m
    }

    /// Sample covariance with the `1/n` normalisation.
    pub fn covariance(&self) -> Matrix {
        let m = self.mean();
        let mut c = Matrix::zeros(self.d, self.d);
        for r in self.rows() {
            for i in 0..self.d {
                let di = r[i] - m[i];
                for j in 0..self.d {
                    c[(i, j)] += di * (r[j] - m[j]);
                }
            }
        }
        c / self.n.max(1) as f64
    }

    /// Per-coordinate standard deviation.
    pub fn std_dev(&self) -> Vec<f64> {
        let c = self.covariance();
        (0..self.d).map(|i| c[(i, i)].sqrt()).collect()
    }

    /// Mean squared Euclidean norm of the rows.
    pub fn second_moment(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>() / self.n.max(1) as f64
    }

    pub fn select(&self, idx: &[usize]) -> ParticleSet {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        ParticleSet::from_raw(idx.len(), self.d, data)
    }

    /// Apply `f` to every row.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64], &mut [f64])) -> ParticleSet {
        let mut out = vec![0.0; self.data.len()];
        for (src, dst) in self.rows().zip(out.chunks_exact_mut(self.d.max(1))) {
            f(src, dst);
        }
        ParticleSet::from_raw(self.n, self.d, out)
    }
}

/// Multivariate normal `N(mean, cov)` with a PSD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    mean: Vector,
    cov: Matrix,
}

impl GaussianDist {
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::InvalidDistribution(
                "mean and covariance dimensions disagree".into(),
            ));
        }
        if !linalg::is_symmetric(&cov) {
            return Err(Error::InvalidDistribution("covariance is not symmetric".into()));
        }
        if !linalg::is_psd(&cov) {
            return Err(Error::InvalidDistribution(
                "covariance is not positive semi-definite".into(),
            ));
        }
        Ok(GaussianDist { mean, cov })
    }

    pub fn standard(d: usize) -> Self {
        GaussianDist {
            mean: Vector::zeros(d),
            cov: Matrix::identity(d, d),
        }
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        GaussianDist::new(Vector::from_vec(mean), Matrix::identity(d, d) * var)
    }

    pub fn diagonal(mean: Vec<f64>, var: &[f64]) -> Result<Self> {
        GaussianDist::new(
            Vector::from_vec(mean),
            Matrix::from_diagonal(&Vector::from_row_slice(var)),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<ParticleSet> {
        gaussian_sample(self, n, seed)
    }

    /// Log-density; fails for singular covariances.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let inv = SpdInverse::new(&self.cov)?.ok_or_else(|| {
            Error::InvalidDistribution("singular covariance has no density".into())
        })?;
        Ok(gaussian_log_density_with(&self.mean, &inv, x))
    }
}

fn gaussian_log_density_with(mean: &Vector, inv: &SpdInverse, x: &[f64]) -> f64 {
    let d = mean.len();
    let mut q = 0.0;
    for i in 0..d {
        let di = x[i] - mean[i];
        for j in 0..d {
            q += di * inv.inverse[(i, j)] * (x[j] - mean[j]);
        }
    }
    -0.5 * (q + inv.log_det + d as f64 * (2.0 * PI).ln())
}

/// `n` i.i.d. draws from `dist`, deterministic in `seed`.
pub fn gaussian_sample(dist: &GaussianDist, n: usize, seed: u64) -> Result<ParticleSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be at least 1".into()));
    }
    let d = dist.dim();
    let factor = linalg::psd_factor(&dist.cov).map_err(|e| {
        Error::InvalidDistribution(format!("covariance factorization failed: {e}"))
    })?;
    let z = rng::standard_normals(n, d, seed);
    let mut data = vec![0.0; n * d];
    for (zi, xi) in z.chunks_exact(d).zip(data.chunks_exact_mut(d)) {
        for r in 0..d {
            let mut acc = dist.mean[r];
            for c in 0..d {
                acc += factor[(r, c)] * zi[c];
            }
            xi[r] = acc;
        }
    }
    Ok(ParticleSet::from_raw(n, d, data))
}

/// Numerically stable `log Σ exp(v)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Finite mixture `Σ_k w_k N(m_k, C_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmDist {
    components: Vec<(f64, GaussianDist)>,
}

impl GmmDist {
    pub fn new(components: Vec<(f64, GaussianDist)>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidDistribution("mixture has no components".into()))?;
        let d = first.1.dim();
        let mut total = 0.0;
        for (w, g) in &components {
            if !(*w > 0.0 && *w <= 1.0) {
                return Err(Error::InvalidDistribution(format!(
                    "mixture weight {w} outside (0, 1]"
                )));
            }
            if g.dim() != d {
                return Err(Error::InvalidDistribution(
                    "mixture components have different dimensions".into(),
                ));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution(format!(
                "mixture weights sum to {total}"
            )));
        }
        Ok(GmmDist { components })
    }

    /// Equal-weight mixture.
    pub fn uniform(components: Vec<GaussianDist>) -> Result<Self> {
        let w = 1.0 / components.len().max(1) as f64;
        let mut comps: Vec<(f64, GaussianDist)> = components.into_iter().map(|g| (w, g)).collect();
        // make the weights sum to one exactly
        let rest: f64 = comps.iter().skip(1).map(|c| c.0).sum();
        if let Some(c) = comps.first_mut() {
            c.0 = 1.0 - rest;
        }
        GmmDist::new(comps)
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    pub fn components(&self) -> &[(f64, GaussianDist)] {
        &self.components
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        gmm_log_density(self, x)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<ParticleSet> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample size must be at least 1".into()));
        }
        let d = self.dim();
        let u = rng::uniforms(n, rng::derive_seed(seed, 0));
        let z = rng::standard_normals(n, d, rng::derive_seed(seed, 1));
        let factors = self
            .components
            .iter()
            .map(|(_, g)| linalg::psd_factor(g.cov()))
            .collect::<Result<Vec<_>>>()?;
        let mut cum = Vec::with_capacity(self.components.len());
        let mut acc = 0.0;
        for (w, _) in &self.components {
            acc += w;
            cum.push(acc);
        }
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let k = cum.iter().position(|&c| u[i] < c).unwrap_or(cum.len() - 1);
            let g = &self.components[k].1;
            let f = &factors[k];
            let zi = &z[i * d..(i + 1) * d];
            for r in 0..d {
                let mut v = g.mean()[r];
                for c in 0..d {
                    v += f[(r, c)] * zi[c];
                }
                data[i * d + r] = v;
            }
        }
        Ok(ParticleSet::from_raw(n, d, data))
    }
}

/// `log Σ_k π_k p_k(x)` evaluated with log-sum-exp.
pub fn gmm_log_density(dist: &GmmDist, x: &[f64]) -> Result<f64> {
    if x.len() != dist.dim() {
        return Err(Error::InvalidArgument("point dimension mismatch".into()));
    }
    let mut terms = Vec::with_capacity(dist.components.len());
    for (w, g) in &dist.components {
        let inv = SpdInverse::new(g.cov())?.ok_or_else(|| {
            Error::InvalidDistribution("mixture component covariance is singular".into())
        })?;
        terms.push(w.ln() + gaussian_log_density_with(g.mean(), &inv, x));
    }
    Ok(log_sum_exp(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_gaussian_samples_its_mean() {
        let g = GaussianDist::new(Vector::zeros(3), Matrix::zeros(3, 3)).unwrap();
        let s = g.sample(5, 1).unwrap();
        assert!(s.as_slice().iter().all(|&x| x == 0.0));
        let g = GaussianDist::new(Vector::from_vec(vec![3.0, 4.0]), Matrix::zeros(2, 2)).unwrap();
        let s = g.sample(2, 1).unwrap();
        assert_eq!(s.row(0), &[3.0, 4.0]);
        assert_eq!(s.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn sample_covariance_converges() {
        let n = 100_000;
        let s = GaussianDist::standard(2).sample(n, 42).unwrap();
        let c = s.covariance();
        let tol = 5.0 / (n as f64).sqrt();
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((c[(i, j)] - e).abs() < tol, "{c}");
            }
        }
    }

    #[test]
    fn sampling_is_bitwise_deterministic() {
        let g = GaussianDist::diagonal(vec![1.0, -1.0], &[2.0, 0.5]).unwrap();
        assert_eq!(g.sample(1000, 9).unwrap(), g.sample(1000, 9).unwrap());
    }

    #[test]
    fn rejects_non_psd_covariance() {
        let c = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianDist::new(Vector::zeros(2), c),
            Err(Error::InvalidDistribution(_))
        ));
    }

    #[test]
    fn standard_normal_log_density_at_mode() {
        let gmm = GmmDist::new(vec![(1.0, GaussianDist::standard(1))]).unwrap();
        let v = gmm_log_density(&gmm, &[0.0]).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_mixture_at_origin_matches_direct_formula() {
        let m = 1.3;
        let gmm = GmmDist::uniform(vec![
            GaussianDist::isotropic(vec![-m], 1.0).unwrap(),
            GaussianDist::isotropic(vec![m], 1.0).unwrap(),
        ])
        .unwrap();
        let phi = (-0.5 * m * m).exp() / (2.0 * PI).sqrt();
        let v = gmm_log_density(&gmm, &[0.0]).unwrap();
        assert!((v - phi.ln()).abs() < 1e-12);
    }

    #[test]
    fn far_tail_is_finite() {
        let gmm = GmmDist::uniform(vec![
            GaussianDist::isotropic(vec![0.0, 0.0], 1.0).unwrap(),
            GaussianDist::isotropic(vec![1.0, 0.0], 1.0).unwrap(),
        ])
        .unwrap();
        let x = [60.0, 80.0]; // norm 100
        let v = gmm_log_density(&gmm, &x).unwrap();
        // dominant term: component at (1,0), squared distance 59^2 + 80^2
        let expect = 0.5f64.ln() - 0.5 * (59.0f64.powi(2) + 6400.0) - (2.0 * PI).ln();
        let other = 0.5f64.ln() - 0.5 * 10_000.0 - (2.0 * PI).ln();
        let exact = expect + (1.0 + (other - expect).exp()).ln();
        assert!(v.is_finite());
        assert!((v - exact).abs() < 1e-9 * exact.abs());
    }

    #[test]
    fn singular_component_is_rejected_by_density() {
        let gmm = GmmDist::new(vec![(
            1.0,
            GaussianDist::new(Vector::zeros(1), Matrix::zeros(1, 1)).unwrap(),
        )])
        .unwrap();
        assert!(matches!(
            gmm_log_density(&gmm, &[0.0]),
            Err(Error::InvalidDistribution(_))
        ));
    }

    #[test]
    fn weights_must_sum_to_one() {
        let r = GmmDist::new(vec![
            (0.5, GaussianDist::standard(1)),
            (0.4, GaussianDist::standard(1)),
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn mixture_density_integrates_to_one_in_2d() {
        let gmm = GmmDist::new(vec![
            (0.3, GaussianDist::isotropic(vec![-1.0, 0.5], 0.5).unwrap()),
            (
                0.7,
                GaussianDist::new(
                    Vector::from_vec(vec![1.0, -0.5]),
                    Matrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8]),
                )
                .unwrap(),
            ),
        ])
        .unwrap();
        let (lo, hi, m) = (-8.0, 8.0, 320);
        let h = (hi - lo) / m as f64;
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                let x = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                total += gmm_log_density(&gmm, &x).unwrap().exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }
}
