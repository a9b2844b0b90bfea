//! Couplings `(X0, X1)`: closed-form Gaussian and mixture families, empirical
//! particle pairs, and couplings given by a transport map.
//!
//! Covariance blocks follow `Cov((X0, X1)) = [[Σ0, Σ10], [Σ01, Σ1]]` with
//! `Σ01 = Cov(X1, X0)` and `Σ10 = Σ01ᵀ`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::distributions::{GaussianDist, GmmDist, ParticleSet};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::rng;

/// Affine modification of a coupling.
#[derive(Debug, Clone, PartialEq)]
pub enum AffineMode {
    /// `(A X0 + b, A X1 + b)`
    Both { a: Matrix, b: Vector },
    /// `(X0, X1 + b)`
    Shift1(Vector),
    /// `(X0, c X1)`
    Scale1(f64),
}

impl AffineMode {
    pub(crate) fn validate(&self, d: usize) -> Result<()> {
        match self {
            AffineMode::Both { a, b } => {
                if a.shape() != (d, d) || b.len() != d {
                    return Err(Error::InvalidArgument("affine map has the wrong dimension".into()));
                }
                let sv = a.singular_values();
                let max = sv.max();
                let min = sv.min();
                if !(min > 0.0) || max / min > linalg::MAX_CONDITION {
                    return Err(Error::InvalidArgument("affine matrix is singular".into()));
                }
            }
            AffineMode::Shift1(b) => {
                if b.len() != d {
                    return Err(Error::InvalidArgument("shift has the wrong dimension".into()));
                }
            }
            AffineMode::Scale1(c) => {
                if !(*c > 0.0) || !c.is_finite() {
                    return Err(Error::InvalidArgument(format!("scale must be positive, got {c}")));
                }
            }
        }
        Ok(())
    }

    /// The mode that undoes this one.
    pub fn inverse(&self) -> Result<AffineMode> {
        Ok(match self {
            AffineMode::Both { a, b } => {
                let ai = a
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| Error::InvalidArgument("affine matrix is singular".into()))?;
                let bi = -(&ai * b);
                AffineMode::Both { a: ai, b: bi }
            }
            AffineMode::Shift1(b) => AffineMode::Shift1(-b),
            AffineMode::Scale1(c) => AffineMode::Scale1(1.0 / c),
        })
    }
}

/// Jointly Gaussian pair `(X0, X1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianJointCoupling {
    pub mean0: Vector,
    pub mean1: Vector,
    pub sigma0: Matrix,
    pub sigma1: Matrix,
    /// `Cov(X1, X0)`
    pub sigma01: Matrix,
}

impl GaussianJointCoupling {
    /// Validated constructor; both marginal covariances must be positive definite.
    pub fn new(
        mean0: Vector,
        mean1: Vector,
        sigma0: Matrix,
        sigma1: Matrix,
        sigma01: Matrix,
    ) -> Result<Self> {
        let c = GaussianJointCoupling::new_psd(mean0, mean1, sigma0, sigma1, sigma01)?;
        for (name, s) in [("sigma0", &c.sigma0), ("sigma1", &c.sigma1)] {
            if linalg::SpdInverse::new(s)?.is_none() {
                return Err(Error::InvalidDistribution(format!(
                    "{name} must be positive definite"
                )));
            }
        }
        Ok(c)
    }

    /// Like [`new`](Self::new) but allows singular marginals, as used by
    /// degenerate mixture components.
    pub fn new_psd(
        mean0: Vector,
        mean1: Vector,
        sigma0: Matrix,
        sigma1: Matrix,
        sigma01: Matrix,
    ) -> Result<Self> {
        let d = mean0.len();
        if mean1.len() != d
            || sigma0.shape() != (d, d)
            || sigma1.shape() != (d, d)
            || sigma01.shape() != (d, d)
        {
            return Err(Error::InvalidDistribution("coupling block dimensions disagree".into()));
        }
        let c = GaussianJointCoupling {
            mean0,
            mean1,
            sigma0,
            sigma1,
            sigma01,
        };
        if !linalg::is_symmetric(&c.sigma0) || !linalg::is_symmetric(&c.sigma1) {
            return Err(Error::InvalidDistribution("marginal covariance is not symmetric".into()));
        }
        linalg::psd_eigen(&c.joint_cov()).map_err(|e| {
            Error::InvalidDistribution(format!("joint covariance is not PSD: {e}"))
        })?;
        Ok(c)
    }

    /// Independent coupling of two Gaussians.
    pub fn independent(g0: &GaussianDist, g1: &GaussianDist) -> Result<Self> {
        let d = g0.dim();
        GaussianJointCoupling::new(
            g0.mean().clone(),
            g1.mean().clone(),
            g0.cov().clone(),
            g1.cov().clone(),
            Matrix::zeros(d, d),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean0.len()
    }

    /// The assembled `2d x 2d` covariance of `(X0, X1)`.
    pub fn joint_cov(&self) -> Matrix {
        let d = self.dim();
        let mut m = Matrix::zeros(2 * d, 2 * d);
        m.view_mut((0, 0), (d, d)).copy_from(&self.sigma0);
        m.view_mut((d, d), (d, d)).copy_from(&self.sigma1);
        m.view_mut((d, 0), (d, d)).copy_from(&self.sigma01);
        m.view_mut((0, d), (d, d)).copy_from(&self.sigma01.transpose());
        m
    }

    pub fn marginal0(&self) -> Result<GaussianDist> {
        GaussianDist::new(self.mean0.clone(), self.sigma0.clone())
    }

    pub fn marginal1(&self) -> Result<GaussianDist> {
        GaussianDist::new(self.mean1.clone(), self.sigma1.clone())
    }

    /// Exact law of `X_t`: mean and covariance.
    pub fn interp_cov(&self, t: f64) -> (Vector, Matrix) {
        let s = 1.0 - t;
        let mean = &self.mean0 * s + &self.mean1 * t;
        let cross = &self.sigma01 + self.sigma01.transpose();
        let cov = &self.sigma0 * (s * s) + cross * (s * t) + &self.sigma1 * (t * t);
        (mean, linalg::symmetrize(&cov))
    }

    /// `n` joint draws.
    pub fn to_particles(&self, n: usize, seed: u64) -> Result<ParticleCoupling> {
        let d = self.dim();
        let mut mean = Vector::zeros(2 * d);
        mean.rows_mut(0, d).copy_from(&self.mean0);
        mean.rows_mut(d, d).copy_from(&self.mean1);
        let joint = GaussianDist::new(mean, self.joint_cov())?.sample(n, seed)?;
        split_joint(&joint, d)
    }

    pub fn affine_transform(&self, mode: &AffineMode) -> Result<Self> {
        mode.validate(self.dim())?;
        let mut c = self.clone();
        match mode {
            AffineMode::Both { a, b } => {
                c.mean0 = a * &self.mean0 + b;
                c.mean1 = a * &self.mean1 + b;
                c.sigma0 = linalg::symmetrize(&(a * &self.sigma0 * a.transpose()));
                c.sigma1 = linalg::symmetrize(&(a * &self.sigma1 * a.transpose()));
                c.sigma01 = a * &self.sigma01 * a.transpose();
            }
            AffineMode::Shift1(b) => c.mean1 = &self.mean1 + b,
            AffineMode::Scale1(k) => {
                c.mean1 = &self.mean1 * *k;
                c.sigma1 = &self.sigma1 * (k * k);
                c.sigma01 = &self.sigma01 * *k;
            }
        }
        Ok(c)
    }
}

fn split_joint(joint: &ParticleSet, d: usize) -> Result<ParticleCoupling> {
    let n = joint.len();
    let mut x0 = Vec::with_capacity(n * d);
    let mut x1 = Vec::with_capacity(n * d);
    for r in joint.rows() {
        x0.extend_from_slice(&r[..d]);
        x1.extend_from_slice(&r[d..]);
    }
    ParticleCoupling::new(
        ParticleSet::from_raw(n, d, x0),
        ParticleSet::from_raw(n, d, x1),
    )
}

/// Mixture of jointly Gaussian couplings.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmJointCoupling {
    components: Vec<(f64, GaussianJointCoupling)>,
}

impl GmmJointCoupling {
    pub fn new(components: Vec<(f64, GaussianJointCoupling)>) -> Result<Self> {
        let d = components
            .first()
            .map(|(_, c)| c.dim())
            .ok_or_else(|| Error::InvalidDistribution("mixture has no components".into()))?;
        let mut total = 0.0;
        for (w, c) in &components {
            if !(*w > 0.0 && *w <= 1.0) {
                return Err(Error::InvalidDistribution(format!("weight {w} outside (0, 1]")));
            }
            if c.dim() != d {
                return Err(Error::InvalidDistribution("component dimensions disagree".into()));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}, not 1")));
        }
        Ok(GmmJointCoupling { components })
    }

    /// Independent coupling of two mixtures: one component per pair of
    /// marginal components, with zero cross-covariance.
    pub fn independent(mu0: &GmmDist, mu1: &GmmDist) -> Result<Self> {
        if mu0.dim() != mu1.dim() {
            return Err(Error::InvalidDistribution("marginal dimensions disagree".into()));
        }
        let d = mu0.dim();
        let mut comps = Vec::new();
        for (w0, g0) in mu0.components() {
            for (w1, g1) in mu1.components() {
                comps.push((
                    w0 * w1,
                    GaussianJointCoupling::new_psd(
                        g0.mean().clone(),
                        g1.mean().clone(),
                        g0.cov().clone(),
                        g1.cov().clone(),
                        Matrix::zeros(d, d),
                    )?,
                ));
            }
        }
        // products of normalised weights can drift from 1 in the last bits
        let total: f64 = comps.iter().map(|c| c.0).sum();
        comps.iter_mut().for_each(|c| c.0 /= total);
        GmmJointCoupling::new(comps)
    }

    pub fn from_gaussian(c: GaussianJointCoupling) -> Self {
        GmmJointCoupling {
            components: vec![(1.0, c)],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    pub fn components(&self) -> &[(f64, GaussianJointCoupling)] {
        &self.components
    }

    pub fn marginal0(&self) -> Result<GmmDist> {
        GmmDist::new(
            self.components
                .iter()
                .map(|(w, c)| Ok((*w, GaussianDist::new(c.mean0.clone(), c.sigma0.clone())?)))
                .collect::<Result<_>>()?,
        )
    }

    pub fn marginal1(&self) -> Result<GmmDist> {
        GmmDist::new(
            self.components
                .iter()
                .map(|(w, c)| Ok((*w, GaussianDist::new(c.mean1.clone(), c.sigma1.clone())?)))
                .collect::<Result<_>>()?,
        )
    }

    pub fn to_particles(&self, n: usize, seed: u64) -> Result<ParticleCoupling> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample size must be at least 1".into()));
        }
        let d = self.dim();
        let u = rng::uniforms(n, rng::derive_seed(seed, 0));
        let z = rng::standard_normals(n, 2 * d, rng::derive_seed(seed, 1));
        let factors = self
            .components
            .iter()
            .map(|(_, c)| linalg::psd_factor(&c.joint_cov()))
            .collect::<Result<Vec<_>>>()?;
        let mut cum = Vec::with_capacity(self.components.len());
        let mut acc = 0.0;
        for (w, _) in &self.components {
            acc += w;
            cum.push(acc);
        }
        let mut x0 = vec![0.0; n * d];
        let mut x1 = vec![0.0; n * d];
        for i in 0..n {
            let k = cum.iter().position(|&c| u[i] < c).unwrap_or(cum.len() - 1);
            let c = &self.components[k].1;
            let f = &factors[k];
            let zi = &z[i * 2 * d..(i + 1) * 2 * d];
            for r in 0..2 * d {
                let mut v = if r < d { c.mean0[r] } else { c.mean1[r - d] };
                for (col, zc) in zi.iter().enumerate() {
                    v += f[(r, col)] * zc;
                }
                if r < d {
                    x0[i * d + r] = v;
                } else {
                    x1[i * d + r - d] = v;
                }
            }
        }
        ParticleCoupling::new(
            ParticleSet::from_raw(n, d, x0),
            ParticleSet::from_raw(n, d, x1),
        )
    }

    pub fn affine_transform(&self, mode: &AffineMode) -> Result<Self> {
        Ok(GmmJointCoupling {
            components: self
                .components
                .iter()
                .map(|(w, c)| Ok((*w, c.affine_transform(mode)?)))
                .collect::<Result<_>>()?,
        })
    }
}

/// Positionally paired samples: row `i` of `x0` is coupled with row `i` of `x1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCoupling {
    x0: ParticleSet,
    x1: ParticleSet,
}

pub const PARTICLE_HEADER: &str = "rectiflow-particles v1";

impl ParticleCoupling {
    pub fn new(x0: ParticleSet, x1: ParticleSet) -> Result<Self> {
        if x0.len() != x1.len() || x0.dim() != x1.dim() {
            return Err(Error::InvalidArgument(format!(
                "coupling sides differ in shape: {}x{} vs {}x{}",
                x0.len(),
                x0.dim(),
                x1.len(),
                x1.dim()
            )));
        }
        if !x0.all_finite() || !x1.all_finite() {
            return Err(Error::InvalidArgument("coupling contains non-finite values".into()));
        }
        Ok(ParticleCoupling { x0, x1 })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x0.dim()
    }

    pub fn x0(&self) -> &ParticleSet {
        &self.x0
    }

    pub fn x1(&self) -> &ParticleSet {
        &self.x1
    }

    pub fn into_parts(self) -> (ParticleSet, ParticleSet) {
        (self.x0, self.x1)
    }

    /// Rows `x1 - x0`.
    pub fn displacements(&self) -> ParticleSet {
        let data = self
            .x1
            .as_slice()
            .iter()
            .zip(self.x0.as_slice())
            .map(|(b, a)| b - a)
            .collect();
        ParticleSet::from_raw(self.len(), self.dim(), data)
    }

    pub fn select(&self, idx: &[usize]) -> ParticleCoupling {
        ParticleCoupling {
            x0: self.x0.select(idx),
            x1: self.x1.select(idx),
        }
    }

    /// `(1-t) x0 + t x1`, plus `sqrt(eps t (1-t)) Z` when `noise_eps > 0`.
    pub fn interpolate(&self, t: f64, noise_eps: f64, seed: u64) -> Result<ParticleSet> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("interpolation time {t} outside [0, 1]")));
        }
        if !(noise_eps >= 0.0) || !noise_eps.is_finite() {
            return Err(Error::Domain(format!("noise level {noise_eps} must be >= 0")));
        }
        let s = 1.0 - t;
        let mut data: Vec<f64> = self
            .x0
            .as_slice()
            .iter()
            .zip(self.x1.as_slice())
            .map(|(a, b)| s * a + t * b)
            .collect();
        let scale = (noise_eps * t * s).sqrt();
        if scale > 0.0 {
            let z = rng::standard_normals(self.len(), self.dim(), seed);
            data.iter_mut().zip(&z).for_each(|(x, z)| *x += scale * z);
        }
        Ok(ParticleSet::from_raw(self.len(), self.dim(), data))
    }

    pub fn affine_transform(&self, mode: &AffineMode) -> Result<Self> {
        mode.validate(self.dim())?;
        let d = self.dim();
        let apply = |s: &ParticleSet, a: &Matrix, b: &Vector| {
            s.map_rows(|x, out| {
                linalg::mat_vec_into(a, x, out);
                for k in 0..d {
                    out[k] += b[k];
                }
            })
        };
        Ok(match mode {
            AffineMode::Both { a, b } => ParticleCoupling {
                x0: apply(&self.x0, a, b),
                x1: apply(&self.x1, a, b),
            },
            AffineMode::Shift1(b) => ParticleCoupling {
                x0: self.x0.clone(),
                x1: self.x1.map_rows(|x, out| {
                    for k in 0..d {
                        out[k] = x[k] + b[k];
                    }
                }),
            },
            AffineMode::Scale1(c) => ParticleCoupling {
                x0: self.x0.clone(),
                x1: self.x1.map_rows(|x, out| {
                    for k in 0..d {
                        out[k] = c * x[k];
                    }
                }),
            },
        })
    }

    /// Write the text particle format: the header line
    /// `rectiflow-particles v1 n=<n> d=<d>`, then `n` comma-separated rows of
    /// `x0`, then `n` rows of `x1`. Values are printed in shortest round-trip
    /// form, so reading back reproduces the coupling bit for bit.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{PARTICLE_HEADER} n={} d={}", self.len(), self.dim())?;
        let mut line = String::new();
        for s in [&self.x0, &self.x1] {
            for r in s.rows() {
                line.clear();
                for (k, v) in r.iter().enumerate() {
                    if k > 0 {
                        line.push(',');
                    }
                    write!(line, "{v:?}").expect("writing to a String");
                }
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty particle file".into()))??;
        let rest = header
            .strip_prefix(PARTICLE_HEADER)
            .ok_or_else(|| Error::Parse(format!("bad particle header: {header:?}")))?;
        let mut n = None;
        let mut d = None;
        for tok in rest.split_whitespace() {
            if let Some(v) = tok.strip_prefix("n=") {
                n = v.parse::<usize>().ok();
            } else if let Some(v) = tok.strip_prefix("d=") {
                d = v.parse::<usize>().ok();
            } else {
                return Err(Error::Parse(format!("unexpected header token {tok:?}")));
            }
        }
        let (n, d) = match (n, d) {
            (Some(n), Some(d)) if d > 0 => (n, d),
            _ => return Err(Error::Parse(format!("header lacks valid n and d: {header:?}"))),
        };
        let mut read_set = |side: &str| -> Result<ParticleSet> {
            let mut data = Vec::with_capacity(n * d);
            for i in 0..n {
                let line = lines.next().ok_or_else(|| {
                    Error::Parse(format!("{side}: expected {n} rows, file ended at row {i}"))
                })??;
                let before = data.len();
                for tok in line.split(',') {
                    let v: f64 = tok.trim().parse().map_err(|_| {
                        Error::Parse(format!("{side} row {i}: bad number {tok:?}"))
                    })?;
                    data.push(v);
                }
                if data.len() - before != d {
                    return Err(Error::Parse(format!(
                        "{side} row {i}: expected {d} values, found {}",
                        data.len() - before
                    )));
                }
            }
            ParticleSet::new(n, d, data)
        };
        let x0 = read_set("x0")?;
        let x1 = read_set("x1")?;
        for extra in lines {
            if !extra?.trim().is_empty() {
                return Err(Error::Parse("trailing data after particle rows".into()));
            }
        }
        ParticleCoupling::new(x0, x1)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        ParticleCoupling::read_from(std::io::BufReader::new(f))
    }
}

/// Source law of a [`MapCoupling`].
#[derive(Debug, Clone)]
pub enum Source {
    Gaussian(GaussianDist),
    Gmm(GmmDist),
    Particles(ParticleSet),
}

impl Source {
    pub fn dim(&self) -> usize {
        match self {
            Source::Gaussian(g) => g.dim(),
            Source::Gmm(g) => g.dim(),
            Source::Particles(p) => p.dim(),
        }
    }

    /// `n` draws. A particle source is subsampled without replacement.
    pub fn sample(&self, n: usize, seed: u64) -> Result<ParticleSet> {
        match self {
            Source::Gaussian(g) => g.sample(n, seed),
            Source::Gmm(g) => g.sample(n, seed),
            Source::Particles(p) => {
                if n > p.len() || n == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "cannot draw {n} of {} source particles",
                        p.len()
                    )));
                }
                if n == p.len() {
                    return Ok(p.clone());
                }
                let mut idx = rng::permutation(p.len(), seed);
                idx.truncate(n);
                Ok(p.select(&idx))
            }
        }
    }
}

pub type MapFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Deterministic coupling `X1 = T(X0)`.
#[derive(Clone)]
pub struct MapCoupling {
    pub source: Source,
    pub map: MapFn,
}

impl std::fmt::Debug for MapCoupling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MapCoupling")
            .field("source", &self.source)
            .finish_non_exhaustive()
    }
}

impl MapCoupling {
    pub fn new(source: Source, map: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        MapCoupling {
            source,
            map: Arc::new(map),
        }
    }

    pub fn to_particles(&self, n: usize, seed: u64) -> Result<ParticleCoupling> {
        let x0 = self.source.sample(n, seed)?;
        let x1 = x0.map_rows(|x, out| (self.map)(x, out));
        ParticleCoupling::new(x0, x1)
    }
}

/// Smoothing construction applied to the source side of a coupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothVariant {
    /// `x0 + c W`
    Additive,
    /// `sqrt(1-c) x0 + sqrt(c) W`
    VariancePreserving,
}

/// Perturb `x0` with fresh standard normal noise; `x1` is untouched.
pub fn smooth_coupling(
    coupling: &ParticleCoupling,
    c: f64,
    variant: SmoothVariant,
    seed: u64,
) -> Result<ParticleCoupling> {
    let ok = match variant {
        SmoothVariant::Additive => c >= 0.0 && c.is_finite(),
        SmoothVariant::VariancePreserving => (0.0..1.0).contains(&c),
    };
    if !ok {
        return Err(Error::Domain(format!("smoothing level {c} out of range for {variant:?}")));
    }
    if c == 0.0 {
        return Ok(coupling.clone());
    }
    let (a, b) = match variant {
        SmoothVariant::Additive => (1.0, c),
        SmoothVariant::VariancePreserving => ((1.0 - c).sqrt(), c.sqrt()),
    };
    let w = rng::standard_normals(coupling.len(), coupling.dim(), seed);
    let data = coupling
        .x0
        .as_slice()
        .iter()
        .zip(&w)
        .map(|(x, w)| a * x + b * w)
        .collect();
    Ok(ParticleCoupling {
        x0: ParticleSet::from_raw(coupling.len(), coupling.dim(), data),
        x1: coupling.x1.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(d: usize) -> Matrix {
        Matrix::identity(d, d)
    }

    fn gauss(s0: Matrix, s1: Matrix, s01: Matrix) -> GaussianJointCoupling {
        let d = s0.nrows();
        GaussianJointCoupling::new(Vector::zeros(d), Vector::zeros(d), s0, s1, s01).unwrap()
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = ParticleSet::from_rows(&[[0.0, 0.0]]).unwrap();
        let x1 = ParticleSet::from_rows(&[[2.0, 4.0]]).unwrap();
        let c = ParticleCoupling::new(x0.clone(), x1.clone()).unwrap();
        assert_eq!(c.interpolate(0.0, 0.0, 0).unwrap(), x0);
        assert_eq!(c.interpolate(1.0, 0.0, 0).unwrap(), x1);
        assert_eq!(c.interpolate(0.5, 0.0, 0).unwrap().row(0), &[1.0, 2.0]);
        assert!(matches!(c.interpolate(1.5, 0.0, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn noisy_interpolation_variance() {
        let z = ParticleSet::zeros(100_000, 2);
        let c = ParticleCoupling::new(z.clone(), z).unwrap();
        let xt = c.interpolate(0.5, 1.0, 3).unwrap();
        let cov = xt.covariance();
        assert!((cov[(0, 0)] - 0.25).abs() < 0.01);
        assert!((cov[(1, 1)] - 0.25).abs() < 0.01);
    }

    #[test]
    fn interp_cov_examples() {
        let c = gauss(eye(2), eye(2), -eye(2));
        let (_, cov) = c.interp_cov(0.25);
        assert!(linalg::rel_frobenius(&cov, &(eye(2) * 0.25)) < 1e-14);
        let c = gauss(eye(2), eye(2), Matrix::zeros(2, 2));
        let (_, cov) = c.interp_cov(0.5);
        assert!(linalg::rel_frobenius(&cov, &(eye(2) * 0.5)) < 1e-14);
        let (m, cov) = c.interp_cov(0.0);
        assert_eq!(cov, c.sigma0);
        assert_eq!(m, c.mean0);
    }

    #[test]
    fn rejects_non_psd_joint() {
        let r = GaussianJointCoupling::new(
            Vector::zeros(1),
            Vector::zeros(1),
            eye(1),
            eye(1),
            eye(1) * 1.5,
        );
        assert!(matches!(r, Err(Error::InvalidDistribution(_))));
    }

    #[test]
    fn affine_modes_on_gaussian() {
        let c = gauss(eye(2), eye(2), Matrix::zeros(2, 2));
        let id = AffineMode::Both {
            a: eye(2),
            b: Vector::zeros(2),
        };
        assert_eq!(c.affine_transform(&id).unwrap(), c);
        let b = Vector::from_vec(vec![1.0, -2.0]);
        let s = c.affine_transform(&AffineMode::Shift1(b.clone())).unwrap();
        assert_eq!(s.mean1, b);
        assert_eq!(s.sigma1, c.sigma1);
        assert_eq!(s.sigma01, c.sigma01);
        let k = c.affine_transform(&AffineMode::Scale1(2.0)).unwrap();
        assert_eq!(k.sigma1, eye(2) * 4.0);
        assert_eq!(k.sigma01, Matrix::zeros(2, 2));
        let sing = AffineMode::Both {
            a: Matrix::zeros(2, 2),
            b: Vector::zeros(2),
        };
        assert!(matches!(c.affine_transform(&sing), Err(Error::InvalidArgument(_))));
        assert!(c.affine_transform(&AffineMode::Scale1(-1.0)).is_err());
    }

    #[test]
    fn affine_round_trip_on_particles() {
        let c = gauss(eye(2), eye(2) * 2.0, eye(2) * 0.5)
            .to_particles(50, 1)
            .unwrap();
        let mode = AffineMode::Both {
            a: Matrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, 3.0]),
            b: Vector::from_vec(vec![0.3, -1.0]),
        };
        let back = c
            .affine_transform(&mode)
            .unwrap()
            .affine_transform(&mode.inverse().unwrap())
            .unwrap();
        for (a, b) in back.x0.as_slice().iter().zip(c.x0.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in back.x1.as_slice().iter().zip(c.x1.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn smoothing() {
        let g = GaussianDist::standard(2);
        let x0 = g.sample(100_000, 1).unwrap();
        let c = ParticleCoupling::new(x0.clone(), x0).unwrap();
        assert_eq!(smooth_coupling(&c, 0.0, SmoothVariant::Additive, 1).unwrap(), c);
        assert_eq!(
            smooth_coupling(&c, 0.0, SmoothVariant::VariancePreserving, 1).unwrap(),
            c
        );
        let s = smooth_coupling(&c, 0.3, SmoothVariant::VariancePreserving, 2).unwrap();
        let cov = s.x0().covariance();
        assert!((&cov - eye(2)).abs().max() < 0.05);
        assert_eq!(s.x1(), c.x1());

        let z = ParticleSet::zeros(100_000, 2);
        let c = ParticleCoupling::new(z.clone(), z).unwrap();
        let s = smooth_coupling(&c, 0.5, SmoothVariant::Additive, 4).unwrap();
        let cov = s.x0().covariance();
        assert!((&cov - eye(2) * 0.25).abs().max() < 0.01);

        assert!(smooth_coupling(&c, 1.0, SmoothVariant::VariancePreserving, 0).is_err());
        assert!(smooth_coupling(&c, -0.1, SmoothVariant::Additive, 0).is_err());
    }

    #[test]
    fn particle_file_round_trip() {
        let c = gauss(eye(3), eye(3), Matrix::zeros(3, 3))
            .to_particles(17, 9)
            .unwrap();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("rectiflow-particles v1 n=17 d=3\n"));
        let back = ParticleCoupling::read_from(&buf[..]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn particle_file_rejects_garbage() {
        let bad = [
            "nonsense\n",
            "rectiflow-particles v1 n=2 d=1\n1\n2\n3\n",
            "rectiflow-particles v1 n=1 d=2\n1,2\n3\n",
            "rectiflow-particles v1 n=1 d=1\nx\n1\n",
            "rectiflow-particles v1 n=1 d=1\n1\n2\n3\n",
        ];
        for b in bad {
            assert!(
                matches!(ParticleCoupling::read_from(b.as_bytes()), Err(Error::Parse(_))),
                "{b:?}"
            );
        }
    }

    #[test]
    fn gmm_sampling_matches_component_means() {
        let mu0 = GmmDist::uniform(vec![GaussianDist::standard(1)]).unwrap();
        let mu1 = GmmDist::uniform(vec![
            GaussianDist::isotropic(vec![-2.0], 0.0).unwrap(),
            GaussianDist::isotropic(vec![2.0], 0.0).unwrap(),
        ])
        .unwrap();
        let c = GmmJointCoupling::independent(&mu0, &mu1).unwrap();
        let p = c.to_particles(10_000, 5).unwrap();
        assert!(p.x1().as_slice().iter().all(|&v| v == -2.0 || v == 2.0));
        assert!(p.x1().mean()[0].abs() < 0.1);
    }

    #[test]
    fn map_coupling() {
        let m = MapCoupling::new(Source::Gaussian(GaussianDist::standard(2)), |x, out| {
            out[0] = x[0] + 1.0;
            out[1] = 2.0 * x[1];
        });
        let p = m.to_particles(10, 3).unwrap();
        for i in 0..10 {
            assert_eq!(p.x1().row(i)[0], p.x0().row(i)[0] + 1.0);
        }
    }
}
