//! Velocity fields `v_t(x)` driving the rectified flow ODE.

mod closed_form;
mod kernel;
mod scenario;

pub use closed_form::{GaussianVelocity, GmmVelocity};
pub use kernel::{Bandwidth, KernelVelocity, DEFAULT_CUTOFF};
pub use scenario::{ScenarioField, ScenarioVelocity};

use std::sync::Arc;

use rayon::prelude::*;

use crate::coupling::AffineMode;
use crate::distributions::ParticleSet;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Times at which a field may be evaluated: the closed interval
/// `[start, end]` minus the listed singular times.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeDomain {
    pub start: f64,
    pub end: f64,
    pub singular: Vec<f64>,
}

const SINGULAR_TOL: f64 = 1e-14;

impl TimeDomain {
    pub fn full() -> Self {
        TimeDomain {
            start: 0.0,
            end: 1.0,
            singular: Vec::new(),
        }
    }

    pub fn with_singular(singular: Vec<f64>) -> Self {
        TimeDomain {
            singular,
            ..TimeDomain::full()
        }
    }

    pub fn check(&self, t: f64) -> Result<()> {
        if !(t >= self.start && t <= self.end) {
            return Err(Error::Domain(format!(
                "time {t} outside [{}, {}]",
                self.start, self.end
            )));
        }
        if self.singular.iter().any(|s| (t - s).abs() <= SINGULAR_TOL) {
            return Err(Error::SingularTime { t });
        }
        Ok(())
    }

    pub fn contains(&self, t: f64) -> bool {
        self.check(t).is_ok()
    }

    /// The first singular time in `(a, b]`, if any.
    pub fn singular_in(&self, a: f64, b: f64) -> Option<f64> {
        self.singular
            .iter()
            .copied()
            .filter(|&s| s > a && s <= b)
            .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.min(s))))
    }
}

/// A time-dependent vector field on `R^d`.
///
/// Implementations evaluate whole batches at one time so that per-time work
/// (matrix inverses, neighbour indices) is done once per call.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;

    fn time_domain(&self) -> TimeDomain;

    /// Evaluate at every row of the row-major buffer `xs`, writing into `out`.
    /// A failure at a specific row is reported as [`Error::AtPoint`].
    fn eval_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) -> Result<()>;

    /// Running count of queries answered without support (zero velocity
    /// instead of an error). Only estimators report nonzero values.
    fn out_of_support_events(&self) -> usize {
        0
    }

    fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.eval_batch(t, x, &mut out).map_err(|e| match e {
            Error::AtPoint { source, .. } => *source,
            e => e,
        })?;
        Ok(out)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Arc<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn out_of_support_events(&self) -> usize {
        (**self).out_of_support_events()
    }
    fn time_domain(&self) -> TimeDomain {
        (**self).time_domain()
    }
    fn eval_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).eval_batch(t, xs, out)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Box<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn out_of_support_events(&self) -> usize {
        (**self).out_of_support_events()
    }
    fn time_domain(&self) -> TimeDomain {
        (**self).time_domain()
    }
    fn eval_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).eval_batch(t, xs, out)
    }
}

pub(crate) fn check_batch(d: usize, xs: &[f64], out: &[f64]) -> Result<()> {
    if d == 0 || xs.len() % d != 0 || out.len() != xs.len() {
        return Err(Error::InvalidArgument(format!(
            "batch of {} values does not match dimension {d} / output of {}",
            xs.len(),
            out.len()
        )));
    }
    Ok(())
}

type PointFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Field given by a closure `(t, x, out)`; evaluation never fails.
#[derive(Clone)]
pub struct FnField {
    dim: usize,
    domain: TimeDomain,
    f: Arc<PointFn>,
}

impl FnField {
    pub fn new(dim: usize, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        FnField {
            dim,
            domain: TimeDomain::full(),
            f: Arc::new(f),
        }
    }

    pub fn with_domain(mut self, domain: TimeDomain) -> Self {
        self.domain = domain;
        self
    }

    pub fn constant(v: Vec<f64>) -> Self {
        FnField::new(v.len(), move |_, _, out| out.copy_from_slice(&v))
    }

    pub fn zero(dim: usize) -> Self {
        FnField::new(dim, |_, _, out| out.fill(0.0))
    }

    /// `v(x) = m x` for a fixed matrix.
    pub fn linear(m: Matrix) -> Self {
        FnField::new(m.nrows(), move |_, x, out| linalg::mat_vec_into(&m, x, out))
    }
}

impl std::fmt::Debug for FnField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnField").field("dim", &self.dim).finish_non_exhaustive()
    }
}

impl VelocityField for FnField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn time_domain(&self) -> TimeDomain {
        self.domain.clone()
    }

    fn eval_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) -> Result<()> {
        check_batch(self.dim, xs, out)?;
        self.domain.check(t)?;
        out.par_chunks_mut(self.dim)
            .zip(xs.par_chunks(self.dim))
            .for_each(|(o, x)| (self.f)(t, x, o));
        Ok(())
    }
}

/// A field transformed along with its coupling by an [`AffineMode`].
pub struct AffineWrapped<F> {
    inner: F,
    mode: AffineMode,
    a_inv: Option<Matrix>,
}

/// Velocity of the affinely transformed coupling, from the velocity of the
/// original one:
///
/// * `Both(A, b)`: `A v_t(A^{-1}(x - b))`
/// * `Shift1(b)`: `v_t(x - t b) + b`
/// * `Scale1(c)`: `c/s v_r(x/s) + (c-1)/s x` with `s = 1 - t + tc`, `r = tc/s`
pub fn affine_wrap<F: VelocityField>(inner: F, mode: AffineMode) -> Result<AffineWrapped<F>> {
    mode.validate(inner.dim())?;
    let a_inv = match &mode {
        AffineMode::Both { a, .. } => Some(
            a.clone()
                .try_inverse()
                .ok_or_else(|| Error::InvalidArgument("affine matrix is singular".into()))?,
        ),
        _ => None,
    };
    Ok(AffineWrapped { inner, mode, a_inv })
}

impl<F: VelocityField> AffineWrapped<F> {
    pub fn inner(&self) -> &F {
        &self.inner
    }

    fn scale_time(c: f64, t: f64) -> (f64, f64) {
        let s = 1.0 - t + t * c;
        (s, t * c / s)
    }
}

impl<F: VelocityField> VelocityField for AffineWrapped<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn out_of_support_events(&self) -> usize {
        self.inner.out_of_support_events()
    }

    fn time_domain(&self) -> TimeDomain {
        let dom = self.inner.time_domain();
        match self.mode {
            AffineMode::Scale1(c) => {
                // invert r = tc / (1 - t + tc)
                let back = |r: f64| r / (c + r - r * c);
                TimeDomain {
                    start: back(dom.start),
                    end: back(dom.end),
                    singular: dom.singular.iter().map(|&r| back(r)).collect(),
                }
            }
            _ => dom,
        }
    }

    fn eval_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        check_batch(d, xs, out)?;
        match &self.mode {
            AffineMode::Both { a, b } => {
                let a_inv = self.a_inv.as_ref().expect("inverse computed at construction");
                let mut y = vec![0.0; xs.len()];
                let mut tmp = vec![0.0; d];
                for (x, yr) in xs.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
                    for k in 0..d {
                        tmp[k] = x[k] - b[k];
                    }
                    linalg::mat_vec_into(a_inv, &tmp, yr);
                }
                let mut w = vec![0.0; xs.len()];
                self.inner.eval_batch(t, &y, &mut w)?;
                for (wr, o) in w.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                    linalg::mat_vec_into(a, wr, o);
                }
            }
            AffineMode::Shift1(b) => {
                let y: Vec<f64> = xs
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x - t * b[i % d])
                    .collect();
                self.inner.eval_batch(t, &y, out)?;
                for (i, o) in out.iter_mut().enumerate() {
                    *o += b[i % d];
                }
            }
            AffineMode::Scale1(c) => {
                let (s, r) = Self::scale_time(*c, t);
                let y: Vec<f64> = xs.iter().map(|x| x / s).collect();
                self.inner.eval_batch(r, &y, out)?;
                for (o, x) in out.iter_mut().zip(xs) {
                    *o = c / s * *o + (c - 1.0) / s * x;
                }
            }
        }
        Ok(())
    }
}

/// Outcome of [`jacobian_symmetry_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianReport {
    pub is_gradient_like: bool,
    /// Largest entry of `|J - Jᵀ|` over all points.
    pub max_asymmetry: f64,
}

/// Central-difference Jacobians of `v_t` at `points`; a gradient field has
/// symmetric Jacobians everywhere.
pub fn jacobian_symmetry_check<F: VelocityField + ?Sized>(
    v: &F,
    t: f64,
    points: &ParticleSet,
    h: f64,
    tol: f64,
) -> Result<JacobianReport> {
    let d = v.dim();
    if points.dim() != d {
        return Err(Error::InvalidArgument("points do not match the field dimension".into()));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("step h must be positive".into()));
    }
    let n = points.len();
    // stencil row (i, k, sign) at index (i * d + k) * 2 + sign
    let mut stencil = vec![0.0; n * 2 * d * d];
    for i in 0..n {
        for k in 0..d {
            for s in 0..2 {
                let row = ((i * d + k) * 2 + s) * d;
                stencil[row..row + d].copy_from_slice(points.row(i));
                stencil[row + k] += if s == 0 { h } else { -h };
            }
        }
    }
    let mut vals = vec![0.0; stencil.len()];
    v.eval_batch(t, &stencil, &mut vals).map_err(|e| match e {
        Error::AtPoint { index, source } => Error::at_point(index / (2 * d), *source),
        e => e,
    })?;
    let mut max_asym = 0.0_f64;
    let mut jac = Matrix::zeros(d, d);
    for i in 0..n {
        for k in 0..d {
            let plus = ((i * d + k) * 2) * d;
            let minus = plus + d;
            for r in 0..d {
                // column k holds the derivative along coordinate k
                jac[(r, k)] = (vals[plus + r] - vals[minus + r]) / (2.0 * h);
            }
        }
        let asym = (&jac - jac.transpose()).abs().max();
        max_asym = max_asym.max(asym);
    }
    Ok(JacobianReport {
        is_gradient_like: max_asym <= tol,
        max_asymmetry: max_asym,
    })
}

/// Evaluate a field on every row of a particle set.
pub fn eval_set<F: VelocityField + ?Sized>(v: &F, t: f64, xs: &ParticleSet) -> Result<ParticleSet> {
    let mut out = vec![0.0; xs.as_slice().len()];
    v.eval_batch(t, xs.as_slice(), &mut out)?;
    ParticleSet::new(xs.len(), xs.dim(), out)
}
