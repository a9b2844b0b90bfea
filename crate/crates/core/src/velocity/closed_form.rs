//! Exact fields of Gaussian and Gaussian-mixture couplings.

use std::f64::consts::PI;

use rayon::prelude::*;

use super::{check_batch, TimeDomain, VelocityField};
use crate::coupling::{GaussianJointCoupling, GmmJointCoupling};
use crate::distributions::log_sum_exp;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SpdInverse, Vector};

/// Per-time data of one Gaussian component:
/// `w(x) = mat (x - mean_t) + shift`.
#[derive(Debug, Clone)]
struct Slice {
    mean_t: Vector,
    mat: Matrix,
    shift: Vector,
    inv: SpdInverse,
}

impl Slice {
    fn new(c: &GaussianJointCoupling, t: f64, noise: f64) -> Result<Slice> {
        let d = c.dim();
        let (mean_t, mut cov_t) = c.interp_cov(t);
        if noise > 0.0 {
            cov_t += Matrix::identity(d, d) * (noise * t * (1.0 - t));
        }
        let inv = match SpdInverse::new(&cov_t)? {
            Some(inv) => inv,
            None => {
                return Err(Error::SingularCovariance {
                    t,
                    condition: SpdInverse::condition_of(&cov_t)?,
                })
            }
        };
        // Cov(X1, X_t) = (1-t) Σ01 + t Σ1
        let cross = &c.sigma01 * (1.0 - t) + &c.sigma1 * t;
        let mat = (cross * &inv.inverse - Matrix::identity(d, d)) / (1.0 - t);
        Ok(Slice {
            mean_t,
            mat,
            shift: &c.mean1 - &c.mean0,
            inv,
        })
    }

    #[inline]
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        for r in 0..d {
            let mut acc = self.shift[r];
            for k in 0..d {
                acc += self.mat[(r, k)] * (x[k] - self.mean_t[k]);
            }
            out[r] = acc;
        }
    }

    /// Log-density of `X_t` under this component.
    #[inline]
    fn log_density(&self, x: &[f64]) -> f64 {
        let d = x.len();
        let mut q = 0.0;
        for i in 0..d {
            let di = x[i] - self.mean_t[i];
            for j in 0..d {
                q += di * self.inv.inverse[(i, j)] * (x[j] - self.mean_t[j]);
            }
        }
        -0.5 * (q + self.inv.log_det + d as f64 * (2.0 * PI).ln())
    }
}

fn check_noise(noise: f64) -> Result<()> {
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::InvalidArgument(format!("noise level {noise} must be >= 0")));
    }
    Ok(())
}

/// `v_t(x) = E[X1 - X0 | X_t = x]` for a jointly Gaussian coupling.
///
/// With `noise = eps > 0` the interpolant is the Brownian bridge
/// `X_t = (1-t) X0 + t X1 + sqrt(eps t (1-t)) Z` and the field is the drift
/// `E[(X1 - X_t)/(1-t) | X_t = x]` that reproduces its marginals.
#[derive(Debug, Clone)]
pub struct GaussianVelocity {
    coupling: GaussianJointCoupling,
    noise: f64,
}

impl GaussianVelocity {
    pub fn new(coupling: GaussianJointCoupling) -> Self {
        GaussianVelocity {
            coupling,
            noise: 0.0,
        }
    }

    pub fn with_bridge_noise(coupling: GaussianJointCoupling, eps: f64) -> Result<Self> {
        check_noise(eps)?;
        Ok(GaussianVelocity {
            coupling,
            noise: eps,
        })
    }

    pub fn coupling(&self) -> &GaussianJointCoupling {
        &self.coupling
    }

    /// The linear part of the field at time `t`:
    /// `(((1-t) Σ01 + t Σ1) Σ_t^{-1} - I) / (1-t)`.
    pub fn matrix_at(&self, t: f64) -> Result<Matrix> {
        self.time_domain().check(t)?;
        Ok(Slice::new(&self.coupling, t, self.noise)?.mat)
    }
}

impl VelocityField for GaussianVelocity {
    fn dim(&self) -> usize {
        self.coupling.dim()
    }

    fn time_domain(&self) -> TimeDomain {
        TimeDomain::with_singular(vec![1.0])
    }

    fn eval_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        check_batch(d, xs, out)?;
        self.time_domain().check(t)?;
        let s = Slice::new(&self.coupling, t, self.noise)?;
        out.par_chunks_mut(d)
            .zip(xs.par_chunks(d))
            .for_each(|(o, x)| s.apply(x, o));
        Ok(())
    }
}

/// Exact field of a Gaussian-mixture coupling: the posterior-weighted
/// combination of the recentred component fields.
#[derive(Debug, Clone)]
pub struct GmmVelocity {
    coupling: GmmJointCoupling,
    log_weights: Vec<f64>,
    noise: f64,
}

impl GmmVelocity {
    pub fn new(coupling: GmmJointCoupling) -> Self {
        let log_weights = coupling.components().iter().map(|(w, _)| w.ln()).collect();
        GmmVelocity {
            coupling,
            log_weights,
            noise: 0.0,
        }
    }

    /// Drift of the Brownian-bridge interpolant, see [`GaussianVelocity`].
    pub fn with_bridge_noise(coupling: GmmJointCoupling, eps: f64) -> Result<Self> {
        check_noise(eps)?;
        let mut v = GmmVelocity::new(coupling);
        v.noise = eps;
        Ok(v)
    }

    pub fn coupling(&self) -> &GmmJointCoupling {
        &self.coupling
    }

    fn slices(&self, t: f64) -> Result<Vec<Slice>> {
        self.coupling
            .components()
            .iter()
            .map(|(_, c)| Slice::new(c, t, self.noise))
            .collect()
    }

    /// Posterior component probabilities of `X_t = x`.
    pub fn weights(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.time_domain().check(t)?;
        let slices = self.slices(t)?;
        let mut logs = vec![0.0; slices.len()];
        softmax_weights(&slices, &self.log_weights, t, x, &mut logs)?;
        Ok(logs)
    }
}

/// Overwrites `buf` with the normalised posterior weights.
fn softmax_weights(
    slices: &[Slice],
    log_w: &[f64],
    t: f64,
    x: &[f64],
    buf: &mut [f64],
) -> Result<()> {
    for ((b, s), lw) in buf.iter_mut().zip(slices).zip(log_w) {
        *b = lw + s.log_density(x);
    }
    let lse = log_sum_exp(buf);
    if !lse.is_finite() {
        return Err(Error::Evaluation(format!(
            "all mixture component likelihoods vanish at t = {t}, x = {x:?}"
        )));
    }
    buf.iter_mut().for_each(|b| *b = (*b - lse).exp());
    Ok(())
}

impl VelocityField for GmmVelocity {
    fn dim(&self) -> usize {
        self.coupling.dim()
    }

    fn time_domain(&self) -> TimeDomain {
        TimeDomain::with_singular(vec![1.0])
    }

    fn eval_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        check_batch(d, xs, out)?;
        self.time_domain().check(t)?;
        let slices = self.slices(t)?;
        let k = slices.len();
        out.par_chunks_mut(d)
            .zip(xs.par_chunks(d))
            .enumerate()
            .try_for_each_init(
                || (vec![0.0; k], vec![0.0; d]),
                |(w, tmp), (i, (o, x))| {
                    softmax_weights(&slices, &self.log_weights, t, x, w)
                        .map_err(|e| Error::at_point(i, e))?;
                    o.fill(0.0);
                    for (s, wk) in slices.iter().zip(w.iter()) {
                        s.apply(x, tmp);
                        for r in 0..d {
                            o[r] += wk * tmp[r];
                        }
                    }
                    Ok(())
                },
            )
    }
}
