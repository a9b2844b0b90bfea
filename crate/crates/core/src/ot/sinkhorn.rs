//! Entropic optimal transport by log-domain Sinkhorn iterations.

use rayon::prelude::*;

use crate::distributions::log_sum_exp;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{PlanRepr, TransportPlan};

/// Result of a Sinkhorn run. `plan.cost` is `<P, C>` without the entropy term.
#[derive(Debug, Clone)]
pub struct SinkhornResult {
    pub plan: TransportPlan,
    pub converged: bool,
    pub iterations: usize,
    /// L1 violation of the row marginal at exit (columns are exact after each sweep).
    pub marginal_error: f64,
}

/// Sinkhorn with uniform marginals.
pub fn sinkhorn(cost: &Matrix, eps: f64, max_iter: usize, tol: f64) -> Result<SinkhornResult> {
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("empty cost matrix".into()));
    }
    let a = vec![1.0 / n as f64; n];
    let b = vec![1.0 / m as f64; m];
    sinkhorn_weighted(cost, &a, &b, eps, max_iter, tol)
}

/// Sinkhorn with explicit marginal weights `a` (rows) and `b` (columns).
pub fn sinkhorn_weighted(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    eps: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SinkhornResult> {
    let (n, m) = cost.shape();
    if a.len() != n || b.len() != m {
        return Err(Error::InvalidArgument("marginal lengths do not match the cost matrix".into()));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    for w in a.iter().chain(b) {
        if !(*w > 0.0) {
            return Err(Error::InvalidArgument("marginal weights must be positive".into()));
        }
    }
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    // row-major copy so both sweeps read contiguous memory
    let c_rows: Vec<f64> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| cost[(i, j)]).collect();
    let c_cols: Vec<f64> = cost.as_slice().to_vec();

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut converged = false;
    let mut iterations = 0;
    let mut marginal_error = f64::INFINITY;

    let update = |pot: &mut [f64], other: &[f64], log_w: &[f64], c: &[f64], len: usize| {
        pot.par_iter_mut().enumerate().for_each_init(
            || vec![0.0; len],
            |buf, (i, p)| {
                let row = &c[i * len..(i + 1) * len];
                for k in 0..len {
                    buf[k] = (other[k] - row[k]) / eps + log_w[k];
                }
                *p = -eps * log_sum_exp(buf);
            },
        );
    };
    let row_error = |f: &[f64], g: &[f64]| -> f64 {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let row = &c_rows[i * m..(i + 1) * m];
                let s: f64 = (0..m)
                    .map(|j| (log_a[i] + log_b[j] + (f[i] + g[j] - row[j]) / eps).exp())
                    .sum();
                (s - a[i]).abs()
            })
            .sum()
    };

    while iterations < max_iter {
        update(&mut f, &g, &log_b, &c_rows, m);
        update(&mut g, &f, &log_a, &c_cols, n);
        iterations += 1;
        if iterations % 10 == 0 || iterations == max_iter {
            marginal_error = row_error(&f, &g);
            if marginal_error < tol {
                converged = true;
                break;
            }
        }
    }

    let mut plan = Matrix::zeros(n, m);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = (log_a[i] + log_b[j] + (f[i] + g[j] - cost[(i, j)]) / eps).exp();
            plan[(i, j)] = p;
            total += p * cost[(i, j)];
        }
    }
    Ok(SinkhornResult {
        plan: TransportPlan {
            repr: PlanRepr::Dense(plan),
            cost: total,
        },
        converged,
        iterations,
        marginal_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(r: &SinkhornResult) -> &Matrix {
        match &r.plan.repr {
            PlanRepr::Dense(p) => p,
            _ => unreachable!(),
        }
    }

    #[test]
    fn symmetric_two_by_two() {
        let c = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let r = sinkhorn(&c, 0.1, 10_000, 1e-12).unwrap();
        assert!(r.converged);
        let p = dense(&r);
        assert!((p[(0, 1)] - p[(1, 0)]).abs() < 1e-12);
        assert!((p[(0, 0)] - p[(1, 1)]).abs() < 1e-12);
        assert!(p[(0, 0)] > p[(0, 1)]);
    }

    #[test]
    fn large_eps_gives_product_plan() {
        let c = Matrix::from_fn(5, 4, |i, j| ((i * 3 + j * 7) % 5) as f64 + 0.5);
        let r = sinkhorn(&c, 1e4, 1000, 1e-12).unwrap();
        let indep: f64 = c.iter().sum::<f64>() / 20.0;
        assert!((r.plan.cost - indep).abs() / indep < 1e-3);
    }

    #[test]
    fn non_convergence_is_flagged() {
        let c = Matrix::from_fn(30, 20, |i, j| ((i as f64) * 0.37 - (j as f64) * 0.61).sin().powi(2));
        let r = sinkhorn(&c, 1e-2, 3, 1e-14).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
    }

    #[test]
    fn rejects_bad_input() {
        let c = Matrix::zeros(2, 2);
        assert!(sinkhorn(&c, 0.0, 10, 1e-9).is_err());
        let mut c = Matrix::zeros(2, 2);
        c[(0, 0)] = f64::NAN;
        assert!(sinkhorn(&c, 1.0, 10, 1e-9).is_err());
    }
}
