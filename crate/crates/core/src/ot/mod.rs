//! Optimal transport oracles and metrics under the squared Euclidean cost.

pub mod assignment;
pub mod energy;
pub mod sinkhorn;

pub use energy::{energy_distance, energy_null_threshold};
pub use sinkhorn::{sinkhorn, sinkhorn_weighted, SinkhornResult};

use crate::coupling::ParticleCoupling;
use crate::distributions::{GaussianDist, ParticleSet};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SpdInverse, Vector};

/// Default size limit of [`discrete_ot_exact`].
pub const MAX_EXACT_POINTS: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub enum PlanRepr {
    /// `assignment[i]` is the target index of source point `i`.
    Assignment(Vec<usize>),
    /// Nonnegative `n x m` matrix whose margins are the point weights.
    Dense(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub repr: PlanRepr,
    pub cost: f64,
}

impl TransportPlan {
    pub fn assignment(&self) -> Option<&[usize]> {
        match &self.repr {
            PlanRepr::Assignment(a) => Some(a),
            PlanRepr::Dense(_) => None,
        }
    }

    /// Pair the sources with their assigned targets. Only for assignment plans.
    pub fn to_coupling(&self, s0: &ParticleSet, s1: &ParticleSet) -> Result<ParticleCoupling> {
        let a = self
            .assignment()
            .ok_or_else(|| Error::InvalidArgument("plan is not an assignment".into()))?;
        ParticleCoupling::new(s0.clone(), s1.select(a))
    }
}

/// Mean of `|x1_i - x0_i|^2` over the rows of a coupling.
pub fn transport_cost(coupling: &ParticleCoupling) -> f64 {
    let n = coupling.len().max(1) as f64;
    coupling
        .x0()
        .as_slice()
        .iter()
        .zip(coupling.x1().as_slice())
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        / n
}

fn check_pair(s0: &ParticleSet, s1: &ParticleSet) -> Result<()> {
    if s0.len() != s1.len() {
        return Err(Error::InvalidArgument(format!(
            "point counts differ: {} vs {}",
            s0.len(),
            s1.len()
        )));
    }
    if s0.dim() != s1.dim() {
        return Err(Error::InvalidArgument("point dimensions differ".into()));
    }
    if s0.is_empty() {
        return Err(Error::InvalidArgument("empty point sets".into()));
    }
    Ok(())
}

fn sorted_order(s: &ParticleSet) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&i, &j| s.row(i)[0].total_cmp(&s.row(j)[0]).then(i.cmp(&j)));
    idx
}

/// Monotone coupling of two 1-D samples: the i-th order statistics are paired.
pub fn quantile_ot_1d(s0: &ParticleSet, s1: &ParticleSet) -> Result<TransportPlan> {
    check_pair(s0, s1)?;
    if s0.dim() != 1 {
        return Err(Error::InvalidArgument("quantile coupling needs d = 1".into()));
    }
    let o0 = sorted_order(s0);
    let o1 = sorted_order(s1);
    let mut assignment = vec![0; s0.len()];
    let mut cost = 0.0;
    for (&i, &j) in o0.iter().zip(&o1) {
        assignment[i] = j;
        let t = s1.row(j)[0] - s0.row(i)[0];
        cost += t * t;
    }
    Ok(TransportPlan {
        repr: PlanRepr::Assignment(assignment),
        cost: cost / s0.len() as f64,
    })
}

/// Squared 2-Wasserstein distance between Gaussians.
pub fn bures_wasserstein(g0: &GaussianDist, g1: &GaussianDist) -> Result<f64> {
    if g0.dim() != g1.dim() {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    let r0 = linalg::matrix_sqrt_psd(g0.cov())?;
    let mid = linalg::symmetrize(&(&r0 * g1.cov() * &r0));
    let cross = linalg::matrix_sqrt_psd(&mid)?;
    let dm = (g0.mean() - g1.mean()).norm_squared();
    let w = dm + g0.cov().trace() + g1.cov().trace() - 2.0 * cross.trace();
    Ok(w.max(0.0))
}

/// Affine optimal map `T(x) = matrix x + offset` between Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub matrix: Matrix,
    pub offset: Vector,
}

impl AffineMap {
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        linalg::mat_vec_into(&self.matrix, x, out);
        for (o, b) in out.iter_mut().zip(self.offset.iter()) {
            *o += b;
        }
    }

    pub fn apply_set(&self, s: &ParticleSet) -> ParticleSet {
        s.map_rows(|x, out| self.apply(x, out))
    }
}

/// `T(x) = m1 + Σ0^{-1/2} (Σ0^{1/2} Σ1 Σ0^{1/2})^{1/2} Σ0^{-1/2} (x - m0)`.
pub fn gaussian_ot_map(g0: &GaussianDist, g1: &GaussianDist) -> Result<AffineMap> {
    if g0.dim() != g1.dim() {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    let inv = SpdInverse::new(g0.cov())?
        .ok_or_else(|| Error::InvalidArgument("source covariance is singular".into()))?;
    let r0 = linalg::matrix_sqrt_psd(g0.cov())?;
    let mid = linalg::matrix_sqrt_psd(&linalg::symmetrize(&(&r0 * g1.cov() * &r0)))?;
    let matrix = linalg::symmetrize(&(&inv.inv_sqrt * mid * &inv.inv_sqrt));
    let offset = g1.mean() - &matrix * g0.mean();
    Ok(AffineMap { matrix, offset })
}

/// Exact optimal assignment between equally sized clouds, limited to
/// [`MAX_EXACT_POINTS`] points.
pub fn discrete_ot_exact(s0: &ParticleSet, s1: &ParticleSet) -> Result<TransportPlan> {
    discrete_ot_exact_with_limit(s0, s1, MAX_EXACT_POINTS)
}

pub fn discrete_ot_exact_with_limit(
    s0: &ParticleSet,
    s1: &ParticleSet,
    max_points: usize,
) -> Result<TransportPlan> {
    check_pair(s0, s1)?;
    if s0.len() > max_points {
        return Err(Error::Resource(format!(
            "exact assignment on {} points exceeds the limit of {max_points}; subsample first",
            s0.len()
        )));
    }
    let c = assignment::SquaredEuclidean::new(s0.as_slice(), s1.as_slice(), s0.dim());
    let a = assignment::solve(&c);
    let cost = assignment::assignment_cost(&c, &a) / s0.len() as f64;
    Ok(TransportPlan {
        repr: PlanRepr::Assignment(a),
        cost,
    })
}

/// Squared Euclidean cost matrix between two clouds.
pub fn squared_distance_matrix(s0: &ParticleSet, s1: &ParticleSet) -> Matrix {
    Matrix::from_fn(s0.len(), s1.len(), |i, j| {
        s0.row(i)
            .iter()
            .zip(s1.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn set1(v: &[f64]) -> ParticleSet {
        ParticleSet::new(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn quantile_examples() {
        let a = set1(&[3.0, 1.0, 2.0]);
        let b = set1(&[6.0, 4.0, 5.0]);
        let p = quantile_ot_1d(&a, &b).unwrap();
        assert_eq!(p.cost, 9.0);
        assert_eq!(p.assignment().unwrap(), &[0, 1, 2]);
        let s = GaussianDist::standard(1).sample(1000, 1).unwrap();
        let shifted = s.map_rows(|x, o| o[0] = x[0] + 3.0);
        let p = quantile_ot_1d(&s, &shifted).unwrap();
        assert!((p.cost - 9.0).abs() < 1e-9);
        assert!(quantile_ot_1d(&a, &set1(&[1.0])).is_err());
    }

    #[test]
    fn bures_examples() {
        let g0 = GaussianDist::diagonal(vec![0.0, 0.0], &[1.0, 4.0]).unwrap();
        let g1 = GaussianDist::diagonal(vec![0.0, 0.0], &[9.0, 1.0]).unwrap();
        assert!((bures_wasserstein(&g0, &g1).unwrap() - 5.0).abs() < 1e-12);
        assert!(bures_wasserstein(&g0, &g0).unwrap().abs() < 1e-12);
        let a = GaussianDist::isotropic(vec![0.0, 0.0], 1.01).unwrap();
        let b = GaussianDist::standard(2);
        let expect = 2.0 * (1.01f64.sqrt() - 1.0).powi(2);
        assert!((bures_wasserstein(&a, &b).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn gaussian_map_examples() {
        let g0 = GaussianDist::diagonal(vec![0.0, 0.0], &[1.0, 4.0]).unwrap();
        let g1 = GaussianDist::diagonal(vec![0.0, 0.0], &[9.0, 1.0]).unwrap();
        let t = gaussian_ot_map(&g0, &g1).unwrap();
        let expect = Matrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.5]);
        assert!((&t.matrix - expect).abs().max() < 1e-12);
        let id = gaussian_ot_map(&g0, &g0).unwrap();
        assert!((&id.matrix - Matrix::identity(2, 2)).abs().max() < 1e-12);
        let sing = GaussianDist::diagonal(vec![0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(matches!(gaussian_ot_map(&sing, &g1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn exact_ot_on_permutation_is_zero() {
        let s = GaussianDist::standard(2).sample(200, 4).unwrap();
        let perm = rng::permutation(200, 5);
        let p = discrete_ot_exact(&s, &s.select(&perm)).unwrap();
        assert_eq!(p.cost, 0.0);
    }

    #[test]
    fn size_guard() {
        let s = GaussianDist::standard(1).sample(11, 4).unwrap();
        assert!(matches!(
            discrete_ot_exact_with_limit(&s, &s, 10),
            Err(Error::Resource(_))
        ));
    }
}
