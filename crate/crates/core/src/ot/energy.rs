//! Energy distance between empirical distributions and its permutation null.

use rayon::prelude::*;

use crate::distributions::ParticleSet;
use crate::error::{Error, Result};
use crate::rng;

/// Inputs larger than this are subsampled before the all-pairs sums.
pub const MAX_POINTS: usize = 10_000;
/// Per-side size used for the permutation null.
pub const NULL_POINTS: usize = 1_000;
pub const NULL_PERMUTATIONS: usize = 200;

#[inline]
fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn mean_cross(a: &ParticleSet, b: &ParticleSet) -> f64 {
    let s: f64 = (0..a.len())
        .into_par_iter()
        .map(|i| {
            let x = a.row(i);
            b.rows().map(|y| dist(x, y)).sum::<f64>()
        })
        .sum();
    s / (a.len() as f64 * b.len() as f64)
}

fn mean_within(a: &ParticleSet) -> f64 {
    let n = a.len();
    let s: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = a.row(i);
            ((i + 1)..n).map(|j| dist(x, a.row(j))).sum::<f64>()
        })
        .sum();
    2.0 * s / (n as f64 * n as f64)
}

fn subsample(s: &ParticleSet, cap: usize, seed: u64) -> std::borrow::Cow<'_, ParticleSet> {
    if s.len() <= cap {
        std::borrow::Cow::Borrowed(s)
    } else {
        let mut idx = rng::permutation(s.len(), seed);
        idx.truncate(cap);
        std::borrow::Cow::Owned(s.select(&idx))
    }
}

fn check(a: &ParticleSet, b: &ParticleSet) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("energy distance of an empty set".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// V-statistic energy distance
/// `sqrt(2 E|a-b| - E|a-a'| - E|b-b'|)`, clamped at zero under the root.
///
/// Sets with more than [`MAX_POINTS`] rows are subsampled with a fixed seed.
pub fn energy_distance(a: &ParticleSet, b: &ParticleSet) -> Result<f64> {
    check(a, b)?;
    let a = subsample(a, MAX_POINTS, 0xA5A5);
    let b = subsample(b, MAX_POINTS, 0x5A5A);
    let e = 2.0 * mean_cross(&a, &b) - mean_within(&a) - mean_within(&b);
    Ok(e.max(0.0).sqrt())
}

/// Quantile `level` of the energy distance under the null `a ~ b`, from a
/// seeded permutation test.
///
/// The test runs on at most [`NULL_POINTS`] rows per side. The squared
/// statistic scales like `1/n_a + 1/n_b`, so the threshold is rescaled to the
/// sizes that [`energy_distance`] actually uses.
pub fn energy_null_threshold(
    a: &ParticleSet,
    b: &ParticleSet,
    permutations: usize,
    level: f64,
    seed: u64,
) -> Result<f64> {
    check(a, b)?;
    if !(0.0..1.0).contains(&level) || permutations == 0 {
        return Err(Error::InvalidArgument("need level in [0,1) and permutations > 0".into()));
    }
    let sa = subsample(a, NULL_POINTS, rng::derive_seed(seed, 1));
    let sb = subsample(b, NULL_POINTS, rng::derive_seed(seed, 2));
    let (na, nb) = (sa.len(), sb.len());
    let n = na + nb;
    let pooled: Vec<&[f64]> = sa.rows().chain(sb.rows()).collect();
    let mut dm = vec![0.0; n * n];
    dm.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for j in 0..n {
            row[j] = dist(pooled[i], pooled[j]);
        }
    });
    let total: f64 = dm.iter().sum();
    let mut stats: Vec<f64> = (0..permutations)
        .into_par_iter()
        .map(|k| {
            let perm = rng::permutation(n, rng::derive_seed(seed, 100 + k as u64));
            let mut in_a = vec![false; n];
            for &p in &perm[..na] {
                in_a[p] = true;
            }
            let (mut saa, mut sbb) = (0.0, 0.0);
            for i in 0..n {
                let row = &dm[i * n..(i + 1) * n];
                for j in 0..n {
                    match (in_a[i], in_a[j]) {
                        (true, true) => saa += row[j],
                        (false, false) => sbb += row[j],
                        _ => {}
                    }
                }
            }
            let sab = (total - saa - sbb) / 2.0;
            let e2 = 2.0 * sab / (na * nb) as f64
                - saa / (na * na) as f64
                - sbb / (nb * nb) as f64;
            e2.max(0.0)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let q = stats[((level * permutations as f64).ceil() as usize).min(permutations - 1)];
    let used = |len: usize| len.min(MAX_POINTS) as f64;
    let scale = (1.0 / used(a.len()) + 1.0 / used(b.len())) / (1.0 / na as f64 + 1.0 / nb as f64);
    Ok((q * scale).sqrt())
}
