//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit `u64` seed. The generator is
//! ChaCha8 (`rand_chacha::ChaCha8Rng`), which produces the same stream on
//! every platform.
//!
//! Split rule: work that is parallelised over rows is cut into chunks of
//! [`CHUNK_ROWS`] rows, and chunk `k` draws from `stream(seed, k)`, i.e. the
//! ChaCha8 generator keyed by `seed` with its stream id set to `k`. Results
//! therefore do not depend on the number of worker threads. Independent
//! sub-tasks (iteration steps, noise draws, permutations) obtain their own
//! seed via [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Rows per independent random stream.
pub const CHUNK_ROWS: usize = 4096;

pub type Rng = ChaCha8Rng;

/// Generator for stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 mix of `seed` and `tag`; used to derive sub-seeds.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n * d` i.i.d. standard normals laid out row-major, chunked per the split rule.
pub fn standard_normals(n: usize, d: usize, seed: u64) -> Vec<f64> {
    use rayon::prelude::*;
    let mut out = vec![0.0; n * d];
    if d == 0 {
        return out;
    }
    out.par_chunks_mut(CHUNK_ROWS * d)
        .enumerate()
        .for_each(|(k, chunk)| {
            let mut rng = stream(seed, k as u64);
            for v in chunk.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        });
    out
}

/// Uniform draws in `[0, 1)`, chunked per the split rule.
pub fn uniforms(n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng as _;
    let mut out = vec![0.0; n];
    for (k, chunk) in out.chunks_mut(CHUNK_ROWS).enumerate() {
        let mut rng = stream(seed, k as u64);
        for v in chunk.iter_mut() {
            *v = rng.random::<f64>();
        }
    }
    out
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, 0);
    idx.shuffle(&mut rng);
    idx
}
