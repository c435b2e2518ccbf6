//! Monte Carlo analysis of the normalization schemes under standard-normal
//! raw affinities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::NormScheme;
use crate::error::{Error, Result};

/// Samples per shard. Shard `i` draws from ChaCha stream `i` of the master
/// seed, so the estimate does not depend on how shards are scheduled.
const SHARD: usize = 1 << 16;

/// Fraction of iid `N(0, 1)` K-vectors for which `scheme` takes its
/// renormalization branch.
pub fn mc_normalization_probability(
    k: usize,
    scheme: &NormScheme,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Config("samples must be at least 1".into()));
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    scheme.validate(k)?;
    let shards = samples.div_ceil(SHARD);
    let hits: usize = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(shard as u64);
            let n = SHARD.min(samples - shard * SHARD);
            let mut raw = vec![0.0; k];
            let mut w = vec![0.0; k];
            let mut hits = 0usize;
            for _ in 0..n {
                raw.iter_mut().for_each(|r| *r = rng.sample(StandardNormal));
                if scheme.apply(&raw, None, &mut w).fired {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    Ok(hits as f64 / samples as f64)
}

/// Binomial standard error of a probability estimate; at most `0.5 / sqrt(n)`.
pub fn mc_std_error(p: f64, samples: usize) -> f64 {
    (p * (1.0 - p) / samples as f64).sqrt()
}

/// Normalized `(w1, w2)` pairs for the two-neighbor case, raw values drawn
/// from `N(0, 1)`.
pub fn sample_normalized_pairs(
    scheme: &NormScheme,
    samples: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    scheme.validate(2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = [0.0; 2];
    Ok((0..samples)
        .map(|_| {
            let raw = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            scheme.apply(&raw, None, &mut w);
            (w[0], w[1])
        })
        .collect())
}
