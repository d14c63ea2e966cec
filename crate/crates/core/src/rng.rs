//! Deterministic random substreams.
//!
//! Every stochastic operation draws from a ChaCha stream keyed on a tuple of
//! integers (run seed, step, coordinate, ...). Keys are mixed with splitmix64,
//! so the value seen by one coordinate never depends on how many draws another
//! coordinate made or in which order coordinates were processed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of stream keys into a single 64-bit seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x5EED_0F_F10A);
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0xA5A5_A5A5)));
    }
    h
}

pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}

/// Draws an index from unnormalized nonnegative weights. `total` must be the
/// sum of `weights` and positive.
pub fn sample_weighted<R: Rng>(rng: &mut R, weights: &[f64], total: f64) -> usize {
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Standard normal draw via Box-Muller.
pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
