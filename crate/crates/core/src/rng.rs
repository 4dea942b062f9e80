//! Seeded randomness. Every stochastic component takes an explicit stream
//! so runs are bit-reproducible per seed, independent of call order
//! elsewhere.

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::StandardNormal;

pub type Rng = rand_xoshiro::Xoshiro256PlusPlus;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive an independent RNG stream from a base seed and a path of indices
/// (e.g. [epoch, step, sample]). Stable across thread scheduling.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut s = splitmix64(seed ^ 0x6a09e667f3bcc908);
    for &p in path {
        s = splitmix64(s ^ splitmix64(p.wrapping_add(0x3c6ef372fe94f82b)));
    }
    Rng::seed_from_u64(s)
}

pub fn normal_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (z * std) as f32
        })
        .collect()
}

pub fn uniform(rng: &mut Rng) -> f64 {
    rng.gen::<f64>()
}
