//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit `&mut SeededRng`. The state is
//! a ChaCha8 stream position, so it can be checkpointed and restored exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose, derived from a master seed.
pub fn derived(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Serializable snapshot of a stream position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn snapshot(rng: &SeededRng) -> RngSnapshot {
    RngSnapshot {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn restore(s: &RngSnapshot) -> SeededRng {
    let mut rng = ChaCha8Rng::from_seed(s.seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos);
    rng
}

pub fn normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Uniform draw from the `d`-dimensional ball of radius `radius`.
pub fn in_ball(rng: &mut SeededRng, d: usize, radius: f64) -> Vec<f64> {
    loop {
        let dir: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
            return dir.into_iter().map(|v| v / n * r).collect();
        }
    }
}

/// Fisher-Yates shuffle driven by our stream.
pub fn shuffle<T>(rng: &mut SeededRng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_restores_stream() {
        let mut a = seeded(7);
        for _ in 0..13 {
            normal(&mut a);
        }
        let snap = snapshot(&a);
        let mut b = restore(&snap);
        for _ in 0..100 {
            assert_eq!(normal(&mut a).to_bits(), normal(&mut b).to_bits());
        }
    }

    #[test]
    fn ball_draws_stay_inside() {
        let mut r = seeded(1);
        for d in [1, 2, 5, 784] {
            for _ in 0..200 {
                let v = in_ball(&mut r, d, 0.03);
                assert!(v.iter().map(|x| x * x).sum::<f64>().sqrt() <= 0.03 + 1e-15);
            }
        }
    }
}
