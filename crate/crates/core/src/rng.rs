use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type ModelRng = ChaCha8Rng;

/// Fixed offsets used to fan a single run seed out to subsystems.
pub mod stream {
    pub const SYNTH: u64 = 1;
    pub const FOLDS: u64 = 2;
    pub const ENCODER_INIT: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const HEAD_INIT: u64 = 5;
    pub const HEAD_TRAIN: u64 = 6;
    pub const BASELINE_INIT: u64 = 7;
    pub const BASELINE_TRAIN: u64 = 8;
}

/// `seed + offset`, the documented splitting rule for run seeds.
pub fn derive_seed(seed: u64, offset: u64) -> u64 {
    seed.wrapping_add(offset)
}

pub fn rng(seed: u64) -> ModelRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw (Box-Muller).
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

pub fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
