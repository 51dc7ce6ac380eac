use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Platform-independent seeded generator used for every weight init.
pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard deviation of the normal weight init.
pub const INIT_STD: f64 = 0.02;
