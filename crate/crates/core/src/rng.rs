use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root generator for a seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for trial `t` of an experiment seeded with `seed`.
///
/// Trials can run in any order (or in parallel) and still draw the same
/// numbers.
pub fn trial(seed: u64, t: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t.wrapping_add(1));
    rng
}
