//! Seeded random number generation.
//!
//! Every stochastic component in the crate draws from an explicitly seeded
//! xoshiro256** generator. The platform default RNG is never used, so the
//! same seed produces the same stream on every platform.

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256StarStar as Rng;

/// Generator for a top-level 64-bit seed.
pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Per-item generator derived as `seed ^ index`, for parallel batch work.
pub fn derived(seed: u64, index: u64) -> Rng {
    Rng::seed_from_u64(seed ^ index)
}
