//! Deterministic RNG stream derivation.
//!
//! Parallel work units (imputation streams, bootstrap resamples, MCMC
//! chains, simulation replications) each get their own ChaCha12 generator
//! seeded from `(seed, stream)` through a splitmix64 chain. Results are
//! therefore independent of scheduling, worker count, and of which other
//! units run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// One step of the splitmix64 sequence; advances `state` and returns the
/// next output. Standard constants (Steele, Lea & Flood).
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collision-resistant mix of a base seed and a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut state = seed;
    let a = splitmix64(&mut state);
    state = a ^ stream;
    let b = splitmix64(&mut state);
    state = b;
    splitmix64(&mut state)
}

/// Independent generator for stream `stream` of base seed `seed`.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(seed, stream))
}
