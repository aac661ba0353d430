//! Deterministic seed derivation for parallel simulation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One round of the splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a given source stream and replication, derived from a base seed.
///
/// Distinct `(stream, replication)` pairs give statistically independent
/// seeds; the mapping does not depend on thread scheduling.
pub fn sub_seed(base: u64, stream: u64, replication: u64) -> u64 {
    let a = splitmix64(base ^ stream.wrapping_mul(GOLDEN));
    splitmix64(a ^ splitmix64(replication.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
