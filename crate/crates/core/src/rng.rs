//! Named random streams derived from one 64-bit seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATASET: &str = "dataset";
pub const INIT: &str = "init";
pub const MISREPORTS: &str = "misreports";
pub const SCHEDULER: &str = "scheduler";
pub const SHUFFLE: &str = "shuffle";
pub const VALIDATION: &str = "validation";
pub const TEST: &str = "test";

/// Splits a master seed into independent ChaCha streams keyed by name, so a
/// component can be re-seeded without disturbing the others.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        SeedStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
