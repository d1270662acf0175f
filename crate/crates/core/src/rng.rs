//! Seeded random streams.
//!
//! Every consumer of randomness draws from a ChaCha8 generator keyed by the
//! run seed and positioned on its own stream. The stream id is the 64-bit
//! FNV-1a hash of a purpose tag (e.g. `"init/fcn.down1.0.weight"`,
//! `"shuffle"`) mixed with an index (epoch, sample, member). ChaCha8 output is
//! specified bit-for-bit, so identical seeds give identical sequences on every
//! platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Root of all randomness for one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedSource {
    seed: u64,
}

impl SeedSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `(tag, index)`.
    pub fn stream(&self, tag: &str, index: u64) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let id = fnv1a(tag.as_bytes()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        rng.set_stream(id);
        rng
    }

    /// A child source, e.g. one per ensemble member.
    pub fn derive(&self, tag: &str, index: u64) -> SeedSource {
        use rand::RngCore;
        SeedSource::new(self.stream(tag, index).next_u64())
    }
}
