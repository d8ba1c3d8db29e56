//! Counter-based random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha stream addressed
//! by `(seed, domain, step, index)`. Two draws that differ in any coordinate
//! use statistically independent streams, and a draw never depends on how many
//! numbers some other stream has consumed. This is what lets rollouts run in
//! any order on any number of workers and still reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Purpose tag mixed into the stream key so that, e.g., control sampling and
/// environment noise never share a stream even under equal seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u32)]
pub enum Domain {
    ControlSamples = 1,
    Disturbances = 2,
    Downsample = 3,
    Prior = 4,
    Environment = 5,
    Scenario = 6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngKey {
    pub seed: u64,
    pub step: u64,
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        Self { seed, step: 0 }
    }

    pub fn at_step(self, step: u64) -> Self {
        Self { step, ..self }
    }

    /// Independent generator for stream `index` of `domain` at this key.
    pub fn stream(&self, domain: Domain, index: u64) -> ChaCha8Rng {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&self.seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&self.step.to_le_bytes());
        bytes[16..20].copy_from_slice(&(domain as u32).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(bytes);
        rng.set_stream(index);
        rng
    }
}

/// Derives a child seed from a parent seed and an index (SplitMix64 finalizer).
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    let mut z = parent
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
