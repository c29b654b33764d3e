//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `seed` (expanded with the
//! PCG-based `seed_from_u64` of `rand_core`) and positioned on the ChaCha
//! stream `stream_id`. Both are fixed algorithms, so draws are identical
//! across runs and platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Stream labels used across the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const DATA: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const DIRECTIONS: u64 = 6;
    pub const PROBE: u64 = 7;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// A child stream with the same seed and a stream id derived from this
    /// one and `label`.
    pub fn derive(&self, label: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(label)),
        }
    }

    pub fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    pub fn standard_normals(&self, n: usize) -> Vec<f64> {
        let mut rng = self.generator();
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}
