//! Seeded random streams.
//!
//! Every source of randomness is derived from one global seed and a named
//! stream, so each component can be reproduced independently of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named sub-streams of a global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Data,
    Init,
    Training,
    Sampling,
    Purification,
    Probes,
    Evaluation,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Training => 3,
            Stream::Sampling => 4,
            Stream::Purification => 5,
            Stream::Probes => 6,
            Stream::Evaluation => 7,
        }
    }
}

/// A generator for `stream` of `seed`.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// A generator for `stream` of `seed`, further split by an index (one per
/// window, per sample, ...).
pub fn substream(seed: u64, stream: Stream, index: u64) -> Rng {
    // splitmix64 finaliser to decorrelate neighbouring indices
    let mut z = seed ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    self::stream(z, stream)
}
