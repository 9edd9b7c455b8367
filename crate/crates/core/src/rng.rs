//! Counter-based random streams.
//!
//! Every consumer of randomness asks for its own stream keyed by
//! `(seed, domain, a, b)`; typically `a` is a trial id and `b` an epoch.
//! Streams are ChaCha8 keystreams, so drawing from one stream never
//! perturbs another and results do not depend on processing order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Named purposes; each gets a disjoint family of stream ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Init,
    Shuffle,
    Augment,
    TimeMask,
    Dropout,
    Synth,
    Drift,
    Adapt,
    Bench,
    Test,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Init => 1,
            Domain::Shuffle => 2,
            Domain::Augment => 3,
            Domain::TimeMask => 4,
            Domain::Dropout => 5,
            Domain::Synth => 6,
            Domain::Drift => 7,
            Domain::Adapt => 8,
            Domain::Test => 9,
            Domain::Bench => 10,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Returns the stream for `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = splitmix64(splitmix64(splitmix64(domain.tag()) ^ a) ^ b.rotate_left(32));
    rng.set_stream(id);
    rng
}
