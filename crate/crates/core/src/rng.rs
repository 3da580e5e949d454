//! Seed splitting. Every consumer of randomness asks for a stream keyed by
//! (run seed, domain, index); streams are independent ChaCha8 keystreams, so
//! adding a consumer never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named consumers of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Weights,
    Scene,
    Prior,
    RandomBaseline,
    Fuzz,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Weights => 0x5745_4947,
            Domain::Scene => 0x5343_454e,
            Domain::Prior => 0x5052_494f,
            Domain::RandomBaseline => 0x5241_4e44,
            Domain::Fuzz => 0x4655_5a5a,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(domain.tag() ^ splitmix64(index)));
    rng
}
