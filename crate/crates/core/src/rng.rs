//! Deterministic RNG streams.
//!
//! Every random decision in a run draws from a ChaCha stream whose seed is a
//! pure function of the master seed and a purpose tag, so results do not
//! depend on thread scheduling or on how many draws another client made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Mixed into the seed so that, for example, the
/// client-sampling stream of round 3 never collides with client 3's stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init,
    Data,
    Partition,
    Sampling { round: u64 },
    Client { client: u64, round: u64 },
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn mix(acc: u64, word: u64) -> u64 {
    splitmix64(acc ^ splitmix64(word))
}

pub fn derive_seed(master: u64, purpose: Purpose) -> u64 {
    let acc = mix(0x6665_646d_7071, master);
    match purpose {
        Purpose::Init => mix(acc, 1),
        Purpose::Data => mix(acc, 2),
        Purpose::Partition => mix(acc, 3),
        Purpose::Sampling { round } => mix(mix(acc, 4), round),
        Purpose::Client { client, round } => mix(mix(mix(acc, 5), client), round),
    }
}

pub fn stream(master: u64, purpose: Purpose) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, purpose))
}
