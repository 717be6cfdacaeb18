//! Deterministic random streams.
//!
//! Every random draw in the simulator comes from a ChaCha stream keyed by the
//! master seed plus a small tuple of tags (purpose, round, device, ...). Two
//! computations that use different tags never share a stream, so results do
//! not depend on evaluation order or on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Synthetic = 1,
    Partition = 2,
    Coding = 3,
    DeviceBatch = 4,
    ServerBatch = 5,
    Channel = 6,
    Init = 7,
    Fleet = 8,
    Attack = 9,
    MonteCarlo = 10,
    Econ = 11,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a purpose and an index path into a stream seed.
pub fn derive_seed(master: u64, purpose: Stream, path: &[u64]) -> u64 {
    let mut h = splitmix(master ^ 0x5cf1_u64.rotate_left(48));
    h = splitmix(h ^ purpose as u64);
    for &p in path {
        h = splitmix(h ^ p);
    }
    h
}

pub fn stream(master: u64, purpose: Stream, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, purpose, path))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
