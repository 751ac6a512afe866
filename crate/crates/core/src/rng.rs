//! Named, seed-derived random substreams.
//!
//! Every draw in the simulator comes from a ChaCha stream keyed by the run
//! seed, a stream tag, and a few integer coordinates (day, traveler, trip).
//! Two runs that differ only in, say, the toll profile therefore see exactly
//! the same uniforms for the same choice situation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags. Changing one component's consumption never shifts another's.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Network = 1,
    Population = 2,
    Choice = 3,
    Optimizer = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a 64-bit key from the seed, a stream tag and coordinates.
pub fn derive_key(seed: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &c in coords {
        h = splitmix64(h ^ c.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}

pub fn substream(seed: u64, stream: Stream, coords: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_key(seed, stream, coords))
}
