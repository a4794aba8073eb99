//! Counter-based seeding: every logical stream (sample, epoch, layer, ...)
//! gets its own generator derived from the run seed, so results never depend
//! on the order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams for different purposes disjoint.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Pair = 4,
    KMeans = 5,
    Subsample = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ stream as u64);
    h = splitmix(h ^ a);
    splitmix(h ^ b.rotate_left(17))
}

pub fn stream(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream, a, b))
}
