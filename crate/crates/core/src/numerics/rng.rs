use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Counter-based PRNG splittable into named streams.
///
/// Each stream is a ChaCha8 keystream selected by (seed, FNV-1a(name), index),
/// so "init", "data" and "dropout" draws never interleave and two runs that
/// share a seed see identical data order regardless of model shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        SeedStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        self.substream(name, 0)
    }

    /// Independent shard of a named stream (e.g. one per worker or instance).
    pub fn substream(&self, name: &str, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name.as_bytes()) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
