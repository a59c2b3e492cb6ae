//! Named, splittable random streams.
//!
//! A [`Stream`] is a 64-bit key. Child streams are derived by mixing the
//! parent key with a label and an index, so every call site can own an
//! independent sequence regardless of evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Stream(u64);

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream(splitmix(seed))
    }

    pub fn key(self) -> u64 {
        self.0
    }

    /// Child stream identified by `(label, index)`.
    pub fn split(self, label: &str, index: u64) -> Stream {
        Stream(splitmix(self.0 ^ splitmix(fnv1a(label) ^ splitmix(index))))
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut z = self.0;
        for chunk in seed.chunks_mut(8) {
            z = splitmix(z);
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
