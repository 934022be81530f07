//! Counter-based, splittable random streams.
//!
//! A [`StreamKey`] names a stream; child streams are derived by hashing a tag
//! into the key, so every node of a derivation (or every sample of a dataset)
//! owns an independent stream that does not depend on evaluation order.
//! [`CounterRng`] turns a key into a sequence by hashing `(key, counter)`,
//! in the style of SplitMix64.

use rand::RngCore;
use serde::{Deserialize, Serialize};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const TAG_MULT: u64 = 0xD605_BBB5_8C8A_BBF5;

/// SplitMix64 / Stafford variant 13 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Identifier of an independent random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey(pub u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(mix64(seed ^ 0x5EED_0F5B_4D31_A7C3))
    }

    /// Child stream for `tag`. Distinct tags give unrelated keys.
    #[inline]
    pub fn derive(self, tag: u64) -> Self {
        let t = mix64(tag.wrapping_add(1).wrapping_mul(TAG_MULT));
        StreamKey(mix64(self.0.rotate_left(17) ^ t))
    }

    /// Derive along a path of tags.
    pub fn path(self, tags: &[u64]) -> Self {
        tags.iter().fold(self, |k, &t| k.derive(t))
    }

    pub fn rng(self) -> CounterRng {
        CounterRng::new(self)
    }
}

/// Stateless generator: the `i`-th output is a hash of `(key, i)`.
#[derive(Clone, Debug)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(key: StreamKey) -> Self {
        CounterRng { key: key.0, counter: 0 }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Jump to an absolute position in the stream.
    pub fn seek(&mut self, counter: u64) {
        self.counter = counter;
    }
}

impl RngCore for CounterRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
