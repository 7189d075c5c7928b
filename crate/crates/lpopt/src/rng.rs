//! Counter-based random streams.
//!
//! Stochastic rounding draws one uniform per tensor element. Deriving that
//! uniform from a key and the element index (instead of advancing a stateful
//! generator) keeps runs replayable and makes parallel and sequential
//! execution produce identical bits. Keys are built from
//! (seed, tensor name, step, lane) so every tensor and every step gets an
//! independent stream.

/// Key identifying one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey(splitmix64(seed ^ 0x9e37_79b9_7f4a_7c15))
    }

    /// Fold a tensor name into the key (FNV-1a, stable across platforms).
    pub fn with_name(self, name: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        StreamKey(splitmix64(self.0 ^ h))
    }

    /// Fold an integer (step counter, lane id, trial index) into the key.
    pub fn with(self, v: u64) -> Self {
        StreamKey(splitmix64(self.0.wrapping_add(splitmix64(v))))
    }

    /// Uniform sample in [0, 1) for counter `i`.
    pub fn uniform(self, i: u64) -> f64 {
        let bits = splitmix64(self.0 ^ splitmix64(i.wrapping_mul(0xa076_1d64_78bd_642f)));
        // 53 high bits -> [0, 1)
        (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

/// SplitMix64 finalizer; bijective on u64.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
