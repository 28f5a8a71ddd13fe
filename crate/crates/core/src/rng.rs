//! Seeded random streams.
//!
//! Every stream is ChaCha with 8 rounds, keyed by the run seed (the 64-bit
//! seed in little-endian order in the first 8 key bytes, the remaining 24 key
//! bytes zero) and selecting the 64-bit ChaCha stream id from [`Stream`]. The
//! derived draws are:
//!
//! * `uniform()`: `(next_u64 >> 11) * 2^-53`, a real in `[0, 1)`.
//! * `below(n)`: Lemire's multiply-shift with rejection on `next_u64`.
//! * `normal()`: Box-Muller from two `uniform()` draws, cosine branch only.
//! * `shuffle()`: Fisher-Yates from the last index down, `j = below(i + 1)`.
//!
//! The layout is fixed so that another implementation keyed the same way
//! reproduces datasets, corruptions and shuffles exactly.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// One independent stream per purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Corruption = 1,
    Init = 2,
    Shuffle = 3,
    Subset = 4,
    Synth = 5,
    Probe = 6,
}

#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream as u64);
        Self { inner }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform real in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let mut m = (self.next_u64() as u128) * (n as u128);
        let mut low = m as u64;
        if low < n {
            let threshold = n.wrapping_neg() % n;
            while low < threshold {
                m = (self.next_u64() as u128) * (n as u128);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1]
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Position in the stream, in 32-bit words.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn set_position(&mut self, pos: u128) {
        self.inner.set_word_pos(pos);
    }
}
