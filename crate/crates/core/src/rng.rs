//! Seedable counter-based random streams.
//!
//! Every [`Rng`] is a ChaCha8 keystream identified by `(seed, stream)`.
//! [`Rng::split`] derives a child stream from the parent's identity and a
//! key, never from the parent's position, so per-sample or per-class
//! streams come out the same no matter how work is scheduled.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        let mut bytes = [0u8; 32];
        let mut x = seed;
        for chunk in bytes.chunks_exact_mut(8) {
            x = splitmix64(x);
            chunk.copy_from_slice(&x.to_le_bytes());
        }
        Rng { inner: ChaCha8Rng::from_seed(bytes) }
    }

    /// Independent child stream keyed on `key`.
    pub fn split(&self, key: u64) -> Rng {
        let mut inner = ChaCha8Rng::from_seed(self.inner.get_seed());
        let parent = self.inner.get_stream();
        inner.set_stream(splitmix64(parent ^ splitmix64(key.wrapping_add(0x5851_F42D_4C95_7F2D))));
        Rng { inner }
    }

    /// Child stream keyed on a pair, e.g. `(sample index, chunk index)`.
    pub fn split2(&self, a: u64, b: u64) -> Rng {
        self.split(a).split(b)
    }

    pub fn state(&self) -> RngState {
        RngState { seed: self.inner.get_seed(), stream: self.inner.get_stream(), word_pos: self.inner.get_word_pos() }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Rng { inner }
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}
