//! Seeded, splittable random number generation.
//!
//! A single `Prng` is threaded explicitly through every stochastic
//! operation. The generator is counter-based (ChaCha8), so its full state
//! is `(seed, stream, word position)` and can be stored in a checkpoint
//! and restored bit-exactly. Independent streams are obtained either by
//! [`Prng::split`] (consumes entropy from the parent) or by
//! [`Prng::derive`] (a pure function of a base seed and a path of
//! indices, used where a stream must be reconstructible — per-epoch
//! shuffles, per-image translation chains).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Debug, Clone)]
pub struct Prng {
    inner: ChaCha8Rng,
}

/// Serialisable generator state.
#[derive(Debug, Clone, PartialEq)]
pub struct PrngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for `(base, index)` pairs, used to give each item
/// in a batch job its own stream.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut state = base ^ 0x6A09_E667_F3BC_C909;
    let a = splitmix64(&mut state);
    state ^= index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    a ^ splitmix64(&mut state)
}

impl Prng {
    pub fn seed_from(seed: u64) -> Self {
        Prng::derive(seed, &[])
    }

    /// Deterministic stream for `(seed, path...)`, independent of any
    /// generator's current position.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let mut state = seed ^ 0xD1F5_4A2C_9B3E_8071;
        for &p in path {
            state ^= splitmix64(&mut { p ^ 0xA24B_AED4_963E_E407 });
            splitmix64(&mut state);
            state = state.wrapping_add(p);
        }
        let mut bytes = [0u8; 32];
        for chunk in bytes.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Prng { inner: ChaCha8Rng::from_seed(bytes) }
    }

    /// Fork an independent child stream, advancing the parent.
    pub fn split(&mut self) -> Self {
        let mut bytes = [0u8; 32];
        self.inner.fill_bytes(&mut bytes);
        Prng { inner: ChaCha8Rng::from_seed(bytes) }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_array(&mut self, shape: &[usize]) -> Array {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| self.standard_normal()).collect();
        Array::new(shape.to_vec(), data).expect("shape/data generated consistently")
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    /// Uniform draw from `{lo, ..., hi}` inclusive.
    pub fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates, explicit so the draw sequence is part of the
        // reproducibility contract rather than a library detail.
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    pub fn state(&self) -> PrngState {
        PrngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: &PrngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Prng { inner }
    }
}

impl PrngState {
    pub const BYTE_LEN: usize = 56;

    pub fn to_bytes(&self) -> [u8; Self::BYTE_LEN] {
        let mut out = [0u8; Self::BYTE_LEN];
        out[..32].copy_from_slice(&self.seed);
        out[32..40].copy_from_slice(&self.stream.to_le_bytes());
        out[40..56].copy_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::BYTE_LEN {
            return Err(Error::Format(format!(
                "rng state wants {} bytes, got {}",
                Self::BYTE_LEN,
                bytes.len()
            )));
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes[..32]);
        let stream = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let word_pos = u128::from_le_bytes(bytes[40..56].try_into().unwrap());
        Ok(PrngState { seed, stream, word_pos })
    }
}
