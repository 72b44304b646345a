//! Counter-based random streams addressed by name.
//!
//! A [`Stream`] is a pure function of `(seed, path, counter)`: the output
//! for draw `n` of stream `"trajectory/3/noise/17"` never depends on how
//! many draws other streams consumed. Sampling trajectories and training
//! draws therefore replay identically regardless of evaluation order or
//! thread count.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::ndgrad::{Real, Tensor};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    /// Root stream for `seed` and a slash-separated purpose name.
    pub fn new(seed: u64, name: &str) -> Self {
        let key = mix64(seed.wrapping_mul(GOLDEN) ^ 0xD134_2543_DE82_EF95);
        Self { key, counter: 0 }.derive(name)
    }

    /// Independent child stream. Does not advance `self`.
    pub fn derive(&self, name: &str) -> Self {
        let key = name
            .split('/')
            .filter(|s| !s.is_empty())
            .fold(self.key, |k, part| mix64(k ^ mix64(fnv1a64(part.as_bytes()))));
        Self { key, counter: 0 }
    }

    /// Child stream for an integer label, e.g. a step or trajectory index.
    pub fn derive_index(&self, name: &str, index: u64) -> Self {
        let base = self.derive(name);
        Self {
            key: mix64(base.key ^ mix64(index.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    /// First draw of this stream, for seeding another component.
    pub fn to_seed(&self) -> u64 {
        self.clone().next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = hi - lo + 1;
        // Lemire's multiply-shift; bias is below 2^-64 * span and irrelevant here.
        lo + ((u128::from(self.next_u64()) * u128::from(span)) >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Tensor of independent standard normal draws.
    pub fn normal_tensor<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.normal()))
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.range_inclusive(0, i as u64) as usize;
            items.swap(i, j);
        }
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key ^ mix64(self.counter.wrapping_mul(GOLDEN)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}
