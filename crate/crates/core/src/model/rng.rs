//! Weight generation.
//!
//! Each weight tensor draws from its own PCG-XSH-RR 64/32 generator
//! (`Pcg32`, 64-bit state). The generator state is
//! `splitmix64(seed ^ fnv1a64(tensor_name))` and the stream increment is
//! fixed at [`PCG_STREAM`]. A uniform `f32` in `[-1, 1)` is
//! `(next_u32 >> 8) * 2^-23 - 1`.

use rand_core::RngCore;
use rand_pcg::Pcg32;

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
pub const PCG_STREAM: u64 = 0xda3e_39cb_94b9_5bdb;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(FNV_OFFSET, bytes)
}

pub fn fnv1a64_extend(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub struct TensorRng(Pcg32);

impl TensorRng {
    pub fn new(seed: u64, tensor: &str) -> Self {
        let state = splitmix64(seed ^ fnv1a64(tensor.as_bytes()));
        TensorRng(Pcg32::new(state, PCG_STREAM))
    }

    pub fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    /// Uniform in `[-1, 1)`.
    pub fn uniform(&mut self) -> f32 {
        (self.0.next_u32() >> 8) as f32 * (1.0 / (1u32 << 23) as f32) - 1.0
    }

    /// `n` values uniform in `[-scale, scale)`.
    pub fn fill(&mut self, n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|_| self.uniform() * scale).collect()
    }
}
