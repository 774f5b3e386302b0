//! Reproducible random streams.
//!
//! Every random draw in the library flows from a [`ChaCha8Rng`]. Independent
//! jobs get their own stream via [`stream`]: the root seed keys the generator
//! and the job index selects one of its 2^64 non-overlapping streams. Draws are
//! always made in `f64`, then converted to the working scalar type.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Scalar;

pub type StreamRng = ChaCha8Rng;

/// Generator for stream `id` under `root_seed`.
pub fn stream(root_seed: u64, id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(id);
    rng
}

/// Stream id for a nested job index, e.g. `(replicate, point)`.
pub fn stream_id(parts: &[u64]) -> u64 {
    // FNV-1a over the little-endian bytes: stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Child generator seeded from a parent draw.
pub fn child(rng: &mut dyn RngCore) -> StreamRng {
    ChaCha8Rng::seed_from_u64(rng.next_u64())
}

#[inline]
pub fn normal<T: Scalar>(rng: &mut dyn RngCore) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::of(z)
}

#[inline]
pub fn uniform<T: Scalar>(rng: &mut dyn RngCore) -> T {
    let u: f64 = rng.random();
    T::of(u)
}

pub fn normal_vector<T: Scalar>(n: usize, rng: &mut dyn RngCore) -> DVector<T> {
    DVector::from_fn(n, |_, _| normal(rng))
}

/// Standard normal matrix filled column by column.
pub fn normal_matrix<T: Scalar>(rows: usize, cols: usize, rng: &mut dyn RngCore) -> DMatrix<T> {
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = normal(rng);
        }
    }
    m
}
