//! Seeded sampling utilities. Every stochastic routine in the crate derives
//! an independent substream from a master seed, so trial loops can run in any
//! order (or concurrently) without changing results.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Deterministic substream derivation (splitmix64 over seed and index).
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

pub fn gaussian_vector<R: Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_symmetric<R: Rng>(rng: &mut R, dim: usize) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, dim, dim);
    (&a + a.transpose()) * 0.5
}

/// Haar-ish random orthogonal factor: QR of a Gaussian matrix with the sign
/// of R's diagonal fixed, which makes the draw deterministic per stream.
pub fn random_orthogonal<R: Rng>(rng: &mut R, dim: usize) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, dim, dim);
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            for i in 0..dim {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Gaussian matrix normalized to unit Frobenius norm.
pub fn unit_direction<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut h = gaussian_matrix(rng, rows, cols);
    let norm = h.norm();
    if norm > 0.0 {
        h /= norm;
    }
    h
}

/// Symmetric Gaussian matrix normalized to unit Frobenius norm.
pub fn unit_sym_direction<R: Rng>(rng: &mut R, dim: usize) -> DMatrix<f64> {
    let mut h = gaussian_symmetric(rng, dim);
    let norm = h.norm();
    if norm > 0.0 {
        h /= norm;
    }
    h
}
