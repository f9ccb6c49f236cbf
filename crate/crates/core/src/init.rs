//! Weight initialization: orthogonal matrices with configurable gain.
//!
//! Sampling is done in 64-bit and converted to the target precision last,
//! so an f32 and an f64 build initialized from the same seed hold the same
//! values up to rounding.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard normal draws via the Box-Muller transform.
pub fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        // u1 in (0,1] so the log stays finite
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        out.push(radius * angle.cos());
        if out.len() < n {
            out.push(radius * angle.sin());
        }
    }
    out
}

/// Orthogonal weight tensor scaled by `gain`.
///
/// The tensor is treated as a `[rows, prod(rest)]` matrix. When rows ≤
/// cols the rows come out orthonormal, otherwise the columns do, matching
/// the usual convention for tall weight matrices.
pub fn orthogonal<E: Scalar, R: Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor<E> {
    assert!(!shape.is_empty(), "orthogonal init needs a shaped tensor");
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    assert!(rows > 0 && cols > 0, "orthogonal init needs positive dims");

    let transpose = rows > cols;
    let (m, k) = if transpose { (cols, rows) } else { (rows, cols) };
    let q = gram_schmidt_rows(m, k, rng);

    let mut data = vec![0.0f64; rows * cols];
    if transpose {
        for i in 0..m {
            for j in 0..k {
                data[j * cols + i] = q[i * k + j] * gain;
            }
        }
    } else {
        for (dst, src) in data.iter_mut().zip(q.iter()) {
            *dst = src * gain;
        }
    }
    Tensor::from_fn(shape, |i| E::from_f64(data[i]))
}

/// `m` orthonormal rows of dimension `k` (requires m ≤ k) via modified
/// Gram-Schmidt; rank-deficient draws are rejected and redrawn.
fn gram_schmidt_rows<R: Rng + ?Sized>(m: usize, k: usize, rng: &mut R) -> Vec<f64> {
    debug_assert!(m <= k);
    let mut q = vec![0.0f64; m * k];
    for i in 0..m {
        loop {
            let row = standard_normals(k, rng);
            q[i * k..(i + 1) * k].copy_from_slice(&row);
            for j in 0..i {
                let dot: f64 = (0..k).map(|c| q[i * k + c] * q[j * k + c]).sum();
                for c in 0..k {
                    q[i * k + c] -= dot * q[j * k + c];
                }
            }
            let norm: f64 = (0..k).map(|c| q[i * k + c] * q[i * k + c]).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for c in 0..k {
                    q[i * k + c] /= norm;
                }
                break;
            }
        }
    }
    q
}
