//! CPU kernels for convolution, max pooling, bilinear resizing and
//! training-mode batch normalization.
//!
//! Each kernel is a candle custom op that carries its own backward pass so the
//! rest of the model can stay in ordinary tensor code. Only contiguous `f32`
//! and `f64` CPU tensors are supported.

mod conv;
mod norm;
mod pool;
mod resize;

use std::sync::atomic::{AtomicBool, Ordering};

use candle_core::{CpuStorage, DType, Layout, WithDType};

pub use conv::{conv2d, conv_output_size};
pub use norm::{batch_norm_train, BatchStats};
pub use pool::max_pool2d;
pub use resize::{bilinear_taps, resize_bilinear, resize_plane, Tap};

/// Floating point element types the kernels are instantiated for.
pub trait Real: WithDType + num_traits::Float + std::iter::Sum {
    fn as_f64(self) -> f64 {
        WithDType::to_f64(self)
    }

    fn of(v: f64) -> Self {
        <Self as WithDType>::from_f64(v)
    }
}

impl Real for f32 {}
impl Real for f64 {}

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enables multi-threaded matrix products inside the kernels.
///
/// Serial mode is the default; results in serial mode do not depend on the
/// machine's core count.
pub fn set_parallel(on: bool) {
    PARALLEL.store(on, Ordering::Relaxed);
}

fn parallelism() -> gemm::Parallelism {
    if PARALLEL.load(Ordering::Relaxed) {
        gemm::Parallelism::Rayon(0)
    } else {
        gemm::Parallelism::None
    }
}

fn contiguous<'a, T: Real>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

fn check_dtype(dt: DType, op: &str) -> candle_core::Result<()> {
    match dt {
        DType::F32 | DType::F64 => Ok(()),
        other => candle_core::bail!("{op}: unsupported dtype {other:?}"),
    }
}

/// `dst[m×n] = (accumulate ? dst : 0) + lhs[m×k] · rhs[k×n]`.
///
/// Strides are given as (row stride, column stride) in elements; `dst` is
/// row-major and dense.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    lhs: &[T],
    lhs_strides: (usize, usize),
    rhs: &[T],
    rhs_strides: (usize, usize),
    accumulate: bool,
) {
    assert!(dst.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(lhs.len() > (m - 1) * lhs_strides.0 + (k - 1) * lhs_strides.1);
        assert!(rhs.len() > (k - 1) * rhs_strides.0 + (n - 1) * rhs_strides.1);
    }
    // SAFETY: all index ranges touched by gemm are bounds-checked above.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_strides.1 as isize,
            lhs_strides.0 as isize,
            rhs.as_ptr(),
            rhs_strides.1 as isize,
            rhs_strides.0 as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            parallelism(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive_product() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        matmul(m, n, k, &mut c, &a, (k, 1), &b, (n, 1), false);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // transposed lhs view: a is read as its transpose (k×m)
        let mut ct = vec![1.0; m * n];
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        matmul(m, n, k, &mut ct, &at, (1, m), &b, (n, 1), true);
        for i in 0..m * n {
            assert!((ct[i] - 1.0 - c[i]).abs() < 1e-12);
        }
    }
}
