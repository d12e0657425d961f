//! Channel-major activations and the GEMM kernel the layers are built on.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Activation tensor laid out as `[channel][batch][position]`.
///
/// Keeping batch and position contiguous inside a channel turns every
/// convolution into one matrix product over `batch * len` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub c: usize,
    pub b: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(c: usize, b: usize, len: usize) -> Self {
        Self {
            c,
            b,
            len,
            data: vec![0.0; c * b * len],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, b: usize, i: usize) -> usize {
        (c * self.b + b) * self.len + i
    }

    /// Columns of the channel-major matrix view (`batch * len`).
    #[inline]
    pub fn cols(&self) -> usize {
        self.b * self.len
    }

    pub fn same_shape(&self, other: &Act) -> bool {
        self.c == other.c && self.b == other.b && self.len == other.len
    }
}

/// `c = op(a) · op(b) + beta · c` with row-major operands.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let a = if trans_a {
        ArrayView2::from_shape((k, m), a).expect("gemm a").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm a")
    };
    let b = if trans_b {
        ArrayView2::from_shape((n, k), b).expect("gemm b").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm b")
    };
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}
