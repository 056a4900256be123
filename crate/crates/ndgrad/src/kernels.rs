//! Raw slice kernels shared by the forward and backward passes.

use crate::par;
use crate::Real;

/// `c[r, :] = a[r, :] @ b_r` for `rows` rows of width `k`, where `b_r` is the
/// `[k, n]` block of `b` belonging to row `r` (row `r` is in batch `r / m`).
/// When `b_shared` is set every row uses the same `[k, n]` matrix.
#[allow(clippy::too_many_arguments)]
pub fn matmul<F: Real>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    rows: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) {
    debug_assert_eq!(a.len(), rows * k);
    debug_assert_eq!(c.len(), rows * n);
    par::for_each_row(c, n, |r, crow| {
        let arow = &a[r * k..(r + 1) * k];
        let start = if b_shared { 0 } else { (r / m) * k * n };
        matmul_row(arow, &b[start..start + k * n], crow);
    });
}

#[inline(always)]
fn matmul_row<F: Real>(arow: &[F], block: &[F], crow: &mut [F]) {
    let n = crow.len();
    let k = arow.len();
    crow.iter_mut().for_each(|v| *v = F::zero());
    // four rows of `b` per pass: fewer loads and stores of `crow`
    let mut quads = arow.chunks_exact(4).zip(block.chunks_exact(4 * n));
    for (ap, bq) in &mut quads {
        let (b0, rest) = bq.split_at(n);
        let (b1, rest) = rest.split_at(n);
        let (b2, b3) = rest.split_at(n);
        let (a0, a1, a2, a3) = (ap[0], ap[1], ap[2], ap[3]);
        for ((((cv, &x0), &x1), &x2), &x3) in crow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
            *cv += a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
        }
    }
    let done = k - k % 4;
    for (p, &ap) in arow[done..].iter().enumerate() {
        let brow = &block[(done + p) * n..(done + p + 1) * n];
        for (cv, &bv) in crow.iter_mut().zip(brow) {
            *cv += ap * bv;
        }
    }
}

/// Transposes the trailing two axes of `batch` stacked `[rows, cols]` blocks.
pub fn transpose<F: Real>(x: &[F], batch: usize, rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for bi in 0..batch {
        let src = &x[bi * rows * cols..(bi + 1) * rows * cols];
        let dst = &mut out[bi * rows * cols..(bi + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
}

pub fn softmax_rows<F: Real>(x: &[F], out: &mut [F], n: usize) {
    par::for_each_row(out, n, |r, orow| {
        let xrow = &x[r * n..(r + 1) * n];
        let max = xrow.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    });
}

pub fn log_softmax_rows<F: Real>(x: &[F], out: &mut [F], n: usize) {
    par::for_each_row(out, n, |r, orow| {
        let xrow = &x[r * n..(r + 1) * n];
        let max = xrow.iter().copied().fold(F::neg_infinity(), F::max);
        let total: F = xrow.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + total.ln();
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = v - lse;
        }
    });
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + F::of(3.0) * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn sum_axis<F: Real>(x: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![F::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Inverse of [`sum_axis`]: repeats each reduced element along `axis`.
pub fn expand_axis<F: Real>(g: &[F], shape: &[usize], axis: usize, scale: F) -> Vec<F> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![F::zero(); outer * len * inner];
    for o in 0..outer {
        let src = &g[o * inner..(o + 1) * inner];
        for l in 0..len {
            let dst = &mut out[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * scale;
            }
        }
    }
    out
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes the axes of `x`: output axis `i` is input axis `perm[i]`.
pub fn permute<F: Real>(x: &[F], shape: &[usize], perm: &[usize]) -> (Vec<F>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let rank = out_shape.len();
    if rank == 0 || x.is_empty() {
        return (x.to_vec(), out_shape);
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = idx[..last]
            .iter()
            .zip(&src_strides[..last])
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..out_shape[last] {
            out.push(x[base + j * src_strides[last]]);
        }
        // odometer increment over the leading axes
        let mut axis = last;
        loop {
            if axis == 0 {
                return (out, out_shape);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_2d_is_transpose() {
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        let (p, shape) = permute(&x, &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(p, transpose(&x, 1, 2, 3));
    }

    #[test]
    fn permute_round_trip_4d() {
        let shape = [2, 3, 4, 5];
        let x: Vec<f64> = (0..120).map(f64::from).collect();
        let perm = [0, 2, 1, 3];
        let (y, yshape) = permute(&x, &shape, &perm);
        let (z, zshape) = permute(&y, &yshape, &inverse_permutation(&perm));
        assert_eq!(zshape, shape.to_vec());
        assert_eq!(z, x);
    }

    #[test]
    fn sum_axis_middle() {
        // shape [2, 3, 2]
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let s = sum_axis(&x, &[2, 3, 2], 1);
        assert_eq!(s, vec![6.0, 9.0, 24.0, 27.0]);
    }

    #[test]
    fn matmul_batched_and_shared_agree_when_blocks_equal() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // [2 batches, 2, 3]
        let b: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // [3, 2]
        let mut shared = vec![0.0; 8];
        matmul(&a, &b, &mut shared, 4, 2, 3, 2, true);
        let b2: Vec<f64> = b.iter().chain(b.iter()).copied().collect();
        let mut batched = vec![0.0; 8];
        matmul(&a, &b2, &mut batched, 4, 2, 3, 2, false);
        assert_eq!(shared, batched);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
