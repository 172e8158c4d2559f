//! Slice-level kernels shared by the tracked graph and the inference path.
//!
//! All matrices are row-major. Loop orders are chosen so the innermost loop
//! walks contiguous memory.

use super::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = out[i * n + j] + dot(a_row, b_row);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Four accumulators keep the dependency chain short enough to vectorize.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

/// In-place softmax of one row with max subtraction. Masked entries (`false`
/// in `allowed`) get exactly zero probability. Returns `false` when every entry
/// is masked.
pub fn softmax_in_place<T: Real>(row: &mut [T], allowed: Option<&[bool]>) -> bool {
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if allowed.is_none_or(|a| a[j]) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        return false;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if allowed.is_none_or(|a| a[j]) {
            *v = (*v - max).exp();
            sum = sum + *v;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
    true
}

/// Softmax with per-entry multiplicities: `a_t = c_t·exp(e_t) / Σ c_s·exp(e_s)`.
/// The maximum is taken over entries with a positive count so a zero-count
/// entry never dominates the shift.
pub fn count_softmax_in_place<T: Real>(row: &mut [T], counts: &[T]) -> bool {
    let mut max = T::neg_infinity();
    for (&v, &c) in row.iter().zip(counts) {
        if c > T::zero() && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        return false;
    }
    let mut sum = T::zero();
    for (v, &c) in row.iter_mut().zip(counts) {
        *v = if c > T::zero() { c * (*v - max).exp() } else { T::zero() };
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
    true
}

/// Row-wise layer normalization. Writes the normalized (pre-affine) values to
/// `xhat` and the reciprocal standard deviations to `rstd`.
pub fn layer_norm_rows<T: Real>(
    x: &[T],
    cols: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let n = T::lit(cols as f64);
    for (r, row) in x.chunks_exact(cols).enumerate() {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma[c] + beta[c];
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Sinusoidal position table, `max_len × d`.
pub fn sinusoid_table<T: Real>(max_len: usize, d: usize) -> Vec<T> {
    let mut table = vec![T::zero(); max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let freq = 10000f64.powf(-2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            table[pos * d + 2 * i] = T::lit(angle.sin());
            table[pos * d + 2 * i + 1] = T::lit(angle.cos());
        }
        if d % 2 == 1 {
            table[pos * d + d - 1] = T::lit((pos as f64 * 10000f64.powf(-((d - 1) as f64) / d as f64)).sin());
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_softmax_with_unit_counts_is_softmax() {
        let mut a: Vec<f64> = vec![0.3, -1.0, 2.0];
        let mut b = a.clone();
        softmax_in_place(&mut a, None);
        count_softmax_in_place(&mut b, &[1.0, 1.0, 1.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_count_entry_vanishes() {
        let mut row: Vec<f64> = vec![500.0, 0.0, 1.0];
        assert!(count_softmax_in_place(&mut row, &[0.0, 1.0, 1.0]));
        assert_eq!(row[0], 0.0);
        assert!((row[1] + row[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_reported() {
        let mut row = vec![1.0f64, 2.0];
        assert!(!softmax_in_place(&mut row, Some(&[false, false])));
    }

    #[test]
    fn transposed_products_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3×4
        let mut ab = vec![0.0; 8];
        matmul_acc(&a, &b, 2, 3, 4, &mut ab);
        // b transposed to 4×3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut ab2 = vec![0.0; 8];
        matmul_bt_acc(&a, &bt, 2, 3, 4, &mut ab2);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut ab3 = vec![0.0; 8];
        matmul_at_acc(&at, &b, 3, 2, 4, &mut ab3);
        for i in 0..8 {
            assert!((ab[i] - ab2[i]).abs() < 1e-14);
            assert!((ab[i] - ab3[i]).abs() < 1e-14);
        }
    }
}
