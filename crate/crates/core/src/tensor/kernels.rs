//! Slice-level numeric kernels shared by the tape's forward and backward rules.

use super::Scalar;

/// `c = beta * c + alpha * op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a` is stored `m x k` (or `k x m` when `trans_a`), `b` is stored `k x n`
/// (or `n x k` when `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<S: Scalar>(
    a: &[S],
    trans_a: bool,
    b: &[S],
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    beta: S,
    c: &mut [S],
) {
    assert_eq!(a.len(), m * k, "matmul lhs extent");
    assert_eq!(b.len(), k * n, "matmul rhs extent");
    assert_eq!(c.len(), m * n, "matmul out extent");
    if k == 0 {
        if beta == S::zero() {
            c.iter_mut().for_each(|v| *v = S::zero());
        } else {
            c.iter_mut().for_each(|v| *v = *v * beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    S::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; libm's `tanhf` is several times slower.
fn fast_tanh<S: Scalar>(u: S) -> S {
    let two = S::of(2.0);
    S::one() - two / ((two * u).exp() + S::one())
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    half * x * (S::one() + fast_tanh(c * (x + a * x * x * x)))
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let t = fast_tanh(c * (x + a * x * x * x));
    let dinner = c * (S::one() + S::of(3.0) * a * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax over contiguous rows of length `width`.
pub(crate) fn softmax_rows<S: Scalar>(x: &[S], width: usize, out: &mut [S]) {
    for (row, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total = total + *d;
        }
        let inv = S::one() / total;
        dst.iter_mut().for_each(|d| *d = *d * inv);
    }
}

/// Layer normalisation statistics: returns `(xhat, rstd)` per row.
pub(crate) fn layernorm_stats<S: Scalar>(x: &[S], width: usize, eps: S) -> (Vec<S>, Vec<S>) {
    let rows = x.len() / width;
    let mut xhat = vec![S::zero(); x.len()];
    let mut rstd = vec![S::zero(); rows];
    let inv_w = S::one() / S::of(width as f64);
    for (r, (row, dst)) in x.chunks_exact(width).zip(xhat.chunks_exact_mut(width)).enumerate() {
        let mean = row.iter().copied().sum::<S>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_w;
        let rs = S::one() / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - mean) * rs;
        }
        rstd[r] = rs;
    }
    (xhat, rstd)
}

/// Gathers 3x3 neighbourhoods of an `n x side x side x c` grid into rows of
/// `9 * c` columns ordered `(dy, dx, channel)`. Out-of-range taps are zero.
pub(crate) fn im2col3x3<S: Scalar>(x: &[S], n: usize, side: usize, c: usize) -> Vec<S> {
    let cols = 9 * c;
    let mut out = vec![S::zero(); n * side * side * cols];
    for b in 0..n {
        for y in 0..side {
            for xx in 0..side {
                let row = ((b * side + y) * side + xx) * cols;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= side as isize {
                            continue;
                        }
                        let src = ((b * side + sy as usize) * side + sx as usize) * c;
                        let dst = row + (dy * 3 + dx) * c;
                        out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col3x3`]: scatters column gradients back onto the grid.
pub(crate) fn col2im3x3<S: Scalar>(col: &[S], n: usize, side: usize, c: usize, dx_out: &mut [S]) {
    let cols = 9 * c;
    for b in 0..n {
        for y in 0..side {
            for xx in 0..side {
                let row = ((b * side + y) * side + xx) * cols;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= side as isize {
                            continue;
                        }
                        let dst = ((b * side + sy as usize) * side + sx as usize) * c;
                        let src = row + (dy * 3 + dx) * c;
                        for (d, &s) in dx_out[dst..dst + c].iter_mut().zip(&col[src..src + c]) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materialises the axis permutation `perm` of a row-major buffer:
/// `out.shape[i] = shape[perm[i]]`.
pub(crate) fn permute<S: Scalar>(x: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    // Copy the innermost axis as a run when it is contiguous in the source.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| x[base + j * inner_stride]));
        }
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return out;
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul_into(&a, false, &b, false, 2, 2, 2, 1.0, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul_into(&a, true, &b, false, 2, 2, 2, 1.0, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul_into(&a, false, &b, true, 2, 2, 2, 1.0, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn permute_swaps_axes() {
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        assert_eq!(permute(&x, &[2, 3], &[1, 0]), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let y: Vec<f64> = (0..24).map(f64::from).collect();
        let p = permute(&y, &[2, 3, 4], &[1, 0, 2]);
        assert_eq!(&p[..8], &[0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let (n, side, c) = (1, 3, 2);
        let x: Vec<f64> = (0..n * side * side * c).map(|i| i as f64 * 0.1).collect();
        let col = im2col3x3(&x, n, side, c);
        let y: Vec<f64> = (0..col.len()).map(|i| ((i * 7) % 5) as f64).collect();
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im3x3(&y, n, side, c, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
