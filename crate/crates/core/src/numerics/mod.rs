//! Dense `f32` arrays, the handful of kernels the transformer needs, and a
//! reverse-mode tape over them.

mod array;
mod tape;

pub use array::Array;
pub use tape::{Gradients, Tape, Var};

use crate::error::{config_err, usage, Error, Result};

pub const ROPE_BASE: f32 = 10_000.0;
pub const LAYER_NORM_EPS: f32 = 1e-6;

/// Row-wise `softmax(lambda * logits)` over the last axis.
pub fn softmax_scaled(logits: &Array, lambda: f32) -> Result<Array> {
    logits.ensure_finite("softmax_scaled logits")?;
    check_lambda(lambda)?;
    let mut out = logits.clone();
    let cols = out.cols();
    for row in out.data_mut().chunks_mut(cols) {
        softmax_row_in_place(row, lambda);
    }
    Ok(out)
}

pub(crate) fn check_lambda(lambda: f32) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::NumericDomain(format!(
            "attention temperature must be finite and non-negative, got {lambda}"
        )));
    }
    Ok(())
}

pub(crate) fn softmax_row_in_place(row: &mut [f32], lambda: f32) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = exp_fast((*v - max) * lambda);
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// 2-D rotary embedding of a single-head token matrix `[N x d]`.
///
/// The first `d/2` channels rotate with the row coordinate, the rest with the
/// column coordinate; channel pairs `(2i, 2i+1)` inside each half share a
/// frequency `base^(-2i / (d/2))`.
pub fn rope_apply(tokens: &Array, positions: &[(usize, usize)], base: f32) -> Result<Array> {
    let d = tokens.cols();
    let mut out = tokens.clone();
    rope_in_place(out.data_mut(), d, d, positions, base, false)?;
    Ok(out)
}

/// Applies (or, with `inverse`, undoes) per-head rotary rotation to every row
/// of a `[N x cols]` buffer split into heads of width `head_dim`.
pub(crate) fn rope_in_place(
    data: &mut [f32],
    cols: usize,
    head_dim: usize,
    positions: &[(usize, usize)],
    base: f32,
    inverse: bool,
) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(4) {
        return Err(config_err!("rope head dimension {head_dim} must be divisible by 4"));
    }
    if !cols.is_multiple_of(head_dim) {
        return Err(config_err!("width {cols} is not a multiple of head dimension {head_dim}"));
    }
    let rows = data.len() / cols;
    if positions.len() != rows {
        return Err(usage!("rope: {} positions for {rows} tokens", positions.len()));
    }
    let half = head_dim / 2;
    let freqs: Vec<f32> = (0..half / 2)
        .map(|i| base.powf(-((2 * i) as f32) / half as f32))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut rot = vec![(0.0f32, 0.0f32); head_dim / 2];
    for (row, &(pr, pc)) in data.chunks_mut(cols).zip(positions) {
        for (i, &w) in freqs.iter().enumerate() {
            let (s, c) = (sign * pr as f32 * w).sin_cos();
            rot[i] = (c, s);
            let (s, c) = (sign * pc as f32 * w).sin_cos();
            rot[half / 2 + i] = (c, s);
        }
        for head in row.chunks_mut(head_dim) {
            for (pair, &(c, s)) in head.chunks_mut(2).zip(&rot) {
                let (x0, x1) = (pair[0], pair[1]);
                pair[0] = x0 * c - x1 * s;
                pair[1] = x0 * s + x1 * c;
            }
        }
    }
    Ok(())
}

/// Layer normalization without affine parameters, row-wise.
pub fn layer_norm(x: &Array) -> Array {
    let mut out = x.clone();
    let cols = out.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let (mean, rstd) = row_stats(row);
        for v in row.iter_mut() {
            *v = (*v - mean) * rstd;
        }
    }
    out
}

pub(crate) fn row_stats(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2/pi)

/// Branch-free `exp` (Cody-Waite reduction, degree-6 polynomial) that the
/// compiler can vectorize; about 2 ulp on [-87, 88].
#[inline(always)]
pub(crate) fn exp_fast(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    // Adding 1.5 * 2^23 rounds to an integer held in the low mantissa bits.
    const SHIFT: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let t = x * LOG2E + SHIFT;
    let n = t - SHIFT;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0 / 720.0;
    let p = p * r + 1.0 / 120.0;
    let p = p * r + 1.0 / 24.0;
    let p = p * r + 1.0 / 6.0;
    let p = p * r + 0.5;
    let p = p * r + 1.0;
    let p = p * r + 1.0;
    p * f32::from_bits(t.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(127) << 23)
}

// libm tanhf dominated training profiles.
#[inline(always)]
fn tanh_fast(u: f32) -> f32 {
    let u = u.clamp(-15.0, 15.0);
    1.0 - 2.0 / (exp_fast(2.0 * u) + 1.0)
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + tanh_fast(GELU_K * (x + 0.044715 * x * x * x)))
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let th = tanh_fast(u);
    let du = GELU_K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + exp_fast(-x))
}

pub(crate) fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + exp_fast(-x));
    s * (1.0 + x * (1.0 - s))
}

/// Operand of [`gemm`]: a row-major `rows x cols` buffer, optionally used
/// transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl MatRef<'_> {
    fn op_dims(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = op(a) * op(b) + beta * out`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f32], beta: f32) {
    let (m, k) = a.op_dims();
    let (k2, n) = b.op_dims();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: extents and strides describe exactly the borrowed slices, as
    // checked by the asserts above and `MatRef` construction.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain 2-D product, `a [m x k] * b [k x n]`.
pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    if a.cols() != b.rows() {
        return Err(usage!("matmul: {:?} x {:?}", a.shape(), b.shape()));
    }
    let (m, n) = (a.rows(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm(
        MatRef { data: a.data(), rows: m, cols: a.cols(), trans: false },
        MatRef { data: b.data(), rows: b.rows(), cols: n, trans: false },
        &mut out,
        0.0,
    );
    Ok(Array::matrix(m, n, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let s = softmax_scaled(&Array::matrix(1, 2, vec![0.0, 0.0]), 1.0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        // e / (1 + e) = 0.731058578...
        let s = softmax_scaled(&Array::matrix(1, 2, vec![1.0, 0.0]), 1.0).unwrap();
        assert!((s.data()[0] - 0.731_058_6).abs() < 1e-4);
        assert!((s.data()[1] - 0.268_941_4).abs() < 1e-4);
        let s = softmax_scaled(&Array::matrix(1, 2, vec![5.0, -3.0]), 0.0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn exp_fast_matches_libm() {
        let mut x = -87.0f32;
        while x < 88.0 {
            let (a, b) = (exp_fast(x), x.exp());
            assert!(((a - b) / b).abs() < 4e-7, "{x}: {a} vs {b}");
            x += 0.0137;
        }
        assert_eq!(exp_fast(0.0), 1.0);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = softmax_scaled(&Array::matrix(1, 2, vec![f32::NAN, 0.0]), 1.0).unwrap_err();
        assert!(matches!(err, Error::NumericDomain(_)));
    }

    #[test]
    fn rope_identity_at_origin() {
        let x = Array::from_fn(&[3, 8], |i| i as f32 * 0.1 - 1.0);
        let y = rope_apply(&x, &[(0, 0); 3], ROPE_BASE).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rope_relative_offset() {
        let q = Array::from_fn(&[1, 8], |i| (i as f32 * 0.7).sin());
        let k = Array::from_fn(&[1, 8], |i| (i as f32 * 1.3).cos());
        let dot = |a: &Array, b: &Array| -> f32 { a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum() };
        let lhs = dot(
            &rope_apply(&q, &[(3, 5)], ROPE_BASE).unwrap(),
            &rope_apply(&k, &[(1, 2)], ROPE_BASE).unwrap(),
        );
        let rhs = dot(
            &rope_apply(&q, &[(2, 3)], ROPE_BASE).unwrap(),
            &rope_apply(&k, &[(0, 0)], ROPE_BASE).unwrap(),
        );
        assert!((lhs - rhs).abs() < 1e-5, "{lhs} vs {rhs}");
    }

    #[test]
    fn rope_rejects_bad_width() {
        let x = Array::zeros(&[2, 6]);
        assert!(matches!(rope_apply(&x, &[(0, 0); 2], ROPE_BASE), Err(Error::Config(_))));
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        gemm(
            MatRef { data: &a, rows: 2, cols: 2, trans: true },
            MatRef { data: &b, rows: 2, cols: 2, trans: false },
            &mut out,
            0.0,
        );
        // a^T b = [[1*5+3*7, 1*6+3*8],[2*5+4*7, 2*6+4*8]]
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
        gemm(
            MatRef { data: &a, rows: 2, cols: 2, trans: false },
            MatRef { data: &b, rows: 2, cols: 2, trans: true },
            &mut out,
            0.0,
        );
        assert_eq!(out, [17.0, 23.0, 39.0, 53.0]);
    }
}
