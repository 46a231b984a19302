//! Dense kernels on row-major slices.

use super::Real;

/// `out = a (m x k) * b (k x n)`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    out[..m * n].iter_mut().for_each(|v| *v = T::zero());
    matmul_acc(a, b, m, k, n, out);
}

/// `out += a (m x k) * b (k x n)`.
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out (k x n) += a^T b` for `a: m x k`, `b: m x n`.
pub fn matmul_at_b_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out (m x k) = a b^T` for `a: m x n`, `b: k x n`.
pub fn matmul_a_bt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

pub fn add_row_bias<T: Real>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

pub fn sum_rows_acc<T: Real>(x: &[T], width: usize, out: &mut [T]) {
    for row in x.chunks_exact(width) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::cast(GELU_C);
    let a = T::cast(GELU_A);
    let half = T::cast(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::cast(GELU_C);
    let a = T::cast(GELU_A);
    let half = T::cast(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::cast(3.0) * a * x * x)
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Returns normalised values (before gain/shift) and
/// reciprocal standard deviations for the backward pass.
pub fn layer_norm<T: Real>(x: &[T], width: usize, gain: &[T], shift: &[T], out: &mut [T]) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / width;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let w = T::cast(width as f64);
    let eps = T::cast(LN_EPS);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) / w;
        let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / w;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..width {
            let h = (row[j] - mean) * rs;
            xhat[r * width + j] = h;
            out[r * width + j] = h * gain[j] + shift[j];
        }
    }
    (xhat, rstd)
}

/// Accumulates gain/shift gradients and returns the input gradient.
pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    width: usize,
    dgain: &mut [T],
    dshift: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    let w = T::cast(width as f64);
    for (r, &rs) in rstd.iter().enumerate() {
        let dyr = &dy[r * width..(r + 1) * width];
        let xr = &xhat[r * width..(r + 1) * width];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..width {
            let dh = dyr[j] * gain[j];
            dgain[j] = dgain[j] + dyr[j] * xr[j];
            dshift[j] = dshift[j] + dyr[j];
            m1 = m1 + dh;
            m2 = m2 + dh * xr[j];
        }
        m1 = m1 / w;
        m2 = m2 / w;
        for j in 0..width {
            let dh = dyr[j] * gain[j];
            dx[r * width + j] = rs * (dh - m1 - xr[j] * m2);
        }
    }
    dx
}

/// In-place softmax over each row of width `width`.
pub fn softmax_rows<T: Real>(x: &mut [T], width: usize) {
    for row in x.chunks_exact_mut(width) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}
