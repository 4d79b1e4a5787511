//! Shared numeric kernels.
//!
//! Both the autodiff graph ops and the no-grad inference path call into these
//! functions, so the two paths stay bitwise identical. Loop orders are fixed;
//! reruns of the same build accumulate in the same order.

use crate::tensor::Scalar;

/// Dot product with four independent accumulators. The lane split is part of
/// the kernel's defined summation order.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::ZERO; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] = acc[0].add(a[j].mul(b[j]));
        acc[1] = acc[1].add(a[j + 1].mul(b[j + 1]));
        acc[2] = acc[2].add(a[j + 2].mul(b[j + 2]));
        acc[3] = acc[3].add(a[j + 3].mul(b[j + 3]));
    }
    let mut tail = S::ZERO;
    for j in chunks * 4..a.len() {
        tail = tail.add(a[j].mul(b[j]));
    }
    acc[0].add(acc[1]).add(acc[2].add(acc[3])).add(tail)
}

/// `out += s * x`. An exactly zero coefficient is skipped outright: rows the
/// causal mask zeroes and unsupervised gradient rows then contribute no
/// floating-point ops at all, which keeps the batched attention product
/// bitwise identical to the incremental cache path.
pub fn axpy<S: Scalar>(s: S, x: &[S], out: &mut [S]) {
    debug_assert_eq!(x.len(), out.len());
    if s == S::ZERO {
        return;
    }
    for (o, v) in out.iter_mut().zip(x.iter()) {
        *o = o.add(s.mul(*v));
    }
}

/// C += A(m×k) · B(k×n), row-major. Accumulation order over the k axis is
/// fixed by the outer loop.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, &aij) in arow.iter().enumerate() {
            axpy(aij, &b[j * n..(j + 1) * n], orow);
        }
    }
}

/// C += A(m×k) · Bᵀ where B is n×k row-major.
pub fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let v = dot(arow, &b[j * k..(j + 1) * k]);
            out[i * n + j] = out[i * n + j].add(v);
        }
    }
}

/// C += Aᵀ · B where A is m×k and B is m×n; result k×n.
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (j, &aij) in arow.iter().enumerate() {
            axpy(aij, brow, &mut out[j * n..(j + 1) * n]);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalize one row: y = gain ⊙ (x − μ)/√(σ² + eps) + bias.
/// Returns (mean, inverse std) for the backward pass.
pub fn layer_norm_row<S: Scalar>(x: &[S], gain: &[S], bias: &[S], eps: f64, out: &mut [S]) -> (S, S) {
    let d = x.len();
    let inv_d = S::from_f64(1.0 / d as f64);
    let mut sum = S::ZERO;
    for &v in x {
        sum = sum.add(v);
    }
    let mean = sum.mul(inv_d);
    let mut var = S::ZERO;
    for &v in x {
        let c = v.sub(mean);
        var = var.add(c.mul(c));
    }
    var = var.mul(inv_d);
    let inv_std = S::ONE.div(var.add(S::from_f64(eps)).sqrt());
    for i in 0..d {
        out[i] = gain[i].mul(x[i].sub(mean).mul(inv_std)).add(bias[i]);
    }
    (mean, inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let u = c.mul(x.add(a.mul(x).mul(x).mul(x)));
    S::from_f64(0.5).mul(x).mul(S::ONE.add(u.tanh()))
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let x2 = x.mul(x);
    let u = c.mul(x.add(a.mul(x).mul(x2)));
    let t = u.tanh();
    let sech2 = S::ONE.sub(t.mul(t));
    let du = c.mul(S::ONE.add(S::from_f64(3.0 * GELU_A).mul(x2)));
    let half = S::from_f64(0.5);
    half.mul(S::ONE.add(t)).add(half.mul(x).mul(sech2).mul(du))
}

/// Softmax over `row[..width]`; entries past `width` are set to zero.
pub fn softmax_prefix<S: Scalar>(row: &mut [S], width: usize) {
    debug_assert!(width >= 1 && width <= row.len());
    let mut m = row[0];
    for &v in &row[1..width] {
        m = m.max(v);
    }
    let mut z = S::ZERO;
    for v in row[..width].iter_mut() {
        *v = v.sub(m).exp();
        z = z.add(*v);
    }
    let inv = S::ONE.div(z);
    for v in row[..width].iter_mut() {
        *v = v.mul(inv);
    }
    for v in row[width..].iter_mut() {
        *v = S::ZERO;
    }
}

/// log-softmax of one row, computed in place into `out`.
pub fn log_softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let mut m = row[0];
    for &v in &row[1..] {
        m = m.max(v);
    }
    let mut z = S::ZERO;
    for &v in row {
        z = z.add(v.sub(m).exp());
    }
    let lz = z.ln().add(m);
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        *o = v.sub(lz);
    }
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
