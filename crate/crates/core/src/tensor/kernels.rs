//! Inner loops shared by forward and backward passes.
//!
//! Every reduction accumulates left to right in index order. The row-blocked
//! matmul performs exactly the same per-element operations as the unblocked
//! one, so a row's result never depends on how many rows were multiplied with
//! it (a single decode step matches the same row of a full forward bit for bit).

use super::Real;

/// `out[m,n] += a[m,k] * b[k,n]`.
pub(crate) fn gemm<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    let mut rows = out.chunks_exact_mut(n).enumerate();
    loop {
        let Some((i0, o0)) = rows.next() else { break };
        let Some((_, o1)) = rows.next() else {
            row_1(&a[i0 * k..(i0 + 1) * k], b, n, o0);
            break;
        };
        let Some((_, o2)) = rows.next() else {
            row_1(&a[i0 * k..(i0 + 1) * k], b, n, o0);
            row_1(&a[(i0 + 1) * k..(i0 + 2) * k], b, n, o1);
            break;
        };
        let Some((_, o3)) = rows.next() else {
            row_1(&a[i0 * k..(i0 + 1) * k], b, n, o0);
            row_1(&a[(i0 + 1) * k..(i0 + 2) * k], b, n, o1);
            row_1(&a[(i0 + 2) * k..(i0 + 3) * k], b, n, o2);
            break;
        };
        let a0 = &a[i0 * k..(i0 + 1) * k];
        let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
        let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
        let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            for ((((bv, y0), y1), y2), y3) in brow
                .iter()
                .zip(o0.iter_mut())
                .zip(o1.iter_mut())
                .zip(o2.iter_mut())
                .zip(o3.iter_mut())
            {
                *y0 += x0 * *bv;
                *y1 += x1 * *bv;
                *y2 += x2 * *bv;
                *y3 += x3 * *bv;
            }
        }
    }
}

#[inline]
fn row_1<F: Real>(arow: &[F], b: &[F], n: usize, out: &mut [F]) {
    for (p, &x) in arow.iter().enumerate() {
        let brow = &b[p * n..(p + 1) * n];
        for (y, bv) in out.iter_mut().zip(brow) {
            *y += x * *bv;
        }
    }
}

/// Transpose of a `rows x cols` row-major matrix.
pub(crate) fn transpose<F: Real>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Softmax of `x / tau` over one row; entries with `visible[j] == false` get
/// exactly zero probability. At least one entry must be visible.
pub(crate) fn softmax_row<F: Real>(x: &[F], tau: F, visible: Option<&[bool]>, out: &mut [F]) {
    let inv = F::one() / tau;
    let mut max = F::neg_infinity();
    for (j, &v) in x.iter().enumerate() {
        if visible.is_none_or(|m| m[j]) && v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        if visible.is_none_or(|m| m[j]) {
            let e = ((v - max) * inv).exp();
            *o = e;
            sum += e;
        } else {
            *o = F::zero();
        }
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Log-softmax of one row (temperature 1).
pub(crate) fn log_softmax_row<F: Real>(x: &[F], out: &mut [F]) {
    let mut max = F::neg_infinity();
    for &v in x {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for &v in x {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

pub(crate) fn gelu<F: Real>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (F::one() + u.tanh())
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let half = F::of(0.5);
    let three = F::of(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
}
