//! Grouped-query scaled dot-product attention and its visibility masks.

use crate::tensor::{Graph, Real, Result, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Keys visible when they are real tokens.
    Bidirectional,
    /// Keys visible when real and not after the query.
    Causal,
    /// Encoder keys visible when real; queries come from the decoder.
    Cross,
}

/// Row-major `[q_real.len(), k_real.len()]` visibility matrix.
///
/// Query `i` sits at key index `q_start + i` for the self-attention modes.
/// A query that would see nothing (a pad before any real token) is allowed
/// its own position so the softmax stays defined; such rows never reach a loss.
pub fn visibility(mode: MaskMode, q_real: &[bool], k_real: &[bool], q_start: usize) -> Result<Vec<bool>> {
    let (tq, tk) = (q_real.len(), k_real.len());
    if mode != MaskMode::Cross && q_start + tq > tk {
        return Err(TensorError::Shape {
            op: "attention",
            detail: format!("{tq} queries from offset {q_start} exceed {tk} keys"),
        });
    }
    let mut vis = vec![false; tq * tk];
    for i in 0..tq {
        let row = &mut vis[i * tk..(i + 1) * tk];
        let end = match mode {
            MaskMode::Causal => q_start + i + 1,
            _ => tk,
        };
        let mut any = false;
        for j in 0..end {
            row[j] = k_real[j];
            any |= k_real[j];
        }
        if !any {
            if mode == MaskMode::Cross {
                return Err(TensorError::Domain {
                    op: "attention",
                    detail: "cross-attention over an input with no real tokens".into(),
                });
            }
            row[q_start + i] = true;
        }
    }
    Ok(vis)
}

/// Attention of `q[Tq, n_heads*d_head]` over `k, v[Tk, n_kv_heads*d_head]`.
///
/// Query head `h` reads key/value group `h / (n_heads / n_kv_heads)`; scores are
/// scaled by `1/sqrt(d_head)` and hidden keys get zero weight.
pub fn attention<F: Real>(
    g: &mut Graph<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    visible: &[bool],
    n_heads: usize,
    n_kv_heads: usize,
) -> Result<Var> {
    let (tq, qw) = dims(g, q)?;
    let (tk, kw) = dims(g, k)?;
    let (tv, vw) = dims(g, v)?;
    if n_kv_heads == 0 || n_heads % n_kv_heads != 0 || qw % n_heads != 0 {
        return Err(TensorError::Domain {
            op: "attention",
            detail: format!("{n_heads} heads over {n_kv_heads} kv heads with width {qw}"),
        });
    }
    let dh = qw / n_heads;
    if kw != n_kv_heads * dh || (tv, vw) != (tk, kw) || visible.len() != tq * tk {
        return Err(TensorError::Domain {
            op: "attention",
            detail: format!("q [{tq},{qw}], k [{tk},{kw}], v [{tv},{vw}], mask {}", visible.len()),
        });
    }
    let group = n_heads / n_kv_heads;
    let tau = F::of((dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    let mut kv_slices = Vec::with_capacity(n_kv_heads);
    for gi in 0..n_kv_heads {
        let (ks, vs) = if n_kv_heads == 1 {
            (k, v)
        } else {
            (g.slice_cols(k, gi * dh, dh)?, g.slice_cols(v, gi * dh, dh)?)
        };
        kv_slices.push((ks, vs));
    }
    for h in 0..n_heads {
        let (ks, vs) = kv_slices[h / group];
        let qh = if n_heads == 1 { q } else { g.slice_cols(q, h * dh, dh)? };
        let scores = g.matmul_nt(qh, ks)?;
        let probs = g.masked_softmax(scores, tau, visible)?;
        heads.push(g.matmul(probs, vs)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        g.concat_cols(&heads)
    }
}

fn dims<F: Real>(g: &Graph<'_, F>, v: Var) -> Result<(usize, usize)> {
    match g.shape(v) {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Domain {
            op: "attention",
            detail: format!("expected a matrix, got {s:?}"),
        }),
    }
}
