//! Rotary position embeddings with NTK-aware base extension.

use crate::tensor::{Graph, Real, Result, TensorError, Var};

/// Frequency base after NTK extension to positions up to `max_pos`.
///
/// Unchanged while `max_pos < ntk_len`; otherwise
/// `base * s^(d_head / (d_head - 2))` with `s = (max_pos + 1) / ntk_len`.
pub fn ntk_base(base: f64, d_head: usize, max_pos: usize, ntk_len: usize) -> f64 {
    if max_pos < ntk_len || d_head <= 2 {
        return base;
    }
    let s = (max_pos + 1) as f64 / ntk_len as f64;
    base * s.powf(d_head as f64 / (d_head as f64 - 2.0))
}

/// Rotates `x[T, heads, d_head]` by per-row positions, extending the base
/// from the largest position present.
pub fn rope_apply<F: Real>(
    g: &mut Graph<'_, F>,
    x: Var,
    positions: &[usize],
    base: f64,
    ntk_scale_len: usize,
) -> Result<Var> {
    let (heads, dh) = match g.shape(x) {
        [_, h, d] => (*h, *d),
        s => {
            return Err(TensorError::Shape {
                op: "rope_apply",
                detail: format!("expected [T, heads, d_head], got {s:?}"),
            })
        }
    };
    let max_pos = positions.iter().copied().max().unwrap_or(0);
    let b = ntk_base(base, dh, max_pos, ntk_scale_len);
    g.rope(x, heads, positions, b)
}
