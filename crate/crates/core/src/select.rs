//! Variance-based token compression.

use crate::tensor::{Real, Result, Tensor, TensorError};

/// Population variance of each row of `tokens[N, d]`.
pub fn token_variances<F: Real>(tokens: &Tensor<F>) -> Vec<f64> {
    let d = tokens.cols();
    (0..tokens.rows())
        .map(|i| {
            let row = tokens.row(i);
            let mean = row.iter().map(|x| x.as_f64()).sum::<f64>() / d as f64;
            row.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / d as f64
        })
        .collect()
}

/// Keeps the `keep` rows with the highest feature variance, ties going to the
/// lower index. Survivors stay in their original order; their indices are
/// returned ascending.
pub fn variance_select<F: Real>(tokens: &Tensor<F>, keep: usize) -> Result<(Tensor<F>, Vec<usize>)> {
    if tokens.shape().len() != 2 {
        return Err(TensorError::Shape {
            op: "variance_select",
            detail: format!("expected [N, d], got {:?}", tokens.shape()),
        });
    }
    let n = tokens.rows();
    if keep == 0 || keep > n {
        return Err(TensorError::Domain {
            op: "variance_select",
            detail: format!("keep {keep} outside 1..={n}"),
        });
    }
    let scores = token_variances(tokens);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    let d = tokens.cols();
    let mut data = Vec::with_capacity(keep * d);
    for &i in &kept {
        data.extend_from_slice(tokens.row(i));
    }
    Ok((Tensor::new(vec![keep, d], data)?, kept))
}
