//! Cross-domain similarity local scaling between a mapped source space and
//! a fixed target space.

use crate::error::{Error, Result};
use crate::staticembed::normalize_rows;
use crate::tensor::Tensor;

/// Row-major `n x m` cosine matrix between the rows of `a` and `b`.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.last_dim() != b.last_dim() {
        return Err(Error::DimensionMismatch {
            left: a.last_dim(),
            right: b.last_dim(),
        });
    }
    let an = normalize_rows(a);
    let bn = normalize_rows(b);
    Ok(an.matmul(&bn.transpose2()?)?.into_data())
}

fn mean_top_k(vals: &mut [f64], k: usize) -> f64 {
    let n = vals.len();
    vals.select_nth_unstable_by(n - k, |a, b| a.total_cmp(b));
    vals[n - k..].iter().sum::<f64>() / k as f64
}

/// Full CSLS score matrix: `2 cos(x, y) - r_tgt(x) - r_src(y)`, where each
/// `r` is the mean cosine to the `k` nearest rows of the other space.
pub fn csls_matrix(cos: &[f64], n: usize, m: usize, k: usize) -> Result<Vec<f64>> {
    if cos.len() != n * m {
        return Err(Error::Invalid(format!("cosine matrix holds {} values, not {n}x{m}", cos.len())));
    }
    if k == 0 || k >= n.min(m) {
        return Err(Error::Invalid(format!("CSLS neighbourhood k = {k} must be in [1, {})", n.min(m))));
    }
    let r_row: Vec<f64> = (0..n).map(|i| mean_top_k(&mut cos[i * m..(i + 1) * m].to_vec(), k)).collect();
    let r_col: Vec<f64> = (0..m)
        .map(|j| {
            let mut col: Vec<f64> = (0..n).map(|i| cos[i * m + j]).collect();
            mean_top_k(&mut col, k)
        })
        .collect();
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(2.0 * cos[i * m + j] - r_row[i] - r_col[j]);
        }
    }
    Ok(out)
}

fn argmax(vals: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in vals.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Best target column and its CSLS score for every source row.
pub fn csls_from_cosines(cos: &[f64], n: usize, m: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    let s = csls_matrix(cos, n, m, k)?;
    Ok((0..n).map(|i| argmax(s[i * m..(i + 1) * m].iter().copied())).collect())
}

/// Translates every row of `wv` (already mapped) into the rows of `u`.
pub fn csls_translate(wv: &Tensor, u: &Tensor, k: usize) -> Result<Vec<(usize, f64)>> {
    let cos = cosine_matrix(wv, u)?;
    csls_from_cosines(&cos, wv.rows(), u.rows(), k)
}

/// Mutual CSLS nearest neighbours as `(row of wv, row of u)` pairs, sorted
/// by source row.
pub fn mine_dictionary(wv: &Tensor, u: &Tensor, k: usize) -> Result<Vec<(usize, usize)>> {
    let (n, m) = (wv.rows(), u.rows());
    let cos = cosine_matrix(wv, u)?;
    let s = csls_matrix(&cos, n, m, k)?;
    let col_best: Vec<usize> = (0..m).map(|j| argmax((0..n).map(|i| s[i * m + j])).0).collect();
    Ok((0..n)
        .filter_map(|i| {
            let j = argmax(s[i * m..(i + 1) * m].iter().copied()).0;
            (col_best[j] == i).then_some((i, j))
        })
        .collect())
}

/// Mean cosine over mutual-NN pairs; the unsupervised model-selection score.
pub fn unsupervised_criterion(wv: &Tensor, u: &Tensor, k: usize) -> Result<f64> {
    let pairs = mine_dictionary(wv, u, k)?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let cos = cosine_matrix(wv, u)?;
    let m = u.rows();
    Ok(pairs.iter().map(|&(i, j)| cos[i * m + j]).sum::<f64>() / pairs.len() as f64)
}
