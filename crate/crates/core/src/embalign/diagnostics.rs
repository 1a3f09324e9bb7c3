//! Similarity-distribution diagnostics for one probe token: a histogram of
//! its cosine to every other row and a 2-D PCA of its nearest neighbours.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::staticembed::{cosine, nearest_neighbors, EmbeddingSpace};

pub const PCA_NEIGHBOURS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub probe: usize,
    /// Bucket counts over [-1, 1]; a cosine of exactly 1 lands in the last.
    pub histogram: Vec<usize>,
    pub neighbours: Vec<(usize, f64)>,
    /// PCA coordinates, one per neighbour.
    pub pca: Vec<(f64, f64)>,
}

pub fn space_diagnostics(space: &EmbeddingSpace, probe: usize, bins: usize) -> Result<Diagnostics> {
    if bins == 0 {
        return Err(Error::Invalid("histogram needs at least one bin".into()));
    }
    if space.len() < 2 {
        return Err(Error::Invalid("diagnostics need at least two rows".into()));
    }
    let q = space.row(probe);
    let mut histogram = vec![0; bins];
    for i in (0..space.len()).filter(|&i| i != probe) {
        let c = cosine(q, space.row(i)).clamp(-1.0, 1.0);
        let b = (((c + 1.0) / 2.0) * bins as f64).floor() as usize;
        histogram[b.min(bins - 1)] += 1;
    }
    let neighbours = nearest_neighbors(space, probe, PCA_NEIGHBOURS.min(space.len() - 1))?;
    let rows: Vec<&[f64]> = neighbours.iter().map(|&(i, _)| space.row(i)).collect();
    let pca = pca_2d(&rows);
    Ok(Diagnostics {
        probe,
        histogram,
        neighbours,
        pca,
    })
}

fn power_iteration(cov: &[f64], d: usize) -> (f64, Vec<f64>) {
    // start away from any axis so a diagonal covariance still converges
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w: Vec<f64> = (0..d).map(|r| (0..d).map(|c| cov[r * d + c] * v[c]).sum()).collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-300 {
            return (0.0, vec![0.0; d]);
        }
        let next: Vec<f64> = w.iter().map(|x| x / n).collect();
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        lambda = n;
        if delta < 1e-13 {
            break;
        }
    }
    let (pivot, _) = v.iter().enumerate().fold((0, 0.0), |b, (i, x)| if x.abs() > b.1 { (i, x.abs()) } else { b });
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (lambda, v)
}

/// Top-two principal components of the centred rows, by power iteration
/// with deflation. Each component's largest entry is made positive.
pub fn principal_axes(rows: &[&[f64]]) -> [(f64, Vec<f64>); 2] {
    let d = rows.first().map_or(0, |r| r.len());
    let n = rows.len().max(1) as f64;
    let mean: Vec<f64> = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (r[a] - mean[a]) * (r[b] - mean[b]) / n;
            }
        }
    }
    let (l1, v1) = power_iteration(&cov, d);
    for a in 0..d {
        for b in 0..d {
            cov[a * d + b] -= l1 * v1[a] * v1[b];
        }
    }
    let (l2, v2) = power_iteration(&cov, d);
    [(l1, v1), (l2, v2)]
}

pub fn pca_2d(rows: &[&[f64]]) -> Vec<(f64, f64)> {
    let d = rows.first().map_or(0, |r| r.len());
    let n = rows.len().max(1) as f64;
    let mean: Vec<f64> = (0..d).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let [(_, a), (_, b)] = principal_axes(rows);
    rows.iter()
        .map(|r| {
            let proj = |v: &[f64]| r.iter().zip(&mean).zip(v).map(|((x, m), e)| (x - m) * e).sum::<f64>();
            (proj(&a), proj(&b))
        })
        .collect()
}

impl Diagnostics {
    /// Two CSV blocks: `bin_lo,bin_hi,count`, then `token,cosine,pc1,pc2`.
    pub fn to_csv(&self, space: &EmbeddingSpace) -> String {
        let bins = self.histogram.len();
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (b, c) in self.histogram.iter().enumerate() {
            let lo = -1.0 + 2.0 * b as f64 / bins as f64;
            let hi = -1.0 + 2.0 * (b + 1) as f64 / bins as f64;
            let _ = writeln!(out, "{lo:.4},{hi:.4},{c}");
        }
        out.push_str("\ntoken,cosine,pc1,pc2\n");
        for (&(i, cos), &(x, y)) in self.neighbours.iter().zip(&self.pca) {
            let _ = writeln!(out, "{},{cos:.6},{x:.6},{y:.6}", space.tokens[i]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space(rows: Vec<Vec<f64>>) -> EmbeddingSpace {
        let tokens = (0..rows.len()).map(|i| format!("t{i}")).collect();
        EmbeddingSpace::new(tokens, Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn identical_rows_spike_at_one() {
        let s = space(vec![vec![1.0, 2.0, 3.0]; 10]);
        let d = space_diagnostics(&s, 0, 20).unwrap();
        assert_eq!(d.histogram[19], 9);
        assert_eq!(d.histogram.iter().sum::<usize>(), 9);
        assert!(d.neighbours.iter().all(|&(i, _)| i != 0));
        assert!(d.pca.iter().all(|&(x, y)| x.abs() < 1e-12 && y.abs() < 1e-12));
    }

    #[test]
    fn probe_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = space((0..30).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect());
        let d = space_diagnostics(&s, 3, 10).unwrap();
        assert_eq!(d.histogram.iter().sum::<usize>(), 29);
        assert_eq!(d.neighbours.len(), 29);
        assert!(d.neighbours.iter().all(|&(i, _)| i != 3));
        let csv = d.to_csv(&s);
        assert!(csv.starts_with("bin_lo,bin_hi,count\n-1.0000,-0.8000,"));
        assert_eq!(csv.lines().count(), 1 + 10 + 1 + 1 + 29);
    }

    fn eigen_oracle(rows: &[&[f64]]) -> Vec<(f64, Vec<f64>)> {
        let (n, d) = (rows.len(), rows[0].len());
        let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = m.row_mean();
        let c = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = c.transpose() * &c / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut pairs: Vec<(f64, Vec<f64>)> = (0..d)
            .map(|k| (eig.eigenvalues[k], eig.eigenvectors.column(k).iter().copied().collect()))
            .collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        pairs
    }

    #[test]
    fn three_point_pca_matches_eigendecomposition() {
        let pts = [vec![1.0, 0.0, 2.0], vec![-1.0, 0.5, 0.0], vec![0.0, -2.0, 1.0]];
        let rows: Vec<&[f64]> = pts.iter().map(|r| &r[..]).collect();
        let axes = principal_axes(&rows);
        let oracle = eigen_oracle(&rows);
        for k in 0..2 {
            assert!((axes[k].0 - oracle[k].0).abs() < 1e-9);
            let dot: f64 = axes[k].1.iter().zip(&oracle[k].1).map(|(a, b)| a * b).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-9);
        }
        // projections preserve the pairwise distances of a rank-2 set
        let p = pca_2d(&rows);
        for i in 0..3 {
            for j in 0..3 {
                let orig: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum();
                let proj = (p[i].0 - p[j].0).powi(2) + (p[i].1 - p[j].1).powi(2);
                assert!((orig - proj).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_matches_oracle_on_random_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|c| rng.gen_range(-1.0..1.0) * (6 - c) as f64).collect())
            .collect();
        let rows: Vec<&[f64]> = pts.iter().map(|r| &r[..]).collect();
        let axes = principal_axes(&rows);
        let oracle = eigen_oracle(&rows);
        for k in 0..2 {
            assert!((axes[k].0 - oracle[k].0).abs() < 1e-8 * oracle[0].0);
        }
    }
}
