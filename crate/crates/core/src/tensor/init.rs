use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;

/// Normal(0, std) resampled outside ±2·std.
pub fn truncated_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape is non-empty")
}

/// Seeded matrix with orthonormal rows (when `rows <= cols`) or orthonormal
/// columns otherwise, from Gram-Schmidt on a Gaussian draw.
pub fn orthogonal_init(rows: usize, cols: usize, seed: u64) -> Tensor {
    assert!(rows >= 1 && cols >= 1, "orthogonal_init needs positive extents");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for i in 0..n {
        // two passes of modified Gram-Schmidt keep the residual at fp64 level
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = vecs.split_at_mut(i);
                for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                    *x -= dot * y;
                }
            }
        }
        let norm = vecs[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        vecs[i].iter_mut().for_each(|x| *x /= norm);
    }
    let mut data = vec![0.0; rows * cols];
    for (i, v) in vecs.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            if rows <= cols {
                data[i * cols + j] = x;
            } else {
                data[j * cols + i] = x;
            }
        }
    }
    Tensor::new(vec![rows, cols], data).expect("shape is non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram(t: &Tensor) -> Tensor {
        t.matmul(&t.transpose2().unwrap()).unwrap()
    }

    #[test]
    fn rows_are_orthonormal() {
        let q = orthogonal_init(2, 8, 7);
        let g = gram(&q);
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g.data()[i * 2 + j] - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_row_has_unit_norm() {
        let q = orthogonal_init(1, 16, 3);
        assert!((q.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tall_matrix_has_orthonormal_columns() {
        let q = orthogonal_init(6, 3, 1);
        let g = q.transpose2().unwrap().matmul(&q).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g.data()[i * 3 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeded_and_deterministic() {
        let a = orthogonal_init(4, 8, 42);
        let b = orthogonal_init(4, 8, 42);
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&orthogonal_init(4, 8, 43)));
    }

    #[test]
    fn truncated_normal_stays_in_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = truncated_normal(&[1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|x| x.abs() <= 0.04));
    }
}
