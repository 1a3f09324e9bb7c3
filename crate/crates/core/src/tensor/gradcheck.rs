use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, Result, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1)
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

const STEP: f64 = 1e-5;

/// Compares reverse-mode gradients of `f` at `point` with central
/// differences. Non-scalar outputs are contracted with a fixed Gaussian
/// projection so every output element participates.
pub fn grad_check<F>(f: F, point: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_in(f, point, tol, false)
}

/// [`grad_check`] on a graph in training or eval mode.
pub fn grad_check_in<F>(f: F, point: &Tensor, tol: f64, training: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |x: &Tensor, want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new(training);
        let xv = g.leaf(x.clone(), true);
        let out = f(&mut g, xv)?;
        let n = g.value(out).len();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let proj: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let loss = g.masked_sum(out, &proj)?;
        let value = g.value(loss).item()?;
        if !want_grad {
            return Ok((value, None));
        }
        g.backward(loss)?;
        let grad = g
            .grad(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()]);
        Ok((value, Some(grad)))
    };

    let (_, analytic) = eval(point, true)?;
    let analytic = analytic.unwrap_or_default();
    let mut worst = 0.0f64;
    let mut worst_index = 0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let (plus, _) = eval(&probe, false)?;
        probe.data_mut()[i] = orig - STEP;
        let (minus, _) = eval(&probe, false)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        if err > worst {
            worst = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        worst_index,
        passed: worst < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        // relu has a kink at 0; sampling exactly there gives a mismatch
        let point = Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap();
        let r = grad_check(|g, x| Ok(g.relu(x)), &point, 1e-6).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_index, 0);
    }

    #[test]
    fn matmul_and_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut randn = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
        };
        let b = randn(&[4, 2]);
        let r = grad_check(
            |g, x| {
                let b = g.constant(b.clone());
                g.matmul(x, b)
            },
            &randn(&[3, 4]),
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");

        let r = grad_check(
            |g, x| {
                let p = g.softmax(x)?;
                let l = g.cross_entropy(x, &[0, 2, 1], usize::MAX)?;
                let s = g.sum(p);
                g.add(l, s)
            },
            &randn(&[3, 5]),
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
