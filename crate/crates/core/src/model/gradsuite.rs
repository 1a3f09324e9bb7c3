//! Finite-difference checks of every differentiable primitive and of a
//! whole encoder block, exposed for the `grad-check` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{build_model, encoder_layer, reorder_hidden, trilayer_forward, unified_forward, ModelConfig, Tape, TransformerStack};
use crate::datakit::batches::{make_cdlm_batch, make_mlm_batch};
use crate::error::Result;
use crate::tensor::{grad_check, grad_check_in, GradCheckReport, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

/// Model with O(1) random weights so every path carries signal.
fn noisy_model(seed: u64) -> Result<TransformerStack> {
    let cfg = ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        ffn: 16,
        t_max: 10,
        vocab_size: 20,
        dropout: 0.0,
        ..Default::default()
    };
    let mut s = build_model(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let names: Vec<String> = s.params.names().map(str::to_string).collect();
    for n in names {
        let v = s.params.value_mut(&n)?;
        let r = randn(v.shape(), &mut rng);
        let gain = n.ends_with(".g");
        let data = r.data().iter().map(|x| if gain { 1.0 + 0.1 * x } else { 0.3 * x }).collect();
        *v = Tensor::new(v.shape().to_vec(), data)?;
    }
    Ok(s)
}

/// Central differences of a model loss with respect to one parameter.
fn param_check(stack: &TransformerStack, name: &str, loss: &dyn Fn(&TransformerStack) -> Result<(f64, Vec<f64>)>) -> Result<GradCheckReport> {
    let (_, analytic) = loss(stack)?;
    let h = 1e-5;
    let mut probe = stack.clone();
    let n = probe.params.value(name)?.len();
    let (mut worst, mut worst_index) = (0.0f64, 0);
    for i in 0..n {
        let o = probe.params.value(name)?.data()[i];
        probe.params.value_mut(name)?.data_mut()[i] = o + h;
        let (p, _) = loss(&probe)?;
        probe.params.value_mut(name)?.data_mut()[i] = o - h;
        let (m, _) = loss(&probe)?;
        probe.params.value_mut(name)?.data_mut()[i] = o;
        let num = (p - m) / (2.0 * h);
        let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1.0);
        if err > worst {
            worst = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        worst_index,
        passed: worst < TOLERANCE,
    })
}

/// Runs every check; each entry is `(name, report)`.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(String, GradCheckReport)> = Vec::new();
    let mut add = |name: &str, r: GradCheckReport| out.push((name.to_string(), r));

    let w = randn(&[4, 3], &mut rng);
    add("matmul", grad_check(|g, x| {
        let w = g.constant(w.clone());
        g.matmul(x, w)
    }, &randn(&[2, 5, 4], &mut rng), TOLERANCE)?);
    let a = randn(&[3, 2, 4], &mut rng);
    add("matmul.rhs", grad_check(|g, x| {
        let a = g.constant(a.clone());
        g.matmul(a, x)
    }, &randn(&[4, 3], &mut rng), TOLERANCE)?);
    for trans in [false, true] {
        let rhs = if trans { randn(&[3, 5, 4], &mut rng) } else { randn(&[3, 4, 5], &mut rng) };
        let tag = if trans { "bmm.t" } else { "bmm" };
        add(tag, grad_check(|g, x| {
            let b = g.constant(rhs.clone());
            g.bmm(x, b, trans)
        }, &randn(&[3, 2, 4], &mut rng), TOLERANCE)?);
        let lhs = randn(&[3, 2, 4], &mut rng);
        add(&format!("{tag}.rhs"), grad_check(|g, x| {
            let a = g.constant(lhs.clone());
            g.bmm(a, x, trans)
        }, &rhs, TOLERANCE)?);
    }
    let bias = randn(&[4], &mut rng);
    add("add", grad_check(|g, x| {
        let b = g.constant(bias.clone());
        g.add(x, b)
    }, &randn(&[3, 4], &mut rng), TOLERANCE)?);
    add("add.broadcast", grad_check(|g, x| {
        let m = g.constant(Tensor::zeros(&[3, 4]));
        g.add(m, x)
    }, &bias, TOLERANCE)?);
    let other = randn(&[3, 4], &mut rng);
    add("sub", grad_check(|g, x| {
        let o = g.constant(other.clone());
        let y = g.sub(o, x)?;
        g.sub(y, x)
    }, &randn(&[3, 4], &mut rng), TOLERANCE)?);
    add("mul", grad_check(|g, x| {
        let o = g.constant(other.clone());
        let y = g.mul(x, o)?;
        g.mul(y, x)
    }, &randn(&[3, 4], &mut rng), TOLERANCE)?);
    add("scale", grad_check(|g, x| Ok(g.scale(x, -1.7)), &randn(&[5], &mut rng), TOLERANCE)?);
    add("gather_rows", grad_check(|g, x| g.gather_rows(x, &[2, 0, 2, 1]), &randn(&[3, 4], &mut rng), TOLERANCE)?);
    add("concat", grad_check(|g, x| {
        let y = g.scale(x, 2.0);
        g.concat(&[x, y])
    }, &randn(&[2, 3], &mut rng), TOLERANCE)?);
    add("permute", grad_check(|g, x| g.permute(x, &[2, 0, 1]), &randn(&[2, 3, 4], &mut rng), TOLERANCE)?);
    add("reshape", grad_check(|g, x| g.reshape(x, &[6]), &randn(&[2, 3], &mut rng), TOLERANCE)?);

    let gamma = randn(&[6], &mut rng);
    let beta = randn(&[6], &mut rng);
    let ln_in = randn(&[3, 6], &mut rng);
    add("layer_norm", grad_check(|g, x| {
        let ga = g.constant(gamma.clone());
        let be = g.constant(beta.clone());
        g.layer_norm(x, ga, be, 1e-12)
    }, &ln_in, TOLERANCE)?);
    add("layer_norm.gain", grad_check(|g, x| {
        let i = g.constant(ln_in.clone());
        let be = g.constant(beta.clone());
        g.layer_norm(i, x, be, 1e-12)
    }, &gamma, TOLERANCE)?);
    add("layer_norm.bias", grad_check(|g, x| {
        let i = g.constant(ln_in.clone());
        let ga = g.constant(gamma.clone());
        g.layer_norm(i, ga, x, 1e-12)
    }, &beta, TOLERANCE)?);

    add("softmax", grad_check(|g, x| g.softmax(x), &randn(&[3, 5], &mut rng), TOLERANCE)?);
    add("masked_softmax", grad_check(
        |g, x| g.masked_softmax(x, &[true, false, true, true, true, true, false, true], 2),
        &randn(&[2, 2, 4], &mut rng),
        TOLERANCE,
    )?);
    add("gelu", grad_check(|g, x| Ok(g.gelu(x)), &randn(&[3, 5], &mut rng), TOLERANCE)?);
    // keep samples away from the kink at 0
    let away: Tensor = {
        let r = randn(&[3, 5], &mut rng);
        Tensor::new(vec![3, 5], r.data().iter().map(|v| v + 0.1 * v.signum()).collect())?
    };
    add("relu", grad_check(|g, x| Ok(g.relu(x)), &away, TOLERANCE)?);
    add("leaky_relu", grad_check(|g, x| Ok(g.leaky_relu(x, 0.01)), &away, TOLERANCE)?);
    add("sigmoid", grad_check(|g, x| Ok(g.sigmoid(x)), &randn(&[3, 5], &mut rng), TOLERANCE)?);
    add("dropout", grad_check_in(|g, x| {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        Ok(g.dropout(x, 0.3, &mut r))
    }, &randn(&[4, 5], &mut rng), TOLERANCE, true)?);
    add("cross_entropy", grad_check(|g, x| g.cross_entropy(x, &[1, 7, 0, 4], 7), &randn(&[4, 5], &mut rng), TOLERANCE)?);
    add("bce_with_logits", grad_check(|g, x| g.bce_with_logits(x, &[0.1, 0.9, 1.0, 0.0]), &randn(&[4], &mut rng), TOLERANCE)?);
    add("sum", grad_check(|g, x| Ok(g.sum(x)), &randn(&[2, 3], &mut rng), TOLERANCE)?);
    add("mean", grad_check(|g, x| Ok(g.mean(x)), &randn(&[2, 3], &mut rng), TOLERANCE)?);
    let wts = [1.0, 0.0, 2.0, 1.0, 0.0, -1.0];
    add("masked_sum", grad_check(|g, x| g.masked_sum(x, &wts), &randn(&[2, 3], &mut rng), TOLERANCE)?);
    add("masked_mean", grad_check(|g, x| g.masked_mean(x, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]), &randn(&[2, 3], &mut rng), TOLERANCE)?);

    let stack = noisy_model(seed)?;
    let d = stack.cfg.d_model;
    let (b, w) = (2, 3);
    let valid = vec![true, true, true, true, true, false];
    add("encoder_block.input", block_input_check(&stack, &randn(&[b * w, d], &mut rng), &|t, x| {
        encoder_layer(t, "lower.0", x, &valid, b, w)
    })?);
    let x = [7u32, 8, 9];
    let y = [10u32, 11];
    let cdlm = make_cdlm_batch(&[(&x, &y, &[2, 0])], (0, 1), stack.cfg.t_max)?;
    let width = cdlm.width();
    let out_valid: Vec<bool> = (0..width).map(|c| c < cdlm.out_len[0]).collect();
    add("trilayer.input", block_input_check(&stack, &randn(&[width, d], &mut rng), &|t, h| {
        let ho = reorder_hidden(t, h, &cdlm, width)?;
        trilayer_forward(t, ho, &cdlm, width, &out_valid)
    })?);

    let sents: Vec<Vec<u32>> = vec![vec![6, 7, 8, 9, 10], vec![11, 12, 13]];
    let refs: Vec<&[u32]> = sents.iter().map(|s| &s[..]).collect();
    let mlm = make_mlm_batch(&refs, 0, stack.cfg.vocab_size, stack.cfg.t_max, seed)?;
    let names: Vec<String> = stack.params.names().filter(|n| n.starts_with("lower.0.")).map(str::to_string).collect();
    for n in names {
        let loss = |s: &TransformerStack| -> Result<(f64, Vec<f64>)> {
            let mut t = Tape::new(s, false, 0);
            let fo = unified_forward(&mut t, &mlm)?;
            let v = t.g.value(fo.mlm_loss).item()?;
            t.g.backward(fo.mlm_loss)?;
            let mut store = s.params.clone();
            store.zero_grad();
            t.g.accumulate_into(&mut store)?;
            Ok((v, store.get(&n).map(|p| p.grad.clone()).unwrap_or_default()))
        };
        add(&format!("encoder_block.{}", &n["lower.0.".len()..]), param_check(&stack, &n, &loss)?);
    }
    Ok(out)
}

fn block_input_check(stack: &TransformerStack, x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var>) -> Result<GradCheckReport> {
    let n_out = {
        let mut t = Tape::new(stack, false, 0);
        let xv = t.g.leaf(x.clone(), true);
        let y = f(&mut t, xv)?;
        t.g.value(y).len()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let proj: Vec<f64> = (0..n_out).map(|_| StandardNormal.sample(&mut rng)).collect();
    let eval = |x: &Tensor, grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut t = Tape::new(stack, false, 0);
        let xv = t.g.leaf(x.clone(), true);
        let y = f(&mut t, xv)?;
        let l = t.g.masked_sum(y, &proj)?;
        let v = t.g.value(l).item()?;
        if !grad {
            return Ok((v, Vec::new()));
        }
        t.g.backward(l)?;
        Ok((v, t.g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()])))
    };
    let (_, analytic) = eval(x, true)?;
    let (mut worst, mut worst_index) = (0.0f64, 0);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let o = probe.data()[i];
        probe.data_mut()[i] = o + 1e-5;
        let (p, _) = eval(&probe, false)?;
        probe.data_mut()[i] = o - 1e-5;
        let (m, _) = eval(&probe, false)?;
        probe.data_mut()[i] = o;
        let num = (p - m) / 2e-5;
        let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1.0);
        if err > worst {
            worst = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        worst_index,
        passed: worst < TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_suite_passes() {
        let r = gradient_suite(3).unwrap();
        assert!(r.len() > 40, "{}", r.len());
        for (n, rep) in &r {
            assert!(rep.passed, "{n}: {rep:?}");
        }
    }
}
