use rand::Rng;

use super::gemm::gemm;
use super::params::ParamStore;
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gather { src: Var, idx: Vec<usize> },
    Concat(Vec<Var>),
    Permute { src: Var, perm: Vec<usize> },
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Dropout { src: Var, mask: Vec<f64> },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
    },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    Sum(Var),
    WeightedSum { src: Var, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it backwards.
///
/// Parameters enter through [`Graph::param`]; frozen parameters become
/// constant leaves, so nothing downstream of them accumulates gradient.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, String)>,
    training: bool,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..nd).rev() {
            counter[ax] += 1;
            offset += src_strides[ax];
            if counter[ax] < new_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * new_shape[ax];
            counter[ax] = 0;
        }
    }
    (out, new_shape)
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite output from {:?}",
            std::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Brings a stored parameter onto the tape. Frozen parameters enter as
    /// constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let p = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.leaf(p.value.clone(), !p.frozen);
        if !p.frozen {
            self.params.push((v, name.to_string()));
        }
        Ok(v)
    }

    /// Adds the gradients of every trainable parameter leaf into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (v, name) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                let p = store
                    .get_mut(name)
                    .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
                for (acc, x) in p.grad.iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
        Ok(())
    }

    /// `a[.., m, k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.len() < 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product over equal leading axes: `a[.., m, k] · b[.., k, n]`,
    /// or `a · bᵀ` with `b[.., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let nd = sa.len();
        if nd < 3 || sb.len() != nd || sa[..nd - 2] != sb[..nd - 2] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (kb, n) = if trans_b {
            (sb[nd - 1], sb[nd - 2])
        } else {
            (sb[nd - 2], sb[nd - 1])
        };
        if k != kb {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let mut shape = sa[..nd - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.check_broadcast(op, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let nb = db.len();
        Ok(da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % nb]))
            .collect())
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|x| x * c).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Row gather over the last axis: views `src` as `[rows, cols]` and
    /// returns `[idx.len(), cols]`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(src);
        let cols = v.last_dim();
        let rows = v.rows();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            out.extend_from_slice(v.row(i));
        }
        if idx.is_empty() {
            return Err(TensorError::Invalid("gather_rows: empty index".into()));
        }
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], out)?,
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat: no inputs".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(mismatch("concat", self.shape(first), s));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    pub fn permute(&mut self, src: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(mismatch("permute", &shape, perm));
        }
        let (out, new_shape) = permute_data(self.value(src).data(), &shape, perm);
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::new(new_shape, out)?,
            Op::Permute {
                src,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(src).clone().reshape(shape)?;
        let rg = self.rg(src);
        Ok(self.push(t, Op::Reshape(src), rg))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis of `[batch, .., keys]` scores where
    /// `key_valid[b * keys + k]` marks attendable keys for batch item `b`.
    /// Masked keys get probability exactly 0.
    pub fn masked_softmax(&mut self, x: Var, key_valid: &[bool], batch: usize) -> Result<Var> {
        self.softmax_impl(x, Some((key_valid, batch)))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<(&[bool], usize)>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let rows = xv.rows();
        if let Some((m, b)) = mask {
            if m.len() != b * c || rows % b != 0 {
                return Err(mismatch("masked_softmax", xv.shape(), &[b, c]));
            }
        }
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let valid: Option<&[bool]> = mask.map(|(m, b)| {
                let bi = r / (rows / b);
                &m[bi * c..(bi + 1) * c]
            });
            let ok = |j: usize| valid.map_or(true, |v| v[j]);
            let mx = (0..c)
                .filter(|&j| ok(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * c..(r + 1) * c];
            let mut s = 0.0;
            for j in 0..c {
                if ok(j) {
                    o[j] = (row[j] - mx).exp();
                    s += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f(a)).collect(),
        };
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |a| if a > 0.0 { a } else { slope * a },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Dropout { src: x, mask }, rg)
    }

    /// Summed cross-entropy of `[n, classes]` logits against integer
    /// targets. Rows whose target equals `ignore` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.last_dim();
        let rows = lv.rows();
        if targets.len() != rows {
            return Err(mismatch("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; rows * c];
        let mut loss = 0.0;
        for r in 0..rows {
            let t = targets[r];
            if t == ignore {
                continue;
            }
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    extent: c,
                });
            }
            let row = lv.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * c..(r + 1) * c];
            let mut s = 0.0;
            for j in 0..c {
                p[j] = (row[j] - mx).exp();
                s += p[j];
            }
            p.iter_mut().for_each(|v| *v /= s);
            loss += mx + s.ln() - row[t];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
            },
            rg,
        ))
    }

    /// Summed binary cross-entropy on logits with (possibly soft) targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(mismatch("bce_with_logits", lv.shape(), &[targets.len()]));
        }
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ w_i x_i` with a constant weight per element (0/1 for masking).
    pub fn masked_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(mismatch("masked_sum", xv.shape(), &[weights.len()]));
        }
        let s = xv.data().iter().zip(weights).map(|(a, w)| a * w).sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                src: x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Masked mean; an all-zero mask yields exactly 0.
    pub fn masked_mean(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let total: f64 = weights.iter().sum();
        let s = self.masked_sum(x, weights)?;
        Ok(if total > 0.0 { self.scale(s, 1.0 / total) } else { s })
    }

    /// Reverse pass from a scalar. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        accumulate(&mut self.grads[loss.0], 1)[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(gout);
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) -> Result<()> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let need = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let m = av.len() / k;
                if need(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, bv.data(), true, ga, 1.0);
                }
                if need(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    gemm(k, m, n, av.data(), true, g, false, gb, 1.0);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let nd = av.ndim();
                let (m, k) = (av.shape()[nd - 2], av.shape()[nd - 1]);
                let n = if *trans_b {
                    bv.shape()[nd - 2]
                } else {
                    bv.shape()[nd - 1]
                };
                let batch = av.len() / (m * k);
                if need(*a) {
                    let ga = accumulate(&mut grads[a.0], av.len());
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let bs = &bv.data()[t * k * n..(t + 1) * k * n];
                        // dA = dC · Bᵀ  (or dC · B when B was transposed)
                        gemm(m, n, k, gs, false, bs, !*trans_b, &mut ga[t * m * k..(t + 1) * m * k], 1.0);
                    }
                }
                if need(*b) {
                    let gb = accumulate(&mut grads[b.0], bv.len());
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let as_ = &av.data()[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            // dB[n,k] = dCᵀ · A
                            gemm(n, m, k, gs, true, as_, false, out, 1.0);
                        } else {
                            // dB[k,n] = Aᵀ · dC
                            gemm(k, m, n, as_, true, gs, false, out, 1.0);
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if need(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if need(*b) {
                    let nb = val(*b).len();
                    let gb = accumulate(&mut grads[b.0], nb);
                    for (j, y) in g.iter().enumerate() {
                        gb[j % nb] += sign * y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let nb = bv.len();
                if need(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (j, y) in g.iter().enumerate() {
                        ga[j] += y * bv[j % nb];
                    }
                }
                if need(*b) {
                    let gb = accumulate(&mut grads[b.0], nb);
                    for (j, y) in g.iter().enumerate() {
                        gb[j % nb] += y * av[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            Op::Gather { src, idx } => {
                let sv = val(*src);
                let cols = sv.last_dim();
                let gs = accumulate(&mut grads[src.0], sv.len());
                for (r, &row) in idx.iter().enumerate() {
                    let dst = &mut gs[row * cols..(row + 1) * cols];
                    dst.iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    if need(*p) {
                        let gp = accumulate(&mut grads[p.0], n);
                        gp.iter_mut().zip(&g[off..off + n]).for_each(|(x, y)| *x += y);
                    }
                    off += n;
                }
            }
            Op::Permute { src, perm } => {
                let mut inv = vec![0; perm.len()];
                for (j, &p) in perm.iter().enumerate() {
                    inv[p] = j;
                }
                let (back, _) = permute_data(g, nodes[i].value.shape(), &inv);
                let gs = accumulate(&mut grads[src.0], back.len());
                gs.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
            }
            Op::Reshape(src) => {
                let gs = accumulate(&mut grads[src.0], g.len());
                gs.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = val(*gamma).data();
                let d = gam.len();
                let rows = xhat.len() / d;
                if need(*gamma) {
                    let gg = accumulate(&mut grads[gamma.0], d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if need(*beta) {
                    let gb = accumulate(&mut grads[beta.0], d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if need(*x) {
                    let gx = accumulate(&mut grads[x.0], rows * d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gam[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let c = nodes[i].value.last_dim();
                let gx = accumulate(&mut grads[x.0], y.len());
                for r in 0..y.len() / c {
                    let ys = &y[r * c..(r + 1) * c];
                    let gs = &g[r * c..(r + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                let gx = accumulate(&mut grads[x.0], xv.len());
                for j in 0..xv.len() {
                    gx[j] += g[j] * gelu_grad(xv[j]);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let gx = accumulate(&mut grads[x.0], xv.len());
                for j in 0..xv.len() {
                    if xv[j] > 0.0 {
                        gx[j] += g[j];
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x).data();
                let gx = accumulate(&mut grads[x.0], xv.len());
                for j in 0..xv.len() {
                    gx[j] += if xv[j] > 0.0 { g[j] } else { slope * g[j] };
                }
            }
            Op::Sigmoid(x) => {
                let y = nodes[i].value.data();
                let gx = accumulate(&mut grads[x.0], y.len());
                for j in 0..y.len() {
                    gx[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }
            Op::Dropout { src, mask } => {
                let gx = accumulate(&mut grads[src.0], mask.len());
                for j in 0..mask.len() {
                    gx[j] += g[j] * mask[j];
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
            } => {
                let c = val(*logits).last_dim();
                let gx = accumulate(&mut grads[logits.0], probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    for j in 0..c {
                        gx[r * c + j] += g[0] * probs[r * c + j];
                    }
                    gx[r * c + t] -= g[0];
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let xv = val(*logits).data();
                let gx = accumulate(&mut grads[logits.0], xv.len());
                for j in 0..xv.len() {
                    gx[j] += g[0] * (sigmoid(xv[j]) - targets[j]);
                }
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                let gx = accumulate(&mut grads[x.0], n);
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::WeightedSum { src, weights } => {
                let gx = accumulate(&mut grads[src.0], weights.len());
                gx.iter_mut().zip(weights).for_each(|(v, w)| *v += g[0] * w);
            }
        }
        Ok(())
    }
}
