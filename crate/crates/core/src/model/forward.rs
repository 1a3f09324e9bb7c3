use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TransformerStack, LN_EPS};
use crate::datakit::batches::UnifiedBatch;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// A graph bound to one stack, caching parameter leaves so each tensor
/// enters the tape once per forward pass.
pub struct Tape<'s> {
    pub g: Graph,
    pub stack: &'s TransformerStack,
    cache: HashMap<String, Var>,
    rng: ChaCha8Rng,
}

impl<'s> Tape<'s> {
    pub fn new(stack: &'s TransformerStack, training: bool, seed: u64) -> Self {
        Tape {
            g: Graph::new(training),
            stack,
            cache: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.cache.get(name) {
            return Ok(v);
        }
        let v = self.g.param(&self.stack.params, name)?;
        self.cache.insert(name.to_string(), v);
        Ok(v)
    }

    fn dropout(&mut self, x: Var) -> Var {
        let p = self.stack.cfg.dropout;
        self.g.dropout(x, p, &mut self.rng)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.p(w)?, self.p(b)?);
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add(y, b)?)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        Ok(self.g.layer_norm(x, g, b, LN_EPS)?)
    }

    fn rows_of(&mut self, table: &str, idx: &[usize]) -> Result<Var> {
        let t = self.p(table)?;
        Ok(self.g.gather_rows(t, idx)?)
    }
}

/// Per-column validity for the first `width` columns of every instance.
fn valid_mask(lens: &[usize], width: usize) -> Vec<bool> {
    lens.iter().flat_map(|&n| (0..width).map(move |c| c < n)).collect()
}

fn trimmed<T: Copy>(full: &[T], t_max: usize, width: usize) -> Vec<T> {
    full.chunks(t_max).flat_map(|row| row[..width].iter().copied()).collect()
}

fn checked_ids(ids: &[u32], size: usize) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&i| {
            if (i as usize) < size {
                Ok(i as usize)
            } else {
                Err(Error::TokenOutOfRange { id: i, size })
            }
        })
        .collect()
}

/// E_wrd + E_seg + E_pos + E_lng over the input side, then layer norm and
/// dropout. Returns `[batch * width, d]`.
pub fn embed_input(t: &mut Tape, batch: &UnifiedBatch, width: usize) -> Result<Var> {
    let cfg = &t.stack.cfg;
    let (tm, vocab, nseg, nlng) = (batch.t_max, cfg.vocab_size, cfg.n_segments, cfg.n_languages);
    if width > cfg.t_max {
        return Err(Error::Batch(format!("width {width} exceeds model t_max {}", cfg.t_max)));
    }
    let words = checked_ids(&trimmed(&batch.input, tm, width), vocab)?;
    let segs = checked_ids(&trimmed(&batch.segment, tm, width), nseg)?;
    let langs = checked_ids(&trimmed(&batch.lang_in, tm, width), nlng)?;
    let pos: Vec<usize> = (0..batch.len()).flat_map(|_| 0..width).collect();
    let w = t.rows_of("emb.wrd", &words)?;
    let s = t.rows_of("emb.seg", &segs)?;
    let p = t.rows_of("emb.pos", &pos)?;
    let l = t.rows_of("emb.lng", &langs)?;
    let mut h = t.g.add(w, s)?;
    h = t.g.add(h, p)?;
    h = t.g.add(h, l)?;
    let h = t.layer_norm(h, "emb.ln")?;
    Ok(t.dropout(h))
}

/// One post-LN transformer block over `[batch * width, d]` rows.
pub fn encoder_layer(t: &mut Tape, prefix: &str, x: Var, key_valid: &[bool], batch: usize, width: usize) -> Result<Var> {
    let cfg = &t.stack.cfg;
    let (d, h) = (cfg.d_model, cfg.heads);
    let dh = d / h;
    let split = |t: &mut Tape, v: Var| -> Result<Var> {
        let v = t.g.reshape(v, &[batch, width, h, dh])?;
        Ok(t.g.permute(v, &[0, 2, 1, 3])?)
    };
    let q = t.linear(x, &format!("{prefix}.attn.wq"), &format!("{prefix}.attn.bq"))?;
    let q = t.g.scale(q, 1.0 / (dh as f64).sqrt());
    let q = split(t, q)?;
    let k = t.linear(x, &format!("{prefix}.attn.wk"), &format!("{prefix}.attn.bk"))?;
    let k = split(t, k)?;
    let v = t.linear(x, &format!("{prefix}.attn.wv"), &format!("{prefix}.attn.bv"))?;
    let v = split(t, v)?;
    let scores = t.g.bmm(q, k, true)?;
    let probs = t.g.masked_softmax(scores, key_valid, batch)?;
    let probs = t.dropout(probs);
    let ctx = t.g.bmm(probs, v, false)?;
    let ctx = t.g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = t.g.reshape(ctx, &[batch * width, d])?;
    let a = t.linear(ctx, &format!("{prefix}.attn.wo"), &format!("{prefix}.attn.bo"))?;
    let a = t.dropout(a);
    let x1 = t.g.add(x, a)?;
    let x1 = t.layer_norm(x1, &format!("{prefix}.ln1"))?;
    let f = t.linear(x1, &format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1"))?;
    let f = t.g.gelu(f);
    let f = t.linear(f, &format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2"))?;
    let f = t.dropout(f);
    let x2 = t.g.add(x1, f)?;
    t.layer_norm(x2, &format!("{prefix}.ln2"))
}

/// H^O[j] = H[O[j]] within each instance.
pub fn reorder_hidden(t: &mut Tape, h: Var, batch: &UnifiedBatch, width: usize) -> Result<Var> {
    let order = trimmed(&batch.order, batch.t_max, width);
    let idx: Vec<usize> = order
        .iter()
        .enumerate()
        .map(|(r, &o)| {
            let b = r / width;
            if o >= width {
                return Err(Error::AlignmentIndex { index: o, len: width });
            }
            Ok(b * width + o)
        })
        .collect::<Result<_>>()?;
    Ok(t.g.gather_rows(h, &idx)?)
}

/// Re-adds output-side position and language embeddings, then applies the
/// TRILayer block.
pub fn trilayer_forward(t: &mut Tape, ho: Var, batch: &UnifiedBatch, width: usize, out_valid: &[bool]) -> Result<Var> {
    let langs = checked_ids(&trimmed(&batch.lang_out, batch.t_max, width), t.stack.cfg.n_languages)?;
    let pos: Vec<usize> = (0..batch.len()).flat_map(|_| 0..width).collect();
    let p = t.rows_of("emb.pos", &pos)?;
    let l = t.rows_of("emb.lng", &langs)?;
    let x = t.g.add(ho, p)?;
    let x = t.g.add(x, l)?;
    encoder_layer(t, "trilayer", x, out_valid, batch.len(), width)
}

pub struct ForwardOutput {
    /// Final hidden states `[batch * width, d]`.
    pub hidden: Var,
    pub width: usize,
    /// Cross-entropy summed over the predict set.
    pub mlm_loss: Var,
    pub n_pred: usize,
    /// Rows of `hidden` that were scored, in order.
    pub pred_rows: Vec<usize>,
    pub pred_logits: Option<Var>,
    pub nsp_loss: Option<Var>,
    pub nsp_logits: Option<Var>,
    pub n_nsp: usize,
}

/// LM-head logits for selected rows of the final hidden states.
pub fn lm_logits(t: &mut Tape, hidden: Var, rows: &[usize]) -> Result<Var> {
    let x = t.g.gather_rows(hidden, rows)?;
    let x = t.linear(x, "head.transform.w", "head.transform.b")?;
    let x = t.g.gelu(x);
    let x = t.layer_norm(x, "head.ln")?;
    let dec = if t.stack.cfg.tie_head {
        let e = t.p("emb.wrd")?;
        t.g.permute(e, &[1, 0])?
    } else {
        t.p("head.decoder")?
    };
    let logits = t.g.matmul(x, dec)?;
    let bias = t.p("head.bias")?;
    Ok(t.g.add(logits, bias)?)
}

/// Final hidden states only.
pub fn encode(t: &mut Tape, batch: &UnifiedBatch) -> Result<(Var, usize)> {
    let width = batch.width();
    let b = batch.len();
    let in_valid = valid_mask(&batch.in_len, width);
    let out_valid = valid_mask(&batch.out_len, width);
    let mut h = embed_input(t, batch, width)?;
    for prefix in t.stack.lower_prefixes() {
        h = encoder_layer(t, &prefix, h, &in_valid, b, width)?;
    }
    let ho = reorder_hidden(t, h, batch, width)?;
    let mut h = trilayer_forward(t, ho, batch, width, &out_valid)?;
    for prefix in t.stack.upper_prefixes() {
        h = encoder_layer(t, &prefix, h, &out_valid, b, width)?;
    }
    Ok((h, width))
}

/// lower half → reorder by O → TRILayer → upper half → heads. The LM loss
/// is summed over the predict set only; NSP instances also get a two-way
/// loss on their first position.
pub fn unified_forward(t: &mut Tape, batch: &UnifiedBatch) -> Result<ForwardOutput> {
    let (hidden, width) = encode(t, batch)?;
    let tm = batch.t_max;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for k in 0..batch.len() {
        for c in 0..batch.out_len[k] {
            if batch.predict[k * tm + c] {
                rows.push(k * width + c);
                targets.push(batch.target[k * tm + c] as usize);
            }
        }
    }
    let (mlm_loss, pred_logits) = if rows.is_empty() {
        (t.g.constant(Tensor::scalar(0.0)), None)
    } else {
        let logits = lm_logits(t, hidden, &rows)?;
        (t.g.cross_entropy(logits, &targets, usize::MAX)?, Some(logits))
    };

    let nsp: Vec<(usize, usize)> = batch
        .nsp_label
        .iter()
        .enumerate()
        .filter_map(|(k, l)| l.map(|l| (k * width, l as usize)))
        .collect();
    let (nsp_loss, nsp_logits) = if nsp.is_empty() {
        (None, None)
    } else {
        let idx: Vec<usize> = nsp.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = nsp.iter().map(|p| p.1).collect();
        let first = t.g.gather_rows(hidden, &idx)?;
        let logits = t.linear(first, "head.nsp.w", "head.nsp.b")?;
        (Some(t.g.cross_entropy(logits, &labels, usize::MAX)?), Some(logits))
    };

    Ok(ForwardOutput {
        hidden,
        width,
        mlm_loss,
        n_pred: rows.len(),
        pred_rows: rows,
        pred_logits,
        nsp_loss,
        nsp_logits,
        n_nsp: nsp.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::batches::{make_cdlm_batch, make_mlm_batch};
    use crate::model::reference::mlm_loss_direct;
    use crate::model::{build_model, ModelConfig};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn cfg(d: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: d,
            heads: 2,
            ffn: 2 * d,
            t_max: 10,
            vocab_size: 30,
            dropout: 0.1,
            ..Default::default()
        }
    }

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
    }

    /// Loads random (not tiny) weights so numerical checks are meaningful.
    fn noisy(stack: &mut TransformerStack, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = stack.params.names().map(str::to_string).collect();
        for n in names {
            let v = stack.params.value_mut(&n).unwrap();
            let shape = v.shape().to_vec();
            let scale = if n.ends_with(".g") { 0.0 } else { 0.3 };
            let base = if n.ends_with(".g") { 1.0 } else { 0.0 };
            let r = randn(&shape, &mut rng);
            *v = Tensor::new(shape, r.data().iter().map(|x| base + scale * x).collect()).unwrap();
        }
    }

    #[test]
    fn unified_matches_dedicated_mlm_path() {
        let mut stack = build_model(&cfg(8), 1).unwrap();
        noisy(&mut stack, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sents: Vec<Vec<u32>> = (0..4)
            .map(|_| (0..rng.gen_range(1..7)).map(|_| rng.gen_range(6..30)).collect())
            .collect();
        let refs: Vec<&[u32]> = sents.iter().map(|s| &s[..]).collect();
        let batch = make_mlm_batch(&refs, 1, 30, 10, 4).unwrap();
        let mut t = Tape::new(&stack, false, 0);
        let out = unified_forward(&mut t, &batch).unwrap();
        let unified = t.g.value(out.mlm_loss).item().unwrap();
        let direct: f64 = (0..batch.len()).map(|k| mlm_loss_direct(&stack, &batch.item(k)).unwrap()).sum();
        assert!((unified - direct).abs() < 1e-9, "{unified} vs {direct}");
    }

    #[test]
    fn empty_predict_set_gives_zero() {
        let stack = build_model(&cfg(8), 1).unwrap();
        let a = [7u32, 8];
        let mut batch = make_mlm_batch(&[&a], 0, 30, 10, 0).unwrap();
        batch.predict.iter_mut().for_each(|p| *p = false);
        let mut t = Tape::new(&stack, true, 0);
        let out = unified_forward(&mut t, &batch).unwrap();
        assert_eq!(t.g.value(out.mlm_loss).item().unwrap(), 0.0);
    }

    #[test]
    fn cdlm_loss_at_init_near_uniform() {
        let stack = build_model(&ModelConfig { vocab_size: 200, ..cfg(16) }, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<(Vec<u32>, Vec<u32>, Vec<usize>)> = (0..16)
            .map(|_| {
                let x: Vec<u32> = (0..5).map(|_| rng.gen_range(6..200)).collect();
                let y: Vec<u32> = (0..5).map(|_| rng.gen_range(6..200)).collect();
                (x, y, vec![4, 3, 2, 1, 0])
            })
            .collect();
        let triples: Vec<(&[u32], &[u32], &[usize])> = data.iter().map(|(a, b, c)| (&a[..], &b[..], &c[..])).collect();
        let batch = make_cdlm_batch(&triples, (0, 1), 10).unwrap();
        let mut t = Tape::new(&stack, false, 0);
        let out = unified_forward(&mut t, &batch).unwrap();
        let per = t.g.value(out.mlm_loss).item().unwrap() / out.n_pred as f64;
        let want = (200f64).ln();
        assert!((per - want).abs() < 0.05 * want, "{per} vs {want}");
    }

    #[test]
    fn reorder_gathers_rows() {
        let stack = build_model(&cfg(8), 0).unwrap();
        let x = [7u32, 8];
        let y = [9u32, 10, 11];
        // O=[1,0,2]: two sources reversed, then the [P] slot
        let batch = make_cdlm_batch(&[(&x, &y, &[1, 0, 2])], (0, 1), 10).unwrap();
        let width = batch.width();
        let mut t = Tape::new(&stack, false, 0);
        let rows: Vec<f64> = (0..width * 4).map(|v| v as f64).collect();
        let h = t.g.constant(Tensor::new(vec![width, 4], rows).unwrap());
        let ho = reorder_hidden(&mut t, h, &batch, width).unwrap();
        let got = t.g.value(ho);
        // outputs [CLS] y0 y1 y2 [SEP] read inputs 0, 2, 1, 4 ([P]), 3
        for (j, src) in [0usize, 2, 1, 4, 3].iter().enumerate() {
            assert_eq!(got.row(j), &(src * 4..src * 4 + 4).map(|v| v as f64).collect::<Vec<_>>()[..]);
        }
    }

    #[test]
    fn language_embedding_isolated() {
        let stack = build_model(&ModelConfig { dropout: 0.0, ..cfg(8) }, 4).unwrap();
        let a = [7u32, 8, 9];
        let run = |lang: u32| {
            let batch = make_mlm_batch(&[&a], lang, 30, 10, 0).unwrap();
            let mut t = Tape::new(&stack, false, 0);
            let w = batch.width();
            let mut b2 = batch.clone();
            b2.input = batch.target.clone();
            let h = embed_input(&mut t, &b2, w).unwrap();
            t.g.value(h).clone()
        };
        let (h0, h1) = (run(0), run(1));
        // pre-norm sums differ by exactly E_lng[1] - E_lng[0]; after the
        // norm the rows still differ
        assert_ne!(h0, h1);
        let mut zeroed = stack.clone();
        let d = zeroed.cfg.d_model;
        *zeroed.params.value_mut("emb.lng").unwrap() = Tensor::zeros(&[2, d]);
        let batch = make_mlm_batch(&[&a], 0, 30, 10, 0).unwrap();
        let mut b1 = batch.clone();
        b1.lang_in.iter_mut().for_each(|l| *l = 1);
        let emb = |b: &UnifiedBatch| {
            let mut t = Tape::new(&zeroed, false, 0);
            let h = embed_input(&mut t, b, b.width()).unwrap();
            t.g.value(h).clone()
        };
        assert_eq!(emb(&batch), emb(&b1));
    }

    /// Finite differences of `Σ proj ⊙ f(x)` against the tape gradient.
    fn fd_check(stack: &TransformerStack, x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
        let n_out = {
            let mut t = Tape::new(stack, false, 0);
            let xv = t.g.leaf(x.clone(), true);
            let y = f(&mut t, xv);
            t.g.value(y).len()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let proj: Vec<f64> = (0..n_out).map(|_| rng.sample(StandardNormal)).collect();
        let eval = |x: &Tensor, grad: bool| {
            let mut t = Tape::new(stack, false, 0);
            let xv = t.g.leaf(x.clone(), true);
            let y = f(&mut t, xv);
            let l = t.g.masked_sum(y, &proj).unwrap();
            let val = t.g.value(l).item().unwrap();
            if grad {
                t.g.backward(l).unwrap();
                (val, t.g.grad(xv).unwrap().to_vec())
            } else {
                (val, vec![])
            }
        };
        let (_, analytic) = eval(x, true);
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut probe = x.clone();
        for i in 0..x.len() {
            let o = probe.data()[i];
            probe.data_mut()[i] = o + h;
            let (p, _) = eval(&probe, false);
            probe.data_mut()[i] = o - h;
            let (m, _) = eval(&probe, false);
            probe.data_mut()[i] = o;
            let num = (p - m) / (2.0 * h);
            worst = worst.max((num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1.0));
        }
        worst
    }

    #[test]
    fn transformer_block_grad_check() {
        let mut stack = build_model(&ModelConfig { dropout: 0.0, ..cfg(16) }, 5).unwrap();
        noisy(&mut stack, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (b, w) = (2, 3);
        let x = randn(&[b * w, 16], &mut rng);
        let valid = vec![true, true, true, true, true, false];
        let err = fd_check(&stack, &x, &|t, xv| encoder_layer(t, "lower.0", xv, &valid, b, w).unwrap());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn trilayer_grad_check() {
        let mut stack = build_model(&ModelConfig { dropout: 0.0, ..cfg(16) }, 5).unwrap();
        noisy(&mut stack, 9);
        let x = [7u32, 8, 9];
        let y = [10u32, 11];
        let batch = make_cdlm_batch(&[(&x, &y, &[2, 0])], (0, 1), 10).unwrap();
        let width = batch.width();
        let valid = valid_mask(&batch.out_len, width);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = randn(&[width, 16], &mut rng);
        let err = fd_check(&stack, &h, &|t, hv| {
            let ho = reorder_hidden(t, hv, &batch, width).unwrap();
            trilayer_forward(t, ho, &batch, width, &valid).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn trilayer_without_extra_embeddings_is_plain_layer() {
        let mut stack = build_model(&ModelConfig { dropout: 0.0, ..cfg(8) }, 5).unwrap();
        *stack.params.value_mut("emb.pos").unwrap() = Tensor::zeros(&[10, 8]);
        *stack.params.value_mut("emb.lng").unwrap() = Tensor::zeros(&[2, 8]);
        let x = [7u32, 8, 9];
        let y = [10u32, 11, 12];
        let batch = make_cdlm_batch(&[(&x, &y, &[0, 1, 2])], (0, 1), 10).unwrap();
        let width = batch.width();
        let valid = valid_mask(&batch.out_len, width);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = randn(&[width, 8], &mut rng);
        let mut t = Tape::new(&stack, false, 0);
        let hv = t.g.constant(h);
        let ho = reorder_hidden(&mut t, hv, &batch, width).unwrap();
        let a = trilayer_forward(&mut t, ho, &batch, width, &valid).unwrap();
        let b = encoder_layer(&mut t, "trilayer", ho, &valid, 1, width).unwrap();
        assert_eq!(t.g.value(a), t.g.value(b));
        assert_eq!(t.g.value(a).shape(), &[width, 8]);
    }

    #[test]
    fn frozen_lower_half_gets_no_gradient() {
        use crate::model::Group;
        let mut stack = build_model(&ModelConfig { layers: 4, ..cfg(8) }, 3).unwrap();
        stack.set_frozen_groups(&[Group::Lower]).unwrap();
        let a = [7u32, 8, 9, 10];
        let batch = make_mlm_batch(&[&a, &a[..2]], 0, 30, 10, 1).unwrap();
        let mut t = Tape::new(&stack, true, 0);
        let out = unified_forward(&mut t, &batch).unwrap();
        t.g.backward(out.mlm_loss).unwrap();
        let mut store = stack.params.clone();
        t.g.accumulate_into(&mut store).unwrap();
        for (name, p) in store.iter() {
            let zero = p.grad.iter().all(|&g| g == 0.0);
            if name.starts_with("lower.") {
                assert!(zero, "{name}");
            }
        }
        assert!(store.iter().any(|(n, p)| n.starts_with("upper.") && p.grad.iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn batch_order_does_not_change_loss() {
        let stack = build_model(&cfg(8), 3).unwrap();
        let a = [7u32, 8, 9, 10];
        let b = [11u32, 12];
        let m1 = make_mlm_batch(&[&a], 0, 30, 10, 1).unwrap();
        let m2 = make_mlm_batch(&[&b], 1, 30, 10, 2).unwrap();
        let loss = |parts: &[&UnifiedBatch]| {
            let batch = UnifiedBatch::concat(parts).unwrap();
            let mut t = Tape::new(&stack, false, 0);
            let out = unified_forward(&mut t, &batch).unwrap();
            t.g.value(out.mlm_loss).item().unwrap()
        };
        let (x, y) = (loss(&[&m1, &m2]), loss(&[&m2, &m1]));
        assert!((x - y).abs() < 1e-10);
        assert!((x - loss(&[&m1]) - loss(&[&m2])).abs() < 1e-10);
    }
}
