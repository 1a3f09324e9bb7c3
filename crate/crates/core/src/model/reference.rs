//! A dedicated MLM forward pass: one unpadded sequence at a time, plain
//! loops, no tape and no reordering. Used to cross-check the unified path.

use super::{TransformerStack, LN_EPS};
use crate::datakit::batches::{BatchItem, BatchKind};
use crate::error::{Error, Result};

type Rows = Vec<Vec<f64>>;

fn affine(x: &[f64], w: &[f64], b: &[f64], d_out: usize) -> Vec<f64> {
    let mut y = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        let row = &w[i * d_out..(i + 1) * d_out];
        for (yj, wj) in y.iter_mut().zip(row) {
            *yj += xi * wj;
        }
    }
    y
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(g.iter().zip(b)).map(|(v, (g, b))| (v - mean) * r * g + b).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

struct View<'a>(&'a TransformerStack);

impl View<'_> {
    fn t(&self, name: &str) -> Result<&[f64]> {
        Ok(self.0.params.value(name)?.data())
    }

    fn block(&self, prefix: &str, x: &Rows) -> Result<Rows> {
        let cfg = &self.0.cfg;
        let (d, h) = (cfg.d_model, cfg.heads);
        let dh = d / h;
        let p = |s: &str| format!("{prefix}.{s}");
        let proj = |w: &str, b: &str| -> Result<Rows> {
            let (w, b) = (self.t(&p(w))?, self.t(&p(b))?);
            Ok(x.iter().map(|r| affine(r, w, b, d)).collect())
        };
        let (q, k, v) = (proj("attn.wq", "attn.bq")?, proj("attn.wk", "attn.bk")?, proj("attn.wv", "attn.bv")?);
        let n = x.len();
        let mut ctx = vec![vec![0.0; d]; n];
        for head in 0..h {
            let sl = head * dh..(head + 1) * dh;
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| q[i][sl.clone()].iter().zip(&k[j][sl.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in sl.clone() {
                        ctx[i][c] += ej / z * v[j][c];
                    }
                }
            }
        }
        let (wo, bo) = (self.t(&p("attn.wo"))?, self.t(&p("attn.bo"))?);
        let (g1, b1) = (self.t(&p("ln1.g"))?, self.t(&p("ln1.b"))?);
        let (w1, bb1) = (self.t(&p("ffn.w1"))?, self.t(&p("ffn.b1"))?);
        let (w2, bb2) = (self.t(&p("ffn.w2"))?, self.t(&p("ffn.b2"))?);
        let (g2, b2) = (self.t(&p("ln2.g"))?, self.t(&p("ln2.b"))?);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let a = affine(&ctx[i], wo, bo, d);
            let r: Vec<f64> = x[i].iter().zip(&a).map(|(u, v)| u + v).collect();
            let x1 = layer_norm(&r, g1, b1);
            let f: Vec<f64> = affine(&x1, w1, bb1, cfg.ffn).into_iter().map(gelu).collect();
            let f = affine(&f, w2, bb2, d);
            let r: Vec<f64> = x1.iter().zip(&f).map(|(u, v)| u + v).collect();
            out.push(layer_norm(&r, g2, b2));
        }
        Ok(out)
    }
}

/// Summed masked-LM cross-entropy of one MLM-shaped instance, eval mode.
pub fn mlm_loss_direct(stack: &TransformerStack, item: &BatchItem) -> Result<f64> {
    if item.kind != BatchKind::Mlm {
        return Err(Error::Batch("dedicated path handles MLM instances only".into()));
    }
    let cfg = &stack.cfg;
    let d = cfg.d_model;
    let v = View(stack);
    let row = |name: &str, i: usize| -> Result<Vec<f64>> {
        let t = stack.params.value(name)?;
        if i >= t.rows() {
            return Err(Error::TokenOutOfRange {
                id: i as u32,
                size: t.rows(),
            });
        }
        Ok(t.row(i).to_vec())
    };
    let (eg, eb) = (v.t("emb.ln.g")?, v.t("emb.ln.b")?);
    let mut x: Rows = Vec::with_capacity(item.input.len());
    for (p, &tok) in item.input.iter().enumerate() {
        let w = row("emb.wrd", tok as usize)?;
        let s = row("emb.seg", item.segment[p] as usize)?;
        let ps = row("emb.pos", p)?;
        let l = row("emb.lng", item.lang_in[p] as usize)?;
        let sum: Vec<f64> = (0..d).map(|c| w[c] + s[c] + ps[c] + l[c]).collect();
        x.push(layer_norm(&sum, eg, eb));
    }
    for prefix in stack.lower_prefixes() {
        x = v.block(&prefix, &x)?;
    }
    for (p, r) in x.iter_mut().enumerate() {
        let ps = row("emb.pos", p)?;
        let l = row("emb.lng", item.lang_out[p] as usize)?;
        r.iter_mut().enumerate().for_each(|(c, val)| *val += ps[c] + l[c]);
    }
    x = v.block("trilayer", &x)?;
    for prefix in stack.upper_prefixes() {
        x = v.block(&prefix, &x)?;
    }

    let (tw, tb) = (v.t("head.transform.w")?, v.t("head.transform.b")?);
    let (hg, hb) = (v.t("head.ln.g")?, v.t("head.ln.b")?);
    let bias = v.t("head.bias")?;
    let mut loss = 0.0;
    for (p, &c) in item.predict.iter().enumerate() {
        if !c {
            continue;
        }
        let hdn: Vec<f64> = affine(&x[p], tw, tb, d).into_iter().map(gelu).collect();
        let hdn = layer_norm(&hdn, hg, hb);
        let logits: Vec<f64> = (0..cfg.vocab_size)
            .map(|tok| {
                let w = if cfg.tie_head {
                    stack.params.value("emb.wrd").map(|e| e.row(tok).to_vec())
                } else {
                    stack
                        .params
                        .value("head.decoder")
                        .map(|dec| (0..d).map(|i| dec.data()[i * cfg.vocab_size + tok]).collect())
                };
                w.map(|w| w.iter().zip(&hdn).map(|(a, b)| a * b).sum::<f64>() + bias[tok])
            })
            .collect::<std::result::Result<_, _>>()?;
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        loss += lse - logits[item.target[p] as usize];
    }
    Ok(loss)
}
