//! Mapping a freshly trained embedding space V onto a fixed space U.
//!
//! The adversarial stage trains a small discriminator to tell mapped rows
//! `W v` from rows of `U` while `W` learns to fool it; Procrustes rounds then
//! refine `W` in closed form on a dictionary mined with CSLS.

mod csls;
mod diagnostics;

pub use csls::{cosine_matrix, csls_from_cosines, csls_matrix, csls_translate, mine_dictionary, unsupervised_criterion};
pub use diagnostics::{pca_2d, principal_axes, space_diagnostics, Diagnostics, PCA_NEIGHBOURS};

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datakit::{Checkpoint, RunConfig};
use crate::error::{Error, Result};
use crate::staticembed::EmbeddingSpace;
use crate::tensor::{adam_step, truncated_normal, AdamConfig, Graph, ParamStore, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const CHECKPOINT_NAME: &str = "embalign.W";

/// `W` in `x ↦ W x`, applied to row vectors as `x Wᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub w: Tensor,
}

impl LinearMap {
    pub fn identity(d: usize) -> Self {
        let mut w = Tensor::zeros(&[d, d]);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
        LinearMap { w }
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    /// Maps every row of `m`.
    pub fn apply(&self, m: &Tensor) -> Result<Tensor> {
        if m.last_dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                left: m.last_dim(),
                right: self.dim(),
            });
        }
        Ok(m.matmul(&self.w.transpose2()?)?)
    }

    pub fn apply_space(&self, s: &EmbeddingSpace) -> Result<EmbeddingSpace> {
        EmbeddingSpace::new(s.tokens.clone(), self.apply(&s.matrix)?)
    }

    /// `‖WᵀW − I‖_F`.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.dim();
        let wtw = self.w.transpose2().and_then(|t| t.matmul(&self.w)).expect("square map");
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                let e = wtw.data()[i * d + j] - if i == j { 1.0 } else { 0.0 };
                s += e * e;
            }
        }
        s.sqrt()
    }

    /// `W ← (1+β) W − β (W Wᵀ) W`.
    pub fn orthogonalize(&mut self, beta: f64) {
        let wwt = self.w.matmul(&self.w.transpose2().expect("2-d")).expect("square");
        let wwtw = wwt.matmul(&self.w).expect("square");
        for (a, b) in self.w.data_mut().iter_mut().zip(wwtw.data()) {
            *a = (1.0 + beta) * *a - beta * b;
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "embalign");
        ck.push_tensor(CHECKPOINT_NAME, &self.w)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let w = ck.tensor(CHECKPOINT_NAME)?;
        if w.ndim() != 2 || w.rows() != w.last_dim() {
            return Err(Error::Checkpoint {
                expected: "square embalign.W".into(),
                found: format!("{:?}", w.shape()),
            });
        }
        Ok(LinearMap { w })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// `d → h → h → 1` MLP with Leaky-ReLU hidden units; the output logit is
/// read through a sigmoid as "this row came from the mapped space".
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub params: ParamStore,
}

impl Discriminator {
    pub fn new(d: usize, h: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (i, (fan_in, fan_out)) in [(d, h), (h, h), (h, 1)].into_iter().enumerate() {
            let w = truncated_normal(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), &mut rng);
            params.insert(format!("dis.w{i}"), w)?;
            params.insert(format!("dis.b{i}"), Tensor::zeros(&[fan_out]))?;
        }
        Ok(Discriminator { params })
    }

    /// Logits `[n, 1]` for input rows `x [n, d]`.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..3 {
            let w = g.param(&self.params, &format!("dis.w{i}"))?;
            let b = g.param(&self.params, &format!("dis.b{i}"))?;
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if i < 2 {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }

    /// Probability that each row of `x` is a mapped row.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new(false);
        let xv = g.constant(x.clone());
        let l = self.logits(&mut g, xv)?;
        Ok(g.value(l).data().iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect())
    }
}

/// Discriminator loss on one batch: mapped rows followed by `U` rows, both
/// halves of size `b`, each half averaged separately and summed. Mapped rows
/// carry target `1 − s` and `U` rows `s`; `flip` swaps the targets, which
/// gives the mapping loss.
pub fn gan_loss(g: &mut Graph, dis: &Discriminator, mapped: Var, u: Var, smoothing: f64, flip: bool) -> Result<Var> {
    let b = g.shape(mapped)[0];
    if g.shape(u)[0] != b {
        return Err(Error::Invalid("gan loss needs equal batch halves".into()));
    }
    let x = g.concat(&[mapped, u])?;
    let logits = dis.logits(g, x)?;
    let mut y: Vec<f64> = (0..2 * b).map(|i| if i < b { 1.0 - smoothing } else { smoothing }).collect();
    if flip {
        y.iter_mut().for_each(|t| *t = 1.0 - *t);
    }
    let l = g.bce_with_logits(logits, &y)?;
    Ok(g.scale(l, 1.0 / b as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvConfig {
    pub epochs: usize,
    pub steps: usize,
    pub batch: usize,
    pub dis_steps: usize,
    pub lr_d: f64,
    pub lr_w: f64,
    pub lr_decay: f64,
    pub orth_beta: f64,
    pub smoothing: f64,
    /// Discriminator width; 0 means `4 d`.
    pub hidden: usize,
    pub csls_k: usize,
    pub refine_rounds: usize,
    pub seed: u64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            epochs: 5,
            steps: 500,
            batch: 64,
            dis_steps: 3,
            lr_d: 1e-3,
            lr_w: 0.1,
            lr_decay: 0.95,
            orth_beta: 0.01,
            smoothing: 0.1,
            hidden: 0,
            csls_k: 10,
            refine_rounds: 5,
            seed: 0,
        }
    }
}

impl AdvConfig {
    pub fn from_run(c: &RunConfig, seed: u64) -> Result<Self> {
        Ok(AdvConfig {
            epochs: c.usize("embalign.epochs")?,
            steps: c.usize("embalign.steps")?,
            batch: c.usize("embalign.batch")?,
            dis_steps: c.usize("embalign.dis_steps")?,
            lr_d: c.f64("embalign.lr_d")?,
            lr_w: c.f64("embalign.lr_w")?,
            lr_decay: c.f64("embalign.lr_decay")?,
            orth_beta: c.f64("embalign.orth_beta")?,
            smoothing: c.f64("embalign.smoothing")?,
            hidden: c.usize("embalign.hidden")?,
            csls_k: c.usize("embalign.csls_k")?,
            refine_rounds: c.usize("embalign.refine_rounds")?,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub dis_accuracy: f64,
    pub criterion: f64,
    pub lr_w: f64,
    pub orthogonality: f64,
}

#[derive(Debug, Clone)]
pub struct AdvResult {
    pub map: LinearMap,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn pick_rows(m: &Tensor, idx: &[usize]) -> Tensor {
    let d = m.last_dim();
    let data = idx.iter().flat_map(|&i| m.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), d], data).expect("row pick")
}

fn check_dims(u: &Tensor, v: &Tensor) -> Result<()> {
    if u.last_dim() != v.last_dim() {
        return Err(Error::DimensionMismatch {
            left: v.last_dim(),
            right: u.last_dim(),
        });
    }
    if u.rows() == 0 || v.rows() == 0 {
        return Err(Error::EmptyCorpus("embedding space has no rows".into()));
    }
    Ok(())
}

/// Share of rows the discriminator classifies correctly, both spaces in full.
pub fn discriminator_accuracy(dis: &Discriminator, wv: &Tensor, u: &Tensor) -> Result<f64> {
    let pm = dis.predict(wv)?;
    let pu = dis.predict(u)?;
    let hits = pm.iter().filter(|&&p| p > 0.5).count() + pu.iter().filter(|&&p| p <= 0.5).count();
    Ok(hits as f64 / (pm.len() + pu.len()) as f64)
}

/// Alternating adversarial training from `W = I`. `U` is only read; the
/// returned map is the epoch with the best unsupervised criterion.
pub fn adversarial_align(u: &Tensor, v: &Tensor, cfg: &AdvConfig) -> Result<AdvResult> {
    check_dims(u, v)?;
    let d = u.last_dim();
    let b = cfg.batch.min(u.rows()).min(v.rows()).max(1);
    let hidden = if cfg.hidden == 0 { 4 * d } else { cfg.hidden };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dis = Discriminator::new(d, hidden, rng.gen())?;
    let adam = AdamConfig {
        lr: cfg.lr_d,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut map = LinearMap::identity(d);
    let mut lr_w = cfg.lr_w;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = (LinearMap::identity(d), f64::NEG_INFINITY, 0);
    let batch_of = |rng: &mut ChaCha8Rng, m: &Tensor| pick_rows(m, &sample(rng, m.rows(), b).into_vec());

    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.steps {
            for _ in 0..cfg.dis_steps {
                let vb = map.apply(&batch_of(&mut rng, v))?;
                let ub = batch_of(&mut rng, u);
                let mut g = Graph::new(true);
                let (mv, uv) = (g.constant(vb), g.constant(ub));
                let loss = gan_loss(&mut g, &dis, mv, uv, cfg.smoothing, false)?;
                g.backward(loss)?;
                g.accumulate_into(&mut dis.params)?;
                adam_step(&mut dis.params, &adam)?;
            }
            let vb = batch_of(&mut rng, v);
            let ub = batch_of(&mut rng, u);
            let mut g = Graph::new(true);
            let wt = g.leaf(map.w.transpose2()?, true);
            let vv = g.constant(vb);
            let mapped = g.matmul(vv, wt)?;
            let uv = g.constant(ub);
            let frozen = Discriminator {
                params: frozen_copy(&dis.params),
            };
            let loss = gan_loss(&mut g, &frozen, mapped, uv, cfg.smoothing, true)?;
            g.backward(loss)?;
            let gwt = g.grad(wt).ok_or_else(|| Error::Invalid("mapping received no gradient".into()))?;
            // gradient is with respect to Wᵀ
            for r in 0..d {
                for c in 0..d {
                    map.w.data_mut()[r * d + c] -= lr_w * gwt[c * d + r];
                }
            }
            map.orthogonalize(cfg.orth_beta);
        }
        let wv = map.apply(v)?;
        let criterion = unsupervised_criterion(&wv, u, cfg.csls_k.min(u.rows().min(v.rows()) - 1).max(1))?;
        let entry = EpochLog {
            epoch,
            dis_accuracy: discriminator_accuracy(&dis, &wv, u)?,
            criterion,
            lr_w,
            orthogonality: map.orthogonality_error(),
        };
        if criterion > best.1 {
            best = (map.clone(), criterion, epoch);
        }
        log.push(entry);
        lr_w *= cfg.lr_decay;
    }
    if cfg.epochs == 0 {
        return Ok(AdvResult {
            map,
            log,
            best_epoch: 0,
        });
    }
    Ok(AdvResult {
        map: best.0,
        log,
        best_epoch: best.2,
    })
}

fn frozen_copy(store: &ParamStore) -> ParamStore {
    let mut s = store.clone();
    s.freeze_where(|_| true);
    s
}

/// Orthogonal `W` minimising `Σ ‖W v_i − u_j‖²` over the `(i, j)` pairs of
/// `dict` (rows of `V`, rows of `U`): `W = A Bᵀ` with `A S Bᵀ = Σ u_j v_iᵀ`.
pub fn procrustes(u: &Tensor, v: &Tensor, dict: &[(usize, usize)]) -> Result<LinearMap> {
    check_dims(u, v)?;
    let d = u.last_dim();
    if dict.is_empty() {
        return Err(Error::RankDeficient { dict_size: 0 });
    }
    let mut m = DMatrix::<f64>::zeros(d, d);
    for &(i, j) in dict {
        if i >= v.rows() || j >= u.rows() {
            return Err(Error::TokenOutOfRange {
                id: i.max(j) as u32,
                size: if i >= v.rows() { v.rows() } else { u.rows() },
            });
        }
        let (vi, uj) = (v.row(i), u.row(j));
        for r in 0..d {
            for c in 0..d {
                m[(r, c)] += uj[r] * vi[c];
            }
        }
    }
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-12 {
        return Err(Error::RankDeficient { dict_size: dict.len() });
    }
    let (a, bt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let w = a * bt;
    let data = (0..d).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| w[(r, c)]).collect();
    Ok(LinearMap {
        w: Tensor::new(vec![d, d], data)?,
    })
}

/// Procrustes rounds. The first round uses `dict` when given and mines one
/// under the current map otherwise; every round re-mines afterwards.
pub fn procrustes_refine(
    map: &LinearMap,
    u: &Tensor,
    v: &Tensor,
    dict: Option<&[(usize, usize)]>,
    rounds: usize,
    k: usize,
) -> Result<LinearMap> {
    let mut cur = map.clone();
    let mut pairs = match dict {
        Some(d) => d.to_vec(),
        None => mine_dictionary(&cur.apply(v)?, u, k)?,
    };
    for _ in 0..rounds {
        cur = procrustes(u, v, &pairs)?;
        pairs = mine_dictionary(&cur.apply(v)?, u, k)?;
    }
    Ok(cur)
}

/// Share of `(row of V, row of U)` pairs whose CSLS translation is correct.
pub fn translation_accuracy(map: &LinearMap, u: &Tensor, v: &Tensor, gold: &[(usize, usize)], k: usize) -> Result<f64> {
    if gold.is_empty() {
        return Ok(0.0);
    }
    let best = csls_translate(&map.apply(v)?, u, k)?;
    Ok(gold.iter().filter(|&&(i, j)| best[i].0 == j).count() as f64 / gold.len() as f64)
}

/// Reads `src_token<TAB>tgt_token` lines into `(row of src, row of tgt)`.
pub fn parse_dictionary(text: &str, src: &[String], tgt: &[String], path: &Path) -> Result<Vec<(usize, usize)>> {
    let index = |tokens: &[String]| -> std::collections::HashMap<String, usize> {
        tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect()
    };
    let (si, ti) = (index(src), index(tgt));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let (a, b) = line.split_once('\t').ok_or_else(|| err("expected `src<TAB>tgt`".into()))?;
        let a = *si.get(a).ok_or_else(|| err(format!("unknown source token `{a}`")))?;
        let b = *ti.get(b).ok_or_else(|| err(format!("unknown target token `{b}`")))?;
        out.push((a, b));
    }
    Ok(out)
}

pub fn format_dictionary(pairs: &[(usize, usize)], src: &[String], tgt: &[String]) -> String {
    pairs.iter().map(|&(a, b)| format!("{}\t{}\n", src[a], tgt[b])).collect()
}
