//! Transformer encoder split into two halves around a pivot layer (the
//! TRILayer), with a four-way input embedding and a unified forward pass for
//! MLM, TLM, CdLM and NSP instances.

mod forward;
mod mask;
pub mod gradsuite;
pub mod reference;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datakit::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{orthogonal_init, truncated_normal, ParamStore, Tensor};

pub use crate::datakit::batches::{BatchKind, UnifiedBatch};
pub use forward::{embed_input, encoder_layer, reorder_hidden, trilayer_forward, unified_forward, ForwardOutput, Tape};
pub use mask::{mask_for_mlm, MASK_RATE};

pub const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub t_max: usize,
    pub vocab_size: usize,
    pub n_segments: usize,
    pub n_languages: usize,
    pub dropout: f64,
    pub tie_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            d_model: 64,
            heads: 4,
            ffn: 256,
            t_max: 32,
            vocab_size: 256,
            n_segments: 2,
            n_languages: 2,
            dropout: 0.1,
            tie_head: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.layers % 2 != 0 {
            return Err(Error::Model(format!("layer count must be even and positive, got {}", self.layers)));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Model(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.t_max < 8 {
            return Err(Error::Model(format!("t_max must be at least 8, got {}", self.t_max)));
        }
        if self.vocab_size <= crate::tokenizer::SPECIALS.len() || self.ffn == 0 {
            return Err(Error::Model("vocabulary and ffn sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Model(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.layers / 2
    }

    fn to_meta(&self, ck: &mut Checkpoint) {
        ck.set_meta("model.layers", self.layers);
        ck.set_meta("model.d_model", self.d_model);
        ck.set_meta("model.heads", self.heads);
        ck.set_meta("model.ffn", self.ffn);
        ck.set_meta("model.t_max", self.t_max);
        ck.set_meta("model.vocab_size", self.vocab_size);
        ck.set_meta("model.dropout", self.dropout);
        ck.set_meta("model.tie_head", self.tie_head);
    }

    fn from_meta(ck: &Checkpoint) -> Result<Self> {
        fn get<T: std::str::FromStr>(ck: &Checkpoint, k: &str) -> Result<T> {
            ck.meta(k).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Checkpoint {
                expected: format!("metadata `{k}`"),
                found: ck.meta(k).unwrap_or("nothing").to_string(),
            })
        }
        Ok(ModelConfig {
            layers: get(ck, "model.layers")?,
            d_model: get(ck, "model.d_model")?,
            heads: get(ck, "model.heads")?,
            ffn: get(ck, "model.ffn")?,
            t_max: get(ck, "model.t_max")?,
            vocab_size: get(ck, "model.vocab_size")?,
            n_segments: 2,
            n_languages: 2,
            dropout: get(ck, "model.dropout")?,
            tie_head: get(ck, "model.tie_head")?,
        })
    }
}

/// The five disjoint parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Embeddings,
    Lower,
    TriLayer,
    Upper,
    Heads,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Embeddings, Group::Lower, Group::TriLayer, Group::Upper, Group::Heads];

    pub fn of(name: &str) -> Result<Group> {
        let head = name.split('.').next().unwrap_or("");
        match head {
            "emb" => Ok(Group::Embeddings),
            "lower" => Ok(Group::Lower),
            "trilayer" => Ok(Group::TriLayer),
            "upper" => Ok(Group::Upper),
            "head" => Ok(Group::Heads),
            _ => Err(Error::Model(format!("parameter `{name}` belongs to no group"))),
        }
    }
}

const LAYER_TENSORS: [&str; 16] = [
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln1.g", "ln1.b", "ffn.w1",
    "ffn.b1", "ffn.w2", "ffn.b2", "ln2.g", "ln2.b",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerStack {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl TransformerStack {
    /// Layer prefixes in execution order: lower half, TRILayer, upper half.
    pub fn layer_prefixes(&self) -> Vec<String> {
        let n = self.cfg.layers;
        let mut v: Vec<String> = (0..n / 2).map(|i| format!("lower.{i}")).collect();
        v.push("trilayer".into());
        v.extend((n / 2..n).map(|i| format!("upper.{i}")));
        v
    }

    pub fn lower_prefixes(&self) -> Vec<String> {
        (0..self.cfg.half()).map(|i| format!("lower.{i}")).collect()
    }

    pub fn upper_prefixes(&self) -> Vec<String> {
        (self.cfg.half()..self.cfg.layers).map(|i| format!("upper.{i}")).collect()
    }

    pub fn set_frozen_groups(&mut self, frozen: &[Group]) -> Result<()> {
        let names: Vec<String> = self.params.names().map(str::to_string).collect();
        for n in names {
            let g = Group::of(&n)?;
            self.params.set_frozen(&n, frozen.contains(&g))?;
        }
        Ok(())
    }

    /// Freezes exactly the parameters for which `pred` holds.
    pub fn set_frozen_where(&mut self, pred: impl Fn(&str) -> bool) -> Result<()> {
        let names: Vec<String> = self.params.names().map(str::to_string).collect();
        for n in names {
            let f = pred(&n);
            self.params.set_frozen(&n, f)?;
        }
        Ok(())
    }

    /// Concatenated little-endian bytes of every tensor in `group`.
    pub fn group_bytes(&self, group: Group) -> Vec<u8> {
        self.params
            .iter()
            .filter(|(n, _)| Group::of(n).ok() == Some(group))
            .flat_map(|(_, p)| p.value.data().iter().flat_map(|x| x.to_le_bytes()))
            .collect()
    }

    /// Copies the parameters of `src_prefix` over those of the TRILayer.
    pub fn init_trilayer_from(&mut self, src_prefix: &str) -> Result<()> {
        for t in LAYER_TENSORS {
            let v = self.params.value(&format!("{src_prefix}.{t}"))?.clone();
            *self.params.value_mut(&format!("trilayer.{t}"))? = v;
        }
        Ok(())
    }

    /// Replaces the word embedding rows.
    pub fn set_word_embeddings(&mut self, rows: &Tensor) -> Result<()> {
        let cur = self.params.value("emb.wrd")?;
        if cur.shape() != rows.shape() {
            return Err(Error::DimensionMismatch {
                left: cur.len(),
                right: rows.len(),
            });
        }
        *self.params.value_mut("emb.wrd")? = rows.clone();
        Ok(())
    }

    pub fn to_checkpoint(&self, optimizer: bool) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.cfg.to_meta(&mut ck);
        ck.put_store("", &self.params, optimizer)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ModelConfig::from_meta(ck)?;
        cfg.validate()?;
        let saved = ck.get_store("")?;
        let fresh = build_model(&cfg, 0)?;
        let mut params = ParamStore::new();
        for (name, p) in fresh.params.iter() {
            let got = saved.get(name).ok_or_else(|| Error::Checkpoint {
                expected: format!("tensor `{name}`"),
                found: "nothing".into(),
            })?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint {
                    expected: format!("`{name}` with shape {:?}", p.value.shape()),
                    found: format!("{:?}", got.value.shape()),
                });
            }
            params.insert_param(name, got.clone())?;
        }
        Ok(TransformerStack { cfg, params })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint(false)?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn add_layer(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let (d, f) = (cfg.d_model, cfg.ffn);
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.attn.{w}"), truncated_normal(&[d, d], 0.02, rng))?;
        store.insert(format!("{prefix}.attn.b{}", &w[1..]), Tensor::zeros(&[d]))?;
    }
    store.insert(format!("{prefix}.ln1.g"), Tensor::full(&[d], 1.0))?;
    store.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[d]))?;
    store.insert(format!("{prefix}.ffn.w1"), truncated_normal(&[d, f], 0.02, rng))?;
    store.insert(format!("{prefix}.ffn.b1"), Tensor::zeros(&[f]))?;
    store.insert(format!("{prefix}.ffn.w2"), truncated_normal(&[f, d], 0.02, rng))?;
    store.insert(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d]))?;
    store.insert(format!("{prefix}.ln2.g"), Tensor::full(&[d], 1.0))?;
    store.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[d]))?;
    Ok(())
}

/// Truncated-normal (σ = 0.02) weights, zero biases, unit layer-norm gains,
/// an orthogonal language embedding and a TRILayer copied from the last
/// layer of the lower half.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<TransformerStack> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let mut p = ParamStore::new();
    p.insert("emb.wrd", truncated_normal(&[cfg.vocab_size, d], 0.02, &mut rng))?;
    p.insert("emb.pos", truncated_normal(&[cfg.t_max, d], 0.02, &mut rng))?;
    p.insert("emb.seg", truncated_normal(&[cfg.n_segments, d], 0.02, &mut rng))?;
    p.insert("emb.lng", orthogonal_init(cfg.n_languages, d, seed ^ 0x6c6e67))?;
    p.insert("emb.ln.g", Tensor::full(&[d], 1.0))?;
    p.insert("emb.ln.b", Tensor::zeros(&[d]))?;
    for i in 0..cfg.half() {
        add_layer(&mut p, &format!("lower.{i}"), cfg, &mut rng)?;
    }
    add_layer(&mut p, "trilayer", cfg, &mut rng)?;
    for i in cfg.half()..cfg.layers {
        add_layer(&mut p, &format!("upper.{i}"), cfg, &mut rng)?;
    }
    p.insert("head.transform.w", truncated_normal(&[d, d], 0.02, &mut rng))?;
    p.insert("head.transform.b", Tensor::zeros(&[d]))?;
    p.insert("head.ln.g", Tensor::full(&[d], 1.0))?;
    p.insert("head.ln.b", Tensor::zeros(&[d]))?;
    if !cfg.tie_head {
        p.insert("head.decoder", truncated_normal(&[d, cfg.vocab_size], 0.02, &mut rng))?;
    }
    p.insert("head.bias", Tensor::zeros(&[cfg.vocab_size]))?;
    p.insert("head.nsp.w", truncated_normal(&[d, 2], 0.02, &mut rng))?;
    p.insert("head.nsp.b", Tensor::zeros(&[2]))?;
    let mut stack = TransformerStack {
        cfg: cfg.clone(),
        params: p,
    };
    let pivot = format!("lower.{}", cfg.half() - 1);
    stack.init_trilayer_from(&pivot)?;
    Ok(stack)
}
