//! Flat `key=value` run configuration. Every key has a default and a one
//! line description; anything not in the table is rejected.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Prefix of environment overrides: `TRELM_PHASE1_STEPS=50` sets `phase1.steps`.
pub const ENV_PREFIX: &str = "TRELM_";

pub const KEYS: &[(&str, &str, &str)] = &[
    ("model.layers", "4", "encoder layers N (even); the TRILayer sits between halves"),
    ("model.d_model", "64", "hidden size"),
    ("model.heads", "4", "attention heads"),
    ("model.ffn", "256", "feed-forward inner size"),
    ("model.t_max", "32", "maximum sequence length"),
    ("model.dropout", "0.1", "dropout rate in train mode"),
    ("model.tie_head", "true", "tie the LM head to the word embedding"),
    ("tokenizer.vocab_size", "256", "joint subword vocabulary budget"),
    ("tokenizer.alphabet_limit", "200", "characters kept before mapping to [UNK]"),
    ("skipgram.window", "5", "context window"),
    ("skipgram.negatives", "5", "negative samples per positive"),
    ("skipgram.epochs", "5", "passes over the corpus"),
    ("skipgram.lr", "0.025", "initial learning rate, decayed linearly"),
    ("embalign.epochs", "5", "adversarial epochs"),
    ("embalign.steps", "500", "mapping updates per epoch"),
    ("embalign.batch", "64", "rows drawn from each space per update"),
    ("embalign.dis_steps", "3", "discriminator updates per mapping update"),
    ("embalign.lr_d", "0.001", "discriminator Adam learning rate"),
    ("embalign.lr_w", "0.1", "mapping SGD learning rate"),
    ("embalign.lr_decay", "0.95", "mapping learning-rate decay per epoch"),
    ("embalign.orth_beta", "0.01", "orthogonalization strength after each mapping update"),
    ("embalign.smoothing", "0.1", "label smoothing on discriminator targets"),
    ("embalign.hidden", "0", "discriminator width, 0 means 4*d"),
    ("embalign.refine_rounds", "5", "Procrustes refinement rounds"),
    ("embalign.csls_k", "10", "CSLS neighbourhood size"),
    ("aligner.iterations", "5", "IBM-1 EM iterations per direction"),
    ("aligner.mode", "grow-diag", "symmetrization: intersect or grow-diag"),
    ("donor.steps", "300", "MLM steps used to pretrain the donor backbone"),
    ("donor.batch", "32", "donor batch size"),
    ("donor.lr", "0.001", "donor peak learning rate"),
    ("phase1.steps", "200", "commonality phase steps"),
    ("phase1.batch", "32", "commonality phase batch size"),
    ("phase1.lr", "0.001", "commonality phase peak learning rate"),
    ("phase1.init", "adv", "word embedding init: adv, skipgram, rand or rand+adv"),
    ("phase2.steps", "500", "transfer phase steps per directional model"),
    ("phase2.batch", "32", "transfer phase batch size"),
    ("phase2.lr", "0.003", "transfer phase peak learning rate"),
    ("phase2.objective", "cdlm+mlm", "cdlm+mlm, or mlm+tlm for the baseline without CdLM"),
    ("phase2.mlm_lang", "tgt", "language of the MLM half of each step: tgt or src"),
    ("phase2.parallel", "0", "cap on parallel pairs used, 0 means all"),
    ("phase3.steps", "400", "language-specific phase steps"),
    ("phase3.batch", "32", "language-specific phase batch size"),
    ("phase3.lr", "0.002", "language-specific phase peak learning rate"),
    ("phase3.nsp", "true", "add next-sentence prediction"),
    ("train.warmup", "0.1", "fraction of steps spent in linear warmup"),
    ("train.weight_decay", "0.01", "decoupled weight decay"),
    ("train.checkpoint_every", "100", "steps between checkpoints, 0 disables"),
    ("eval.mask_seed", "1234", "seed of the fixed evaluation mask"),
    ("eval.max_sentences", "500", "held-out sentences used for evaluation"),
    ("eval.holdout_pairs", "500", "parallel pairs held out from training"),
    ("eval.holdout_docs", "40", "target documents held out from training"),
    ("eval.nsp_pairs", "400", "held-out sentence pairs scored for NSP accuracy"),
    ("data.dir", "", "directory with src.txt, tgt.txt, parallel.tsv; empty means synthesize"),
    ("synth.words", "80", "content words per language"),
    ("synth.particles", "4", "target-only particles"),
    ("synth.topics", "16", "topics shared by sentences of one document"),
    ("synth.pairs", "10000", "parallel sentence pairs"),
    ("synth.mono_docs", "400", "monolingual documents per language"),
    ("synth.len_min", "4", "shortest sentence in words"),
    ("synth.len_max", "10", "longest sentence in words"),
    ("synth.rule", "reverse", "reverse, swap-adjacent, rotate-K or identity"),
    ("synth.particle_prob", "0.1", "particle insertion probability"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => {
                let hint = KEYS
                    .iter()
                    .map(|(k, _, _)| *k)
                    .find(|k| k.ends_with(key.rsplit('.').next().unwrap_or(key)))
                    .map(|k| format!(" (did you mean `{k}`?)"))
                    .unwrap_or_default();
                Err(Error::Config(format!("unknown key `{key}`{hint}")))
            }
        }
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: "expected key=value".into(),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = super::read_utf8(path)?;
        self.merge_text(&text, path)
    }

    pub fn merge_env(&mut self) -> Result<()> {
        self.merge_vars(std::env::vars())
    }

    pub fn merge_vars(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut pending: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_string(), v)))
            .collect();
        pending.sort();
        for (rest, v) in pending {
            let rest = rest.to_ascii_lowercase();
            let key = KEYS
                .iter()
                .map(|(k, _, _)| *k)
                .find(|k| k.replace(['.'], "_") == rest)
                .ok_or_else(|| Error::Config(format!("unknown environment override {ENV_PREFIX}{}", rest.to_uppercase())))?;
            self.set(key, &v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key)
    }

    /// Sorted `key=value` lines; the canonical form that gets hashed.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// The key table rendered for `--help` style output.
    pub fn documentation() -> String {
        KEYS.iter()
            .map(|(k, v, d)| format!("  {k:<26} {v:<10} {d}\n"))
            .collect()
    }
}
