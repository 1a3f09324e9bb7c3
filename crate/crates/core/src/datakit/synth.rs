//! Synthetic language pairs with known word alignments.
//!
//! Source and target surface forms use disjoint letter sets; the target
//! sentence is the dictionary image of the source, permuted by a reorder
//! rule, with target-only particles sprinkled in. Sentences are drawn from
//! topics so that adjacent sentences of a document share vocabulary.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::wordalign::{emit_pharaoh, Alignment};

const SRC_LETTERS: &str = "abcdefghij";
const TGT_LETTERS: &str = "klmnopqrst";
const PARTICLE_LETTERS: &str = "uvwxyz";
pub const PUNCT: &str = ".";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReorderRule {
    Reverse,
    SwapAdjacent,
    Rotate(usize),
    Identity,
}

impl ReorderRule {
    /// perm[j] = source content index placed at target content position j.
    pub fn permutation(self, n: usize) -> Vec<usize> {
        match self {
            ReorderRule::Identity => (0..n).collect(),
            ReorderRule::Reverse => (0..n).rev().collect(),
            ReorderRule::SwapAdjacent => (0..n)
                .map(|j| if j % 2 == 0 { if j + 1 < n { j + 1 } else { j } } else { j - 1 })
                .collect(),
            ReorderRule::Rotate(k) => (0..n).map(|j| (j + k) % n.max(1)).collect(),
        }
    }
}

impl FromStr for ReorderRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse" => Ok(ReorderRule::Reverse),
            "swap-adjacent" => Ok(ReorderRule::SwapAdjacent),
            "identity" => Ok(ReorderRule::Identity),
            _ => s
                .strip_prefix("rotate-")
                .and_then(|k| k.parse().ok())
                .map(ReorderRule::Rotate)
                .ok_or_else(|| Error::Config(format!("unknown reorder rule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub words: usize,
    pub particles: usize,
    pub topics: usize,
    /// Share of a sentence's words drawn from its topic.
    pub topic_focus: f64,
    pub pairs: usize,
    pub mono_docs: usize,
    pub doc_sentences: (usize, usize),
    pub len_range: (usize, usize),
    pub rule: ReorderRule,
    pub particle_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            words: 80,
            particles: 4,
            topics: 16,
            topic_focus: 0.85,
            pairs: 10_000,
            mono_docs: 400,
            doc_sentences: (3, 6),
            len_range: (4, 10),
            rule: ReorderRule::Reverse,
            particle_prob: 0.1,
            seed: 0,
        }
    }
}

pub type Sentence = Vec<String>;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthLangPair {
    pub src_words: Vec<String>,
    pub tgt_words: Vec<String>,
    pub particles: Vec<String>,
    pub pairs: Vec<(Sentence, Sentence)>,
    pub gold: Vec<Alignment>,
    pub src_docs: Vec<Vec<Sentence>>,
    pub tgt_docs: Vec<Vec<Sentence>>,
}

fn surface_forms(letters: &str, n: usize) -> Vec<String> {
    let cs: Vec<char> = letters.chars().collect();
    let mut out = Vec::with_capacity(n);
    let mut len = 2;
    while out.len() < n {
        let total = cs.len().pow(len as u32);
        for mut k in 0..total {
            if out.len() == n {
                break;
            }
            let mut w = String::new();
            for _ in 0..len {
                w.push(cs[k % cs.len()]);
                k /= cs.len();
            }
            out.push(w);
        }
        len += 1;
    }
    out
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    src_words: Vec<String>,
    tgt_words: Vec<String>,
    particles: Vec<String>,
    topic_words: Vec<Vec<usize>>,
    topic_weights: Vec<WeightedIndex<f64>>,
}

impl Generator<'_> {
    fn source_sentence(&self, topic: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = rng.gen_range(self.cfg.len_range.0..=self.cfg.len_range.1);
        (0..n)
            .map(|_| {
                if rng.gen_bool(self.cfg.topic_focus) {
                    self.topic_words[topic][self.topic_weights[topic].sample(rng)]
                } else {
                    rng.gen_range(0..self.src_words.len())
                }
            })
            .collect()
    }

    /// Target sentence and its gold alignment; both sides end in PUNCT.
    fn translate(&self, src: &[usize], rng: &mut ChaCha8Rng) -> (Sentence, Sentence, Alignment) {
        let perm = self.cfg.rule.permutation(src.len());
        let mut tgt = Vec::new();
        let mut gold = Vec::new();
        for &i in &perm {
            tgt.push(self.tgt_words[src[i]].clone());
            gold.push(Some(i));
            if !self.particles.is_empty() && rng.gen_bool(self.cfg.particle_prob) {
                tgt.push(self.particles[rng.gen_range(0..self.particles.len())].clone());
                gold.push(None);
            }
        }
        tgt.push(PUNCT.to_string());
        gold.push(Some(src.len()));
        let mut s: Sentence = src.iter().map(|&w| self.src_words[w].clone()).collect();
        s.push(PUNCT.to_string());
        (s, tgt, gold)
    }
}

pub fn synth_langpair(cfg: &SynthConfig) -> Result<SynthLangPair> {
    if cfg.words == 0 || cfg.topics == 0 || cfg.len_range.0 == 0 || cfg.len_range.0 > cfg.len_range.1 {
        return Err(Error::Config("synthetic config needs words, topics and a valid length range".into()));
    }
    if cfg.doc_sentences.0 < 1 || cfg.doc_sentences.0 > cfg.doc_sentences.1 {
        return Err(Error::Config("invalid document length range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let src_words = surface_forms(SRC_LETTERS, cfg.words);
    let tgt_words = surface_forms(TGT_LETTERS, cfg.words);
    let particles: Vec<String> = PARTICLE_LETTERS
        .chars()
        .cycle()
        .take(cfg.particles)
        .enumerate()
        .map(|(k, c)| c.to_string().repeat(2 + k / PARTICLE_LETTERS.len()))
        .collect();

    // hidden bijection between source and target forms
    let mut image: Vec<usize> = (0..cfg.words).collect();
    image.shuffle(&mut rng);
    let tgt_words: Vec<String> = image.iter().map(|&k| tgt_words[k].clone()).collect();

    let mut topic_words = vec![Vec::new(); cfg.topics];
    for w in 0..cfg.words {
        topic_words[w % cfg.topics].push(w);
    }
    let topic_weights = topic_words
        .iter()
        .map(|ws| WeightedIndex::new((0..ws.len().max(1)).map(|r| 1.0 / (r as f64 + 1.0))).expect("positive weights"))
        .collect();
    if topic_words.iter().any(Vec::is_empty) {
        return Err(Error::Config("more topics than words".into()));
    }

    let g = Generator {
        cfg,
        src_words: src_words.clone(),
        tgt_words: tgt_words.clone(),
        particles: particles.clone(),
        topic_words,
        topic_weights,
    };

    let mut pairs = Vec::with_capacity(cfg.pairs);
    let mut gold = Vec::with_capacity(cfg.pairs);
    for _ in 0..cfg.pairs {
        let topic = rng.gen_range(0..cfg.topics);
        let src = g.source_sentence(topic, &mut rng);
        let (s, t, a) = g.translate(&src, &mut rng);
        pairs.push((s, t));
        gold.push(a);
    }

    let docs = |rng: &mut ChaCha8Rng, target: bool| -> Vec<Vec<Sentence>> {
        (0..cfg.mono_docs)
            .map(|_| {
                let topic = rng.gen_range(0..cfg.topics);
                let n = rng.gen_range(cfg.doc_sentences.0..=cfg.doc_sentences.1);
                (0..n)
                    .map(|_| {
                        let src = g.source_sentence(topic, rng);
                        let (s, t, _) = g.translate(&src, rng);
                        if target {
                            t
                        } else {
                            s
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let src_docs = docs(&mut rng, false);
    let tgt_docs = docs(&mut rng, true);

    Ok(SynthLangPair {
        src_words,
        tgt_words,
        particles,
        pairs,
        gold,
        src_docs,
        tgt_docs,
    })
}

fn docs_text(docs: &[Vec<Sentence>]) -> String {
    let mut s = String::new();
    for (k, d) in docs.iter().enumerate() {
        if k > 0 {
            s.push('\n');
        }
        for sent in d {
            s.push_str(&sent.join(" "));
            s.push('\n');
        }
    }
    s
}

impl SynthLangPair {
    pub fn src_mono_text(&self) -> String {
        docs_text(&self.src_docs)
    }

    pub fn tgt_mono_text(&self) -> String {
        docs_text(&self.tgt_docs)
    }

    pub fn parallel_tsv(&self) -> String {
        let mut s = String::new();
        for (a, b) in &self.pairs {
            let _ = writeln!(s, "{}\t{}", a.join(" "), b.join(" "));
        }
        s
    }

    pub fn gold_pharaoh(&self) -> String {
        let mut s = String::new();
        for a in &self.gold {
            s.push_str(&emit_pharaoh(a));
            s.push('\n');
        }
        s
    }

    pub fn dictionary_tsv(&self) -> String {
        let mut s = String::new();
        for (a, b) in self.src_words.iter().zip(&self.tgt_words) {
            let _ = writeln!(s, "{a}\t{b}");
        }
        s
    }

    /// Everything the joint tokenizer should see.
    pub fn all_text(&self) -> String {
        let mut s = self.src_mono_text();
        s.push_str(&self.tgt_mono_text());
        s.push_str(&self.parallel_tsv().replace('\t', "\n"));
        s
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        use super::write_atomic;
        write_atomic(&dir.join("src.txt"), self.src_mono_text().as_bytes())?;
        write_atomic(&dir.join("tgt.txt"), self.tgt_mono_text().as_bytes())?;
        write_atomic(&dir.join("parallel.tsv"), self.parallel_tsv().as_bytes())?;
        write_atomic(&dir.join("gold.align"), self.gold_pharaoh().as_bytes())?;
        write_atomic(&dir.join("dict.tsv"), self.dictionary_tsv().as_bytes())
    }
}
