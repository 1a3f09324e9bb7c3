use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::Vocab;
use crate::wordalign::Alignment;

/// Room left for [CLS], [SEP] and the [P] slot.
pub const RESERVED: usize = 3;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Vec<u32>>,
    /// Index of the first sentence of every document, ascending.
    pub doc_starts: Vec<usize>,
    pub truncated: usize,
}

impl Corpus {
    /// One sentence per line, blank lines separate documents.
    pub fn from_text(text: &str, vocab: &Vocab, t_max: usize) -> Self {
        let limit = t_max.saturating_sub(RESERVED).max(1);
        let mut c = Corpus::default();
        let mut new_doc = true;
        for line in text.lines() {
            if line.trim().is_empty() {
                new_doc = true;
                continue;
            }
            let mut ids = vocab.encode(line);
            if ids.is_empty() {
                continue;
            }
            if ids.len() > limit {
                ids.truncate(limit);
                c.truncated += 1;
            }
            if new_doc {
                c.doc_starts.push(c.sentences.len());
                new_doc = false;
            }
            c.sentences.push(ids);
        }
        c
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn documents(&self) -> Vec<&[Vec<u32>]> {
        let mut out = Vec::with_capacity(self.doc_starts.len());
        for (k, &start) in self.doc_starts.iter().enumerate() {
            let end = self.doc_starts.get(k + 1).copied().unwrap_or(self.sentences.len());
            out.push(&self.sentences[start..end]);
        }
        out
    }

    /// Moves the last `held` documents into a second corpus.
    pub fn split_docs(&self, held: usize) -> (Corpus, Corpus) {
        let keep = self.doc_starts.len().saturating_sub(held);
        let cut = self.doc_starts.get(keep).copied().unwrap_or(self.sentences.len());
        let head = Corpus {
            sentences: self.sentences[..cut].to_vec(),
            doc_starts: self.doc_starts[..keep].to_vec(),
            truncated: self.truncated,
        };
        let tail = Corpus {
            sentences: self.sentences[cut..].to_vec(),
            doc_starts: self.doc_starts[keep..].iter().map(|s| s - cut).collect(),
            truncated: 0,
        };
        (head, tail)
    }

    /// Document index of every sentence.
    pub fn doc_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.sentences.len()];
        for (k, &start) in self.doc_starts.iter().enumerate() {
            let end = self.doc_starts.get(k + 1).copied().unwrap_or(self.sentences.len());
            out[start..end].iter_mut().for_each(|d| *d = k);
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    pub gold: Option<Vec<Alignment>>,
    pub dropped: usize,
}

impl ParallelCorpus {
    /// `src<TAB>tgt` per line. Pairs where either side overflows are
    /// dropped and counted.
    pub fn from_tsv(text: &str, vocab: &Vocab, t_max: usize, path: &Path) -> Result<Self> {
        let limit = t_max.saturating_sub(RESERVED).max(1);
        let mut c = ParallelCorpus::default();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (s, t) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: "missing tab separator".into(),
            })?;
            let (s, t) = (vocab.encode(s), vocab.encode(t));
            if s.is_empty() || t.is_empty() || s.len() > limit || t.len() > limit {
                c.dropped += 1;
                continue;
            }
            c.pairs.push((s, t));
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn as_slices(&self) -> Vec<(&[u32], &[u32])> {
        self.pairs.iter().map(|(a, b)| (&a[..], &b[..])).collect()
    }

    /// Keeps the first `n` pairs (and their gold alignments).
    pub fn take(&self, n: usize) -> ParallelCorpus {
        let n = n.min(self.pairs.len());
        ParallelCorpus {
            pairs: self.pairs[..n].to_vec(),
            gold: self.gold.as_ref().map(|g| g[..n].to_vec()),
            dropped: 0,
        }
    }
}

pub fn load_mono(path: &Path, vocab: &Vocab, t_max: usize) -> Result<Corpus> {
    let text = super::read_utf8(path)?;
    let c = Corpus::from_text(&text, vocab, t_max);
    if c.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok(c)
}

pub fn load_parallel(path: &Path, vocab: &Vocab, t_max: usize) -> Result<ParallelCorpus> {
    let text = super::read_utf8(path)?;
    let c = ParallelCorpus::from_tsv(&text, vocab, t_max, path)?;
    if c.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok(c)
}
