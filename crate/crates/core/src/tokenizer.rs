//! Joint WordPiece-style subword vocabulary.
//!
//! Training greedily merges the most frequent adjacent symbol pair
//! (BPE-style scoring); pieces that continue a word carry the `##` marker.
//! Encoding is greedy longest-match-first within each whitespace word.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const PLACEHOLDER: u32 = 5;

pub const SPECIALS: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[P]"];
pub const CONTINUATION: &str = "##";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
    alphabet: BTreeSet<char>,
}

impl Vocab {
    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Invalid(format!("special token {s} must have id {i}")));
            }
        }
        let alphabet = tokens[SPECIALS.len()..]
            .iter()
            .filter_map(|t| {
                let mut cs = t.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) => Some(c),
                    _ => None,
                }
            })
            .collect();
        Ok(Vocab {
            tokens,
            counts,
            index,
            alphabet,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange {
                id,
                size: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn alphabet(&self) -> &BTreeSet<char> {
        &self.alphabet
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Greedy longest-match-first segmentation of each whitespace word.
    /// Characters that no piece covers become `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if let Some(id) = self.id(word).filter(|&i| Self::is_special(i)) {
                out.push(id);
                continue;
            }
            let chars: Vec<char> = word.chars().collect();
            let mut start = 0;
            let mut buf = String::new();
            while start < chars.len() {
                let mut found = None;
                for end in (start + 1..=chars.len()).rev() {
                    buf.clear();
                    if start > 0 {
                        buf.push_str(CONTINUATION);
                    }
                    buf.extend(&chars[start..end]);
                    if let Some(id) = self.id(&buf) {
                        found = Some((id, end));
                        break;
                    }
                }
                match found {
                    Some((id, end)) => {
                        out.push(id);
                        start = end;
                    }
                    None => {
                        out.push(UNK);
                        start += 1;
                    }
                }
            }
        }
        out
    }

    /// Joins pieces back into text, gluing `##` continuations onto the
    /// previous piece.
    pub fn decode(&self, ids: &[u32], strip_specials: bool) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if strip_specials && Self::is_special(id) {
                continue;
            }
            let tok = self.token(id)?;
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() && !Self::is_special(id) => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }

    /// `token<TAB>count` per line; line index is the id.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            let _ = writeln!(s, "{t}\t{c}");
        }
        s
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (t, c) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected token<TAB>count".into(),
            })?;
            let c = c.parse::<u64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            tokens.push(t.to_string());
            counts.push(c);
        }
        Self::from_parts(tokens, counts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::datakit::write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::datakit::read_utf8(path)?;
        Self::from_tsv(&text, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub alphabet_limit: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            vocab_size: 512,
            alphabet_limit: 200,
        }
    }
}

fn piece(c: char, first: bool) -> String {
    if first {
        c.to_string()
    } else {
        format!("{CONTINUATION}{c}")
    }
}

fn merged(a: &str, b: &str) -> String {
    format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(b))
}

/// Trains a joint vocabulary over all corpora (one sentence per line).
///
/// Counting is commutative and ties break lexicographically, so the result
/// does not depend on the order in which corpora are given.
pub fn train_wordpiece(corpora: &[&str], cfg: &TokenizerConfig) -> Result<Vocab> {
    let mut words: BTreeMap<&str, u64> = BTreeMap::new();
    for corpus in corpora {
        for w in corpus.split_whitespace() {
            *words.entry(w).or_default() += 1;
        }
    }
    if words.is_empty() {
        return Err(Error::EmptyCorpus("tokenizer training input has no words".into()));
    }

    let mut char_freq: BTreeMap<char, u64> = BTreeMap::new();
    for (w, &n) in &words {
        for c in w.chars() {
            *char_freq.entry(c).or_default() += n;
        }
    }
    let mut ranked: Vec<(char, u64)> = char_freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(cfg.alphabet_limit);
    let alphabet: BTreeMap<char, u64> = ranked.into_iter().collect();

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut counts: Vec<u64> = vec![0; SPECIALS.len()];
    for (&c, &n) in &alphabet {
        tokens.push(piece(c, true));
        counts.push(n);
        tokens.push(piece(c, false));
        counts.push(n);
    }
    if cfg.vocab_size <= tokens.len() {
        return Err(Error::VocabBudget {
            budget: cfg.vocab_size,
            required: tokens.len() + 1,
        });
    }
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();

    // each word as a symbol sequence; None marks a character outside the
    // retained alphabet (never merged)
    let mut segs: Vec<(Vec<Option<String>>, u64)> = words
        .iter()
        .map(|(w, &n)| {
            let syms = w
                .chars()
                .enumerate()
                .map(|(i, c)| alphabet.contains_key(&c).then(|| piece(c, i == 0)))
                .collect();
            (syms, n)
        })
        .collect();

    while tokens.len() < cfg.vocab_size {
        let mut pairs: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (syms, n) in &segs {
            for w in syms.windows(2) {
                if let (Some(a), Some(b)) = (&w[0], &w[1]) {
                    *pairs.entry((a.as_str(), b.as_str())).or_default() += n;
                }
            }
        }
        // BTreeMap iterates pairs in lexicographic order, so max_by keeps the
        // first (smallest) pair among equal counts
        let best = pairs
            .iter()
            .fold(None::<(&(&str, &str), u64)>, |acc, (p, &n)| match acc {
                Some((_, m)) if m >= n => acc,
                _ => Some((p, n)),
            });
        let Some((&(a, b), n)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        let new_tok = merged(&a, &b);
        for (syms, _) in segs.iter_mut() {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i].as_deref() == Some(a.as_str()) && syms[i + 1].as_deref() == Some(b.as_str()) {
                    syms[i] = Some(new_tok.clone());
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        if known.insert(new_tok.clone()) {
            tokens.push(new_tok);
            counts.push(n);
        }
    }
    Vocab::from_parts(tokens, counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(extra: &[&str]) -> Vocab {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(extra.iter().map(|s| s.to_string()));
        let n = tokens.len();
        Vocab::from_parts(tokens, vec![1; n]).unwrap()
    }

    #[test]
    fn frequent_pair_is_merged() {
        let corpus = "ab ab ab\n".repeat(100);
        let v = train_wordpiece(
            &[&corpus],
            &TokenizerConfig {
                vocab_size: SPECIALS.len() + 5,
                alphabet_limit: 10,
            },
        )
        .unwrap();
        assert!(v.id("ab").is_some());
        assert_eq!(v.encode("ab"), vec![v.id("ab").unwrap()]);
    }

    #[test]
    fn rare_character_becomes_unk() {
        let corpus = format!("{}z", "aaaa bbbb ".repeat(50));
        let v = train_wordpiece(
            &[&corpus],
            &TokenizerConfig {
                vocab_size: 20,
                alphabet_limit: 2,
            },
        )
        .unwrap();
        assert!(v.id("z").is_none());
        assert_eq!(v.encode("z"), vec![UNK]);
    }

    #[test]
    fn budget_below_alphabet_is_rejected() {
        let err = train_wordpiece(
            &["abc"],
            &TokenizerConfig {
                vocab_size: 8,
                alphabet_limit: 10,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::VocabBudget { .. }));
        assert!(matches!(
            train_wordpiece(&["  \n"], &TokenizerConfig::default()),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn longest_match_trace() {
        let v = tiny(&["a", "b", "ab", "##ab"]);
        let ids = v.encode("abab");
        assert_eq!(ids, vec![v.id("ab").unwrap(), v.id("##ab").unwrap()]);
    }

    #[test]
    fn decode_joins_and_strips() {
        let v = tiny(&["x", "ab", "##ab"]);
        assert_eq!(v.decode(&[], false).unwrap(), "");
        assert_eq!(v.decode(&[CLS, v.id("x").unwrap(), SEP], true).unwrap(), "x");
        assert_eq!(v.decode(&[CLS, v.id("x").unwrap(), SEP], false).unwrap(), "[CLS] x [SEP]");
        let s = "abab x ab";
        assert_eq!(v.decode(&v.encode(s), false).unwrap(), s);
        assert!(matches!(
            v.decode(&[99], false),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn training_is_deterministic_and_order_independent() {
        let a = "the cat sat\nthe hat\n".repeat(20);
        let b = "a bat sat on the mat\n".repeat(15);
        let cfg = TokenizerConfig {
            vocab_size: 60,
            alphabet_limit: 30,
        };
        let v1 = train_wordpiece(&[&a, &b], &cfg).unwrap();
        let v2 = train_wordpiece(&[&b, &a], &cfg).unwrap();
        assert_eq!(v1.to_tsv(), v2.to_tsv());
        assert_eq!(v1.to_tsv(), train_wordpiece(&[&a, &b], &cfg).unwrap().to_tsv());
    }

    #[test]
    fn tsv_round_trip() {
        let v = train_wordpiece(&["hello world hello"], &TokenizerConfig { vocab_size: 40, alphabet_limit: 20 }).unwrap();
        let back = Vocab::from_tsv(&v.to_tsv(), Path::new("mem")).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_tsv("[PAD]\t0\nbad line\n", Path::new("mem")).is_err());
    }

    proptest::proptest! {
        #[test]
        fn encoding_covers_input(s in "[a-e ]{0,40}") {
            let v = train_wordpiece(&["abc cab bad dead bee"], &TokenizerConfig { vocab_size: 30, alphabet_limit: 4 }).unwrap();
            let ids = v.encode(&s);
            proptest::prop_assert!(ids.iter().all(|&i| (i as usize) < v.len()));
            // every character is covered by exactly one piece or one [UNK]
            let covered: usize = ids.iter().map(|&i| {
                if i == UNK { 1 } else {
                    let t = v.token(i).unwrap();
                    t.strip_prefix(CONTINUATION).unwrap_or(t).chars().count()
                }
            }).sum();
            proptest::prop_assert_eq!(covered, s.chars().filter(|c| !c.is_whitespace()).count());
        }
    }
}
