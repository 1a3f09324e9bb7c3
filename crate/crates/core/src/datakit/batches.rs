//! Padded instances for every objective in one unified shape.
//!
//! An instance is an input sequence S, an output sequence of targets W with
//! a predict mask C, and an order vector O that picks, for each output
//! position, the input position whose hidden state feeds it. MLM, TLM and
//! NSP use the successive order; CdLM uses the alignment-derived order.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::mask_for_mlm;
use crate::tokenizer::{CLS, PAD, PLACEHOLDER, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    Mlm,
    Tlm,
    Cdlm,
    Nsp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub kind: BatchKind,
    pub input: Vec<u32>,
    pub lang_in: Vec<u32>,
    pub segment: Vec<u32>,
    pub target: Vec<u32>,
    pub predict: Vec<bool>,
    pub order: Vec<usize>,
    pub lang_out: Vec<u32>,
    pub nsp_label: Option<bool>,
}

/// Row-major `[batch, t_max]` arrays plus per-instance lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedBatch {
    pub t_max: usize,
    pub kinds: Vec<BatchKind>,
    pub input: Vec<u32>,
    pub lang_in: Vec<u32>,
    pub segment: Vec<u32>,
    pub in_len: Vec<usize>,
    pub target: Vec<u32>,
    pub predict: Vec<bool>,
    pub order: Vec<usize>,
    pub lang_out: Vec<u32>,
    pub out_len: Vec<usize>,
    pub nsp_label: Vec<Option<bool>>,
}

fn batch_err(msg: impl Into<String>) -> Error {
    Error::Batch(msg.into())
}

impl BatchItem {
    fn check(&self, t_max: usize) -> Result<()> {
        let n_in = self.input.len();
        let n_out = self.target.len();
        if n_in == 0 || n_out == 0 {
            return Err(batch_err("empty instance"));
        }
        if n_in > t_max || n_out > t_max {
            return Err(batch_err(format!("instance of length {n_in}/{n_out} exceeds t_max {t_max}")));
        }
        if self.lang_in.len() != n_in || self.segment.len() != n_in {
            return Err(batch_err("input-side fields disagree in length"));
        }
        if self.predict.len() != n_out || self.order.len() != n_out || self.lang_out.len() != n_out {
            return Err(batch_err(format!(
                "output-side fields disagree in length: target {n_out}, order {}",
                self.order.len()
            )));
        }
        if let Some(&bad) = self.order.iter().find(|&&o| o >= n_in) {
            return Err(Error::AlignmentIndex { index: bad, len: n_in });
        }
        if self.target.iter().zip(&self.predict).any(|(&t, &c)| c && t == PAD) {
            return Err(batch_err("predict set covers a pad target"));
        }
        if self.kind != BatchKind::Cdlm && (n_in != n_out || self.order.iter().enumerate().any(|(j, &o)| o != j)) {
            return Err(batch_err(format!("{:?} instance must use the successive order", self.kind)));
        }
        if (self.kind == BatchKind::Nsp) != self.nsp_label.is_some() {
            return Err(batch_err("NSP label present exactly on NSP instances"));
        }
        Ok(())
    }
}

impl UnifiedBatch {
    pub fn from_items(items: &[BatchItem], t_max: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(batch_err("no instances"));
        }
        let b = items.len();
        let mut out = UnifiedBatch {
            t_max,
            kinds: Vec::with_capacity(b),
            input: vec![PAD; b * t_max],
            lang_in: vec![0; b * t_max],
            segment: vec![0; b * t_max],
            in_len: Vec::with_capacity(b),
            target: vec![PAD; b * t_max],
            predict: vec![false; b * t_max],
            order: (0..b).flat_map(|_| 0..t_max).collect(),
            lang_out: vec![0; b * t_max],
            out_len: Vec::with_capacity(b),
            nsp_label: Vec::with_capacity(b),
        };
        for (k, it) in items.iter().enumerate() {
            it.check(t_max)?;
            let base = k * t_max;
            let n = it.input.len();
            out.input[base..base + n].copy_from_slice(&it.input);
            out.lang_in[base..base + n].copy_from_slice(&it.lang_in);
            out.segment[base..base + n].copy_from_slice(&it.segment);
            let m = it.target.len();
            out.target[base..base + m].copy_from_slice(&it.target);
            out.predict[base..base + m].copy_from_slice(&it.predict);
            out.order[base..base + m].copy_from_slice(&it.order);
            out.lang_out[base..base + m].copy_from_slice(&it.lang_out);
            // padded outputs inherit the language of the last real one
            let last = it.lang_out[m - 1];
            out.lang_out[base + m..base + t_max].iter_mut().for_each(|l| *l = last);
            out.kinds.push(it.kind);
            out.in_len.push(n);
            out.out_len.push(m);
            out.nsp_label.push(it.nsp_label);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Columns that hold any real input or output position.
    pub fn width(&self) -> usize {
        self.in_len.iter().chain(&self.out_len).copied().max().unwrap_or(1)
    }

    pub fn num_predicted(&self) -> usize {
        self.predict.iter().filter(|&&c| c).count()
    }

    /// Instance `k` as an unpadded item.
    pub fn item(&self, k: usize) -> BatchItem {
        let base = k * self.t_max;
        let (n, m) = (self.in_len[k], self.out_len[k]);
        BatchItem {
            kind: self.kinds[k],
            input: self.input[base..base + n].to_vec(),
            lang_in: self.lang_in[base..base + n].to_vec(),
            segment: self.segment[base..base + n].to_vec(),
            target: self.target[base..base + m].to_vec(),
            predict: self.predict[base..base + m].to_vec(),
            order: self.order[base..base + m].to_vec(),
            lang_out: self.lang_out[base..base + m].to_vec(),
            nsp_label: self.nsp_label[k],
        }
    }

    /// Interleaves several batches into one physical batch.
    pub fn concat(parts: &[&UnifiedBatch]) -> Result<Self> {
        let t_max = parts.first().ok_or_else(|| batch_err("nothing to concatenate"))?.t_max;
        if parts.iter().any(|p| p.t_max != t_max) {
            return Err(batch_err("t_max differs between parts"));
        }
        let items: Vec<BatchItem> = parts.iter().flat_map(|p| (0..p.len()).map(|k| p.item(k))).collect();
        Self::from_items(&items, t_max)
    }
}

fn mlm_item(
    kind: BatchKind,
    ids: Vec<u32>,
    langs: Vec<u32>,
    segment: Vec<u32>,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> BatchItem {
    let (masked, predict) = mask_for_mlm(&ids, vocab_size, rng);
    BatchItem {
        kind,
        order: (0..ids.len()).collect(),
        lang_out: langs.clone(),
        input: masked,
        lang_in: langs,
        segment,
        target: ids,
        predict,
        nsp_label: None,
    }
}

/// `[CLS] x [SEP]`, 15% masked, successive order.
pub fn make_mlm_batch(sents: &[&[u32]], lang: u32, vocab_size: usize, t_max: usize, seed: u64) -> Result<UnifiedBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<BatchItem> = sents
        .iter()
        .map(|s| {
            let s = &s[..s.len().min(t_max - 2)];
            let mut ids = vec![CLS];
            ids.extend_from_slice(s);
            ids.push(SEP);
            let n = ids.len();
            mlm_item(BatchKind::Mlm, ids, vec![lang; n], vec![0; n], vocab_size, &mut rng)
        })
        .collect();
    UnifiedBatch::from_items(&items, t_max)
}

/// Shortens the longer of two spans until both fit in `budget`.
fn fit_pair<'a>(mut a: &'a [u32], mut b: &'a [u32], budget: usize) -> (&'a [u32], &'a [u32]) {
    while a.len() + b.len() > budget {
        if a.len() >= b.len() {
            a = &a[..a.len() - 1];
        } else {
            b = &b[..b.len() - 1];
        }
    }
    (a, b)
}

/// `[CLS] x [SEP] y [SEP]` with per-token language ids and segments 0/1.
pub fn make_tlm_batch(
    pairs: &[(&[u32], &[u32])],
    langs: (u32, u32),
    vocab_size: usize,
    t_max: usize,
    seed: u64,
) -> Result<UnifiedBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<BatchItem> = pairs
        .iter()
        .map(|&(x, y)| {
            let (x, y) = fit_pair(x, y, t_max - 3);
            let mut ids = vec![CLS];
            ids.extend_from_slice(x);
            ids.push(SEP);
            let split = ids.len();
            ids.extend_from_slice(y);
            ids.push(SEP);
            let n = ids.len();
            let lang: Vec<u32> = (0..n).map(|p| if p < split { langs.0 } else { langs.1 }).collect();
            let seg: Vec<u32> = (0..n).map(|p| (p >= split) as u32).collect();
            mlm_item(BatchKind::Tlm, ids, lang, seg, vocab_size, &mut rng)
        })
        .collect();
    UnifiedBatch::from_items(&items, t_max)
}

/// Input `[CLS] x [SEP] [P]`, output `[CLS] y [SEP]`. `order[j]` indexes
/// x with `x.len()` meaning the [P] slot, as produced by `to_order`.
pub fn make_cdlm_batch(pairs: &[(&[u32], &[u32], &[usize])], langs: (u32, u32), t_max: usize) -> Result<UnifiedBatch> {
    let items: Vec<BatchItem> = pairs
        .iter()
        .map(|&(x, y, o)| {
            if o.len() != y.len() {
                return Err(batch_err(format!(
                    "order vector of length {} for a target of length {}",
                    o.len(),
                    y.len()
                )));
            }
            if let Some(&bad) = o.iter().find(|&&i| i > x.len()) {
                return Err(Error::AlignmentIndex { index: bad, len: x.len() });
            }
            let mut input = vec![CLS];
            input.extend_from_slice(x);
            input.push(SEP);
            input.push(PLACEHOLDER);
            let p_slot = x.len() + 2;
            let mut target = vec![CLS];
            target.extend_from_slice(y);
            target.push(SEP);
            let mut order = vec![0];
            order.extend(o.iter().map(|&i| if i == x.len() { p_slot } else { i + 1 }));
            order.push(x.len() + 1);
            let (n, m) = (input.len(), target.len());
            Ok(BatchItem {
                kind: BatchKind::Cdlm,
                input,
                lang_in: vec![langs.0; n],
                segment: vec![0; n],
                predict: vec![true; m],
                target,
                order,
                lang_out: vec![langs.1; m],
                nsp_label: None,
            })
        })
        .collect::<Result<_>>()?;
    UnifiedBatch::from_items(&items, t_max)
}

impl Corpus {
    /// Sentences that have a successor inside the same document.
    pub fn nsp_starts(&self) -> Vec<usize> {
        let doc = self.doc_of();
        (0..self.sentences.len().saturating_sub(1))
            .filter(|&i| doc[i] == doc[i + 1])
            .collect()
    }
}

/// `[CLS] a [SEP] b [SEP]`: b is the true successor of a with probability
/// one half, otherwise a sentence from another document.
pub fn make_nsp_batch(
    corpus: &Corpus,
    starts: &[usize],
    lang: u32,
    vocab_size: usize,
    t_max: usize,
    seed: u64,
) -> Result<UnifiedBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doc = corpus.doc_of();
    let n = corpus.sentences.len();
    let items: Vec<BatchItem> = starts
        .iter()
        .map(|&i| {
            if i + 1 >= n || doc[i] != doc[i + 1] {
                return Err(batch_err(format!("sentence {i} has no successor in its document")));
            }
            let is_next = rng.gen_bool(0.5);
            let j = if is_next {
                i + 1
            } else if corpus.doc_starts.len() > 1 {
                loop {
                    let j = rng.gen_range(0..n);
                    if doc[j] != doc[i] {
                        break j;
                    }
                }
            } else {
                return Err(batch_err("random-pair sampling needs at least two documents"));
            };
            let (a, b) = fit_pair(&corpus.sentences[i], &corpus.sentences[j], t_max - 3);
            let mut ids = vec![CLS];
            ids.extend_from_slice(a);
            ids.push(SEP);
            let split = ids.len();
            ids.extend_from_slice(b);
            ids.push(SEP);
            let len = ids.len();
            let seg = (0..len).map(|p| (p >= split) as u32).collect();
            let mut it = mlm_item(BatchKind::Nsp, ids, vec![lang; len], seg, vocab_size, &mut rng);
            it.nsp_label = Some(is_next);
            Ok(it)
        })
        .collect::<Result<_>>()?;
    UnifiedBatch::from_items(&items, t_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const V: usize = 40;

    #[test]
    fn mlm_batch_is_successive() {
        let a = [10u32, 11, 12];
        let b = [13u32];
        let batch = make_mlm_batch(&[&a, &b], 1, V, 8, 3).unwrap();
        assert_eq!(&batch.order[..8], &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(batch.in_len, vec![5, 3]);
        assert_eq!(&batch.target[..5], &[CLS, 10, 11, 12, SEP]);
        assert!(!batch.predict[0] && !batch.predict[4]);
    }

    #[test]
    fn cdlm_batch_covers_targets() {
        let x = [10u32, 11, 12];
        let y = [20u32, 21, 22, 23];
        // reversed with a particle at 2
        let o = [2usize, 1, 3, 0];
        let batch = make_cdlm_batch(&[(&x, &y, &o)], (0, 1), 10).unwrap();
        assert_eq!(&batch.input[..6], &[CLS, 10, 11, 12, SEP, PLACEHOLDER]);
        assert_eq!(&batch.order[..6], &[0, 3, 2, 5, 1, 4]);
        let covered: Vec<bool> = batch.target.iter().map(|&t| t != PAD).collect();
        assert_eq!(batch.predict, covered);
        assert_eq!(&batch.lang_out[..6], &[1; 6]);
    }

    #[test]
    fn cdlm_rejects_mismatched_order() {
        let x = [10u32, 11];
        let y = [20u32, 21];
        assert!(make_cdlm_batch(&[(&x, &y, &[0])], (0, 1), 8).is_err());
        assert!(make_cdlm_batch(&[(&x, &y, &[0, 3])], (0, 1), 8).is_err());
    }

    #[test]
    fn tlm_segments_and_languages() {
        let x = [10u32, 11];
        let y = [20u32, 21, 22];
        let batch = make_tlm_batch(&[(&x, &y)], (0, 1), V, 12, 1).unwrap();
        assert_eq!(&batch.target[..8], &[CLS, 10, 11, SEP, 20, 21, 22, SEP]);
        assert_eq!(&batch.segment[..8], &[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(&batch.lang_in[..8], &[0, 0, 0, 0, 1, 1, 1, 1]);
        let short = make_tlm_batch(&[(&x, &y)], (0, 1), V, 6, 1).unwrap();
        assert_eq!(short.in_len, vec![6]);
    }

    #[test]
    fn nsp_labels_balanced() {
        let text: String = (0..40)
            .map(|d| format!("{}\n{}\n{}\n\n", d, d + 1, d + 2))
            .collect();
        let mut c = Corpus::default();
        for (k, doc) in text.split("\n\n").filter(|d| !d.is_empty()).enumerate() {
            c.doc_starts.push(c.sentences.len());
            for line in doc.lines() {
                c.sentences.push(vec![10 + (k as u32 % 20), 6 + line.len() as u32]);
            }
        }
        let starts = c.nsp_starts();
        assert_eq!(starts.len(), 80);
        let mut pos = 0;
        let mut total = 0;
        for seed in 0..250 {
            let b = make_nsp_batch(&c, &starts[..40], 0, V, 12, seed).unwrap();
            pos += b.nsp_label.iter().filter(|l| **l == Some(true)).count();
            total += b.len();
        }
        let rate = pos as f64 / total as f64;
        assert!((rate - 0.5).abs() < 0.02, "{rate}");
    }

    #[test]
    fn mixed_batch_round_trips_items() {
        let a = [10u32, 11, 12];
        let x = [10u32, 11];
        let y = [20u32, 21];
        let m = make_mlm_batch(&[&a], 0, V, 8, 0).unwrap();
        let c = make_cdlm_batch(&[(&x, &y, &[1, 0])], (0, 1), 8).unwrap();
        let mixed = UnifiedBatch::concat(&[&m, &c]).unwrap();
        assert_eq!(mixed.item(0), m.item(0));
        assert_eq!(mixed.item(1), c.item(0));
        assert_eq!(mixed.kinds, vec![BatchKind::Mlm, BatchKind::Cdlm]);
    }

    fn sentence() -> impl Strategy<Value = Vec<u32>> {
        proptest::collection::vec(6u32..V as u32, 1..12)
    }

    proptest! {
        #[test]
        fn emitted_batches_satisfy_invariants(
            sents in proptest::collection::vec(sentence(), 1..6),
            other in proptest::collection::vec(sentence(), 1..6),
            seed in 0u64..1000,
        ) {
            let t_max = 16;
            let refs: Vec<&[u32]> = sents.iter().map(|s| &s[..]).collect();
            let m = make_mlm_batch(&refs, 0, V, t_max, seed).unwrap();
            let pairs: Vec<(&[u32], &[u32])> = sents.iter().zip(&other).map(|(a, b)| (&a[..], &b[..])).collect();
            let t = make_tlm_batch(&pairs, (0, 1), V, t_max, seed).unwrap();
            let orders: Vec<Vec<usize>> = other
                .iter()
                .zip(&sents)
                .map(|(y, x)| y.iter().enumerate().map(|(j, _)| (j * 7 + seed as usize) % (x.len() + 1)).collect())
                .collect();
            let triples: Vec<(&[u32], &[u32], &[usize])> = sents
                .iter()
                .zip(&other)
                .zip(&orders)
                .filter(|((x, y), _)| x.len() + 3 <= t_max && y.len() + 2 <= t_max)
                .map(|((x, y), o)| (&x[..], &y[..], &o[..]))
                .collect();
            let mut parts = vec![&m, &t];
            let c;
            if !triples.is_empty() {
                c = make_cdlm_batch(&triples, (0, 1), t_max).unwrap();
                parts.push(&c);
            }
            let mixed = UnifiedBatch::concat(&parts).unwrap();
            for k in 0..mixed.len() {
                let it = mixed.item(k);
                prop_assert!(it.check(t_max).is_ok());
                prop_assert!(it.input.iter().all(|&i| (i as usize) < V));
                let base = k * t_max;
                for j in mixed.out_len[k]..t_max {
                    prop_assert!(!mixed.predict[base + j]);
                    prop_assert_eq!(mixed.target[base + j], PAD);
                }
                if it.kind == BatchKind::Cdlm {
                    prop_assert!(it.predict.iter().all(|&c| c));
                }
            }
        }
    }
}
