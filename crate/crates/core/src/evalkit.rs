//! Evaluation: bits-per-word under a fixed mask, non-autoregressive CdLM
//! generation, corpus BLEU, and the two ablation sweeps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datakit::batches::{make_cdlm_batch, make_mlm_batch, make_nsp_batch};
use crate::datakit::Corpus;
use crate::embalign::AdvConfig;
use crate::error::{Error, Result};
use crate::model::{unified_forward, Tape, TransformerStack, UnifiedBatch};
use crate::tensor::Tensor;
use crate::tokenizer::{Vocab, MASK, SEP};
use crate::trainer::{
    commonality_source, initial_embeddings, phase2_transfer, prepare_commonality, run_steps, CheckpointSink, EmbeddingInit,
    PhaseConfig, TrainState, TransferData, TransferOptions, TGT_LANG,
};

pub const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct BpwReport {
    pub bpw: f64,
    pub masked: usize,
}

/// Mask seed of sentence `i`; independent of how sentences are batched.
fn sentence_seed(mask_seed: u64, i: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    rng.set_stream(i as u64);
    rng.gen()
}

/// Mean `−log₂ p(gold)` over masked positions, eval mode. Sentence `i` is
/// masked with a seed derived from `(mask_seed, i)` only, so every model
/// and batch size sees the same masked set.
pub fn bpw(stack: &TransformerStack, sentences: &[Vec<u32>], lang: u32, mask_seed: u64, batch: usize) -> Result<BpwReport> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus("evaluation set is empty".into()));
    }
    let (v, tm) = (stack.cfg.vocab_size, stack.cfg.t_max);
    let mut nats = 0.0;
    let mut masked = 0;
    for (c, chunk) in sentences.chunks(batch.max(1)).enumerate() {
        let parts: Vec<UnifiedBatch> = chunk
            .iter()
            .enumerate()
            .map(|(k, s)| make_mlm_batch(&[&s[..]], lang, v, tm, sentence_seed(mask_seed, c * batch.max(1) + k)))
            .collect::<Result<_>>()?;
        let refs: Vec<&UnifiedBatch> = parts.iter().collect();
        let b = UnifiedBatch::concat(&refs)?;
        let mut t = Tape::new(stack, false, 0);
        let out = unified_forward(&mut t, &b)?;
        nats += t.g.value(out.mlm_loss).item()?;
        masked += out.n_pred;
    }
    if masked == 0 {
        return Err(Error::EmptyCorpus("no maskable positions in the evaluation set".into()));
    }
    Ok(BpwReport {
        bpw: nats / std::f64::consts::LN_2 / masked as f64,
        masked,
    })
}

/// Merges runs of identical ids into one.
pub fn collapse(raw: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(raw.len());
    for &t in raw {
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}

/// Collapses repeats, cuts at the first [SEP], drops specials.
pub fn postprocess(raw: &[u32]) -> Vec<u32> {
    let mut out = collapse(raw);
    if let Some(p) = out.iter().position(|&t| t == SEP) {
        out.truncate(p);
    }
    out.retain(|&t| !Vocab::is_special(t));
    out
}

/// Per-position argmax of one forward pass with the successive order;
/// `[CLS]` and `[SEP]` slots are included.
pub fn generate_raw(stack: &TransformerStack, sources: &[&[u32]], langs: (u32, u32)) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(sources.len());
    let budget = stack.cfg.t_max - 3;
    for chunk in sources.chunks(EVAL_BATCH) {
        let clipped: Vec<&[u32]> = chunk.iter().map(|x| &x[..x.len().min(budget)]).collect();
        let dummies: Vec<Vec<u32>> = clipped.iter().map(|x| vec![MASK; x.len()]).collect();
        let orders: Vec<Vec<usize>> = clipped.iter().map(|x| (0..x.len()).collect()).collect();
        let triples: Vec<(&[u32], &[u32], &[usize])> = clipped
            .iter()
            .zip(dummies.iter().zip(&orders))
            .map(|(x, (y, o))| (*x, &y[..], &o[..]))
            .collect();
        let batch = make_cdlm_batch(&triples, langs, stack.cfg.t_max)?;
        let mut t = Tape::new(stack, false, 0);
        let fo = unified_forward(&mut t, &batch)?;
        let logits = fo.pred_logits.ok_or_else(|| Error::Model("generation produced no predictions".into()))?;
        let lv = t.g.value(logits);
        let v = lv.last_dim();
        let mut r = 0;
        for x in &clipped {
            let ids = (0..x.len() + 2)
                .map(|_| {
                    let row = &lv.data()[r * v..(r + 1) * v];
                    r += 1;
                    row.iter().enumerate().fold(0, |b, (i, &s)| if s > row[b] { i } else { b }) as u32
                })
                .collect();
            out.push(ids);
        }
    }
    Ok(out)
}

/// Target ids for each source sentence.
pub fn generate_cdlm(stack: &TransformerStack, sources: &[&[u32]], langs: (u32, u32)) -> Result<Vec<Vec<u32>>> {
    Ok(generate_raw(stack, sources, langs)?.iter().map(|r| postprocess(r)).collect())
}

/// Position-wise token accuracy: matches at equal positions over the longer
/// of hypothesis and reference, pooled over the corpus.
pub fn token_accuracy<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Invalid(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let mut hit = 0;
    let mut total = 0;
    for (h, r) in hyps.iter().zip(refs) {
        hit += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    if total == 0 {
        return Err(Error::Invalid("token accuracy of empty sequences".into()));
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BleuUnit {
    Word,
    Char,
}

impl FromStr for BleuUnit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(BleuUnit::Word),
            "char" => Ok(BleuUnit::Char),
            _ => Err(Error::Config(format!("unknown BLEU unit `{s}` (word or char)"))),
        }
    }
}

pub fn units(text: &str, unit: BleuUnit) -> Vec<String> {
    match unit {
        BleuUnit::Word => text.split_whitespace().map(str::to_string).collect(),
        BleuUnit::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
    }
}

pub const BLEU_EPSILON: f64 = 1e-9;

fn ngrams<T: std::hash::Hash + Eq + Clone>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level cumulative BLEU-1..`max_n` in percent: brevity penalty
/// times the geometric mean of clipped n-gram precisions; a zero match
/// count is replaced by [`BLEU_EPSILON`].
pub fn bleu<T: std::hash::Hash + Eq + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<Vec<f64>> {
    if refs.is_empty() || hyps.len() != refs.len() {
        return Err(Error::Invalid(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if refs.iter().any(|r| r.is_empty()) {
        return Err(Error::Invalid("empty reference".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=max_n {
            let hc = ngrams(h, n);
            let rc = ngrams(r, n);
            total[n - 1] += hc.values().sum::<usize>();
            matched[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let p = if matched[n - 1] == 0 {
            BLEU_EPSILON / total[n - 1].max(1) as f64
        } else {
            matched[n - 1] as f64 / total[n - 1] as f64
        };
        log_sum += p.ln();
        out.push(100.0 * bp * (log_sum / n as f64).exp());
    }
    Ok(out)
}

/// "65.0 / 42.1 / 28.2 / 19.8".
pub fn format_bleu(scores: &[f64]) -> String {
    scores.iter().map(|s| format!("{s:.1}")).collect::<Vec<_>>().join(" / ")
}

/// Share of correct NSP decisions on pairs drawn from `corpus`.
pub fn nsp_accuracy(stack: &TransformerStack, corpus: &Corpus, seed: u64, pairs: usize) -> Result<f64> {
    let starts = corpus.nsp_starts();
    if starts.is_empty() || corpus.doc_starts.len() < 2 {
        return Err(Error::EmptyCorpus("no sentence pairs for NSP evaluation".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hit, mut n) = (0, 0);
    while n < pairs {
        let k = EVAL_BATCH.min(pairs - n);
        let pick: Vec<usize> = (0..k).map(|_| starts[rng.gen_range(0..starts.len())]).collect();
        let b = make_nsp_batch(corpus, &pick, TGT_LANG, stack.cfg.vocab_size, stack.cfg.t_max, rng.gen())?;
        let mut t = Tape::new(stack, false, 0);
        let out = unified_forward(&mut t, &b)?;
        let logits = t.g.value(out.nsp_logits.ok_or_else(|| Error::Model("no NSP logits".into()))?);
        let labels: Vec<bool> = b.nsp_label.iter().flatten().copied().collect();
        for (i, &l) in labels.iter().enumerate() {
            let row = logits.row(i);
            hit += ((row[1] > row[0]) == l) as usize;
        }
        n += k;
    }
    Ok(hit as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub arm: String,
    pub checkpoint: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub const SWEEP_HEADER: &str = "arm,checkpoint,metric,value,seed";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6},{}", r.arm, r.checkpoint, r.metric, r.value, r.seed);
    }
    s
}

/// A metric value with what produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub corpus: String,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!(
            "metric={}\nvalue={:.6}\ncorpus={}\nfingerprint={}\nseeds={}\n",
            self.metric,
            self.value,
            self.corpus,
            self.fingerprint,
            seeds.join(" ")
        )
    }
}

/// Median of a non-empty slice (mean of the middle pair for even counts).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Inputs shared by every arm of the init ablation.
pub struct Init4Inputs<'a> {
    pub donor: &'a TransformerStack,
    pub src: &'a Corpus,
    pub tgt: &'a Corpus,
    /// Skipgram rows, one per vocab id.
    pub skipgram: &'a Tensor,
    pub adv: AdvConfig,
    pub phase1: PhaseConfig,
    /// Steps at which BPW is measured; the last one ends the phase.
    pub checkpoints: Vec<usize>,
    pub eval: &'a [Vec<u32>],
    pub mask_seed: u64,
}

/// Commonality phase under each embedding initialisation, with target BPW
/// at every checkpoint.
pub fn ablate_init4(inp: &Init4Inputs, seed: u64) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for kind in EmbeddingInit::ALL {
        let mut adv = inp.adv.clone();
        adv.seed = seed;
        let init = initial_embeddings(kind, inp.donor, inp.src, inp.skipgram, &adv)?;
        let mut stack = inp.donor.clone();
        prepare_commonality(&mut stack, &init.rows)?;
        let source = commonality_source(&stack, inp.src, inp.tgt);
        let mut cfg = inp.phase1.clone();
        cfg.seed = seed;
        cfg.steps = inp.checkpoints.iter().copied().max().unwrap_or(cfg.steps);
        let mut state = TrainState::new(seed);
        for &c in &inp.checkpoints {
            run_steps(&mut stack, &mut state, &source, &cfg, c, &CheckpointSink::default())?;
            let r = bpw(&stack, inp.eval, TGT_LANG, inp.mask_seed, EVAL_BATCH)?;
            rows.push(SweepRow {
                arm: kind.name().into(),
                checkpoint: c,
                metric: "bpw".into(),
                value: r.bpw,
                seed,
            });
        }
    }
    Ok(rows)
}

/// Inputs of the parallel-data-size sweep.
pub struct ParallelInputs<'a> {
    /// Model after the commonality phase.
    pub ct: &'a TransformerStack,
    pub data: &'a TransferData,
    pub mono: &'a Corpus,
    pub phase2: PhaseConfig,
    pub opts: TransferOptions,
    pub sizes: Vec<usize>,
    pub eval: &'a [Vec<u32>],
    pub mask_seed: u64,
}

/// Transfer phase with the first `n` parallel pairs for each size `n`,
/// reporting target BPW of the combined model. Size 0 trains MLM only.
pub fn ablate_parallel(inp: &ParallelInputs, seed: u64) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &n in &inp.sizes {
        let data = inp.data.take(n);
        let mut cfg = inp.phase2.clone();
        cfg.seed = seed;
        let out = phase2_transfer(inp.ct, &data, inp.mono, inp.opts, &cfg)?;
        let r = bpw(&out.combined, inp.eval, TGT_LANG, inp.mask_seed, EVAL_BATCH)?;
        rows.push(SweepRow {
            arm: format!("parallel-{n}"),
            checkpoint: cfg.steps,
            metric: "bpw".into(),
            value: r.bpw,
            seed,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::tokenizer::{CLS, PLACEHOLDER};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 16,
            heads: 2,
            ffn: 32,
            t_max: 12,
            vocab_size: 256,
            ..Default::default()
        }
    }

    fn sentences(n: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..rng.gen_range(2..8)).map(|_| rng.gen_range(6..256)).collect()).collect()
    }

    fn uniform(stack: &mut TransformerStack) {
        for n in ["head.ln.g", "head.ln.b", "head.bias"] {
            let v = stack.params.value_mut(n).unwrap();
            *v = Tensor::zeros(v.shape());
        }
    }

    #[test]
    fn uniform_logits_give_log2_vocab() {
        let mut s = build_model(&cfg(), 0).unwrap();
        uniform(&mut s);
        let r = bpw(&s, &sentences(20, 1), 1, 7, 4).unwrap();
        assert!((r.bpw - 8.0).abs() < 1e-6);
        assert!(r.masked >= 20);
    }

    #[test]
    fn half_probability_gives_one_bit() {
        // two-word vocabulary beyond the specials; equal logits on both
        let mut s = build_model(&ModelConfig { vocab_size: 8, ..cfg() }, 0).unwrap();
        uniform(&mut s);
        let bias = s.params.value_mut("head.bias").unwrap();
        for i in 0..6 {
            bias.data_mut()[i] = -1e9;
        }
        let r = bpw(&s, &[vec![6]], 0, 1, 1).unwrap();
        assert_eq!(r.masked, 1);
        assert!((r.bpw - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bpw_independent_of_batching() {
        let s = build_model(&cfg(), 3).unwrap();
        let data = sentences(37, 2);
        let a = bpw(&s, &data, 1, 5, 1).unwrap();
        let b = bpw(&s, &data, 1, 5, 8).unwrap();
        let c = bpw(&s, &data, 1, 5, 64).unwrap();
        assert_eq!(a.masked, b.masked);
        assert!((a.bpw - b.bpw).abs() < 1e-9 && (a.bpw - c.bpw).abs() < 1e-9);
        assert!(bpw(&s, &[], 1, 5, 1).is_err());
    }

    #[test]
    fn postprocess_rules() {
        let (a, b, c) = (10, 11, 12);
        assert_eq!(postprocess(&[a, a, b, SEP, c]), vec![a, b]);
        assert_eq!(postprocess(&[CLS, a, b, c]), vec![a, b, c]);
        assert_eq!(postprocess(&[a, PLACEHOLDER, a]), vec![a, a]);
    }

    proptest! {
        #[test]
        fn collapse_is_idempotent(raw in proptest::collection::vec(0u32..12, 0..20)) {
            let once = collapse(&raw);
            prop_assert_eq!(collapse(&once), once.clone());
            prop_assert!(once.windows(2).all(|w| w[0] != w[1]));
        }

        #[test]
        fn bleu_orders_are_non_increasing(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| (0..rng.gen_range(4..10)).map(|_| rng.gen_range(0..4u8)).collect::<Vec<_>>();
            let refs: Vec<Vec<u8>> = (0..5).map(|_| mk(&mut rng)).collect();
            let hyps: Vec<Vec<u8>> = refs.iter().map(|r| {
                let mut h = r.clone();
                let i = rng.gen_range(0..h.len());
                h[i] = rng.gen_range(0..4);
                h
            }).collect();
            let s = bleu(&hyps, &refs, 4).unwrap();
            for w in s.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
        }

        #[test]
        fn bleu_invariant_under_relabeling(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| (0..rng.gen_range(3..9)).map(|_| rng.gen_range(0..6u8)).collect::<Vec<_>>();
            let refs: Vec<Vec<u8>> = (0..4).map(|_| mk(&mut rng)).collect();
            let hyps: Vec<Vec<u8>> = (0..4).map(|_| mk(&mut rng)).collect();
            let perm = [3u8, 5, 0, 1, 4, 2];
            let relabel = |v: &Vec<Vec<u8>>| v.iter().map(|s| s.iter().map(|&t| perm[t as usize]).collect()).collect::<Vec<Vec<u8>>>();
            let a = bleu(&hyps, &refs, 4).unwrap();
            let b = bleu(&relabel(&hyps), &relabel(&refs), 4).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn bleu_hand_cases() {
        let w = |s: &str| units(s, BleuUnit::Word);
        let same = bleu(&[w("a b c d")], &[w("a b c d")], 4).unwrap();
        assert!(same.iter().all(|&s| (s - 100.0).abs() < 1e-9));
        let half = bleu(&[w("a b")], &[w("a c")], 1).unwrap();
        assert!((half[0] - 50.0).abs() < 1e-9);
        // brevity: one of two reference tokens, p1 = 1, BP = e^(1-2)
        let short = bleu(&[w("a")], &[w("a b")], 1).unwrap();
        assert!((short[0] - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
        assert!(bleu::<String>(&[], &[], 4).is_err());
        assert!(bleu(&[w("a")], &[vec![]], 1).is_err());
        assert_eq!(units("ab c", BleuUnit::Char), vec!["a", "b", "c"]);
        assert_eq!(format_bleu(&[65.04, 42.1, 28.25, 19.8]), "65.0 / 42.1 / 28.2 / 19.8");
    }

    #[test]
    fn token_accuracy_counts_longer_side() {
        let acc = token_accuracy(&[vec![1, 2, 3]], &[vec![1, 5, 3, 4]]).unwrap();
        assert!((acc - 0.5).abs() < 1e-12);
        assert!(token_accuracy::<u32>(&[vec![]], &[vec![]]).is_err());
    }

    #[test]
    fn generation_shapes() {
        let s = build_model(&cfg(), 1).unwrap();
        let xs = sentences(5, 4);
        let refs: Vec<&[u32]> = xs.iter().map(|x| &x[..]).collect();
        let raw = generate_raw(&s, &refs, (0, 1)).unwrap();
        for (r, x) in raw.iter().zip(&xs) {
            assert_eq!(r.len(), x.len() + 2);
        }
        let out = generate_cdlm(&s, &refs, (0, 1)).unwrap();
        assert!(out.iter().zip(&xs).all(|(o, x)| o.len() <= x.len() + 2));
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn sweep_csv_layout() {
        let rows = vec![SweepRow {
            arm: "adv".into(),
            checkpoint: 100,
            metric: "bpw".into(),
            value: 5.25,
            seed: 1,
        }];
        assert_eq!(sweep_csv(&rows), "arm,checkpoint,metric,value,seed\nadv,100,bpw,5.250000,1\n");
    }
}
