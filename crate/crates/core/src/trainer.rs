//! Donor pretraining and the three transfer phases.
//!
//! Every phase runs the same step loop: a [`BatchSource`] yields one or
//! more named sub-batches per step, each sub-batch loss is normalised by its
//! prediction count, the sum is back-propagated once and Adam updates the
//! trainable parameters. Frozen tensors are byte-compared at every
//! checkpoint interval and at the end of the phase.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datakit::batches::{make_cdlm_batch, make_mlm_batch, make_nsp_batch, make_tlm_batch};
use crate::datakit::{Checkpoint, Corpus, RunConfig};
use crate::embalign::{adversarial_align, procrustes_refine, AdvConfig, AdvResult};
use crate::error::{Error, Result};
use crate::model::{unified_forward, Group, Tape, TransformerStack, UnifiedBatch};
use crate::tensor::{adam_step, truncated_normal, AdamConfig, Tensor};
use crate::tokenizer::{Vocab, SPECIALS};
use crate::wordalign::{to_order, Alignment};

pub const SRC_LANG: u32 = 0;
pub const TGT_LANG: u32 = 1;

/// Linear warmup over `warmup * total` steps to `peak`, then linear decay
/// reaching 0 at the last step.
pub fn lr_schedule(step: usize, total: usize, peak: f64, warmup: f64) -> f64 {
    let warm = (warmup * total as f64).floor() as usize;
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warm);
    if span == 0 {
        return peak;
    }
    peak * (total.saturating_sub(1).saturating_sub(step)) as f64 / span as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Donor,
    Commonality,
    Transfer,
    Specific,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Donor => "donor",
            Phase::Commonality => "commonality",
            Phase::Transfer => "transfer",
            Phase::Specific => "specific",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub phase: Phase,
    /// Label written to the metrics `phase` column.
    pub label: String,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: f64,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl PhaseConfig {
    /// Reads `{prefix}.steps|batch|lr` and the shared `train.*` keys.
    pub fn from_run(c: &RunConfig, phase: Phase, prefix: &str, seed: u64) -> Result<Self> {
        let cfg = PhaseConfig {
            phase,
            label: phase.name().to_string(),
            steps: c.usize(&format!("{prefix}.steps"))?,
            batch: c.usize(&format!("{prefix}.batch"))?,
            lr: c.f64(&format!("{prefix}.lr"))?,
            warmup: c.f64("train.warmup")?,
            weight_decay: c.f64("train.weight_decay")?,
            checkpoint_every: c.usize("train.checkpoint_every")?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config(format!("{}: steps and batch must be at least 1", self.label)));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1)", self.warmup)));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate and weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub phase: String,
    pub objective: String,
    pub loss: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,phase,objective,loss,lr";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.8},{:.8e}", r.step, r.phase, r.objective, r.loss, r.lr);
    }
    s
}

fn parse_metrics(text: &str) -> Result<Vec<MetricRow>> {
    let bad = |l: &str| Error::Checkpoint {
        expected: "metrics rows".into(),
        found: l.to_string(),
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad(l));
            }
            Ok(MetricRow {
                step: f[0].parse().map_err(|_| bad(l))?,
                phase: f[1].to_string(),
                objective: f[2].to_string(),
                loss: f[3].parse().map_err(|_| bad(l))?,
                lr: f[4].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}

/// Position in a phase; everything needed to continue bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub metrics: Vec<MetricRow>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState {
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            metrics: Vec::new(),
        }
    }

    /// Stack with optimizer moments, the RNG, the step and the metrics so far.
    pub fn to_checkpoint(&self, stack: &TransformerStack, label: &str) -> Result<Checkpoint> {
        let mut ck = stack.to_checkpoint(true)?;
        ck.set_meta("trainer.phase", label);
        ck.set_meta("trainer.step", self.step);
        ck.set_meta("trainer.metrics", metrics_csv(&self.metrics));
        ck.put_rng("trainer.rng", &self.rng)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(TransformerStack, Self)> {
        let stack = TransformerStack::from_checkpoint(ck)?;
        let step = ck.meta("trainer.step").and_then(|s| s.parse().ok()).ok_or_else(|| Error::Checkpoint {
            expected: "metadata `trainer.step`".into(),
            found: "nothing".into(),
        })?;
        let metrics = parse_metrics(ck.meta("trainer.metrics").unwrap_or(""))?;
        let rng = ck.get_rng("trainer.rng")?;
        Ok((stack, TrainState { step, rng, metrics }))
    }
}

/// Produces the named sub-batches of one optimizer step.
pub trait BatchSource {
    fn next(&self, step: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(String, UnifiedBatch)>>;
}

/// Byte snapshot of every frozen tensor.
fn frozen_snapshot(stack: &TransformerStack) -> BTreeMap<String, Vec<u8>> {
    stack
        .params
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(n, p)| (n.to_string(), p.value.data().iter().flat_map(|x| x.to_le_bytes()).collect()))
        .collect()
}

fn check_frozen(stack: &TransformerStack, snap: &BTreeMap<String, Vec<u8>>, label: &str) -> Result<()> {
    for (name, bytes) in snap {
        let now: Vec<u8> = stack.params.value(name)?.data().iter().flat_map(|x| x.to_le_bytes()).collect();
        if &now != bytes {
            return Err(Error::Model(format!("{label}: frozen tensor `{name}` changed")));
        }
    }
    Ok(())
}

/// Where periodic checkpoints go; `None` disables them.
#[derive(Debug, Clone, Default)]
pub struct CheckpointSink {
    pub path: Option<PathBuf>,
}

/// Runs steps `state.step .. until` (capped at `cfg.steps`).
pub fn run_steps(
    stack: &mut TransformerStack,
    state: &mut TrainState,
    source: &dyn BatchSource,
    cfg: &PhaseConfig,
    until: usize,
    sink: &CheckpointSink,
) -> Result<()> {
    cfg.validate()?;
    let snap = frozen_snapshot(stack);
    let until = until.min(cfg.steps);
    while state.step < until {
        let step = state.step;
        let lr = lr_schedule(step, cfg.steps, cfg.lr, cfg.warmup);
        let parts = source.next(step, cfg.batch, &mut state.rng)?;
        let dropout_seed: u64 = state.rng.gen();
        let mut losses = Vec::with_capacity(parts.len());
        {
            let mut t = Tape::new(stack, true, dropout_seed);
            let mut total = None;
            for (name, batch) in &parts {
                let out = unified_forward(&mut t, batch)?;
                let mut terms = Vec::new();
                if out.n_pred > 0 {
                    terms.push((name.clone(), t.g.scale(out.mlm_loss, 1.0 / out.n_pred as f64)));
                }
                if let Some(nsp) = out.nsp_loss {
                    terms.push(("nsp".to_string(), t.g.scale(nsp, 1.0 / out.n_nsp as f64)));
                }
                for (obj, v) in terms {
                    losses.push((obj, t.g.value(v).item()?));
                    total = Some(match total {
                        None => v,
                        Some(acc) => t.g.add(acc, v)?,
                    });
                }
            }
            if let Some(total) = total {
                t.g.backward(total)?;
                t.g.accumulate_into(&mut stack.params)?;
            }
        }
        for (obj, loss) in losses {
            if !loss.is_finite() {
                return Err(Error::Model(format!("{}: non-finite {obj} loss at step {step}", cfg.label)));
            }
            state.metrics.push(MetricRow {
                step,
                phase: cfg.label.clone(),
                objective: obj,
                loss,
                lr,
            });
        }
        let adam = AdamConfig {
            lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        };
        adam_step(&mut stack.params, &adam)?;
        state.step += 1;
        let at_interval = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
        if at_interval || state.step == cfg.steps {
            check_frozen(stack, &snap, &cfg.label)?;
            if let Some(p) = &sink.path {
                state.to_checkpoint(stack, &cfg.label)?.save(p)?;
            }
        }
    }
    check_frozen(stack, &snap, &cfg.label)
}

/// Runs a whole phase from a fresh optimizer state.
pub fn run_phase(stack: &mut TransformerStack, source: &dyn BatchSource, cfg: &PhaseConfig) -> Result<TrainState> {
    stack.params.reset_optimizer();
    let mut state = TrainState::new(cfg.seed);
    run_steps(stack, &mut state, source, cfg, cfg.steps, &CheckpointSink::default())?;
    Ok(state)
}

fn pick<'a, T>(items: &'a [T], batch: usize, rng: &mut ChaCha8Rng) -> Vec<&'a T> {
    (0..batch).map(|_| &items[rng.gen_range(0..items.len())]).collect()
}

/// MLM over one or more monolingual corpora, one corpus per step in turn.
pub struct MonoMlm<'a> {
    pub corpora: Vec<(&'a Corpus, u32, &'static str)>,
    pub vocab_size: usize,
    pub t_max: usize,
}

impl BatchSource for MonoMlm<'_> {
    fn next(&self, step: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(String, UnifiedBatch)>> {
        let (corpus, lang, name) = self.corpora[step % self.corpora.len()];
        let sents: Vec<&[u32]> = pick(&corpus.sentences, batch, rng).into_iter().map(|s| &s[..]).collect();
        let seed = rng.gen();
        Ok(vec![(name.to_string(), make_mlm_batch(&sents, lang, self.vocab_size, self.t_max, seed)?)])
    }
}

/// Parallel pairs with order vectors in both directions.
#[derive(Debug, Clone, Default)]
pub struct TransferData {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    /// Per target position of y, a position of x or `x.len()` for [P].
    pub order_xy: Vec<Vec<usize>>,
    /// Per target position of x, a position of y or `y.len()` for [P].
    pub order_yx: Vec<Vec<usize>>,
    /// Pairs dropped because an alignment did not fit its sentences.
    pub skipped: usize,
}

impl TransferData {
    pub fn new(pairs: &[(Vec<u32>, Vec<u32>)], a_xy: &[Alignment], a_yx: &[Alignment]) -> Result<Self> {
        if a_xy.len() != pairs.len() || a_yx.len() != pairs.len() {
            return Err(Error::Batch(format!(
                "{} pairs but {} / {} alignments",
                pairs.len(),
                a_xy.len(),
                a_yx.len()
            )));
        }
        let mut out = TransferData::default();
        for ((x, y), (axy, ayx)) in pairs.iter().zip(a_xy.iter().zip(a_yx)) {
            let ok = axy.len() == y.len() && ayx.len() == x.len();
            let orders = ok.then(|| (to_order(axy, x.len()), to_order(ayx, y.len())));
            match orders {
                Some((Ok(oxy), Ok(oyx))) => {
                    out.pairs.push((x.clone(), y.clone()));
                    out.order_xy.push(oxy);
                    out.order_yx.push(oyx);
                }
                _ => out.skipped += 1,
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn take(&self, n: usize) -> TransferData {
        TransferData {
            pairs: self.pairs.iter().take(n).cloned().collect(),
            order_xy: self.order_xy.iter().take(n).cloned().collect(),
            order_yx: self.order_yx.iter().take(n).cloned().collect(),
            skipped: self.skipped,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Source to target: model A.
    Forward,
    /// Target to source: model B.
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferObjective {
    CdlmMlm,
    /// The baseline without CdLM.
    MlmTlm,
}

impl FromStr for TransferObjective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cdlm+mlm" => Ok(TransferObjective::CdlmMlm),
            "mlm+tlm" => Ok(TransferObjective::MlmTlm),
            _ => Err(Error::Config(format!("unknown phase-2 objective `{s}` (cdlm+mlm or mlm+tlm)"))),
        }
    }
}

/// One parallel sub-batch in the model's direction plus one MLM sub-batch.
pub struct TransferSource<'a> {
    pub data: &'a TransferData,
    pub mono: &'a Corpus,
    pub mono_lang: u32,
    pub direction: Direction,
    pub objective: TransferObjective,
    pub vocab_size: usize,
    pub t_max: usize,
}

impl BatchSource for TransferSource<'_> {
    fn next(&self, _step: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(String, UnifiedBatch)>> {
        let mut parts = Vec::with_capacity(2);
        if !self.data.is_empty() {
            let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..self.data.len())).collect();
            let fwd = self.direction == Direction::Forward;
            let langs = if fwd { (SRC_LANG, TGT_LANG) } else { (TGT_LANG, SRC_LANG) };
            let sub = match self.objective {
                TransferObjective::CdlmMlm => {
                    let triples: Vec<(&[u32], &[u32], &[usize])> = idx
                        .iter()
                        .map(|&i| {
                            let (x, y) = &self.data.pairs[i];
                            if fwd {
                                (&x[..], &y[..], &self.data.order_xy[i][..])
                            } else {
                                (&y[..], &x[..], &self.data.order_yx[i][..])
                            }
                        })
                        .collect();
                    ("cdlm", make_cdlm_batch(&triples, langs, self.t_max)?)
                }
                TransferObjective::MlmTlm => {
                    let pairs: Vec<(&[u32], &[u32])> = idx
                        .iter()
                        .map(|&i| {
                            let (x, y) = &self.data.pairs[i];
                            if fwd {
                                (&x[..], &y[..])
                            } else {
                                (&y[..], &x[..])
                            }
                        })
                        .collect();
                    let seed = rng.gen();
                    ("tlm", make_tlm_batch(&pairs, langs, self.vocab_size, self.t_max, seed)?)
                }
            };
            parts.push((sub.0.to_string(), sub.1));
        }
        let sents: Vec<&[u32]> = pick(&self.mono.sentences, batch, rng).into_iter().map(|s| &s[..]).collect();
        let seed = rng.gen();
        parts.push(("mlm".into(), make_mlm_batch(&sents, self.mono_lang, self.vocab_size, self.t_max, seed)?));
        Ok(parts)
    }
}

/// MLM + NSP over sentence pairs of the target corpus; plain MLM when NSP
/// is off.
pub struct SpecificSource<'a> {
    pub corpus: &'a Corpus,
    pub starts: Vec<usize>,
    pub nsp: bool,
    pub vocab_size: usize,
    pub t_max: usize,
}

impl<'a> SpecificSource<'a> {
    /// Disables NSP (and counts a warning) when no document has two
    /// sentences or there is only one document.
    pub fn new(corpus: &'a Corpus, nsp: bool, vocab_size: usize, t_max: usize) -> (Self, Option<String>) {
        let starts = corpus.nsp_starts();
        let usable = !starts.is_empty() && corpus.doc_starts.len() > 1;
        let warning = (nsp && !usable).then(|| "corpus has no multi-sentence documents; NSP disabled".to_string());
        (
            SpecificSource {
                corpus,
                starts,
                nsp: nsp && usable,
                vocab_size,
                t_max,
            },
            warning,
        )
    }
}

impl BatchSource for SpecificSource<'_> {
    fn next(&self, _step: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(String, UnifiedBatch)>> {
        if !self.nsp {
            let sents: Vec<&[u32]> = pick(&self.corpus.sentences, batch, rng).into_iter().map(|s| &s[..]).collect();
            let seed = rng.gen();
            return Ok(vec![("mlm".into(), make_mlm_batch(&sents, TGT_LANG, self.vocab_size, self.t_max, seed)?)]);
        }
        let starts: Vec<usize> = pick(&self.starts, batch, rng).into_iter().copied().collect();
        let seed = rng.gen();
        let b = make_nsp_batch(self.corpus, &starts, TGT_LANG, self.vocab_size, self.t_max, seed)?;
        Ok(vec![("mlm".into(), b)])
    }
}

/// Source-language MLM over every parameter: the stand-in for a published
/// pre-trained model.
pub fn pretrain_donor(stack: &mut TransformerStack, src: &Corpus, cfg: &PhaseConfig) -> Result<TrainState> {
    stack.set_frozen_where(|_| false)?;
    let source = MonoMlm {
        corpora: vec![(src, SRC_LANG, "mlm-src")],
        vocab_size: stack.cfg.vocab_size,
        t_max: stack.cfg.t_max,
    };
    run_phase(stack, &source, cfg)
}

/// Parameters updated in the commonality phase: embeddings, the TRILayer
/// and the LM output bias (plus the decoder when untied).
pub fn phase1_trainable(name: &str) -> bool {
    name.starts_with("emb.") || name.starts_with("trilayer.") || name == "head.bias" || name == "head.decoder"
}

/// Sets the aligned word embeddings, re-copies the pivot layer into the
/// TRILayer and freezes the backbone.
pub fn prepare_commonality(stack: &mut TransformerStack, rows: &Tensor) -> Result<()> {
    stack.set_word_embeddings(rows)?;
    let pivot = format!("lower.{}", stack.cfg.half() - 1);
    stack.init_trilayer_from(&pivot)?;
    stack.set_frozen_where(|n| !phase1_trainable(n))?;
    stack.params.reset_optimizer();
    Ok(())
}

/// Joint MLM with the two languages alternating step by step.
pub fn commonality_source<'a>(stack: &TransformerStack, src: &'a Corpus, tgt: &'a Corpus) -> MonoMlm<'a> {
    MonoMlm {
        corpora: vec![(src, SRC_LANG, "mlm-src"), (tgt, TGT_LANG, "mlm-tgt")],
        vocab_size: stack.cfg.vocab_size,
        t_max: stack.cfg.t_max,
    }
}

/// Commonality phase: [`prepare_commonality`] then joint MLM.
pub fn phase1_commonality(
    stack: &mut TransformerStack,
    embeddings: Option<&Tensor>,
    src: &Corpus,
    tgt: &Corpus,
    cfg: &PhaseConfig,
) -> Result<TrainState> {
    let rows = embeddings.ok_or_else(|| Error::Model("commonality phase needs aligned word embeddings".into()))?;
    prepare_commonality(stack, rows)?;
    let source = commonality_source(stack, src, tgt);
    run_phase(stack, &source, cfg)
}

/// Settings of the transfer phase beyond the step schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferOptions {
    pub objective: TransferObjective,
    /// Language of the MLM half of each step; the algorithm uses the target.
    pub mlm_lang: u32,
}

impl Default for TransferOptions {
    fn default() -> Self {
        TransferOptions {
            objective: TransferObjective::CdlmMlm,
            mlm_lang: TGT_LANG,
        }
    }
}

pub struct TransferOutcome {
    pub combined: TransformerStack,
    pub model_a: TransformerStack,
    pub model_b: TransformerStack,
    pub metrics: Vec<MetricRow>,
}

/// Trains one directional model from `ct`.
pub fn train_direction(
    ct: &TransformerStack,
    data: &TransferData,
    mono: &Corpus,
    direction: Direction,
    opts: TransferOptions,
    cfg: &PhaseConfig,
) -> Result<(TransformerStack, TrainState)> {
    let mut m = ct.clone();
    let frozen = match direction {
        Direction::Forward => Group::Lower,
        Direction::Backward => Group::Upper,
    };
    m.set_frozen_groups(&[frozen])?;
    let source = TransferSource {
        data,
        mono,
        mono_lang: opts.mlm_lang,
        direction,
        objective: opts.objective,
        vocab_size: m.cfg.vocab_size,
        t_max: m.cfg.t_max,
    };
    let state = run_phase(&mut m, &source, cfg)?;
    Ok((m, state))
}

/// Transfer phase: model A (source to target, lower half frozen) and model
/// B (target to source, upper half frozen) from the same start, then
/// combined. `mono` is the corpus in `opts.mlm_lang`.
pub fn phase2_transfer(
    ct: &TransformerStack,
    data: &TransferData,
    mono: &Corpus,
    opts: TransferOptions,
    cfg: &PhaseConfig,
) -> Result<TransferOutcome> {
    let mut cfg_a = cfg.clone();
    cfg_a.label = format!("{}-a", cfg.label);
    let (a, sa) = train_direction(ct, data, mono, Direction::Forward, opts, &cfg_a)?;
    let mut cfg_b = cfg.clone();
    cfg_b.label = format!("{}-b", cfg.label);
    cfg_b.seed = cfg.seed ^ 0x5eed_b;
    let (b, sb) = train_direction(ct, data, mono, Direction::Backward, opts, &cfg_b)?;
    let combined = combine_models(&a, &b)?;
    let mut metrics = sa.metrics;
    metrics.extend(sb.metrics);
    Ok(TransferOutcome {
        combined,
        model_a: a,
        model_b: b,
        metrics,
    })
}

/// Lower half from `b`, upper half from `a`, element-wise mean elsewhere.
/// The result has no frozen tensors and empty optimizer state.
pub fn combine_models(a: &TransformerStack, b: &TransformerStack) -> Result<TransformerStack> {
    if a.cfg != b.cfg {
        return Err(Error::Model("cannot combine models with different configurations".into()));
    }
    let mut out = a.clone();
    let names: Vec<String> = a.params.names().map(str::to_string).collect();
    for n in &names {
        let va = a.params.value(n)?;
        let vb = b.params.value(n)?;
        let merged = match Group::of(n)? {
            Group::Lower => vb.clone(),
            Group::Upper => va.clone(),
            _ => {
                let data = va.data().iter().zip(vb.data()).map(|(x, y)| (x + y) / 2.0).collect();
                Tensor::new(va.shape().to_vec(), data)?
            }
        };
        *out.params.value_mut(n)? = merged;
    }
    out.set_frozen_where(|_| false)?;
    out.params.reset_optimizer();
    out.params.zero_grad();
    Ok(out)
}

/// Language-specific phase: everything trainable, MLM plus NSP on target
/// sentence pairs. Returns the state and a warning when NSP had to be
/// disabled.
pub fn phase3_language_specific(
    stack: &mut TransformerStack,
    tgt: &Corpus,
    nsp: bool,
    cfg: &PhaseConfig,
) -> Result<(TrainState, Option<String>)> {
    stack.set_frozen_where(|_| false)?;
    let (source, warning) = SpecificSource::new(tgt, nsp, stack.cfg.vocab_size, stack.cfg.t_max);
    let state = run_phase(stack, &source, cfg)?;
    Ok((state, warning))
}

/// Word-embedding initialisations compared in the init ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingInit {
    /// Skipgram vectors mapped by the adversarial + Procrustes map.
    Adv,
    /// Skipgram vectors, unmapped.
    Skipgram,
    /// Random vectors.
    Rand,
    /// Random vectors mapped by a map aligned on them.
    RandAdv,
}

impl EmbeddingInit {
    pub const ALL: [EmbeddingInit; 4] = [EmbeddingInit::Adv, EmbeddingInit::Skipgram, EmbeddingInit::RandAdv, EmbeddingInit::Rand];

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingInit::Adv => "adv",
            EmbeddingInit::Skipgram => "skipgram",
            EmbeddingInit::Rand => "rand",
            EmbeddingInit::RandAdv => "rand+adv",
        }
    }
}

impl FromStr for EmbeddingInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown embedding init `{s}` (adv, skipgram, rand or rand+adv)")))
    }
}

/// Ids of non-special tokens occurring in `corpus`, ascending.
pub fn seen_tokens(corpus: &Corpus) -> Vec<usize> {
    let mut seen = std::collections::BTreeSet::new();
    for s in &corpus.sentences {
        seen.extend(s.iter().copied().filter(|&t| !Vocab::is_special(t)).map(|t| t as usize));
    }
    seen.into_iter().collect()
}

fn rows_of(m: &Tensor, ids: &[usize]) -> Tensor {
    let d = m.last_dim();
    Tensor::new(vec![ids.len(), d], ids.iter().flat_map(|&i| m.row(i).iter().copied()).collect()).expect("rows")
}

fn mean_norm(m: &Tensor, skip_specials: bool) -> f64 {
    let start = if skip_specials { SPECIALS.len().min(m.rows()) } else { 0 };
    let n = m.rows() - start;
    if n == 0 {
        return 0.0;
    }
    (start..m.rows()).map(|i| m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).sum::<f64>() / n as f64
}

fn scaled(m: &Tensor, factor: f64) -> Tensor {
    Tensor::new(m.shape().to_vec(), m.data().iter().map(|x| x * factor).collect()).expect("same shape")
}

/// The donor's word vectors for tokens seen in source text: the U space.
pub fn donor_space(donor: &TransformerStack, src: &Corpus) -> Result<(Vec<usize>, Tensor)> {
    let ids = seen_tokens(src);
    if ids.is_empty() {
        return Err(Error::EmptyCorpus("source corpus has no ordinary tokens".into()));
    }
    Ok((ids.clone(), rows_of(donor.params.value("emb.wrd")?, &ids)))
}

pub struct InitOutcome {
    /// `|V| x d` rows for `emb.wrd`.
    pub rows: Tensor,
    pub adversarial: Option<AdvResult>,
}

/// Builds the phase-1 word embedding. `v` holds one skipgram row per vocab
/// id. Vectors are rescaled to the donor's mean row norm before alignment;
/// special-token rows keep the donor's values.
pub fn initial_embeddings(
    kind: EmbeddingInit,
    donor: &TransformerStack,
    src: &Corpus,
    v: &Tensor,
    adv: &AdvConfig,
) -> Result<InitOutcome> {
    let e = donor.params.value("emb.wrd")?;
    if v.shape() != e.shape() {
        return Err(Error::DimensionMismatch {
            left: v.len(),
            right: e.len(),
        });
    }
    let (_, u) = donor_space(donor, src)?;
    let target_norm = mean_norm(&u, false);
    let base = match kind {
        EmbeddingInit::Adv | EmbeddingInit::Skipgram => v.clone(),
        EmbeddingInit::Rand | EmbeddingInit::RandAdv => {
            let mut rng = ChaCha8Rng::seed_from_u64(adv.seed ^ 0x7261_6e64);
            truncated_normal(v.shape(), 1.0, &mut rng)
        }
    };
    let norm = mean_norm(&base, true);
    let base = scaled(&base, if norm > 0.0 { target_norm / norm } else { 1.0 });
    let (mut rows, adversarial) = match kind {
        EmbeddingInit::Skipgram | EmbeddingInit::Rand => (base, None),
        EmbeddingInit::Adv | EmbeddingInit::RandAdv => {
            let res = adversarial_align(&u, &base, adv)?;
            let k = adv.csls_k.min(u.rows().min(base.rows()) - 1).max(1);
            let map = procrustes_refine(&res.map, &u, &base, None, adv.refine_rounds, k).or_else(|e| match e {
                // a degenerate mined dictionary keeps the adversarial map
                Error::RankDeficient { .. } => Ok(res.map.clone()),
                other => Err(other),
            })?;
            (map.apply(&base)?, Some(res))
        }
    };
    let d = rows.last_dim();
    for s in 0..SPECIALS.len().min(rows.rows()) {
        rows.data_mut()[s * d..(s + 1) * d].copy_from_slice(e.row(s));
    }
    Ok(InitOutcome { rows, adversarial })
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    crate::datakit::write_atomic(path, metrics_csv(rows).as_bytes())
}
