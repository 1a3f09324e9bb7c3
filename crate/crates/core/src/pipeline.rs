//! Stage functions over files and the cached end-to-end run.
//!
//! Every stage reads its inputs from disk and writes its outputs atomically,
//! so a stage can run alone (from the CLI) or as part of [`run_pipeline`].
//! A stage is skipped when its cache key matches and its outputs exist; the
//! key hashes the stage name, the config keys it reads, the seed and the
//! bytes of every input file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::datakit::{load_mono, load_parallel, read_bytes, synth_langpair, write_atomic, Checkpoint, Corpus, RunConfig, SynthConfig};
use crate::embalign::AdvConfig;
use crate::error::{Error, Result};
use crate::evalkit::{self, bleu, format_bleu, generate_cdlm, token_accuracy, EvalReport, SweepRow, BLEU_EPSILON};
use crate::model::{build_model, ModelConfig, TransformerStack};
use crate::staticembed::{train_skipgram, EmbeddingSpace, SkipgramConfig};
use crate::tensor::Tensor;
use crate::tokenizer::{train_wordpiece, TokenizerConfig, Vocab};
use crate::trainer::{
    phase1_commonality, phase2_transfer, phase3_language_specific, pretrain_donor, write_metrics, EmbeddingInit, Phase,
    PhaseConfig, TrainState, TransferData, TransferObjective, TransferOptions, SRC_LANG, TGT_LANG,
};
use crate::wordalign::{align_corpus, align_pair, read_pharaoh_file, write_pharaoh_file, Alignment, Symmetrize};

pub const SRC_FILE: &str = "src.txt";
pub const TGT_FILE: &str = "tgt.txt";
pub const PARALLEL_FILE: &str = "parallel.tsv";
pub const INIT_TENSOR: &str = "init.rows";

pub fn model_config(c: &RunConfig, vocab_size: usize) -> Result<ModelConfig> {
    let m = ModelConfig {
        layers: c.usize("model.layers")?,
        d_model: c.usize("model.d_model")?,
        heads: c.usize("model.heads")?,
        ffn: c.usize("model.ffn")?,
        t_max: c.usize("model.t_max")?,
        vocab_size,
        dropout: c.f64("model.dropout")?,
        tie_head: c.bool("model.tie_head")?,
        ..Default::default()
    };
    m.validate()?;
    Ok(m)
}

pub fn tokenizer_config(c: &RunConfig) -> Result<TokenizerConfig> {
    Ok(TokenizerConfig {
        vocab_size: c.usize("tokenizer.vocab_size")?,
        alphabet_limit: c.usize("tokenizer.alphabet_limit")?,
    })
}

pub fn skipgram_config(c: &RunConfig, seed: u64) -> Result<SkipgramConfig> {
    Ok(SkipgramConfig {
        dim: c.usize("model.d_model")?,
        window: c.usize("skipgram.window")?,
        negatives: c.usize("skipgram.negatives")?,
        epochs: c.usize("skipgram.epochs")?,
        lr: c.f64("skipgram.lr")?,
        seed,
    })
}

pub fn synth_config(c: &RunConfig, seed: u64) -> Result<SynthConfig> {
    Ok(SynthConfig {
        words: c.usize("synth.words")?,
        particles: c.usize("synth.particles")?,
        topics: c.usize("synth.topics")?,
        pairs: c.usize("synth.pairs")?,
        mono_docs: c.usize("synth.mono_docs")?,
        len_range: (c.usize("synth.len_min")?, c.usize("synth.len_max")?),
        rule: c.parse("synth.rule")?,
        particle_prob: c.f64("synth.particle_prob")?,
        seed,
        ..Default::default()
    })
}

pub fn transfer_options(c: &RunConfig) -> Result<TransferOptions> {
    let mlm_lang = match c.get("phase2.mlm_lang")? {
        "tgt" => TGT_LANG,
        "src" => SRC_LANG,
        other => return Err(Error::Config(format!("phase2.mlm_lang must be tgt or src, got `{other}`"))),
    };
    Ok(TransferOptions {
        objective: c.parse::<TransferObjective>("phase2.objective")?,
        mlm_lang,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

/// Seed of one stage, derived from the run seed and the stage name.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Resolved config, seed and input hashes of one invocation.
pub fn run_metadata(command: &str, c: &RunConfig, seed: u64, inputs: &[PathBuf]) -> Result<String> {
    let mut s = format!("command={command}\nseed={seed}\nfingerprint={}\n", c.fingerprint());
    let mut all = Sha256::new();
    s.push_str("[inputs]\n");
    for p in inputs {
        let h = file_hash(p)?;
        all.update(h.as_bytes());
        let _ = writeln!(s, "{} {h}", p.display());
    }
    let _ = writeln!(s, "inputs_hash={}", all.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>());
    s.push_str("[config]\n");
    s.push_str(&c.to_text());
    Ok(s)
}

pub fn write_run_metadata(out: &Path, command: &str, c: &RunConfig, seed: u64, inputs: &[PathBuf]) -> Result<()> {
    write_atomic(&out.join(format!("{command}.meta")), run_metadata(command, c, seed, inputs)?.as_bytes())
}

/// Sentence pairs split into training and held-out parts.
pub fn split_pairs(pairs: &[(Vec<u32>, Vec<u32>)], held: usize) -> (Vec<(Vec<u32>, Vec<u32>)>, Vec<(Vec<u32>, Vec<u32>)>) {
    let cut = pairs.len().saturating_sub(held);
    (pairs[..cut].to_vec(), pairs[cut..].to_vec())
}

/// Training and held-out views of one data directory.
pub struct Data {
    pub src: Corpus,
    pub tgt: Corpus,
    pub tgt_held: Corpus,
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    pub held_pairs: Vec<(Vec<u32>, Vec<u32>)>,
}

impl Data {
    pub fn load(dir: &Path, vocab: &Vocab, c: &RunConfig) -> Result<Data> {
        let t_max = c.usize("model.t_max")?;
        let src = load_mono(&dir.join(SRC_FILE), vocab, t_max)?;
        let (tgt, tgt_held) = load_mono(&dir.join(TGT_FILE), vocab, t_max)?.split_docs(c.usize("eval.holdout_docs")?);
        let par = load_parallel(&dir.join(PARALLEL_FILE), vocab, t_max)?;
        let (pairs, held_pairs) = split_pairs(&par.pairs, c.usize("eval.holdout_pairs")?);
        if tgt.is_empty() || pairs.is_empty() {
            return Err(Error::EmptyCorpus("hold-out sizes leave no training data".into()));
        }
        Ok(Data {
            src,
            tgt,
            tgt_held,
            pairs,
            held_pairs,
        })
    }

    /// Target sentences for BPW: held-out documents, else held-out pair
    /// targets.
    pub fn eval_sentences(&self, cap: usize) -> Vec<Vec<u32>> {
        let pool: Vec<&Vec<u32>> = if self.tgt_held.is_empty() {
            self.held_pairs.iter().map(|p| &p.1).collect()
        } else {
            self.tgt_held.sentences.iter().collect()
        };
        pool.into_iter().take(cap).cloned().collect()
    }
}

pub fn synth_gen(c: &RunConfig, seed: u64, dir: &Path) -> Result<()> {
    synth_langpair(&synth_config(c, seed)?)?.write_dir(dir)
}

pub fn tokenizer_train(c: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<Vocab> {
    let texts = inputs.iter().map(|p| crate::datakit::read_utf8(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let v = train_wordpiece(&refs, &tokenizer_config(c)?)?;
    v.save(out)?;
    Ok(v)
}

fn metrics_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("metrics.csv")
}

fn save_state(state: &TrainState, stack: &TransformerStack, label: &str, out: &Path) -> Result<()> {
    state.to_checkpoint(stack, label)?.save(out)?;
    write_metrics(&metrics_path(out), &state.metrics)
}

/// MLM pretraining of a fresh stack on source text.
pub fn donor_train(c: &RunConfig, seed: u64, vocab: &Vocab, src: &Corpus, out: &Path) -> Result<TransformerStack> {
    let mut stack = build_model(&model_config(c, vocab.len())?, seed)?;
    let cfg = PhaseConfig::from_run(c, Phase::Donor, "donor", seed)?;
    let state = pretrain_donor(&mut stack, src, &cfg)?;
    save_state(&state, &stack, "donor", out)?;
    Ok(stack)
}

pub fn skipgram_train(c: &RunConfig, seed: u64, vocab: &Vocab, corpus: &Corpus, out: &Path) -> Result<EmbeddingSpace> {
    let space = train_skipgram(&corpus.sentences, vocab.tokens(), &skipgram_config(c, seed)?)?;
    space.save(out)?;
    Ok(space)
}

/// Phase-1 word embedding under `phase1.init`, saved with its epoch log.
pub fn embed_init(
    c: &RunConfig,
    seed: u64,
    donor: &TransformerStack,
    src: &Corpus,
    v: &EmbeddingSpace,
    out: &Path,
) -> Result<Tensor> {
    let kind: EmbeddingInit = c.parse("phase1.init")?;
    let adv = AdvConfig::from_run(c, seed)?;
    let init = crate::trainer::initial_embeddings(kind, donor, src, &v.matrix, &adv)?;
    let mut ck = Checkpoint::new();
    ck.set_meta("init.kind", kind.name());
    ck.push_tensor(INIT_TENSOR, &init.rows)?;
    if let Some(res) = &init.adversarial {
        ck.push_tensor(crate::embalign::CHECKPOINT_NAME, &res.map.w)?;
        let mut log = String::from("epoch,dis_accuracy,criterion,lr_w,orthogonality\n");
        for e in &res.log {
            let _ = writeln!(
                log,
                "{},{:.6},{:.6},{:.6e},{:.6e}",
                e.epoch, e.dis_accuracy, e.criterion, e.lr_w, e.orthogonality
            );
        }
        write_atomic(&out.with_extension("log.csv"), log.as_bytes())?;
    }
    ck.save(out)?;
    Ok(init.rows)
}

pub fn load_init(path: &Path) -> Result<Tensor> {
    Checkpoint::load(path)?.tensor(INIT_TENSOR)
}

/// Source→target and target→source alignments of every pair.
pub fn aligner_train(c: &RunConfig, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<(Vec<Alignment>, Vec<Alignment>)> {
    let slices: Vec<(&[u32], &[u32])> = pairs.iter().map(|(a, b)| (&a[..], &b[..])).collect();
    let mode: Symmetrize = c.parse("aligner.mode")?;
    let (xy, fwd, rev) = align_corpus(&slices, c.usize("aligner.iterations")?, mode)?;
    let yx = slices
        .iter()
        .map(|&(x, y)| align_pair(y, x, &rev, &fwd, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok((xy, yx))
}

pub fn read_alignments(pairs: &[(Vec<u32>, Vec<u32>)], xy: &Path, yx: &Path) -> Result<(Vec<Alignment>, Vec<Alignment>)> {
    let ylens: Vec<usize> = pairs.iter().map(|p| p.1.len()).collect();
    let xlens: Vec<usize> = pairs.iter().map(|p| p.0.len()).collect();
    Ok((read_pharaoh_file(xy, &ylens)?, read_pharaoh_file(yx, &xlens)?))
}

pub fn phase1(c: &RunConfig, seed: u64, donor: &TransformerStack, rows: &Tensor, data: &Data, out: &Path) -> Result<TransformerStack> {
    let mut stack = donor.clone();
    let cfg = PhaseConfig::from_run(c, Phase::Commonality, "phase1", seed)?;
    let state = phase1_commonality(&mut stack, Some(rows), &data.src, &data.tgt, &cfg)?;
    save_state(&state, &stack, "phase1", out)?;
    Ok(stack)
}

/// Writes `{a,b,combined}` checkpoints into `dir`; returns the combined one.
pub fn phase2(
    c: &RunConfig,
    seed: u64,
    ct: &TransformerStack,
    data: &Data,
    align: (&[Alignment], &[Alignment]),
    dir: &Path,
) -> Result<TransformerStack> {
    let mut td = TransferData::new(&data.pairs, align.0, align.1)?;
    let cap = c.usize("phase2.parallel")?;
    if cap > 0 {
        td = td.take(cap);
    }
    let opts = transfer_options(c)?;
    let mono = if opts.mlm_lang == TGT_LANG { &data.tgt } else { &data.src };
    let cfg = PhaseConfig::from_run(c, Phase::Transfer, "phase2", seed)?;
    let out = phase2_transfer(ct, &td, mono, opts, &cfg)?;
    out.model_a.save(&dir.join("phase2-a.ckpt"))?;
    out.model_b.save(&dir.join("phase2-b.ckpt"))?;
    out.combined.save(&dir.join("combined.ckpt"))?;
    write_metrics(&dir.join("phase2.metrics.csv"), &out.metrics)?;
    Ok(out.combined)
}

pub fn combine(a: &Path, b: &Path, out: &Path) -> Result<TransformerStack> {
    let m = crate::trainer::combine_models(&TransformerStack::load(a)?, &TransformerStack::load(b)?)?;
    m.save(out)?;
    Ok(m)
}

/// Returns the model and the NSP warning, if any.
pub fn phase3(c: &RunConfig, seed: u64, combined: &TransformerStack, data: &Data, out: &Path) -> Result<(TransformerStack, Option<String>)> {
    let mut stack = combined.clone();
    let cfg = PhaseConfig::from_run(c, Phase::Specific, "phase3", seed)?;
    let (state, warning) = phase3_language_specific(&mut stack, &data.tgt, c.bool("phase3.nsp")?, &cfg)?;
    save_state(&state, &stack, "phase3", out)?;
    Ok((stack, warning))
}

/// Decoded CdLM outputs for `sources`.
pub fn generate_text(stack: &TransformerStack, vocab: &Vocab, sources: &[&[u32]]) -> Result<Vec<String>> {
    generate_cdlm(stack, sources, (SRC_LANG, TGT_LANG))?
        .iter()
        .map(|ids| vocab.decode(ids, true))
        .collect()
}

/// Held-out evaluation: BPW of the combined and the final model, NSP of the
/// final model, and CdLM translation by the source-to-target model.
pub struct EvalSummary {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<EvalReport>,
    pub bleu: Vec<f64>,
    pub hypotheses: Vec<String>,
}

pub fn evaluate(
    c: &RunConfig,
    seed: u64,
    vocab: &Vocab,
    data: &Data,
    combined: &TransformerStack,
    generator: &TransformerStack,
    last: &TransformerStack,
) -> Result<EvalSummary> {
    let mask_seed = c.parse::<u64>("eval.mask_seed")?;
    let sents = data.eval_sentences(c.usize("eval.max_sentences")?);
    let mut rows = Vec::new();
    let mut push = |arm: &str, checkpoint: usize, metric: &str, value: f64| {
        rows.push(SweepRow {
            arm: arm.into(),
            checkpoint,
            metric: metric.into(),
            value,
            seed,
        })
    };
    let p2 = c.usize("phase2.steps")?;
    let p3 = c.usize("phase3.steps")?;
    push("phase2", p2, "bpw", evalkit::bpw(combined, &sents, TGT_LANG, mask_seed, evalkit::EVAL_BATCH)?.bpw);
    push("phase3", p3, "bpw", evalkit::bpw(last, &sents, TGT_LANG, mask_seed, evalkit::EVAL_BATCH)?.bpw);
    if data.tgt_held.doc_starts.len() >= 2 && !data.tgt_held.nsp_starts().is_empty() {
        push("phase3", p3, "nsp_accuracy", evalkit::nsp_accuracy(last, &data.tgt_held, mask_seed, c.usize("eval.nsp_pairs")?)?);
    }
    let mut scores = Vec::new();
    let mut hypotheses = Vec::new();
    if !data.held_pairs.is_empty() {
        let held: Vec<_> = data.held_pairs.iter().take(c.usize("eval.max_sentences")?).collect();
        let srcs: Vec<&[u32]> = held.iter().map(|p| &p.0[..]).collect();
        hypotheses = generate_text(generator, vocab, &srcs)?;
        let refs = held.iter().map(|p| vocab.decode(&p.1, true)).collect::<Result<Vec<_>>>()?;
        let h: Vec<Vec<String>> = hypotheses.iter().map(|s| evalkit::units(s, evalkit::BleuUnit::Word)).collect();
        let r: Vec<Vec<String>> = refs.iter().map(|s| evalkit::units(s, evalkit::BleuUnit::Word)).collect();
        scores = bleu(&h, &r, 4)?;
        for (n, s) in scores.iter().enumerate() {
            push("phase2-a", p2, &format!("bleu{}", n + 1), *s);
        }
        push("phase2-a", p2, "token_accuracy", token_accuracy(&h, &r)?);
    }
    let reports = rows
        .iter()
        .map(|r| EvalReport {
            metric: format!("{}.{}", r.arm, r.metric),
            value: r.value,
            corpus: "held-out target".into(),
            fingerprint: c.fingerprint(),
            seeds: vec![seed],
        })
        .collect();
    Ok(EvalSummary {
        rows,
        reports,
        bleu: scores,
        hypotheses,
    })
}

pub fn write_eval(summary: &EvalSummary, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("eval.csv"), evalkit::sweep_csv(&summary.rows).as_bytes())?;
    let mut text: String = summary.reports.iter().map(|r| r.to_text() + "\n").collect();
    if !summary.bleu.is_empty() {
        let _ = writeln!(text, "bleu={}\nbleu_smoothing=zero n-gram matches replaced by {BLEU_EPSILON:e}", format_bleu(&summary.bleu));
    }
    write_atomic(&dir.join("eval.txt"), text.as_bytes())?;
    let mut hyp = summary.hypotheses.join("\n");
    hyp.push('\n');
    write_atomic(&dir.join("generate.txt"), hyp.as_bytes())
}

/// Skips stages whose key and outputs are already on disk.
pub struct StageCache {
    dir: PathBuf,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

impl StageCache {
    pub fn new(out: &Path) -> Self {
        StageCache {
            dir: out.join("cache"),
            executed: Vec::new(),
            skipped: Vec::new(),
        }
    }

    pub fn key(name: &str, c: &RunConfig, prefixes: &[&str], seed: u64, inputs: &[PathBuf]) -> Result<String> {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update(seed.to_le_bytes());
        for (k, v) in c.iter().filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p))) {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        for p in inputs {
            h.update(file_hash(p)?.as_bytes());
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &mut self,
        name: &str,
        c: &RunConfig,
        prefixes: &[&str],
        seed: u64,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        f: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        let wrap = |e: Error| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        };
        let key = Self::key(name, c, prefixes, seed, inputs).map_err(wrap)?;
        let key_file = self.dir.join(format!("{name}.key"));
        let cached = std::fs::read_to_string(&key_file).map(|k| k == key).unwrap_or(false);
        if cached && outputs.iter().all(|p| p.exists()) {
            self.skipped.push(name.to_string());
            return Ok(());
        }
        f().map_err(wrap)?;
        if let Some(p) = outputs.iter().find(|p| !p.exists()) {
            return Err(wrap(Error::Invalid(format!("did not produce {}", p.display()))));
        }
        write_atomic(&key_file, key.as_bytes()).map_err(wrap)?;
        self.executed.push(name.to_string());
        Ok(())
    }
}

pub const STAGES: [&str; 10] = [
    "synth", "tokenizer", "donor", "skipgram", "embed-align", "aligner", "phase1", "phase2", "phase3", "eval",
];

pub struct PipelineReport {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub final_checkpoint: PathBuf,
    pub warnings: Vec<String>,
}

/// synth (when `data.dir` is empty) → tokenizer → donor → skipgram →
/// embed-align → aligner → phase1 → phase2 + combine → phase3 → eval.
pub fn run_pipeline(c: &RunConfig, seed: u64, out: &Path) -> Result<PipelineReport> {
    let mut cache = StageCache::new(out);
    let data_dir = match c.get("data.dir")? {
        "" => out.join("data"),
        d => PathBuf::from(d),
    };
    let src_txt = data_dir.join(SRC_FILE);
    let tgt_txt = data_dir.join(TGT_FILE);
    let par_tsv = data_dir.join(PARALLEL_FILE);
    let data_files = vec![src_txt.clone(), tgt_txt.clone(), par_tsv.clone()];
    let p = |n: &str| out.join(n);
    let ss = |n: &str| stage_seed(seed, n);
    let mut warnings = Vec::new();

    if c.get("data.dir")?.is_empty() {
        cache.run("synth", c, &["synth."], ss("synth"), &[], &data_files, || synth_gen(c, ss("synth"), &data_dir))?;
    }
    let vocab_path = p("vocab.tsv");
    cache.run("tokenizer", c, &["tokenizer."], 0, &data_files, &[vocab_path.clone()], || {
        tokenizer_train(c, &data_files, &vocab_path).map(|_| ())
    })?;

    let model_keys = ["model.", "eval.holdout"];
    let with_vocab = |extra: &[PathBuf]| {
        let mut v = vec![vocab_path.clone()];
        v.extend_from_slice(extra);
        v
    };
    let load = || -> Result<(Vocab, Data)> {
        let vocab = Vocab::load(&vocab_path)?;
        let data = Data::load(&data_dir, &vocab, c)?;
        Ok((vocab, data))
    };

    let donor_path = p("donor.ckpt");
    cache.run(
        "donor",
        c,
        &["model.", "donor.", "train."],
        ss("donor"),
        &with_vocab(&[src_txt.clone()]),
        &[donor_path.clone()],
        || {
            let vocab = Vocab::load(&vocab_path)?;
            let src = load_mono(&src_txt, &vocab, c.usize("model.t_max")?)?;
            donor_train(c, ss("donor"), &vocab, &src, &donor_path).map(|_| ())
        },
    )?;

    let vec_path = p("skipgram.vec");
    cache.run(
        "skipgram",
        c,
        &["model.", "skipgram.", "eval.holdout"],
        ss("skipgram"),
        &with_vocab(&data_files),
        &[vec_path.clone()],
        || {
            let (vocab, data) = load()?;
            skipgram_train(c, ss("skipgram"), &vocab, &data.tgt, &vec_path).map(|_| ())
        },
    )?;

    let init_path = p("init.ckpt");
    cache.run(
        "embed-align",
        c,
        &["model.", "embalign.", "phase1.init"],
        ss("embed-align"),
        &with_vocab(&[donor_path.clone(), vec_path.clone(), src_txt.clone()]),
        &[init_path.clone()],
        || {
            let vocab = Vocab::load(&vocab_path)?;
            let src = load_mono(&src_txt, &vocab, c.usize("model.t_max")?)?;
            let donor = TransformerStack::load(&donor_path)?;
            let v = EmbeddingSpace::load(&vec_path)?;
            embed_init(c, ss("embed-align"), &donor, &src, &v, &init_path).map(|_| ())
        },
    )?;

    let (xy_path, yx_path) = (p("align.xy"), p("align.yx"));
    cache.run(
        "aligner",
        c,
        &["model.t_max", "aligner.", "eval.holdout"],
        0,
        &with_vocab(&data_files),
        &[xy_path.clone(), yx_path.clone()],
        || {
            let (_, data) = load()?;
            let (xy, yx) = aligner_train(c, &data.pairs)?;
            write_pharaoh_file(&xy_path, &xy)?;
            write_pharaoh_file(&yx_path, &yx)
        },
    )?;

    let p1_path = p("phase1.ckpt");
    cache.run(
        "phase1",
        c,
        &[&model_keys[..], &["phase1.", "train."]].concat(),
        ss("phase1"),
        &with_vocab(&[donor_path.clone(), init_path.clone(), src_txt.clone(), tgt_txt.clone()]),
        &[p1_path.clone()],
        || {
            let (_, data) = load()?;
            let donor = TransformerStack::load(&donor_path)?;
            phase1(c, ss("phase1"), &donor, &load_init(&init_path)?, &data, &p1_path).map(|_| ())
        },
    )?;

    let combined_path = p("combined.ckpt");
    cache.run(
        "phase2",
        c,
        &[&model_keys[..], &["phase2.", "train."]].concat(),
        ss("phase2"),
        &with_vocab(&[p1_path.clone(), xy_path.clone(), yx_path.clone(), tgt_txt.clone(), src_txt.clone(), par_tsv.clone()]),
        &[combined_path.clone(), p("phase2-a.ckpt"), p("phase2-b.ckpt")],
        || {
            let (_, data) = load()?;
            let (xy, yx) = read_alignments(&data.pairs, &xy_path, &yx_path)?;
            let ct = TransformerStack::load(&p1_path)?;
            phase2(c, ss("phase2"), &ct, &data, (&xy, &yx), out).map(|_| ())
        },
    )?;

    let final_path = p("final.ckpt");
    cache.run(
        "phase3",
        c,
        &[&model_keys[..], &["phase3.", "train."]].concat(),
        ss("phase3"),
        &with_vocab(&[combined_path.clone(), tgt_txt.clone()]),
        &[final_path.clone()],
        || {
            let (_, data) = load()?;
            let (_, w) = phase3(c, ss("phase3"), &TransformerStack::load(&combined_path)?, &data, &final_path)?;
            warnings.extend(w);
            Ok(())
        },
    )?;

    cache.run(
        "eval",
        c,
        &[&model_keys[..], &["eval.", "phase2.steps", "phase3.steps"]].concat(),
        ss("eval"),
        &with_vocab(&[combined_path.clone(), p("phase2-a.ckpt"), final_path.clone(), tgt_txt.clone(), par_tsv.clone()]),
        &[p("eval.csv"), p("eval.txt")],
        || {
            let (vocab, data) = load()?;
            let combined = TransformerStack::load(&combined_path)?;
            let generator = TransformerStack::load(&p("phase2-a.ckpt"))?;
            let last = TransformerStack::load(&final_path)?;
            write_eval(&evaluate(c, seed, &vocab, &data, &combined, &generator, &last)?, out)
        },
    )?;

    write_run_metadata(out, "pipeline", c, seed, &data_files)?;
    Ok(PipelineReport {
        executed: cache.executed,
        skipped: cache.skipped,
        final_checkpoint: final_path,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ_and_repeat() {
        assert_eq!(stage_seed(1, "donor"), stage_seed(1, "donor"));
        assert_ne!(stage_seed(1, "donor"), stage_seed(1, "phase1"));
        assert_ne!(stage_seed(1, "donor"), stage_seed(2, "donor"));
    }

    #[test]
    fn cache_key_tracks_relevant_config_only() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("in.txt");
        write_atomic(&f, b"abc").unwrap();
        let mut c = RunConfig::default();
        let k0 = StageCache::key("s", &c, &["phase1."], 0, &[f.clone()]).unwrap();
        c.set("phase2.steps", "7").unwrap();
        assert_eq!(k0, StageCache::key("s", &c, &["phase1."], 0, &[f.clone()]).unwrap());
        c.set("phase1.steps", "7").unwrap();
        let k1 = StageCache::key("s", &c, &["phase1."], 0, &[f.clone()]).unwrap();
        assert_ne!(k0, k1);
        write_atomic(&f, b"abd").unwrap();
        assert_ne!(k1, StageCache::key("s", &c, &["phase1."], 0, &[f.clone()]).unwrap());
    }

    #[test]
    fn cache_skips_and_names_failures() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::default();
        let out = dir.path().join("o.txt");
        let mut cache = StageCache::new(dir.path());
        let write = || write_atomic(&out, b"x");
        cache.run("a", &c, &[], 0, &[], &[out.clone()], write).unwrap();
        cache.run("a", &c, &[], 0, &[], &[out.clone()], || panic!("cached stage ran")).unwrap();
        assert_eq!((cache.executed.len(), cache.skipped.len()), (1, 1));
        let err = cache
            .run("b", &c, &[], 0, &[], &[], || Err(Error::Invalid("boom".into())))
            .unwrap_err();
        assert!(err.to_string().contains("stage `b`"), "{err}");
    }

    #[test]
    fn metadata_lists_inputs_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x");
        write_atomic(&f, b"1").unwrap();
        let m = run_metadata("phase1", &RunConfig::default(), 3, &[f]).unwrap();
        assert!(m.contains("seed=3") && m.contains("phase1.steps=") && m.contains(&sha256_hex(b"1")));
    }

    #[test]
    fn split_pairs_keeps_tail() {
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..5).map(|i| (vec![i], vec![i])).collect();
        let (a, b) = split_pairs(&pairs, 2);
        assert_eq!((a.len(), b[0].0[0]), (3, 3));
        assert_eq!(split_pairs(&pairs, 9).0.len(), 0);
    }
}
