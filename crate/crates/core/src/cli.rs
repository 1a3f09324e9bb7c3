//! The `trelm` command line. Every pipeline stage is a subcommand; config
//! values resolve as defaults < `--config` file < `TRELM_*` environment
//! variables < `--set key=value` flags.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datakit::{load_mono, read_utf8, write_atomic, RunConfig};
use crate::embalign::{
    adversarial_align, parse_dictionary, procrustes, procrustes_refine, space_diagnostics, translation_accuracy,
    unsupervised_criterion, AdvConfig,
};
use crate::error::{Error, Result};
use crate::evalkit::{self, ablate_init4, ablate_parallel, bleu, format_bleu, sweep_csv, units, BleuUnit, Init4Inputs, ParallelInputs};
use crate::model::gradsuite::gradient_suite;
use crate::model::TransformerStack;
use crate::pipeline::{self as pl, stage_seed, Data};
use crate::staticembed::EmbeddingSpace;
use crate::tokenizer::Vocab;
use crate::trainer::{PhaseConfig, Phase, TransferData, SRC_LANG, TGT_LANG};
use crate::wordalign::{align_pair, write_pharaoh_file, Symmetrize, TranslationTable};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "trelm",
    version,
    about = "Transfer a pre-trained masked language model to a new language",
    after_help = "Environment: TRELM_<SECTION>_<KEY> overrides a config key, e.g. TRELM_PHASE1_STEPS=50.\nRun `trelm config-keys` for the full key list."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Config file of `key=value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed every random choice of the run derives from.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads. Computation is single-threaded, so results are the
    /// same for every value.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".", value_name = "DIR")]
    pub out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Joint vocabulary from `tokenizer-train`.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Directory with src.txt, tgt.txt and parallel.tsv.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct AlignArgs {
    /// Source→target Pharaoh alignments of the training pairs.
    #[arg(long)]
    pub align_xy: PathBuf,
    /// Target→source Pharaoh alignments of the training pairs.
    #[arg(long)]
    pub align_yx: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic language pair into --out.
    SynthGen,
    /// Train the joint WordPiece vocabulary; writes vocab.tsv.
    TokenizerTrain {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
    /// MLM-pretrain a donor model on source text; writes donor.ckpt.
    DonorTrain {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        src: PathBuf,
    },
    /// Train skipgram vectors; writes skipgram.vec.
    SkipgramTrain {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Align two embedding spaces. With --donor, builds the phase-1 word
    /// embedding (init.ckpt) instead.
    EmbedAlign {
        /// Reference space U (.vec).
        #[arg(long, conflicts_with = "donor")]
        src_emb: Option<PathBuf>,
        /// Space V to map onto U (.vec).
        #[arg(long)]
        tgt_emb: PathBuf,
        /// Seed dictionary, `V token<TAB>U token` per line: Procrustes only.
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Gold dictionary in the same format, used to report accuracy.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long, requires_all = ["vocab", "src"])]
        donor: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Source text, with --donor.
        #[arg(long)]
        src: Option<PathBuf>,
    },
    /// Train IBM-1 tables in both directions; writes ibm1.fwd.tsv and ibm1.rev.tsv.
    AlignerTrain {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Symmetrized alignments of the training pairs; writes align.xy and align.yx.
    Align {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        fwd: PathBuf,
        #[arg(long)]
        rev: PathBuf,
    },
    /// Commonality phase; writes phase1.ckpt.
    Phase1 {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        donor: PathBuf,
        /// Word embedding from `embed-align --donor`.
        #[arg(long)]
        init: PathBuf,
    },
    /// Transfer phase; writes phase2-a.ckpt, phase2-b.ckpt and combined.ckpt.
    Phase2 {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        align: AlignArgs,
        /// Model after the commonality phase.
        #[arg(long)]
        model: PathBuf,
    },
    /// Combine two directional models; writes combined.ckpt.
    Combine {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Language-specific phase; writes final.ckpt.
    Phase3 {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Bits per word of masked tokens under the fixed evaluation mask.
    EvalBpw {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// One sentence per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "tgt", value_parser = ["src", "tgt"])]
        lang: String,
    },
    /// Corpus BLEU-1..N of a hypothesis file against a reference file.
    EvalBleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref", value_name = "PATH")]
        reference: PathBuf,
        #[arg(long, default_value = "word")]
        unit: String,
        #[arg(long, default_value_t = 4)]
        max_n: usize,
    },
    /// CdLM translation of each input line; writes generate.txt.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Commonality phase under the four embedding initialisations; writes init4.csv.
    AblateInit4 {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        donor: PathBuf,
        /// Skipgram vectors of the target language.
        #[arg(long)]
        skipgram: PathBuf,
        /// Steps at which BPW is measured.
        #[arg(long, value_delimiter = ',', default_value = "100,200")]
        checkpoints: Vec<usize>,
    },
    /// Transfer phase at several parallel-data sizes; writes parallel.csv.
    AblateParallel {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        align: AlignArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,100,1000,10000")]
        sizes: Vec<usize>,
    },
    /// Finite-difference checks of every primitive and an encoder block.
    GradCheck,
    /// Cosine histogram and 2-D PCA of a probe's neighbourhood; writes diagnose.csv.
    DiagnoseEmbed {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        probe: String,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Every stage in order, skipping those whose inputs are unchanged.
    Pipeline,
    /// Print every config key with its default.
    ConfigKeys,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthGen => "synth-gen",
            Command::TokenizerTrain { .. } => "tokenizer-train",
            Command::DonorTrain { .. } => "donor-train",
            Command::SkipgramTrain { .. } => "skipgram-train",
            Command::EmbedAlign { .. } => "embed-align",
            Command::AlignerTrain { .. } => "aligner-train",
            Command::Align { .. } => "align",
            Command::Phase1 { .. } => "phase1",
            Command::Phase2 { .. } => "phase2",
            Command::Combine { .. } => "combine",
            Command::Phase3 { .. } => "phase3",
            Command::EvalBpw { .. } => "eval-bpw",
            Command::EvalBleu { .. } => "eval-bleu",
            Command::Generate { .. } => "generate",
            Command::AblateInit4 { .. } => "ablate-init4",
            Command::AblateParallel { .. } => "ablate-parallel",
            Command::GradCheck => "grad-check",
            Command::DiagnoseEmbed { .. } => "diagnose-embed",
            Command::Pipeline => "pipeline",
            Command::ConfigKeys => "config-keys",
        }
    }
}

/// Resolves the run config from every source in precedence order.
pub fn resolve_config(g: &Global, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(p) = &g.config {
        c.merge_file(p)?;
    }
    c.merge_vars(env)?;
    for kv in &g.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        c.set(k.trim(), v)?;
    }
    Ok(c)
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn input_file(p: &Path) -> Result<PathBuf> {
    if p.is_file() {
        Ok(p.to_path_buf())
    } else {
        Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")))
    }
}

fn data_inputs(d: &DataArgs) -> Result<Vec<PathBuf>> {
    [d.vocab.clone(), d.data.join(pl::SRC_FILE), d.data.join(pl::TGT_FILE), d.data.join(pl::PARALLEL_FILE)]
        .iter()
        .map(|p| input_file(p))
        .collect()
}

fn load_data(d: &DataArgs, c: &RunConfig) -> Result<(Vocab, Data)> {
    let vocab = Vocab::load(&d.vocab)?;
    let data = Data::load(&d.data, &vocab, c)?;
    Ok((vocab, data))
}

fn report(line: &str) {
    println!("{line}");
}

pub fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    if g.threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let c = resolve_config(g, std::env::vars())?;
    let out = g.out.as_path();
    let name = cli.command.name();
    let seed = stage_seed(g.seed, name);
    let mut inputs: Vec<PathBuf> = Vec::new();

    match &cli.command {
        Command::ConfigKeys => {
            print!("{}", RunConfig::documentation());
            return Ok(());
        }
        Command::SynthGen => {
            pl::synth_gen(&c, seed, out)?;
            report(&format!("wrote synthetic pair to {}", out.display()));
        }
        Command::TokenizerTrain { input } => {
            inputs = input.iter().map(|p| input_file(p)).collect::<Result<_>>()?;
            let v = pl::tokenizer_train(&c, &inputs, &out.join("vocab.tsv"))?;
            report(&format!("vocabulary of {} tokens", v.len()));
        }
        Command::DonorTrain { vocab, src } => {
            inputs = vec![input_file(vocab)?, input_file(src)?];
            let v = Vocab::load(vocab)?;
            let corpus = load_mono(src, &v, c.usize("model.t_max")?)?;
            pl::donor_train(&c, seed, &v, &corpus, &out.join("donor.ckpt"))?;
        }
        Command::SkipgramTrain { vocab, input } => {
            inputs = vec![input_file(vocab)?, input_file(input)?];
            let v = Vocab::load(vocab)?;
            let corpus = load_mono(input, &v, c.usize("model.t_max")?)?;
            pl::skipgram_train(&c, seed, &v, &corpus, &out.join("skipgram.vec"))?;
        }
        Command::EmbedAlign {
            src_emb,
            tgt_emb,
            dict,
            gold,
            donor,
            vocab,
            src,
        } => {
            inputs.push(input_file(tgt_emb)?);
            let v = EmbeddingSpace::load(tgt_emb)?;
            if let (Some(donor), Some(vocab), Some(src)) = (donor, vocab, src) {
                inputs.extend([input_file(donor)?, input_file(vocab)?, input_file(src)?]);
                let voc = Vocab::load(vocab)?;
                let corpus = load_mono(src, &voc, c.usize("model.t_max")?)?;
                let d = TransformerStack::load(donor)?;
                pl::embed_init(&c, seed, &d, &corpus, &v, &out.join("init.ckpt"))?;
            } else {
                let src_emb = src_emb
                    .as_ref()
                    .ok_or_else(|| Error::Config("embed-align needs --src-emb or --donor".into()))?;
                inputs.push(input_file(src_emb)?);
                let u = EmbeddingSpace::load(src_emb)?;
                let adv = AdvConfig::from_run(&c, seed)?;
                let k = adv.csls_k.min(u.len().min(v.len()) - 1).max(1);
                let map = match dict {
                    Some(p) => {
                        inputs.push(input_file(p)?);
                        let pairs = parse_dictionary(&read_utf8(p)?, &v.tokens, &u.tokens, p)?;
                        procrustes(&u.matrix, &v.matrix, &pairs)?
                    }
                    None => {
                        let res = adversarial_align(&u.matrix, &v.matrix, &adv)?;
                        for e in &res.log {
                            report(&format!(
                                "epoch {} dis_acc {:.3} criterion {:.4} orth {:.2e}",
                                e.epoch, e.dis_accuracy, e.criterion, e.orthogonality
                            ));
                        }
                        procrustes_refine(&res.map, &u.matrix, &v.matrix, None, adv.refine_rounds, k)?
                    }
                };
                report(&format!("criterion {:.4}", unsupervised_criterion(&map.apply(&v.matrix)?, &u.matrix, k)?));
                if let Some(p) = gold {
                    let pairs = parse_dictionary(&read_utf8(p)?, &v.tokens, &u.tokens, p)?;
                    report(&format!("accuracy {:.4}", translation_accuracy(&map, &u.matrix, &v.matrix, &pairs, k)?));
                }
                map.save(&out.join("map.ckpt"))?;
                map.apply_space(&v)?.save(&out.join("mapped.vec"))?;
            }
        }
        Command::AlignerTrain { data } => {
            inputs = data_inputs(data)?;
            let (_, d) = load_data(data, &c)?;
            let slices: Vec<(&[u32], &[u32])> = d.pairs.iter().map(|(a, b)| (&a[..], &b[..])).collect();
            let iters = c.usize("aligner.iterations")?;
            let fwd = crate::wordalign::train_ibm1(&slices, iters)?;
            let flipped: Vec<(&[u32], &[u32])> = slices.iter().map(|&(x, y)| (y, x)).collect();
            let rev = crate::wordalign::train_ibm1(&flipped, iters)?;
            write_atomic(&out.join("ibm1.fwd.tsv"), fwd.to_tsv().as_bytes())?;
            write_atomic(&out.join("ibm1.rev.tsv"), rev.to_tsv().as_bytes())?;
        }
        Command::Align { data, fwd, rev } => {
            inputs = data_inputs(data)?;
            inputs.extend([input_file(fwd)?, input_file(rev)?]);
            let (_, d) = load_data(data, &c)?;
            let f = TranslationTable::from_tsv(&read_utf8(fwd)?, fwd)?;
            let r = TranslationTable::from_tsv(&read_utf8(rev)?, rev)?;
            let mode: Symmetrize = c.parse("aligner.mode")?;
            let xy = d.pairs.iter().map(|(x, y)| align_pair(x, y, &f, &r, mode)).collect::<Result<Vec<_>>>()?;
            let yx = d.pairs.iter().map(|(x, y)| align_pair(y, x, &r, &f, mode)).collect::<Result<Vec<_>>>()?;
            write_pharaoh_file(&out.join("align.xy"), &xy)?;
            write_pharaoh_file(&out.join("align.yx"), &yx)?;
        }
        Command::Phase1 { data, donor, init } => {
            inputs = data_inputs(data)?;
            inputs.extend([input_file(donor)?, input_file(init)?]);
            let (_, d) = load_data(data, &c)?;
            pl::phase1(&c, seed, &TransformerStack::load(donor)?, &pl::load_init(init)?, &d, &out.join("phase1.ckpt"))?;
        }
        Command::Phase2 { data, align, model } => {
            inputs = data_inputs(data)?;
            inputs.extend([input_file(&align.align_xy)?, input_file(&align.align_yx)?, input_file(model)?]);
            let (_, d) = load_data(data, &c)?;
            let (xy, yx) = pl::read_alignments(&d.pairs, &align.align_xy, &align.align_yx)?;
            pl::phase2(&c, seed, &TransformerStack::load(model)?, &d, (&xy, &yx), out)?;
        }
        Command::Combine { a, b } => {
            inputs = vec![input_file(a)?, input_file(b)?];
            pl::combine(a, b, &out.join("combined.ckpt"))?;
        }
        Command::Phase3 { data, model } => {
            inputs = data_inputs(data)?;
            inputs.push(input_file(model)?);
            let (_, d) = load_data(data, &c)?;
            let (_, warning) = pl::phase3(&c, seed, &TransformerStack::load(model)?, &d, &out.join("final.ckpt"))?;
            if let Some(w) = warning {
                eprintln!("warning: {w}");
            }
        }
        Command::EvalBpw { model, vocab, input, lang } => {
            inputs = vec![input_file(model)?, input_file(vocab)?, input_file(input)?];
            let v = Vocab::load(vocab)?;
            let stack = TransformerStack::load(model)?;
            let corpus = load_mono(input, &v, stack.cfg.t_max)?;
            let sents: Vec<Vec<u32>> = corpus.sentences.into_iter().take(c.usize("eval.max_sentences")?).collect();
            let l = if lang == "src" { SRC_LANG } else { TGT_LANG };
            let r = evalkit::bpw(&stack, &sents, l, c.parse("eval.mask_seed")?, evalkit::EVAL_BATCH)?;
            let rep = evalkit::EvalReport {
                metric: "bpw".into(),
                value: r.bpw,
                corpus: input.display().to_string(),
                fingerprint: c.fingerprint(),
                seeds: vec![g.seed],
            };
            report(&format!("bpw {:.4} over {} masked tokens", r.bpw, r.masked));
            write_atomic(&out.join("bpw.txt"), rep.to_text().as_bytes())?;
        }
        Command::EvalBleu { hyp, reference, unit, max_n } => {
            inputs = vec![input_file(hyp)?, input_file(reference)?];
            let unit: BleuUnit = unit.parse()?;
            let h: Vec<Vec<String>> = read_utf8(hyp)?.lines().map(|l| units(l, unit)).collect();
            let r: Vec<Vec<String>> = read_utf8(reference)?.lines().map(|l| units(l, unit)).collect();
            let scores = bleu(&h, &r, *max_n)?;
            let line = format_bleu(&scores);
            report(&line);
            write_atomic(&out.join("bleu.txt"), format!("{line}\n").as_bytes())?;
        }
        Command::Generate { model, vocab, input } => {
            inputs = vec![input_file(model)?, input_file(vocab)?, input_file(input)?];
            let v = Vocab::load(vocab)?;
            let stack = TransformerStack::load(model)?;
            let ids: Vec<Vec<u32>> = read_utf8(input)?.lines().map(|l| v.encode(l)).collect();
            let srcs: Vec<&[u32]> = ids.iter().map(|x| &x[..]).collect();
            let mut text = pl::generate_text(&stack, &v, &srcs)?.join("\n");
            text.push('\n');
            write_atomic(&out.join("generate.txt"), text.as_bytes())?;
        }
        Command::AblateInit4 {
            data,
            donor,
            skipgram,
            checkpoints,
        } => {
            inputs = data_inputs(data)?;
            inputs.extend([input_file(donor)?, input_file(skipgram)?]);
            let (_, d) = load_data(data, &c)?;
            let donor = TransformerStack::load(donor)?;
            let v = EmbeddingSpace::load(skipgram)?;
            let eval = d.eval_sentences(c.usize("eval.max_sentences")?);
            let rows = ablate_init4(
                &Init4Inputs {
                    donor: &donor,
                    src: &d.src,
                    tgt: &d.tgt,
                    skipgram: &v.matrix,
                    adv: AdvConfig::from_run(&c, seed)?,
                    phase1: PhaseConfig::from_run(&c, Phase::Commonality, "phase1", seed)?,
                    checkpoints: checkpoints.clone(),
                    eval: &eval,
                    mask_seed: c.parse("eval.mask_seed")?,
                },
                seed,
            )?;
            write_atomic(&out.join("init4.csv"), sweep_csv(&rows).as_bytes())?;
            print!("{}", sweep_csv(&rows));
        }
        Command::AblateParallel { data, align, model, sizes } => {
            inputs = data_inputs(data)?;
            inputs.extend([input_file(&align.align_xy)?, input_file(&align.align_yx)?, input_file(model)?]);
            let (_, d) = load_data(data, &c)?;
            let (xy, yx) = pl::read_alignments(&d.pairs, &align.align_xy, &align.align_yx)?;
            let td = TransferData::new(&d.pairs, &xy, &yx)?;
            let ct = TransformerStack::load(model)?;
            let opts = pl::transfer_options(&c)?;
            let eval = d.eval_sentences(c.usize("eval.max_sentences")?);
            let mono = if opts.mlm_lang == TGT_LANG { &d.tgt } else { &d.src };
            let rows = ablate_parallel(
                &ParallelInputs {
                    ct: &ct,
                    data: &td,
                    mono,
                    phase2: PhaseConfig::from_run(&c, Phase::Transfer, "phase2", seed)?,
                    opts,
                    sizes: sizes.clone(),
                    eval: &eval,
                    mask_seed: c.parse("eval.mask_seed")?,
                },
                seed,
            )?;
            write_atomic(&out.join("parallel.csv"), sweep_csv(&rows).as_bytes())?;
            print!("{}", sweep_csv(&rows));
        }
        Command::GradCheck => {
            let results = gradient_suite(g.seed)?;
            let mut failed = 0;
            for (n, r) in &results {
                report(&format!("{} {n} max_rel_err={:.3e}", if r.passed { "ok  " } else { "FAIL" }, r.max_rel_err));
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(Error::Invalid(format!("{failed} gradient checks failed")));
            }
        }
        Command::DiagnoseEmbed { emb, probe, bins } => {
            inputs = vec![input_file(emb)?];
            let space = EmbeddingSpace::load(emb)?;
            let id = space
                .tokens
                .iter()
                .position(|t| t == probe)
                .ok_or_else(|| Error::Invalid(format!("probe token `{probe}` not in {}", emb.display())))?;
            let d = space_diagnostics(&space, id, *bins)?;
            write_atomic(&out.join("diagnose.csv"), d.to_csv(&space).as_bytes())?;
        }
        Command::Pipeline => {
            let r = pl::run_pipeline(&c, g.seed, out)?;
            for s in &r.executed {
                report(&format!("ran    {s}"));
            }
            for s in &r.skipped {
                report(&format!("cached {s}"));
            }
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            report(&format!("final checkpoint {}", r.final_checkpoint.display()));
            return Ok(());
        }
    }
    pl::write_run_metadata(out, name, &c, g.seed, &inputs)
}
