//! The `vtt` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{eval_task_set, load_tasks, Norm, UnigramBackend};
use crate::overlap::overlap_report;
use crate::segment::{corpus_stats, segment, SegmentMode, TokenSeq};
use crate::tensorio::{read_checkpoint, write_checkpoint};
use crate::transplant::{
    count_params, display_millions, transplant_checkpoint, ExpandInit, MeanMode, Strategy,
    SwapOptions, TransplantOptions,
};
use crate::vocab::{load_vocab, save_vocab, train_unigram, TrainerConfig, Vocabulary};

#[derive(Parser, Debug)]
#[command(
    name = "vtt",
    version,
    about = "Subword vocabulary construction, tokenization statistics, and embedding transplant"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "VTT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a unigram vocabulary on a text corpus.
    TrainVocab(TrainVocabArgs),
    /// Segment text into pieces.
    Tokenize(TokenizeArgs),
    /// Corpus token statistics for one or more vocabularies.
    Stats(StatsArgs),
    /// Shared pieces between two vocabularies, by class.
    Overlap(OverlapArgs),
    /// Rebuild a checkpoint's vocabulary-dependent matrices.
    Transplant(TransplantArgs),
    /// Parameter accounting for a GPT-style decoder.
    Params(ParamsArgs),
    /// Multiple-choice evaluation with the unigram backend.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct TrainVocabArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    target_size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    max_piece_len: usize,
    /// Candidate pool size (default 20x target). Fix this across runs to get
    /// nested vocabularies.
    #[arg(long)]
    seed_size: Option<usize>,
    #[arg(long, default_value_t = 1)]
    min_freq: u64,
    #[arg(long, default_value_t = 2)]
    em_iters: usize,
    #[arg(long, default_value_t = 0.8)]
    shrink: f64,
    #[arg(long)]
    no_byte_fallback: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Viterbi,
    MinToken,
}

impl From<ModeArg> for SegmentMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Viterbi => SegmentMode::Viterbi,
            ModeArg::MinToken => SegmentMode::MinToken,
        }
    }
}

#[derive(Args, Debug)]
struct TokenizeArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Text to segment; reads lines from --in when omitted.
    #[arg(long)]
    text: Option<String>,
    #[arg(long = "in", required_unless_present = "text")]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Viterbi)]
    mode: ModeArg,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// May be given multiple times; one output row per vocabulary.
    #[arg(long, required = true)]
    vocab: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Viterbi)]
    mode: ModeArg,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct OverlapArgs {
    #[arg(long)]
    orig_vocab: PathBuf,
    #[arg(long)]
    new_vocab: PathBuf,
    #[arg(long)]
    json: bool,
    /// Include the shared (id_orig, id_new) pairs in JSON output.
    #[arg(long)]
    shared: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Swap,
    SwapInsert,
    Mean,
    Expand,
    Factorized,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MeanModeArg {
    Decompose,
    Global,
}

#[derive(Args, Debug)]
struct TransplantArgs {
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    /// Random seed; required so reruns are reproducible.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    orig_vocab: PathBuf,
    #[arg(long)]
    new_vocab: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Where to write the expanded vocabulary (strategy expand).
    #[arg(long)]
    out_vocab: Option<PathBuf>,
    /// Embedding width for the factorized strategy.
    #[arg(long, required_if_eq("strategy", "factorized"))]
    d_e: Option<usize>,
    #[arg(long, value_enum, default_value_t = MeanModeArg::Decompose)]
    mean_mode: MeanModeArg,
    /// Initializer for appended rows under the expand strategy.
    #[arg(long, value_enum, default_value_t = ExpandInitArg::SwapInsert)]
    expand_init: ExpandInitArg,
    /// Center the pre-trained matrix before projection.
    #[arg(long)]
    center: bool,
    /// Use one random stream for both matrices instead of seed / seed+1.
    #[arg(long)]
    shared_seed: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExpandInitArg {
    SwapInsert,
    Mean,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long)]
    layers: u64,
    #[arg(long)]
    dmodel: u64,
    /// Vocabulary size (a count, not a file).
    #[arg(long)]
    vocab: u64,
    #[arg(long)]
    d_e: Option<u64>,
    #[arg(long)]
    tied: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    PerToken,
    PerByte,
    None,
}

impl From<NormArg> for Norm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::PerToken => Norm::PerToken,
            NormArg::PerByte => Norm::PerByte,
            NormArg::None => Norm::None,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// JSON-lines task file: {"prompt", "candidates", "gold"} per line.
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, value_enum, default_value_t = NormArg::PerToken)]
    norm: NormArg,
    #[arg(long)]
    json: bool,
}

/// Parse and run. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };

    if let Some(threads) = cli.threads {
        // Ignore the error if a pool already exists (tests call this twice).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    if let Err(msg) = validate_flags(&cli.cmd) {
        eprintln!("error: {msg}");
        return 1;
    }

    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            2
        }
    }
}

/// Flag-combination checks that clap cannot express; run before any I/O so
/// misuse is a usage error, not a data error.
fn validate_flags(cmd: &Cmd) -> std::result::Result<(), String> {
    if let Cmd::Transplant(args) = cmd {
        if args.out_vocab.is_some() && !matches!(args.strategy, StrategyArg::Expand) {
            return Err("--out-vocab only applies to --strategy expand".into());
        }
        if args.d_e.is_some() && !matches!(args.strategy, StrategyArg::Factorized) {
            return Err("--d-e only applies to --strategy factorized".into());
        }
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::TrainVocab(args) => cmd_train_vocab(args),
        Cmd::Tokenize(args) => cmd_tokenize(args),
        Cmd::Stats(args) => cmd_stats(args),
        Cmd::Overlap(args) => cmd_overlap(args),
        Cmd::Transplant(args) => cmd_transplant(args),
        Cmd::Params(args) => cmd_params(args),
        Cmd::Eval(args) => cmd_eval(args),
    }
}

fn cmd_train_vocab(args: TrainVocabArgs) -> Result<()> {
    let corpus = std::fs::read(&args.corpus).map_err(|e| Error::from(e).at_path(&args.corpus))?;
    let cfg = TrainerConfig {
        max_piece_len: args.max_piece_len,
        seed_size: args.seed_size,
        min_freq: args.min_freq,
        em_iterations: args.em_iters,
        shrink_factor: args.shrink,
        byte_fallback: !args.no_byte_fallback,
        ..TrainerConfig::default()
    };
    let vocab = train_unigram(&corpus, args.target_size, &cfg)?;
    save_vocab(&vocab, &args.out)?;
    println!(
        "trained {} pieces (byte_fallback={}) -> {}",
        vocab.size(),
        vocab.byte_fallback() as u8,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TokenizeRow {
    ids: Vec<u32>,
    pieces: Vec<String>,
    score: f64,
}

fn cmd_tokenize(args: TokenizeArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let mode = args.mode.into();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();

    let mut emit = |line: &str| -> Result<()> {
        let seq = segment(&vocab, line, mode)?;
        write_tokens(&mut out, &vocab, &seq, args.json)
    };

    match (&args.text, &args.input) {
        (Some(text), _) => {
            for line in text.lines() {
                emit(line)?;
            }
            Ok(())
        }
        (None, Some(path)) => {
            let reader =
                BufReader::new(File::open(path).map_err(|e| Error::from(e).at_path(path))?);
            for (idx, line) in reader.lines().enumerate() {
                emit(&line?).map_err(|e| e.at_line(idx + 1))?;
            }
            Ok(())
        }
        (None, None) => unreachable!("clap enforces --text or --in"),
    }
}

fn write_tokens(
    out: &mut impl Write,
    vocab: &Vocabulary,
    seq: &TokenSeq,
    json: bool,
) -> Result<()> {
    let pieces: Vec<String> = seq
        .ids
        .iter()
        .map(|&id| vocab.piece(id).text.clone())
        .collect();
    if json {
        let row = TokenizeRow {
            ids: seq.ids.clone(),
            pieces,
            score: seq.score,
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&row).expect("serializable")
        )?;
    } else {
        writeln!(out, "{}", pieces.join(" "))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct StatsRow {
    vocab: String,
    size: usize,
    total_tokens: u64,
    total_bytes: u64,
    fertility: f64,
    bytes_per_token: f64,
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let mode: SegmentMode = args.mode.into();
    let mut rows = Vec::new();
    for vocab_path in &args.vocab {
        let vocab = load_vocab(vocab_path)?;
        let reader = BufReader::new(
            File::open(&args.corpus).map_err(|e| Error::from(e).at_path(&args.corpus))?,
        );
        let stats = corpus_stats(&vocab, reader, mode).map_err(|e| e.at_path(vocab_path))?;
        rows.push(StatsRow {
            vocab: vocab_path.display().to_string(),
            size: vocab.size(),
            total_tokens: stats.total_tokens,
            total_bytes: stats.total_bytes,
            fertility: stats.fertility(),
            bytes_per_token: stats.bytes_per_token(),
        });
    }
    if args.json {
        for row in &rows {
            println!("{}", serde_json::to_string(row).expect("serializable"));
        }
    } else {
        println!(
            "{:<32} {:>8} {:>12} {:>12} {:>10} {:>10}",
            "vocab", "size", "tokens", "bytes", "fertility", "bytes/tok"
        );
        for row in &rows {
            println!(
                "{:<32} {:>8} {:>12} {:>12} {:>10.4} {:>10.4}",
                row.vocab,
                row.size,
                row.total_tokens,
                row.total_bytes,
                row.fertility,
                row.bytes_per_token
            );
        }
    }
    Ok(())
}

fn cmd_overlap(args: OverlapArgs) -> Result<()> {
    let orig = load_vocab(&args.orig_vocab)?;
    let new = load_vocab(&args.new_vocab)?;
    let report = overlap_report(&orig, &new);

    if args.json {
        #[derive(Serialize)]
        struct JsonReport<'a> {
            counts: &'a crate::overlap::ClassCounts,
            total: usize,
            #[serde(skip_serializing_if = "Option::is_none")]
            shared: Option<&'a [(u32, u32)]>,
        }
        let doc = JsonReport {
            counts: &report.counts,
            total: report.total,
            shared: args.shared.then_some(report.shared.as_slice()),
        };
        println!("{}", serde_json::to_string(&doc).expect("serializable"));
    } else {
        println!("{:<24} {:>8}", "type", "count");
        println!("{:<24} {:>8}", "byte fallback", report.counts.byte_fallback);
        println!("{:<24} {:>8}", "alphabet & number", report.counts.alpha_num);
        println!("{:<24} {:>8}", "symbol", report.counts.symbol);
        println!("{:<24} {:>8}", "other", report.counts.other);
        println!("{:<24} {:>8}", "total", report.total);
    }
    Ok(())
}

fn cmd_transplant(args: TransplantArgs) -> Result<()> {
    let v_orig = load_vocab(&args.orig_vocab)?;
    let v_new = load_vocab(&args.new_vocab)?;
    let ckpt = read_checkpoint(&args.input)?;

    let strategy = match args.strategy {
        StrategyArg::Swap => Strategy::Swap,
        StrategyArg::SwapInsert => Strategy::SwapInsert,
        StrategyArg::Mean => Strategy::MeanInit,
        StrategyArg::Expand => Strategy::Expand,
        StrategyArg::Factorized => Strategy::FactorizedExpand,
    };
    let opts = TransplantOptions {
        mean_mode: match args.mean_mode {
            MeanModeArg::Decompose => MeanMode::Decompose,
            MeanModeArg::Global => MeanMode::Global,
        },
        swap: SwapOptions {
            center: args.center,
        },
        shared_seed: args.shared_seed,
        d_e: args.d_e,
        expand_init: match args.expand_init {
            ExpandInitArg::SwapInsert => ExpandInit::SwapInsert,
            ExpandInitArg::Mean => ExpandInit::Mean,
        },
    };

    let outcome = transplant_checkpoint(&ckpt, &v_orig, &v_new, strategy, args.seed, opts)?;
    write_checkpoint(&outcome.checkpoint, &args.out)?;

    if let Some(vocab) = &outcome.expanded_vocab {
        if let Some(path) = &args.out_vocab {
            save_vocab(vocab, path)?;
        }
    }
    if let Some(path) = &args.report {
        #[derive(Serialize)]
        struct ReportDoc<'a> {
            #[serde(flatten)]
            report: &'a crate::transplant::TransplantReport,
            new_vocab_hash: String,
        }
        let doc = ReportDoc {
            report: &outcome.report,
            new_vocab_hash: format!("{:08x}", crate::tensorio::vocab_hash(&v_new)),
        };
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &doc).map_err(|e| Error::Config(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    println!(
        "{:?}: inserted={} randomized={} -> {}",
        outcome.report.strategy,
        outcome.report.inserted,
        outcome.report.randomized,
        args.out.display()
    );
    Ok(())
}

fn cmd_params(args: ParamsArgs) -> Result<()> {
    let breakdown = count_params(args.layers, args.dmodel, args.vocab, args.d_e, args.tied);
    if args.json {
        println!(
            "{}",
            serde_json::to_string(&breakdown).expect("serializable")
        );
    } else {
        println!(
            "internal={} ({})",
            breakdown.internal,
            display_millions(breakdown.internal)
        );
        println!(
            "vocab={} ({})",
            breakdown.vocab,
            display_millions(breakdown.vocab)
        );
        println!(
            "total={} ({})",
            breakdown.total,
            display_millions(breakdown.total)
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab)?;
    let reader =
        BufReader::new(File::open(&args.tasks).map_err(|e| Error::from(e).at_path(&args.tasks))?);
    let tasks = load_tasks(reader)?;
    let backend = UnigramBackend::new(&vocab);
    let outcome = eval_task_set(&backend, &vocab, &tasks, args.norm.into())?;
    if args.json {
        #[derive(Serialize)]
        struct JsonOutcome<'a> {
            accuracy: f64,
            selections: &'a [usize],
        }
        let doc = JsonOutcome {
            accuracy: outcome.accuracy,
            selections: &outcome.selections,
        };
        println!("{}", serde_json::to_string(&doc).expect("serializable"));
    } else {
        for (i, (task, sel)) in tasks.iter().zip(&outcome.selections).enumerate() {
            let mark = if *sel == task.gold { "+" } else { "-" };
            println!("task {i:>4} {mark} selected={sel} gold={}", task.gold);
        }
        println!(
            "accuracy={:.4} over {} tasks",
            outcome.accuracy,
            tasks.len()
        );
    }
    Ok(())
}
