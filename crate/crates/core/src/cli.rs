//! Command-line dispatch.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 runtime
//! failure. Machine-readable artifacts go to `--out` through an atomic rename;
//! human-readable tables are returned as the outcome message.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::corpus::{load_candidate_table, load_entity_table, Document};
use crate::decoder::{write_predictions, DecodeConfig, PredictedMention};
use crate::encoder::HashedEncoder;
use crate::error::{Error, Result};
use crate::evaluator::{EvalReport, NilPolicy};
use crate::io_util;
use crate::tokenizer::{align_document, load_vocab};
use crate::trainer::{
    self, check_digests, evaluate_gold_mentions, load_or_build_index, load_split,
    predict_document, prepare_documents, Resources, RunConfig, RunReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutcome {
    pub code: i32,
    pub message: String,
    pub artifact: Option<PathBuf>,
}

impl CommandOutcome {
    fn ok(message: String, artifact: Option<PathBuf>) -> Self {
        CommandOutcome {
            code: EXIT_OK,
            message,
            artifact,
        }
    }

    fn from_error(err: &Error) -> Self {
        CommandOutcome {
            code: if err.is_data_error() { EXIT_DATA } else { EXIT_RUNTIME },
            message: format!("error: {}", err),
            artifact: None,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "linkforge", version, about = "Joint mention detection and entity disambiguation")]
struct Cli {
    /// Worker thread cap (default: available parallelism).
    #[arg(long, global = true, env = "LINKFORGE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse corpora and tables and report counts.
    Validate(ValidateArgs),
    /// Build the entity index and write its cache.
    Index(IndexArgs),
    /// Train the heads and write a metrics JSON report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Link documents and write a predictions TSV.
    Link(LinkArgs),
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Corpus file in the three-column format; repeatable.
    #[arg(long, required = true)]
    corpus: Vec<PathBuf>,
    /// Entity embedding table; also resolves gold entity names.
    #[arg(long)]
    entities: Option<PathBuf>,
    /// Also check tokenization and windowing against this vocabulary.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Candidate table checked against the entity table.
    #[arg(long, requires = "entities")]
    candidates: Option<PathBuf>,
    /// Match candidate surfaces case-insensitively.
    #[arg(long)]
    case_fold_candidates: bool,
}

#[derive(Debug, Args)]
struct IndexArgs {
    /// Entity embedding table.
    #[arg(long)]
    entities: PathBuf,
    /// Cache file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON (`.json`) or TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; repeat r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of independently seeded runs.
    #[arg(long)]
    repeats: Option<usize>,
    /// Optimizer steps per repeat.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the detection loss in [0, 1].
    #[arg(long)]
    lambda: Option<f64>,
    /// Documents per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Validation interval in steps (0 disables).
    #[arg(long)]
    eval_every: Option<u64>,
    /// Training corpus.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation corpus.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Test corpus.
    #[arg(long)]
    test: Option<PathBuf>,
    /// WordPiece vocabulary.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Entity embedding table.
    #[arg(long)]
    entities: Option<PathBuf>,
    /// Candidate table restricting the search at evaluation time.
    #[arg(long, conflicts_with = "no_candidates")]
    candidates: Option<PathBuf>,
    /// Search the full entity universe at evaluation time.
    #[arg(long)]
    no_candidates: bool,
    /// How predictions on NIL gold spans are scored.
    #[arg(long, value_enum)]
    nil_policy: Option<NilPolicy>,
    /// Directory for one checkpoint per repeat.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Metrics JSON output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Detect and link mentions end to end.
    El,
    /// Link gold mention spans; reports accuracy.
    Ed,
}

#[derive(Debug, Args)]
struct ResourceArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary (default: the path recorded in the checkpoint).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Entity table (default: the path recorded in the checkpoint).
    #[arg(long)]
    entities: Option<PathBuf>,
    /// Candidate table (default: the path recorded in the checkpoint).
    #[arg(long, conflicts_with = "no_candidates")]
    candidates: Option<PathBuf>,
    /// Search the full entity universe.
    #[arg(long)]
    no_candidates: bool,
    /// Match candidate surfaces case-insensitively.
    #[arg(long)]
    case_fold_candidates: bool,
    /// Reuse or create an entity index cache at this path.
    #[arg(long)]
    index_cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    res: ResourceArgs,
    /// Corpus split to score.
    #[arg(long)]
    split: PathBuf,
    /// End-to-end linking or disambiguation of gold spans.
    #[arg(long, value_enum, default_value = "el")]
    mode: ModeArg,
    /// How predictions on NIL gold spans are scored.
    #[arg(long, value_enum, default_value = "strict")]
    nil_policy: NilPolicy,
    /// Report JSON output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LinkArgs {
    #[command(flatten)]
    res: ResourceArgs,
    /// Pre-tokenized document(s) in the corpus format; tags may be all `O`.
    #[arg(long)]
    doc: PathBuf,
    /// Predictions TSV output (default: returned on standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn dispatch<I, T>(argv: I) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            return CommandOutcome {
                code,
                message: e.render().to_string(),
                artifact: None,
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return CommandOutcome {
                code: EXIT_USAGE,
                message: "error: --threads must be at least 1".into(),
                artifact: None,
            };
        }
        // the global pool can only be built once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Validate(a) => run_validate(a),
        Command::Index(a) => run_index(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Link(a) => run_link(a),
    };
    result.unwrap_or_else(|e| CommandOutcome::from_error(&e))
}

fn write_artifact(path: &Path, bytes: &[u8]) -> Result<()> {
    io_util::write_atomic(path, |w| Ok(w.write_all(bytes)?))
}

fn run_validate(a: ValidateArgs) -> Result<CommandOutcome> {
    let table = a
        .entities
        .as_deref()
        .map(|p| load_entity_table(io_util::open(p)?))
        .transpose()?;
    let vocab = a.vocab.as_deref().map(|p| load_vocab(io_util::open(p)?)).transpose()?;
    let mut msg = String::new();
    if let Some(t) = &table {
        writeln!(msg, "entities: {} (d = {})", t.k(), t.d()).ok();
    }
    if let Some(v) = &vocab {
        writeln!(msg, "vocabulary: {} pieces", v.len()).ok();
    }
    if let (Some(path), Some(t)) = (&a.candidates, &table) {
        let (cands, stats) = load_candidate_table(io_util::open(path)?, t.names(), a.case_fold_candidates)?;
        writeln!(
            msg,
            "candidates: {} surfaces, {} unresolved names, {} dropped lines",
            cands.len(),
            stats.unresolved_names,
            stats.dropped_lines
        )
        .ok();
    }
    for path in &a.corpus {
        let docs = load_split(path)?;
        let words: usize = docs.iter().map(Document::len).sum();
        let mentions: Vec<_> = docs.iter().flat_map(|d| d.mentions()).collect();
        write!(
            msg,
            "{}: {} documents, {} words, {} mentions",
            path.display(),
            docs.len(),
            words,
            mentions.len()
        )
        .ok();
        if let Some(t) = &table {
            let linkable = mentions
                .iter()
                .filter(|m| m.entity.as_ref().and_then(|e| t.names().resolve(e)).is_some())
                .count();
            write!(msg, ", {} linkable", linkable).ok();
        }
        if let Some(v) = &vocab {
            let mut windows = 0;
            let mut pieces = 0;
            for d in &docs {
                let ws = align_document(d, v, &Default::default())?;
                windows += ws.len();
                pieces += ws.iter().map(|w| w.seq.real_len()).sum::<usize>();
            }
            write!(msg, ", {} pieces in {} windows", pieces, windows).ok();
        }
        msg.push('\n');
    }
    Ok(CommandOutcome::ok(msg.trim_end().to_string(), None))
}

fn run_index(a: IndexArgs) -> Result<CommandOutcome> {
    let table = load_entity_table(io_util::open(&a.entities)?)?;
    let (k, d) = (table.k(), table.d());
    let (_, hit) = load_or_build_index(table, &a.out)?;
    let state = if hit { "up to date" } else { "written" };
    Ok(CommandOutcome::ok(
        format!("index over {} entities (d = {}) {}: {}", k, d, state, a.out.display()),
        Some(a.out),
    ))
}

fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident = $value:expr),* $(,)?) => {
            $(if let Some(v) = $value.clone() { cfg.$field = v; })*
        };
    }
    set!(
        seed = a.seed,
        repeats = a.repeats,
        max_steps = a.max_steps,
        lr = a.lr,
        lambda = a.lambda,
        batch_size = a.batch_size,
        eval_every = a.eval_every,
        nil_policy = a.nil_policy,
    );
    set!(
        train_path = a.train.clone().map(Some),
        validation_path = a.validation.clone().map(Some),
        test_path = a.test.clone().map(Some),
        vocab_path = a.vocab.clone().map(Some),
        entities_path = a.entities.clone().map(Some),
        candidates_path = a.candidates.clone().map(Some),
        checkpoint_dir = a.checkpoint_dir.clone().map(Some),
    );
    if a.no_candidates {
        cfg.use_candidates = false;
        cfg.candidates_path = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summarize(report: &RunReport) -> String {
    let mut out = format!("selection {} | search {}\n", report.selection, report.search);
    writeln!(out, "{:<12}{:>8}{:>10}{:>10}", "split", "repeat", "micro F1", "macro F1").ok();
    for (split, s) in &report.summary {
        for (r, (mi, ma)) in s.micro_f1.iter().zip(&s.macro_f1).enumerate() {
            writeln!(out, "{:<12}{:>8}{:>10.4}{:>10.4}", split, r, mi, ma).ok();
        }
        let std = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.4}", x));
        writeln!(
            out,
            "{:<12}{:>8}{:>10.4}{:>10.4}\n{:<12}{:>8}{:>10}{:>10}",
            split,
            "mean",
            s.micro_f1_mean,
            s.macro_f1_mean,
            split,
            "std",
            std(s.micro_f1_std),
            std(s.macro_f1_std)
        )
        .ok();
    }
    out.trim_end().to_string()
}

fn run_train(a: TrainArgs) -> Result<CommandOutcome> {
    let cfg = train_config(&a)?;
    let (report, _) = trainer::train(&cfg)?;
    if let Some(out) = &a.out {
        let mut json = serde_json::to_vec_pretty(&report)?;
        json.push(b'\n');
        write_artifact(out, &json)?;
    }
    Ok(CommandOutcome::ok(summarize(&report), a.out))
}

struct Loaded {
    checkpoint: Checkpoint,
    resources: Resources,
}

fn load_for_inference(r: &ResourceArgs) -> Result<Loaded> {
    let checkpoint = Checkpoint::load(&r.checkpoint)?;
    let pick = |flag: &Option<PathBuf>, recorded: &Option<PathBuf>, what: &str| -> Result<PathBuf> {
        flag.clone()
            .or_else(|| recorded.clone())
            .ok_or_else(|| Error::Config(format!("no {} path given or recorded in the checkpoint", what)))
    };
    let vocab = pick(&r.vocab, &checkpoint.meta.vocab_path, "vocabulary")?;
    let entities = pick(&r.entities, &checkpoint.meta.entities_path, "entity table")?;
    let candidates = if r.no_candidates {
        None
    } else {
        r.candidates.clone().or_else(|| checkpoint.meta.candidates_path.clone())
    };
    let resources = Resources::load_cached(
        &vocab,
        &entities,
        candidates.as_deref(),
        r.case_fold_candidates,
        r.index_cache.as_deref(),
    )?;
    check_digests(&checkpoint, &resources)?;
    Ok(Loaded {
        checkpoint,
        resources,
    })
}

fn run_eval(a: EvalArgs) -> Result<CommandOutcome> {
    let Loaded {
        checkpoint,
        resources,
    } = load_for_inference(&a.res)?;
    let docs = load_split(&a.split)?;
    let report: EvalReport = match a.mode {
        ModeArg::El => trainer::evaluate(
            &checkpoint,
            &docs,
            &resources,
            resources.candidates.is_some(),
            &DecodeConfig::default(),
            a.nil_policy,
        )?,
        ModeArg::Ed => {
            let encoder = HashedEncoder::new(checkpoint.meta.encoder)?;
            let prepared =
                prepare_documents(&docs, &resources.vocab, &encoder, &resources.index, &checkpoint.meta.align)?;
            evaluate_gold_mentions(
                &prepared,
                &checkpoint.params,
                &resources.index,
                resources.candidates.as_ref(),
                a.nil_policy,
            )?
        }
    };
    if let Some(out) = &a.out {
        let mut json = serde_json::to_vec_pretty(&report)?;
        json.push(b'\n');
        write_artifact(out, &json)?;
    }
    Ok(CommandOutcome::ok(report.to_string(), a.out))
}

fn run_link(a: LinkArgs) -> Result<CommandOutcome> {
    let Loaded {
        checkpoint,
        resources,
    } = load_for_inference(&a.res)?;
    let docs = load_split(&a.doc)?;
    let encoder = HashedEncoder::new(checkpoint.meta.encoder)?;
    let prepared = prepare_documents(&docs, &resources.vocab, &encoder, &resources.index, &checkpoint.meta.align)?;
    let mut preds: Vec<PredictedMention> = Vec::new();
    for p in &prepared {
        preds.extend(predict_document(
            p,
            &checkpoint.params,
            &resources.index,
            resources.candidates.as_ref(),
            &DecodeConfig::default(),
        )?);
    }
    let mut tsv = Vec::new();
    write_predictions(&preds, resources.index.names(), &mut tsv)?;
    match &a.out {
        Some(out) => {
            write_artifact(out, &tsv)?;
            Ok(CommandOutcome::ok(
                format!("{} mentions linked in {} documents", preds.len(), docs.len()),
                a.out,
            ))
        }
        None => Ok(CommandOutcome::ok(
            String::from_utf8(tsv).expect("predictions are UTF-8").trim_end().to_string(),
            None,
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        let out = dispatch(["linkforge", "frobnicate"]);
        assert_eq!(out.code, EXIT_USAGE);
        let out = dispatch(["linkforge", "validate", "--bogus"]);
        assert_eq!(out.code, EXIT_USAGE);
        assert!(out.message.contains("Usage"));
    }

    #[test]
    fn help_exits_zero_and_lists_flags() {
        let out = dispatch(["linkforge", "train", "--help"]);
        assert_eq!(out.code, EXIT_OK);
        for flag in ["--seed", "--config", "--candidates", "--no-candidates", "--nil-policy", "--out", "--threads"] {
            assert!(out.message.contains(flag), "{} missing", flag);
        }
        let out = dispatch(["linkforge", "eval", "--help"]);
        for flag in ["--checkpoint", "--split", "--mode", "--index-cache", "--no-candidates", "--nil-policy", "--out"] {
            assert!(out.message.contains(flag), "{} missing", flag);
        }
    }

    #[test]
    fn missing_file_is_a_runtime_error() {
        let out = dispatch(["linkforge", "validate", "--corpus", "/nonexistent/x.tsv"]);
        assert_eq!(out.code, EXIT_RUNTIME);
    }

    #[test]
    fn malformed_corpus_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "word\tB\n").unwrap();
        let out = dispatch(["linkforge".as_ref(), "validate".as_ref(), "--corpus".as_ref(), path.as_os_str()]);
        assert_eq!(out.code, EXIT_DATA);
    }
}
