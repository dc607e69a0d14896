//! Command-line pipeline driver.
//!
//! Six subcommands wire the stages end to end: `stats`, `prepare-sft`,
//! `generate`, `build-pairs`, `train` and `eval`. Every command loads one
//! [`PipelineConfig`] (built-in defaults, then `--config`, then flags), runs
//! a single stage, and writes its artifacts with provenance sidecars carrying
//! the seed and the effective-config hash.
//!
//! Exit-code contract: 0 success, 1 numeric failure (diverged training), 2
//! input or IO failure. Reruns with identical inputs and seed produce
//! byte-identical artifacts.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{write_meta, ArtifactMeta, PipelineConfig, ScalarKind};
use crate::corpus::{split_stats, Corpus, LabeledExample, Split};
use crate::eval::{
    confusion, diff_reports, evaluate_backend, load_report, metrics, write_audit, write_report,
    AuditRow, EvalOptions, Evaluation, MalformedPolicy, MetricsReport,
};
use crate::gen::{
    dual_prompt_sample, load_generation_dump, sample_completions, write_generation_dump,
    CompletionSet, PolicyBackend, ToyLm, Vocab,
};
use crate::optim::{train_dpo, train_sft, Checkpoint, OptimError, SftExample};
use crate::pairs::{
    build_candidate_pairs, filter_length_ratio, filter_one_per_input, load_pairs, pair_stats,
    write_pairs, Outcome, PairStats,
};
use crate::scalar::Scalar;
use crate::schema::{
    extract_label, render_prompt, render_target_record, ClaimType, Label, ManifestationSet,
    PromptRenderer, PromptVariant, ReasoningRecord, TargetKind, TargetRef,
};

/// Two-stage polarization-detection pipeline over a built-in toy model.
#[derive(Debug, Parser)]
#[command(name = "polarkit", version, about)]
pub struct Cli {
    /// TOML config file; command-line flags override file values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Global seed, recorded in every artifact's metadata.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Machine-readable JSON on stdout where the command supports it.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print per-split label statistics for a corpus.
    Stats {
        /// Corpus path; defaults to `paths.corpus`.
        corpus: Option<PathBuf>,
    },
    /// Write the supervised fine-tuning dataset as (prompt, target) JSONL.
    PrepareSft {
        /// Corpus path; defaults to `paths.corpus`.
        corpus: Option<PathBuf>,
        /// Output path; defaults to `paths.sft_dataset`.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Corpus split to prepare.
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Sample completions for a corpus split into a generation dump.
    Generate {
        /// Corpus path; defaults to `paths.corpus`.
        corpus: Option<PathBuf>,
        /// Model checkpoint; a fresh seeded model when absent.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Corpus split to sample.
        #[arg(long, default_value = "train")]
        split: Split,
        /// Output path; defaults to `paths.dump`.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Build preference pairs from a generation dump, printing the cascade.
    BuildPairs {
        /// Generation dump; defaults to `paths.dump`.
        #[arg(long, value_name = "FILE")]
        dump: Option<PathBuf>,
        /// Corpus path; defaults to `paths.corpus`.
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
        /// Output path; defaults to `paths.pairs`.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Length-ratio cutoff override (strict upper bound).
        #[arg(long, value_name = "RATIO")]
        max_ratio: Option<f64>,
        /// Keep one pair per input (true/false) override.
        #[arg(long, value_name = "BOOL")]
        one_per_input: Option<bool>,
        /// Skip the length-ratio filter and print a two-stage cascade.
        #[arg(long)]
        no_ratio_filter: bool,
    },
    /// Train one stage, writing a checkpoint and a loss trace.
    Train {
        #[command(subcommand)]
        stage: TrainStage,
    },
    /// Evaluate a checkpoint or dump on a split, or compare two reports.
    Eval {
        /// Corpus split to score.
        split: Option<Split>,
        /// Model checkpoint to score with greedy decoding.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Generation dump with exactly one completion per example.
        #[arg(long, value_name = "FILE")]
        dump: Option<PathBuf>,
        /// Corpus path; defaults to `paths.corpus`.
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
        /// Report path; defaults to `paths.reports/report-<split>.json`.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Scoring policy for unparseable completions.
        #[arg(long, value_name = "POLICY")]
        malformed_policy: Option<MalformedPolicy>,
        /// Compare two report files and print metric deltas instead.
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        compare: Option<Vec<PathBuf>>,
    },
}

#[derive(Debug, Subcommand)]
pub enum TrainStage {
    /// Supervised fine-tuning on label-only records from the corpus, or on a
    /// prepared dataset file.
    Sft {
        /// Corpus path; defaults to `paths.corpus`.
        corpus: Option<PathBuf>,
        /// Prepared (prompt, target) dataset; synthesized from the corpus
        /// train split when absent.
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        /// Starting checkpoint; a fresh seeded model when absent.
        #[arg(long, value_name = "FILE")]
        init: Option<PathBuf>,
        /// Checkpoint output; defaults to `paths.checkpoints/sft.json`.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Preference training from a pair file on top of an SFT checkpoint.
    Dpo {
        /// Pair file; defaults to `paths.pairs`.
        #[arg(long, value_name = "FILE")]
        pairs: Option<PathBuf>,
        /// Policy and frozen-reference starting checkpoint.
        #[arg(long, value_name = "FILE")]
        init: PathBuf,
        /// Checkpoint output; defaults to `paths.checkpoints/dpo.json`.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

/// Failures carrying the exit-code contract.
#[derive(Debug, Error)]
pub enum CliError {
    /// Exit code 1: training produced a non-finite loss.
    #[error("{0}")]
    Numeric(String),
    /// Exit code 2: bad input, unreadable file, or invalid configuration.
    #[error("{0}")]
    Input(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => 1,
            CliError::Input(_) => 2,
        }
    }
}

fn input(e: impl fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

/// Divergence is the one numeric failure; everything else a command can hit
/// is an input problem.
fn from_optim(e: OptimError) -> CliError {
    match e {
        OptimError::DivergedLoss { .. } => CliError::Numeric(e.to_string()),
        other => input(other),
    }
}

/// Parses, executes, prints errors to stderr, and returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let mut stdout = std::io::stdout().lock();
    match execute(cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Executes one command against `out`, which receives everything the command
/// prints on success.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut config = PipelineConfig::load(cli.config.as_deref()).map_err(input)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match cli.command {
        Command::Stats { corpus } => cmd_stats(&config, corpus, cli.json, out),
        Command::PrepareSft { corpus, out: dest, split } => {
            cmd_prepare_sft(&config, corpus, dest, split, out)
        }
        Command::Generate { corpus, checkpoint, split, out: dest } => {
            cmd_generate(&config, corpus, checkpoint, split, dest, out)
        }
        Command::BuildPairs { dump, corpus, out: dest, max_ratio, one_per_input, no_ratio_filter } => {
            if let Some(ratio) = max_ratio {
                config.filters.max_ratio = ratio;
            }
            if let Some(flag) = one_per_input {
                config.filters.one_per_input = flag;
            }
            config.validate().map_err(input)?;
            cmd_build_pairs(&config, dump, corpus, dest, no_ratio_filter, cli.json, out)
        }
        Command::Train { stage } => match stage {
            TrainStage::Sft { corpus, dataset, init, out: dest } => {
                cmd_train_sft(&config, corpus, dataset, init, dest, out)
            }
            TrainStage::Dpo { pairs, init, out: dest } => {
                cmd_train_dpo(&config, pairs, init, dest, out)
            }
        },
        Command::Eval { split, checkpoint, dump, corpus, out: dest, malformed_policy, compare } => {
            if let Some(policy) = malformed_policy {
                config.malformed_policy = policy;
            }
            if let Some(reports) = compare {
                return cmd_compare(&reports[0], &reports[1], cli.json, out);
            }
            let split = split.ok_or_else(|| {
                input("eval needs a split (train|dev|test) unless --compare is given")
            })?;
            cmd_eval(&config, split, checkpoint, dump, corpus, dest, cli.json, out)
        }
    }
}

fn resolve(flag: Option<PathBuf>, default: &Path) -> PathBuf {
    flag.unwrap_or_else(|| default.to_path_buf())
}

fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    Corpus::load_auto(path)
        .map_err(|e| input(format!("corpus {}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| input(format!("creating {}: {e}", parent.display())))?;
        }
    }
    Ok(())
}

fn write_meta_for(
    artifact: &Path,
    command: &str,
    config: &PipelineConfig,
    mode: Option<&str>,
) -> Result<(), CliError> {
    let meta = ArtifactMeta {
        command: command.to_string(),
        seed: config.seed,
        config_hash: config.hash(),
        mode: mode.map(str::to_string),
    };
    write_meta(artifact, &meta).map_err(input)
}

fn write_json_line(out: &mut dyn Write, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(input)?;
    writeln!(out, "{text}").map_err(input)
}

// ---------------------------------------------------------------------------
// stats

fn cmd_stats(
    config: &PipelineConfig,
    corpus: Option<PathBuf>,
    json: bool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let corpus = load_corpus(&resolve(corpus, &config.paths.corpus))?;
    let stats = split_stats(&corpus);
    if json {
        write_json_line(out, &stats)
    } else {
        write!(out, "{stats}").map_err(input)
    }
}

// ---------------------------------------------------------------------------
// prepare-sft

/// One dataset line. Exactly two fields; the gold label is recoverable from
/// the target via `extract_label`, so it is not stored separately.
#[derive(Debug, Serialize, Deserialize)]
struct SftRow {
    prompt: String,
    target: String,
}

/// Synthesized gold record for label-only supervision: no target reference,
/// least-committal claim type, every manifestation absent, templated basis.
fn label_only_record(gold: Label) -> ReasoningRecord {
    ReasoningRecord::new(
        TargetRef::none(),
        ClaimType::Other,
        ManifestationSet::all_absent(),
        "label-only supervision; rationale not annotated",
        gold,
    )
    .expect("single-line template basis is valid")
}

fn label_only_example(example: &LabeledExample) -> SftExample {
    SftExample {
        prompt: render_prompt(&example.text, PromptVariant::Neutral),
        target: render_target_record(&label_only_record(example.label)),
        gold: example.label,
    }
}

fn cmd_prepare_sft(
    config: &PipelineConfig,
    corpus: Option<PathBuf>,
    dest: Option<PathBuf>,
    split: Split,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let corpus = load_corpus(&resolve(corpus, &config.paths.corpus))?;
    let examples: Vec<&LabeledExample> = corpus.split(split).collect();
    if examples.is_empty() {
        return Err(input(format!("corpus has no examples in split {}", split.as_str())));
    }
    let dest = resolve(dest, &config.paths.sft_dataset);
    ensure_parent(&dest)?;
    let mut text = String::new();
    for example in &examples {
        let item = label_only_example(example);
        let row = SftRow { prompt: item.prompt, target: item.target };
        text.push_str(&serde_json::to_string(&row).map_err(input)?);
        text.push('\n');
    }
    std::fs::write(&dest, text).map_err(input)?;
    write_meta_for(&dest, "prepare-sft", config, Some("label_only"))?;
    writeln!(out, "prepared {} examples into {}", examples.len(), dest.display()).map_err(input)
}

/// Loads a prepared dataset, re-deriving each gold label from its target.
fn load_sft_dataset(path: &Path) -> Result<Vec<SftExample>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| input(format!("dataset {}: {e}", path.display())))?;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: SftRow = serde_json::from_str(line)
            .map_err(|e| input(format!("dataset {} line {}: {e}", path.display(), i + 1)))?;
        let gold = extract_label(&row.target).map_err(|e| {
            input(format!("dataset {} line {}: target has no label: {e}", path.display(), i + 1))
        })?;
        examples.push(SftExample { prompt: row.prompt, target: row.target, gold });
    }
    if examples.is_empty() {
        return Err(input(format!("dataset {} is empty", path.display())));
    }
    Ok(examples)
}

// ---------------------------------------------------------------------------
// generate

/// Characters the templates can emit beyond corpus text, so fresh models can
/// encode any rendered prompt or record without unknown-token holes.
fn template_chars() -> String {
    let mut sample = String::from("0123456789");
    for variant in [PromptVariant::Neutral, PromptVariant::SteerPositive, PromptVariant::SteerNegative] {
        sample.push_str(&render_prompt("", variant));
    }
    for kind in TargetKind::ALL {
        sample.push_str(kind.display_name());
    }
    for claim in ClaimType::ALL {
        sample.push_str(claim.display_name());
    }
    for label in [Label::Polarized, Label::NonPolarized] {
        sample.push_str(&render_target_record(&label_only_record(label)));
    }
    sample
}

/// Character vocabulary over the corpus plus the template alphabet.
fn vocab_for(corpus: &Corpus) -> Vocab {
    let template = template_chars();
    let texts: Vec<&str> =
        corpus.iter().map(|e| e.text.as_str()).chain(std::iter::once(template.as_str())).collect();
    Vocab::build(texts)
}

/// A restored checkpoint of either supported scalar type.
enum AnyModel {
    F32(ToyLm<f32>),
    F64(ToyLm<f64>),
}

impl AnyModel {
    fn load(path: &Path) -> Result<Self, CliError> {
        let ck = Checkpoint::read(path)
            .map_err(|e| input(format!("checkpoint {}: {e}", path.display())))?;
        match ck.scalar.as_str() {
            "f32" => Ok(AnyModel::F32(ck.restore().map_err(from_optim)?)),
            "f64" => Ok(AnyModel::F64(ck.restore().map_err(from_optim)?)),
            other => Err(input(format!(
                "checkpoint {}: unsupported scalar tag {other:?}",
                path.display()
            ))),
        }
    }

    fn backend(&self) -> &dyn PolicyBackend {
        match self {
            AnyModel::F32(m) => m,
            AnyModel::F64(m) => m,
        }
    }
}

fn generate_sets(
    backend: &dyn PolicyBackend,
    examples: &[&LabeledExample],
    config: &PipelineConfig,
) -> Result<Vec<CompletionSet>, CliError> {
    let sampling = &config.sampling;
    let renderer = PromptRenderer::default();
    let mut sets = Vec::with_capacity(examples.len());
    for example in examples {
        let set = if sampling.dual_prompt {
            dual_prompt_sample(
                backend,
                &example.id,
                &example.text,
                sampling.temperatures[0],
                config.seed,
                sampling.max_new_tokens,
                &renderer,
            )
        } else {
            sample_completions(
                backend,
                &example.id,
                &example.text,
                &sampling.temperatures,
                sampling.per_temp,
                config.seed,
                sampling.max_new_tokens,
            )
        };
        sets.push(set.map_err(input)?);
    }
    Ok(sets)
}

fn cmd_generate(
    config: &PipelineConfig,
    corpus: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    split: Split,
    dest: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let corpus = load_corpus(&resolve(corpus, &config.paths.corpus))?;
    let examples: Vec<&LabeledExample> = corpus.split(split).collect();
    if examples.is_empty() {
        return Err(input(format!("corpus has no examples in split {}", split.as_str())));
    }
    let sets = match checkpoint {
        Some(path) => generate_sets(AnyModel::load(&path)?.backend(), &examples, config)?,
        None => match config.model.scalar {
            ScalarKind::F32 => {
                let model: ToyLm<f32> =
                    ToyLm::new(config.model.shape, vocab_for(&corpus), config.seed)
                        .map_err(input)?;
                generate_sets(&model, &examples, config)?
            }
            ScalarKind::F64 => {
                let model: ToyLm<f64> =
                    ToyLm::new(config.model.shape, vocab_for(&corpus), config.seed)
                        .map_err(input)?;
                generate_sets(&model, &examples, config)?
            }
        },
    };
    let dest = resolve(dest, &config.paths.dump);
    ensure_parent(&dest)?;
    write_generation_dump(&dest, &sets).map_err(input)?;
    write_meta_for(&dest, "generate", config, None)?;
    let completions: usize = sets.iter().map(|s| s.entries().len()).sum();
    writeln!(
        out,
        "sampled {completions} completions for {} inputs into {}",
        sets.len(),
        dest.display()
    )
    .map_err(input)
}

// ---------------------------------------------------------------------------
// build-pairs

#[derive(Debug, Serialize)]
struct PairsSummary {
    cascade: Vec<usize>,
    stats: PairStats,
}

fn cmd_build_pairs(
    config: &PipelineConfig,
    dump: Option<PathBuf>,
    corpus: Option<PathBuf>,
    dest: Option<PathBuf>,
    no_ratio_filter: bool,
    json: bool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let corpus = load_corpus(&resolve(corpus, &config.paths.corpus))?;
    let dump_path = resolve(dump, &config.paths.dump);
    let sets = load_generation_dump(&dump_path)
        .map_err(|e| input(format!("dump {}: {e}", dump_path.display())))?;

    let candidates = build_candidate_pairs(&sets, &corpus).map_err(input)?;
    let narrowed = if config.filters.one_per_input {
        filter_one_per_input(&candidates)
    } else {
        candidates.clone()
    };
    let mut cascade = vec![candidates.len(), narrowed.len()];
    let kept = if no_ratio_filter {
        narrowed
    } else {
        let survivors =
            filter_length_ratio(&narrowed, config.filters.max_ratio).map_err(input)?;
        cascade.push(survivors.len());
        survivors
    };
    let stats = pair_stats(&kept);

    let dest = resolve(dest, &config.paths.pairs);
    ensure_parent(&dest)?;
    write_pairs(&dest, &kept).map_err(input)?;
    write_meta_for(&dest, "build-pairs", config, None)?;

    if json {
        write_json_line(out, &PairsSummary { cascade, stats })
    } else {
        let line =
            cascade.iter().map(usize::to_string).collect::<Vec<_>>().join(" \u{2192} ");
        writeln!(out, "{line}").map_err(input)?;
        writeln!(
            out,
            "kept {} pairs ({} fn-correction, {} fp-correction) in {}",
            stats.total,
            stats.fn_correction,
            stats.fp_correction,
            dest.display()
        )
        .map_err(input)
    }
}

// ---------------------------------------------------------------------------
// train

/// `checkpoints/sft.json` gets its trace at `checkpoints/sft.trace.json`.
fn trace_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().unwrap_or_default().to_string_lossy();
    checkpoint.with_file_name(format!("{stem}.trace.json"))
}

fn write_trace(path: &Path, trace: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(trace).map_err(input)?;
    text.push('\n');
    std::fs::write(path, text).map_err(input)
}

fn sft_examples_for_training(
    config: &PipelineConfig,
    corpus_flag: Option<PathBuf>,
    dataset: Option<PathBuf>,
) -> Result<(Vec<SftExample>, Option<Corpus>), CliError> {
    match dataset {
        Some(path) => Ok((load_sft_dataset(&path)?, None)),
        None => {
            let corpus = load_corpus(&resolve(corpus_flag, &config.paths.corpus))?;
            let examples: Vec<SftExample> =
                corpus.split(Split::Train).map(label_only_example).collect();
            if examples.is_empty() {
                return Err(input("corpus has no examples in split train"));
            }
            Ok((examples, Some(corpus)))
        }
    }
}

fn train_sft_typed<F: Scalar>(
    config: &PipelineConfig,
    examples: &[SftExample],
    init: Option<&Path>,
    vocab: Vocab,
    dest: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (mut model, mut lineage): (ToyLm<F>, Vec<String>) = match init {
        Some(path) => {
            let ck = Checkpoint::read(path)
                .map_err(|e| input(format!("checkpoint {}: {e}", path.display())))?;
            (ck.restore().map_err(from_optim)?, ck.seed_lineage)
        }
        None => {
            let model = ToyLm::new(config.model.shape, vocab, config.seed).map_err(input)?;
            (model, vec![format!("init: fresh model, seed {}", config.seed)])
        }
    };
    let trace = train_sft(&mut model, examples, &config.sft, config.seed).map_err(from_optim)?;
    lineage.push(format!("train-sft: seed {}, config {}", config.seed, config.hash()));
    Checkpoint::capture(&model, lineage).write(dest).map_err(from_optim)?;
    write_meta_for(dest, "train-sft", config, None)?;
    let tp = trace_path(dest);
    write_trace(&tp, &trace)?;
    write_meta_for(&tp, "train-sft", config, None)?;
    writeln!(
        out,
        "sft: {} examples, epoch loss {:.6} -> {:.6}, checkpoint {}",
        examples.len(),
        trace.epoch_losses.first().copied().unwrap_or(f64::NAN),
        trace.epoch_losses.last().copied().unwrap_or(f64::NAN),
        dest.display()
    )
    .map_err(input)
}

fn cmd_train_sft(
    config: &PipelineConfig,
    corpus: Option<PathBuf>,
    dataset: Option<PathBuf>,
    init: Option<PathBuf>,
    dest: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (examples, corpus) = sft_examples_for_training(config, corpus, dataset)?;
    // Fresh models draw their vocabulary from whichever source supplied the
    // examples; checkpoint-initialized runs carry their own.
    let vocab = match &corpus {
        Some(c) => vocab_for(c),
        None => {
            let template = template_chars();
            let texts: Vec<&str> = examples
                .iter()
                .flat_map(|e| [e.prompt.as_str(), e.target.as_str()])
                .chain(std::iter::once(template.as_str()))
                .collect();
            Vocab::build(texts)
        }
    };
    let dest = resolve(dest, &config.paths.checkpoints.join("sft.json"));
    ensure_parent(&dest)?;
    match config.model.scalar {
        ScalarKind::F32 => {
            train_sft_typed::<f32>(config, &examples, init.as_deref(), vocab, &dest, out)
        }
        ScalarKind::F64 => {
            train_sft_typed::<f64>(config, &examples, init.as_deref(), vocab, &dest, out)
        }
    }
}

fn train_dpo_typed<F: Scalar>(
    config: &PipelineConfig,
    ck: &Checkpoint,
    pairs: &[crate::pairs::PreferencePair],
    dest: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut policy: ToyLm<F> = ck.restore().map_err(from_optim)?;
    let reference: ToyLm<F> = ck.restore().map_err(from_optim)?;
    let trace =
        train_dpo(&mut policy, &reference, pairs, &config.dpo, config.seed).map_err(from_optim)?;
    let mut lineage = ck.seed_lineage.clone();
    lineage.push(format!("train-dpo: seed {}, config {}", config.seed, config.hash()));
    Checkpoint::capture(&policy, lineage).write(dest).map_err(from_optim)?;
    write_meta_for(dest, "train-dpo", config, None)?;
    let tp = trace_path(dest);
    write_trace(&tp, &trace)?;
    write_meta_for(&tp, "train-dpo", config, None)?;
    writeln!(
        out,
        "dpo: {} pairs, mean margin {:.6} -> {:.6}, checkpoint {}",
        pairs.len(),
        trace.mean_margins.first().copied().unwrap_or(f64::NAN),
        trace.mean_margins.last().copied().unwrap_or(f64::NAN),
        dest.display()
    )
    .map_err(input)
}

fn cmd_train_dpo(
    config: &PipelineConfig,
    pairs: Option<PathBuf>,
    init: PathBuf,
    dest: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let pairs_path = resolve(pairs, &config.paths.pairs);
    let pairs = load_pairs(&pairs_path)
        .map_err(|e| input(format!("pairs {}: {e}", pairs_path.display())))?;
    let ck = Checkpoint::read(&init)
        .map_err(|e| input(format!("checkpoint {}: {e}", init.display())))?;
    let dest = resolve(dest, &config.paths.checkpoints.join("dpo.json"));
    ensure_parent(&dest)?;
    match ck.scalar.as_str() {
        "f32" => train_dpo_typed::<f32>(config, &ck, &pairs, &dest, out),
        "f64" => train_dpo_typed::<f64>(config, &ck, &pairs, &dest, out),
        other => {
            Err(input(format!("checkpoint {}: unsupported scalar tag {other:?}", init.display())))
        }
    }
}

// ---------------------------------------------------------------------------
// eval

/// Scores dump completions against gold labels. The dump must hold exactly
/// one completion per scored example; anything else is ambiguous.
fn evaluate_dump(
    path: &Path,
    examples: &[&LabeledExample],
    policy: MalformedPolicy,
) -> Result<Evaluation, CliError> {
    let sets = load_generation_dump(path)
        .map_err(|e| input(format!("dump {}: {e}", path.display())))?;
    let by_id: HashMap<&str, &CompletionSet> = sets.iter().map(|s| (s.id(), s)).collect();
    let mut preds = Vec::with_capacity(examples.len());
    let mut golds = Vec::with_capacity(examples.len());
    let mut audit = Vec::with_capacity(examples.len());
    for example in examples {
        let set = by_id
            .get(example.id.as_str())
            .ok_or_else(|| input(format!("dump has no completion for example {}", example.id)))?;
        if set.entries().len() != 1 {
            return Err(input(format!(
                "example {} has {} completions in the dump; eval needs exactly one",
                example.id,
                set.entries().len()
            )));
        }
        let pred = extract_label(&set.entries()[0].completion).ok();
        let outcome = match pred {
            Some(p) => Outcome::of(p, example.label),
            None => Outcome::MALFORMED,
        };
        preds.push(pred);
        golds.push(example.label);
        audit.push(AuditRow { id: example.id.clone(), gold: example.label, pred, outcome });
    }
    let cm = confusion(&preds, &golds, policy).map_err(input)?;
    let report = metrics(&cm).map_err(input)?;
    Ok(Evaluation { report, audit })
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: &PipelineConfig,
    split: Split,
    checkpoint: Option<PathBuf>,
    dump: Option<PathBuf>,
    corpus: Option<PathBuf>,
    dest: Option<PathBuf>,
    json: bool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let corpus = load_corpus(&resolve(corpus, &config.paths.corpus))?;
    let examples: Vec<&LabeledExample> = corpus.split(split).collect();
    if examples.is_empty() {
        return Err(input(format!("corpus has no examples in split {}", split.as_str())));
    }
    let evaluation = match (checkpoint, dump) {
        (Some(ck), None) => {
            let model = AnyModel::load(&ck)?;
            let options = EvalOptions {
                variant: PromptVariant::Neutral,
                malformed_policy: config.malformed_policy,
                max_new_tokens: config.sampling.max_new_tokens,
            };
            evaluate_backend(model.backend(), examples.iter().copied(), &options)
                .map_err(input)?
        }
        (None, Some(d)) => evaluate_dump(&d, &examples, config.malformed_policy)?,
        _ => return Err(input("eval needs exactly one of --checkpoint or --dump")),
    };

    let default_dest = config.paths.reports.join(format!("report-{}.json", split.as_str()));
    let dest = resolve(dest, &default_dest);
    ensure_parent(&dest)?;
    write_report(&evaluation.report, &dest).map_err(input)?;
    write_meta_for(&dest, "eval", config, None)?;
    let audit_dest = {
        let stem = dest.file_stem().unwrap_or_default().to_string_lossy();
        dest.with_file_name(format!("{stem}.audit.jsonl"))
    };
    write_audit(&evaluation.audit, &audit_dest).map_err(input)?;
    write_meta_for(&audit_dest, "eval", config, None)?;

    if json {
        write_json_line(out, &evaluation.report)
    } else {
        let r = &evaluation.report;
        writeln!(
            out,
            "{}: {} examples, accuracy {:.4}, macro-F1 {:.4}, fn {}, fp {}, malformed {}",
            split.as_str(),
            examples.len(),
            r.accuracy,
            r.f1_macro,
            r.confusion.fn_,
            r.confusion.fp,
            r.confusion.malformed
        )
        .map_err(input)?;
        writeln!(out, "report: {}", dest.display()).map_err(input)
    }
}

fn cmd_compare(
    a: &Path,
    b: &Path,
    json: bool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let ra = load_report(a).map_err(|e| input(format!("report {}: {e}", a.display())))?;
    let rb = load_report(b).map_err(|e| input(format!("report {}: {e}", b.display())))?;
    let diff = diff_reports(&ra, &rb).map_err(input)?;
    if json {
        return write_json_line(out, &diff);
    }
    writeln!(out, "{:<11} {:>9} {:>9} {:>9}", "metric", "a", "b", "delta").map_err(input)?;
    let metric_rows: [(&str, fn(&MetricsReport) -> f64, f64); 6] = [
        ("accuracy", |r| r.accuracy, diff.delta_accuracy),
        ("precision", |r| r.precision, diff.delta_precision),
        ("recall", |r| r.recall, diff.delta_recall),
        ("f1_binary", |r| r.f1_binary, diff.delta_f1_binary),
        ("f1_macro", |r| r.f1_macro, diff.delta_f1_macro),
        ("f1_micro", |r| r.f1_micro, diff.delta_f1_micro),
    ];
    for (name, get, delta) in metric_rows {
        writeln!(out, "{name:<11} {:>9.4} {:>9.4} {delta:>+9.4}", get(&ra), get(&rb))
            .map_err(input)?;
    }
    let count_rows: [(&str, usize, usize, i64); 5] = [
        ("tp", ra.confusion.tp, rb.confusion.tp, diff.delta_tp),
        ("fp", ra.confusion.fp, rb.confusion.fp, diff.delta_fp),
        ("fn", ra.confusion.fn_, rb.confusion.fn_, diff.delta_fn),
        ("tn", ra.confusion.tn, rb.confusion.tn, diff.delta_tn),
        ("malformed", ra.confusion.malformed, rb.confusion.malformed, diff.delta_malformed),
    ];
    for (name, a, b, delta) in count_rows {
        writeln!(out, "{name:<11} {a:>9} {b:>9} {delta:>+9}").map_err(input)?;
    }
    Ok(())
}
