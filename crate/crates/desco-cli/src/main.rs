use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use desco::provider::ProviderBackend;
use desco::querygen::GenMode;
use desco::tokenize::Tokenizer;
use desco::vocab::VocabBuildConfig;
use desco_cli::pipeline::{self, GenQueriesArgs, InputKind};
use desco_cli::PipelineConfig;

/// Corpus transformation and evaluation for language-conditioned object
/// detection: description-rich query generation, token-level alignment
/// checks, and context-sensitivity metrics.
#[derive(Parser)]
#[command(name = "desco", version, about)]
struct Cli {
    /// Log level (error|warn|info|debug|trace); RUST_LOG overrides.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a frequency-ranked entity vocabulary from captions.
    BuildVocab(BuildVocabArgs),
    /// Fetch entity descriptions from a backend into a descriptions file.
    Describe(DescribeArgs),
    /// Fetch hard negative captions from a backend.
    Negatives(NegativesArgs),
    /// Generate composed training queries from detection/grounding samples.
    GenQueries(GenQueriesCli),
    /// Check token budgets and alignment soundness of a queries file.
    TokenizeCheck(TokenizeCheckArgs),
    /// Report per-surface-form label statistics and conditional entropy.
    Audit(AuditArgs),
    /// Build positive/confusable context pairs for rare objects.
    BuildPairs(BuildPairsArgs),
    /// Compute delta-box, delta-conf, and AP over context pairs.
    EvalSensitivity(EvalSensitivityArgs),
    /// Compute corpus average precision of predictions against ground truth.
    EvalAp(EvalApArgs),
    /// Recompute statistics from a generated queries file.
    Stats(StatsArgs),
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    top_k: usize,
    #[arg(long, default_value_t = 1)]
    min_len: usize,
    #[arg(long, default_value_t = 4)]
    max_len: usize,
    /// Newline-delimited stopword list (defaults to the built-in lexicon).
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Newline-delimited verb list (defaults to the built-in lexicon).
    #[arg(long)]
    verbs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Backend spec: fixture:<path> or http:<url>.
    #[arg(long)]
    backend: String,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "")]
    model: String,
    /// Environment variable holding the API token (never logged).
    #[arg(long, default_value = "DESCO_API_TOKEN")]
    auth_env: String,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[arg(long, default_value_t = 0.1)]
    max_failure_rate: f64,
}

#[derive(Args)]
struct NegativesArgs {
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    backend: String,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Negative captions requested per positive caption.
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "")]
    model: String,
    #[arg(long, default_value = "DESCO_API_TOKEN")]
    auth_env: String,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[arg(long, default_value_t = 0.1)]
    max_failure_rate: f64,
}

#[derive(Args)]
struct GenQueriesCli {
    /// desco | glip
    #[arg(long, default_value = "desco")]
    mode: String,
    #[arg(long)]
    input: PathBuf,
    /// auto | detection | grounding
    #[arg(long, default_value = "auto")]
    input_kind: String,
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    descriptions: Option<PathBuf>,
    #[arg(long)]
    negatives: Option<PathBuf>,
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    tokenizer: Option<String>,
    #[arg(long)]
    max_failure_rate: Option<f64>,
    /// Also write the stats JSON to this path.
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

#[derive(Args)]
struct TokenizeCheckArgs {
    #[arg(long)]
    queries: PathBuf,
    /// default | default-lower | wordpiece:<vocab file>
    #[arg(long, default_value = "default")]
    tokenizer: String,
    #[arg(long, default_value_t = 256)]
    max_tokens: usize,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value = "default")]
    tokenizer: String,
    /// Write per-surface-form statistics to this JSONL path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the top N context-dependent surface forms.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct BuildPairsArgs {
    #[arg(long)]
    samples: PathBuf,
    /// Newline-delimited rare entity names.
    #[arg(long)]
    rare: PathBuf,
    #[arg(long)]
    descriptions: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalSensitivityArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    preds: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
}

#[derive(Args)]
struct EvalApArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// all-point | coco101 | points:<n>
    #[arg(long, default_value = "all-point")]
    interp: String,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value = "default")]
    tokenizer: String,
    #[arg(long, default_value_t = 256)]
    max_tokens: usize,
}

fn parse_mode(s: &str) -> Result<GenMode> {
    match s {
        "desco" => Ok(GenMode::Desco),
        "glip" | "glip_baseline" => Ok(GenMode::GlipBaseline),
        other => anyhow::bail!("unknown mode {other:?} (expected desco|glip)"),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let env = env_logger::Env::default().default_filter_or(cli.log_level.clone());
    env_logger::Builder::from_env(env).init();

    match cli.command {
        Command::BuildVocab(args) => {
            let mut cfg = VocabBuildConfig {
                top_k: args.top_k,
                min_len: args.min_len,
                max_len: args.max_len,
                ..Default::default()
            };
            if let Some(path) = args.stopwords {
                cfg = cfg.with_stopword_file(path)?;
            }
            if let Some(path) = args.verbs {
                cfg = cfg.with_verb_file(path)?;
            }
            let vocab = desco_cli::commands::build_vocab(&args.input, &args.out, &cfg)?;
            eprintln!("wrote {} entries to {}", vocab.len(), args.out.display());
        }
        Command::Describe(args) => {
            let backend = ProviderBackend::from_spec(&args.backend, &args.model, &args.auth_env)?;
            let (written, failed) = desco_cli::commands::describe(
                &args.vocab,
                backend,
                args.cache.as_deref(),
                &args.out,
                args.parallelism,
                args.max_failure_rate,
            )?;
            eprintln!("wrote {written} descriptions ({failed} failures)");
        }
        Command::Negatives(args) => {
            let backend = ProviderBackend::from_spec(&args.backend, &args.model, &args.auth_env)?;
            let (written, failed) = desco_cli::commands::negatives(
                &args.captions,
                backend,
                args.cache.as_deref(),
                args.n,
                &args.out,
                args.parallelism,
                args.max_failure_rate,
            )?;
            eprintln!("wrote {written} negative-caption records ({failed} failures)");
        }
        Command::GenQueries(args) => {
            let mut config = match &args.config {
                Some(path) => PipelineConfig::load(path)?,
                None => PipelineConfig::default(),
            };
            // flags override file values
            config.gen.mode = parse_mode(&args.mode)?;
            if let Some(seed) = args.seed {
                config.global_seed = Some(seed);
            }
            if let Some(workers) = args.workers {
                config.worker_count = Some(workers);
            }
            if let Some(rate) = args.max_failure_rate {
                config.max_failure_rate = Some(rate);
            }
            if args.vocab.is_some() {
                config.vocab = args.vocab.clone();
            }
            if args.descriptions.is_some() {
                config.descriptions = args.descriptions.clone();
            }
            if args.negatives.is_some() {
                config.negatives = args.negatives.clone();
            }
            if args.captions.is_some() {
                config.captions = args.captions.clone();
            }
            if args.tokenizer.is_some() {
                config.tokenizer = args.tokenizer.clone();
            }
            config.validate_paths()?;

            let tokenizer = Tokenizer::from_spec(
                config.tokenizer.as_deref().unwrap_or("default"),
            )?;
            let gen_args = GenQueriesArgs {
                mode: config.gen.mode,
                input: args.input.clone(),
                input_kind: InputKind::parse(&args.input_kind)?,
                out: args.out.clone(),
                vocab: config.vocab.clone(),
                descriptions: config.descriptions.clone(),
                negatives: config.negatives.clone(),
                captions: config.captions.clone(),
                gen: config.gen_config(),
                workers: config.worker_count(),
                tokenizer,
                max_failure_rate: config.max_failure_rate(),
            };
            let stats = pipeline::run_gen_queries(&gen_args)?;
            if let Some(path) = args.stats_out {
                let file = std::fs::File::create(&path)
                    .with_context(|| format!("cannot create {}", path.display()))?;
                pipeline::emit_stats(&stats, file)?;
            }
            pipeline::emit_stats(&stats, std::io::stdout())?;
        }
        Command::TokenizeCheck(args) => {
            let tokenizer = Tokenizer::from_spec(&args.tokenizer)?;
            let report =
                desco_cli::commands::tokenize_check(&args.queries, &tokenizer, args.max_tokens)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.over_budget > 0 || report.alignment_errors > 0 {
                std::process::exit(1);
            }
        }
        Command::Audit(args) => {
            let tokenizer = Tokenizer::from_spec(&args.tokenizer)?;
            let report =
                desco_cli::commands::audit(&args.queries, &tokenizer, args.out.as_deref())?;
            #[derive(serde::Serialize)]
            struct Summary<'a> {
                queries: u64,
                token_occurrences: u64,
                distinct_surfaces: usize,
                context_dependent_surfaces: usize,
                mean_entropy_bits: f64,
                top: Vec<(&'a str, f64, u64, u64)>,
            }
            let dependent = report.context_dependent_surfaces();
            let summary = Summary {
                queries: report.queries_seen,
                token_occurrences: report.total_token_occurrences,
                distinct_surfaces: report.per_surface.len(),
                context_dependent_surfaces: dependent.len(),
                mean_entropy_bits: report.mean_entropy_bits,
                top: dependent
                    .iter()
                    .take(args.top)
                    .map(|(s, st)| (*s, st.conditional_entropy_bits, st.n_pos, st.n_neg))
                    .collect(),
            };
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::BuildPairs(args) => {
            let (written, skipped) = desco_cli::commands::build_pairs(
                &args.samples,
                &args.rare,
                &args.descriptions,
                &args.out,
            )?;
            eprintln!("wrote {written} pairs ({skipped} skipped)");
        }
        Command::EvalSensitivity(args) => {
            let report =
                desco_cli::commands::eval_sensitivity(&args.pairs, &args.preds, args.iou)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::EvalAp(args) => {
            let interp = desco_cli::commands::parse_interpolation(&args.interp)?;
            let report = desco_cli::commands::eval_ap(&args.preds, &args.gt, args.iou, interp)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Stats(args) => {
            let tokenizer = Tokenizer::from_spec(&args.tokenizer)?;
            let stats =
                pipeline::recount_stats(&args.queries, &tokenizer, args.max_tokens)?;
            pipeline::emit_stats(&stats, std::io::stdout())?;
        }
    }
    Ok(())
}
