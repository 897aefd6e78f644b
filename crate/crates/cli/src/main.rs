use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;

use codeprint::corpus::{self, MaskMode, MaskingConfig, Source};
use codeprint::eval::{self, IntentCatalog};
use codeprint::extract::{detect_obfuscated_callsites, extract_codeprints, ApiCodeprint, CodeprintRecord};
use codeprint::listing::{parse_listing, ApiCatalog, Listing, Register};
use codeprint::normalize::{normalize_codeprint, Variant};
use codeprint::refdb;
use codeprint::transform::{transform_listing, TransformKind, TransformPlan};

#[derive(Parser)]
#[command(name = "codeprint", version, about = "API codeprint extraction and corpus pipeline")]
struct Cli {
    /// TOML file supplying defaults for any flag; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-file work.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract codeprints (and obfuscated callsites) as JSON Lines.
    Extract(ExtractArgs),
    /// Build a masked-LM corpus from listings.
    Corpus(CorpusArgs),
    /// Build the stripped fine-tuning/evaluation corpus (API token masked).
    Strip(StripArgs),
    /// Build the API reference database and validate it against the catalog.
    Refdb(RefdbArgs),
    /// Apply semantics-preserving transforms to a listing.
    Transform(TransformArgs),
    /// Score a predictions file.
    Eval(EvalArgs),
    /// Render a human-readable accuracy and intent report.
    Report(ReportArgs),
}

#[derive(Args)]
struct ListingInputs {
    /// Listing files or directories of `.lst` files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    io: ListingInputs,
    /// Also report callsites through unresolved pointers.
    #[arg(long)]
    obfuscated: bool,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Replace masked positions 80/10/10 with mask/random/original.
    #[arg(long)]
    bert: bool,
}

#[derive(Args)]
struct CorpusArgs {
    #[command(flatten)]
    io: ListingInputs,
    #[arg(long)]
    variant: Option<String>,
    /// `pretrain-random` or `api-mask`.
    #[arg(long, default_value = "pretrain-random")]
    mask_mode: String,
    #[command(flatten)]
    mask: MaskArgs,
}

#[derive(Args)]
struct StripArgs {
    #[command(flatten)]
    io: ListingInputs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_tokens: Option<usize>,
}

#[derive(Args)]
struct RefdbArgs {
    #[command(flatten)]
    io: ListingInputs,
}

#[derive(Args)]
struct TransformArgs {
    input: PathBuf,
    /// Comma-separated transform kinds; all when omitted.
    #[arg(long, value_delimiter = ',')]
    transforms: Vec<String>,
    /// Explicit register pair, e.g. `ebx,ecx`.
    #[arg(long)]
    register_swap: Option<String>,
    /// Probability of rewriting each eligible substitution/reordering site.
    #[arg(long, default_value_t = 1.0)]
    rate: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Transformed listing; the edit log goes to `<out>.edits.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long)]
    intents: Option<PathBuf>,
}

/// Keys accepted in `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    catalog: Option<PathBuf>,
    intents: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    variant: Option<String>,
    mask_rate: Option<f64>,
    seed: Option<u64>,
    max_tokens: Option<usize>,
    threshold: Option<f64>,
    workers: Option<usize>,
    out: Option<PathBuf>,
}

/// Bad flags, missing files, or conflicting settings.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use codeprint::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument(_) | E::RegisterSwapRejected(..) => 1,
                E::Internal(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn require(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    let path = flag
        .or_else(|| config.clone())
        .ok_or_else(|| usage(format!("--{name} is required")))?;
    if !path.exists() {
        return Err(usage(format!("--{name}: {} does not exist", path.display())));
    }
    Ok(path)
}

fn output(flag: Option<PathBuf>, config: &FileConfig) -> anyhow::Result<PathBuf> {
    flag.or_else(|| config.out.clone()).ok_or_else(|| usage("--out is required"))
}

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    let config = load_config(cli.config.as_deref())?;
    let workers = cli.workers.or(config.workers).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building worker pool")?;
    pool.install(|| match cli.command {
        Command::Extract(args) => cmd_extract(args, &config),
        Command::Corpus(args) => cmd_corpus(args, &config),
        Command::Strip(args) => cmd_strip(args, &config),
        Command::Refdb(args) => cmd_refdb(args, &config),
        Command::Transform(args) => cmd_transform(args, &config),
        Command::Eval(args) => cmd_eval(args, &config),
        Command::Report(args) => cmd_report(args, &config),
    })
}

/// Writes via a temporary file in the destination directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Expands directories to their `.lst` files; the result is sorted so runs
/// are independent of directory iteration order.
fn collect_inputs(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            for entry in fs::read_dir(input).with_context(|| format!("reading {}", input.display()))? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "lst") {
                    files.push(path);
                }
            }
        } else if input.is_file() {
            files.push(input.clone());
        } else {
            return Err(usage(format!("{} does not exist", input.display())));
        }
    }
    files.sort();
    files.dedup();
    Ok(files)
}

fn load_catalog(io: &ListingInputs, config: &FileConfig) -> anyhow::Result<ApiCatalog> {
    let path = require(io.catalog.clone(), &config.catalog, "catalog")?;
    let text = fs::read_to_string(&path)?;
    ApiCatalog::parse(&text).with_context(|| format!("parsing catalog {}", path.display()))
}

fn source_id(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn parse_files(files: &[PathBuf]) -> anyhow::Result<Vec<Listing>> {
    files
        .par_iter()
        .map(|path| {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let listing = parse_listing(&text, &source_id(path)).with_context(|| format!("parsing {}", path.display()))?;
            Ok(listing)
        })
        .collect()
}

struct Extraction {
    listings: Vec<Listing>,
    /// Per listing, the codeprints of every function in listing order.
    codeprints: Vec<Vec<ApiCodeprint>>,
}

fn extract_all(io: &ListingInputs, catalog: &ApiCatalog) -> anyhow::Result<Extraction> {
    let files = collect_inputs(&io.inputs)?;
    let listings = parse_files(&files)?;
    let codeprints = listings
        .par_iter()
        .map(|l| l.functions.iter().flat_map(|f| extract_codeprints(f, catalog)).collect())
        .collect();
    Ok(Extraction { listings, codeprints })
}

fn jsonl<T: serde::Serialize>(records: impl IntoIterator<Item = T>) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn cmd_extract(args: ExtractArgs, config: &FileConfig) -> anyhow::Result<serde_json::Value> {
    let catalog = load_catalog(&args.io, config)?;
    let out = output(args.io.out.clone(), config)?;
    let ex = extract_all(&args.io, &catalog)?;
    let mut records = Vec::new();
    let mut obfuscated = 0;
    for (listing, cps) in ex.listings.iter().zip(&ex.codeprints) {
        records.extend(cps.iter().map(|cp| CodeprintRecord::from_codeprint(&listing.source_id, cp)));
        if args.obfuscated {
            for func in &listing.functions {
                for site in detect_obfuscated_callsites(func, &catalog) {
                    obfuscated += 1;
                    records.push(CodeprintRecord::from_obfuscated(&listing.source_id, &site));
                }
            }
        }
    }
    let codeprints = records.len() - obfuscated;
    write_atomic(&out, &jsonl(&records)?)?;
    Ok(json!({
        "command": "extract",
        "listings": ex.listings.len(),
        "functions": ex.listings.iter().map(|l| l.functions.len()).sum::<usize>(),
        "codeprints": codeprints,
        "obfuscated": obfuscated,
        "out": out,
    }))
}

fn build_corpus(
    io: &ListingInputs,
    config: &FileConfig,
    variant: Variant,
    masking: &MaskingConfig,
) -> anyhow::Result<(Vec<u8>, serde_json::Value)> {
    let catalog = load_catalog(io, config)?;
    let ex = extract_all(io, &catalog)?;
    let per_listing: Vec<Vec<corpus::CorpusExample>> = ex
        .listings
        .par_iter()
        .zip(&ex.codeprints)
        .map(|(listing, cps)| {
            let mut out = Vec::new();
            for cp in cps {
                let ncp = normalize_codeprint(cp, variant)?;
                let source = Source {
                    listing: listing.source_id.clone(),
                    function: cp.function_name.clone(),
                    address: cp.callsite_address,
                };
                if let Some(example) = corpus::build_example(&ncp, source, masking)? {
                    out.push(example);
                }
            }
            Ok::<_, codeprint::Error>(out)
        })
        .collect::<Result<_, _>>()?;
    let examples: Vec<_> = per_listing.into_iter().flatten().collect();
    let total: usize = ex.codeprints.iter().map(Vec::len).sum();
    let mut buf = Vec::new();
    corpus::emit_corpus(&examples, &mut buf)?;
    let summary = json!({
        "variant": variant.as_str(),
        "codeprints": total,
        "examples": examples.len(),
        "filtered_zero_param": total - examples.len(),
        "masked_positions": examples.iter().map(|e| e.mask_positions.len()).sum::<usize>(),
    });
    Ok((buf, summary))
}

fn cmd_corpus(args: CorpusArgs, config: &FileConfig) -> anyhow::Result<serde_json::Value> {
    let variant: Variant = args
        .variant
        .or_else(|| config.variant.clone())
        .unwrap_or_else(|| "normal".into())
        .parse()?;
    let mode = match args.mask_mode.as_str() {
        "pretrain-random" => MaskMode::PretrainRandom,
        "api-mask" => MaskMode::ApiMask,
        other => return Err(usage(format!("unknown mask mode `{other}`"))),
    };
    let masking = MaskingConfig {
        mode,
        rate: args.mask.mask_rate.or(config.mask_rate).unwrap_or(corpus::DEFAULT_MASK_RATE),
        seed: args.mask.seed.or(config.seed).unwrap_or(0),
        max_tokens: args.mask.max_tokens.or(config.max_tokens).unwrap_or(corpus::DEFAULT_MAX_TOKENS),
        bert_refinement: args.mask.bert,
    };
    let out = output(args.io.out.clone(), config)?;
    let (bytes, mut summary) = build_corpus(&args.io, config, variant, &masking)?;
    write_atomic(&out, &bytes)?;
    summary["command"] = json!("corpus");
    summary["out"] = json!(out);
    Ok(summary)
}

fn cmd_strip(args: StripArgs, config: &FileConfig) -> anyhow::Result<serde_json::Value> {
    let masking = MaskingConfig {
        mode: MaskMode::ApiMask,
        rate: 0.0,
        seed: args.seed.or(config.seed).unwrap_or(0),
        max_tokens: args.max_tokens.or(config.max_tokens).unwrap_or(corpus::DEFAULT_MAX_TOKENS),
        bert_refinement: false,
    };
    let out = output(args.io.out.clone(), config)?;
    let (bytes, mut summary) = build_corpus(&args.io, config, Variant::Stripped, &masking)?;
    write_atomic(&out, &bytes)?;
    summary["command"] = json!("strip");
    summary["out"] = json!(out);
    Ok(summary)
}

fn cmd_refdb(args: RefdbArgs, config: &FileConfig) -> anyhow::Result<serde_json::Value> {
    let catalog = load_catalog(&args.io, config)?;
    let out = output(args.io.out.clone(), config)?;
    let ex = extract_all(&args.io, &catalog)?;
    let all: Vec<ApiCodeprint> = ex.codeprints.into_iter().flatten().collect();
    let db = refdb::build_refdb(&all);
    let report = refdb::validate_refdb(&db, &catalog);
    let mut buf = Vec::new();
    refdb::write_refdb(&db, &mut buf)?;
    write_atomic(&out, &buf)?;
    Ok(json!({
        "command": "refdb",
        "apis": db.entries.len(),
        "observations": all.len(),
        "summary": db.summary,
        "validation": report,
        "out": out,
    }))
}

fn parse_swap(text: &str) -> anyhow::Result<(Register, Register)> {
    let (a, b) = text
        .split_once(',')
        .ok_or_else(|| usage(format!("--register-swap expects `reg,reg`, got `{text}`")))?;
    let reg = |s: &str| Register::parse(s.trim()).ok_or_else(|| usage(format!("unknown register `{s}`")));
    Ok((reg(a)?, reg(b)?))
}

fn cmd_transform(args: TransformArgs, config: &FileConfig) -> anyhow::Result<serde_json::Value> {
    let out = output(args.out, config)?;
    let kinds: Vec<TransformKind> = if args.transforms.is_empty() {
        TransformKind::ALL.to_vec()
    } else {
        args.transforms.iter().map(|k| k.parse()).collect::<Result<_, _>>()?
    };
    let mut plan = TransformPlan::new(args.seed.or(config.seed).unwrap_or(0), kinds);
    plan.rate = args.rate;
    if let Some(swap) = &args.register_swap {
        plan.register_swap = Some(parse_swap(swap)?);
    }
    let files = collect_inputs(std::slice::from_ref(&args.input))?;
    let [file] = files.as_slice() else {
        return Err(usage("transform takes exactly one listing file"));
    };
    let listing = parse_files(std::slice::from_ref(file))?.remove(0);
    let transformed = transform_listing(&listing, &mut plan)?;
    // The output must still be a well-formed listing.
    parse_listing(&transformed.render(), &listing.source_id)
        .map_err(|e| codeprint::Error::Internal(format!("transformed listing does not re-parse: {e}")))?;

    let log_path = PathBuf::from(format!("{}.edits.json", out.display()));
    let mut log = serde_json::to_vec_pretty(&json!({
        "seed": plan.seed,
        "kinds": plan.kinds,
        "register_swap": plan.register_swap,
        "rate": plan.rate,
        "edits": plan.log,
    }))?;
    log.push(b'\n');
    write_atomic(&out, transformed.render().as_bytes())?;
    write_atomic(&log_path, &log)?;
    let mut by_kind: BTreeMap<&str, usize> = BTreeMap::new();
    for edit in &plan.log {
        *by_kind.entry(edit.kind.as_str()).or_default() += 1;
    }
    Ok(json!({
        "command": "transform",
        "functions": transformed.functions.len(),
        "edits": by_kind,
        "out": out,
        "edit_log": log_path,
    }))
}

fn evaluate(args: &EvalArgs, config: &FileConfig) -> anyhow::Result<(eval::EvalReport, eval::MacroReport)> {
    let path = require(Some(args.predictions.clone()), &None, "predictions")?;
    let records = eval::read_predictions(BufReader::new(fs::File::open(&path)?))
        .with_context(|| format!("reading {}", path.display()))?;
    let mut report = eval::score_exact(&records)?;
    let macro_report = eval::macro_average(&records)?;
    if let Some(emb) = args.embeddings.clone().or_else(|| config.embeddings.clone()) {
        let emb = require(Some(emb), &None, "embeddings")?;
        let vectors = eval::read_embeddings(BufReader::new(fs::File::open(&emb)?))
            .with_context(|| format!("reading {}", emb.display()))?;
        let threshold = args.threshold.or(config.threshold).unwrap_or(eval::DEFAULT_GROUP_THRESHOLD);
        let groups = eval::build_context_groups(&vectors, threshold)?;
        report.context_aware_accuracy = Some(eval::score_context_aware(&records, &groups)?);
    }
    Ok((report, macro_report))
}

fn cmd_eval(args: EvalArgs, config: &FileConfig) -> anyhow::Result<serde_json::Value> {
    let out = output(args.out.clone(), config)?;
    let (report, macro_report) = evaluate(&args, config)?;
    let mut bytes = serde_json::to_vec_pretty(&json!({ "report": report, "macro": macro_report }))?;
    bytes.push(b'\n');
    write_atomic(&out, &bytes)?;
    Ok(json!({
        "command": "eval",
        "samples": report.samples,
        "accuracy": report.accuracy,
        "macro_accuracy": macro_report.macro_accuracy,
        "context_aware_accuracy": report.context_aware_accuracy,
        "out": out,
    }))
}

fn cmd_report(args: ReportArgs, config: &FileConfig) -> anyhow::Result<serde_json::Value> {
    let out = output(args.eval.out.clone(), config)?;
    let (report, _) = evaluate(&args.eval, config)?;
    let mut text = eval::render_table(&report);
    let mut intents = None;
    if let Some(path) = args.intents.clone().or_else(|| config.intents.clone()) {
        let path = require(Some(path), &None, "intents")?;
        let catalog = IntentCatalog::parse(&fs::read_to_string(&path)?)
            .with_context(|| format!("parsing {}", path.display()))?;
        let correct = report.per_api.iter().filter(|(_, a)| a.correct > 0).map(|(k, _)| k.as_str());
        let tagged = eval::tag_intents(correct, &catalog);
        text.push_str("\nintents of correctly predicted APIs:\n");
        for (intent, n) in &tagged.counts {
            text.push_str(&format!("  {intent:<14} {n}\n"));
        }
        if !tagged.unknown.is_empty() {
            text.push_str(&format!("  {:<14} {}\n", "untagged", tagged.unknown.len()));
        }
        intents = Some(tagged);
    }
    write_atomic(&out, text.as_bytes())?;
    Ok(json!({
        "command": "report",
        "samples": report.samples,
        "accuracy": eval::format_percent(report.accuracy),
        "intents": intents.map(|t| t.counts),
        "out": out,
    }))
}
