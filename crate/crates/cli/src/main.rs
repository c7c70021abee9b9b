use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use forge_core::catalog::{
    self, default_cache_dir, emit_citations, get_and_merge, list_datasets, Cache, Catalog, CatalogError,
    DefaultTransport,
};
use forge_core::langid::{normalize_lang_detailed, parse_pair, LangError};
use forge_core::parsers::ParseError;
use forge_core::pipeline::{
    self, clean_files, encode_to_db, read_heldout, run_pipeline, summarize_epoch, train_vocab_files, PipelineConfig,
    PipelineError, StageError,
};
use forge_core::store::{self, db_stats, BatchOptions, Db, StoreError};
use forge_core::textprep::{tokenize, CleanConfig, CleanError};
use forge_core::vocab::{Scheme, Vocab, VocabError};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(
    name = "forge",
    version,
    about = "Parallel corpus preparation: fetch, clean, encode, store, batch"
)]
struct Cli {
    /// Threads for parallel work (default: all cores).
    #[arg(long, global = true, env = "FORGE_WORKERS")]
    workers: Option<usize>,
    /// Download cache directory.
    #[arg(long, global = true, env = "FORGE_CACHE")]
    cache_dir: Option<PathBuf>,
    /// Catalog directory holding index.tsv and citations.bib.
    #[arg(long, global = true, env = "FORGE_CATALOG")]
    catalog: Option<PathBuf>,
    /// On failure, print a JSON error object to stderr.
    #[arg(long, global = true)]
    error_json: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resolve language codes or names to ISO 639-3.
    Iso {
        #[arg(required = true)]
        tokens: Vec<String>,
    },
    /// List datasets for a language pair.
    List {
        #[arg(short = 'l', long = "langs")]
        pair: String,
        /// Only ids containing this text.
        #[arg(short = 'n', long = "name")]
        name: Option<String>,
        /// Also print the BibTeX of each dataset.
        #[arg(long)]
        full: bool,
    },
    /// Download, check and merge datasets.
    Get(GetArgs),
    /// Clean a parallel corpus.
    Clean(CleanArgs),
    /// Train and apply vocabularies.
    Vocab {
        #[command(subcommand)]
        command: VocabCommand,
    },
    /// Write, inspect and sample sharded databases.
    Db {
        #[command(subcommand)]
        command: DbCommand,
    },
    /// Run every stage from a config file.
    Pipeline {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Summarize a database, a pipeline output directory or a text file.
    Stats { path: PathBuf },
}

#[derive(Args, Debug)]
struct GetArgs {
    #[arg(short = 'l', long = "langs")]
    pair: String,
    /// Merge all training datasets into train.src/train.tgt (the only mode).
    #[arg(long)]
    merge: bool,
    /// Training dataset ids, written `-tr`.
    #[arg(long = "tr", num_args = 1.., required = true)]
    train: Vec<String>,
    /// Held-out dataset ids, written `-ts`.
    #[arg(long = "ts", num_args = 1..)]
    tests: Vec<String>,
    #[arg(short = 'o', long = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CleanArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Directory of held-out `<name>.src`/`<name>.tgt` pairs.
    #[arg(long)]
    heldout_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// TOML file with cleaning settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_ratio: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    nonascii_max_frac: Option<f64>,
    /// Replace the URL patterns (repeatable).
    #[arg(long = "url-pattern")]
    url_patterns: Vec<String>,
    /// Fail on side length mismatch instead of truncating.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand, Debug)]
enum VocabCommand {
    Train {
        #[arg(long, default_value = "bpe")]
        scheme: Scheme,
        /// Target number of types (ignored for char).
        #[arg(long, default_value_t = 8000)]
        size: usize,
        #[arg(long = "in", value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train on every line instead of distinct lines.
        #[arg(long)]
        no_dedup: bool,
    },
    /// Text lines on stdin to space-separated ids on stdout.
    Encode {
        #[arg(long)]
        model: PathBuf,
    },
    /// Space-separated ids on stdin to text lines on stdout.
    Decode {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum DbCommand {
    Write {
        #[arg(long)]
        src_model: PathBuf,
        #[arg(long)]
        tgt_model: PathBuf,
        /// `train.src,train.tgt`
        #[arg(long = "in", value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 4)]
        shards: usize,
        #[arg(long)]
        out: PathBuf,
    },
    Stats {
        dir: PathBuf,
    },
    /// Plan one epoch of batches and print them.
    Sample {
        dir: PathBuf,
        #[arg(long, default_value_t = store::DEFAULT_MAX_TOKENS)]
        max_toks: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = store::DEFAULT_BUCKET_WIDTH)]
        bucket_width: usize,
        /// Batches to print before the summary.
        #[arg(long, default_value_t = 10)]
        show: usize,
    },
}

/// A failure with its process exit code: 2 configuration or usage,
/// 3 data, 4 network. Code 0 is a closed stdout and exits quietly.
#[derive(Debug)]
struct Failure {
    code: u8,
    stage: Option<String>,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            stage: None,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }

    fn data(message: impl Into<String>) -> Self {
        Self::new(3, message)
    }
}

fn catalog_code(e: &CatalogError) -> u8 {
    match e {
        _ if e.is_network() => 4,
        CatalogError::UnknownDataset(_)
        | CatalogError::InvalidSelection(_)
        | CatalogError::PairMismatch { .. }
        | CatalogError::Lang(_) => 2,
        _ => 3,
    }
}

impl From<CatalogError> for Failure {
    fn from(e: CatalogError) -> Self {
        Failure::new(catalog_code(&e), e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            stage: e.stage().map(String::from),
            message: e.to_string(),
        }
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure::new(pipeline::stage_exit_code(&e) as u8, e.to_string())
    }
}

impl From<LangError> for Failure {
    fn from(e: LangError) -> Self {
        Failure::usage(e.to_string())
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::from(StageError::from(e))
    }
}

impl From<VocabError> for Failure {
    fn from(e: VocabError) -> Self {
        Failure::from(StageError::from(e))
    }
}

impl From<CleanError> for Failure {
    fn from(e: CleanError) -> Self {
        Failure::from(StageError::from(e))
    }
}

impl From<ParseError> for Failure {
    fn from(e: ParseError) -> Self {
        Failure::data(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::BrokenPipe {
            return Failure::new(0, String::new());
        }
        Failure::data(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// `-tr`/`-ts` are multi-letter single-dash flags; clap wants them long.
fn rewrite_args(args: impl IntoIterator<Item = String>) -> Vec<String> {
    args.into_iter()
        .map(|a| match a.as_str() {
            "-tr" => "--tr".to_string(),
            "-ts" => "--ts".to_string(),
            _ => a,
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(rewrite_args(std::env::args())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.workers {
        if n == 0 {
            return report(&cli, Failure::usage("--workers must be at least 1"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return report(&cli, Failure::usage(e.to_string()));
        }
    }

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&cli, f),
    }
}

fn report(cli: &Cli, f: Failure) -> ExitCode {
    if f.code == 0 {
        return ExitCode::SUCCESS;
    }
    if cli.error_json {
        let obj = json!({ "error": f.message, "exit_code": f.code, "stage": f.stage });
        eprintln!("{obj}");
    } else {
        eprintln!("forge: {}", f.message);
    }
    ExitCode::from(f.code)
}

fn load_catalog(cli: &Cli) -> Result<Catalog, Failure> {
    match &cli.catalog {
        Some(dir) => Catalog::from_dir(dir).map_err(|e| Failure::usage(e.to_string())),
        None => Ok(Catalog::bundled().clone()),
    }
}

fn cache(cli: &Cli) -> Cache {
    let root = cli.cache_dir.clone().unwrap_or_else(default_cache_dir);
    Cache::new(root, Arc::new(DefaultTransport::default()))
}

fn print_json(value: &impl serde::Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::data(e.to_string()))?;
    writeln!(io::stdout().lock(), "{text}")?;
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Iso { tokens } => {
            let mut out = io::stdout().lock();
            for t in tokens {
                let n = normalize_lang_detailed(t)?;
                writeln!(out, "{}\t{}", n.lang.code(), n.lang.name())?;
            }
            Ok(())
        }
        Command::List { pair, name, full } => {
            let pair = parse_pair(pair)?;
            let catalog = load_catalog(cli)?;
            let mut out = io::stdout().lock();
            for e in list_datasets(&catalog.index, &pair, name.as_deref()) {
                writeln!(out, "{}\t{}\t{}\t{}", e.id, e.pair, e.format, e.url)?;
                if *full {
                    writeln!(out, "{}", emit_citations([e], &catalog.bib)?)?;
                }
            }
            Ok(())
        }
        Command::Get(args) => get(cli, args),
        Command::Clean(args) => clean(args),
        Command::Vocab { command } => vocab(command),
        Command::Db { command } => db(command),
        Command::Pipeline { config, out } => {
            let mut cfg = PipelineConfig::load(config)?;
            if cfg.catalog.is_none() {
                cfg.catalog = cli.catalog.clone();
            }
            let report = run_pipeline(&cfg, &cache(cli), out)?;
            print_json(&report)
        }
        Command::Stats { path } => stats(path),
    }
}

fn get(cli: &Cli, args: &GetArgs) -> CmdResult {
    if !args.merge {
        log::info!("merged output is the only mode; --merge is implied");
    }
    let pair = parse_pair(&args.pair)?;
    let catalog = load_catalog(cli)?;
    let report = get_and_merge(&catalog, &cache(cli), pair, &args.train, &args.tests, &args.out)?;
    for (id, check) in &report.checks {
        eprintln!("{id}: {check}");
    }
    writeln!(
        io::stdout().lock(),
        "{}",
        args.out.join(catalog::SIGNATURE_FILE).display()
    )?;
    Ok(())
}

fn heldout_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>, Failure> {
    let mut srcs: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "src"))
        .collect();
    srcs.sort();
    srcs.into_iter()
        .map(|s| {
            let t = s.with_extension("tgt");
            if t.is_file() {
                Ok((s, t))
            } else {
                Err(Failure::data(format!("{} has no .tgt sibling", s.display())))
            }
        })
        .collect()
}

fn clean(args: &CleanArgs) -> CmdResult {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str::<CleanConfig>(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => CleanConfig::default(),
    };
    if let Some(v) = args.max_ratio {
        cfg.max_ratio = v;
    }
    if let Some(v) = args.max_len {
        cfg.max_len = v;
    }
    if let Some(v) = args.nonascii_max_frac {
        cfg.nonascii_max_frac = v;
    }
    if !args.url_patterns.is_empty() {
        cfg.url_patterns = args.url_patterns.clone();
    }
    cfg.strict |= args.strict;

    let heldout = match &args.heldout_dir {
        Some(d) => read_heldout(&heldout_pairs(d)?)?,
        None => Vec::new(),
    };
    fs::create_dir_all(&args.out_dir)?;
    let name = |p: &Path| {
        p.file_name()
            .map(PathBuf::from)
            .ok_or_else(|| Failure::usage("input path has no file name"))
    };
    let (out_src, out_tgt) = (args.out_dir.join(name(&args.src)?), args.out_dir.join(name(&args.tgt)?));
    if out_src == out_tgt {
        return Err(Failure::usage("source and target inputs share a file name"));
    }
    for (input, output) in [(&args.src, &out_src), (&args.tgt, &out_tgt)] {
        if output.exists() && fs::canonicalize(input)? == fs::canonicalize(output)? {
            return Err(Failure::usage("--out-dir would overwrite the inputs"));
        }
    }
    let stats = clean_files(&args.src, &args.tgt, &heldout, &cfg, &out_src, &out_tgt)?;
    let json = serde_json::to_vec_pretty(&stats).map_err(|e| Failure::data(e.to_string()))?;
    forge_core::digest::write_atomic(&args.out_dir.join("clean.stats.json"), &json)?;
    print_json(&stats)
}

fn vocab(cmd: &VocabCommand) -> CmdResult {
    match cmd {
        VocabCommand::Train {
            scheme,
            size,
            inputs,
            out,
            no_dedup,
        } => {
            let v = train_vocab_files(*scheme, *size, inputs, !no_dedup)?;
            v.save(out)?;
            eprintln!("{} types, {} merges", v.len(), v.merges().len());
            Ok(())
        }
        VocabCommand::Encode { model } => {
            let v = Vocab::load(model)?;
            let mut out = BufWriter::new(io::stdout().lock());
            for line in io::stdin().lock().lines() {
                let ids = v.encode(&line?);
                let text: Vec<String> = ids.iter().map(u32::to_string).collect();
                writeln!(out, "{}", text.join(" "))?;
            }
            out.flush()?;
            Ok(())
        }
        VocabCommand::Decode { model } => {
            let v = Vocab::load(model)?;
            let mut out = BufWriter::new(io::stdout().lock());
            for (i, line) in io::stdin().lock().lines().enumerate() {
                let line = line?;
                let ids = line
                    .split_whitespace()
                    .map(str::parse::<u32>)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| Failure::data(format!("line {}: {e}", i + 1)))?;
                writeln!(out, "{}", v.decode(&ids)?)?;
            }
            out.flush()?;
            Ok(())
        }
    }
}

fn db(cmd: &DbCommand) -> CmdResult {
    match cmd {
        DbCommand::Write {
            src_model,
            tgt_model,
            inputs,
            shards,
            out,
        } => {
            let [src, tgt] = inputs.as_slice() else {
                return Err(Failure::usage("--in takes exactly two files: SRC,TGT"));
            };
            let sv = Vocab::load(src_model)?;
            let tv = Vocab::load(tgt_model)?;
            let meta = encode_to_db(&sv, &tv, src, tgt, *shards, out)?;
            print_json(&meta)
        }
        DbCommand::Stats { dir } => print_json(&db_stats(&Db::open(dir)?)?),
        DbCommand::Sample {
            dir,
            max_toks,
            seed,
            bucket_width,
            show,
        } => {
            let db = Db::open(dir)?;
            let opts = BatchOptions {
                max_toks: *max_toks,
                seed: *seed,
                bucket_width: *bucket_width,
            };
            let loaded = db.load()?;
            let mut out = io::stdout().lock();
            for (i, b) in loaded.batch_iter(&opts)?.take(*show).enumerate() {
                let idx: Vec<String> = b.indices.iter().map(usize::to_string).collect();
                writeln!(
                    out,
                    "batch {i}\t{} records\tsrc {}\ttgt {}\t{}",
                    b.len(),
                    b.src_padded,
                    b.tgt_padded,
                    idx.join(",")
                )?;
            }
            drop(out);
            print_json(&summarize_epoch(&db, &opts)?)
        }
    }
}

fn stats(path: &Path) -> CmdResult {
    if path.join(store::META_FILE).is_file() {
        return print_json(&db_stats(&Db::open(path)?)?);
    }
    if path.join(pipeline::MANIFEST_FILE).is_file() {
        let text = fs::read_to_string(path.join(pipeline::MANIFEST_FILE))?;
        let manifest: serde_json::Value = serde_json::from_str(&text).map_err(|e| Failure::data(e.to_string()))?;
        let clean: Option<serde_json::Value> = fs::read_to_string(path.join("clean/clean.stats.json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        let db = Db::open(&path.join("db")).ok().map(|d| db_stats(&d)).transpose()?;
        return print_json(&json!({
            "manifest_digest": pipeline::manifest_digest(path)?,
            "stages": manifest["stages"].as_object().map(|m| m.keys().cloned().collect::<Vec<_>>()),
            "clean": clean,
            "db": db,
        }));
    }
    if path.is_file() {
        let mut lines = 0u64;
        let mut tokens = 0u64;
        let mut max_tokens = 0u64;
        for line in io::BufReader::new(fs::File::open(path)?).lines() {
            let n = tokenize(&line?).len() as u64;
            lines += 1;
            tokens += n;
            max_tokens = max_tokens.max(n);
        }
        return print_json(&json!({ "lines": lines, "tokens": tokens, "max_tokens": max_tokens }));
    }
    Err(Failure::usage(format!(
        "{}: not a database, pipeline output or file",
        path.display()
    )))
}
