//! End-to-end corpus preparation with content-keyed stage caching.
//!
//! Stages run in order `get`, `clean`, `vocab`, `db`, `sample`. Each writes
//! into `<out>/<stage>.tmp/` and is renamed to `<out>/<stage>/` on success,
//! together with a `stamp.json` recording the stage key (a digest of the
//! stage config and of its inputs) and digests of its outputs. A later run
//! whose key matches and whose outputs still verify skips the stage.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::catalog::{get_and_merge, Cache, Catalog, CatalogError, TOOL_VERSION};
use crate::digest::{sha256_file, sha256_hex, write_atomic};
use crate::langid::{LangPair, REGISTRY_VERSION};
use crate::parsers::SegmentPair;
use crate::store::{self, db_write_from, BatchOptions, Db, DbMeta, Record, StoreError};
use crate::textprep::{CleanConfig, CleanError, CleanStats, Cleaner};
use crate::vocab::{
    dedup_lines, train_bpe, train_char, train_word, Scheme, Vocab, VocabError, DEFAULT_SRC_BPE_TYPES,
    DEFAULT_TGT_BPE_TYPES,
};

pub const STAMP_FILE: &str = "stamp.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const STAGES: [&str; 5] = ["get", "clean", "vocab", "db", "sample"];

const ENCODE_CHUNK: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub scheme: Scheme,
    pub src_size: usize,
    pub tgt_size: usize,
    /// Train on distinct lines only.
    pub dedup: bool,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Bpe,
            src_size: DEFAULT_SRC_BPE_TYPES,
            tgt_size: DEFAULT_TGT_BPE_TYPES,
            dedup: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbConfig {
    pub shards: usize,
    pub max_toks: usize,
    pub seed: u64,
    pub bucket_width: usize,
}

impl Default for DbConfig {
    fn default() -> Self {
        Self {
            shards: 4,
            max_toks: store::DEFAULT_MAX_TOKENS,
            seed: 1,
            bucket_width: store::DEFAULT_BUCKET_WIDTH,
        }
    }
}

/// All settings for one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub pair: LangPair,
    pub train: Vec<String>,
    #[serde(default)]
    pub tests: Vec<String>,
    /// Directory with `index.tsv` and `citations.bib`; the bundled catalog
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    #[serde(default)]
    pub clean: CleanConfig,
    #[serde(default)]
    pub vocab: VocabConfig,
    #[serde(default)]
    pub db: DbConfig,
}

impl PipelineConfig {
    pub fn new(pair: LangPair, train: Vec<String>) -> Self {
        Self {
            pair,
            train,
            tests: Vec::new(),
            catalog: None,
            clean: CleanConfig::default(),
            vocab: VocabConfig::default(),
            db: DbConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.train.is_empty() {
            return bad("no training datasets listed".into());
        }
        self.clean
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.vocab.scheme != Scheme::Char && (self.vocab.src_size == 0 || self.vocab.tgt_size == 0) {
            return bad("vocabulary sizes must be positive".into());
        }
        if self.db.shards == 0 {
            return bad("db.shards must be at least 1".into());
        }
        if self.db.bucket_width == 0 {
            return bad("db.bucket_width must be at least 1".into());
        }
        Ok(())
    }

    fn batch_options(&self) -> BatchOptions {
        BatchOptions {
            max_toks: self.db.max_toks,
            seed: self.db.seed,
            bucket_width: self.db.bucket_width,
        }
    }
}

/// Failure inside one stage.
#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Clean(#[from] CleanError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StageError + '_ {
    move |source| StageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: StageError,
    },
}

impl PipelineError {
    /// 2 for configuration problems, 4 for network failures, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { source, .. } => stage_exit_code(source),
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            PipelineError::Stage { stage, .. } => Some(stage),
            PipelineError::Config(_) => None,
        }
    }
}

pub fn stage_exit_code(e: &StageError) -> i32 {
    match e {
        StageError::Catalog(c) if c.is_network() => 4,
        StageError::Catalog(
            CatalogError::UnknownDataset(_) | CatalogError::InvalidSelection(_) | CatalogError::PairMismatch { .. },
        ) => 2,
        StageError::Clean(CleanError::Config(_) | CleanError::Pattern(_)) => 2,
        StageError::Vocab(VocabError::TargetTooSmall { .. }) => 2,
        StageError::Store(StoreError::Config(_) | StoreError::SequenceTooLong { .. }) => 2,
        _ => 3,
    }
}

/// Reads aligned lines from two files. A count mismatch is an error when
/// `strict`, otherwise the excess is dropped with a warning.
pub struct PairFileReader {
    src: io::Lines<BufReader<File>>,
    tgt: io::Lines<BufReader<File>>,
    src_path: PathBuf,
    line_no: u64,
    strict: bool,
    done: bool,
}

impl PairFileReader {
    pub fn open(src: &Path, tgt: &Path, strict: bool) -> Result<Self, StageError> {
        let open = |p: &Path| -> Result<_, StageError> {
            Ok(BufReader::with_capacity(1 << 16, File::open(p).map_err(io_err(p))?).lines())
        };
        Ok(Self {
            src: open(src)?,
            tgt: open(tgt)?,
            src_path: src.to_path_buf(),
            line_no: 0,
            strict,
            done: false,
        })
    }
}

impl Iterator for PairFileReader {
    type Item = Result<SegmentPair, StageError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        self.line_no += 1;
        let item = match (self.src.next(), self.tgt.next()) {
            (None, None) => None,
            (Some(Ok(s)), Some(Ok(t))) => Some(Ok(SegmentPair {
                src: s,
                tgt: t,
                origin_id: String::new(),
                line_no: self.line_no,
            })),
            (Some(Err(e)), _) | (_, Some(Err(e))) => Some(Err(io_err(&self.src_path)(e))),
            _ if self.strict => Some(Err(StageError::Data(format!(
                "{}: sides differ in length at line {}",
                self.src_path.display(),
                self.line_no
            )))),
            _ => {
                log::warn!(
                    "{}: sides differ in length at line {}; ignoring the rest",
                    self.src_path.display(),
                    self.line_no
                );
                None
            }
        };
        if !matches!(item, Some(Ok(_))) {
            self.done = true;
        }
        item
    }
}

/// Held-out pairs from `(src, tgt)` file pairs.
pub fn read_heldout(files: &[(PathBuf, PathBuf)]) -> Result<Vec<SegmentPair>, StageError> {
    let mut out = Vec::new();
    for (s, t) in files {
        for p in PairFileReader::open(s, t, false)? {
            out.push(p?);
        }
    }
    Ok(out)
}

/// Clean a file pair into `out_src`/`out_tgt`.
pub fn clean_files(
    src: &Path,
    tgt: &Path,
    heldout: &[SegmentPair],
    cfg: &CleanConfig,
    out_src: &Path,
    out_tgt: &Path,
) -> Result<CleanStats, StageError> {
    let mut cleaner = Cleaner::new(cfg.clone(), heldout)?;
    let mut reader = PairFileReader::open(src, tgt, cfg.strict)?;
    let create = |p: &Path| -> Result<_, StageError> {
        Ok(BufWriter::with_capacity(1 << 16, File::create(p).map_err(io_err(p))?))
    };
    let (mut ws, mut wt) = (create(out_src)?, create(out_tgt)?);
    loop {
        let chunk = reader.by_ref().take(cfg.chunk_size).collect::<Result<Vec<_>, _>>()?;
        if chunk.is_empty() {
            break;
        }
        for p in cleaner.process_chunk(chunk) {
            writeln!(ws, "{}", p.src).map_err(io_err(out_src))?;
            writeln!(wt, "{}", p.tgt).map_err(io_err(out_tgt))?;
        }
    }
    ws.flush().map_err(io_err(out_src))?;
    wt.flush().map_err(io_err(out_tgt))?;
    Ok(cleaner.stats())
}

fn read_lines(path: &Path) -> Result<Vec<String>, StageError> {
    let f = File::open(path).map_err(io_err(path))?;
    BufReader::new(f)
        .lines()
        .collect::<io::Result<_>>()
        .map_err(io_err(path))
}

/// Train a vocabulary on the lines of `paths`, optionally keeping only the
/// first occurrence of each line.
pub fn train_vocab_files(scheme: Scheme, size: usize, paths: &[PathBuf], dedup: bool) -> Result<Vocab, StageError> {
    let mut lines = Vec::new();
    for p in paths {
        lines.extend(read_lines(p)?);
    }
    if dedup {
        lines = dedup_lines(lines).collect();
    }
    let vocab = match scheme {
        Scheme::Char => train_char(&lines)?,
        Scheme::Word => train_word(&lines, size)?,
        Scheme::Bpe => train_bpe(&lines, size)?,
    };
    Ok(vocab)
}

/// Streams encoded records from two text files, encoding a chunk at a time
/// in parallel.
pub struct EncodedPairs<'a> {
    reader: PairFileReader,
    src_vocab: &'a Vocab,
    tgt_vocab: &'a Vocab,
    buffer: std::collections::VecDeque<Record>,
    index: u64,
    failed: bool,
}

impl<'a> EncodedPairs<'a> {
    pub fn open(src_vocab: &'a Vocab, tgt_vocab: &'a Vocab, src: &Path, tgt: &Path) -> Result<Self, StageError> {
        Ok(Self {
            reader: PairFileReader::open(src, tgt, true)?,
            src_vocab,
            tgt_vocab,
            buffer: Default::default(),
            index: 0,
            failed: false,
        })
    }
}

impl Iterator for EncodedPairs<'_> {
    type Item = Result<Record, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.buffer.is_empty() {
            if self.failed {
                return None;
            }
            let chunk = match self.reader.by_ref().take(ENCODE_CHUNK).collect::<Result<Vec<_>, _>>() {
                Ok(c) => c,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(StoreError::Input {
                        record: self.index,
                        message: e.to_string(),
                    }));
                }
            };
            if chunk.is_empty() {
                return None;
            }
            let (sv, tv) = (self.src_vocab, self.tgt_vocab);
            let encoded: Vec<Record> = chunk
                .par_iter()
                .map(|p| Record::new(sv.encode(&p.src).0, tv.encode(&p.tgt).0))
                .collect();
            self.buffer.extend(encoded);
        }
        self.index += 1;
        self.buffer.pop_front().map(Ok)
    }
}

/// Encode a text pair with two vocabularies and store it as a sharded db.
pub fn encode_to_db(
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    src: &Path,
    tgt: &Path,
    n_shards: usize,
    out_dir: &Path,
) -> Result<DbMeta, StageError> {
    let meta = DbMeta::new(src_vocab.len() as u64, tgt_vocab.len() as u64)?;
    let records = EncodedPairs::open(src_vocab, tgt_vocab, src, tgt)?;
    Ok(db_write_from(records, meta, n_shards, out_dir)?)
}

/// Summary of one epoch of batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub seed: u64,
    pub max_toks: usize,
    pub n_records: u64,
    pub n_batches: u64,
    pub max_src_padded: usize,
    pub max_tgt_padded: usize,
    pub mean_batch_size: f64,
}

pub fn summarize_epoch(db: &Db, opts: &BatchOptions) -> Result<EpochSummary, StageError> {
    let loaded = db.load()?;
    let mut s = EpochSummary {
        seed: opts.seed,
        max_toks: opts.max_toks,
        n_records: 0,
        n_batches: 0,
        max_src_padded: 0,
        max_tgt_padded: 0,
        mean_batch_size: 0.0,
    };
    for b in loaded.batch_iter(opts)? {
        s.n_batches += 1;
        s.n_records += b.len() as u64;
        s.max_src_padded = s.max_src_padded.max(b.src_padded);
        s.max_tgt_padded = s.max_tgt_padded.max(b.tgt_padded);
    }
    if s.n_batches > 0 {
        s.mean_batch_size = s.n_records as f64 / s.n_batches as f64;
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    key: String,
    outputs: BTreeMap<String, String>,
}

fn list_files(dir: &Path, prefix: &str, out: &mut Vec<String>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let rel = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}/{name}")
        };
        if entry.file_type()?.is_dir() {
            list_files(&entry.path(), &rel, out)?;
        } else if name != STAMP_FILE {
            out.push(rel);
        }
    }
    Ok(())
}

fn digest_outputs(dir: &Path) -> io::Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    list_files(dir, "", &mut files)?;
    files
        .into_iter()
        .map(|rel| Ok((rel.clone(), sha256_file(&dir.join(&rel))?)))
        .collect()
}

fn read_stamp(dir: &Path) -> Option<Stamp> {
    let text = fs::read_to_string(dir.join(STAMP_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

fn canonical_digest(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())
}

/// Per-stage outcome of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub key: String,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub stages: Vec<StageReport>,
    pub manifest_digest: String,
    pub clean_stats: CleanStats,
}

impl RunReport {
    pub fn all_cached(&self) -> bool {
        self.stages.iter().all(|s| s.cache_hit)
    }
}

struct Runner<'a> {
    out: &'a Path,
    stages: Vec<StageReport>,
    stamps: BTreeMap<String, Stamp>,
}

impl Runner<'_> {
    /// Run `body` into a fresh `<stage>.tmp/` unless a valid stamp for `key` exists.
    fn stage(
        &mut self,
        name: &'static str,
        key_input: serde_json::Value,
        body: impl FnOnce(&Path) -> Result<(), StageError>,
    ) -> Result<(), PipelineError> {
        let wrap = |source| PipelineError::Stage { stage: name, source };
        let key = canonical_digest(&json!({
            "stage": name,
            "tool_version": TOOL_VERSION,
            "inputs": key_input,
        }));
        let dir = self.out.join(name);
        if let Some(stamp) = read_stamp(&dir) {
            let valid = stamp.key == key && digest_outputs(&dir).is_ok_and(|current| current == stamp.outputs);
            if valid {
                log::info!("stage {name}: cached");
                self.stages.push(StageReport {
                    stage: name.into(),
                    key,
                    cache_hit: true,
                });
                self.stamps.insert(name.into(), stamp);
                return Ok(());
            }
        }

        log::info!("stage {name}: running");
        let tmp = self.out.join(format!("{name}.tmp"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| wrap(io_err(&tmp)(e)))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| wrap(io_err(&tmp)(e)))?;
        body(&tmp).map_err(wrap)?;

        let outputs = digest_outputs(&tmp).map_err(|e| wrap(io_err(&tmp)(e)))?;
        let stamp = Stamp {
            stage: name.into(),
            key: key.clone(),
            outputs,
        };
        let stamp_json = serde_json::to_vec_pretty(&stamp).expect("stamp serializes");
        let stamp_path = tmp.join(STAMP_FILE);
        write_atomic(&stamp_path, &stamp_json).map_err(|e| wrap(io_err(&stamp_path)(e)))?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| wrap(io_err(&dir)(e)))?;
        }
        fs::rename(&tmp, &dir).map_err(|e| wrap(io_err(&dir)(e)))?;
        self.stages.push(StageReport {
            stage: name.into(),
            key,
            cache_hit: false,
        });
        self.stamps.insert(name.into(), stamp);
        Ok(())
    }

    fn outputs(&self, stage: &str) -> &BTreeMap<String, String> {
        &self.stamps[stage].outputs
    }
}

/// Run every stage of `cfg` into `out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig, cache: &Cache, out_dir: &Path) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let owned;
    let catalog = match &cfg.catalog {
        Some(dir) => {
            owned = Catalog::from_dir(dir).map_err(|e| PipelineError::Config(e.to_string()))?;
            &owned
        }
        None => Catalog::bundled(),
    };
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::Config(format!("{}: {e}", out_dir.display())))?;
    let resolved = cfg.to_toml();
    write_atomic(&out_dir.join(RESOLVED_CONFIG_FILE), resolved.as_bytes())
        .map_err(|e| PipelineError::Config(format!("{}: {e}", out_dir.display())))?;

    let mut run = Runner {
        out: out_dir,
        stages: Vec::new(),
        stamps: BTreeMap::new(),
    };

    // Selected entries are part of the key, so index edits invalidate `get`.
    let entries: Vec<serde_json::Value> = cfg
        .train
        .iter()
        .chain(&cfg.tests)
        .map(|id| match catalog.index.get(id) {
            Ok(e) => serde_json::to_value(e).expect("entry serializes"),
            Err(_) => json!({ "id": id, "missing": true }),
        })
        .collect();
    run.stage(
        "get",
        json!({
            "pair": cfg.pair,
            "train": cfg.train,
            "tests": cfg.tests,
            "entries": entries,
            "registry": REGISTRY_VERSION,
        }),
        |dir| {
            get_and_merge(catalog, cache, cfg.pair, &cfg.train, &cfg.tests, dir)?;
            Ok(())
        },
    )?;

    let get_dir = out_dir.join("get");
    let mut clean_stats = CleanStats::default();
    run.stage(
        "clean",
        json!({ "config": cfg.clean, "inputs": run.outputs("get") }),
        |dir| {
            let heldout_files: Vec<(PathBuf, PathBuf)> = cfg
                .tests
                .iter()
                .map(|id| {
                    let base = get_dir.join("tests");
                    (base.join(format!("{id}.src")), base.join(format!("{id}.tgt")))
                })
                .collect();
            let heldout = read_heldout(&heldout_files)?;
            let stats = clean_files(
                &get_dir.join("train.src"),
                &get_dir.join("train.tgt"),
                &heldout,
                &cfg.clean,
                &dir.join("train.src"),
                &dir.join("train.tgt"),
            )?;
            let p = dir.join("clean.stats.json");
            write_atomic(&p, &serde_json::to_vec_pretty(&stats).expect("stats serialize")).map_err(io_err(&p))?;
            Ok(())
        },
    )?;
    let clean_dir = out_dir.join("clean");
    if let Ok(text) = fs::read_to_string(clean_dir.join("clean.stats.json")) {
        clean_stats = serde_json::from_str(&text).unwrap_or_default();
    }

    run.stage(
        "vocab",
        json!({ "config": cfg.vocab, "inputs": run.outputs("clean") }),
        |dir| {
            let v = &cfg.vocab;
            let (src, tgt) = rayon::join(
                || train_vocab_files(v.scheme, v.src_size, &[clean_dir.join("train.src")], v.dedup),
                || train_vocab_files(v.scheme, v.tgt_size, &[clean_dir.join("train.tgt")], v.dedup),
            );
            src?.save(&dir.join("src.model"))?;
            tgt?.save(&dir.join("tgt.model"))?;
            Ok(())
        },
    )?;
    let vocab_dir = out_dir.join("vocab");

    run.stage(
        "db",
        json!({
            "shards": cfg.db.shards,
            "vocab": run.outputs("vocab"),
            "inputs": run.outputs("clean"),
        }),
        |dir| {
            let sv = Vocab::load(&vocab_dir.join("src.model"))?;
            let tv = Vocab::load(&vocab_dir.join("tgt.model"))?;
            encode_to_db(
                &sv,
                &tv,
                &clean_dir.join("train.src"),
                &clean_dir.join("train.tgt"),
                cfg.db.shards,
                dir,
            )?;
            Ok(())
        },
    )?;

    let db_dir = out_dir.join("db");
    run.stage(
        "sample",
        json!({ "batch": cfg.batch_options(), "inputs": run.outputs("db") }),
        |dir| {
            let db = Db::open(&db_dir)?;
            let summary = summarize_epoch(&db, &cfg.batch_options())?;
            let p = dir.join("epoch.json");
            write_atomic(&p, &serde_json::to_vec_pretty(&summary).expect("summary serializes")).map_err(io_err(&p))?;
            Ok(())
        },
    )?;

    let manifest = json!({
        "tool_version": TOOL_VERSION,
        "config": serde_json::to_value(cfg).expect("config serializes"),
        "stages": STAGES
            .iter()
            .map(|s| (s.to_string(), json!({ "key": run.stamps[*s].key, "outputs": run.stamps[*s].outputs })))
            .collect::<serde_json::Map<_, _>>(),
    });
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let manifest_digest = sha256_hex(text.as_bytes());
    write_atomic(&out_dir.join(MANIFEST_FILE), text.as_bytes())
        .map_err(|e| PipelineError::Config(format!("{}: {e}", out_dir.display())))?;

    Ok(RunReport {
        out_dir: out_dir.to_path_buf(),
        stages: run.stages,
        manifest_digest,
        clean_stats,
    })
}

/// Digest of an existing `manifest.json`.
pub fn manifest_digest(out_dir: &Path) -> io::Result<String> {
    sha256_file(&out_dir.join(MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = PipelineConfig::new("deu-eng".parse().unwrap(), vec!["a".into(), "b".into()]);
        cfg.tests = vec!["t".into()];
        cfg.clean.max_ratio = 2.5;
        cfg.vocab.scheme = Scheme::Word;
        cfg.catalog = Some(PathBuf::from("/x/y"));
        let text = cfg.to_toml();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = PipelineConfig::from_toml("pair = \"de-en\"\ntrain = [\"x\"]\n").unwrap();
        assert_eq!(cfg.pair.to_string(), "deu-eng");
        assert_eq!(cfg.db.max_toks, 18_000);
        assert_eq!(cfg.vocab.src_size, 512_000);
        assert_eq!(cfg.vocab.tgt_size, 64_000);
        assert_eq!(cfg.clean, CleanConfig::default());
    }

    #[test]
    fn config_errors_exit_2() {
        for text in [
            "pair = \"de-en\"\ntrain = []\n",
            "pair = \"de-en\"\ntrain = [\"x\"]\nbogus = 1\n",
            "pair = \"xx-en\"\ntrain = [\"x\"]\n",
            "pair = \"de-en\"\ntrain = [\"x\"]\n[db]\nshards = 0\n",
        ] {
            let err = PipelineConfig::from_toml(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn pair_reader_strictness() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("a"), dir.path().join("b"));
        fs::write(&s, "1\n2\n3\n").unwrap();
        fs::write(&t, "x\ny\n").unwrap();
        let lax: Vec<_> = PairFileReader::open(&s, &t, false).unwrap().collect();
        assert_eq!(lax.len(), 2);
        assert!(lax.iter().all(Result::is_ok));
        let strict: Vec<_> = PairFileReader::open(&s, &t, true).unwrap().collect();
        assert_eq!(strict.len(), 3);
        assert!(strict[2].is_err());
    }
}
