//! Dataset index, download cache, merge with sanity checks, signatures and
//! citations.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::{sha256_and_lines, sha256_file, sha256_hex, write_atomic};
use crate::langid::{normalize_lang, LangCode, LangError, LangPair, REGISTRY_VERSION};
use crate::parsers::{parse, FormatTag, ParseError, ParseOptions, ParseStats, SegmentPair};

const BUNDLED_INDEX: &str = include_str!("../data/index.tsv");
const BUNDLED_BIB: &str = include_str!("../data/citations.bib");

pub const TOOL_VERSION: &str = concat!("forge ", env!("CARGO_PKG_VERSION"));
pub const CHECKSUM_FILE: &str = "checksum.sha256";
pub const SIGNATURE_FILE: &str = "signature.json";
pub const CITATIONS_FILE: &str = "citations.bib";

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("unknown dataset id {0:?}")]
    UnknownDataset(String),
    #[error("invalid selection: {0}")]
    InvalidSelection(String),
    #[error("dataset {id} is {found}, not {wanted} in either direction")]
    PairMismatch { id: String, found: String, wanted: String },
    #[error("index line {line}: {reason}")]
    BadIndex { line: usize, reason: String },
    #[error("bibliography: {0}")]
    BadBib(String),
    #[error("no citation for key {0:?}")]
    MissingCitation(String),
    #[error("download of {url} failed: {cause}")]
    DownloadFailed { url: String, cause: String },
    #[error("checksum mismatch for {url}: expected {expected}, got {actual}")]
    ChecksumMismatch {
        url: String,
        expected: String,
        actual: String,
    },
    #[error("sanity check failed for {id}: {report}")]
    SanityCheckFailed { id: String, report: CheckReport },
    #[error("signature check failed for {file}: {reason}")]
    SignatureMismatch { file: String, reason: String },
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CatalogError {
    /// True for failures caused by the network rather than the data.
    pub fn is_network(&self) -> bool {
        matches!(
            self,
            CatalogError::DownloadFailed { .. } | CatalogError::ChecksumMismatch { .. }
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CatalogError + '_ {
    move |source| CatalogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub pair: LangPair,
    pub url: String,
    pub format: FormatTag,
    pub citation_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

/// The dataset index: a tab-separated file with columns
/// `id src tgt url format citation_key [sha256]`.
#[derive(Debug, Clone, Default)]
pub struct Index {
    entries: Vec<DatasetEntry>,
    by_id: HashMap<String, usize>,
}

impl Index {
    pub fn parse(text: &str) -> Result<Self, CatalogError> {
        let mut entries: Vec<DatasetEntry> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: String| CatalogError::BadIndex { line: i + 1, reason };
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !(6..=7).contains(&cols.len()) {
                return Err(bad(format!("expected 6 or 7 columns, found {}", cols.len())));
            }
            let lang = |raw: &str| normalize_lang(raw).map_err(|e| bad(e.to_string()));
            let sha256 = cols
                .get(6)
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(str::to_ascii_lowercase);
            entries.push(DatasetEntry {
                id: cols[0].trim().to_string(),
                pair: LangPair::new(lang(cols[1])?, lang(cols[2])?),
                url: cols[3].trim().to_string(),
                format: cols[4].trim().parse().map_err(|e: ParseError| bad(e.to_string()))?,
                citation_key: cols[5].trim().to_string(),
                sha256,
            });
        }
        Self::from_entries(entries)
    }

    pub fn from_entries(mut entries: Vec<DatasetEntry>) -> Result<Self, CatalogError> {
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.id.is_empty() || e.id.chars().any(char::is_whitespace) {
                return Err(CatalogError::InvalidSelection(format!("bad dataset id {:?}", e.id)));
            }
            if by_id.insert(e.id.clone(), i).is_some() {
                return Err(CatalogError::InvalidSelection(format!(
                    "duplicate dataset id {:?}",
                    e.id
                )));
            }
        }
        Ok(Self { entries, by_id })
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Result<&DatasetEntry, CatalogError> {
        self.by_id
            .get(id)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| CatalogError::UnknownDataset(id.to_string()))
    }
}

/// BibTeX records keyed by citation key, kept verbatim.
#[derive(Debug, Clone, Default)]
pub struct Bibliography {
    records: BTreeMap<String, String>,
}

impl Bibliography {
    pub fn parse(text: &str) -> Result<Self, CatalogError> {
        let mut records = BTreeMap::new();
        let mut rest = text;
        while let Some(at) = rest.find('@') {
            let body = &rest[at..];
            let open = body
                .find('{')
                .ok_or_else(|| CatalogError::BadBib("record without '{'".into()))?;
            let mut depth = 0usize;
            let mut end = None;
            for (i, c) in body.char_indices().skip(open) {
                match c {
                    '{' => depth += 1,
                    '}' => {
                        depth -= 1;
                        if depth == 0 {
                            end = Some(i);
                            break;
                        }
                    }
                    _ => {}
                }
            }
            let end = end.ok_or_else(|| CatalogError::BadBib("unbalanced braces".into()))?;
            let record = &body[..=end];
            let key = record[open + 1..]
                .split(',')
                .next()
                .map(str::trim)
                .filter(|k| !k.is_empty())
                .ok_or_else(|| CatalogError::BadBib(format!("record without key: {record:.40}")))?;
            if records.insert(key.to_string(), record.to_string()).is_some() {
                return Err(CatalogError::BadBib(format!("duplicate key {key:?}")));
            }
            rest = &body[end + 1..];
        }
        Ok(Self { records })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.records.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }
}

/// An index together with the bibliography its entries cite.
#[derive(Debug, Clone)]
pub struct Catalog {
    pub index: Index,
    pub bib: Bibliography,
}

impl Catalog {
    pub fn bundled() -> &'static Catalog {
        static CATALOG: OnceLock<Catalog> = OnceLock::new();
        CATALOG.get_or_init(|| Catalog {
            index: Index::parse(BUNDLED_INDEX).expect("bundled index parses"),
            bib: Bibliography::parse(BUNDLED_BIB).expect("bundled bibliography parses"),
        })
    }

    /// Load `index.tsv` and `citations.bib` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Catalog, CatalogError> {
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(io_err(&path))
        };
        Ok(Catalog {
            index: Index::parse(&read("index.tsv")?)?,
            bib: Bibliography::parse(&read(CITATIONS_FILE)?)?,
        })
    }
}

/// Entries whose pair matches `pair` in either direction, optionally
/// restricted to ids containing `name_substring`, in id order.
pub fn list_datasets<'a>(index: &'a Index, pair: &LangPair, name_substring: Option<&str>) -> Vec<&'a DatasetEntry> {
    index
        .entries()
        .iter()
        .filter(|e| e.pair.matches_either_way(pair))
        .filter(|e| name_substring.is_none_or(|s| e.id.contains(s)))
        .collect()
}

/// BibTeX for the given entries, one record per distinct key, ordered by
/// the first entry id citing it.
pub fn emit_citations<'a>(
    entries: impl IntoIterator<Item = &'a DatasetEntry>,
    bib: &Bibliography,
) -> Result<String, CatalogError> {
    let mut sorted: Vec<&DatasetEntry> = entries.into_iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut seen = HashSet::new();
    let mut out = String::new();
    for e in sorted {
        if !seen.insert(e.citation_key.as_str()) {
            continue;
        }
        let record = bib
            .get(&e.citation_key)
            .ok_or_else(|| CatalogError::MissingCitation(e.citation_key.clone()))?;
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(record);
        out.push('\n');
    }
    Ok(out)
}

/// Moves bytes from a URL into a writer.
pub trait Transport: Send + Sync {
    /// Copy the resource at `url` into `out`, returning its declared length
    /// when the source states one.
    fn download(&self, url: &str, out: &mut dyn Write) -> io::Result<Option<u64>>;
}

/// Reads `file://` URLs and plain paths.
#[derive(Debug, Default, Clone, Copy)]
pub struct FileTransport;

impl Transport for FileTransport {
    fn download(&self, url: &str, out: &mut dyn Write) -> io::Result<Option<u64>> {
        let path = url.strip_prefix("file://").unwrap_or(url);
        let mut f = File::open(path)?;
        let declared = f.metadata()?.len();
        io::copy(&mut f, out)?;
        Ok(Some(declared))
    }
}

#[derive(Debug, Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self {
            agent: ureq::AgentBuilder::new()
                .user_agent(TOOL_VERSION)
                .timeout_connect(std::time::Duration::from_secs(30))
                .build(),
        }
    }
}

impl Transport for HttpTransport {
    fn download(&self, url: &str, out: &mut dyn Write) -> io::Result<Option<u64>> {
        let resp = self
            .agent
            .get(url)
            .call()
            .map_err(|e| io::Error::other(e.to_string()))?;
        let declared = resp.header("Content-Length").and_then(|v| v.trim().parse::<u64>().ok());
        io::copy(&mut resp.into_reader(), out)?;
        Ok(declared)
    }
}

/// Dispatches on the URL scheme.
#[derive(Debug, Default, Clone)]
pub struct DefaultTransport {
    http: HttpTransport,
}

impl Transport for DefaultTransport {
    fn download(&self, url: &str, out: &mut dyn Write) -> io::Result<Option<u64>> {
        if url.starts_with("http://") || url.starts_with("https://") {
            self.http.download(url, out)
        } else {
            FileTransport.download(url, out)
        }
    }
}

/// `$FORGE_CACHE`, else `$XDG_CACHE_HOME/forge`, else `~/.cache/forge`.
pub fn default_cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("FORGE_CACHE").filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    if let Some(dir) = std::env::var_os("XDG_CACHE_HOME").filter(|v| !v.is_empty()) {
        return PathBuf::from(dir).join("forge");
    }
    match std::env::var_os("HOME") {
        Some(home) => PathBuf::from(home).join(".cache").join("forge"),
        None => PathBuf::from(".forge-cache"),
    }
}

/// A URL-keyed download cache: `<root>/<sha256(url)>/` holds the payload
/// files and a `checksum.sha256` listing their digests.
#[derive(Clone)]
pub struct Cache {
    root: PathBuf,
    transport: Arc<dyn Transport>,
}

impl std::fmt::Debug for Cache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cache").field("root", &self.root).finish()
    }
}

fn url_basename(url: &str) -> String {
    let path = url.split(['?', '#']).next().unwrap_or(url);
    let name = path.rsplit('/').next().unwrap_or("");
    let clean: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    if clean.is_empty() || clean.starts_with('.') || clean == CHECKSUM_FILE {
        format!("payload{clean}")
    } else {
        clean
    }
}

/// For a bare Moses entry the URL names the source-side file; the target
/// side sits next to it with the same style of language label.
fn moses_sibling_url(entry: &DatasetEntry) -> Result<String, CatalogError> {
    let bad = || CatalogError::InvalidSelection(format!("{}: moses url must end in a language label", entry.id));
    let (base, label) = entry.url.rsplit_once('.').ok_or_else(bad)?;
    if label.contains('/') || normalize_lang(label).ok() != Some(entry.pair.src) {
        return Err(bad());
    }
    let tgt: LangCode = entry.pair.tgt;
    let tgt_label = match label.len() {
        2 => tgt.code1().unwrap_or(tgt.code()),
        _ => tgt.code(),
    };
    Ok(format!("{base}.{tgt_label}"))
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>, transport: Arc<dyn Transport>) -> Self {
        Self {
            root: root.into(),
            transport,
        }
    }

    /// A cache at [`default_cache_dir`] using network and file transports.
    pub fn from_env() -> Self {
        Self::new(default_cache_dir(), Arc::new(DefaultTransport::default()))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn object_dir(&self, url: &str) -> PathBuf {
        self.root.join(sha256_hex(url.as_bytes()))
    }

    /// Local path of `entry`'s payload, downloading only when the cache has
    /// no valid copy.
    pub fn fetch(&self, entry: &DatasetEntry) -> Result<PathBuf, CatalogError> {
        let mut urls = vec![entry.url.clone()];
        if entry.format == FormatTag::MosesPair {
            urls.push(moses_sibling_url(entry)?);
        }
        let dir = self.object_dir(&entry.url);
        let payload = dir.join(url_basename(&entry.url));

        if self.verify_object(&dir, &urls, entry.sha256.as_deref()) {
            log::debug!("cache hit for {} at {}", entry.id, dir.display());
            return Ok(payload);
        }
        if dir.exists() {
            log::warn!(
                "cache object for {} is incomplete or corrupt; downloading again",
                entry.id
            );
        }
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let tmp = tempfile::Builder::new()
            .prefix(".fetch-")
            .tempdir_in(&self.root)
            .map_err(io_err(&self.root))?;
        let mut manifest = String::new();
        for (i, url) in urls.iter().enumerate() {
            let name = url_basename(url);
            let dest = tmp.path().join(&name);
            let expected = if i == 0 { entry.sha256.as_deref() } else { None };
            let digest = self.download_verified(url, &dest, expected)?;
            manifest.push_str(&format!("{digest}  {name}\n"));
        }
        write_atomic(&tmp.path().join(CHECKSUM_FILE), manifest.as_bytes()).map_err(io_err(tmp.path()))?;

        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let staged = tmp.keep();
        if let Err(e) = fs::rename(&staged, &dir) {
            let _ = fs::remove_dir_all(&staged);
            // a concurrent fetcher may have committed the same object
            if !self.verify_object(&dir, &urls, entry.sha256.as_deref()) {
                return Err(io_err(&dir)(e));
            }
        }
        Ok(payload)
    }

    fn download_verified(&self, url: &str, dest: &Path, expected: Option<&str>) -> Result<String, CatalogError> {
        let mut last_cause = String::new();
        let mut mismatch = None;
        for attempt in 0..2 {
            if attempt > 0 {
                log::warn!("retrying {url}: {last_cause}");
            }
            let outcome = (|| -> io::Result<(Option<u64>, u64)> {
                let mut w = BufWriter::new(File::create(dest)?);
                let declared = self.transport.download(url, &mut w)?;
                w.flush()?;
                drop(w);
                Ok((declared, fs::metadata(dest)?.len()))
            })();
            match outcome {
                Err(e) => last_cause = e.to_string(),
                Ok((Some(declared), got)) if declared != got => {
                    last_cause = format!("truncated: {got} of {declared} bytes");
                }
                Ok(_) => {
                    let actual = sha256_file(dest).map_err(io_err(dest))?;
                    match expected {
                        Some(want) if want != actual => {
                            last_cause = format!("checksum {actual} != {want}");
                            mismatch = Some((want.to_string(), actual));
                        }
                        _ => return Ok(actual),
                    }
                }
            }
        }
        match mismatch {
            Some((expected, actual)) => Err(CatalogError::ChecksumMismatch {
                url: url.to_string(),
                expected,
                actual,
            }),
            None => Err(CatalogError::DownloadFailed {
                url: url.to_string(),
                cause: last_cause,
            }),
        }
    }

    fn verify_object(&self, dir: &Path, urls: &[String], expected: Option<&str>) -> bool {
        let Ok(manifest) = fs::read_to_string(dir.join(CHECKSUM_FILE)) else {
            return false;
        };
        let recorded: HashMap<&str, &str> = manifest
            .lines()
            .filter_map(|l| l.split_once("  "))
            .map(|(d, n)| (n, d))
            .collect();
        urls.iter().enumerate().all(|(i, url)| {
            let name = url_basename(url);
            let Some(&digest) = recorded.get(name.as_str()) else {
                return false;
            };
            if i == 0 && expected.is_some_and(|e| e != digest) {
                return false;
            }
            sha256_file(&dir.join(&name)).is_ok_and(|d| d == digest)
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub n_read: u64,
    pub n_empty_removed: u64,
    pub n_count_mismatch: u64,
    pub n_parse_skipped: u64,
    pub ok: bool,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} read, {} empty removed, {} unmatched segments, {} unparseable",
            self.n_read, self.n_empty_removed, self.n_count_mismatch, self.n_parse_skipped
        )
    }
}

/// Incremental form of [`sanity_check`] for parsed streams.
#[derive(Debug, Default)]
pub struct SanityChecker {
    report: CheckReport,
}

impl SanityChecker {
    /// Count `pair` and say whether it survives.
    pub fn keep(&mut self, pair: &SegmentPair) -> bool {
        self.report.n_read += 1;
        let empty = pair.src.trim().is_empty() || pair.tgt.trim().is_empty();
        if empty {
            self.report.n_empty_removed += 1;
        }
        !empty
    }

    pub fn finish(mut self, stats: &ParseStats) -> CheckReport {
        self.report.n_count_mismatch += stats.n_count_mismatch;
        self.report.n_parse_skipped += stats.n_skipped;
        self.report.ok = self.report.n_count_mismatch == 0;
        self.report
    }
}

/// Pair up two sides, dropping pairs with a blank side.
pub fn sanity_check<S: AsRef<str>>(src_lines: &[S], tgt_lines: &[S]) -> (Vec<(String, String)>, CheckReport) {
    let mut checker = SanityChecker::default();
    let mut kept = Vec::new();
    for (s, t) in src_lines.iter().zip(tgt_lines) {
        let pair = SegmentPair::new(s.as_ref(), t.as_ref());
        if checker.keep(&pair) {
            kept.push((pair.src, pair.tgt));
        }
    }
    let stats = ParseStats {
        n_count_mismatch: src_lines.len().abs_diff(tgt_lines.len()) as u64,
        ..ParseStats::default()
    };
    (kept, checker.finish(&stats))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub sha256: String,
    pub lines: u64,
}

/// Everything needed to recreate a merged corpus and check that it was.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub tool_version: String,
    pub registry_version: String,
    pub pair: LangPair,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub files: BTreeMap<String, FileDigest>,
}

impl Signature {
    /// Canonical JSON: sorted keys, two-space indent, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("signature serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_canonical_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CatalogError::SignatureMismatch {
            file: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// Recompute every listed file under `dir` and compare.
    pub fn verify(&self, dir: &Path) -> Result<(), CatalogError> {
        for (name, want) in &self.files {
            let path = dir.join(name);
            let (sha256, lines) = sha256_and_lines(&path).map_err(|e| CatalogError::SignatureMismatch {
                file: name.clone(),
                reason: e.to_string(),
            })?;
            if sha256 != want.sha256 || lines != want.lines {
                return Err(CatalogError::SignatureMismatch {
                    file: name.clone(),
                    reason: format!(
                        "digest {sha256} ({lines} lines), recorded {} ({} lines)",
                        want.sha256, want.lines
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Load `signature.json` from a merged directory and verify it.
pub fn verify_signature(dir: &Path) -> Result<Signature, CatalogError> {
    let sig = Signature::load(&dir.join(SIGNATURE_FILE))?;
    sig.verify(dir)?;
    Ok(sig)
}

/// Per-dataset outcome of a merge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    pub signature: Signature,
    pub checks: BTreeMap<String, CheckReport>,
}

struct PairWriter {
    src: BufWriter<File>,
    tgt: BufWriter<File>,
}

impl PairWriter {
    fn create(src: &Path, tgt: &Path) -> Result<Self, CatalogError> {
        let open = |p: &Path| File::create(p).map(BufWriter::new).map_err(io_err(p));
        Ok(Self {
            src: open(src)?,
            tgt: open(tgt)?,
        })
    }

    fn write(&mut self, p: &SegmentPair) -> io::Result<()> {
        self.src.write_all(p.src.as_bytes())?;
        self.src.write_all(b"\n")?;
        self.tgt.write_all(p.tgt.as_bytes())?;
        self.tgt.write_all(b"\n")
    }

    fn finish(mut self) -> io::Result<()> {
        self.src.flush()?;
        self.tgt.flush()
    }
}

/// Parse one dataset oriented as `wanted`, streaming checked pairs into `out`.
fn copy_checked(
    entry: &DatasetEntry,
    payload: &Path,
    wanted: LangPair,
    out: &mut PairWriter,
    out_path: &Path,
) -> Result<CheckReport, CatalogError> {
    let swap = entry.pair != wanted;
    let mut stream = parse(payload, &entry.format, &entry.id, entry.pair, ParseOptions::default())?;
    let mut checker = SanityChecker::default();
    for pair in stream.by_ref() {
        let pair = pair?;
        let pair = if swap { pair.swapped() } else { pair };
        if checker.keep(&pair) {
            out.write(&pair).map_err(io_err(out_path))?;
        }
    }
    let report = checker.finish(&stream.stats());
    if !report.ok {
        return Err(CatalogError::SanityCheckFailed {
            id: entry.id.clone(),
            report,
        });
    }
    if report.n_empty_removed > 0 {
        log::warn!(
            "{}: removed {} pairs with an empty side",
            entry.id,
            report.n_empty_removed
        );
    }
    Ok(report)
}

/// Fetch, check and merge datasets into `out_dir`.
///
/// Training datasets are concatenated in the given order into
/// `train.src`/`train.tgt`; each test dataset goes to `tests/<id>.src` and
/// `tests/<id>.tgt`. Datasets listed in the opposite direction are swapped.
/// `signature.json` and `citations.bib` are written last.
pub fn get_and_merge(
    catalog: &Catalog,
    cache: &Cache,
    pair: LangPair,
    train_ids: &[String],
    test_ids: &[String],
    out_dir: &Path,
) -> Result<MergeReport, CatalogError> {
    if train_ids.is_empty() {
        return Err(CatalogError::InvalidSelection("no training datasets selected".into()));
    }
    let mut seen = HashSet::new();
    for id in train_ids.iter().chain(test_ids) {
        if !seen.insert(id.as_str()) {
            return Err(CatalogError::InvalidSelection(format!("dataset {id:?} selected twice")));
        }
    }
    let resolve = |ids: &[String]| -> Result<Vec<&DatasetEntry>, CatalogError> {
        ids.iter()
            .map(|id| {
                let e = catalog.index.get(id)?;
                if !e.pair.matches_either_way(&pair) {
                    return Err(CatalogError::PairMismatch {
                        id: id.clone(),
                        found: e.pair.to_string(),
                        wanted: pair.to_string(),
                    });
                }
                Ok(e)
            })
            .collect()
    };
    let train = resolve(train_ids)?;
    let tests = resolve(test_ids)?;
    let all: Vec<&DatasetEntry> = train.iter().chain(&tests).copied().collect();
    let citations = emit_citations(all.iter().copied(), &catalog.bib)?;

    let payloads: Vec<PathBuf> = all.par_iter().map(|e| cache.fetch(e)).collect::<Result<_, _>>()?;
    let (train_payloads, test_payloads) = payloads.split_at(train.len());

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let staging = tempfile::Builder::new()
        .prefix(".merge-")
        .tempdir_in(out_dir)
        .map_err(io_err(out_dir))?;
    let stage = staging.path();
    let mut checks = BTreeMap::new();

    let (ts, tt) = (stage.join("train.src"), stage.join("train.tgt"));
    let mut w = PairWriter::create(&ts, &tt)?;
    for (e, payload) in train.iter().zip(train_payloads) {
        checks.insert(e.id.clone(), copy_checked(e, payload, pair, &mut w, &ts)?);
    }
    w.finish().map_err(io_err(&ts))?;

    fs::create_dir_all(stage.join("tests")).map_err(io_err(stage))?;
    for (e, payload) in tests.iter().zip(test_payloads) {
        let s = stage.join("tests").join(format!("{}.src", e.id));
        let t = stage.join("tests").join(format!("{}.tgt", e.id));
        let mut w = PairWriter::create(&s, &t)?;
        checks.insert(e.id.clone(), copy_checked(e, payload, pair, &mut w, &s)?);
        w.finish().map_err(io_err(&s))?;
    }

    let mut names = vec!["train.src".to_string(), "train.tgt".to_string()];
    for e in &tests {
        names.push(format!("tests/{}.src", e.id));
        names.push(format!("tests/{}.tgt", e.id));
    }
    let mut files = BTreeMap::new();
    for name in &names {
        let path = stage.join(name);
        let (sha256, lines) = sha256_and_lines(&path).map_err(io_err(&path))?;
        files.insert(name.clone(), FileDigest { sha256, lines });
    }
    let signature = Signature {
        tool_version: TOOL_VERSION.to_string(),
        registry_version: REGISTRY_VERSION.to_string(),
        pair,
        train_ids: train_ids.to_vec(),
        test_ids: test_ids.to_vec(),
        files,
    };

    // move finished files into place; the signature goes last
    let final_tests = out_dir.join("tests");
    if final_tests.exists() {
        fs::remove_dir_all(&final_tests).map_err(io_err(&final_tests))?;
    }
    for name in ["train.src", "train.tgt", "tests"] {
        let (from, to) = (stage.join(name), out_dir.join(name));
        fs::rename(&from, &to).map_err(io_err(&to))?;
    }
    let bib_path = out_dir.join(CITATIONS_FILE);
    write_atomic(&bib_path, citations.as_bytes()).map_err(io_err(&bib_path))?;
    let sig_path = out_dir.join(SIGNATURE_FILE);
    write_atomic(&sig_path, signature.to_canonical_json().as_bytes()).map_err(io_err(&sig_path))?;
    Ok(MergeReport { signature, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_catalog_is_consistent() {
        let cat = Catalog::bundled();
        assert!(!cat.index.entries().is_empty());
        for e in cat.index.entries() {
            assert!(cat.bib.get(&e.citation_key).is_some(), "{}", e.id);
        }
        let deu_eng: LangPair = "deu-eng".parse().unwrap();
        let europarl = list_datasets(&cat.index, &deu_eng, Some("europarl"));
        assert_eq!(europarl.len(), 1);
        assert_eq!(europarl[0].id, "europarl_v10_deueng");
    }

    #[test]
    fn index_rejects_bad_rows() {
        assert!(matches!(
            Index::parse("a\tdeu\teng\tu\ttsv\n"),
            Err(CatalogError::BadIndex { line: 1, .. })
        ));
        assert!(matches!(
            Index::parse("a\tdeu\txx9\tu\ttsv\tk\n"),
            Err(CatalogError::BadIndex { line: 1, .. })
        ));
        let dup = "a\tdeu\teng\tu\ttsv\tk\na\tdeu\teng\tv\ttsv\tk\n";
        assert!(matches!(Index::parse(dup), Err(CatalogError::InvalidSelection(_))));
    }

    #[test]
    fn sanity_examples() {
        let (kept, r) = sanity_check(&["a", "b", "c", "d", "e"], &["1", "2", " ", "4", "5"]);
        assert_eq!(kept.len(), 4);
        assert_eq!((r.n_empty_removed, r.ok), (1, true));
        let (_, r) = sanity_check(&["a", "b", "c", "d", "e"], &["1", "2", "3", "4"]);
        assert_eq!((r.n_count_mismatch, r.ok), (1, false));
        let (kept, r) = sanity_check::<&str>(&[], &[]);
        assert!(kept.is_empty() && r.ok && r.n_read == 0);
    }

    #[test]
    fn basenames() {
        assert_eq!(url_basename("https://x/y/de-en.tmx.gz?raw=1"), "de-en.tmx.gz");
        assert_eq!(url_basename("https://x/"), "payload");
        assert_eq!(url_basename("file:///tmp/a b.tsv"), "a_b.tsv");
    }

    #[test]
    fn moses_sibling_keeps_label_style() {
        let mk = |url: &str| DatasetEntry {
            id: "x".into(),
            pair: "deu-eng".parse().unwrap(),
            url: url.into(),
            format: FormatTag::MosesPair,
            citation_key: "k".into(),
            sha256: None,
        };
        assert_eq!(moses_sibling_url(&mk("file:///d/c.de")).unwrap(), "file:///d/c.en");
        assert_eq!(moses_sibling_url(&mk("file:///d/c.deu")).unwrap(), "file:///d/c.eng");
        assert!(moses_sibling_url(&mk("file:///d/c.fr")).is_err());
    }
}
