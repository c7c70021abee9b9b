//! Streaming readers that turn dataset payloads into [`SegmentPair`]s.
//!
//! Supported layouts:
//!
//! * `moses`: two sibling plain-text files `<stem>.<src>` / `<stem>.<tgt>`,
//!   one segment per line, where the extensions are any language label the
//!   registry understands (`de`, `deu`, `German`...).
//! * `tsv`: one pair per line, split on the first TAB.
//! * `tmx`: translation memory; each `<tu>` contributes the `<seg>` text of
//!   the `<tuv>` elements whose `xml:lang` matches the requested languages.
//! * archives: `.gz` (single stream, decoded on the fly) and `.zip`
//!   (extracted next to the payload once, then searched for the inner file).
//!
//! New formats plug in by adding a [`FormatTag`] variant and a reader that
//! implements the private `PairSource` trait.
//!
//! Input bytes are decoded as UTF-8 with replacement; every line (or TMX
//! segment) that needed a replacement is counted in [`ParseStats`].

use std::borrow::Cow;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::MultiGzDecoder;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::langid::{normalize_lang, LangCode, LangPair};

const MAX_ARCHIVE_DEPTH: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("{origin}:{line_no}: {reason}")]
    Malformed {
        origin: String,
        line_no: u64,
        reason: String,
    },
    #[error("unknown format for {0:?}")]
    UnknownFormat(String),
    #[error("bad format tag {0:?}")]
    BadTag(String),
    #[error("{origin}: {reason}")]
    Layout { origin: String, reason: String },
    #[error("{origin}: i/o error: {source}")]
    Io {
        origin: String,
        #[source]
        source: io::Error,
    },
}

impl ParseError {
    fn io(origin: &str, source: io::Error) -> Self {
        ParseError::Io {
            origin: origin.to_string(),
            source,
        }
    }

    fn layout(origin: &str, reason: impl Into<String>) -> Self {
        ParseError::Layout {
            origin: origin.to_string(),
            reason: reason.into(),
        }
    }
}

/// One aligned sentence pair with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentPair {
    pub src: String,
    pub tgt: String,
    pub origin_id: String,
    pub line_no: u64,
}

impl SegmentPair {
    pub fn new(src: impl Into<String>, tgt: impl Into<String>) -> Self {
        SegmentPair {
            src: flatten_lines(src.into()),
            tgt: flatten_lines(tgt.into()),
            origin_id: String::new(),
            line_no: 0,
        }
    }

    pub fn swapped(self) -> Self {
        SegmentPair {
            src: self.tgt,
            tgt: self.src,
            ..self
        }
    }
}

fn flatten_lines(mut s: String) -> String {
    if s.contains(['\n', '\r']) {
        s = s.replace("\r\n", " ").replace(['\n', '\r'], " ");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchiveKind {
    Gzip,
    Zip,
}

impl ArchiveKind {
    fn extension(self) -> &'static str {
        match self {
            ArchiveKind::Gzip => "gz",
            ArchiveKind::Zip => "zip",
        }
    }
}

/// How a payload is laid out on disk.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FormatTag {
    MosesPair,
    Tsv,
    Tmx,
    ArchiveOf { kind: ArchiveKind, inner: Box<FormatTag> },
}

impl FormatTag {
    pub fn archive(kind: ArchiveKind, inner: FormatTag) -> Self {
        FormatTag::ArchiveOf {
            kind,
            inner: Box::new(inner),
        }
    }

    pub fn archive_depth(&self) -> usize {
        match self {
            FormatTag::ArchiveOf { inner, .. } => 1 + inner.archive_depth(),
            _ => 0,
        }
    }

    fn base(&self) -> &FormatTag {
        match self {
            FormatTag::ArchiveOf { inner, .. } => inner.base(),
            other => other,
        }
    }
}

/// Written as the extension chain, e.g. `tsv`, `tmx.gz`, `moses.zip`.
impl fmt::Display for FormatTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatTag::MosesPair => f.write_str("moses"),
            FormatTag::Tsv => f.write_str("tsv"),
            FormatTag::Tmx => f.write_str("tmx"),
            FormatTag::ArchiveOf { kind, inner } => write!(f, "{inner}.{}", kind.extension()),
        }
    }
}

impl FromStr for FormatTag {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.trim().split('.');
        let mut tag = match parts.next().map(str::to_ascii_lowercase).as_deref() {
            Some("moses") => FormatTag::MosesPair,
            Some("tsv") => FormatTag::Tsv,
            Some("tmx") => FormatTag::Tmx,
            _ => return Err(ParseError::BadTag(s.to_string())),
        };
        for ext in parts {
            let kind = match ext.to_ascii_lowercase().as_str() {
                "gz" => ArchiveKind::Gzip,
                "zip" => ArchiveKind::Zip,
                _ => return Err(ParseError::BadTag(s.to_string())),
            };
            tag = FormatTag::archive(kind, tag);
        }
        if tag.archive_depth() > MAX_ARCHIVE_DEPTH {
            return Err(ParseError::BadTag(s.to_string()));
        }
        Ok(tag)
    }
}

impl Serialize for FormatTag {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FormatTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Guess the format of `path` from its extensions.
///
/// A file with no recognised extension is treated as one side of a Moses
/// pair only if its extension is a language label and a sibling with the
/// same stem and a different language extension exists.
pub fn detect_format(path: &Path) -> Result<FormatTag, ParseError> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    detect_format_with(&name, |stem| has_language_sibling(path, stem))
}

/// Filename-only variant of [`detect_format`]; `sibling_exists` is asked
/// whether a Moses sibling exists for a given stem.
pub fn detect_format_with(
    filename: &str,
    mut sibling_exists: impl FnMut(&str) -> bool,
) -> Result<FormatTag, ParseError> {
    detect_inner(filename, &mut sibling_exists, 0).ok_or_else(|| ParseError::UnknownFormat(filename.to_string()))
}

fn detect_inner(name: &str, sibling_exists: &mut dyn FnMut(&str) -> bool, depth: usize) -> Option<FormatTag> {
    let (stem, ext) = name.rsplit_once('.')?;
    match ext.to_ascii_lowercase().as_str() {
        "tsv" => Some(FormatTag::Tsv),
        "tmx" => Some(FormatTag::Tmx),
        "gz" | "zip" if depth < MAX_ARCHIVE_DEPTH => {
            let kind = if ext.eq_ignore_ascii_case("gz") {
                ArchiveKind::Gzip
            } else {
                ArchiveKind::Zip
            };
            // A bare `x.zip` usually holds Moses siblings.
            let inner = match detect_inner(stem, sibling_exists, depth + 1) {
                Some(inner) => inner,
                None if kind == ArchiveKind::Zip => FormatTag::MosesPair,
                None => return None,
            };
            Some(FormatTag::archive(kind, inner))
        }
        _ if normalize_lang(ext).is_ok() && sibling_exists(stem) => Some(FormatTag::MosesPair),
        _ => None,
    }
}

fn has_language_sibling(path: &Path, stem: &str) -> bool {
    let own = path.file_name().map(|n| n.to_os_string());
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let Ok(entries) = fs::read_dir(dir) else {
        return false;
    };
    entries.flatten().any(|e| {
        let name = e.file_name();
        if Some(&name) == own.as_ref() {
            return false;
        }
        let name = name.to_string_lossy();
        matches!(name.rsplit_once('.'), Some((s, ext)) if s == stem && normalize_lang(ext).is_ok())
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Abort on the first malformed row instead of skipping and counting it.
    pub strict: bool,
}

/// Counters accumulated while a stream is consumed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub n_pairs: u64,
    pub n_skipped: u64,
    pub n_invalid_utf8: u64,
    /// Lines left over on the longer side of a Moses pair.
    pub n_count_mismatch: u64,
}

trait PairSource {
    fn next_pair(&mut self, stats: &mut ParseStats) -> Option<Result<SegmentPair, ParseError>>;
}

/// A lazily-read stream of pairs from one payload.
pub struct SegmentStream {
    source: Box<dyn PairSource + Send>,
    stats: ParseStats,
    strict: bool,
    done: bool,
}

impl SegmentStream {
    fn new(source: Box<dyn PairSource + Send>, opts: ParseOptions) -> Self {
        SegmentStream {
            source,
            stats: ParseStats::default(),
            strict: opts.strict,
            done: false,
        }
    }

    pub fn stats(&self) -> ParseStats {
        self.stats
    }
}

impl Iterator for SegmentStream {
    type Item = Result<SegmentPair, ParseError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            match self.source.next_pair(&mut self.stats) {
                None => self.done = true,
                Some(Ok(pair)) => {
                    self.stats.n_pairs += 1;
                    return Some(Ok(pair));
                }
                Some(Err(e @ ParseError::Malformed { .. })) if !self.strict => {
                    log::debug!("skipping row: {e}");
                    self.stats.n_skipped += 1;
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
        None
    }
}

/// Open `payload` as a stream of pairs oriented as `pair`.
///
/// For Moses and TMX the languages select which side is which; TSV columns
/// are taken in file order.
pub fn parse(
    payload: &Path,
    tag: &FormatTag,
    origin_id: &str,
    pair: LangPair,
    opts: ParseOptions,
) -> Result<SegmentStream, ParseError> {
    if tag.archive_depth() > MAX_ARCHIVE_DEPTH {
        return Err(ParseError::BadTag(tag.to_string()));
    }
    let source = open_source(payload, tag, origin_id, pair)?;
    Ok(SegmentStream::new(source, opts))
}

fn open_source(
    payload: &Path,
    tag: &FormatTag,
    origin: &str,
    pair: LangPair,
) -> Result<Box<dyn PairSource + Send>, ParseError> {
    match tag {
        FormatTag::MosesPair => {
            let (src, tgt) = locate_moses_pair(payload, pair, origin)?;
            Ok(Box::new(MosesSource::open(&src, &tgt, origin)?))
        }
        FormatTag::Tsv | FormatTag::Tmx => {
            let file = File::open(payload).map_err(|e| ParseError::io(origin, e))?;
            Ok(reader_source(Box::new(BufReader::new(file)), tag, origin, pair))
        }
        FormatTag::ArchiveOf {
            kind: ArchiveKind::Gzip,
            inner,
        } => {
            let file = File::open(payload).map_err(|e| ParseError::io(origin, e))?;
            let reader = decompressed(Box::new(BufReader::new(file)), inner, origin)?;
            Ok(reader_source(reader, inner.base(), origin, pair))
        }
        FormatTag::ArchiveOf {
            kind: ArchiveKind::Zip,
            inner,
        } => {
            let dir = extract_zip(payload, origin)?;
            let member = find_member(&dir, inner, pair, origin)?;
            open_source(&member, inner, origin, pair)
        }
    }
}

/// Peel gzip layers off a single stream. Zip inside gzip is not supported.
fn decompressed(
    reader: Box<dyn BufRead + Send>,
    inner: &FormatTag,
    origin: &str,
) -> Result<Box<dyn BufRead + Send>, ParseError> {
    let gz: Box<dyn BufRead + Send> = Box::new(BufReader::new(MultiGzDecoder::new(reader)));
    match inner {
        FormatTag::Tsv | FormatTag::Tmx => Ok(gz),
        FormatTag::ArchiveOf {
            kind: ArchiveKind::Gzip,
            inner,
        } => decompressed(gz, inner, origin),
        other => Err(ParseError::layout(
            origin,
            format!("{other} cannot be read from a single gzip stream"),
        )),
    }
}

fn reader_source(
    reader: Box<dyn BufRead + Send>,
    tag: &FormatTag,
    origin: &str,
    pair: LangPair,
) -> Box<dyn PairSource + Send> {
    match tag {
        FormatTag::Tmx => Box::new(TmxSource::new(reader, origin, pair)),
        _ => Box::new(TsvSource {
            lines: LineReader::new(reader),
            origin: origin.to_string(),
        }),
    }
}

/// Extracts `payload` into `<payload>.d/` once; later calls reuse it.
fn extract_zip(payload: &Path, origin: &str) -> Result<PathBuf, ParseError> {
    let mut target = payload.as_os_str().to_os_string();
    target.push(".d");
    let target = PathBuf::from(target);
    if target.is_dir() {
        return Ok(target);
    }
    let parent = payload.parent().unwrap_or(Path::new("."));
    let tmp = tempfile::Builder::new()
        .prefix(".unzip-")
        .tempdir_in(parent)
        .map_err(|e| ParseError::io(origin, e))?;
    let file = File::open(payload).map_err(|e| ParseError::io(origin, e))?;
    let mut archive =
        zip::ZipArchive::new(file).map_err(|e| ParseError::layout(origin, format!("bad zip archive: {e}")))?;
    archive
        .extract(tmp.path())
        .map_err(|e| ParseError::layout(origin, format!("zip extraction failed: {e}")))?;
    let tmp = tmp.keep();
    if let Err(e) = fs::rename(&tmp, &target) {
        // Another extractor may have won the race.
        let _ = fs::remove_dir_all(&tmp);
        if !target.is_dir() {
            return Err(ParseError::io(origin, e));
        }
    }
    Ok(target)
}

fn walk_files(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn find_member(dir: &Path, inner: &FormatTag, pair: LangPair, origin: &str) -> Result<PathBuf, ParseError> {
    if *inner == FormatTag::MosesPair {
        return Ok(dir.to_path_buf());
    }
    let mut files = Vec::new();
    walk_files(dir, &mut files).map_err(|e| ParseError::io(origin, e))?;
    files.sort();
    let suffix = format!(".{inner}");
    files
        .into_iter()
        .find(|f| f.to_string_lossy().to_ascii_lowercase().ends_with(&suffix))
        .ok_or_else(|| ParseError::layout(origin, format!("no *{suffix} member for {pair} in archive")))
}

/// Locate the `<stem>.<src>` / `<stem>.<tgt>` siblings for `payload`, which
/// may be a directory or either one of the two files.
fn locate_moses_pair(payload: &Path, pair: LangPair, origin: &str) -> Result<(PathBuf, PathBuf), ParseError> {
    if pair.src == pair.tgt {
        return Err(ParseError::layout(origin, "moses layout needs two distinct languages"));
    }
    let (dir, wanted_stem) = if payload.is_dir() {
        (payload.to_path_buf(), None)
    } else {
        let stem = payload
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.rsplit_once('.'))
            .map(|(s, _)| s.to_string());
        (payload.parent().unwrap_or(Path::new(".")).to_path_buf(), stem)
    };

    let mut files = Vec::new();
    walk_files(&dir, &mut files).map_err(|e| ParseError::io(origin, e))?;
    files.sort();
    let lang_of = |p: &Path| -> Option<(String, LangCode)> {
        let name = p.file_name()?.to_str()?;
        let (stem, ext) = name.rsplit_once('.')?;
        let lang = normalize_lang(ext).ok()?;
        let full_stem = p.parent()?.join(stem).to_string_lossy().into_owned();
        Some((full_stem, lang))
    };

    for src in &files {
        let Some((stem, lang)) = lang_of(src) else {
            continue;
        };
        if lang != pair.src {
            continue;
        }
        if let Some(want) = &wanted_stem {
            if Path::new(&stem).file_name().and_then(|n| n.to_str()) != Some(want.as_str()) {
                continue;
            }
        }
        let tgt = files
            .iter()
            .find(|t| lang_of(t).is_some_and(|(s, l)| s == stem && l == pair.tgt));
        if let Some(tgt) = tgt {
            return Ok((src.clone(), tgt.clone()));
        }
    }
    Err(ParseError::layout(
        origin,
        format!("no moses sibling files for {pair} under {}", dir.display()),
    ))
}

/// Reads `\n`-terminated lines as lossily-decoded UTF-8 with the line ending removed.
struct LineReader {
    reader: Box<dyn BufRead + Send>,
    buf: Vec<u8>,
    line_no: u64,
}

impl LineReader {
    fn new(reader: Box<dyn BufRead + Send>) -> Self {
        LineReader {
            reader,
            buf: Vec::with_capacity(256),
            line_no: 0,
        }
    }

    fn next_line(&mut self, stats: &mut ParseStats) -> Option<io::Result<String>> {
        self.buf.clear();
        match self.reader.read_until(b'\n', &mut self.buf) {
            Ok(0) => None,
            Ok(_) => {
                self.line_no += 1;
                if self.buf.last() == Some(&b'\n') {
                    self.buf.pop();
                }
                if self.buf.last() == Some(&b'\r') {
                    self.buf.pop();
                }
                if self.line_no == 1 && self.buf.starts_with(b"\xEF\xBB\xBF") {
                    self.buf.drain(..3);
                }
                Some(Ok(decode_lossy(&self.buf, stats)))
            }
            Err(e) => Some(Err(e)),
        }
    }
}

fn decode_lossy(bytes: &[u8], stats: &mut ParseStats) -> String {
    match String::from_utf8_lossy(bytes) {
        Cow::Borrowed(s) => s.to_string(),
        Cow::Owned(s) => {
            stats.n_invalid_utf8 += 1;
            s
        }
    }
}

struct TsvSource {
    lines: LineReader,
    origin: String,
}

impl PairSource for TsvSource {
    fn next_pair(&mut self, stats: &mut ParseStats) -> Option<Result<SegmentPair, ParseError>> {
        let line = match self.lines.next_line(stats)? {
            Ok(line) => line,
            Err(e) => return Some(Err(ParseError::io(&self.origin, e))),
        };
        let line_no = self.lines.line_no;
        Some(match line.split_once('\t') {
            Some((src, tgt)) => Ok(SegmentPair {
                src: src.to_string(),
                tgt: tgt.to_string(),
                origin_id: self.origin.clone(),
                line_no,
            }),
            None => Err(ParseError::Malformed {
                origin: self.origin.clone(),
                line_no,
                reason: "row has no TAB separator".into(),
            }),
        })
    }
}

struct MosesSource {
    src: LineReader,
    tgt: LineReader,
    origin: String,
}

impl MosesSource {
    fn open(src: &Path, tgt: &Path, origin: &str) -> Result<Self, ParseError> {
        let open = |p: &Path| -> Result<LineReader, ParseError> {
            let f = File::open(p).map_err(|e| ParseError::io(origin, e))?;
            Ok(LineReader::new(Box::new(BufReader::new(f))))
        };
        Ok(MosesSource {
            src: open(src)?,
            tgt: open(tgt)?,
            origin: origin.to_string(),
        })
    }
}

impl PairSource for MosesSource {
    fn next_pair(&mut self, stats: &mut ParseStats) -> Option<Result<SegmentPair, ParseError>> {
        let origin = &self.origin;
        let src = self.src.next_line(stats);
        let tgt = self.tgt.next_line(stats);
        let (src, tgt, rest) = match (src, tgt) {
            (None, None) => return None,
            (Some(Err(e)), _) | (_, Some(Err(e))) => return Some(Err(ParseError::io(origin, e))),
            (Some(Ok(s)), Some(Ok(t))) => (s, t, None),
            (Some(Ok(_)), None) => (String::new(), String::new(), Some(&mut self.src)),
            (None, Some(Ok(_))) => (String::new(), String::new(), Some(&mut self.tgt)),
        };
        if let Some(longer) = rest {
            let mut extra = 1;
            while let Some(line) = longer.next_line(stats) {
                if let Err(e) = line {
                    return Some(Err(ParseError::io(origin, e)));
                }
                extra += 1;
            }
            stats.n_count_mismatch += extra;
            return None;
        }
        Some(Ok(SegmentPair {
            src,
            tgt,
            origin_id: origin.clone(),
            line_no: self.src.line_no,
        }))
    }
}

struct TmxSource {
    reader: Reader<Box<dyn BufRead + Send>>,
    buf: Vec<u8>,
    origin: String,
    pair: LangPair,
    tu_index: u64,
    finished: bool,
}

#[derive(Default)]
struct TuState {
    variants: Vec<(Option<LangCode>, String)>,
    lang: Option<LangCode>,
    seg: Option<String>,
    /// Depth inside native-code inline elements whose text is not content.
    skip_depth: usize,
}

impl TmxSource {
    fn new(reader: Box<dyn BufRead + Send>, origin: &str, pair: LangPair) -> Self {
        let mut reader = Reader::from_reader(reader);
        reader.config_mut().trim_text(false);
        TmxSource {
            reader,
            buf: Vec::with_capacity(1024),
            origin: origin.to_string(),
            pair,
            tu_index: 0,
            finished: false,
        }
    }

    fn tuv_lang(e: &BytesStart<'_>) -> Option<LangCode> {
        e.attributes().flatten().find_map(|a| {
            let key = a.key.as_ref();
            if key == b"xml:lang" || key == b"lang" {
                normalize_lang(&String::from_utf8_lossy(&a.value)).ok()
            } else {
                None
            }
        })
    }

    fn finish_tu(&self, tu: TuState) -> Result<SegmentPair, ParseError> {
        let pick = |lang: LangCode, skip: usize| {
            tu.variants
                .iter()
                .filter(|(l, _)| *l == Some(lang))
                .nth(skip)
                .map(|(_, s)| s.clone())
        };
        let same = self.pair.src == self.pair.tgt;
        let src = pick(self.pair.src, 0);
        let tgt = pick(self.pair.tgt, usize::from(same));
        match (src, tgt) {
            (Some(src), Some(tgt)) => Ok(SegmentPair::new(src, tgt)),
            (src, _) => {
                let missing = if src.is_none() { self.pair.src } else { self.pair.tgt };
                Err(ParseError::Malformed {
                    origin: self.origin.clone(),
                    line_no: self.tu_index,
                    reason: format!("<tu> has no <tuv> for {missing}"),
                })
            }
        }
    }
}

impl PairSource for TmxSource {
    fn next_pair(&mut self, stats: &mut ParseStats) -> Option<Result<SegmentPair, ParseError>> {
        if self.finished {
            return None;
        }
        let mut tu: Option<TuState> = None;
        loop {
            self.buf.clear();
            let event = match self.reader.read_event_into(&mut self.buf) {
                Ok(ev) => ev,
                Err(e) => {
                    self.finished = true;
                    return Some(Err(ParseError::Malformed {
                        origin: self.origin.clone(),
                        line_no: self.tu_index,
                        reason: format!("xml error at byte {}: {e}", self.reader.buffer_position()),
                    }));
                }
            };
            match event {
                Event::Start(e) => match e.local_name().as_ref() {
                    b"tu" => {
                        self.tu_index += 1;
                        tu = Some(TuState::default());
                    }
                    b"tuv" => {
                        if let Some(tu) = tu.as_mut() {
                            tu.lang = Self::tuv_lang(&e);
                        }
                    }
                    b"seg" => {
                        if let Some(tu) = tu.as_mut() {
                            tu.seg = Some(String::new());
                        }
                    }
                    b"bpt" | b"ept" | b"ph" | b"it" | b"ut" => {
                        if let Some(tu) = tu.as_mut() {
                            tu.skip_depth += 1;
                        }
                    }
                    _ => {}
                },
                Event::Text(t) => {
                    if let Some(TuState {
                        seg: Some(seg),
                        skip_depth: 0,
                        ..
                    }) = tu.as_mut()
                    {
                        let raw = decode_lossy(t.as_ref(), stats);
                        match quick_xml::escape::unescape(&raw) {
                            Ok(text) => seg.push_str(&text),
                            Err(_) => seg.push_str(&raw),
                        }
                    }
                }
                Event::CData(t) => {
                    if let Some(TuState {
                        seg: Some(seg),
                        skip_depth: 0,
                        ..
                    }) = tu.as_mut()
                    {
                        seg.push_str(&decode_lossy(t.as_ref(), stats));
                    }
                }
                Event::End(e) => match e.local_name().as_ref() {
                    b"seg" => {
                        if let Some(tu) = tu.as_mut() {
                            if let Some(seg) = tu.seg.take() {
                                let lang = tu.lang;
                                tu.variants.push((lang, seg));
                            }
                        }
                    }
                    b"tuv" => {
                        if let Some(tu) = tu.as_mut() {
                            tu.lang = None;
                        }
                    }
                    b"bpt" | b"ept" | b"ph" | b"it" | b"ut" => {
                        if let Some(tu) = tu.as_mut() {
                            tu.skip_depth = tu.skip_depth.saturating_sub(1);
                        }
                    }
                    b"tu" => {
                        if let Some(done) = tu.take() {
                            let index = self.tu_index;
                            return Some(self.finish_tu(done).map(|mut p| {
                                p.origin_id = self.origin.clone();
                                p.line_no = index;
                                p
                            }));
                        }
                    }
                    _ => {}
                },
                Event::Eof => {
                    self.finished = true;
                    return None;
                }
                _ => {}
            }
        }
    }
}
