//! Bitext normalization, tokenization and filtering.
//!
//! A pair's *canonical form* is `detokenize(tokenize(normalize_text(s)))`:
//! normalized text with single spaces between tokens. Length, ratio,
//! overlap and duplicate checks all work on canonical forms, and cleaned
//! output is written in canonical form, which makes a second cleaning pass a
//! no-op.
//!
//! Filters run in a fixed order and a dropped pair is charged to the first
//! filter that rejects it:
//!
//! 1. empty after normalization
//! 2. token length cap, then source/target token ratio
//! 3. non-ASCII fraction of the target (English) side
//! 4. URL patterns on either side
//! 5. exact overlap with a held-out source or target sentence
//! 6. exact duplicate of an earlier kept pair
//!
//! Filters 1 to 4 are stateless and run in parallel over chunks; 5 and 6 run
//! in a sequential pass so the output order is the input order for any worker
//! count.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use regex::RegexSet;
use serde::{Deserialize, Serialize};
use unicode_normalization::char::is_combining_mark;
use xxhash_rust::xxh3::xxh3_128;

use crate::parsers::SegmentPair;

const PUNCT_MAP_TSV: &str = include_str!("../data/punct_map.tsv");
const DECIMAL_ZEROS: &str = include_str!("../data/decimal_zeros.txt");

pub const DEFAULT_URL_PATTERNS: &[&str] = &["://", r"(?:^|\s)www\."];

#[derive(Debug, thiserror::Error)]
pub enum CleanError {
    #[error("invalid clean config: {0}")]
    Config(String),
    #[error("bad url pattern: {0}")]
    Pattern(#[from] regex::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

fn punct_map() -> &'static HashMap<char, &'static str> {
    static MAP: OnceLock<HashMap<char, &'static str>> = OnceLock::new();
    MAP.get_or_init(|| {
        PUNCT_MAP_TSV
            .lines()
            .filter(|l| !l.starts_with('#') && !l.is_empty())
            .map(|l| {
                let mut cols = l.split('\t');
                let cp = cols.next().and_then(|c| c.strip_prefix("U+"));
                let cp = cp
                    .and_then(|c| u32::from_str_radix(c, 16).ok())
                    .and_then(char::from_u32)
                    .unwrap_or_else(|| panic!("bad punct map row {l:?}"));
                (cp, cols.next().unwrap_or(""))
            })
            .collect()
    })
}

fn decimal_zeros() -> &'static [u32] {
    static ZEROS: OnceLock<Vec<u32>> = OnceLock::new();
    ZEROS.get_or_init(|| {
        let mut zeros: Vec<u32> = DECIMAL_ZEROS
            .lines()
            .filter_map(|l| l.trim().strip_prefix("0x"))
            .map(|h| u32::from_str_radix(h, 16).expect("bad decimal zero row"))
            .collect();
        zeros.sort_unstable();
        zeros
    })
}

/// Decimal value of a non-ASCII decimal digit, if `c` is one.
pub fn decimal_value(c: char) -> Option<u32> {
    let cp = c as u32;
    let zeros = decimal_zeros();
    let idx = match zeros.binary_search(&cp) {
        Ok(i) => i,
        Err(0) => return None,
        Err(i) => i - 1,
    };
    let offset = cp - zeros[idx];
    (offset < 10).then_some(offset)
}

/// Map punctuation variants and non-ASCII digits to ASCII, collapse
/// whitespace runs to one space, and trim.
pub fn normalize_text(s: &str) -> String {
    let map = punct_map();
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        let mut push = |piece: &str| {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push_str(piece);
        };
        if c.is_ascii() {
            let mut b = [0u8; 4];
            push(c.encode_utf8(&mut b));
        } else if let Some(rep) = map.get(&c) {
            if !rep.is_empty() {
                push(rep);
            }
        } else if let Some(d) = decimal_value(c) {
            let digit = char::from_digit(d, 10).expect("decimal value < 10");
            let mut b = [0u8; 4];
            push(digit.encode_utf8(&mut b));
        } else {
            let mut b = [0u8; 4];
            push(c.encode_utf8(&mut b));
        }
    }
    out
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || is_combining_mark(c)
}

/// Split into maximal runs of letters, marks and digits; every other
/// non-space character is a token of its own.
pub fn tokenize(s: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in s.char_indices() {
        if is_word_char(c) {
            start.get_or_insert(i);
            continue;
        }
        if let Some(st) = start.take() {
            tokens.push(&s[st..i]);
        }
        if !c.is_whitespace() {
            tokens.push(&s[i..i + c.len_utf8()]);
        }
    }
    if let Some(st) = start {
        tokens.push(&s[st..]);
    }
    tokens
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

/// Normalized, tokenized, space-joined form of `s`.
pub fn canonical(s: &str) -> String {
    detokenize(&tokenize(&normalize_text(s)))
}

pub fn line_digest(s: &str) -> u128 {
    xxh3_128(s.as_bytes())
}

fn pair_digest(src: &str, tgt: &str) -> u128 {
    let mut buf = Vec::with_capacity(src.len() + tgt.len() + 1);
    buf.extend_from_slice(src.as_bytes());
    buf.push(b'\t');
    buf.extend_from_slice(tgt.as_bytes());
    xxh3_128(&buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    /// Largest allowed ratio between the longer and shorter side, in tokens.
    pub max_ratio: f64,
    /// Largest allowed token count on either side.
    pub max_len: usize,
    /// Largest allowed fraction of non-ASCII, non-space characters on the target side.
    pub nonascii_max_frac: f64,
    /// Regexes; a match on either side drops the pair.
    pub url_patterns: Vec<String>,
    /// Reject malformed input (e.g. side line-count mismatch) instead of
    /// skipping the excess.
    pub strict: bool,
    /// Pairs per parallel work unit.
    pub chunk_size: usize,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            max_ratio: 5.0,
            max_len: 512,
            nonascii_max_frac: 0.5,
            url_patterns: DEFAULT_URL_PATTERNS.iter().map(|s| s.to_string()).collect(),
            strict: false,
            chunk_size: 8192,
        }
    }
}

impl CleanConfig {
    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), CleanError> {
        if !(self.max_ratio > 1.0) {
            return Err(CleanError::Config(format!(
                "max_ratio must be > 1, got {}",
                self.max_ratio
            )));
        }
        if !(self.nonascii_max_frac > 0.0 && self.nonascii_max_frac <= 1.0) {
            return Err(CleanError::Config(format!(
                "nonascii_max_frac must be in (0, 1], got {}",
                self.nonascii_max_frac
            )));
        }
        if self.max_len < 1 {
            return Err(CleanError::Config("max_len must be >= 1".into()));
        }
        if self.chunk_size < 1 {
            return Err(CleanError::Config("chunk_size must be >= 1".into()));
        }
        RegexSet::new(&self.url_patterns)?;
        Ok(())
    }
}

/// Per-filter drop counters. `n_input` equals the sum of all other fields.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanStats {
    pub n_input: u64,
    pub n_empty: u64,
    pub n_len: u64,
    pub n_ratio: u64,
    pub n_nonascii: u64,
    pub n_url: u64,
    pub n_overlap: u64,
    pub n_dup: u64,
    pub n_kept: u64,
}

impl CleanStats {
    pub fn n_dropped(&self) -> u64 {
        self.n_empty + self.n_len + self.n_ratio + self.n_nonascii + self.n_url + self.n_overlap + self.n_dup
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Empty,
    Len,
    Ratio,
    NonAscii,
    Url,
}

struct Prepared {
    pair: SegmentPair,
    verdict: Option<Verdict>,
}

/// Stateful cleaner: owns the held-out digests and the duplicate set.
pub struct Cleaner {
    cfg: CleanConfig,
    urls: RegexSet,
    heldout_src: HashSet<u128>,
    heldout_tgt: HashSet<u128>,
    seen: HashSet<u128>,
    stats: CleanStats,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl Cleaner {
    pub fn new(cfg: CleanConfig, heldout: &[SegmentPair]) -> Result<Self, CleanError> {
        cfg.validate()?;
        let urls = RegexSet::new(&cfg.url_patterns)?;
        let mut heldout_src = HashSet::with_capacity(heldout.len());
        let mut heldout_tgt = HashSet::with_capacity(heldout.len());
        for p in heldout {
            heldout_src.insert(line_digest(&canonical(&p.src)));
            heldout_tgt.insert(line_digest(&canonical(&p.tgt)));
        }
        Ok(Cleaner {
            cfg,
            urls,
            heldout_src,
            heldout_tgt,
            seen: HashSet::new(),
            stats: CleanStats::default(),
            pool: None,
        })
    }

    /// Run the parallel stage on a dedicated pool of `workers` threads
    /// instead of the global one.
    pub fn with_workers(mut self, workers: usize) -> Result<Self, CleanError> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
        self.pool = Some(Arc::new(pool));
        Ok(self)
    }

    pub fn stats(&self) -> CleanStats {
        self.stats
    }

    pub fn config(&self) -> &CleanConfig {
        &self.cfg
    }

    fn prepare(&self, pair: SegmentPair) -> Prepared {
        let src_norm = normalize_text(&pair.src);
        let tgt_norm = normalize_text(&pair.tgt);
        let src_tokens = tokenize(&src_norm);
        let tgt_tokens = tokenize(&tgt_norm);
        let verdict = self.stateless_verdict(&src_norm, &tgt_norm, src_tokens.len(), tgt_tokens.len());
        let pair = SegmentPair {
            src: detokenize(&src_tokens),
            tgt: detokenize(&tgt_tokens),
            ..pair
        };
        Prepared { pair, verdict }
    }

    fn stateless_verdict(&self, src: &str, tgt: &str, n_src: usize, n_tgt: usize) -> Option<Verdict> {
        if n_src == 0 || n_tgt == 0 {
            return Some(Verdict::Empty);
        }
        if n_src > self.cfg.max_len || n_tgt > self.cfg.max_len {
            return Some(Verdict::Len);
        }
        let (long, short) = (n_src.max(n_tgt) as f64, n_src.min(n_tgt) as f64);
        if long / short > self.cfg.max_ratio {
            return Some(Verdict::Ratio);
        }
        let (mut visible, mut non_ascii) = (0usize, 0usize);
        for c in tgt.chars().filter(|c| !c.is_whitespace()) {
            visible += 1;
            non_ascii += usize::from(!c.is_ascii());
        }
        if non_ascii as f64 > self.cfg.nonascii_max_frac * visible as f64 {
            return Some(Verdict::NonAscii);
        }
        if self.urls.is_match(src) || self.urls.is_match(tgt) {
            return Some(Verdict::Url);
        }
        None
    }

    /// Clean one chunk; kept pairs come back in input order and in canonical form.
    pub fn process_chunk(&mut self, chunk: Vec<SegmentPair>) -> Vec<SegmentPair> {
        let prepared: Vec<Prepared> = {
            let this = &*self;
            let run = || chunk.into_par_iter().map(|p| this.prepare(p)).collect();
            match &self.pool {
                Some(pool) => pool.install(run),
                None => run(),
            }
        };

        let mut kept = Vec::with_capacity(prepared.len());
        for Prepared { pair, verdict } in prepared {
            self.stats.n_input += 1;
            match verdict {
                Some(Verdict::Empty) => self.stats.n_empty += 1,
                Some(Verdict::Len) => self.stats.n_len += 1,
                Some(Verdict::Ratio) => self.stats.n_ratio += 1,
                Some(Verdict::NonAscii) => self.stats.n_nonascii += 1,
                Some(Verdict::Url) => self.stats.n_url += 1,
                None => {
                    if self.heldout_src.contains(&line_digest(&pair.src))
                        || self.heldout_tgt.contains(&line_digest(&pair.tgt))
                    {
                        self.stats.n_overlap += 1;
                    } else if !self.seen.insert(pair_digest(&pair.src, &pair.tgt)) {
                        self.stats.n_dup += 1;
                    } else {
                        self.stats.n_kept += 1;
                        kept.push(pair);
                    }
                }
            }
        }
        kept
    }

    /// Lazily clean `pairs`, pulling `chunk_size` pairs at a time.
    pub fn stream<I>(self, pairs: I) -> CleanStream<I::IntoIter>
    where
        I: IntoIterator<Item = SegmentPair>,
    {
        CleanStream {
            inner: pairs.into_iter(),
            cleaner: self,
            buffer: std::collections::VecDeque::new(),
        }
    }
}

pub struct CleanStream<I> {
    inner: I,
    cleaner: Cleaner,
    buffer: std::collections::VecDeque<SegmentPair>,
}

impl<I> CleanStream<I> {
    /// Counters so far; final once the stream is exhausted.
    pub fn stats(&self) -> CleanStats {
        self.cleaner.stats()
    }
}

impl<I: Iterator<Item = SegmentPair>> Iterator for CleanStream<I> {
    type Item = SegmentPair;

    fn next(&mut self) -> Option<SegmentPair> {
        while self.buffer.is_empty() {
            let chunk: Vec<_> = self.inner.by_ref().take(self.cleaner.cfg.chunk_size).collect();
            if chunk.is_empty() {
                return None;
            }
            self.buffer.extend(self.cleaner.process_chunk(chunk));
        }
        self.buffer.pop_front()
    }
}

/// Clean a whole corpus in memory.
pub fn clean<I>(
    pairs: I,
    cfg: CleanConfig,
    heldout: &[SegmentPair],
) -> Result<(Vec<SegmentPair>, CleanStats), CleanError>
where
    I: IntoIterator<Item = SegmentPair>,
{
    let mut stream = Cleaner::new(cfg, heldout)?.stream(pairs);
    let kept: Vec<_> = stream.by_ref().collect();
    Ok((kept, stream.stats()))
}
