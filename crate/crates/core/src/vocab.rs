//! Character, word and BPE vocabularies.
//!
//! Every vocabulary starts with five reserved types:
//!
//! | id | role         | surface in the model file |
//! |----|--------------|---------------------------|
//! | 0  | padding      | `<pad>`                   |
//! | 1  | unknown      | `<unk>`                   |
//! | 2  | begin of seq | `<s>`                     |
//! | 3  | end of seq   | `</s>`                    |
//! | 4  | space mark   | `</w>`                    |
//!
//! The space mark doubles as the BPE end-of-word symbol. Internally it is
//! the private-use codepoint U+E000, so merged BPE types such as `lo</w>`
//! cannot collide with real text.
//!
//! BPE training is the classic algorithm: each word is its codepoints plus
//! the end-of-word symbol, and the most frequent adjacent pair is merged
//! until the vocabulary reaches the target size or no pair occurs at least
//! twice. Ties go to the lexicographically smaller concatenation, then to
//! the smaller left side. Encoding replays the learned merges in order.
//!
//! Models are stored as plain text, one `id<TAB>surface<TAB>freq` row per
//! type, then a `#MERGES` line and one `left<TAB>right` row per merge.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::ops::Deref;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SPACE_MARK: u32 = 4;
pub const N_RESERVED: usize = 5;

/// Internal end-of-word / space-mark character.
pub const EOW: char = '\u{E000}';
/// How [`EOW`] is written in model files.
pub const EOW_TEXT: &str = "</w>";
pub const UNK_SURFACE: &str = "\u{2047}";

/// Vocabulary sizes used for the large many-to-English setup: a big source
/// vocabulary and a smaller target one.
pub const DEFAULT_SRC_BPE_TYPES: usize = 512_000;
pub const DEFAULT_TGT_BPE_TYPES: usize = 64_000;

pub const MIN_MERGE_FREQ: u64 = 2;

const RESERVED_NAMES: [&str; N_RESERVED] = ["<pad>", "<unk>", "<s>", "</s>", EOW_TEXT];
const MERGES_SENTINEL: &str = "#MERGES";
const SCHEME_HEADER: &str = "#SCHEME";
const LINE_CHUNK: usize = 1 << 14;

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("target size {target} too small: need more than {min}")]
    TargetTooSmall { target: usize, min: usize },
    #[error("id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("model line {line}: {reason}")]
    BadModel { line: usize, reason: String },
    #[error("unknown scheme {0:?}")]
    UnknownScheme(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Char,
    Word,
    Bpe,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Char => "char",
            Scheme::Word => "word",
            Scheme::Bpe => "bpe",
        })
    }
}

impl FromStr for Scheme {
    type Err = VocabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "char" => Ok(Scheme::Char),
            "word" => Ok(Scheme::Word),
            "bpe" => Ok(Scheme::Bpe),
            other => Err(VocabError::UnknownScheme(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabType {
    pub surface: String,
    pub freq: u64,
}

/// A sequence of type ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct EncodedSeq(pub Vec<u32>);

impl Deref for EncodedSeq {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for EncodedSeq {
    fn from(v: Vec<u32>) -> Self {
        EncodedSeq(v)
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    scheme: Scheme,
    types: Vec<VocabType>,
    merges: Vec<(String, String)>,
    index: HashMap<String, u32>,
    /// (left id, right id) -> ascending (rank, output id).
    merge_table: HashMap<(u32, u32), Vec<(u32, u32)>>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.scheme == other.scheme && self.types == other.types && self.merges == other.merges
    }
}

fn reserved_types(space_freq: u64) -> Vec<VocabType> {
    (0..N_RESERVED)
        .map(|i| VocabType {
            surface: if i as u32 == SPACE_MARK {
                EOW.to_string()
            } else {
                RESERVED_NAMES[i].to_string()
            },
            freq: if i as u32 == SPACE_MARK { space_freq } else { 0 },
        })
        .collect()
}

impl Vocab {
    fn assemble(scheme: Scheme, types: Vec<VocabType>, merges: Vec<(String, String)>) -> Self {
        let index: HashMap<String, u32> = types
            .iter()
            .enumerate()
            .skip(SPACE_MARK as usize)
            .map(|(i, t)| (t.surface.clone(), i as u32))
            .collect();
        let mut merge_table: HashMap<(u32, u32), Vec<(u32, u32)>> = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let (Some(&li), Some(&ri), Some(&out)) = (index.get(l), index.get(r), index.get(&format!("{l}{r}"))) else {
                continue;
            };
            merge_table.entry((li, ri)).or_default().push((rank as u32, out));
        }
        Vocab {
            scheme,
            types,
            merges,
            index,
            merge_table,
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn types(&self) -> &[VocabType] {
        &self.types
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id_of(&self, surface: &str) -> Option<u32> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: u32) -> Option<&str> {
        self.types.get(id as usize).map(|t| t.surface.as_str())
    }

    pub fn encode(&self, s: &str) -> EncodedSeq {
        let mut ids = Vec::with_capacity(s.len());
        match self.scheme {
            Scheme::Char => {
                let mut buf = [0u8; 4];
                for c in s.chars() {
                    ids.push(if c.is_whitespace() {
                        SPACE_MARK
                    } else if c == EOW {
                        UNK
                    } else {
                        self.id_of(c.encode_utf8(&mut buf)).unwrap_or(UNK)
                    });
                }
            }
            Scheme::Word => {
                ids.extend(s.split_whitespace().map(|w| self.id_of(w).unwrap_or(UNK)));
            }
            Scheme::Bpe => {
                for word in s.split_whitespace() {
                    self.encode_bpe_word(word, &mut ids);
                }
            }
        }
        EncodedSeq(ids)
    }

    fn encode_bpe_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut buf = [0u8; 4];
        let mut symbols: Vec<u32> = word
            .chars()
            .map(|c| {
                if c == EOW {
                    UNK
                } else {
                    self.id_of(c.encode_utf8(&mut buf)).unwrap_or(UNK)
                }
            })
            .collect();
        symbols.push(SPACE_MARK);

        // Jump straight to the next merge (in learned order) that applies to
        // the current sequence; merges in between would be no-ops.
        let mut cursor = 0u32;
        loop {
            let mut best: Option<(u32, u32, u32, u32)> = None; // rank, left, right, out
            for w in symbols.windows(2) {
                if let Some(ranks) = self.merge_table.get(&(w[0], w[1])) {
                    if let Some(&(rank, out)) = ranks.iter().find(|(r, _)| *r >= cursor) {
                        if best.is_none_or(|b| rank < b.0) {
                            best = Some((rank, w[0], w[1], out));
                        }
                    }
                }
            }
            let Some((rank, left, right, merged)) = best else {
                break;
            };
            symbols = merge_symbols(&symbols, left, right, merged);
            cursor = rank + 1;
        }
        out.extend_from_slice(&symbols);
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, VocabError> {
        let mut out = String::new();
        let mut first_word = true;
        for &id in ids {
            let t = self.types.get(id as usize).ok_or(VocabError::IdOutOfRange {
                id,
                size: self.types.len(),
            })?;
            let piece = match id {
                PAD | BOS | EOS => continue,
                UNK => UNK_SURFACE,
                _ => t.surface.as_str(),
            };
            match self.scheme {
                Scheme::Word => {
                    if !first_word {
                        out.push(' ');
                    }
                    first_word = false;
                    out.push_str(piece);
                }
                Scheme::Char | Scheme::Bpe => {
                    out.extend(piece.chars().map(|c| if c == EOW { ' ' } else { c }));
                }
            }
        }
        if self.scheme == Scheme::Bpe {
            let trimmed = out.trim_end_matches(' ').len();
            out.truncate(trimmed);
        }
        Ok(out)
    }

    /// Plain-text model; byte-identical for identical vocabularies.
    pub fn to_model_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{SCHEME_HEADER}\t{}\n", self.scheme));
        for (id, t) in self.types.iter().enumerate() {
            let surface = if id < N_RESERVED {
                RESERVED_NAMES[id].to_string()
            } else {
                escape_surface(&t.surface)
            };
            out.push_str(&format!("{id}\t{surface}\t{}\n", t.freq));
        }
        if self.scheme == Scheme::Bpe {
            out.push_str(MERGES_SENTINEL);
            out.push('\n');
            for (l, r) in &self.merges {
                out.push_str(&format!("{}\t{}\n", escape_surface(l), escape_surface(r)));
            }
        }
        out
    }

    pub fn from_model_str(text: &str) -> Result<Self, VocabError> {
        let bad = |line: usize, reason: &str| VocabError::BadModel {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let scheme = match lines.next() {
            Some((_, l)) => match l.split_once('\t') {
                Some((SCHEME_HEADER, s)) => s.parse()?,
                _ => return Err(bad(1, "missing #SCHEME header")),
            },
            None => return Err(bad(1, "empty model")),
        };

        let mut types = Vec::new();
        let mut merges = Vec::new();
        let mut in_merges = false;
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            if line == MERGES_SENTINEL {
                in_merges = true;
                continue;
            }
            if in_merges {
                let (l, r) = line
                    .split_once('\t')
                    .ok_or_else(|| bad(no, "merge needs two columns"))?;
                merges.push((unescape_surface(l), unescape_surface(r)));
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(id), Some(surface), Some(freq), None) = (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(bad(no, "type row needs id, surface, freq"));
            };
            let id: usize = id.parse().map_err(|_| bad(no, "bad id"))?;
            if id != types.len() {
                return Err(bad(no, "ids must be contiguous from 0"));
            }
            let freq = freq.parse().map_err(|_| bad(no, "bad frequency"))?;
            let surface = if id < N_RESERVED {
                if surface != RESERVED_NAMES[id] {
                    return Err(bad(no, "reserved type mismatch"));
                }
                if id == SPACE_MARK as usize {
                    EOW.to_string()
                } else {
                    surface.to_string()
                }
            } else {
                unescape_surface(surface)
            };
            types.push(VocabType { surface, freq });
        }
        if types.len() < N_RESERVED {
            return Err(bad(0, "reserved types missing"));
        }
        let vocab = Vocab::assemble(scheme, types, merges);
        for (i, (l, r)) in vocab.merges.iter().enumerate() {
            if vocab.id_of(l).is_none() || vocab.id_of(r).is_none() || vocab.id_of(&format!("{l}{r}")).is_none() {
                return Err(bad(0, &format!("merge #{i} refers to unknown types")));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        crate::digest::write_atomic(path, self.to_model_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Vocab::from_model_str(&fs::read_to_string(path)?)
    }

    /// Write the model as text to `w`.
    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(self.to_model_string().as_bytes())
    }
}

fn escape_surface(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(c) = rest.chars().next() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            EOW => out.push_str(EOW_TEXT),
            '<' if rest.starts_with(EOW_TEXT) => out.push_str("\\<"),
            c => out.push(c),
        }
        rest = &rest[c.len_utf8()..];
    }
    out
}

fn unescape_surface(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(c) = rest.chars().next() {
        if c == '\\' {
            let next = rest[1..].chars().next();
            match next {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
            rest = &rest[1 + next.map_or(0, char::len_utf8)..];
        } else if rest.starts_with(EOW_TEXT) {
            out.push(EOW);
            rest = &rest[EOW_TEXT.len()..];
        } else {
            out.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    out
}

/// Replace every non-overlapping `left right` occurrence, scanning left to right.
fn merge_symbols(symbols: &[u32], left: u32, right: u32, merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

/// Feed `corpus` through `f` in parallel line chunks and sum the resulting maps.
fn count_parallel<I, S, K, F>(corpus: I, f: F) -> HashMap<K, u64>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str> + Sync,
    K: std::hash::Hash + Eq + Send,
    F: Fn(&str, &mut HashMap<K, u64>) + Sync,
{
    let mut total: HashMap<K, u64> = HashMap::new();
    let mut iter = corpus.into_iter();
    loop {
        let chunk: Vec<S> = iter.by_ref().take(LINE_CHUNK).collect();
        if chunk.is_empty() {
            break;
        }
        let part = chunk
            .par_iter()
            .fold(HashMap::new, |mut acc, line| {
                f(line.as_ref(), &mut acc);
                acc
            })
            .reduce(HashMap::new, merge_counts);
        total = merge_counts(total, part);
    }
    total
}

fn merge_counts<K: std::hash::Hash + Eq>(mut a: HashMap<K, u64>, b: HashMap<K, u64>) -> HashMap<K, u64> {
    if a.len() < b.len() {
        return merge_counts(b, a);
    }
    for (k, v) in b {
        *a.entry(k).or_insert(0) += v;
    }
    a
}

fn count_chars(line: &str, acc: &mut HashMap<char, u64>) {
    for c in line.chars().filter(|c| !c.is_whitespace() && *c != EOW) {
        *acc.entry(c).or_insert(0) += 1;
    }
}

fn count_words(line: &str, acc: &mut HashMap<String, u64>) {
    for w in line.split_whitespace().filter(|w| !w.contains(EOW)) {
        if let Some(n) = acc.get_mut(w) {
            *n += 1;
        } else {
            acc.insert(w.to_string(), 1);
        }
    }
}

/// Codepoint types ordered by frequency (descending), then codepoint.
fn sorted_chars(counts: HashMap<char, u64>) -> Vec<(char, u64)> {
    let mut chars: Vec<_> = counts.into_iter().collect();
    chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    chars
}

/// One type per distinct codepoint; whitespace is carried by the space mark.
pub fn train_char<I, S>(corpus: I) -> Result<Vocab, VocabError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str> + Sync,
{
    let mut spaces = 0u64;
    let counts = count_parallel(corpus, |line, acc| {
        count_chars(line, acc);
        // spaces ride along under a sentinel key
        let n = line.chars().filter(|c| c.is_whitespace()).count() as u64;
        if n > 0 {
            *acc.entry(EOW).or_insert(0) += n;
        }
    });
    let mut counts = counts;
    if let Some(n) = counts.remove(&EOW) {
        spaces = n;
    }
    if counts.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }
    let mut types = reserved_types(spaces);
    types.extend(sorted_chars(counts).into_iter().map(|(c, freq)| VocabType {
        surface: c.to_string(),
        freq,
    }));
    Ok(Vocab::assemble(Scheme::Char, types, Vec::new()))
}

/// The `max_types - 5` most frequent whitespace-delimited words; ties are
/// broken lexicographically.
pub fn train_word<I, S>(corpus: I, max_types: usize) -> Result<Vocab, VocabError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str> + Sync,
{
    if max_types <= N_RESERVED {
        return Err(VocabError::TargetTooSmall {
            target: max_types,
            min: N_RESERVED,
        });
    }
    let counts = count_parallel(corpus, count_words);
    if counts.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }
    let mut words: Vec<_> = counts.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    words.truncate(max_types - N_RESERVED);
    let mut types = reserved_types(0);
    types.extend(words.into_iter().map(|(surface, freq)| VocabType { surface, freq }));
    Ok(Vocab::assemble(Scheme::Word, types, Vec::new()))
}

/// Heap entry for a candidate merge. Larger is better.
#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    concat: Box<str>,
    left_len: usize,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| Reverse(&self.concat).cmp(&Reverse(&other.concat)))
            .then_with(|| Reverse(&self.concat[..self.left_len]).cmp(&Reverse(&other.concat[..other.left_len])))
            .then_with(|| Reverse(self.pair).cmp(&Reverse(other.pair)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct BpeState {
    types: Vec<VocabType>,
    index: HashMap<String, u32>,
    words: Vec<(Vec<u32>, u64)>,
    pair_counts: HashMap<(u32, u32), u64>,
    occurs_in: HashMap<(u32, u32), Vec<u32>>,
    heap: BinaryHeap<Candidate>,
}

impl BpeState {
    fn candidate(&self, pair: (u32, u32), count: u64) -> Candidate {
        let left = &self.types[pair.0 as usize].surface;
        let right = &self.types[pair.1 as usize].surface;
        let mut concat = String::with_capacity(left.len() + right.len());
        concat.push_str(left);
        concat.push_str(right);
        Candidate {
            count,
            concat: concat.into_boxed_str(),
            left_len: left.len(),
            pair,
        }
    }

    fn pop_best(&mut self) -> Option<Candidate> {
        while let Some(top) = self.heap.pop() {
            if self.pair_counts.get(&top.pair) == Some(&top.count) {
                return Some(top);
            }
        }
        None
    }

    fn apply(&mut self, best: &Candidate) -> u32 {
        let merged = match self.index.get(&*best.concat) {
            Some(&id) => id,
            None => {
                let id = self.types.len() as u32;
                self.types.push(VocabType {
                    surface: best.concat.to_string(),
                    freq: best.count,
                });
                self.index.insert(best.concat.to_string(), id);
                id
            }
        };
        let (left, right) = best.pair;
        let mut targets = self.occurs_in.remove(&best.pair).unwrap_or_default();
        targets.sort_unstable();
        targets.dedup();

        let mut delta: HashMap<(u32, u32), i64> = HashMap::new();
        for &wi in &targets {
            let (symbols, freq) = &mut self.words[wi as usize];
            let freq = *freq as i64;
            if !symbols.windows(2).any(|w| w[0] == left && w[1] == right) {
                continue;
            }
            for w in symbols.windows(2) {
                *delta.entry((w[0], w[1])).or_insert(0) -= freq;
            }
            *symbols = merge_symbols(symbols, left, right, merged);
            for w in symbols.windows(2) {
                *delta.entry((w[0], w[1])).or_insert(0) += freq;
                if w[0] == merged || w[1] == merged {
                    self.occurs_in.entry((w[0], w[1])).or_default().push(wi);
                }
            }
        }

        let mut changed: Vec<_> = delta.into_iter().filter(|(_, d)| *d != 0).collect();
        changed.sort_unstable();
        for (pair, d) in changed {
            let entry = self.pair_counts.entry(pair).or_insert(0);
            *entry = (*entry as i64 + d) as u64;
            let count = *entry;
            if count == 0 {
                self.pair_counts.remove(&pair);
            } else {
                let cand = self.candidate(pair, count);
                self.heap.push(cand);
            }
        }
        merged
    }
}

/// Options for [`train_bpe_with`].
#[derive(Debug, Clone, Copy)]
pub struct BpeOptions {
    pub target_size: usize,
    pub min_freq: u64,
}

impl BpeOptions {
    pub fn new(target_size: usize) -> Self {
        BpeOptions {
            target_size,
            min_freq: MIN_MERGE_FREQ,
        }
    }
}

/// Train a BPE vocabulary of at most `target_size` types.
///
/// The corpus should already be deduplicated; see [`dedup_lines`].
pub fn train_bpe<I, S>(corpus: I, target_size: usize) -> Result<Vocab, VocabError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str> + Sync,
{
    train_bpe_with(corpus, BpeOptions::new(target_size))
}

pub fn train_bpe_with<I, S>(corpus: I, opts: BpeOptions) -> Result<Vocab, VocabError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str> + Sync,
{
    let word_counts = count_parallel(corpus, count_words);
    train_bpe_from_counts(word_counts, opts)
}

/// Pair counts and, per pair, the words it occurs in.
type PairTally = (HashMap<(u32, u32), u64>, HashMap<(u32, u32), Vec<u32>>);

/// Train from an explicit word-frequency table.
pub fn train_bpe_from_counts(word_counts: HashMap<String, u64>, opts: BpeOptions) -> Result<Vocab, VocabError> {
    let mut char_counts: HashMap<char, u64> = HashMap::new();
    let mut n_words = 0u64;
    for (w, &n) in &word_counts {
        n_words += n;
        for c in w.chars().filter(|c| *c != EOW) {
            *char_counts.entry(c).or_insert(0) += n;
        }
    }
    if char_counts.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }
    let min = N_RESERVED + char_counts.len();
    if opts.target_size <= min {
        return Err(VocabError::TargetTooSmall {
            target: opts.target_size,
            min,
        });
    }

    let mut types = reserved_types(n_words);
    types.extend(sorted_chars(char_counts).into_iter().map(|(c, freq)| VocabType {
        surface: c.to_string(),
        freq,
    }));
    let index: HashMap<String, u32> = types
        .iter()
        .enumerate()
        .skip(SPACE_MARK as usize)
        .map(|(i, t)| (t.surface.clone(), i as u32))
        .collect();

    let mut sorted_words: Vec<_> = word_counts.into_iter().collect();
    sorted_words.sort_unstable();
    let words: Vec<(Vec<u32>, u64)> = sorted_words
        .into_iter()
        .filter_map(|(w, n)| {
            let mut buf = [0u8; 4];
            let mut syms: Vec<u32> = w
                .chars()
                .filter(|c| *c != EOW)
                .map(|c| index[&*c.encode_utf8(&mut buf)])
                .collect();
            if syms.is_empty() {
                return None;
            }
            syms.push(SPACE_MARK);
            Some((syms, n))
        })
        .collect();

    // map: per-shard pair counts; reduce: summed (associative, order-free)
    let (pair_counts, occurs_in) = words
        .par_iter()
        .enumerate()
        .fold(
            || (HashMap::new(), HashMap::new()),
            |(mut counts, mut occurs): PairTally, (wi, (syms, n))| {
                for w in syms.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += n;
                    occurs.entry((w[0], w[1])).or_default().push(wi as u32);
                }
                (counts, occurs)
            },
        )
        .reduce(
            || (HashMap::new(), HashMap::new()),
            |(c1, mut o1), (c2, o2)| {
                for (k, mut v) in o2 {
                    o1.entry(k).or_default().append(&mut v);
                }
                (merge_counts(c1, c2), o1)
            },
        );

    let mut state = BpeState {
        types,
        index,
        words,
        pair_counts,
        occurs_in,
        heap: BinaryHeap::new(),
    };
    let mut initial: Vec<_> = state.pair_counts.iter().map(|(&p, &c)| (p, c)).collect();
    initial.sort_unstable();
    state.heap = initial.into_iter().map(|(p, c)| state.candidate(p, c)).collect();

    let mut merges = Vec::new();
    while state.types.len() < opts.target_size {
        let Some(best) = state.pop_best() else {
            break;
        };
        if best.count < opts.min_freq {
            break;
        }
        let (l, r) = best.concat.split_at(best.left_len);
        merges.push((l.to_string(), r.to_string()));
        state.apply(&best);
    }
    log::debug!("bpe: {} types, {} merges", state.types.len(), merges.len());
    Ok(Vocab::assemble(Scheme::Bpe, state.types, merges))
}

/// Drop repeated lines, keeping first occurrences in order.
pub fn dedup_lines<I, S>(lines: I) -> impl Iterator<Item = S>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut seen = HashSet::new();
    lines
        .into_iter()
        .filter(move |l| seen.insert(crate::textprep::line_digest(l.as_ref())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn learned(v: &Vocab) -> Vec<(&str, u64)> {
        v.types()[N_RESERVED..]
            .iter()
            .map(|t| (t.surface.as_str(), t.freq))
            .collect()
    }

    #[test]
    fn char_vocab_ties_by_codepoint() {
        let v = train_char(["ab", "ba"]).unwrap();
        assert_eq!(learned(&v), vec![("a", 2), ("b", 2)]);
        let v = train_char(["aaa"]).unwrap();
        assert_eq!(learned(&v), vec![("a", 3)]);
        assert!(matches!(train_char(Vec::<&str>::new()), Err(VocabError::EmptyCorpus)));
        assert!(matches!(train_char(["   "]), Err(VocabError::EmptyCorpus)));
    }

    #[test]
    fn char_round_trip_and_unknowns() {
        let v = train_char(["how are you"]).unwrap();
        let ids = v.encode("how are you");
        assert_eq!(ids.iter().filter(|&&i| i == SPACE_MARK).count(), 2);
        assert_eq!(v.decode(&ids).unwrap(), "how are you");

        let v = train_char(["strae"]).unwrap();
        let ids = v.encode("straße");
        assert_eq!(ids.iter().filter(|&&i| i == UNK).count(), 1);
        assert_eq!(v.decode(&[UNK]).unwrap(), "\u{2047}");
    }

    #[test]
    fn word_vocab_truncation() {
        let v = train_word(["a a b"], 7).unwrap();
        assert_eq!(learned(&v), vec![("a", 2), ("b", 1)]);
        let v = train_word(["a a b"], 6).unwrap();
        assert_eq!(learned(&v), vec![("a", 2)]);
        assert_eq!(v.encode("a b").0, vec![5, UNK]);
        assert!(matches!(train_word(["a"], 5), Err(VocabError::TargetTooSmall { .. })));
        assert_eq!(v.decode(&[BOS, 5, UNK, 5, EOS]).unwrap(), "a \u{2047} a");
    }

    #[test]
    fn single_candidate_merge() {
        let v = train_bpe(["aa", "aa", "aa"], 1 + 6).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn bpe_target_checks() {
        assert!(matches!(
            train_bpe(["ab"], 7),
            Err(VocabError::TargetTooSmall { target: 7, min: 7 })
        ));
        assert!(matches!(
            train_bpe(Vec::<String>::new(), 100),
            Err(VocabError::EmptyCorpus)
        ));
    }

    #[test]
    fn bpe_stops_below_min_freq() {
        let v = train_bpe(["abc"], 1000).unwrap();
        assert!(v.merges().is_empty());
    }

    #[test]
    fn bpe_round_trip() {
        let corpus = ["low lower lowest", "newer wider new"];
        let v = train_bpe(corpus, 40).unwrap();
        for s in corpus {
            let ids = v.encode(s);
            assert!(!ids.contains(&UNK));
            assert_eq!(v.decode(&ids).unwrap(), s);
        }
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let v = train_char(["ab"]).unwrap();
        assert!(matches!(
            v.decode(&[99]),
            Err(VocabError::IdOutOfRange { id: 99, size: 7 })
        ));
    }

    #[test]
    fn escaping_is_reversible() {
        for s in [
            "plain",
            "a\tb",
            "back\\slash",
            "lit</w>eral",
            "x\u{E000}",
            "\\<",
            "<",
            "</w",
        ] {
            assert_eq!(unescape_surface(&escape_surface(s)), s, "{s:?}");
        }
        assert_eq!(escape_surface("lo\u{E000}"), "lo</w>");
    }

    #[test]
    fn model_file_round_trip() {
        let v = train_bpe(["lo</w>w low lower", "a\\b a\\b"], 30).unwrap();
        let text = v.to_model_string();
        assert!(text.starts_with("#SCHEME\tbpe\n0\t<pad>\t0\n"));
        let back = Vocab::from_model_str(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_model_string(), text);

        let w = train_word(["x y y"], 10).unwrap();
        assert_eq!(Vocab::from_model_str(&w.to_model_string()).unwrap(), w);
    }

    #[test]
    fn model_parse_errors() {
        assert!(Vocab::from_model_str("").is_err());
        let dangling =
            "#SCHEME\tbpe\n0\t<pad>\t0\n1\t<unk>\t0\n2\t<s>\t0\n3\t</s>\t0\n4\t</w>\t0\n5\ta\t1\n#MERGES\na\ta\n";
        assert!(matches!(
            Vocab::from_model_str(dangling),
            Err(VocabError::BadModel { .. })
        ));
        assert!(Vocab::from_model_str("#SCHEME\tnope\n").is_err());
        let gap = "#SCHEME\tchar\n0\t<pad>\t0\n2\t<s>\t0\n";
        assert!(matches!(
            Vocab::from_model_str(gap),
            Err(VocabError::BadModel { line: 3, .. })
        ));
    }

    #[test]
    fn dedup_keeps_first() {
        let out: Vec<_> = dedup_lines(["a", "b", "a", "c", "b"]).collect();
        assert_eq!(out, ["a", "b", "c"]);
    }
}
