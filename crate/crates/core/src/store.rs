//! NLDb: sharded binary storage for encoded sequence pairs, and batching.
//!
//! A database is a directory holding `meta.json` and one or more shard files.
//! Each shard is laid out as
//!
//! ```text
//! "NLDB1"  version:u8  src_width:u8  tgt_width:u8  n:u64
//! n x (src_len:u32, tgt_len:u32)
//! all source ids     (src_width bytes each)
//! all target ids     (tgt_width bytes each)
//! ```
//!
//! with every integer little-endian. `meta.json` is written after all shards
//! are complete; a directory without it is not a database.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::write_atomic;

pub const MAGIC: [u8; 5] = *b"NLDB1";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: u64 = 16;
pub const META_FILE: &str = "meta.json";
pub const DEFAULT_MAX_TOKENS: usize = 18_000;
pub const DEFAULT_BUCKET_WIDTH: usize = 2;

const CHANNEL_BOUND: usize = 1024;
const IO_BUF: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Src,
    Tgt,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Src => "source",
            Side::Tgt => "target",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("vocabulary size must be at least 1")]
    EmptyVocab,
    #[error("vocabulary of {0} types does not fit 32-bit ids")]
    VocabTooLarge(u64),
    #[error("record {record}: {side} id {id} is outside a vocabulary of {vocab_size}")]
    IdOverflow {
        record: u64,
        side: Side,
        id: u32,
        vocab_size: u64,
    },
    #[error("record {record}: {side} sequence of {len} tokens exceeds budget {max_toks}")]
    SequenceTooLong {
        record: u64,
        side: Side,
        len: usize,
        max_toks: usize,
    },
    #[error("record {record}: {message}")]
    Input { record: u64, message: String },
    #[error("write of {dir} did not complete: {reason}")]
    PartialWrite { dir: PathBuf, reason: String },
    #[error("{0} is not a database (no {META_FILE})")]
    NotADb(PathBuf),
    #[error("{0}: bad magic, not an NLDb shard")]
    BadMagic(PathBuf),
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u8 },
    #[error("{path}: invalid id width {width}")]
    BadWidth { path: PathBuf, width: u8 },
    #[error("{path}: truncated shard, expected {expected} bytes, found {actual}")]
    TruncatedShard { path: PathBuf, expected: u64, actual: u64 },
    #[error("{path}: shard disagrees with meta: {reason}")]
    MetaMismatch { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Meta { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Smallest id width in bytes (1, 2 or 4) able to hold ids `0..vocab_size`.
pub fn width_for(vocab_size: u64) -> Result<u8, StoreError> {
    match vocab_size {
        0 => Err(StoreError::EmptyVocab),
        1..=0x100 => Ok(1),
        0x101..=0x1_0000 => Ok(2),
        0x1_0001..=0x1_0000_0000 => Ok(4),
        _ => Err(StoreError::VocabTooLarge(vocab_size)),
    }
}

/// One stored pair of id sequences.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Record {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl Record {
    pub fn new(src: Vec<u32>, tgt: Vec<u32>) -> Self {
        Self { src, tgt }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub n_records: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbMeta {
    pub format_version: u8,
    pub src_vocab_size: u64,
    pub tgt_vocab_size: u64,
    pub src_width: u8,
    pub tgt_width: u8,
    pub n_records: u64,
    pub shards: Vec<ShardInfo>,
}

impl DbMeta {
    /// An empty descriptor with widths derived from the vocabulary sizes.
    pub fn new(src_vocab_size: u64, tgt_vocab_size: u64) -> Result<Self, StoreError> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            src_vocab_size,
            tgt_vocab_size,
            src_width: width_for(src_vocab_size)?,
            tgt_width: width_for(tgt_vocab_size)?,
            n_records: 0,
            shards: Vec::new(),
        })
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.format_version != FORMAT_VERSION {
            return Err(StoreError::Config(format!(
                "format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        for (side, size, width) in [
            (Side::Src, self.src_vocab_size, self.src_width),
            (Side::Tgt, self.tgt_vocab_size, self.tgt_width),
        ] {
            let want = width_for(size)?;
            if want != width {
                return Err(StoreError::Config(format!(
                    "{side} width {width} does not match vocabulary size {size} (needs {want})"
                )));
            }
        }
        let total: u64 = self.shards.iter().map(|s| s.n_records).sum();
        if total != self.n_records {
            return Err(StoreError::Config(format!(
                "shard counts sum to {total}, meta says {}",
                self.n_records
            )));
        }
        Ok(())
    }

    fn read(dir: &Path) -> Result<Self, StoreError> {
        let path = dir.join(META_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotADb(dir.to_path_buf())),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let meta: DbMeta = serde_json::from_slice(&bytes).map_err(|source| StoreError::Meta { path, source })?;
        meta.validate()?;
        Ok(meta)
    }
}

pub fn shard_file_name(i: usize) -> String {
    format!("part-{i:05}.nldb")
}

fn put_id(out: &mut impl Write, id: u32, width: u8) -> io::Result<()> {
    out.write_all(&id.to_le_bytes()[..width as usize])
}

/// Bytes of a shard with the given per-record lengths.
pub fn shard_len(lengths: impl IntoIterator<Item = (u64, u64)>, src_width: u8, tgt_width: u8) -> u64 {
    let mut n = 0u64;
    let mut s = 0u64;
    let mut t = 0u64;
    for (a, b) in lengths {
        n += 1;
        s += a;
        t += b;
    }
    HEADER_LEN + 8 * n + s * src_width as u64 + t * tgt_width as u64
}

/// Buffers one shard's sections in anonymous temp files until it is sealed.
struct ShardWriter {
    dir: PathBuf,
    src_width: u8,
    tgt_width: u8,
    n: u64,
    lens: BufWriter<File>,
    src: BufWriter<File>,
    tgt: BufWriter<File>,
}

impl ShardWriter {
    fn new(dir: &Path, src_width: u8, tgt_width: u8) -> io::Result<Self> {
        let section =
            || -> io::Result<BufWriter<File>> { Ok(BufWriter::with_capacity(IO_BUF, tempfile::tempfile_in(dir)?)) };
        Ok(Self {
            dir: dir.to_path_buf(),
            src_width,
            tgt_width,
            n: 0,
            lens: section()?,
            src: section()?,
            tgt: section()?,
        })
    }

    fn push(&mut self, r: &Record) -> io::Result<()> {
        self.lens.write_all(&(r.src.len() as u32).to_le_bytes())?;
        self.lens.write_all(&(r.tgt.len() as u32).to_le_bytes())?;
        for &id in &r.src {
            put_id(&mut self.src, id, self.src_width)?;
        }
        for &id in &r.tgt {
            put_id(&mut self.tgt, id, self.tgt_width)?;
        }
        self.n += 1;
        Ok(())
    }

    fn seal(self, dest: &Path) -> io::Result<u64> {
        let mut out = tempfile::NamedTempFile::new_in(&self.dir)?;
        {
            let mut w = BufWriter::with_capacity(IO_BUF, out.as_file_mut());
            w.write_all(&MAGIC)?;
            w.write_all(&[FORMAT_VERSION, self.src_width, self.tgt_width])?;
            w.write_all(&self.n.to_le_bytes())?;
            for section in [self.lens, self.src, self.tgt] {
                let mut f = section.into_inner().map_err(|e| e.into_error())?;
                f.seek(SeekFrom::Start(0))?;
                io::copy(&mut f, &mut w)?;
            }
            w.flush()?;
        }
        out.as_file().sync_all()?;
        out.persist(dest).map_err(|e| e.error)?;
        Ok(self.n)
    }
}

fn check_ids(record: u64, side: Side, ids: &[u32], vocab_size: u64) -> Result<(), StoreError> {
    match ids.iter().find(|&&id| id as u64 >= vocab_size) {
        Some(&id) => Err(StoreError::IdOverflow {
            record,
            side,
            id,
            vocab_size,
        }),
        None => Ok(()),
    }
}

/// Write `records` into `n_shards` shards under `out_dir`, record `i` going
/// to shard `i % n_shards`. Returns the committed meta.
pub fn db_write(
    records: impl IntoIterator<Item = Record>,
    meta: DbMeta,
    n_shards: usize,
    out_dir: &Path,
) -> Result<DbMeta, StoreError> {
    db_write_from(records.into_iter().map(Ok), meta, n_shards, out_dir)
}

/// Like [`db_write`], for record sources that can fail midway.
pub fn db_write_from<I>(records: I, meta: DbMeta, n_shards: usize, out_dir: &Path) -> Result<DbMeta, StoreError>
where
    I: IntoIterator<Item = Result<Record, StoreError>>,
{
    if n_shards == 0 {
        return Err(StoreError::Config("shard count must be at least 1".into()));
    }
    let mut meta = DbMeta {
        n_records: 0,
        shards: Vec::new(),
        ..meta
    };
    meta.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    remove_existing(out_dir)?;

    let partial = |reason: String| StoreError::PartialWrite {
        dir: out_dir.to_path_buf(),
        reason,
    };

    let (feed_result, writers) = thread::scope(|scope| {
        let mut senders = Vec::with_capacity(n_shards);
        let mut handles = Vec::with_capacity(n_shards);
        for _ in 0..n_shards {
            let (tx, rx) = mpsc::sync_channel::<Record>(CHANNEL_BOUND);
            senders.push(tx);
            let (sw, tw) = (meta.src_width, meta.tgt_width);
            handles.push(scope.spawn(move || -> io::Result<ShardWriter> {
                let mut w = ShardWriter::new(out_dir, sw, tw)?;
                for r in rx {
                    w.push(&r)?;
                }
                Ok(w)
            }));
        }

        let feed = || -> Result<u64, StoreError> {
            let mut i = 0u64;
            for r in records {
                let r = r?;
                check_ids(i, Side::Src, &r.src, meta.src_vocab_size)?;
                check_ids(i, Side::Tgt, &r.tgt, meta.tgt_vocab_size)?;
                // a closed channel means that worker failed; its error surfaces on join
                if senders[(i % n_shards as u64) as usize].send(r).is_err() {
                    break;
                }
                i += 1;
            }
            Ok(i)
        };
        let fed = feed();
        drop(senders);
        let writers: Vec<_> = handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(io::Error::other("shard writer panicked")))
            })
            .collect();
        (fed, writers)
    });

    let total = feed_result?;
    let writers = writers
        .into_iter()
        .collect::<io::Result<Vec<_>>>()
        .map_err(|e| partial(e.to_string()))?;

    let sealed: Vec<io::Result<ShardInfo>> = thread::scope(|scope| {
        let handles: Vec<_> = writers
            .into_iter()
            .enumerate()
            .map(|(i, w)| {
                scope.spawn(move || {
                    let file = shard_file_name(i);
                    let n_records = w.seal(&out_dir.join(&file))?;
                    Ok(ShardInfo { file, n_records })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(io::Error::other("shard writer panicked")))
            })
            .collect()
    });
    meta.shards = sealed
        .into_iter()
        .collect::<io::Result<Vec<_>>>()
        .map_err(|e| partial(e.to_string()))?;
    meta.n_records = total;
    debug_assert_eq!(meta.shards.iter().map(|s| s.n_records).sum::<u64>(), total);

    let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    let meta_path = out_dir.join(META_FILE);
    write_atomic(&meta_path, &json).map_err(io_err(&meta_path))?;
    log::info!(
        "wrote {} records in {} shards to {}",
        total,
        n_shards,
        out_dir.display()
    );
    Ok(meta)
}

fn remove_existing(dir: &Path) -> Result<(), StoreError> {
    let meta = dir.join(META_FILE);
    match fs::remove_file(&meta) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(io_err(&meta)(e)),
    }
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let is_shard = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("part-") && n.ends_with(".nldb"));
        if is_shard {
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u8,
    pub src_width: u8,
    pub tgt_width: u8,
    pub n_records: u64,
}

/// Streaming reader over one shard file.
///
/// Holds three handles positioned at the lengths, source and target
/// sections, so memory use does not depend on shard size.
pub struct ShardReader {
    path: PathBuf,
    header: ShardHeader,
    lens: BufReader<File>,
    src: BufReader<File>,
    tgt: BufReader<File>,
    next: u64,
    failed: bool,
}

fn read_header(path: &Path, f: &mut File) -> Result<ShardHeader, StoreError> {
    let actual = f.metadata().map_err(io_err(path))?.len();
    let mut buf = [0u8; HEADER_LEN as usize];
    let got = read_up_to(f, &mut buf).map_err(io_err(path))?;
    if got < MAGIC.len() || buf[..MAGIC.len()] != MAGIC {
        return Err(StoreError::BadMagic(path.to_path_buf()));
    }
    if got < buf.len() {
        return Err(StoreError::TruncatedShard {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            actual,
        });
    }
    let version = buf[5];
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    for width in [buf[6], buf[7]] {
        if !matches!(width, 1 | 2 | 4) {
            return Err(StoreError::BadWidth {
                path: path.to_path_buf(),
                width,
            });
        }
    }
    Ok(ShardHeader {
        version,
        src_width: buf[6],
        tgt_width: buf[7],
        n_records: u64::from_le_bytes(buf[8..16].try_into().unwrap()),
    })
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Open a shard for streaming reads after validating its header and size.
pub fn db_read(path: &Path) -> Result<ShardReader, StoreError> {
    let open = || File::open(path).map_err(io_err(path));
    let mut f = open()?;
    let header = read_header(path, &mut f)?;
    let actual = f.metadata().map_err(io_err(path))?.len();
    let lens_end = HEADER_LEN.saturating_add(header.n_records.saturating_mul(8));
    let truncated = |expected| StoreError::TruncatedShard {
        path: path.to_path_buf(),
        expected,
        actual,
    };
    if actual < lens_end {
        return Err(truncated(lens_end));
    }

    let mut lens = BufReader::with_capacity(IO_BUF, f);
    let (mut s_total, mut t_total) = (0u64, 0u64);
    let mut pair = [0u8; 8];
    for _ in 0..header.n_records {
        lens.read_exact(&mut pair).map_err(io_err(path))?;
        s_total += u32::from_le_bytes(pair[..4].try_into().unwrap()) as u64;
        t_total += u32::from_le_bytes(pair[4..].try_into().unwrap()) as u64;
    }
    let src_start = lens_end;
    let tgt_start = src_start + s_total * header.src_width as u64;
    let expected = tgt_start + t_total * header.tgt_width as u64;
    if actual != expected {
        return Err(truncated(expected));
    }

    lens.seek(SeekFrom::Start(HEADER_LEN)).map_err(io_err(path))?;
    let mut src = open()?;
    src.seek(SeekFrom::Start(src_start)).map_err(io_err(path))?;
    let mut tgt = open()?;
    tgt.seek(SeekFrom::Start(tgt_start)).map_err(io_err(path))?;
    Ok(ShardReader {
        path: path.to_path_buf(),
        header,
        lens,
        src: BufReader::with_capacity(IO_BUF, src),
        tgt: BufReader::with_capacity(IO_BUF, tgt),
        next: 0,
        failed: false,
    })
}

fn read_ids(r: &mut impl Read, n: usize, width: u8) -> io::Result<Vec<u32>> {
    let w = width as usize;
    let mut raw = vec![0u8; n * w];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(w)
        .map(|c| {
            let mut b = [0u8; 4];
            b[..w].copy_from_slice(c);
            u32::from_le_bytes(b)
        })
        .collect())
}

impl ShardReader {
    pub fn header(&self) -> ShardHeader {
        self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn read_record(&mut self) -> io::Result<Record> {
        let mut pair = [0u8; 8];
        self.lens.read_exact(&mut pair)?;
        let s = u32::from_le_bytes(pair[..4].try_into().unwrap()) as usize;
        let t = u32::from_le_bytes(pair[4..].try_into().unwrap()) as usize;
        Ok(Record {
            src: read_ids(&mut self.src, s, self.header.src_width)?,
            tgt: read_ids(&mut self.tgt, t, self.header.tgt_width)?,
        })
    }
}

impl Iterator for ShardReader {
    type Item = Result<Record, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next >= self.header.n_records {
            return None;
        }
        self.next += 1;
        match self.read_record() {
            Ok(r) => Some(Ok(r)),
            Err(e) => {
                self.failed = true;
                Some(Err(io_err(&self.path)(e)))
            }
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.header.n_records - self.next) as usize;
        (0, Some(left))
    }
}

/// A committed database directory.
#[derive(Debug, Clone)]
pub struct Db {
    dir: PathBuf,
    meta: DbMeta,
}

impl Db {
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let meta = DbMeta::read(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
        })
    }

    pub fn meta(&self) -> &DbMeta {
        &self.meta
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn shard_paths(&self) -> Vec<PathBuf> {
        self.meta.shards.iter().map(|s| self.dir.join(&s.file)).collect()
    }

    /// Open shard `i`, checking its header against the meta.
    pub fn read_shard(&self, i: usize) -> Result<ShardReader, StoreError> {
        let info = &self.meta.shards[i];
        let path = self.dir.join(&info.file);
        let reader = db_read(&path)?;
        let h = reader.header();
        let mismatch = |reason: String| StoreError::MetaMismatch {
            path: path.clone(),
            reason,
        };
        if (h.src_width, h.tgt_width) != (self.meta.src_width, self.meta.tgt_width) {
            return Err(mismatch(format!(
                "widths {}/{} vs {}/{}",
                h.src_width, h.tgt_width, self.meta.src_width, self.meta.tgt_width
            )));
        }
        if h.n_records != info.n_records {
            return Err(mismatch(format!("{} records vs {}", h.n_records, info.n_records)));
        }
        Ok(reader)
    }

    /// All records, shard by shard, each shard in write order.
    pub fn records(&self) -> impl Iterator<Item = Result<Record, StoreError>> + '_ {
        (0..self.meta.shards.len()).flat_map(move |i| -> Box<dyn Iterator<Item = _>> {
            match self.read_shard(i) {
                Ok(r) => Box::new(r),
                Err(e) => Box::new(std::iter::once(Err(e))),
            }
        })
    }

    pub fn load(&self) -> Result<LoadedDb, StoreError> {
        LoadedDb::from_records(&self.meta, self.records())
    }
}

#[derive(Debug, Clone)]
enum IdArray {
    U8(Vec<u8>),
    U16(Vec<u16>),
    U32(Vec<u32>),
}

impl IdArray {
    fn with_width(width: u8) -> Self {
        match width {
            1 => IdArray::U8(Vec::new()),
            2 => IdArray::U16(Vec::new()),
            _ => IdArray::U32(Vec::new()),
        }
    }

    fn extend(&mut self, ids: &[u32]) {
        match self {
            IdArray::U8(v) => v.extend(ids.iter().map(|&i| i as u8)),
            IdArray::U16(v) => v.extend(ids.iter().map(|&i| i as u16)),
            IdArray::U32(v) => v.extend_from_slice(ids),
        }
    }

    fn slice(&self, from: usize, to: usize) -> Vec<u32> {
        match self {
            IdArray::U8(v) => v[from..to].iter().map(|&i| i as u32).collect(),
            IdArray::U16(v) => v[from..to].iter().map(|&i| i as u32).collect(),
            IdArray::U32(v) => v[from..to].to_vec(),
        }
    }
}

/// All records of a database held in memory at their on-disk widths.
#[derive(Debug, Clone)]
pub struct LoadedDb {
    src: IdArray,
    tgt: IdArray,
    src_offsets: Vec<usize>,
    tgt_offsets: Vec<usize>,
}

impl LoadedDb {
    pub fn from_records<I>(meta: &DbMeta, records: I) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = Result<Record, StoreError>>,
    {
        let mut db = Self {
            src: IdArray::with_width(meta.src_width),
            tgt: IdArray::with_width(meta.tgt_width),
            src_offsets: vec![0],
            tgt_offsets: vec![0],
        };
        for r in records {
            let r = r?;
            db.src.extend(&r.src);
            db.tgt.extend(&r.tgt);
            db.src_offsets.push(db.src_offsets.last().unwrap() + r.src.len());
            db.tgt_offsets.push(db.tgt_offsets.last().unwrap() + r.tgt.len());
        }
        Ok(db)
    }

    pub fn len(&self) -> usize {
        self.src_offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn src_len(&self, i: usize) -> usize {
        self.src_offsets[i + 1] - self.src_offsets[i]
    }

    pub fn tgt_len(&self, i: usize) -> usize {
        self.tgt_offsets[i + 1] - self.tgt_offsets[i]
    }

    pub fn get(&self, i: usize) -> Record {
        Record {
            src: self.src.slice(self.src_offsets[i], self.src_offsets[i + 1]),
            tgt: self.tgt.slice(self.tgt_offsets[i], self.tgt_offsets[i + 1]),
        }
    }

    /// Batches for one epoch; see [`plan_batches`].
    pub fn batch_iter(&self, opts: &BatchOptions) -> Result<BatchIter<'_>, StoreError> {
        let lens: Vec<(usize, usize)> = (0..self.len()).map(|i| (self.src_len(i), self.tgt_len(i))).collect();
        let plan = plan_batches(&lens, opts)?;
        Ok(BatchIter {
            db: self,
            plan: plan.into_iter(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchOptions {
    pub max_toks: usize,
    pub seed: u64,
    pub bucket_width: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            max_toks: DEFAULT_MAX_TOKENS,
            seed: 0,
            bucket_width: DEFAULT_BUCKET_WIDTH,
        }
    }
}

impl BatchOptions {
    pub fn new(max_toks: usize, seed: u64) -> Self {
        Self {
            max_toks,
            seed,
            ..Self::default()
        }
    }
}

/// Group record indices into batches for one epoch.
///
/// Records are bucketed by `tgt_len / bucket_width`. Bucket order and the
/// order inside each bucket are shuffled with a generator seeded from
/// `opts.seed`. Each bucket is then cut greedily into batches whose padded
/// size (count x longest sequence) stays within `max_toks` on both sides.
pub fn plan_batches(lens: &[(usize, usize)], opts: &BatchOptions) -> Result<Vec<Vec<usize>>, StoreError> {
    if opts.bucket_width == 0 {
        return Err(StoreError::Config("bucket width must be at least 1".into()));
    }
    for (i, &(s, t)) in lens.iter().enumerate() {
        for (side, len) in [(Side::Src, s), (Side::Tgt, t)] {
            if len > opts.max_toks {
                return Err(StoreError::SequenceTooLong {
                    record: i as u64,
                    side,
                    len,
                    max_toks: opts.max_toks,
                });
            }
        }
    }

    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &(_, t)) in lens.iter().enumerate() {
        buckets.entry(t / opts.bucket_width).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<Vec<usize>> = buckets.into_values().collect();
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    for mut bucket in order {
        bucket.shuffle(&mut rng);
        let mut cur: Vec<usize> = Vec::new();
        let (mut max_s, mut max_t) = (0usize, 0usize);
        for i in bucket {
            let (s, t) = lens[i];
            let (ns, nt) = (max_s.max(s), max_t.max(t));
            let n = cur.len() + 1;
            if !cur.is_empty() && (n * ns > opts.max_toks || n * nt > opts.max_toks) {
                batches.push(std::mem::take(&mut cur));
                max_s = s;
                max_t = t;
            } else {
                max_s = ns;
                max_t = nt;
            }
            cur.push(i);
        }
        if !cur.is_empty() {
            batches.push(cur);
        }
    }
    Ok(batches)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub records: Vec<Record>,
    pub src_padded: usize,
    pub tgt_padded: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub struct BatchIter<'a> {
    db: &'a LoadedDb,
    plan: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let indices = self.plan.next()?;
        let records: Vec<Record> = indices.iter().map(|&i| self.db.get(i)).collect();
        let n = records.len();
        let src_padded = n * records.iter().map(|r| r.src.len()).max().unwrap_or(0);
        let tgt_padded = n * records.iter().map(|r| r.tgt.len()).max().unwrap_or(0);
        Some(Batch {
            indices,
            records,
            src_padded,
            tgt_padded,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.plan.size_hint()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbStats {
    pub n_records: u64,
    pub src_tokens: u64,
    pub tgt_tokens: u64,
    pub src_len_hist: BTreeMap<u32, u64>,
    pub tgt_len_hist: BTreeMap<u32, u64>,
}

impl DbStats {
    pub fn add(&mut self, r: &Record) {
        self.n_records += 1;
        self.src_tokens += r.src.len() as u64;
        self.tgt_tokens += r.tgt.len() as u64;
        *self.src_len_hist.entry(r.src.len() as u32).or_default() += 1;
        *self.tgt_len_hist.entry(r.tgt.len() as u32).or_default() += 1;
    }
}

/// Record and token counts plus exact length histograms per side.
pub fn db_stats(db: &Db) -> Result<DbStats, StoreError> {
    let mut stats = DbStats::default();
    for r in db.records() {
        stats.add(&r?);
    }
    Ok(stats)
}
