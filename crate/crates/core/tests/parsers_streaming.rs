//! Peak heap use while parsing must not grow with the input size.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use flate2::write::GzEncoder;
use forge_core::parsers::{detect_format, parse, ParseOptions};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        CURRENT.fetch_sub(layout.size(), Ordering::SeqCst);
        System.dealloc(ptr, layout)
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

fn peak_while(f: impl FnOnce()) -> usize {
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    f();
    PEAK.load(Ordering::SeqCst) - base
}

fn write_gz(path: &Path, rows: usize, tmx: bool) {
    let mut w = BufWriter::new(GzEncoder::new(File::create(path).unwrap(), Default::default()));
    if tmx {
        writeln!(w, "<tmx><body>").unwrap();
    }
    for i in 0..rows {
        if tmx {
            writeln!(
                w,
                "<tu><tuv xml:lang=\"de\"><seg>zeile {i} mit etwas text</seg></tuv><tuv xml:lang=\"en\"><seg>line {i} with some text</seg></tuv></tu>"
            )
            .unwrap();
        } else {
            writeln!(w, "zeile {i} mit etwas text\tline {i} with some text").unwrap();
        }
    }
    if tmx {
        writeln!(w, "</body></tmx>").unwrap();
    }
    w.into_inner().unwrap().finish().unwrap();
}

fn count_pairs(path: &Path) -> usize {
    let tag = detect_format(path).unwrap();
    let pair = "deu-eng".parse().unwrap();
    parse(path, &tag, "big", pair, ParseOptions::default())
        .unwrap()
        .map(Result::unwrap)
        .count()
}

#[test]
fn peak_memory_is_flat_in_corpus_size() {
    let dir = tempfile::tempdir().unwrap();
    for (name, tmx) in [("x.tsv.gz", false), ("x.tmx.gz", true)] {
        let small = dir.path().join(format!("small-{name}"));
        let large = dir.path().join(format!("large-{name}"));
        write_gz(&small, 1_000, tmx);
        write_gz(&large, 100_000, tmx);
        let mut n = 0;
        let p_small = peak_while(|| n = count_pairs(&small));
        assert_eq!(n, 1_000);
        let p_large = peak_while(|| n = count_pairs(&large));
        assert_eq!(n, 100_000);
        // the large file decompresses to >5 MB; buffers stay well under 1 MB
        assert!(p_large < 1 << 20, "{name}: peak {p_large} bytes");
        assert!(p_large < p_small + (64 << 10), "{name}: {p_small} -> {p_large}");
    }
}
