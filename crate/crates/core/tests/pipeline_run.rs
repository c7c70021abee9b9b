use std::fs;
use std::path::Path;
use std::sync::Arc;

use forge_core::catalog::{Cache, FileTransport};
use forge_core::pipeline::{run_pipeline, PipelineConfig, PipelineError, STAGES};
use forge_core::store::{db_stats, Db};
use forge_core::vocab::Vocab;

const WORDS_DE: &[&str] = &["haus", "katze", "hund", "baum", "wasser", "licht", "stadt", "zeit"];
const WORDS_EN: &[&str] = &["house", "cat", "dog", "tree", "water", "light", "city", "time"];

fn sentence(words: &[&str], i: usize) -> String {
    (0..3 + i % 5)
        .map(|k| words[(i * 7 + k * 3) % words.len()])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Two toy datasets (tsv and moses) plus one held-out set, with a catalog.
fn write_fixture(root: &Path) {
    let data = root.join("data");
    fs::create_dir_all(&data).unwrap();
    let mut tsv = String::new();
    for i in 0..120 {
        tsv.push_str(&format!("{}\t{}\n", sentence(WORDS_DE, i), sentence(WORDS_EN, i)));
    }
    tsv.push_str("siehe www.example.org\tsee www.example.org\n");
    fs::write(data.join("toy_a.tsv"), tsv).unwrap();
    let (mut de, mut en) = (String::new(), String::new());
    for i in 200..290 {
        de.push_str(&sentence(WORDS_DE, i));
        de.push('\n');
        en.push_str(&sentence(WORDS_EN, i));
        en.push('\n');
    }
    fs::write(data.join("toy_b.de"), de).unwrap();
    fs::write(data.join("toy_b.en"), en).unwrap();
    fs::write(
        data.join("held.tsv"),
        format!("{}\t{}\n", sentence(WORDS_DE, 3), sentence(WORDS_EN, 3)),
    )
    .unwrap();

    let cat = root.join("catalog");
    fs::create_dir_all(&cat).unwrap();
    let d = data.display();
    fs::write(
        cat.join("index.tsv"),
        format!(
            "toy_a\tdeu\teng\tfile://{d}/toy_a.tsv\ttsv\ttoy\n\
             toy_b\tdeu\teng\tfile://{d}/toy_b.de\tmoses\ttoy\n\
             toy_held\tdeu\teng\tfile://{d}/held.tsv\ttsv\ttoy\n"
        ),
    )
    .unwrap();
    fs::write(cat.join("citations.bib"), "@misc{toy,\n  title = {Toy data}\n}\n").unwrap();
}

fn config(root: &Path) -> PipelineConfig {
    let text = format!(
        "pair = \"deu-eng\"\ntrain = [\"toy_a\", \"toy_b\"]\ntests = [\"toy_held\"]\ncatalog = \"{}\"\n\
         [vocab]\nscheme = \"bpe\"\nsrc_size = 60\ntgt_size = 60\n[db]\nshards = 3\n",
        root.join("catalog").display()
    );
    PipelineConfig::from_toml(&text).unwrap()
}

fn run_with_workers(
    cfg: &PipelineConfig,
    cache: &Cache,
    out: &Path,
    workers: usize,
) -> forge_core::pipeline::RunReport {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
    pool.install(|| run_pipeline(cfg, cache, out)).unwrap()
}

#[test]
fn end_to_end_then_fully_cached() {
    let root = tempfile::tempdir().unwrap();
    write_fixture(root.path());
    let cfg = config(root.path());
    let cache = Cache::new(root.path().join("cache"), Arc::new(FileTransport));
    let out = root.path().join("run");

    let first = run_with_workers(&cfg, &cache, &out, 2);
    assert!(first.stages.iter().all(|s| !s.cache_hit));
    for f in [
        "config.resolved.toml",
        "manifest.json",
        "get/train.src",
        "get/signature.json",
        "get/citations.bib",
        "get/tests/toy_held.src",
        "clean/train.tgt",
        "clean/clean.stats.json",
        "vocab/src.model",
        "vocab/tgt.model",
        "db/meta.json",
        "sample/epoch.json",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    for s in STAGES {
        assert!(!out.join(format!("{s}.tmp")).exists());
    }
    let resolved = PipelineConfig::load(&out.join("config.resolved.toml")).unwrap();
    assert_eq!(resolved, cfg);

    // 211 merged pairs: the url pair and the held-out overlap go, plus duplicates
    let stats = first.clean_stats;
    assert_eq!(stats.n_input, 211);
    assert_eq!(stats.n_url, 1);
    assert!(stats.n_overlap >= 1);
    let db = Db::open(&out.join("db")).unwrap();
    assert_eq!(db.meta().shards.len(), 3);
    assert_eq!(db_stats(&db).unwrap().n_records, stats.n_kept);
    let sv = Vocab::load(&out.join("vocab/src.model")).unwrap();
    assert!(sv.len() <= 60);

    let second = run_with_workers(&cfg, &cache, &out, 2);
    assert!(second.all_cached(), "{:?}", second.stages);
    assert_eq!(first.manifest_digest, second.manifest_digest);

    // touching an output invalidates that stage and nothing upstream
    fs::write(out.join("vocab/tgt.model"), "junk").unwrap();
    let third = run_with_workers(&cfg, &cache, &out, 2);
    let hits: Vec<bool> = third.stages.iter().map(|s| s.cache_hit).collect();
    assert_eq!(hits, vec![true, true, false, true, true]);
    assert_eq!(third.manifest_digest, first.manifest_digest);
}

#[test]
fn digest_is_independent_of_worker_count() {
    let root = tempfile::tempdir().unwrap();
    write_fixture(root.path());
    let cfg = config(root.path());
    let cache = Cache::new(root.path().join("cache"), Arc::new(FileTransport));
    let a = run_with_workers(&cfg, &cache, &root.path().join("a"), 1);
    let b = run_with_workers(&cfg, &cache, &root.path().join("b"), 4);
    assert_eq!(a.manifest_digest, b.manifest_digest);
}

#[test]
fn unknown_dataset_is_named() {
    let root = tempfile::tempdir().unwrap();
    write_fixture(root.path());
    let mut cfg = config(root.path());
    cfg.train.push("no_such_set".into());
    let cache = Cache::new(root.path().join("cache"), Arc::new(FileTransport));
    let err = run_pipeline(&cfg, &cache, &root.path().join("run")).unwrap_err();
    assert!(matches!(err, PipelineError::Stage { stage: "get", .. }));
    assert!(err.to_string().contains("no_such_set"), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(root.path().join("run/get.tmp").exists());
    assert!(!root.path().join("run/get").exists());
}
