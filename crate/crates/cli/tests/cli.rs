use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn forge(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_forge"));
    cmd.args(args)
        .env("RUST_LOG", "off")
        .env_remove("FORGE_CATALOG")
        .env_remove("FORGE_WORKERS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn with_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

#[test]
fn iso_prints_code_and_name() {
    let o = forge(&["iso", "eng", "de", "French", "en-US"], &[]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "eng\tEnglish\ndeu\tGerman\nfra\tFrench\neng\tEnglish\n");
}

#[test]
fn exit_codes_by_failure_class() {
    assert_eq!(forge(&["iso", "notalanguage"], &[]).status.code(), Some(2));
    assert_eq!(forge(&["frobnicate"], &[]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        forge(&["db", "stats", dir.path().to_str().unwrap()], &[]).status.code(),
        Some(3)
    );

    let o = forge(&["--error-json", "list", "-l", "xx-yy"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn bundled_listing_is_pair_symmetric() {
    let a = stdout(&forge(&["list", "-l", "deu-eng"], &[]));
    let b = stdout(&forge(&["list", "-l", "en-de"], &[]));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let filtered = stdout(&forge(&["list", "-l", "deu-eng", "-n", "europarl"], &[]));
    assert!(filtered.lines().all(|l| l.contains("europarl")));
    let full = stdout(&forge(&["list", "-l", "deu-eng", "-n", "europarl", "--full"], &[]));
    assert!(full.contains("@inproceedings{europarl"));
}

fn write_pairs(dir: &Path) {
    let de = [
        "das haus ist rot .",
        "der hund schläft .",
        "die katze sitzt auf der matte .",
        "siehe www.example.org",
    ];
    let en = [
        "the house is red .",
        "the dog sleeps .",
        "the cat sits on the mat .",
        "see www.example.org",
    ];
    let (mut s, mut t) = (String::new(), String::new());
    for i in 0..60 {
        s.push_str(&format!("{} {i}\n", de[i % 4]));
        t.push_str(&format!("{} {i}\n", en[i % 4]));
    }
    fs::write(dir.join("c.src"), s).unwrap();
    fs::write(dir.join("c.tgt"), t).unwrap();
}

#[test]
fn clean_vocab_db_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_pairs(d);
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();

    let o = forge(
        &[
            "clean",
            "--src",
            &p("c.src"),
            "--tgt",
            &p("c.tgt"),
            "--out-dir",
            &p("out"),
        ],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stats: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(stats["n_input"], 60);
    assert_eq!(stats["n_url"], 15);
    assert_eq!(fs::read_to_string(d.join("out/c.src")).unwrap().lines().count(), 45);
    assert!(d.join("out/clean.stats.json").is_file());
    // cleaning in place is refused
    let o = forge(
        &["clean", "--src", &p("c.src"), "--tgt", &p("c.tgt"), "--out-dir", &p("")],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));

    for side in ["src", "tgt"] {
        let o = forge(
            &[
                "vocab",
                "train",
                "--scheme",
                "bpe",
                "--size",
                "80",
                "--in",
                &p(&format!("out/c.{side}")),
                "--out",
                &p(&format!("{side}.model")),
            ],
            &[],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let enc = with_stdin(&["vocab", "encode", "--model", &p("src.model")], "das haus ist rot .\n");
    assert!(enc.status.success());
    let dec = with_stdin(&["vocab", "decode", "--model", &p("src.model")], &stdout(&enc));
    assert_eq!(stdout(&dec), "das haus ist rot .\n");

    let inputs = format!("{},{}", p("out/c.src"), p("out/c.tgt"));
    let o = forge(
        &[
            "db",
            "write",
            "--src-model",
            &p("src.model"),
            "--tgt-model",
            &p("tgt.model"),
            "--in",
            &inputs,
            "--shards",
            "2",
            "--out",
            &p("db"),
        ],
        &[("FORGE_WORKERS", Path::new("1"))],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stats: serde_json::Value = serde_json::from_str(&stdout(&forge(&["db", "stats", &p("db")], &[]))).unwrap();
    assert_eq!(stats["n_records"], 45);
    assert_eq!(
        stdout(&forge(&["stats", &p("db")], &[])),
        stdout(&forge(&["db", "stats", &p("db")], &[]))
    );

    let a = forge(&["db", "sample", "--max-toks", "60", "--seed", "3", &p("db")], &[]);
    let b = forge(&["db", "sample", "--max-toks", "60", "--seed", "3", &p("db")], &[]);
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).starts_with("batch 0\t"));
}

#[test]
fn get_and_pipeline_from_local_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_pairs(d);
    let tsv: String = fs::read_to_string(d.join("c.src"))
        .unwrap()
        .lines()
        .zip(fs::read_to_string(d.join("c.tgt")).unwrap().lines())
        .map(|(s, t)| format!("{s}\t{t}\n"))
        .collect();
    fs::write(d.join("toy.tsv"), tsv).unwrap();
    fs::copy(d.join("c.src"), d.join("held.de")).unwrap();
    fs::copy(d.join("c.tgt"), d.join("held.en")).unwrap();
    fs::create_dir(d.join("catalog")).unwrap();
    fs::write(
        d.join("catalog/index.tsv"),
        format!(
            "toy\tdeu\teng\tfile://{0}/toy.tsv\ttsv\ttoy\ntoy_moses\tdeu\teng\tfile://{0}/held.de\tmoses\ttoy\n",
            d.display()
        ),
    )
    .unwrap();
    fs::write(d.join("catalog/citations.bib"), "@misc{toy,\n  title = {Toy}\n}\n").unwrap();
    let env = [("FORGE_CATALOG", d.join("catalog")), ("FORGE_CACHE", d.join("cache"))];
    let env: Vec<(&str, &Path)> = env.iter().map(|(k, v)| (*k, v.as_path())).collect();
    let out = d.join("merged");

    let o = forge(
        &[
            "get",
            "-l",
            "deu-eng",
            "--merge",
            "-tr",
            "toy",
            "-ts",
            "toy_moses",
            "-o",
            out.to_str().unwrap(),
        ],
        &env,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(out.join("train.src")).unwrap(),
        fs::read_to_string(d.join("c.src")).unwrap()
    );
    assert!(out.join("tests/toy_moses.tgt").is_file());

    let o = forge(
        &["get", "-l", "deu-eng", "-tr", "missing", "-o", out.to_str().unwrap()],
        &env,
    );
    assert_eq!(o.status.code(), Some(2));

    fs::write(
        d.join("run.toml"),
        "pair = \"deu-eng\"\ntrain = [\"toy\"]\n[vocab]\nsrc_size = 70\ntgt_size = 70\n[db]\nshards = 2\n",
    )
    .unwrap();
    let run = |dir: &str| {
        forge(
            &[
                "pipeline",
                "--config",
                d.join("run.toml").to_str().unwrap(),
                "--out",
                d.join(dir).to_str().unwrap(),
            ],
            &env,
        )
    };
    let first = run("run");
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let second: serde_json::Value = serde_json::from_str(&stdout(&run("run"))).unwrap();
    assert!(second["stages"]
        .as_array()
        .unwrap()
        .iter()
        .all(|s| s["cache_hit"] == true));
    let first: serde_json::Value = serde_json::from_str(&stdout(&first)).unwrap();
    assert_eq!(first["manifest_digest"], second["manifest_digest"]);

    let summary: serde_json::Value =
        serde_json::from_str(&stdout(&forge(&["stats", d.join("run").to_str().unwrap()], &env))).unwrap();
    assert_eq!(summary["manifest_digest"], first["manifest_digest"]);
    assert_eq!(summary["db"]["n_records"], summary["clean"]["n_kept"]);
}
