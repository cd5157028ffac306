use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const SPEC: &str = r#"{ "lab": { "hosts": 3, "extras": 10 } }"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opsig")).args(args).current_dir(dir).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A dumped lab corpus with a trained model and a database, built once.
fn fixture() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        fs::write(d.join("spec.json"), SPEC).unwrap();
        let out = run(d, &["eval", "--spec", "spec.json", "--experiment", "lab", "--dump-corpus", "corpus"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(code(&run(d, &["train", "--corpus", "corpus/lab"])), 0);
        assert_eq!(code(&run(d, &["build-db", "--corpus", "corpus/lab"])), 0);
        dir
    })
    .path()
}

fn lab_files(pred: impl Fn(&str) -> bool) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(fixture().join("corpus/lab"))
        .unwrap()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "oplist"))
        .filter(|p| pred(p.file_stem().unwrap().to_str().unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn train_writes_model_and_reports_holdout() {
    let d = tempfile::tempdir().unwrap();
    let corpus = fixture().join("corpus/lab");
    let out = run(d.path(), &["train", "--corpus", corpus.to_str().unwrap(), "--out", "m"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("holdout precision"));
    for f in ["vocab.json", "model.json", "report.json"] {
        assert!(d.path().join("m").join(f).is_file(), "{f}");
    }
}

#[test]
fn train_rejects_bad_input() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(d.path(), &["train", "--corpus", "missing"])), 3);
    let corpus = fixture().join("corpus/lab");
    let corpus = corpus.to_str().unwrap();
    assert_eq!(code(&run(d.path(), &["train", "--corpus", corpus, "--n", "10"])), 2);
    assert_eq!(code(&run(d.path(), &["train", "--corpus", corpus, "--classifier", "xgboost"])), 2);
    assert_eq!(code(&run(d.path(), &["train", "--corpus", corpus, "--theta", "1.5"])), 2);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("run.conf"), "# defaults\nn = 10\n").unwrap();
    let corpus = fixture().join("corpus/lab");
    let corpus = corpus.to_str().unwrap();
    assert_eq!(code(&run(d.path(), &["--config", "run.conf", "train", "--corpus", corpus])), 2);
    let out = run(d.path(), &["--config", "run.conf", "train", "--corpus", corpus, "--n", "3", "--out", "m"]);
    assert_eq!(code(&out), 0);
    let vocab = fs::read_to_string(d.path().join("m/vocab.json")).unwrap();
    assert!(vocab.contains("\"n\": 3"));
    fs::write(d.path().join("bad.conf"), "colour = red\n").unwrap();
    assert_eq!(code(&run(d.path(), &["--config", "bad.conf", "train", "--corpus", corpus])), 2);
}

#[test]
fn build_db_prints_counts() {
    let d = tempfile::tempdir().unwrap();
    let f = fixture();
    let out = run(
        d.path(),
        &[
            "build-db",
            "--corpus",
            f.join("corpus/lab").to_str().unwrap(),
            "--model",
            f.join("model").to_str().unwrap(),
            "--db",
            "db.json",
        ],
    );
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("labmal\t")), "{text}");
    assert!(text.contains("duplicates merged"), "{text}");
}

#[test]
fn build_db_without_malware_exits_4() {
    let d = tempfile::tempdir().unwrap();
    fs::create_dir(d.path().join("clean")).unwrap();
    for p in lab_files(|s| s.starts_with("extra")) {
        fs::copy(&p, d.path().join("clean").join(p.file_name().unwrap())).unwrap();
    }
    let model = fixture().join("model");
    assert_eq!(code(&run(d.path(), &["build-db", "--corpus", "clean", "--model", model.to_str().unwrap()])), 4);
}

#[test]
fn scan_exit_codes() {
    let f = fixture();
    let infected = lab_files(|s| s.ends_with("-v1"));
    let out = run(f, &["scan", infected[0].to_str().unwrap()]);
    assert_eq!(code(&out), 10);
    let row = stdout(&out).lines().nth(1).unwrap_or_default().split_whitespace().map(str::to_string).collect::<Vec<_>>();
    assert_eq!(row[1..3], ["known_malware", "labmal"], "{}", stdout(&out));

    let clean: Vec<String> = lab_files(|s| s.starts_with("extra")).iter().map(|p| p.display().to_string()).collect();
    let mut args = vec!["scan"];
    args.extend(clean.iter().map(String::as_str));
    let out = run(f, &args);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains(&format!("{} scanned: {} clean", clean.len(), clean.len())));

    assert_eq!(code(&run(f, &["scan"])), 2);
}

#[test]
fn scan_writes_json_reports() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let target = lab_files(|s| s.ends_with("-v2"))[0].clone();
    let db = f.join("signatures.json");
    let out = run(d.path(), &["scan", "--db", db.to_str().unwrap(), "--out", "r.json", target.to_str().unwrap()]);
    assert_eq!(code(&out), 10);
    let reports: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 1);
}

#[test]
fn empty_database_exits_4() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let mut db: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.join("signatures.json")).unwrap()).unwrap();
    db["signatures"] = serde_json::json!([]);
    fs::write(d.path().join("empty.json"), db.to_string()).unwrap();
    let target = lab_files(|s| s.ends_with("-v1"))[0].clone();
    assert_eq!(code(&run(d.path(), &["scan", "--db", "empty.json", target.to_str().unwrap()])), 4);
}

#[test]
fn strict_and_lenient_inputs() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let good = lab_files(|s| s.starts_with("extra-000"))[0].clone();
    fs::copy(&good, d.path().join("good.oplist")).unwrap();
    fs::write(d.path().join("broken.oplist"), "program x\nmethod m\n  not-an-opcode\n").unwrap();
    let db = f.join("signatures.json");
    let db = db.to_str().unwrap();
    assert_eq!(code(&run(d.path(), &["scan", "--db", db, "."])), 3);
    let out = run(d.path(), &["scan", "--db", db, "--lenient", "."]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("1 scanned"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.oplist"));
}

#[test]
fn parse_summarizes_and_rewrites() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("Hello.smali"),
        ".class public LHello;\n.super Ljava/lang/Object;\n.method public run()V\n    .registers 2\n    const/4 v0, 0x0\n    if-eqz v0, :end\n    nop\n    :end\n    return-void\n.end method\n",
    )
    .unwrap();
    let out = run(d.path(), &["parse", "--out", "norm", "Hello.smali"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.starts_with("Hello\t"), "{text}");
    assert!(text.contains("4 instructions\t3 blocks\t3 edges"), "{text}");
    assert!(d.path().join("norm/Hello.oplist").is_file());
}
