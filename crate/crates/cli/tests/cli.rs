use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bytescope::synthetic::write_file_corpus;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bytescope"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: PathBuf,
    cache: PathBuf,
}

/// Ingested synthetic corpus: 5 classes of 30 files each.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let corpus = root.join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    write_file_corpus(&corpus, 30, 512, 1).unwrap();
    let cache = root.join("features.csv");
    let out = run(&["ingest", "--dir", s(&corpus), "--out", s(&cache)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    Fixture {
        _dir: dir,
        root,
        corpus,
        cache,
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["train", "--bogus"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["train", "--features", "x.csv", "--algo", "knn", "--labeled", "5", "--k", "7", "--out", "m"])), 2);
    assert_eq!(code(&run(&["train", "--features", "x.csv", "--algo", "xgboost", "--labeled", "5", "--out", "m"])), 2);
    assert_eq!(code(&run(&["evaluate", "--model", "m", "--features", "f", "--perturb-headers", "--out", "r"])), 2);
    assert_eq!(code(&run(&["sweep", "--features", "f", "--algos", "svm", "--out", "o"])), 2);
    assert_eq!(code(&run(&["classify", "--model", "m"])), 2);
}

#[test]
fn ingest_missing_and_empty_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["ingest", "--dir", s(&dir.path().join("nope")), "--out", s(&dir.path().join("f.csv"))]);
    assert_eq!(code(&out), 1);

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let cache = dir.path().join("e.csv");
    let out = run(&["ingest", "--dir", s(&empty), "--out", s(&cache)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let text = std::fs::read_to_string(&cache).unwrap();
    assert_eq!(text.lines().count(), 2, "header and checksum only");
}

#[test]
fn train_evaluate_classify_pipeline() {
    let f = fixture();
    let model = f.root.join("tree.bin");
    let test = f.root.join("test.csv");
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--features", s(&f.cache), "--algo", "tree", "--labeled", "60", "--seed", "7", "--out", s(out)];
        args.extend_from_slice(extra);
        run(&args)
    };
    assert_eq!(code(&train(&model, &["--test-out", s(&test)])), 0);
    let again = f.root.join("tree2.bin");
    assert_eq!(code(&train(&again, &[])), 0);
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&again).unwrap());

    let zero = run(&["train", "--features", s(&f.cache), "--algo", "mlp", "--labeled", "0", "--out", s(&f.root.join("z.bin"))]);
    assert_eq!(code(&zero), 1);
    assert!(String::from_utf8_lossy(&zero.stderr).contains("supervised"));

    let reports = f.root.join("reports");
    let out = run(&[
        "evaluate",
        "--model",
        s(&model),
        "--features",
        s(&test),
        "--perturb-headers",
        "--source-dir",
        s(&f.corpus),
        "--out",
        s(&reports),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let acc: f64 = stdout.lines().next().unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(stdout.contains("delta\t"));
    assert!(reports.join("confusion_tree.csv").exists());
    assert!(reports.join("confusion_tree_perturbed.csv").exists());
    assert!(reports.join("summary.csv").exists());

    // corrupt model
    let mut bytes = std::fs::read(&model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    let bad = f.root.join("bad.bin");
    std::fs::write(&bad, bytes).unwrap();
    let out = run(&["evaluate", "--model", s(&bad), "--features", s(&test), "--out", s(&reports)]);
    assert_eq!(code(&out), 1);

    // classify by content: an image renamed to .txt
    let renamed = f.root.join("holiday.txt");
    std::fs::copy(f.corpus.join("img_0003.img"), &renamed).unwrap();
    let empty = f.root.join("empty.bin");
    std::fs::write(&empty, b"").unwrap();
    let out = run(&["classify", "--model", s(&model), s(&renamed), s(&empty), s(&renamed)]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], lines[1]);
    let fields: Vec<&str> = lines[0].split('\t').collect();
    assert_eq!(fields.len(), 4);
    assert_eq!(fields[1], "img");
    let probs: Vec<f64> = fields[3].split(',').map(|p| p.parse().unwrap()).collect();
    assert_eq!(probs.len(), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty.bin"));

    let out = run(&["classify", "--model", s(&model), s(&empty)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn sgan_training_is_deterministic() {
    let f = fixture();
    let a = f.root.join("a.bin");
    let b = f.root.join("b.bin");
    for out in [&a, &b] {
        let res = run(&[
            "train", "--features", s(&f.cache), "--algo", "sgan", "--labeled", "20", "--epochs", "2", "--out", s(out),
        ]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let history = std::fs::read_to_string(f.root.join("a.bin.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,d_real_loss"));
}

#[test]
fn header_gap_is_tracked_per_epoch() {
    let f = fixture();
    let model = f.root.join("mlp.bin");
    let res = run(&[
        "train", "--features", s(&f.cache), "--algo", "mlp", "--labeled", "40", "--epochs", "3", "--out", s(&model),
        "--header-gap", s(&f.corpus),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let gap = std::fs::read_to_string(f.root.join("mlp.bin.header_gap.csv")).unwrap();
    let mut lines = gap.lines();
    assert_eq!(lines.next(), Some("epoch,original_accuracy,perturbed_accuracy,delta"));
    assert_eq!(lines.count(), 3);

    let missing = run(&[
        "train", "--features", s(&f.cache), "--algo", "sgan", "--labeled", "40", "--epochs", "1", "--out", s(&model),
        "--header-gap", s(&f.root.join("nowhere")),
    ]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn text_only_corpus_is_unaffected_by_header_overwrite() {
    let f = fixture();
    let text = f.root.join("text");
    std::fs::create_dir(&text).unwrap();
    for entry in std::fs::read_dir(&f.corpus).unwrap() {
        let path = entry.unwrap().path();
        if matches!(path.extension().and_then(|e| e.to_str()), Some("txt" | "xml" | "html")) {
            std::fs::copy(&path, text.join(path.file_name().unwrap())).unwrap();
        }
    }
    let cache = f.root.join("text.csv");
    assert_eq!(code(&run(&["ingest", "--dir", s(&text), "--out", s(&cache)])), 0);
    let model = f.root.join("knn.bin");
    let test = f.root.join("text_test.csv");
    let out = run(&[
        "train", "--features", s(&cache), "--algo", "knn", "--k", "3", "--labeled", "72", "--out", s(&model), "--test-out", s(&test),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "evaluate", "--model", s(&model), "--features", s(&test), "--perturb-headers", "--source-dir", s(&text), "--out",
        s(&f.root.join("r")),
    ]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8(out.stdout).unwrap().contains("delta\t+0.00000"));
}

#[test]
fn sweep_layout_and_budget_validation() {
    let f = fixture();
    let out_csv = f.root.join("sweep.csv");
    let out = run(&[
        "sweep", "--features", s(&f.cache), "--budgets", "120,60,10", "--seeds", "2", "--algos", "tree,knn_k1", "--out", s(&out_csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n_supervised,tree,knn_k1");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("120,"));

    let single = f.root.join("one.csv");
    let out = run(&["sweep", "--features", s(&f.cache), "--budgets", "30", "--seeds", "1", "--algos", "tree", "--out", s(&single)]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read_to_string(&single).unwrap().lines().next().unwrap(), "n_supervised,tree");

    let out = run(&["sweep", "--features", s(&f.cache), "--budgets", "121", "--algos", "tree", "--out", s(&single)]);
    assert_eq!(code(&out), 1);
}
