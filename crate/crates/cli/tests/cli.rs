use std::fs;
use std::path::Path;

use tcnn::io::pgm::read_pgm;
use tcnn_cli::cli_dispatch_to;

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut argv = vec!["tcnn"];
    argv.extend_from_slice(args);
    let code = cli_dispatch_to(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

const SMALL: [&str; 6] = ["--n-train", "64", "--n-test", "32", "--batch-size", "32"];

fn train_cnn(dir: &Path, dtype: &str) -> String {
    let ckpt = p(dir, "cnn.ckpt");
    let mut args = vec!["--dtype", dtype, "train", "--out", &ckpt, "--epochs", "1"];
    args.extend_from_slice(&SMALL);
    let (code, _) = run(&args);
    assert_eq!(code, 0);
    ckpt
}

#[test]
fn verify_strict_transform_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cnn = train_cnn(dir.path(), "f32");
    let t = p(dir.path(), "t.ckpt");
    let report = p(dir.path(), "report.txt");
    let (code, text) = run(&["transform", "-i", &cnn, "-o", &t, "--mode", "strict", "--report", &report]);
    assert_eq!(code, 0, "{text}");
    assert!(fs::read_to_string(&report).unwrap().contains("added"));
    let (code, text) = run(&["verify", &cnn, &t, "--probes", "10"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("max abs deviation") && text.contains("PASS"), "{text}");
}

#[test]
fn verify_paper_transform_reports_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cnn = train_cnn(dir.path(), "f32");
    let t = p(dir.path(), "t.ckpt");
    assert_eq!(run(&["transform", "-i", &cnn, "-o", &t]).0, 0);
    let (code, text) = run(&["verify", &cnn, &t, "--probes", "5"]);
    assert_eq!(code, 1);
    assert!(text.contains("FAIL"));
}

#[test]
fn inspect_writes_pgm_per_head_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cnn = train_cnn(dir.path(), "f32");
    let t = p(dir.path(), "t.ckpt");
    assert_eq!(run(&["transform", "-i", &cnn, "-o", &t]).0, 0);
    let out = dir.path().join("maps");
    let (code, text) = run(&["inspect", "-i", &t, "--image", "3", "--query", "1,2", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{text}");
    // tiny: 4 GPSA layers × 9 heads.
    let pgms: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    assert_eq!(pgms.len(), 36);
    for path in &pgms {
        let bytes = fs::read(path).unwrap();
        assert!(bytes.starts_with(b"P5\n"));
        let (w, h, px) = read_pgm(&bytes).unwrap();
        assert_eq!(px.len(), w * h);
    }
    let csv = fs::read_to_string(out.join("gates.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 36);
    assert!(csv.lines().nth(1).unwrap().contains("0.731059,1.000000"));
}

#[test]
fn inspect_rejects_cnn_and_bad_query() {
    let dir = tempfile::tempdir().unwrap();
    let cnn = train_cnn(dir.path(), "f32");
    assert_eq!(run(&["inspect", "-i", &cnn]).0, 1);
    let t = p(dir.path(), "t.ckpt");
    assert_eq!(run(&["transform", "-i", &cnn, "-o", &t]).0, 0);
    assert_eq!(run(&["inspect", "-i", &t, "--query", "40,0", "--out-dir", &p(dir.path(), "x")]).0, 1);
}

#[test]
fn unknown_flag_is_usage_error() {
    let (code, _) = run(&["train", "--no-such-flag"]);
    assert_ne!(code, 0);
    assert_ne!(run(&["frobnicate"]).0, 0);
    assert_ne!(run(&["verify"]).0, 0);
}

#[test]
fn truncated_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cnn = train_cnn(dir.path(), "f32");
    let bytes = fs::read(&cnn).unwrap();
    let cut = p(dir.path(), "cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() / 3]).unwrap();
    assert_eq!(run(&["--dtype", "f32", "eval", "-i", &cut]).0, 1);
}

#[test]
fn eval_at_other_resolutions() {
    let dir = tempfile::tempdir().unwrap();
    let cnn = train_cnn(dir.path(), "f32");
    let t = p(dir.path(), "t.ckpt");
    assert_eq!(run(&["transform", "-i", &cnn, "-o", &t]).0, 0);
    for res in ["16", "24", "40"] {
        let (code, text) = run(&["eval", "-i", &t, "--res", res]);
        assert_eq!(code, 0, "{text}");
        assert!(text.starts_with(&format!("res {res}:")));
    }
}

#[test]
fn finetune_and_lr_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cnn = train_cnn(dir.path(), "f32");
    let t = p(dir.path(), "t.ckpt");
    assert_eq!(run(&["transform", "-i", &cnn, "-o", &t]).0, 0);
    let ft = p(dir.path(), "ft.ckpt");
    let metrics = p(dir.path(), "ft.csv");
    let (code, text) = run(&[
        "finetune", "-i", &t, "-o", &ft, "--epochs", "1", "--res", "24", "--max-lr", "1e-3", "--gating-lr", "0.5",
        "--dr", "0.1", "--metrics", &metrics,
    ]);
    assert_eq!(code, 0, "{text}");
    let csv = fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("epoch,lr,train_loss,train_acc,test_acc,gate_L0_H0"));
    let sweep = p(dir.path(), "sweep.csv");
    let logs = dir.path().join("logs");
    let (code, text) =
        run(&["lr-sweep", "-i", &t, "--lrs", "1e-4,1e-3,1e-2", "--epochs", "1", "-o", &sweep, "--logs", logs.to_str().unwrap()]);
    assert_eq!(code, 0, "{text}");
    assert_eq!(text.matches("dip depth").count(), 3);
    assert_eq!(fs::read_to_string(&sweep).unwrap().lines().count(), 4);
    assert_eq!(fs::read_dir(&logs).unwrap().count(), 3);
}

fn experiment(dir: &Path, name: &str) -> String {
    let out = p(dir, name);
    let mut args = vec![
        "--dtype", "f64", "experiment", "--t1", "0,1,2", "--same-optimizer", "--finetune-epochs", "1", "--epochs", "2",
        "-o", &out,
    ];
    args.extend_from_slice(&SMALL);
    let (code, text) = run(&args);
    assert_eq!(code, 0, "{text}");
    fs::read_to_string(out).unwrap()
}

#[test]
fn experiment_csv_is_reproducible_in_f64() {
    let dir = tempfile::tempdir().unwrap();
    let a = experiment(dir.path(), "a.csv");
    let b = experiment(dir.path(), "b.csv");
    assert_eq!(a, b);
    let names: Vec<&str> = a.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["Vanilla hybrid", "T-CNN*", "Vanilla CNN", "T-CNN", "Vanilla CNN + ft"]);
}

#[test]
fn experiment_budget_mismatch_fails() {
    let mut args = vec!["experiment", "--t1", "1", "--t2", "5", "--same-optimizer", "--epochs", "2"];
    args.extend_from_slice(&SMALL);
    assert_eq!(run(&args).0, 1);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "run.cfg");
    fs::write(&cfg, "# small run\ndata.n_train = 32\ndata.n_test = 16\ndata.res = 16\ntrain.epochs = 3\ntrain.batch_size = 16\n")
        .unwrap();
    let ckpt = p(dir.path(), "c.ckpt");
    let metrics = p(dir.path(), "m.csv");
    let (code, text) = run(&["--config", &cfg, "train", "--out", &ckpt, "--epochs", "1", "--metrics", &metrics]);
    assert_eq!(code, 0, "{text}");
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 2);
    let ck = tcnn::io::checkpoint::load_checkpoint::<f32>(Path::new(&ckpt)).unwrap();
    assert_eq!(ck.meta.get("data.res"), Some("16"));
    assert_eq!(ck.meta.get("train.batch_size"), Some("16"));
    assert_eq!(ck.meta.get("train.epochs"), Some("1"));
    assert_eq!(ck.meta.get("train.res"), Some("16"));
    let bad = p(dir.path(), "bad.cfg");
    fs::write(&bad, "train.epochs 3\n").unwrap();
    assert_eq!(run(&["--config", &bad, "train", "--out", &ckpt]).0, 1);
}

#[test]
fn gradcheck_command_passes() {
    let (code, text) = run(&["gradcheck"]);
    assert_eq!(code, 0, "{text}");
    assert_eq!(text.matches(" ok").count(), 9);
}
