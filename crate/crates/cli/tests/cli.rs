use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--dim", "4", "--heads", "2", "--pooled-len", "3", "--hidden", "4", "--attention-hidden", "4", "--batch-size", "16",
];

fn surge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surge"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("SURGE_DATA")
        .env_remove("SURGE_OUT")
        .env_remove("SURGE_CONFIG")
        .env_remove("SURGE_CHECKPOINT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn synth(dir: &Path) {
    ok(&surge(dir, &["synth", "--out", "d.txt", "--users", "24", "--items", "40", "--clusters", "4", "--seq-len", "20", "--max-len", "16"]));
}

fn train(dir: &Path, out_dir: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", "d.txt", "--out-dir", out_dir, "--epochs", "2"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    surge(dir, &args)
}

#[test]
fn synth_train_evaluate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let text = ok(&train(dir, "run", &["--dump-graphs", "2", "--dump-assignments", "1"]));
    assert!(text.contains("test.auc = "));
    for f in ["report.json", "timings.json", "config.toml", "checkpoint.txt", "graph_0.txt", "graph_1.txt", "assignment_0.txt"] {
        assert!(dir.join("run").join(f).exists(), "{f} missing");
    }
    let rows: Vec<Vec<f64>> = fs::read_to_string(dir.join("run/assignment_0.txt"))
        .unwrap()
        .lines()
        .map(|l| l.split(' ').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows[0].len(), 3);
    for r in &rows {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }

    let eval = ok(&surge(dir, &["evaluate", "--checkpoint", "run/checkpoint.txt", "--data", "d.txt"]));
    let auc_line = |s: &str| s.lines().find(|l| l.starts_with("auc = ")).map(str::to_string);
    let from_train = text.lines().find(|l| l.starts_with("test.auc = ")).unwrap().trim_start_matches("test.");
    assert_eq!(auc_line(&eval).unwrap(), from_train);

    let report = ok(&surge(dir, &["report", "run/report.json"]));
    assert!(report.contains("test.assignment_entropy = "));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    ok(&train(dir, "a", &[]));
    ok(&train(dir, "b", &[]));
    assert_eq!(fs::read(dir.join("a/report.json")).unwrap(), fs::read(dir.join("b/report.json")).unwrap());
}

#[test]
fn config_file_and_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    fs::write(dir.join("c.toml"), "[model]\ndim = 4\nheads = 2\npooled_len = 3\nhidden = 4\nattention_hidden = 4\n\n[train]\nmax_epochs = 1\nbatch_size = 16\n").unwrap();
    ok(&surge(dir, &["train", "--config", "c.toml", "--data", "d.txt", "--out-dir", "run", "--pooled-len", "2"]));
    let saved = fs::read_to_string(dir.join("run/config.toml")).unwrap();
    assert!(saved.contains("pooled_len = 2"));
    assert!(saved.contains("max_epochs = 1"));
}

#[test]
fn paths_come_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let mut args = vec!["train", "--epochs", "1"];
    args.extend_from_slice(TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_surge"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env("SURGE_DATA", "d.txt")
        .env("SURGE_OUT", "envrun")
        .args(&args)
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.join("envrun/report.json").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    assert_eq!(train(dir, "x", &["--pooled-len", "99"]).status.code(), Some(1));
    assert_eq!(surge(dir, &["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(surge(dir, &["evaluate", "--checkpoint", "missing.txt", "--data", "d.txt"]).status.code(), Some(2));
    fs::write(dir.join("bad.txt"), "not a dataset\n").unwrap();
    let mut args = vec!["train", "--data", "bad.txt", "--out-dir", "y"];
    args.extend_from_slice(TINY);
    assert_eq!(surge(dir, &args).status.code(), Some(2));
    let diverged = train(dir, "z", &["--l2", "1.7976931348623157e308"]);
    assert_eq!(diverged.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&diverged.stderr).contains("diverged"));
    assert_eq!(surge(dir, &["--help"]).status.code(), Some(0));
}

#[test]
fn prepare_from_log() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut log = String::from("user\titem\ttime\taction\n");
    for u in 0..12 {
        for t in 0..15u64 {
            let item = (u * 7 + t as usize * 3) % 20;
            let action = if t % 5 == 4 { "like" } else { "click" };
            log.push_str(&format!("u{u}\ti{item}\t{}\t{action}\n", 100 + t * 10));
        }
    }
    log.push_str("broken row\n");
    fs::write(dir.join("events.tsv"), log).unwrap();
    let text = ok(&surge(
        dir,
        &[
            "prepare", "--log", "events.tsv", "--out", "p.txt", "--delimiter", "\\t", "--header", "--behavior-col", "3",
            "--k-core", "3", "--max-len", "8", "--train-end", "200", "--val-end", "220",
        ],
    ));
    assert!(text.contains("users = 12"));
    let count = |key: &str| -> usize {
        text.lines().find_map(|l| l.strip_prefix(&format!("{key} = ")).map(|v| v.parse().unwrap())).unwrap()
    };
    assert!(count("train") > 0 && count("validation") > 0 && count("test") > 0);
    assert_eq!(count("train") % 2, 0);
}

#[test]
fn grid_and_ablate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let mut args = vec![
        "grid", "--data", "d.txt", "--out-dir", "g", "--epochs", "1", "--grid-l2", "1e-5,1e-3", "--grid-lambda-m", "1e-5",
        "--grid-lambda-a", "1e-5", "--grid-lambda-p", "1e-5", "--grid-pooled-len", "2,3",
    ];
    args.extend_from_slice(TINY);
    let text = ok(&surge(dir, &args));
    assert_eq!(text.lines().filter(|l| l.starts_with("run ")).count(), 4);
    assert!(dir.join("g/best.toml").exists());

    let mut args = vec!["ablate", "--data", "d.txt", "--epochs", "1", "--json", "rows.json"];
    args.extend_from_slice(TINY);
    let table = ok(&surge(dir, &args));
    assert_eq!(table.lines().count(), 11);
    assert!(table.contains("GRU baseline"));
}
