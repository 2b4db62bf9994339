//! End-to-end runs of the `attamba` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn attamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attamba")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, corpus: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "model": { "seq_len": 32, "dim": 16, "layers": 1, "chunk": 4, "lead": 2, "strategy": "uniform" },
        "batch": 2,
        "steps": 12,
        "warmup": 2,
        "eval_interval": 6,
        "eval_windows": 4,
        "corpus": corpus,
        "out_dir": dir.join("run"),
        "seed": 5
    });
    let path = dir.join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn train_eval_and_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("text.txt");
    fs::write(&corpus, "the quick brown fox jumps over the lazy dog. ".repeat(200)).unwrap();
    let cfg = write_config(dir.path(), &corpus);

    let final_record: serde_json::Value =
        serde_json::from_str(&stdout(&attamba(&["train", "--config", cfg.to_str().unwrap()]))).unwrap();
    assert_eq!(final_record["step"], 12);
    let run = dir.path().join("run");
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let steps: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, [0, 6, 12]);
    let ckpt = run.join("model.atmb");
    assert_eq!(&fs::read(&ckpt).unwrap()[..4], b"ATMB");

    let eval: serde_json::Value = serde_json::from_str(&stdout(&attamba(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--lead",
        "32",
    ])))
    .unwrap();
    let loss = eval["eval_loss"].as_f64().unwrap();
    assert!((eval["perplexity"].as_f64().unwrap() - loss.exp()).abs() < 1e-9);
    let swa = attamba(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--corpus", corpus.to_str().unwrap(), "--swa", "8"]);
    assert_eq!(swa.status.code(), Some(1), "SWA applies to baselines only");

    let prompt = dir.path().join("prompt.txt");
    fs::write(&prompt, "the quick").unwrap();
    let out = attamba(&[
        "decode-sim",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--prompt",
        prompt.to_str().unwrap(),
        "--generate",
        "7",
        "--verify",
    ]);
    let lines: Vec<serde_json::Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 16);
    assert_eq!(lines[15]["pos"], 15);
    assert!(lines.iter().all(|l| l["entries"].as_u64().unwrap() > 0 && l["top_token"].as_u64().unwrap() < 256));
    let err = String::from_utf8(out.stderr).unwrap();
    let dev: f64 = err.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(dev < 1e-5, "{err}");
}

#[test]
fn cost_prints_report_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("iso.csv");
    let out = stdout(&attamba(&[
        "cost",
        "--E",
        "512",
        "--P",
        "4",
        "--L",
        "4096",
        "--Ds",
        "32",
        "--H",
        "8",
        "--csv",
        csv.to_str().unwrap(),
    ]));
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["iso_kv"]["dim"], 128);
    assert_eq!(report["iso_flops"]["dim"], 160);
    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.lines().any(|l| l.starts_with("8,") && l.contains(",64,") && l.contains(",104")));
}

#[test]
fn mask_dump_prints_grid_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("mask.json");
    let grid = stdout(&attamba(&[
        "mask-dump",
        "--n",
        "8",
        "--P",
        "4",
        "--strategy",
        "cyclic",
        "--layer",
        "1",
        "--lead",
        "1",
        "--json",
        json.to_str().unwrap(),
    ]));
    assert_eq!(grid, "#.......\n##......\n###.....\n..##....\n..###...\n..####..\n..#####.\n..#...##\n");
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(doc["boundaries"], serde_json::json!([[3, 7], [2, 6]]));
    assert_eq!(doc["strategy"], "cyclic");
}

#[test]
fn usage_and_io_errors_set_exit_codes() {
    assert_eq!(attamba(&["preset", "no-such-preset"]).status.code(), Some(2));
    assert_eq!(attamba(&["mask-dump", "--n", "8", "--P", "4", "--strategy", "fattn"]).status.code(), Some(2));
    let missing = attamba(&["eval", "--ckpt", "/nonexistent/m.atmb", "--corpus", "/nonexistent/c.txt"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent"));
}
