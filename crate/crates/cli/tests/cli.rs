use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bpgat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bpgat")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("bad JSON `{text}`: {e}"))
}

fn write_cnf(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> String {
    let path = dir.join(name).display().to_string();
    let mut args = vec!["gen-data", "--out", &path];
    args.extend_from_slice(extra);
    let out = bpgat(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn count_exact_bp_and_unsat() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_cnf(dir.path(), "or.cnf", "p cnf 2 1\n1 2 0\n");
    let out = bpgat(&["count", "--in", &f, "--method", "exact"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["count"], 3);
    assert!((v["ln_count"].as_f64().unwrap() - 3f64.ln()).abs() < 1e-12);

    let out = bpgat(&["count", "--in", &f, "--method", "bp"]);
    let v = stdout_json(&out);
    assert!((v["ln_count"].as_f64().unwrap() - 3f64.ln()).abs() < 1e-6);
    assert!(v["converged"].is_boolean());

    let u = write_cnf(dir.path(), "unsat.cnf", "p cnf 1 2\n1 0\n-1 0\n");
    let out = bpgat(&["count", "--in", &u, "--method", "exact"]);
    assert_eq!(out.status.code(), Some(4));
    let v = stdout_json(&out);
    assert_eq!(v["count"], 0);
    assert!(v["ln_count"].is_null());

    let bad = write_cnf(dir.path(), "bad.cnf", "p cnf 1 1\n1 x 0\n");
    assert_eq!(bpgat(&["count", "--in", &bad]).status.code(), Some(2));
    assert_eq!(bpgat(&["count", "--in", "/nonexistent.cnf"]).status.code(), Some(2));
    assert_eq!(bpgat(&["count", "--in", &f, "--method", "model"]).status.code(), Some(2));
}

#[test]
fn output_formats() {
    let dir = tempfile::tempdir().unwrap();
    let f = write_cnf(dir.path(), "or.cnf", "p cnf 2 1\n1 2 0\n");
    let csv = bpgat(&["count", "--in", &f, "--format", "csv"]);
    let text = String::from_utf8(csv.stdout).unwrap();
    assert!(text.starts_with("ln_count,count\n"), "{text}");
    let txt = bpgat(&["--format", "text", "count", "--in", &f]);
    assert!(String::from_utf8(txt.stdout).unwrap().contains("count: 3"));
}

#[test]
fn gen_data_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.jsonl", &["--nv", "5:8", "--nc", "5:10", "--count", "12", "--seed", "7"]);
    let b = gen(dir.path(), "b.jsonl", &["--nv", "5:8", "--nc", "5:10", "--count", "12", "--seed", "7"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 12);

    let out = bpgat(&["gen-data", "--count", "0", "--out", &dir.path().join("z").display().to_string()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(bpgat(&["gen-data", "--count", "3", "--nv", "9:2"]).status.code(), Some(2));
    assert_eq!(bpgat(&["gen-data", "--count", "3", "--nv", "a:b"]).status.code(), Some(2));

    let c = gen(dir.path(), "c.jsonl", &["--dist", "coloring", "--graph-n", "3:5", "--count", "5"]);
    assert_eq!(fs::read_to_string(c).unwrap().lines().count(), 5);
}

#[test]
fn gen_data_summary_reports_column_means() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl").display().to_string();
    let out = bpgat(&["gen-data", "--nv", "6:6", "--nc", "4:4", "--count", "5", "--out", &path]);
    let v = stdout_json(&out);
    assert_eq!(v["count"], 5);
    assert_eq!(v["mean_vars"], 6.0);
    assert_eq!(v["mean_clauses"], 4.0);
    assert!(v["mean_label_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn exact_eval_against_own_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.jsonl", &["--nv", "4:8", "--nc", "4:8", "--count", "10"]);
    let out = bpgat(&["eval", "--method", "exact", "--data", &data, "--format", "text"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "RMSE/MRE 0.0000/0.000000");

    let report = dir.path().join("report.json");
    let out = bpgat(&["eval", "--method", "bp", "--data", &data, "--out", &report.display().to_string()]);
    let v = stdout_json(&out);
    assert!(v["rmse"].as_f64().unwrap() >= 0.0);
    let full: Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(full["per_instance"].as_array().unwrap().len(), 10);
}

#[test]
fn train_finetune_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.jsonl", &["--nv", "4:7", "--nc", "4:7", "--count", "10"]);
    let ckpt = dir.path().join("m.json").display().to_string();
    let out = bpgat(&["train", "--data", &data, "--epochs", "2", "--T", "2", "--lr", "1e-3", "--out", &ckpt]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let hist = fs::read_to_string(dir.path().join("m.loss.csv")).unwrap();
    assert!(hist.starts_with("epoch,lr,mean_loss\n"));
    assert_eq!(hist.lines().count(), 4);

    let tuned = dir.path().join("t.json").display().to_string();
    let out = bpgat(&[
        "finetune",
        "--ckpt",
        &ckpt,
        "--data",
        &data,
        "--epochs",
        "2",
        "--lr",
        "0",
        "--n-examples",
        "5",
        "--out",
        &tuned,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&tuned).unwrap());

    let out = bpgat(&["finetune", "--ckpt", &ckpt, "--data", &data, "--n-examples", "11", "--out", &tuned]);
    assert_eq!(out.status.code(), Some(2));

    let out = bpgat(&["eval", "--ckpt", &ckpt, "--data", &data]);
    assert!(out.status.success());
    assert!(stdout_json(&out)["RMSE/MRE"].as_str().unwrap().contains('/'));

    let f = write_cnf(dir.path(), "or.cnf", "p cnf 2 1\n1 2 0\n");
    let out = bpgat(&["count", "--in", &f, "--method", "model", "--ckpt", &ckpt]);
    assert!(stdout_json(&out)["ln_count"].as_f64().unwrap().is_finite());
}

#[test]
fn training_is_thread_count_independent() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.jsonl", &["--nv", "4:7", "--nc", "4:7", "--count", "10"]);
    let mut ckpts = Vec::new();
    for threads in ["1", "3"] {
        let ckpt = dir.path().join(format!("m{threads}.json")).display().to_string();
        let out = bpgat(&[
            "train",
            "--data",
            &data,
            "--epochs",
            "2",
            "--T",
            "2",
            "--lr",
            "1e-2",
            "--threads",
            threads,
            "--out",
            &ckpt,
        ]);
        assert!(out.status.success());
        ckpts.push(fs::read(ckpt).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);
}

#[test]
fn schema_violations_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\": \"x\"}\n").unwrap();
    let b = bad.display().to_string();
    assert_eq!(bpgat(&["eval", "--method", "exact", "--data", &b]).status.code(), Some(2));
    assert_eq!(bpgat(&["train", "--data", &b, "--epochs", "1"]).status.code(), Some(2));
    let ck = dir.path().join("ck.json");
    fs::write(&ck, "{\"format_version\": 1}").unwrap();
    let data = gen(dir.path(), "d.jsonl", &["--nv", "4:5", "--nc", "3:4", "--count", "2"]);
    assert_eq!(bpgat(&["eval", "--ckpt", &ck.display().to_string(), "--data", &data]).status.code(), Some(2));
    assert_eq!(bpgat(&["count"]).status.code(), Some(2));
    assert_eq!(bpgat(&["--threads", "0", "count", "--in", "x"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.jsonl", &["--nv", "4:6", "--nc", "4:6", "--count", "8"]);
    let ckpt = dir.path().join("m.json").display().to_string();
    let out =
        bpgat(&["train", "--data", &data, "--epochs", "20", "--lr", "1e300", "--variant", "bpnn", "--out", &ckpt]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ablate_damping_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.jsonl", &["--nv", "4:6", "--nc", "4:6", "--count", "10"]);
    let full = dir.path().join("matrix.json");
    assert!(bpgat(&["ablate", "--emit-matrix", "--data", &data, "--out", &full.display().to_string()])
        .status
        .success());
    let all: Vec<Value> = serde_json::from_str(&fs::read_to_string(&full).unwrap()).unwrap();
    assert_eq!(all.len(), 13);
    let damping: Vec<Value> = all
        .into_iter()
        .filter(|e| e["config_id"].as_str().unwrap().starts_with("damping-"))
        .map(|mut e| {
            e["config"]["t"] = 2.into();
            e
        })
        .collect();
    let m = dir.path().join("damping.json");
    fs::write(&m, serde_json::to_string(&damping).unwrap()).unwrap();
    let out_dir = dir.path().join("abl");
    let out = bpgat(&[
        "ablate",
        "--matrix",
        &m.display().to_string(),
        "--data",
        &data,
        "--epochs",
        "1",
        "--format",
        "csv",
        "--out",
        &out_dir.display().to_string(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("config_id,variant,damping,T,rmse,mre"));
    assert_eq!(lines.count(), 4);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 5);
}
