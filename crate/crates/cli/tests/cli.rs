use std::path::Path;
use std::process::{Command, Output};

fn faasml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faasml"))
        .args(args)
        .env_remove("FAASML_SEED")
        .output()
        .expect("run faasml")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("job.toml");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const MINIMAL: &str = "[job]\nmodel = \"lr\"\nworkers = 2\nthreshold = 0.6\nmax_epochs = 20\n\n[job.data]\nkind = \"synthetic\"\nn = 400\nd = 5\n";

#[test]
fn train_writes_report_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINIMAL);
    let out = dir.path().join("out");
    let o = faasml(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("epoch,time_s,loss"));
    assert!(lines.count() >= 1);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], "v1");
    for key in [
        "converged",
        "epochs",
        "rounds",
        "final_loss",
        "breakdown",
        "bytes_transferred",
        "dollar_cost_usd",
        "trace",
    ] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    for key in ["startup_s", "loading_s", "compute_s", "communication_s", "total_s"] {
        assert!(report["breakdown"].get(key).is_some(), "missing breakdown.{key}");
    }
}

#[test]
fn same_seed_gives_identical_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINIMAL);
    let mut traces = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = faasml(&[
            "train",
            "--config",
            &cfg,
            "--seed",
            "9",
            "--algorithm",
            "ma_sgd",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.code() == Some(0) || o.status.code() == Some(2));
        traces.push(std::fs::read(out.join("trace.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINIMAL);
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_faasml"))
            .args(["train", "--config", &cfg, "--out", out.to_str().unwrap()])
            .env("FAASML_SEED", seed)
            .output()
            .unwrap();
        assert!(o.status.code() == Some(0) || o.status.code() == Some(2));
        std::fs::read(out.join("trace.csv")).unwrap()
    };
    assert_ne!(run("1", "s1"), run("2", "s2"));
}

#[test]
fn non_convergence_exits_2_and_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &MINIMAL
            .replace("threshold = 0.6", "threshold = 0.0")
            .replace("max_epochs = 20", "max_epochs = 2"),
    );
    let o = faasml(&[
        "train",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = faasml(&["train", "--config", &cfg, "--workers", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("job.workers"));

    let bad = write_config(dir.path(), "[job]\nworkerz = 2\n");
    let o = faasml(&["train", "--config", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("job.workerz"));
}

#[test]
fn model_sweep_reports_table_startups() {
    let o = faasml(&["model", "--sweep", "10"]);
    assert!(o.status.success());
    let csv = String::from_utf8(o.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("config,w,time_s,cost_usd,startup_s,loading_s,comm_s,compute_s,pareto")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let startup = |cfg: &str| {
        rows.iter()
            .find(|r| r[0] == cfg)
            .map(|r| r[4].parse::<f64>().unwrap())
            .unwrap()
    };
    assert_eq!(startup("faas"), 1.2);
    assert_eq!(startup("iaas"), 132.0);
}

#[test]
fn model_scenarios() {
    let o = faasml(&["model", "--sweep", "1,10", "--scenario", "hybrid_fast_link"]);
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .any(|l| l.starts_with("hybrid,")));

    let o = faasml(&["model", "--scenario", "bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("baseline") && err.contains("hot_data"), "{err}");
}

#[test]
fn model_reads_constants_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("constants.toml");
    std::fs::write(&path, "s = 650.0\nw = 10\n").unwrap();
    let o = faasml(&["model", "--constants", path.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = String::from_utf8(o.stdout).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[5].parse::<f64>().unwrap(), 10.0);
}

#[test]
fn estimate_reports_both_algorithms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[job]\npreset = \"rcv1_lr\"\nbatch_size = 20\nthreshold = 0.6\ncompute_s_per_epoch = 5.0\n\n[job.data]\nkind = \"synthetic\"\nn = 2000\nd = 8\n");
    let o = faasml(&["estimate", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.get("R_sgd").is_some() && v.get("R_admm").is_some());
    assert!(v["R_sgd"].as_u64().is_some(), "{v}");
}

#[test]
fn estimate_at_initial_loss_predicts_startup_plus_loading() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[job]\nthreshold = 0.6931471805599454\ncompute_s_per_epoch = 5.0\n\n[job.data]\nkind = \"synthetic\"\nn = 500\nd = 4\n");
    let o = faasml(&["estimate", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["R_sgd"], 0);
    let faas = &v["predictions"][0]["faas"];
    let total = faas["total_s"].as_f64().unwrap();
    let expect = faas["startup_s"].as_f64().unwrap() + faas["loading_s"].as_f64().unwrap();
    assert!((total - expect).abs() < 1e-12);
}

#[test]
fn estimate_missing_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[job.data]\nkind = \"libsvm\"\npath = \"/no/such/file\"\nd = 3\n",
    );
    let o = faasml(&["estimate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
}
