use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3
threads = 1

[task]
d = 12
l = 10
r_true = 2
n_clients = 8
clients_per_round = 3
rounds = 6
samples_per_client = 16
batch = 8
groups = 4

[control]
r_max = 6
rank = 4
offline_draws = 50
"#;

const COLUMNS: &str =
    "t,loss,grad_norm,orth_penalty,cov_norm,O,D,Q,gamma_total,gamma_sparsification,gamma_rank,gamma_cov,gamma_sampling,selected_ids";

fn fedsoft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsoft")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_small(dir: &TempDir, out: &str, extra: &str) -> Output {
    let cfg = write(dir.path(), "cfg.toml", &format!("{SMALL}{extra}"));
    let out = dir.path().join(out);
    fedsoft(&["run", "--config", &cfg, "--out", out.to_str().unwrap()])
}

#[test]
fn help_exits_zero() {
    let o = fedsoft(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("run") && text.contains("sweep"));
}

#[test]
fn run_writes_documented_csv_and_summary() {
    let dir = TempDir::new().unwrap();
    let o = run_small(&dir, "out", "");
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/rounds.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), COLUMNS);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    for (t, row) in rows.iter().enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 14);
        assert_eq!(cells[0], t.to_string());
        for c in &cells[1..13] {
            assert!(c.parse::<f64>().unwrap().is_finite(), "{c}");
        }
        let ids: Vec<usize> = cells[13].split(';').map(|s| s.parse().unwrap()).collect();
        assert_eq!(ids.len(), 3);
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["rounds_completed"], 6);
    for key in ["final_loss", "mean_cov_norm", "final_queue", "rank", "gamma_mean", "offline_candidates"] {
        assert!(!summary["summary"][key].is_null(), "missing {key}");
    }
    assert_eq!(summary["config"]["seed"], 3);
}

#[test]
fn zero_rounds_gives_header_only() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.toml", &SMALL.replace("rounds = 6", "rounds = 0"));
    let out = dir.path().join("out");
    let o = fedsoft(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("rounds.csv")).unwrap(), format!("{COLUMNS}\n"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    assert!(run_small(&dir, "a", "").status.success());
    let cfg = dir.path().join("cfg.toml");
    let b = dir.path().join("b");
    let o = fedsoft(&["run", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--threads", "3"]);
    assert!(o.status.success());
    let read = |d: &str| fs::read(dir.path().join(d).join("rounds.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = TempDir::new().unwrap();
    assert!(run_small(&dir, "a", "").status.success());
    let cfg = dir.path().join("cfg.toml");
    let b = dir.path().join("b");
    assert!(fedsoft(&["run", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "4"])
        .status
        .success());
    let read = |d: &str| fs::read(dir.path().join(d).join("rounds.csv")).unwrap();
    assert_ne!(read("a"), read("b"));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = TempDir::new().unwrap();
    let o = run_small(&dir, "out", "\n[channel]\nbandwidth_hz = -1.0\n");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("channel.bandwidth_hz"), "{}", stderr(&o));

    let o = run_small(&dir, "out2", "\n[control]\nbogus = 1\n");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = fedsoft(&["run", "--config", "/nonexistent/cfg.toml", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn json_config_is_accepted() {
    let dir = TempDir::new().unwrap();
    let json = r#"{"seed": 1, "task": {"d": 8, "l": 6, "r_true": 2, "n_clients": 4, "clients_per_round": 2,
        "rounds": 3, "samples_per_client": 8, "batch": 4, "groups": 2},
        "control": {"mode": "fixed:0.5", "r_max": 4, "rank": 2, "offline_draws": 20}}"#;
    let cfg = write(dir.path(), "cfg.json", json);
    let out = dir.path().join("out");
    let o = fedsoft(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("rounds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(5) == Some("0.5")));
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.toml", SMALL);
    let out = dir.path().join("sw");
    let o = fedsoft(&[
        "sweep", "--config", &cfg, "--axis", "control.sparsifier", "--values", "soft,random", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for v in ["soft", "random"] {
        let d = out.join(format!("control.sparsifier={v}"));
        assert!(d.join("rounds.csv").exists() && d.join("summary.json").exists());
    }
    let summary = fs::read_to_string(out.join("sweep_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "value,status,rank,final_loss,min_loss,mean_cov_norm,mean_ratio,mean_delay,final_queue");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("soft,ok,") && lines[2].starts_with("random,ok,"));
}

#[test]
fn sweep_rejects_unknown_axis_and_empty_values() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.toml", SMALL);
    let out = dir.path().join("sw");
    let o = fedsoft(&["sweep", "--config", &cfg, "--axis", "task.bogus", "--values", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("task.shards"), "{}", stderr(&o));

    let o = fedsoft(&["sweep", "--config", &cfg, "--axis", "task.shards", "--values", "", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at least one value"));

    let o = fedsoft(&["sweep", "--config", &cfg, "--axis", "task.shards", "--values", "x", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_run_exits_three_and_records_failure() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "cfg.toml", &SMALL.replace("batch = 8", "batch = 8\nlr = 500.0"));
    let out = dir.path().join("out");
    let o = fedsoft(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "failed");
    assert!(summary["error"].as_str().unwrap().contains("diverged"), "{}", summary["error"]);
    let rows = fs::read_to_string(out.join("rounds.csv")).unwrap().lines().count() - 1;
    assert_eq!(summary["rounds_completed"], rows);
}
