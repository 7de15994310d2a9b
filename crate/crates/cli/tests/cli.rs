use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
name = "tiny"
algorithm = "fp32"
clients = 1
budgets = [8]
participation = 1.0
rounds = 1

[train]
local_epochs = 1
batch_size = 32

[model]
kind = "mlp"
hidden = [8]

[data]
kind = "blobs"
classes = 3
dim = 6
train_per_class = 30
test_per_class = 10
center_spread = 1.0
noise = 1.0
"#;

fn fedmpq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmpq"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

#[test]
fn minimal_run_writes_one_metrics_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("run");
    let out = fedmpq(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert_eq!(fs::read_to_string(out_dir.join("rounds.jsonl")).unwrap().lines().count(), 1);
    assert!(out_dir.join("manifest.toml").exists());
    assert!(out_dir.join("checkpoints/final.fmpq").exists());
}

#[test]
fn budget_and_alpha_overrides_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("run");
    let out = fedmpq(&[
        "run", "--config", &cfg, "--algorithm", "fedmpq", "--alpha", "0.5",
        "--budgets", "2,2,4,4,4,6,6,6,8,8", "--seed", "5", "--out", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out));
    let manifest = fs::read_to_string(out_dir.join("manifest.toml")).unwrap();
    assert!(manifest.contains("budgets = [2, 2, 4, 4, 4, 6, 6, 6, 8, 8]"), "{manifest}");
    assert!(manifest.contains("seed = 5"));
    let row = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let client_bits = row.lines().nth(1).unwrap().split(',').nth(4).unwrap().to_string();
    assert_eq!(client_bits.split(';').count(), 10);
}

#[test]
fn unknown_key_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}\nlearning_rat = 0.1\n"));
    let out = fedmpq(&["run", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let msg = text(&out);
    assert!(msg.contains("learning_rat"), "{msg}");
    assert!(msg.contains("line"), "{msg}");
}

#[test]
fn invalid_values_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = fedmpq(&["run", "--config", &cfg, "--budgets", "2,9"]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_fedmpq"))
        .args(["run", "--config", &cfg])
        .env("FEDMPQ_OUTPUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", text(&out));
    assert!(dir.path().join("tiny-fp32-s0/metrics.csv").exists());
}

#[test]
fn inspect_reports_uniform_four_bits_and_rejects_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("run");
    let out = fedmpq(&["run", "--config", &cfg, "--algorithm", "fpq-4", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
    let ckpt = out_dir.join("checkpoints/final.fmpq");
    let report = fedmpq(&["inspect", ckpt.to_str().unwrap()]);
    assert!(report.status.success());
    assert!(text(&report).contains("average bit-width: 4.000"), "{}", text(&report));

    let bytes = fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.fmpq");
    fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    let bad = fedmpq(&["inspect", cut.to_str().unwrap()]);
    assert!(!bad.status.success());
    assert!(text(&bad).to_lowercase().contains("corrupt"), "{}", text(&bad));
}

fn partition(dir: &Path, cfg: &str, name: &str, clients: &str, alpha: &str) -> (Output, std::path::PathBuf) {
    let out = dir.join(name);
    let res = fedmpq(&[
        "partition", "--config", cfg, "--clients", clients, "--alpha", alpha, "--seed", "3",
        "--out", out.to_str().unwrap(),
    ]);
    (res, out)
}

fn skew(out: &Output) -> f64 {
    let s = String::from_utf8_lossy(&out.stdout);
    let tail = s.split("label skew ").nth(1).unwrap();
    tail.split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn partition_is_reproducible_and_tracks_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, a_dir) = partition(dir.path(), &cfg, "a", "5", "0.1");
    let (b, b_dir) = partition(dir.path(), &cfg, "b", "5", "0.1");
    assert!(a.status.success() && b.status.success(), "{}", text(&a));
    for n in 0..5 {
        let f = format!("client_{n:04}.txt");
        assert_eq!(fs::read(a_dir.join(&f)).unwrap(), fs::read(b_dir.join(&f)).unwrap());
    }
    let (wide, _) = partition(dir.path(), &cfg, "c", "5", "1.0");
    assert!(skew(&a) > skew(&wide), "{} vs {}", skew(&a), skew(&wide));

    let (one, one_dir) = partition(dir.path(), &cfg, "d", "1", "0.5");
    assert!(one.status.success());
    let shard = fs::read_to_string(one_dir.join("client_0000.txt")).unwrap();
    assert_eq!(shard.lines().count(), 90);
}

#[test]
fn run_can_reuse_partition_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (p, shards) = partition(dir.path(), &cfg, "shards", "3", "0.5");
    assert!(p.status.success());
    let with_dir = format!("partition_dir = {:?}\n{SMALL}", shards.to_str().unwrap());
    let with_dir = with_dir.replace("clients = 1\nbudgets = [8]", "clients = 3\nbudgets = [2, 4, 8]");
    let cfg = write_config(dir.path(), &with_dir);
    let out = fedmpq(&["run", "--config", &cfg, "--algorithm", "fedmpq", "--out", dir.path().join("r").to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
}

#[test]
fn compare_tabulates_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut dirs = Vec::new();
    for alg in ["fp32", "fpq-8"] {
        let d = dir.path().join(alg);
        assert!(fedmpq(&["run", "--config", &cfg, "--algorithm", alg, "--out", d.to_str().unwrap()]).status.success());
        dirs.push(d.to_string_lossy().into_owned());
    }
    let out = fedmpq(&["compare", &dirs[0], &dirs[1]]);
    assert!(out.status.success(), "{}", text(&out));
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("fpq-8") && table.contains("fp32"));
}

#[test]
fn bundled_config_runs() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/blobs.toml");
    let dir = tempfile::tempdir().unwrap();
    let out = fedmpq(&["run", "--config", cfg, "--rounds", "1", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
}
