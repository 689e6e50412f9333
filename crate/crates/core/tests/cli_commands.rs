use std::path::Path;
use std::process::{Command, Output};

use reslstm::checkpoint;
use reslstm::network::CellKind;

fn reslstm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reslstm"))
        .args(args)
        .env("RESLSTM_THREADS", "1")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, kind: &str, out: &Path) -> std::path::PathBuf {
    let text = format!(
        r#"seed = 5

[network]
cell_kind = "{kind}"
layers = 2
cell_size = 6
output_size = 4

[task]
kind = "delayed_recall"
seq_len = 12
input_dim = 6
num_classes = 4
noise_sigma = 0.1
delay = 2
num_sequences = 12
cv_fraction = 0.25

[train]
learning_rate = 0.3
bptt_len = 5
epochs = 3

[output]
dir = "{}"
"#,
        out.display()
    );
    let path = dir.join(format!("{kind}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_writes_metrics_and_checkpoint_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_config(dir.path(), "residual_scaled", &out);
    let config_before = std::fs::read(&config).unwrap();

    let first = reslstm(&["train", config.to_str().unwrap()]);
    assert!(first.status.success(), "{}", stderr(&first));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_ce,cv_ce,frame_acc,seconds");
    assert_eq!(lines.len(), 4);
    let net = checkpoint::load(&out.join("checkpoint.txt")).unwrap();
    assert_eq!(net.config.cell_kind, CellKind::ResidualScaled);
    assert_eq!(net.config.layers, 2);

    let other = dir.path().join("again");
    let second = reslstm(&["train", config.to_str().unwrap(), "--out", other.to_str().unwrap()]);
    assert!(second.status.success());
    assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), std::fs::read(other.join("metrics.csv")).unwrap());
    assert_eq!(
        std::fs::read(out.join("checkpoint.txt")).unwrap(),
        std::fs::read(other.join("checkpoint.txt")).unwrap()
    );
    assert_eq!(std::fs::read(&config).unwrap(), config_before);
}

#[test]
fn train_reports_missing_and_invalid_configs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = reslstm(&["train", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope.toml"), "{}", stderr(&o));

    let config = write_config(dir.path(), "plain", &dir.path().join("x"));
    let text = std::fs::read_to_string(&config).unwrap().replace("epochs = 3", "epochs = 3\nbatch = 8");
    std::fs::write(&config, text).unwrap();
    let o = reslstm(&["train", config.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("batch"), "{}", stderr(&o));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn gradcheck_exit_codes() {
    let o = reslstm(&["gradcheck", "--cell", "plain", "--layers", "1", "--seed", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS"));
    for kind in CellKind::ALL {
        let o = reslstm(&["gradcheck", "--cell", kind.name(), "--layers", "3", "--seed", "1"]);
        assert!(o.status.success(), "{}", stdout(&o));
    }
    let o = reslstm(&["gradcheck", "--cell", "plain", "--layers", "1", "--seed", "1", "--corrupt-backward"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
    let o = reslstm(&["gradcheck", "--cell", "gru"]);
    assert!(!o.status.success());
}

#[test]
fn params_table() {
    let o = reslstm(&["params", "--n", "1024", "--m", "512", "--d", "512", "--layers", "10"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("527360") && text.contains("528384"), "{text}");
    assert!(text.contains("reduction (shape counts): 9.13%"), "{text}");

    let o = reslstm(&["params", "--n", "2", "--m", "1", "--d", "1", "--layers", "1"]);
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("plain") && l.trim_end().ends_with(" 32")), "{text}");
    assert!(!reslstm(&["params", "--n", "0", "--m", "1", "--d", "1", "--layers", "1"]).status.success());
}

#[test]
fn variance_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("var.csv");
    let o = reslstm(&[
        "variance", "--layers", "10", "--gate", "0.7071067811865476", "--scaled", "true", "--samples", "100000",
        "--seed", "2", "--out", path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<(usize, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|&(_, v)| (0.95..=1.05).contains(&v)));

    let o = reslstm(&["variance", "--layers", "3", "--scaled", "false", "--samples", "10000"]);
    assert!(stdout(&o).starts_with("layer,variance\n"));
    assert!(!reslstm(&["variance", "--layers", "3", "--samples", "10"]).status.success());
}

#[test]
fn depth_sweep_summary_is_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let config = write_config(dir.path(), "plain", &out);
    let text = std::fs::read_to_string(&config).unwrap().replace("epochs = 3", "epochs = 1");
    std::fs::write(&config, text).unwrap();

    let o = reslstm(&["depth-sweep", config.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "kind,layers,train_ce,cv_ce,frame_err");
    let grid: Vec<String> = lines[1..].iter().map(|l| l.split(',').take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(
        grid,
        [
            "plain,3", "plain,5", "plain,10", "highway,3", "highway,5", "highway,10", "residual_scaled,3",
            "residual_scaled,5", "residual_scaled,10"
        ]
    );
    for l in &lines[1..] {
        assert!(l.split(',').skip(2).all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
    assert!(out.join("metrics_highway_5.csv").exists());

    let again = dir.path().join("again");
    let o = Command::new(env!("CARGO_BIN_EXE_reslstm"))
        .args(["depth-sweep", config.to_str().unwrap(), "--out", again.to_str().unwrap()])
        .env("RESLSTM_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(summary, std::fs::read_to_string(again.join("summary.csv")).unwrap());
}
