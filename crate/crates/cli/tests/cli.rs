use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_bsp-mpnet");

const TINY: &str = r#"
[model]
mp2dc_channels = 4

[model.stft]
fft_size = 64
win_length = 64
hop_length = 16

[model.ssl]
frame_stride = 32

[model.rema_mag]
model_dim = 8
heads = 2
ffn_expansion = 2
tfa_time_kernel = 3

[model.rema_pha]
model_dim = 8
heads = 2
ffn_expansion = 2
tfa_time_kernel = 3

[train]
epochs = 1
batch_size = 2
warmup_steps = 0
segment_seconds = 0.1
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("BSP_MPNET_DEVICE").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Synthetic corpus plus a one-epoch training run; returns (data dir, run dir).
fn trained(root: &Path, extra: &[&str]) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let o = run(&["synth-data", "--out", s(&data), "--count", "3", "--seconds", "0.25", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let manifest = data.join("manifest.jsonl");
    let set = format!("data.train_manifest={}", s(&manifest));
    let run_dir = root.join("run");
    let mut args = vec!["train", "--config", s(&cfg), "--set", &set, "--out", s(&run_dir)];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    (data, run_dir)
}

#[test]
fn help_exits_zero_everywhere() {
    for sub in [None, Some("train"), Some("enhance"), Some("evaluate"), Some("analyze"), Some("synth-data")] {
        let mut args: Vec<&str> = sub.into_iter().collect();
        args.push("--help");
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        assert!(!o.stdout.is_empty());
    }
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_smoke_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run_dir) = trained(dir.path(), &["--set", "loss.lambda2=0.75"]);
    assert!(run_dir.join("last.ckpt").exists());
    assert!(run_dir.join("best.ckpt").exists());
    let echo = fs::read_to_string(run_dir.join("run_config.toml")).unwrap();
    assert!(echo.contains("lambda2 = 0.75"), "{echo}");
    let log = fs::read_to_string(run_dir.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,lr,total"));
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--set", "loss.lambda9=1", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loss.lambda9"));
    let o = run(&["train", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.train_manifest"));
    let o = Command::new(BIN)
        .args(["synth-data", "--out", s(&dir.path().join("x"))])
        .env("BSP_MPNET_DEVICE", "cuda:0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("BSP_MPNET_DEVICE"));
}

#[test]
fn enhance_single_manifest_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run_dir) = trained(dir.path(), &[]);
    let ckpt = run_dir.join("last.ckpt");
    let wav = data.join("noisy/synth_0000.wav");

    let out1 = dir.path().join("enh1");
    let o = run(&["enhance", "--checkpoint", s(&ckpt), "--input", s(&wav), "--out", s(&out1)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("RTF"));
    let a = bspmpnet::wav::read_wav(&wav).unwrap();
    let b = bspmpnet::wav::read_wav(&out1.join("synth_0000.wav")).unwrap();
    assert_eq!(a.len(), b.len());

    let out2 = dir.path().join("enh2");
    let o = run(&["enhance", "--checkpoint", s(&ckpt), "--input", s(&data.join("manifest.jsonl")), "--out", s(&out2)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&out2).unwrap().count(), 3);
    assert_eq!(fs::read(out1.join("synth_0000.wav")).unwrap(), fs::read(out2.join("synth_0000.wav")).unwrap());

    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"BSPMPNET\x01\x00\x00\x00garbage").unwrap();
    let o = run(&["enhance", "--checkpoint", s(&bad), "--input", s(&wav), "--out", s(&out1)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_reports_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(run(&["synth-data", "--out", s(&data), "--count", "2", "--seconds", "0.5"]).status.success());
    let pairs = dir.path().join("pairs.jsonl");
    let lines: Vec<String> = (0..2)
        .map(|i| {
            let c = data.join(format!("clean/synth_{i:04}.wav"));
            serde_json::json!({"id": format!("u{i}"), "clean": c, "enhanced": c}).to_string()
        })
        .collect();
    fs::write(&pairs, lines.join("\n")).unwrap();
    let out = dir.path().join("eval");
    let o = run(&["evaluate", "--pairs", s(&pairs), "--out", s(&out), "--metrics", "si_snr,cosine", "--external", "PESQ=echo 3.65"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("PESQ"));
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let get = |n: &str| rec[headers.iter().position(|h| h == n).unwrap()].parse::<f64>().unwrap();
        assert!(get("si_snr") >= 60.0);
        assert!((get("cosine") - 1.0).abs() < 1e-12);
        assert_eq!(get("PESQ"), 3.65);
    }
    assert!(json.to_string().contains("3.65"));

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(run(&["evaluate", "--pairs", s(&empty), "--out", s(&out)]).status.code(), Some(2));

    let gone = dir.path().join("gone.jsonl");
    fs::write(&gone, r#"{"id":"x","clean":"nope.wav","enhanced":"nada.wav"}"#).unwrap();
    let o = run(&["evaluate", "--pairs", s(&gone), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.wav") && stderr(&o).contains("nada.wav"));
}

#[test]
fn analyze_fresh_model_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run_dir) = trained(dir.path(), &["--set", "train.max_steps=0"]);
    let out = dir.path().join("analysis");
    let o = run(&["analyze", "--checkpoint", s(&run_dir.join("last.ckpt")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("layer_weights.png").exists());
    let mut rdr = csv::Reader::from_path(out.join("layer_weights.csv")).unwrap();
    let rows: Vec<(String, f64)> = rdr.records().map(|r| r.unwrap()).map(|r| (r[0].to_string(), r[2].parse().unwrap())).collect();
    let n = bspmpnet::ssl::SslConfig::default().layers;
    assert_eq!(rows.len(), 2 * n);
    for path in ["magnitude", "phase"] {
        let w: Vec<f64> = rows.iter().filter(|r| r.0 == path).map(|r| r.1).collect();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(w.iter().all(|v| (v - 1.0 / n as f64).abs() < 1e-12));
    }

    let (_, ablated) = trained(&dir.path().join("b"), &["--set", "model.ablation.use_fs_ssl=false", "--set", "train.max_steps=0"]);
    let o = run(&["analyze", "--checkpoint", s(&ablated.join("last.ckpt")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}
