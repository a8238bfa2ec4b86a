use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
dir = "data"

[data.counts]
train = 64
val = 8
test = 24
unknown = 6
extra = 4

[train]
epochs = 1
batch_size = 16
"#;

fn dopplernet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dopplernet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Asserts a failure with the given code and a single JSON error line of `kind`.
fn error_line(o: &Output, code: i32, kind: &str) -> String {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    let v: serde_json::Value = serde_json::from_str(err.trim()).expect("stderr is one JSON line");
    assert_eq!(v["error"]["kind"], kind);
    v["error"]["message"].as_str().unwrap().to_string()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd, cfg.as_str(), "--seed", "11"];
        args.extend_from_slice(extra);
        let o = dopplernet(&args);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };

    // each step says which one to run first
    let o = dopplernet(&["train", &cfg, "--seed", "11"]);
    assert!(error_line(&o, 2, "config").contains("`gen`"));
    let o = dopplernet(&["predict", &cfg, "--seed", "11"]);
    assert!(error_line(&o, 2, "config").contains("`train`"));

    let gen = stdout(&run("gen", &[]));
    assert!(gen.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    run("train", &[]);

    // rejection needs a calibrated model
    let o = dopplernet(&["predict", &cfg, "--seed", "11", "--quantile", "0.05"]);
    assert!(error_line(&o, 5, "usage").contains("calibrate"));

    let q0 = stdout(&run("predict", &[]));
    assert_eq!(q0.lines().count(), 24);
    assert!(!q0.contains("IGNORED"));

    run("calibrate", &[]);
    let a = stdout(&run("predict", &["--quantile", "0.1"]));
    let b = stdout(&run("predict", &["--quantile", "0.1"]));
    assert_eq!(a, b);
    for l in a.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        let ignored = v["decision"] == "ignored";
        assert_eq!(ignored, v["output"] == "IGNORED");
    }

    // an off-grid quantile names the nearest grid point
    let o = dopplernet(&["predict", &cfg, "--seed", "11", "--quantile", "0.033"]);
    assert!(error_line(&o, 5, "usage").contains("0.035"));

    run("eval", &[]);
    run("sweep", &[]);
    for f in ["confusion.csv", "confusion.svg", "metrics.csv", "sweep.csv", "sweep.svg", "model.dnm"] {
        assert!(dir.path().join("out").join(f).exists(), "{f} missing");
    }

    // a cursor outside the frame is an input error naming the field
    let manifest = fs::read_to_string(dir.path().join("data/test.csv")).unwrap();
    let mut lines: Vec<String> = manifest.lines().map(str::to_string).collect();
    let first = lines.iter().position(|l| l.starts_with("images/")).unwrap();
    let mut fields: Vec<&str> = lines[first].split(',').collect();
    fields[1] = "500";
    lines[first] = fields.join(",");
    fs::write(dir.path().join("data/bad.csv"), lines.join("\n") + "\n").unwrap();
    let bad = write_config(dir.path(), "\n[predict]\nmanifest = \"data/bad.csv\"\n");
    let o = dopplernet(&["predict", &bad, "--seed", "11"]);
    assert!(error_line(&o, 3, "input").contains("roi_row"));

    // a corrupted artifact is refused with a checksum error
    let model = dir.path().join("out/model.dnm");
    let mut bytes = fs::read(&model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&model, bytes).unwrap();
    let o = dopplernet(&["predict", &cfg, "--seed", "11"]);
    error_line(&o, 8, "checksum");
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = dopplernet(&["gen", &cfg]);
    assert!(error_line(&o, 2, "config").contains("seed"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "\n[model]\ndepth = 3\n");
    let o = dopplernet(&["gen", &cfg, "--seed", "1"]);
    error_line(&o, 2, "config");
}

#[test]
fn missing_config_file_is_an_io_error() {
    let o = dopplernet(&["train", "/nonexistent/run.toml", "--seed", "1"]);
    error_line(&o, 9, "io");
}

#[test]
fn bad_arguments_are_a_usage_error() {
    let o = dopplernet(&["train"]);
    error_line(&o, 5, "usage");
    let o = dopplernet(&["frobnicate", "x.toml"]);
    error_line(&o, 5, "usage");
}
