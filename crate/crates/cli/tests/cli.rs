use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_binaryvit")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn grab(text: &str, key: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("no {key} line"));
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn count_surfaces_ops_identity() {
    let o = bin(&["count", "--config", "binaryvit"]);
    assert!(o.status.success());
    let s = stdout(&o);
    let (flops, bops, ops) = (grab(&s, "flops"), grab(&s, "bops"), grab(&s, "ops"));
    assert!((ops - (bops / 64.0 + flops)).abs() <= 1e-6 * ops);
}

#[test]
fn count_json_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    let text = String::from_utf8(bin(&["count", "--config", "toy", "--json"]).stdout).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["params"].as_u64().unwrap() > 0);
    std::fs::write(&path, include_str!("../../core/configs/toy.toml")).unwrap();
    let from_file = bin(&["count", "--config", path.to_str().unwrap(), "--json"]);
    assert_eq!(String::from_utf8(from_file.stdout).unwrap(), text);
}

#[test]
fn repcap_resnet34_total() {
    let o = bin(&["repcap", "--desc", "resnet34"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("total 71193472"));
}

#[test]
fn argument_errors_exit_2() {
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bin(&["infer", "--image", "x.ppm"]).status.code(), Some(2));
    assert_eq!(bin(&["train-toy", "--steps", "many"]).status.code(), Some(2));
}

#[test]
fn file_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "img_size = \"large\"\n").unwrap();
    let o = bin(&["count", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    assert_eq!(bin(&["repcap", "--desc", "/no/such/file.toml"]).status.code(), Some(3));
    let w = dir.path().join("w.bin");
    std::fs::write(&w, b"NOPE0000").unwrap();
    let o = bin(&["infer", "--weights", w.to_str().unwrap(), "--image", w.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

fn write_ppm(path: &Path, side: usize) {
    let mut b = format!("P6\n{side} {side}\n255\n").into_bytes();
    b.extend((0..side * side * 3).map(|i| (i * 37 % 256) as u8));
    std::fs::write(path, b).unwrap();
}

#[test]
fn train_save_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let weights = dir.path().join("toy.bvit");
    let run = |t: &Path| {
        bin(&[
            "train-toy",
            "--steps",
            "6",
            "--train-size",
            "16",
            "--batch-size",
            "8",
            "--trace",
            t.to_str().unwrap(),
            "--save",
            weights.to_str().unwrap(),
        ])
    };
    let o = run(&trace);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(lines.lines().count(), 6);
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for k in ["step", "loss", "accuracy", "lr"] {
            assert!(v.get(k).is_some(), "{k} missing");
        }
    }
    // same seed, same trace
    let again = dir.path().join("again.jsonl");
    assert!(run(&again).status.success());
    assert_eq!(std::fs::read(&again).unwrap(), lines.into_bytes());

    let img = dir.path().join("img.ppm");
    write_ppm(&img, 32);
    let args = ["infer", "--weights", weights.to_str().unwrap(), "--image", img.to_str().unwrap(), "--top-k", "3"];
    let o = bin(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 3);
    assert_eq!(bin(&args).stdout, o.stdout);

    let small = dir.path().join("small.ppm");
    write_ppm(&small, 8);
    let o = bin(&["infer", "--weights", weights.to_str().unwrap(), "--image", small.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn quick_selftest_passes() {
    let o = bin(&["selftest", "--quick"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("gemm-oracle"));
    assert!(!stdout(&o).contains("FAIL"));
}
