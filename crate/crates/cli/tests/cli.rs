use std::path::Path;
use std::process::{Command, Output};

fn paec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paec")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--seed", "4", "--out-dir", s(out), "simulate", "--synth-pool", "--pool-speakers", "3"];
    args.extend_from_slice(extra);
    paec(&args)
}

#[test]
fn zero_scenes_give_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(dir.path(), &["--scenario", "D2", "--count", "0"]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    assert!(text.is_empty());
}

#[test]
fn simulate_is_byte_reproducible_and_d1_has_no_interferer() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--scenario", "D1", "--count", "3", "--duration-s", "0.5", "--talk", "cycle"];
    let read = || {
        assert!(simulate(dir.path(), &args).status.success());
        (
            std::fs::read(dir.path().join("manifest.jsonl")).unwrap(),
            std::fs::read(dir.path().join("wavs/d1-00001.y.wav")).unwrap(),
        )
    };
    let (ma, wa) = read();
    let (mb, wb) = read();
    assert_eq!(ma, mb);
    assert_eq!(wa, wb);
    for line in String::from_utf8(ma).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["ratios"]["sir"], "inf");
    }
}

#[test]
fn zero_baseline_reports_infinite_erle() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(dir.path(), &["--scenario", "D1", "--count", "2", "--duration-s", "0.5", "--talk", "st-fe", "--no-wavs"]);
    assert!(o.status.success());
    let m = dir.path().join("manifest.jsonl");
    let o = paec(&["--out-dir", s(dir.path()), "evaluate", "--test", s(&m), "--baseline", "zero"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"][0]["erle"], "inf");
    assert_eq!(report["summary"]["ST-FE"]["scenes"], 2);
}

#[test]
fn usage_and_validation_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(paec(&["bogus"]).status.code(), Some(1));
    assert_eq!(paec(&["--help"]).status.code(), Some(0));
    let o = paec(&["--out-dir", s(dir.path()), "infer", "--in", "a.wav", "--ckpt", "c"]);
    assert_eq!(o.status.code(), Some(1));

    assert!(simulate(dir.path(), &["--scenario", "D1", "--count", "1", "--duration-s", "0.5", "--no-wavs"]).status.success());
    let m = dir.path().join("manifest.jsonl");
    let o = paec(&["--out-dir", s(dir.path()), "train", "--train", s(&m), "--mode", "es"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--registry"));

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"XXXXXXXXnot a checkpoint").unwrap();
    let o = paec(&["selftest", "--quick", "--ckpt", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn short_train_then_infer() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(dir.path(), &["--scenario", "D1", "--count", "2", "--duration-s", "0.5"]);
    assert!(o.status.success());
    let m = dir.path().join("manifest.jsonl");
    let run = dir.path().join("run");
    let o = paec(&[
        "--out-dir", s(&run), "train", "--train", s(&m), "--val", s(&m), "--epochs", "1", "--segment-s", "0.5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("best.ckpt").exists() && run.join("run.json").exists());

    let wav = |role: &str| dir.path().join(format!("wavs/d1-00000.{role}.wav"));
    let o = paec(&[
        "--out-dir", s(&run), "infer", "--in", s(&wav("y")), "--ref", s(&wav("x")),
        "--ckpt", s(&run.join("best.ckpt")), "--clean", s(&wav("s")),
        "--enroll-near", s(&wav("s")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ignores"));
    let out = hound::WavReader::open(run.join("enhanced.wav")).unwrap();
    assert_eq!(out.duration(), 8000);
}
