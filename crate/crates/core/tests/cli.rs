use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointalign")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (m, gt, a, r) = (dir.path().join("m.json"), dir.path().join("gt.json"), dir.path().join("a.json"), dir.path().join("r.json"));
    let log = dir.path().join("log.tsv");
    let out = run(&["synth", "--manifest", s(&m), "--gt", s(&gt), "--n-images", "4", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "align", "--manifest", s(&m), "--out", s(&a), "--log", s(&log), "--epochs", "30", "--hidden-dim", "8",
        "--layers", "2", "--flip-every", "10",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 30);
    let out = run(&["eval", "--alignment", s(&a), "--gt", s(&gt), "--out", s(&r)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(r.exists());
    let frames = dir.path().join("frames");
    assert_eq!(code(&run(&["render", "--alignment", s(&a), "--out-dir", s(&frames)])), 0);
    let ppm = std::fs::read(frames.join("image_0.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n256 256\n255\n"));
    assert_eq!(code(&run(&["graph-stats", "--manifest", s(&m)])), 0);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = dir.path().join("a.json");
    assert_eq!(code(&run(&["align", "--manifest", s(&missing), "--out", s(&out)])), 4);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"format\": \"jointalign-manifest\", \"version\": \"1.0\", \"images\": 3}").unwrap();
    let res = run(&["align", "--manifest", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("line"));

    std::fs::write(&bad, "{\"format\": \"jointalign-manifest\", \"version\": \"2.0\"}").unwrap();
    assert_eq!(code(&run(&["align", "--manifest", s(&bad), "--out", s(&out)])), 2);

    assert_eq!(code(&run(&["align", "--bogus"])), 2);

    let m = dir.path().join("m.json");
    assert_eq!(code(&run(&["synth", "--manifest", s(&m), "--gt", s(&dir.path().join("gt.json")), "--n-images", "3"])), 0);
    assert_eq!(code(&run(&["align", "--manifest", s(&m), "--out", s(&out), "--sigma=-1"])), 2);
    let res = run(&["align", "--manifest", s(&m), "--out", s(&out), "--arch", "direct", "--lr", "1e12", "--epochs", "50"]);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));
}
