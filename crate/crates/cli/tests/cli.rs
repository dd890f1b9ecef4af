use std::path::Path;
use std::process::{Command, Output};

fn vcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vcp(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn params_prints_the_default_budget() {
    let out = ok(&["params"]);
    assert!(out.contains("head"), "{out}");
    let total = out.lines().find(|l| l.starts_with("total")).unwrap();
    assert!(total.contains("5.011"), "{total}");
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (toy, bb, cfg, run, pred, report) = (
        root.join("toy"),
        root.join("bb.safetensors"),
        root.join("toy.toml"),
        root.join("run"),
        root.join("pred"),
        root.join("report"),
    );
    ok(&["make-toy", "--out", s(&toy), "--groups", "3", "--images-per-group", "3"]);
    ok(&["init-backbone", "--preset", "tiny", "--out", s(&bb)]);
    std::fs::write(&cfg, ok(&["print-config", "--toy"])).unwrap();

    let trained = ok(&[
        "train",
        "--config",
        s(&cfg),
        "--img-root",
        s(&toy.join("images")),
        "--gt-root",
        s(&toy.join("gt")),
        "--backbone",
        s(&bb),
        "--out",
        s(&run),
        "--steps",
        "2",
    ]);
    assert!(trained.contains("trained 2 steps"), "{trained}");
    assert_eq!(std::fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 3);
    let ckpt = run.join("checkpoint.safetensors");

    ok(&["infer", "--ckpt", s(&ckpt), "--group-dir", s(&toy.join("images")), "--out", s(&pred)]);
    for g in ["disk", "square", "triangle"] {
        let img = image::open(pred.join(g).join(format!("{g}_000.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (96, 96));
    }
    let scores = ok(&["eval", "--pred", s(&pred), "--gt", s(&toy.join("gt")), "--out", s(&report)]);
    assert!(scores.contains("F_max"), "{scores}");
    assert!(report.join("metrics.csv").is_file());
    assert!(report.join("groups.csv").is_file());

    std::fs::write(root.join("other.toml"), "[model.cpg]\nk = 4\n").unwrap();
    let refused = vcp(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--group-dir",
        s(&toy.join("images")),
        "--out",
        s(&root.join("x")),
        "--config",
        s(&root.join("other.toml")),
    ]);
    assert!(!refused.status.success());
}

#[test]
fn unknown_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model.cpg]\nrr = 4\n").unwrap();
    let out = vcp(&["params", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rr"));
}
