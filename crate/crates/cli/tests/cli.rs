use std::path::Path;
use std::process::{Command, Output};

fn g3dm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_g3dm")).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = g3dm(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const SMALL: &str = r#"
[network]
preset = "desk"
[network_2d]
preset = "desk"
[contact]
identities = 8
[pretrain]
batch_size = 8
[finetune]
batch_size = 8
"#;

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(&["synth", "--fingers", "4", "--poses", "0,20,40", "--seed", "7", "--out", out], d);
    }
    for f in ["manifest.json", "templates.jsonl"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap());
    }
    ok(&["synth", "--fingers", "4", "--seed", "8", "--out", "c"], d);
    assert_ne!(std::fs::read(d.join("a/templates.jsonl")).unwrap(), std::fs::read(d.join("c/templates.jsonl")).unwrap());
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = g3dm(&["synth", "--out", "x", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = g3dm(&["evaluate", "--manifest", "missing.json", "--out", "r.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    let help = ok(&["--help"], dir.path());
    let help = String::from_utf8_lossy(&help.stdout);
    assert!(help.contains("FILE FORMATS") && help.contains("probe_id,gallery_id,score"));
}

#[test]
fn lift_reads_synthetic_grids() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--fingers", "2", "--poses", "0,30", "--seed", "3", "--out", "s", "--grids"], d);
    ok(&["lift", "--manifest", "s/manifest.json", "--out", "lifted.jsonl", "--normal", "physical"], d);
    let text = std::fs::read_to_string(d.join("lifted.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn train_evaluate_fuse_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    let c = ["--config", "small.toml", "--seed", "5"];
    let run = |args: &[&str]| ok(&[args, &c[..]].concat(), d);
    run(&["synth", "--fingers", "4", "--poses", "0,20,40", "--out", "data"]);
    run(&["pretrain", "--out", "pre.ckpt", "--epochs", "1", "--trace", "pre.csv"]);
    run(&["finetune", "--manifest", "data/manifest.json", "--init", "pre.ckpt", "--out", "a.ckpt", "--epochs", "1"]);
    run(&["finetune", "--manifest", "data/manifest.json", "--init", "pre.ckpt", "--out", "b.ckpt", "--epochs", "1", "--same-pose"]);
    run(&["embed", "--manifest", "data/manifest.json", "--checkpoint", "a.ckpt", "--out", "emb.jsonl"]);
    assert_eq!(std::fs::read_to_string(d.join("emb.jsonl")).unwrap().lines().count(), 12);

    run(&["evaluate", "--manifest", "data/manifest.json", "--protocol", "all-vs-all", "--checkpoint", "a.ckpt", "--out", "r.json", "--scores", "s1.csv"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert!(report["eer"].as_f64().is_some());
    assert_eq!(report["genuine_count"], 12);

    run(&["match", "--manifest", "data/manifest.json", "--checkpoint", "b.ckpt", "--out", "s2.csv"]);
    run(&["fuse", "--mode", "dual", "--first", "s1.csv", "--second", "s2.csv", "--out", "fused.csv"]);
    run(&["evaluate", "--manifest", "data/manifest.json", "--matcher", "dual", "--checkpoint", "a.ckpt", "--same-pose-checkpoint", "b.ckpt", "--protocol", "all-vs-all", "--out", "rd.json", "--scores", "sd.csv"]);
    // fusing the two score files equals the dual matcher's own scores
    let fused = std::fs::read_to_string(d.join("fused.csv")).unwrap();
    let dual = std::fs::read_to_string(d.join("sd.csv")).unwrap();
    assert_eq!(fused, dual);

    run(&["evaluate", "--manifest", "data/manifest.json", "--protocol", "identification", "--checkpoint", "a.ckpt", "--out", "ri.json"]);
    run(&["report", "--report", "ri.json", "--out", "curves"]);
    for f in ["det.csv", "det.svg", "roc.csv", "roc.svg", "cmc.csv", "cmc.svg"] {
        assert!(d.join("curves").join(f).is_file(), "{f}");
    }
}
