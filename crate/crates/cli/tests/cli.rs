use std::path::Path;
use std::process::{Command, Output};

fn vlprobe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlprobe"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) {
    std::fs::write(
        dir.join("small.toml"),
        "threads = 1\n[dataset]\nvocab_size = 16\nnum_keys = 3\ntrain_size = 64\n[model]\nembed_dim = 16\nhead_dim = 8\nnum_heads = 2\nmlp_dim = 16\n[train]\nsteps = 5\nbatch_size = 8\n",
    )
    .unwrap();
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn full_workflow_and_byte_identical_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    let cfg = ["--config", "small.toml"];
    ok(&vlprobe(d, &[&cfg[..], &["gen", "--out", "data"]].concat()));
    for (scheme, out) in [("sequential", "seq"), ("bapa", "bal"), ("bapa", "bal2")] {
        ok(&vlprobe(
            d,
            &[&cfg[..], &["train", "--dataset", "data/dataset.json", "--scheme", scheme, "--out", out]].concat(),
        ));
        ok(&vlprobe(
            d,
            &[&cfg[..], &["eval", "--checkpoint", &format!("{out}/checkpoint.json"), "--dataset", "data/dataset.json", "--out", out]].concat(),
        ));
    }
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("bal/checkpoint.json"), read("bal2/checkpoint.json"));
    assert_eq!(read("bal/report.json"), read("bal2/report.json"));
    assert_eq!(read("bal/report.csv"), read("bal2/report.csv"));

    let common = ["--checkpoint", "bal/checkpoint.json", "--dataset", "data/dataset.json", "--out", "ana"];
    ok(&vlprobe(d, &[&cfg[..], &["occlude"], &common[..]].concat()));
    ok(&vlprobe(d, &[&cfg[..], &["simprobe"], &common[..]].concat()));
    ok(&vlprobe(d, &[&cfg[..], &["flow"], &common[..]].concat()));
    for f in [
        "importance.csv",
        "importance.pgm",
        "importance_samples.csv",
        "occlusion.json",
        "similarity.csv",
        "flow.csv",
        "flow.pgm",
        "flow.json",
        "occlude.config.toml",
    ] {
        assert!(d.join("ana").join(f).exists(), "{f} missing");
    }
    assert!(String::from_utf8(read("ana/flow.pgm")).unwrap().starts_with("P2\n"));

    let out = ok(&vlprobe(
        d,
        &["compare", "--baseline", "seq/report.json", "--candidate", "bal/report.json", "--out", "cmp"],
    ));
    assert!(out.contains("variance"));
    assert!(d.join("cmp/comparison.json").exists());

    // Inputs are never modified.
    let before = read("data/dataset.json");
    ok(&vlprobe(d, &[&cfg[..], &["eval", "--checkpoint", "seq/checkpoint.json", "--dataset", "data/dataset.json", "--out", "again"]].concat()));
    assert_eq!(before, read("data/dataset.json"));
}

#[test]
fn untrained_checkpoint_scores_near_chance_overall() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    ok(&vlprobe(d, &["--config", "small.toml", "gen", "--out", "data"]));
    ok(&vlprobe(
        d,
        &["--config", "small.toml", "train", "--steps", "0", "--dataset", "data/dataset.json", "--out", "m"],
    ));
    ok(&vlprobe(
        d,
        &["--config", "small.toml", "eval", "--checkpoint", "m/checkpoint.json", "--dataset", "data/dataset.json", "--out", "m"],
    ));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("m/report.json")).unwrap()).unwrap();
    let pos: f64 = report["avg"].as_f64().unwrap();
    let neg: f64 = report["acc_neg"].as_f64().unwrap();
    let overall = (pos + neg) / 2.0;
    assert!((overall - 0.5).abs() <= 0.2, "overall {overall}");
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    let code = |args: &[&str]| vlprobe(d, args).status.code().unwrap();

    assert_eq!(code(&["frobnicate"]), 2);
    std::fs::write(d.join("bad.toml"), "[model]\nembed_dim = 10\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "gen"]), 3);
    std::fs::write(d.join("typo.toml"), "colour = 1\n").unwrap();
    assert_eq!(code(&["--config", "typo.toml", "gen"]), 3);
    assert_eq!(code(&["eval", "--checkpoint", "missing.json", "--dataset", "missing.json"]), 4);
    std::fs::write(d.join("junk.json"), "{\"format\": \"vlprobe-checkpoint\"").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", "junk.json", "--dataset", "junk.json"]), 5);
    std::fs::write(d.join("v9.json"), "{\"format\": \"vlprobe-checkpoint\", \"version\": 9}").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", "v9.json", "--dataset", "junk.json"]), 6);
    assert_eq!(code(&["--scheme", "mrope", "gen"]), 7);

    let out = vlprobe(d, &["--scheme", "mrope", "gen"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mrope"));
}

#[test]
fn pipeline_trains_both_schemes_per_seed_and_compares() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_config(d);
    let mut cfg = std::fs::read_to_string(d.join("small.toml")).unwrap();
    cfg.insert_str(0, "seeds = [3, 4]\n");
    std::fs::write(d.join("small.toml"), cfg).unwrap();
    let out = ok(&vlprobe(d, &["--config", "small.toml", "pipeline", "--out", "run"]));
    assert!(out.contains("seeds"));
    for sub in ["sequential-seed3", "bapa-seed3", "sequential-seed4", "bapa-seed4"] {
        for f in ["checkpoint.json", "report.json", "flow.json", "train_log.csv"] {
            assert!(d.join("run").join(sub).join(f).exists(), "{sub}/{f}");
        }
    }
    let written = std::fs::read_to_string(d.join("run/pipeline.config.toml")).unwrap();
    assert!(written.contains("seeds = [3, 4]") && written.contains("num_keys = 3"));
    let trend: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("run/comparison.json")).unwrap()).unwrap();
    assert_eq!(trend["pairs"].as_array().unwrap().len(), 2);
}
