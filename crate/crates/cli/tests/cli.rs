use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_classwise-adapt"));
    c.env("RUST_LOG", "warn").env_remove("CLASSWISE_ADAPT_CACHE");
    c
}

fn run_ok(args: &[&str], cache: Option<&Path>) -> Output {
    let mut c = bin();
    c.args(args);
    if let Some(cache) = cache {
        c.env("CLASSWISE_ADAPT_CACHE", cache);
    }
    let out = c.output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Keys shrinking the toy pipeline to seconds.
const TINY: &[&str] = &[
    "--toy_height", "16", "--toy_width", "16", "--crop_height", "16", "--crop_width", "16",
    "--toy_samples", "6", "--toy_eval_samples", "4",
    "--pretrain_iterations", "3", "--batch_size", "2",
    "--adapt_iterations", "2", "--adapt_batch_size", "2",
];

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY.iter().copied()).collect()
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-toy", "pretrain", "adapt", "eval", "fuse"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn unknown_key_fails_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["gen-toy", "--out", dir.path().to_str().unwrap(), "--no_such_key", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn unknown_key_in_config_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\nlearning_rate = 3\n").unwrap();
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "gen-toy"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn full_pipeline_emits_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let out = |name: &str| dir.path().join(name).display().to_string();
    let (pre, ada, ev, fu) = (out("pre"), out("adapt"), out("eval"), out("fuse"));

    run_ok(&with_tiny(&["gen-toy", "--out", &pre]), Some(&cache));
    run_ok(&with_tiny(&["pretrain", "--out", &pre]), Some(&cache));
    let init = format!("{pre}/cnn_c.ckpt");
    run_ok(&with_tiny(&["adapt", "--out", &ada, "--init", &init, "--mode", "classwise"]), Some(&cache));
    let ck = format!("{ada}/cnn_r.ckpt");
    run_ok(&with_tiny(&["eval", "--out", &ev, "--checkpoint", &ck]), Some(&cache));
    let preds = format!("{ev}/predictions");
    run_ok(&with_tiny(&["fuse", "--out", &fu, "--predictions", &preds]), Some(&cache));

    for f in ["cnn_c.ckpt", "pretrain_log.csv", "pretrain_timing.csv", "run.json"] {
        assert!(Path::new(&pre).join(f).exists(), "pretrain missing {f}");
    }
    for f in ["cnn_r.ckpt", "adapt_state.ckpt", "adapt_log.csv", "adapt_timing.csv", "run.json"] {
        assert!(Path::new(&ada).join(f).exists(), "adapt missing {f}");
    }
    for f in ["metrics.json", "run.json"] {
        assert!(Path::new(&ev).join(f).exists(), "eval missing {f}");
    }
    assert!(std::fs::read_dir(&preds).unwrap().count() == 4);
    assert!(Path::new(&fu).join("fused.ply").exists());

    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(format!("{ev}/metrics.json")).unwrap()).unwrap();
    for key in ["pa", "mpa", "miou"] {
        let v = metrics[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    let log = std::fs::read_to_string(format!("{ada}/adapt_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "iteration,l_seg,mean_l_d,mean_l_a");
    assert_eq!(log.lines().count(), 3);

    // The dataset landed under the cache root, not under `out`.
    assert!(std::fs::read_dir(&cache).unwrap().count() == 1);

    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(format!("{ada}/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "adapt");
    assert_eq!(run["config"]["mode"], "classwise");
    assert_eq!(run["config"]["adapt_iterations"], 2);
    assert_eq!(run["config"]["sgd_lr"], 0.01);
}

#[test]
fn run_json_reexecutes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a").display().to_string();
    let b = dir.path().join("b").display().to_string();
    run_ok(&with_tiny(&["gen-toy", "--out", &a, "--seed", "5"]), None);
    run_ok(&with_tiny(&["pretrain", "--out", &a, "--seed", "5"]), None);
    let cfg = format!("{a}/run.json");
    run_ok(&["--config", &cfg, "pretrain", "--out", &b], None);
    let ck = |d: &str| std::fs::read(format!("{d}/cnn_c.ckpt")).unwrap();
    assert_eq!(ck(&a), ck(&b));
    let log = |d: &str| std::fs::read_to_string(format!("{d}/pretrain_log.csv")).unwrap();
    assert_eq!(log(&a), log(&b));
}

#[test]
fn no_adaptation_mode_copies_the_source_network() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a").display().to_string();
    let b = dir.path().join("b").display().to_string();
    run_ok(&with_tiny(&["gen-toy", "--out", &a]), None);
    run_ok(&with_tiny(&["pretrain", "--out", &a]), None);
    let init = format!("{a}/cnn_c.ckpt");
    run_ok(&with_tiny(&["adapt", "--out", &b, "--init", &init, "--mode", "none"]), None);
    assert!(Path::new(&b).join("cnn_r.ckpt").exists());
    assert!(!Path::new(&b).join("adapt_log.csv").exists());
}
