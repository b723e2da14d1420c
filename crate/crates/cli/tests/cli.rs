use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[train]
epochs = 1
retrain_epochs = 1
batch_size = 10

[data]
kind = "synthetic-patterns"
samples_per_class = 10
"#;

fn snas(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snas"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn search_is_reproducible_and_feeds_retrain_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&snas(&a, &["search", s(&cfg), "--seed", "7"]));
    ok(&snas(&b, &["search", s(&cfg), "--seed", "7"]));
    assert_eq!(
        fs::read(a.join("search.ckpt")).unwrap(),
        fs::read(b.join("search.ckpt")).unwrap()
    );
    let metrics = fs::read_to_string(a.join("search_metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().nth(1),
        Some("iter,loss,ce,mem_bits,bit_synops,S,b_w_mean")
    );

    let decoded = ok(&snas(&a, &["decode", s(&a.join("search.ckpt"))]));
    assert!(decoded.starts_with("timesteps "));

    let m = tmp.path().join("m");
    let out = ok(&snas(
        &m,
        &[
            "retrain",
            s(&a.join("arch.txt")),
            s(&cfg),
            "--from",
            s(&a.join("search.ckpt")),
        ],
    ));
    assert!(out.contains("test accuracy"));
    let model = m.join("model.ckpt");

    let out = ok(&snas(&m, &["evaluate", s(&model), s(&cfg)]));
    assert!(out.starts_with("accuracy "));

    let out = ok(&snas(&m, &["report", s(&model), s(&cfg), "--name", "tiny"]));
    let mut lines = out.lines();
    assert_eq!(
        lines.next(),
        Some("model,acc,model_size_mb,synops,bit_synops,adds,mults,energy_mj,timesteps")
    );
    assert_eq!(lines.next().unwrap().split(',').count(), 9);
    assert!(m.join("report.csv").exists() && m.join("report.txt").exists());
}

#[test]
fn untrained_checkpoint_decodes_to_lowest_choices() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg_text = TINY.replace("epochs = 1\n", "epochs = 0\n");
    cfg_text = cfg_text.replace("retrain_epochs = 0", "retrain_epochs = 1");
    let cfg = tmp.path().join("fresh.toml");
    fs::write(&cfg, cfg_text).unwrap();
    ok(&snas(tmp.path(), &["search", s(&cfg)]));
    let arch = ok(&snas(
        tmp.path(),
        &["decode", s(&tmp.path().join("search.ckpt"))],
    ));
    assert!(arch.starts_with("timesteps 1\n"), "{arch}");
    assert!(arch.contains("bits 1"));
    assert!(!arch.contains("skip"));
}

#[test]
fn sweep_and_sequential_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let out = ok(&snas(
        tmp.path(),
        &[
            "sweep",
            s(&cfg),
            "--lambda1",
            "0,1e-5",
            "--lambda2",
            "0,1e-7",
        ],
    ));
    assert_eq!(out.lines().filter(|l| !l.starts_with('#')).count(), 3);
    let out = ok(&snas(tmp.path(), &["sequential", s(&cfg)]));
    assert!(out.contains("pipeline,acc,model_size_mb,bit_synops,design_seconds"));
    assert!(out.contains("\njoint,") && out.contains("\nsequential,"));
    assert!(tmp.path().join("sequential/stages.csv").exists());
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = snas(tmp.path(), &["search", "/no/such/config.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochz = 3\n").unwrap();
    assert!(!snas(tmp.path(), &["search", s(&bad)]).status.success());

    let cfg = config(tmp.path());
    let out = snas(
        tmp.path(),
        &["sweep", s(&cfg), "--lambda1", "0,1", "--lambda2", "0"],
    );
    assert!(!out.status.success());

    let junk = tmp.path().join("junk.ckpt");
    fs::write(
        &junk,
        b"SNASCKPT\x01\0\0\0 too short to be real, definitely",
    )
    .unwrap();
    let out = snas(tmp.path(), &["decode", s(&junk)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));
}

#[test]
fn default_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&snas(tmp.path(), &["default-config"]));
    let path = tmp.path().join("default.toml");
    fs::write(&path, &text).unwrap();
    let out = snas(tmp.path(), &["decode", s(&path)]);
    assert!(!out.status.success());
    assert!(text.contains("[space]") && text.contains("[data]"));
}
