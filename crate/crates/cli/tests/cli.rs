use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn spa")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn manifests() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests")
}

/// Small gratings run on the desk CNN, pruned to 30% of its channels.
fn quick_config(dir: &Path) -> PathBuf {
    let path = dir.join("quick.toml");
    fs::write(
        &path,
        format!(
            r#"
seed = 1
manifest = "{}"
rank = 4
out = "run"

[dataset]
kind = "gratings"
seed = 2
train = 64
eval = 32

[schedule]
warmup_epochs = 1
final_density = 0.30
batch_size = 32
"#,
            manifests().join("desk-cnn.toml").display()
        ),
    )
    .unwrap();
    path
}

fn checkpoints(run: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(run.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn train_prune_then_fuse_and_switch() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config(dir.path());
    let cfg = config.to_str().unwrap();
    let printed = stdout(&spa(&["train-prune", "--config", cfg]));
    let run = dir.path().join("run");

    let names = checkpoints(&run);
    assert_eq!(names.len(), 15, "{names:?}");
    assert_eq!(names[0], "step-00.spad");
    assert_eq!(names[14], "step-14.spad");
    let metrics = fs::read_to_string(run.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 16);
    assert!(metrics.starts_with("step\tdensity_channels"));
    assert_eq!(printed, metrics);
    assert!(run.join("base.spad").exists() && run.join("run.toml").exists());

    // Same seed, same numbers.
    let again = dir.path().join("again");
    stdout(&spa(&["train-prune", "--config", cfg, "--out", again.to_str().unwrap()]));
    assert_eq!(fs::read_to_string(again.join("metrics.tsv")).unwrap(), metrics);

    let base = run.join("base.spad");
    let (a, b) = (run.join("checkpoints/step-14.spad"), run.join("checkpoints/step-03.spad"));
    let fused = dir.path().join("fused.spad");
    let report = stdout(&spa(&[
        "fuse",
        "--base",
        base.to_str().unwrap(),
        "--delta",
        a.to_str().unwrap(),
        "--out",
        fused.to_str().unwrap(),
        "--config",
        cfg,
    ]));
    let acc = |label: &str| {
        report
            .lines()
            .find_map(|l| l.strip_prefix(label))
            .unwrap_or_else(|| panic!("no `{label}` in {report}"))
            .trim()
            .to_string()
    };
    assert_eq!(acc("masked accuracy"), acc("fused accuracy"));
    assert!(fs::metadata(&fused).unwrap().len() < fs::metadata(&base).unwrap().len());

    let switched = stdout(&spa(&[
        "switch",
        "--base",
        base.to_str().unwrap(),
        "--delta",
        a.to_str().unwrap(),
        "--delta",
        b.to_str().unwrap(),
        "--delta",
        a.to_str().unwrap(),
    ]));
    let lines: Vec<&str> = switched.lines().collect();
    assert_eq!(lines.len(), 4, "{switched}");
    assert_eq!(lines[1], lines[3]);
    assert_ne!(lines[1], lines[2]);
}

#[test]
fn report_matches_resnet50_counts() {
    let m = manifests().join("resnet50.toml");
    let m = m.to_str().unwrap();
    assert!(stdout(&spa(&["report", m])).contains("ΔParams 23,520.8K"));
    assert!(stdout(&spa(&["report", m, "--mode", "splora", "--rank", "8"])).contains("ΔParams 466.0K"));
}

#[test]
fn curve_prints_csv() {
    let csv = stdout(&spa(&["curve", "768", "3072", "32"]));
    assert!(csv.starts_with("method,density,learned_fraction\n"));
    assert!(csv.contains("splora(r=32),1.00000,0.05208"));
    assert_eq!(csv.lines().count(), 1 + 3 * 20);
}

#[test]
fn invalid_manifest_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "schema_version = 1\nname = \"x\"\n").unwrap();
    let out = spa(&["report", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn truncated_delta_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.spad");
    fs::write(&t, b"SPAD\x01\x00").unwrap();
    let out = spa(&["switch", "--base", t.to_str().unwrap(), "--delta", t.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(13));
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_spa"))
        .args(["curve", "4", "4", "1"])
        .env("SPA_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
