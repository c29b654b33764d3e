use std::path::Path;
use std::process::{Command, Output};

fn flatlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flatlab")).args(args).output().expect("binary runs")
}

const TINY: [&str; 8] = ["--set", "model=mlp[2-4-2]", "--set", "epochs=3", "--n", "60", "--set", "batch_size=8"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

fn dir_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_history_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = flatlab(&with(&["train", "--mode", "sam", "--out", dir_arg(tmp.path())], &TINY));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = std::fs::read_to_string(tmp.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,split,loss,metric"));
    assert_eq!(history.lines().count(), 1 + 3 * 2);
    assert!(tmp.path().join("sam_seed0.fltl").exists());
}

#[test]
fn config_errors_exit_with_2() {
    let out = flatlab(&["train", "--set", "model=transformer[2-2]"]);
    assert_eq!(out.status.code(), Some(2));
    let out = flatlab(&["train", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = flatlab(&["sweep", "--set", "swa_start_grid=[1.0]"]);
    assert_eq!(out.status.code(), Some(2));
    let out = flatlab(&["train", "--mode", "adamw"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with(
        &["train", "--out", dir_arg(tmp.path()), "--set", "model=linear[2-2]", "--set", "lr=1e308", "--set", "schedule=constant"],
        &TINY[2..],
    );
    let out = flatlab(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_then_report_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with(
        &["sweep", "--out", dir_arg(tmp.path()), "--set", "seeds=[0,1]", "--set", "rho_grid=[0.05]", "--set", "swa_start_grid=[0.5]"],
        &TINY,
    );
    let out = flatlab(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("baseline") && stdout.contains("wasam"));
    let summary = std::fs::read(tmp.path().join("summary.csv")).unwrap();
    let text = std::fs::read(tmp.path().join("summary.txt")).unwrap();
    let out = flatlab(&["report", dir_arg(tmp.path())]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(tmp.path().join("summary.csv")).unwrap(), summary);
    assert_eq!(std::fs::read(tmp.path().join("summary.txt")).unwrap(), text);
}

#[test]
fn report_on_missing_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = flatlab(&["report", dir_arg(tmp.path())]);
    assert!(!out.status.success());
}

#[test]
fn landscapes_from_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let train_dir = tmp.path().join("train");
    let out = flatlab(&with(&["train", "--out", dir_arg(&train_dir)], &TINY));
    assert!(out.status.success());
    let ck = train_dir.join("baseline_seed0.fltl");

    let interp = tmp.path().join("interp");
    let out = flatlab(&with(
        &["interpolate", "--a", dir_arg(&ck), "--b", dir_arg(&ck), "--out", dir_arg(&interp)],
        &TINY,
    ));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let barrier = std::fs::read_to_string(interp.join("barrier.csv")).unwrap();
    let row: Vec<&str> = barrier.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "0");
    let grid = std::fs::read_to_string(interp.join("interpolation.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 26 * 2);

    let surf = tmp.path().join("surf");
    let out = flatlab(&with(
        &["surface", "--center", dir_arg(&ck), "--steps", "4", "--range=-0.5:0.5", "--out", dir_arg(&surf)],
        &TINY,
    ));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let grid = std::fs::read_to_string(surf.join("surface.csv")).unwrap();
    assert_eq!(grid.lines().next(), Some("alpha,beta,split,loss,metric,flag_nonfinite"));
    assert_eq!(grid.lines().filter(|l| l.contains(",train,")).count(), 16);
    assert!(surf.join("surface_annotations.csv").exists());
}
