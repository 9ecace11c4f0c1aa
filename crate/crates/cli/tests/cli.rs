use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 9] = [
    "height=16",
    "frames=3",
    "view_size=16",
    "rig_size=16",
    "iterations_first=30",
    "shift_warmup=10",
    "iterations_next=10",
    "rays_per_step=64",
    "hidden=16",
];

fn panost(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panost")).args(args).output().unwrap()
}

fn with_tiny<'a>(cmd: &'a str, ws: &'a Path) -> Vec<String> {
    let mut args = vec![cmd.to_string(), "-w".into(), ws.display().to_string()];
    for kv in TINY {
        args.push("--set".into());
        args.push(kv.into());
    }
    args
}

fn run(args: &[String]) -> Output {
    panost(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_then_run_all_then_up_to_date() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    let out = run(&with_tiny("synth", &ws));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out), "synth: done\n");

    // later commands read the config back from the manifest
    let ws_arg = ws.display().to_string();
    let out = panost(&["run-all", "-w", &ws_arg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("seam: done"));
    assert!(ws.join("cloud/cloud.ply").is_file());

    let again = stdout(&panost(&["run-all", "-w", &ws_arg]));
    assert_eq!(again.lines().filter(|l| l.ends_with("up to date")).count(), 8, "{again}");

    let out = panost(&["render", "-w", &ws_arg, "--frame", "2", "--size", "32"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("psnr"));
    assert!(ws.join("report/render_0002.png").is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().display().to_string();

    let bad = panost(&["synth", "-w", &ws, "--set", "no_such_key=1"]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = panost(&["synth", "-w", &ws, "--set", "frames=0"]);
    assert_eq!(bad.status.code(), Some(2));

    std::fs::write(dir.path().join(".lock"), "1\n").unwrap();
    let locked = panost(&["synth", "-w", &ws]);
    assert_eq!(locked.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&locked.stderr).contains("locked"));
    std::fs::remove_file(dir.path().join(".lock")).unwrap();

    let missing = panost(&["align-first", "-w", &ws]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn seam_gate() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    assert!(run(&with_tiny("synth", ws)).status.success());
    let ws_arg = ws.display().to_string();
    let out = panost(&["seam", "-w", &ws_arg, "--max-gap", "0"]);
    assert_eq!(out.status.code(), Some(3));
    let out = panost(&["seam", "-w", &ws_arg, "--max-gap", "1"]);
    assert!(out.status.success());
    let report = std::fs::read_to_string(ws.join("report/seam.txt")).unwrap();
    assert!(report.starts_with("# frame jump raw\n"));
    assert_eq!(report.lines().count(), 1 + 3 + 1);
}

#[test]
fn project_and_curate() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    assert!(run(&with_tiny("synth", &ws)).status.success());
    let view = dir.path().join("view.png");
    let out = panost(&[
        "project",
        "-i",
        &ws.join("frames/frame_0001.png").display().to_string(),
        "-o",
        &view.display().to_string(),
        "--yaw",
        "-30",
        "--width",
        "20",
        "--height",
        "10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(view.is_file());

    let out = panost(&[
        "curate",
        "-i",
        &ws.join("frames").display().to_string(),
        "--set",
        "sample_interval=1",
        "--set",
        "min_clip_len=2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out), "frames 0 2\n");
}
