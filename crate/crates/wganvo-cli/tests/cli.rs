//! End-to-end subcommand tests against the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn wganvo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wganvo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Straight-line KITTI pose file: identity rotation, z advancing by
/// `step` per frame.
fn write_line_trajectory(path: &Path, n: usize, step: f64) {
    let mut s = String::new();
    for k in 0..n {
        let z = step * k as f64;
        s.push_str(&format!("1 0 0 0 0 1 0 0 0 0 1 {z}\n"));
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn usage_errors_exit_one() {
    let o = wganvo(&["--definitely-not-a-flag"]);
    assert_eq!(o.status.code(), Some(1));

    // Missing required --sequences on preprocess.
    let o = wganvo(&["preprocess", "--kitti-root", "/nowhere", "--out", "/nowhere2"]);
    assert_eq!(o.status.code(), Some(1));

    let o = wganvo(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = wganvo(&["synth", "--pairs", "5", "--out", out.to_str().unwrap(), "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ia = std::fs::read(a.join("index.jsonl")).unwrap();
    let ib = std::fs::read(b.join("index.jsonl")).unwrap();
    assert_eq!(ia, ib, "rerun with same inputs is byte-identical");
}

#[test]
fn train_infer_round_trip_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = wganvo(&["synth", "--pairs", "12", "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = wganvo(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--regime",
        "only_vo",
        "--total-iters",
        "2",
        "--batch-size",
        "4",
        "--base-channels",
        "2",
        "--seed",
        "7",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("resolved config"));
    assert!(run.join("final.ckpt").exists());
    assert!(run.join("train_log.csv").exists());

    let inferred = dir.path().join("inferred");
    let o = wganvo(&[
        "infer",
        "--checkpoint",
        run.join("final.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        inferred.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let traj = std::fs::read_to_string(inferred.join("trajectory.txt")).unwrap();
    // 12 relative motions compose into 13 absolute poses.
    assert_eq!(traj.lines().count(), 13);
    let timings = std::fs::read_to_string(inferred.join("timings.csv")).unwrap();
    assert_eq!(timings.lines().count(), 12);
}

#[test]
fn train_refuses_held_out_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = wganvo(&["synth", "--pairs", "6", "--out", data.to_str().unwrap()]);
    assert!(o.status.success());

    let o = wganvo(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--regime",
        "only_vo",
        "--total-iters",
        "1",
        "--batch-size",
        "2",
        "--base-channels",
        "2",
        "--test-sequence",
        "synthetic",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("hold-out"), "{err}");
    assert!(err.contains("\"kind\":\"user\""), "{err}");
}

#[test]
fn eval_identical_trajectories_print_zero_row() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    write_line_trajectory(&gt, 200, 1.0);
    let o = wganvo(&[
        "eval",
        "--est",
        gt.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "0.00 0.00");
}

/// L-shaped path (forward in z, then sideways in x) so the positions are
/// not collinear; `scale` shrinks the whole path uniformly.
fn write_l_trajectory(path: &Path, scale: f64) {
    let mut s = String::new();
    for k in 0..300 {
        let (x, z) = if k < 150 {
            (0.0, k as f64)
        } else {
            ((k - 150) as f64, 150.0)
        };
        s.push_str(&format!(
            "1 0 0 {} 0 1 0 0 0 0 1 {}\n",
            x * scale,
            z * scale
        ));
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn eval_sim3_alignment_removes_pure_scale_error() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    let est = dir.path().join("est.txt");
    write_l_trajectory(&gt, 1.0);
    write_l_trajectory(&est, 0.5);

    let o = wganvo(&[
        "eval",
        "--est",
        est.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--align",
        "sim3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "0.00 0.00");

    // Unaligned, the half-scale estimate shows a large translational
    // error (subsequences crossing the corner dilute the exact 50%).
    let o = wganvo(&[
        "eval",
        "--est",
        est.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let row = stdout(&o);
    let t_rel: f64 = row.split_whitespace().next().unwrap().parse().unwrap();
    assert!((30.0..=50.01).contains(&t_rel), "t_rel {t_rel}");
}

#[test]
fn eval_bad_align_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    write_line_trajectory(&gt, 150, 1.0);
    let o = wganvo(&[
        "eval",
        "--est",
        gt.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--align",
        "procrustes",
    ]);
    assert_eq!(o.status.code(), Some(1));

    let o = wganvo(&[
        "eval",
        "--est",
        dir.path().join("missing.txt").to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("\"kind\":\"internal\""));
}

#[test]
fn plot_emits_path_and_timing_tables() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    write_line_trajectory(&gt, 50, 1.0);
    let timings = dir.path().join("t.csv");
    std::fs::write(&timings, "1\n2\n3\n4\n5\n").unwrap();
    let out = dir.path().join("plots");

    let o = wganvo(&[
        "plot",
        "--traj",
        gt.to_str().unwrap(),
        "--timings",
        timings.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let path_csv = std::fs::read_to_string(out.join("path_gt.csv")).unwrap();
    assert_eq!(path_csv.lines().count(), 51); // header + 50 points
    let timing_csv = std::fs::read_to_string(out.join("timing_summary.csv")).unwrap();
    assert!(timing_csv.contains('3'), "median present: {timing_csv}");
}
