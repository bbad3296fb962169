//! Trajectory-level evaluation: the KITTI subsequence error metric,
//! closed-form Sim(3) alignment for monocular comparisons, KITTI pose-file
//! export and plot-ready path/timing tables.
//!
//! Trajectory poses follow the KITTI pose-file convention: each pose maps
//! camera coordinates of frame k into the coordinates of frame 0, so the
//! camera position is the translation column.

use crate::geometry::{rotation_angle, Pose};
use nalgebra::{Matrix3, Vector3, SVD};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Subsequence lengths (meters) of the KITTI odometry metric.
pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory length mismatch: estimate {est}, ground truth {gt}")]
    LengthMismatch { est: usize, gt: usize },
    #[error("trajectory is empty")]
    Empty,
    #[error("degenerate point configuration for alignment: {0}")]
    Degenerate(String),
    #[error("pose file line {line}: expected 12 floats, got {got}")]
    BadPoseLine { line: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid float in pose file line {line}")]
    BadFloat { line: usize },
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub timestamps: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Self {
        Trajectory {
            poses,
            timestamps: None,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    /// Cumulative path length at each frame.
    pub fn cumulative_distances(&self) -> Vec<f64> {
        let mut d = Vec::with_capacity(self.poses.len());
        let mut acc = 0.0;
        d.push(0.0);
        for w in self.poses.windows(2) {
            acc += (w[1].translation - w[0].translation).norm();
            d.push(acc);
        }
        d
    }
}

/// Errors of one subsequence length bucket.
#[derive(Clone, Debug)]
pub struct LengthBucket {
    pub length_m: f64,
    /// Translational error, percent.
    pub t_rel: f64,
    /// Rotational error, degrees per 100 m.
    pub r_rel: f64,
    pub subsequences: usize,
}

/// KITTI-metric report: overall averages plus the per-length breakdown.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub t_rel: f64,
    pub r_rel: f64,
    pub per_length: Vec<LengthBucket>,
    pub subsequences: usize,
}

/// KITTI odometry metric with every frame as a candidate subsequence start.
pub fn kitti_metric(
    estimate: &Trajectory,
    ground_truth: &Trajectory,
) -> Result<Option<MetricReport>, EvalError> {
    kitti_metric_stride(estimate, ground_truth, 1)
}

/// KITTI odometry metric with a configurable start stride (the reference
/// devkit uses 10).
pub fn kitti_metric_stride(
    estimate: &Trajectory,
    ground_truth: &Trajectory,
    stride: usize,
) -> Result<Option<MetricReport>, EvalError> {
    if estimate.len() != ground_truth.len() {
        return Err(EvalError::LengthMismatch {
            est: estimate.len(),
            gt: ground_truth.len(),
        });
    }
    if estimate.is_empty() {
        return Err(EvalError::Empty);
    }
    let stride = stride.max(1);
    let dist = ground_truth.cumulative_distances();
    if *dist.last().unwrap() < KITTI_LENGTHS[0] {
        return Ok(None);
    }

    let mut t_sum = 0.0;
    let mut r_sum = 0.0;
    let mut total = 0usize;
    let mut buckets: Vec<LengthBucket> = Vec::new();
    for &len in &KITTI_LENGTHS {
        let mut bt = 0.0;
        let mut br = 0.0;
        let mut count = 0usize;
        let mut start = 0usize;
        while start < estimate.len() {
            if let Some(end) = first_frame_at_distance(&dist, start, len) {
                let gt_rel = ground_truth.poses[start]
                    .inverse()
                    .compose(&ground_truth.poses[end]);
                let est_rel = estimate.poses[start]
                    .inverse()
                    .compose(&estimate.poses[end]);
                let err = gt_rel.inverse().compose(&est_rel);
                bt += err.translation.norm() / len;
                br += rotation_angle(&err.rotation) / len;
                count += 1;
            } else {
                break;
            }
            start += stride;
        }
        if count > 0 {
            t_sum += bt;
            r_sum += br;
            total += count;
            buckets.push(LengthBucket {
                length_m: len,
                t_rel: bt / count as f64 * 100.0,
                r_rel: br / count as f64 * (180.0 / std::f64::consts::PI) * 100.0,
                subsequences: count,
            });
        }
    }
    if total == 0 {
        return Ok(None);
    }
    Ok(Some(MetricReport {
        t_rel: t_sum / total as f64 * 100.0,
        r_rel: r_sum / total as f64 * (180.0 / std::f64::consts::PI) * 100.0,
        per_length: buckets,
        subsequences: total,
    }))
}

fn first_frame_at_distance(dist: &[f64], start: usize, len: f64) -> Option<usize> {
    let target = dist[start] + len;
    dist[start..]
        .iter()
        .position(|&d| d >= target)
        .map(|off| start + off)
}

/// Result of Sim(3)/SE(3) least-squares alignment.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub aligned: Trajectory,
}

/// Closed-form Umeyama alignment of the estimate onto the ground truth,
/// minimizing Σ‖gt_i − (s·R·est_i + t)‖². `with_scale = false` fixes s = 1.
pub fn umeyama_align(
    estimate: &Trajectory,
    ground_truth: &Trajectory,
    with_scale: bool,
) -> Result<Alignment, EvalError> {
    if estimate.len() != ground_truth.len() {
        return Err(EvalError::LengthMismatch {
            est: estimate.len(),
            gt: ground_truth.len(),
        });
    }
    let src = estimate.positions();
    let dst = ground_truth.positions();
    let n = src.len() as f64;
    if src.len() < 3 {
        return Err(EvalError::Degenerate("fewer than 3 positions".into()));
    }

    let mu_s: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;

    let mut sigma = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(&dst) {
        let sc = s - mu_s;
        let dc = d - mu_d;
        sigma += dc * sc.transpose() / n;
        var_s += sc.norm_squared() / n;
    }
    if var_s < 1e-18 {
        return Err(EvalError::Degenerate("zero spread in estimate".into()));
    }

    let svd = SVD::new(sigma, true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let d = svd.singular_values;
    // Collinear clouds leave the rotation about the line unconstrained.
    if d[1] <= 1e-12 * d[0].max(1.0) {
        return Err(EvalError::Degenerate("collinear positions".into()));
    }
    // Reflection guard: force det(R) = +1.
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * vt.determinant()) < 0.0 {
        s_diag.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * vt;
    let scale = if with_scale {
        (d.component_mul(&s_diag)).sum() / var_s
    } else {
        1.0
    };
    let translation = mu_d - scale * (rotation * mu_s);

    let aligned_poses = estimate
        .poses
        .iter()
        .map(|p| Pose {
            rotation: rotation * p.rotation,
            translation: scale * (rotation * p.translation) + translation,
        })
        .collect();
    Ok(Alignment {
        scale,
        rotation,
        translation,
        aligned: Trajectory {
            poses: aligned_poses,
            timestamps: estimate.timestamps.clone(),
        },
    })
}

/// Sum of squared residuals after applying a similarity to the estimate.
pub fn alignment_residual(
    estimate: &Trajectory,
    ground_truth: &Trajectory,
    scale: f64,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
) -> f64 {
    estimate
        .positions()
        .iter()
        .zip(ground_truth.positions())
        .map(|(e, g)| (g - (scale * (rotation * e) + translation)).norm_squared())
        .sum()
}

/// Serializes a trajectory in the KITTI pose format: 12 floats per line,
/// row-major 3x4.
pub fn trajectory_to_kitti_string(t: &Trajectory) -> String {
    let mut out = String::new();
    for p in &t.poses {
        let mut first = true;
        for r in 0..3 {
            for c in 0..4 {
                if !first {
                    out.push(' ');
                }
                first = false;
                let v = if c < 3 {
                    p.rotation[(r, c)]
                } else {
                    p.translation[r]
                };
                let _ = write!(out, "{}", v);
            }
        }
        out.push('\n');
    }
    out
}

pub fn export_trajectory(t: &Trajectory, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, trajectory_to_kitti_string(t))?;
    Ok(())
}

pub fn trajectory_from_kitti_string(s: &str) -> Result<Trajectory, EvalError> {
    let mut poses = Vec::new();
    for (i, line) in s.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| EvalError::BadFloat { line: i + 1 })?;
        if vals.len() != 12 {
            return Err(EvalError::BadPoseLine {
                line: i + 1,
                got: vals.len(),
            });
        }
        let rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vector3::new(vals[3], vals[7], vals[11]);
        poses.push(Pose::new(rotation, translation));
    }
    if poses.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(Trajectory::new(poses))
}

pub fn import_trajectory(path: &Path) -> Result<Trajectory, EvalError> {
    trajectory_from_kitti_string(&std::fs::read_to_string(path)?)
}

/// Five-number summary (min, quartiles, max) of per-frame timings.
#[derive(Clone, Copy, Debug)]
pub struct TimingSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantiles over the sorted sample.
pub fn timing_summary(timings_ms: &[f64]) -> Result<TimingSummary, EvalError> {
    if timings_ms.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut v: Vec<f64> = timings_ms.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let idx = p * (v.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let frac = idx - lo as f64;
        v[lo] * (1.0 - frac) + v[hi] * frac
    };
    Ok(TimingSummary {
        min: v[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: *v.last().unwrap(),
    })
}

/// Ground-plane (x–z) path of one named trajectory.
#[derive(Clone, Debug)]
pub struct PathTable {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct PlotData {
    pub paths: Vec<PathTable>,
    pub timing: Option<TimingSummary>,
}

/// Builds plot-ready tables: one x–z path per trajectory plus an optional
/// timing summary.
pub fn plot_data(
    trajectories: &[(String, &Trajectory)],
    timings_ms: Option<&[f64]>,
) -> Result<PlotData, EvalError> {
    if trajectories.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut paths = Vec::new();
    for (name, t) in trajectories {
        if t.is_empty() {
            return Err(EvalError::Empty);
        }
        paths.push(PathTable {
            name: name.clone(),
            points: t.positions().iter().map(|p| (p.x, p.z)).collect(),
        });
    }
    let timing = match timings_ms {
        Some(t) => Some(timing_summary(t)?),
        None => None,
    };
    Ok(PlotData { paths, timing })
}

impl PathTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,z\n");
        for (x, z) in &self.points {
            let _ = writeln!(s, "{},{}", x, z);
        }
        s
    }
}

impl TimingSummary {
    pub fn to_csv(&self) -> String {
        format!(
            "min,q1,median,q3,max\n{},{},{},{},{}\n",
            self.min, self.q1, self.median, self.q3, self.max
        )
    }
}
