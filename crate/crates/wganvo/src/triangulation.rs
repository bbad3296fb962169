//! DLT triangulation of rectified stereo correspondences, feeding the 3D
//! point sets of the reprojection loss. Feature matching itself is behind
//! [`CorrespondenceProvider`]; the shipped providers read precomputed
//! matches from JSON lines or synthesize them for tests.

use crate::dataset::CameraIntrinsics;
use crate::losses::PointSet;
use nalgebra::{Matrix3x4, Matrix4, Vector2, Vector3, Vector4, SVD};
use std::io::BufRead;
use std::path::Path;
use thiserror::Error;

/// Pixel pair observing the same 3D point in a rectified stereo rig.
#[derive(Clone, Copy, Debug)]
pub struct Correspondence {
    pub left_px: Vector2<f64>,
    pub right_px: Vector2<f64>,
}

impl Correspondence {
    pub fn disparity(&self) -> f64 {
        self.left_px.x - self.right_px.x
    }
}

#[derive(Debug, Error)]
pub enum TriangulationError {
    #[error("non-positive disparity {0}")]
    NonPositiveDisparity(f64),
    #[error("epipolar violation: |dy| = {0} px exceeds 2 px")]
    EpipolarViolation(f64),
    #[error("degenerate DLT system")]
    Degenerate,
    #[error("triangulated point has non-positive depth {0}")]
    BehindCamera(f64),
    #[error("no correspondence survived triangulation")]
    EmptyPointSet,
    #[error("stereo baseline missing from intrinsics")]
    MissingBaseline,
    #[error("correspondence file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn projection_matrices(k: &CameraIntrinsics, baseline: f64) -> (Matrix3x4<f64>, Matrix3x4<f64>) {
    let km = k.matrix();
    let mut left = Matrix3x4::zeros();
    left.fixed_view_mut::<3, 3>(0, 0).copy_from(&km);
    let mut right = left;
    // Right camera sits at x = +baseline in the left frame.
    right
        .fixed_view_mut::<3, 1>(0, 3)
        .copy_from(&(km * Vector3::new(-baseline, 0.0, 0.0)));
    (left, right)
}

/// Triangulates one rectified-stereo correspondence with the DLT: stack
/// the four linear constraints, take the smallest right singular vector,
/// dehomogenize.
pub fn triangulate_dlt(
    c: &Correspondence,
    k: &CameraIntrinsics,
    baseline: f64,
) -> Result<Vector3<f64>, TriangulationError> {
    let d = c.disparity();
    if d <= 0.0 {
        return Err(TriangulationError::NonPositiveDisparity(d));
    }
    let dy = (c.left_px.y - c.right_px.y).abs();
    if dy > 2.0 {
        return Err(TriangulationError::EpipolarViolation(dy));
    }
    let (pl, pr) = projection_matrices(k, baseline);
    let mut a = Matrix4::zeros();
    a.row_mut(0)
        .copy_from(&(c.left_px.x * pl.row(2) - pl.row(0)));
    a.row_mut(1)
        .copy_from(&(c.left_px.y * pl.row(2) - pl.row(1)));
    a.row_mut(2)
        .copy_from(&(c.right_px.x * pr.row(2) - pr.row(0)));
    a.row_mut(3)
        .copy_from(&(c.right_px.y * pr.row(2) - pr.row(1)));

    let svd = SVD::new(a, true, true);
    let sv = &svd.singular_values;
    if sv[0] <= 0.0 || sv[2] <= sv[0] * 1e-14 {
        return Err(TriangulationError::Degenerate);
    }
    let vt = svd.v_t.unwrap();
    let h: Vector4<f64> = vt.row(3).transpose();
    if h.w.abs() <= 1e-14 * h.norm() {
        return Err(TriangulationError::Degenerate);
    }
    let p = Vector3::new(h.x / h.w, h.y / h.w, h.z / h.w);
    if p.z <= 0.0 {
        return Err(TriangulationError::BehindCamera(p.z));
    }
    Ok(p)
}

/// Triangulates every correspondence, drops failures, and uniformly
/// subsamples to `max_points`.
pub fn build_point_set(
    correspondences: &[Correspondence],
    k: &CameraIntrinsics,
    baseline: f64,
    max_points: usize,
) -> Result<PointSet, TriangulationError> {
    let mut points: Vec<Vector3<f64>> = correspondences
        .iter()
        .filter_map(|c| triangulate_dlt(c, k, baseline).ok())
        .collect();
    if points.is_empty() {
        return Err(TriangulationError::EmptyPointSet);
    }
    if points.len() > max_points && max_points > 0 {
        let n = points.len();
        points = (0..max_points)
            .map(|i| points[i * n / max_points])
            .collect();
    }
    Ok(PointSet { points })
}

/// Source of per-frame stereo correspondences.
pub trait CorrespondenceProvider {
    fn correspondences(&self, frame: usize) -> Result<Vec<Correspondence>, TriangulationError>;
}

/// Reads precomputed matches from JSON lines, one record per frame:
/// `{"frame": n, "matches": [[lx,ly,rx,ry], ...]}`.
pub struct FileCorrespondences {
    by_frame: std::collections::HashMap<usize, Vec<Correspondence>>,
}

impl FileCorrespondences {
    pub fn load(path: &Path) -> Result<Self, TriangulationError> {
        #[derive(serde::Deserialize)]
        struct Record {
            frame: usize,
            matches: Vec<[f64; 4]>,
        }
        let file = std::fs::File::open(path)?;
        let mut by_frame = std::collections::HashMap::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| TriangulationError::BadFile(format!("line {}: {e}", i + 1)))?;
            let matches = rec
                .matches
                .iter()
                .map(|m| Correspondence {
                    left_px: Vector2::new(m[0], m[1]),
                    right_px: Vector2::new(m[2], m[3]),
                })
                .collect();
            by_frame.insert(rec.frame, matches);
        }
        Ok(FileCorrespondences { by_frame })
    }
}

impl CorrespondenceProvider for FileCorrespondences {
    fn correspondences(&self, frame: usize) -> Result<Vec<Correspondence>, TriangulationError> {
        Ok(self.by_frame.get(&frame).cloned().unwrap_or_default())
    }
}

/// Projects known 3D points into both cameras of a rectified rig; used by
/// tests and round-trip checks.
pub struct SyntheticCorrespondences {
    pub points: Vec<Vector3<f64>>,
    pub intrinsics: CameraIntrinsics,
    pub baseline: f64,
}

impl SyntheticCorrespondences {
    pub fn project_all(&self) -> Vec<Correspondence> {
        self.points
            .iter()
            .map(|p| {
                let fx = self.intrinsics.fx;
                let fy = self.intrinsics.fy;
                let cx = self.intrinsics.cx;
                let cy = self.intrinsics.cy;
                let left = Vector2::new(fx * p.x / p.z + cx, fy * p.y / p.z + cy);
                let right = Vector2::new(fx * (p.x - self.baseline) / p.z + cx, fy * p.y / p.z + cy);
                Correspondence {
                    left_px: left,
                    right_px: right,
                }
            })
            .collect()
    }
}

impl CorrespondenceProvider for SyntheticCorrespondences {
    fn correspondences(&self, _frame: usize) -> Result<Vec<Correspondence>, TriangulationError> {
        Ok(self.project_all())
    }
}
