//! Objective functions: the supervised translation/rotation/β-weighted
//! pose losses, the reprojection loss over triangulated point sets, and
//! the Wasserstein critic/generator objectives with gradient penalty.
//!
//! Each differentiable loss comes with its analytic gradient; the test
//! suite checks every gradient against central finite differences.

use crate::dataset::CameraIntrinsics;
use crate::geometry::MotionLabel;
use crate::model::PosePrediction;
use nalgebra::{Matrix2x3, Matrix3, Matrix3x4, Vector2, Vector3, Vector4};
use ndarray::{Array1, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("point has non-positive depth {0} under the given pose")]
    PointBehindCamera(f64),
    #[error("no point survived the depth check; reprojection loss is degenerate")]
    DegenerateLoss,
    #[error("point set is empty")]
    EmptyPointSet,
}

/// Weights and schedule knobs of the combined objective.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Rotational weight β of the combined pose loss.
    pub beta: f64,
    /// Gradient-penalty weight λ.
    pub gp_lambda: f64,
    /// Critic updates per generator update.
    pub critic_steps: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 100.0,
            gp_lambda: 10.0,
            critic_steps: 5,
        }
    }
}

/// 3D points observable from the second frame of a pair, camera coordinates.
#[derive(Clone, Debug)]
pub struct PointSet {
    pub points: Vec<Vector3<f64>>,
}

/// ‖x − x̂‖₂
pub fn loss_translation(label: &MotionLabel, pred: &PosePrediction) -> f64 {
    (label.x - pred.x_hat).norm()
}

/// Gradient of [`loss_translation`] with respect to x̂ (zero subgradient at
/// the kink).
pub fn loss_translation_grad(label: &MotionLabel, pred: &PosePrediction) -> Vector3<f64> {
    let d = pred.x_hat - label.x;
    let n = d.norm();
    if n < 1e-12 {
        Vector3::zeros()
    } else {
        d / n
    }
}

/// ‖q − q̂‖₂ on the raw, unnormalized network quaternion.
pub fn loss_rotation(label: &MotionLabel, pred: &PosePrediction) -> f64 {
    (quat_vec(label) - pred.q_hat).norm()
}

pub fn loss_rotation_grad(label: &MotionLabel, pred: &PosePrediction) -> Vector4<f64> {
    let d = pred.q_hat - quat_vec(label);
    let n = d.norm();
    if n < 1e-12 {
        Vector4::zeros()
    } else {
        d / n
    }
}

fn quat_vec(label: &MotionLabel) -> Vector4<f64> {
    let [w, x, y, z] = label.q.as_array();
    Vector4::new(w, x, y, z)
}

/// Combined pose loss `L_x + β L_q`.
pub fn loss_beta(label: &MotionLabel, pred: &PosePrediction, beta: f64) -> f64 {
    loss_translation(label, pred) + beta * loss_rotation(label, pred)
}

/// Gradient of [`loss_beta`] with respect to (x̂, q̂).
pub fn loss_beta_grad(
    label: &MotionLabel,
    pred: &PosePrediction,
    beta: f64,
) -> (Vector3<f64>, Vector4<f64>) {
    (
        loss_translation_grad(label, pred),
        beta * loss_rotation_grad(label, pred),
    )
}

/// Perspective projection `π(K(Ax + b))`.
pub fn project(
    a: &Matrix3<f64>,
    x: &Vector3<f64>,
    b: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>, LossError> {
    let p = k.matrix() * (a * x + b);
    if p.z <= 0.0 {
        return Err(LossError::PointBehindCamera(p.z));
    }
    Ok(Vector2::new(p.x / p.z, p.y / p.z))
}

/// Reprojection loss value together with the number of points dropped for
/// falling behind either camera.
#[derive(Clone, Debug)]
pub struct ReprojectionLoss {
    pub value: f64,
    pub dropped: usize,
}

/// Mean pixel distance between projections of the point set under the
/// ground-truth and predicted relative poses. The predicted quaternion is
/// normalized here, since a rotation matrix is required.
pub fn loss_reprojection(
    label: &MotionLabel,
    pred: &PosePrediction,
    k: &CameraIntrinsics,
    points: &PointSet,
) -> Result<ReprojectionLoss, LossError> {
    let (value, _, _, dropped) = reprojection_terms(label, pred, k, points, false)?;
    Ok(ReprojectionLoss { value, dropped })
}

/// Reprojection loss plus its analytic gradient with respect to
/// (x̂, raw q̂).
pub fn loss_reprojection_grad(
    label: &MotionLabel,
    pred: &PosePrediction,
    k: &CameraIntrinsics,
    points: &PointSet,
) -> Result<(ReprojectionLoss, Vector3<f64>, Vector4<f64>), LossError> {
    let (value, gx, gq, dropped) = reprojection_terms(label, pred, k, points, true)?;
    Ok((ReprojectionLoss { value, dropped }, gx, gq))
}

fn reprojection_terms(
    label: &MotionLabel,
    pred: &PosePrediction,
    k: &CameraIntrinsics,
    points: &PointSet,
    with_grad: bool,
) -> Result<(f64, Vector3<f64>, Vector4<f64>, usize), LossError> {
    if points.points.is_empty() {
        return Err(LossError::EmptyPointSet);
    }
    let r_gt = label.q.to_rotation();
    let t_gt = label.x;

    let q_norm = pred.q_hat.norm();
    // Vector4 is (w, x, y, z) throughout this module.
    let n = pred.q_hat / q_norm;
    let r_hat = quat_to_rotation(&n);
    let t_hat = pred.x_hat;
    let km = k.matrix();

    let mut kept = 0usize;
    let mut dropped = 0usize;
    let mut sum = 0.0;
    let mut gx = Vector3::zeros();
    let mut gq_n = Vector4::zeros();

    for x in &points.points {
        let p_gt = km * (r_gt * x + t_gt);
        let p_hat = km * (r_hat * x + t_hat);
        if p_gt.z <= 0.0 || p_hat.z <= 0.0 {
            dropped += 1;
            continue;
        }
        kept += 1;
        let u_gt = Vector2::new(p_gt.x / p_gt.z, p_gt.y / p_gt.z);
        let u_hat = Vector2::new(p_hat.x / p_hat.z, p_hat.y / p_hat.z);
        let e = u_gt - u_hat;
        let en = e.norm();
        sum += en;

        if with_grad && en > 1e-12 {
            // dL/du_hat = -e/‖e‖; chain through π, K and the pose.
            let dl_du = -e / en;
            let z = p_hat.z;
            let j_pi = Matrix2x3::new(
                1.0 / z,
                0.0,
                -p_hat.x / (z * z),
                0.0,
                1.0 / z,
                -p_hat.y / (z * z),
            );
            let dl_dp = (dl_du.transpose() * j_pi).transpose();
            let dl_dcam = km.transpose() * dl_dp;
            gx += dl_dcam;
            let drx_dn = d_rotate_d_quat(&n, x);
            gq_n += drx_dn.transpose() * dl_dcam;
        }
    }
    if kept == 0 {
        return Err(LossError::DegenerateLoss);
    }
    let inv = 1.0 / kept as f64;
    let value = sum * inv;
    if !with_grad {
        return Ok((value, Vector3::zeros(), Vector4::zeros(), dropped));
    }
    gx *= inv;
    gq_n *= inv;
    // Back through the normalization q̂ / ‖q̂‖.
    let gq = (gq_n - n * n.dot(&gq_n)) / q_norm;
    Ok((value, gx, gq, dropped))
}

/// Rotation matrix of a unit quaternion stored as (w, x, y, z) in Vector4.
fn quat_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    crate::geometry::Quaternion::new(q[0], q[1], q[2], q[3]).to_rotation()
}

/// Jacobian of `R(q) x` with respect to the unit quaternion q = (w, v),
/// using the homogeneous form `R(q)x = (w² − vᵀv)x + 2(vᵀx)v + 2w(v×x)`.
fn d_rotate_d_quat(q: &Vector4<f64>, x: &Vector3<f64>) -> Matrix3x4<f64> {
    let w = q[0];
    let v = Vector3::new(q[1], q[2], q[3]);
    let col_w = 2.0 * (w * x + v.cross(x));
    let skew_x = Matrix3::new(0.0, -x.z, x.y, x.z, 0.0, -x.x, -x.y, x.x, 0.0);
    let dv: Matrix3<f64> = 2.0 * (v.dot(x) * Matrix3::identity() + v * x.transpose()
        - x * v.transpose()
        - w * skew_x);
    let mut j = Matrix3x4::zeros();
    j.set_column(0, &col_w);
    for c in 0..3 {
        j.set_column(c + 1, &dv.column(c).into_owned());
    }
    j
}

/// Wasserstein critic objective: `mean(fake) − mean(real) + λ·gp`.
pub fn critic_loss(
    real_scores: &Array1<f64>,
    fake_scores: &Array1<f64>,
    gp: f64,
    gp_lambda: f64,
) -> f64 {
    mean(fake_scores) - mean(real_scores) + gp_lambda * gp
}

/// Generator objective: `−mean(fake)`.
pub fn generator_loss(fake_scores: &Array1<f64>) -> f64 {
    -mean(fake_scores)
}

fn mean(a: &Array1<f64>) -> f64 {
    a.sum() / a.len() as f64
}

/// Batched scalar critic: scores and, on demand, the gradient of each
/// per-sample score with respect to its input.
pub trait BatchScorer {
    fn scores(&mut self, batch: &Array4<f64>) -> Array1<f64>;
    fn scores_and_input_grad(&mut self, batch: &Array4<f64>) -> (Array1<f64>, Array4<f64>);
}

/// Gradient-penalty evaluation at random convex interpolates, retaining
/// everything the training loop needs to push the penalty gradient back
/// into the critic parameters.
#[derive(Debug)]
pub struct GradientPenalty {
    pub penalty: f64,
    pub interpolates: Array4<f64>,
    pub input_grads: Array4<f64>,
    pub grad_norms: Vec<f64>,
}

/// `mean_i (‖∇_x critic(ε·real + (1−ε)·fake)‖₂ − 1)²` with ε uniform per
/// sample.
pub fn gradient_penalty(
    real: &Array4<f64>,
    fake: &Array4<f64>,
    critic: &mut dyn BatchScorer,
    seed: u64,
) -> GradientPenalty {
    assert_eq!(real.shape(), fake.shape(), "batch shapes must match");
    let batch = real.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut interp = fake.clone();
    for i in 0..batch {
        let eps: f64 = rng.gen_range(0.0..1.0);
        let mut slice = interp.index_axis_mut(ndarray::Axis(0), i);
        let r = real.index_axis(ndarray::Axis(0), i);
        slice.zip_mut_with(&r, |f, &rv| *f = eps * rv + (1.0 - eps) * *f);
    }
    let (_, grads) = critic.scores_and_input_grad(&interp);
    let mut grad_norms = Vec::with_capacity(batch);
    let mut penalty = 0.0;
    for i in 0..batch {
        let g = grads.index_axis(ndarray::Axis(0), i);
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        penalty += (n - 1.0) * (n - 1.0);
        grad_norms.push(n);
    }
    GradientPenalty {
        penalty: penalty / batch as f64,
        interpolates: interp,
        input_grads: grads,
        grad_norms,
    }
}
