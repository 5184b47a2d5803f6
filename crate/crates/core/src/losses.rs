//! Training and test-time objectives.
//!
//! * `loss_2d`: confidence-weighted mean squared reprojection error.
//! * `loss_3d`: mean squared distance between `X(pred)` and `X(target)`, where
//!   `X` is forward kinematics, the raw parameter vector, or both.
//! * `loss_train = λ₂·loss_2d + λ₃·loss_3d`.
//! * `loss_test = loss_2d` (no 3D argument at all).
//! * `loss_test_u` is `loss_train` with the auxiliary network's pseudo label in
//!   place of the ground truth.
//!
//! [`SampleObjective`] composes one of these with the regressor so it can be
//! differentiated with respect to the network weights.

use serde::{Deserialize, Serialize};

use crate::body_model::{
    forward_kinematics_backward, forward_kinematics_taped, project, project_backward, BodyError,
    BodyParams, CameraParams, Skeleton,
};
use crate::diffcore::{
    check_finite, DiffError, GradientVector, Objective, ParamVector, Primitive,
};
use crate::geometry::zero3;
use crate::regressor::{forward, RegressorSpec};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum XMode {
    /// Forward-kinematics joint positions.
    #[default]
    Joints3d,
    /// The raw `(θ, β)` vector.
    ParamsIdentity,
    /// Sum of the two.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    pub x_mode: XMode,
    /// Weight 2D terms by detector confidence; when false every joint counts once.
    pub confidence_weighting: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_2d: 1.0,
            lambda_3d: 1.0,
            x_mode: XMode::Joints3d,
            confidence_weighting: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda_2d >= 0.0) || !(self.lambda_3d >= 0.0) {
            return Err("loss weights must be non-negative".into());
        }
        if self.lambda_2d == 0.0 && self.lambda_3d == 0.0 {
            return Err("at least one loss weight must be positive".into());
        }
        Ok(())
    }
}

/// Network estimate: body parameters and camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub body: BodyParams<T>,
    pub camera: CameraParams<T>,
}

/// A 3D supervision target together with its forward-kinematics joints.
#[derive(Debug, Clone, Copy)]
pub struct Target3D<'a, T> {
    pub body: &'a BodyParams<T>,
    pub joints: &'a [[T; 3]],
}

fn body_err(e: BodyError) -> DiffError {
    match e {
        BodyError::Dimension {
            what,
            expected,
            actual,
        } => DiffError::Dimension {
            what,
            expected,
            actual,
        },
        _ => DiffError::NonFinite {
            primitive: Primitive::ForwardKinematics,
            index: 0,
        },
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), DiffError> {
    if expected != actual {
        return Err(DiffError::Dimension {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Reprojection term and, optionally, its gradient on the projected points.
fn reprojection<T: Scalar>(
    projected: &[[T; 2]],
    target: &[[T; 2]],
    weights: Option<&[T]>,
    mut d_projected: Option<&mut Vec<[T; 2]>>,
) -> T {
    let inv_j = T::one() / T::lit(projected.len() as f64);
    let two = T::lit(2.0);
    let mut acc = T::zero();
    for (i, (p, t)) in projected.iter().zip(target).enumerate() {
        let w = weights.map_or(T::one(), |c| c[i]);
        let r = [p[0] - t[0], p[1] - t[1]];
        acc = acc + w * (r[0] * r[0] + r[1] * r[1]);
        if let Some(d) = d_projected.as_deref_mut() {
            let k = two * w * inv_j;
            d[i] = [k * r[0], k * r[1]];
        }
    }
    acc * inv_j
}

fn joint_distance<T: Scalar>(
    pred: &[[T; 3]],
    target: &[[T; 3]],
    mut d_pred: Option<&mut Vec<[T; 3]>>,
    weight: T,
) -> T {
    let inv_j = T::one() / T::lit(pred.len() as f64);
    let two = T::lit(2.0);
    let mut acc = T::zero();
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        let r = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
        acc = acc + r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
        if let Some(d) = d_pred.as_deref_mut() {
            let k = weight * two * inv_j;
            for c in 0..3 {
                d[i][c] = d[i][c] + k * r[c];
            }
        }
    }
    acc * inv_j
}

fn param_distance<T: Scalar>(
    pred: &BodyParams<T>,
    target: &BodyParams<T>,
    grads: Option<(&mut Vec<[T; 3]>, &mut Vec<T>)>,
    weight: T,
) -> T {
    let n = T::lit((pred.theta.len() * 3 + pred.beta.len()) as f64);
    let inv_n = T::one() / n;
    let k = weight * T::lit(2.0) * inv_n;
    let mut acc = T::zero();
    let mut grads = grads;
    for (i, (p, t)) in pred.theta.iter().zip(&target.theta).enumerate() {
        for c in 0..3 {
            let r = p[c] - t[c];
            acc = acc + r * r;
            if let Some((dt, _)) = grads.as_mut() {
                dt[i][c] = dt[i][c] + k * r;
            }
        }
    }
    for (i, (p, t)) in pred.beta.iter().zip(&target.beta).enumerate() {
        let r = *p - *t;
        acc = acc + r * r;
        if let Some((_, db)) = grads.as_mut() {
            db[i] = db[i] + k * r;
        }
    }
    acc * inv_n
}

/// `Σ_j conf_j ‖π(FK(pred))_j − target_j‖² / J`.
pub fn loss_2d<T: Scalar>(
    skeleton: &Skeleton<T>,
    pred: &Prediction<T>,
    target_j2d: &[[T; 2]],
    conf: &[T],
) -> Result<T, DiffError> {
    let j = skeleton.joint_count();
    check_len("target joints", j, target_j2d.len())?;
    check_len("confidences", j, conf.len())?;
    let joints = forward_kinematics_taped(skeleton, &pred.body)
        .map_err(body_err)?
        .positions;
    let projected = project(&joints, &pred.camera);
    Ok(reprojection(&projected, target_j2d, Some(conf), None))
}

/// Mean squared distance between `X(pred)` and `X(gt)` under `config.x_mode`.
pub fn loss_3d<T: Scalar>(
    skeleton: &Skeleton<T>,
    pred: &BodyParams<T>,
    gt: &BodyParams<T>,
    config: &LossConfig,
) -> Result<T, DiffError> {
    let gt_joints = forward_kinematics_taped(skeleton, gt).map_err(body_err)?.positions;
    loss_3d_against(
        skeleton,
        pred,
        Target3D {
            body: gt,
            joints: &gt_joints,
        },
        config,
    )
}

fn loss_3d_against<T: Scalar>(
    skeleton: &Skeleton<T>,
    pred: &BodyParams<T>,
    target: Target3D<'_, T>,
    config: &LossConfig,
) -> Result<T, DiffError> {
    let mut total = T::zero();
    if matches!(config.x_mode, XMode::Joints3d | XMode::Both) {
        let joints = forward_kinematics_taped(skeleton, pred).map_err(body_err)?.positions;
        total = total + joint_distance(&joints, target.joints, None, T::one());
    }
    if matches!(config.x_mode, XMode::ParamsIdentity | XMode::Both) {
        check_len("target theta", pred.theta.len(), target.body.theta.len())?;
        check_len("target beta", pred.beta.len(), target.body.beta.len())?;
        total = total + param_distance(pred, target.body, None, T::one());
    }
    Ok(total)
}

/// `λ₂·loss_2d + λ₃·loss_3d`.
pub fn loss_train<T: Scalar>(
    skeleton: &Skeleton<T>,
    pred: &Prediction<T>,
    gt_body: &BodyParams<T>,
    target_j2d: &[[T; 2]],
    conf: &[T],
    config: &LossConfig,
) -> Result<T, DiffError> {
    let gt_joints = forward_kinematics_taped(skeleton, gt_body)
        .map_err(body_err)?
        .positions;
    let target = Target3D {
        body: gt_body,
        joints: &gt_joints,
    };
    Ok(evaluate_prediction(
        skeleton,
        pred,
        &Supervision::TwoDThreeD(target),
        target_j2d,
        conf,
        config,
        false,
    )?
    .0)
}

/// Test-time objective: the 2D reprojection term only.
pub fn loss_test<T: Scalar>(
    skeleton: &Skeleton<T>,
    pred: &Prediction<T>,
    target_j2d: &[[T; 2]],
    conf: &[T],
) -> Result<T, DiffError> {
    loss_2d(skeleton, pred, target_j2d, conf)
}

/// Test-time objective supervised by a pseudo label; same form as [`loss_train`].
pub fn loss_test_u<T: Scalar>(
    skeleton: &Skeleton<T>,
    pred: &Prediction<T>,
    pseudo_gt: &BodyParams<T>,
    target_j2d: &[[T; 2]],
    conf: &[T],
    config: &LossConfig,
) -> Result<T, DiffError> {
    loss_train(skeleton, pred, pseudo_gt, target_j2d, conf, config)
}

/// Which objective a [`SampleObjective`] evaluates.
#[derive(Debug, Clone, Copy)]
pub enum Supervision<'a, T> {
    /// `loss_test`: 2D reprojection only.
    TwoD,
    /// `loss_train` / `loss_test_u` against the given 3D target.
    TwoDThreeD(Target3D<'a, T>),
}

/// Gradient of an objective with respect to the regressor outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrad<T> {
    pub theta: Vec<[T; 3]>,
    pub beta: Vec<T>,
    /// `(scale, tx, ty)`.
    pub camera: [T; 3],
}

/// Value (and optionally gradient) of an objective on a fixed prediction.
pub fn evaluate_prediction<T: Scalar>(
    skeleton: &Skeleton<T>,
    pred: &Prediction<T>,
    supervision: &Supervision<'_, T>,
    target_j2d: &[[T; 2]],
    conf: &[T],
    config: &LossConfig,
    with_gradient: bool,
) -> Result<(T, Option<PredictionGrad<T>>), DiffError> {
    let j = skeleton.joint_count();
    check_len("target joints", j, target_j2d.len())?;
    check_len("confidences", j, conf.len())?;
    let tape = forward_kinematics_taped(skeleton, &pred.body).map_err(body_err)?;
    check_finite(Primitive::ForwardKinematics, tape.positions.as_flattened())?;
    let projected = project(&tape.positions, &pred.camera);
    check_finite(Primitive::Projection, projected.as_flattened())?;

    let mut d_proj = with_gradient.then(|| vec![[T::zero(); 2]; j]);
    let mut d_pos3 = with_gradient.then(|| vec![zero3(); j]);
    let mut d_theta = vec![zero3(); j];
    let mut d_beta = vec![T::zero(); pred.body.beta.len()];

    let value = match supervision {
        Supervision::TwoD => reprojection(&projected, target_j2d, Some(conf), d_proj.as_mut()),
        Supervision::TwoDThreeD(target) => {
            let (l2, l3) = (T::lit(config.lambda_2d), T::lit(config.lambda_3d));
            let weights = config.confidence_weighting.then_some(conf);
            let v2 = reprojection(&projected, target_j2d, weights, d_proj.as_mut());
            if let Some(d) = d_proj.as_mut() {
                for r in d.iter_mut() {
                    *r = [l2 * r[0], l2 * r[1]];
                }
            }
            let mut v3 = T::zero();
            if matches!(config.x_mode, XMode::Joints3d | XMode::Both) {
                check_len("target joints 3d", j, target.joints.len())?;
                v3 = v3 + joint_distance(&tape.positions, target.joints, d_pos3.as_mut(), l3);
            }
            if matches!(config.x_mode, XMode::ParamsIdentity | XMode::Both) {
                check_len("target theta", j, target.body.theta.len())?;
                check_len("target beta", d_beta.len(), target.body.beta.len())?;
                let grads = with_gradient.then_some((&mut d_theta, &mut d_beta));
                v3 = v3 + param_distance(&pred.body, target.body, grads, l3);
            }
            l2 * v2 + l3 * v3
        }
    };
    check_finite(Primitive::SquaredNorm, &[value])?;
    if !with_gradient {
        return Ok((value, None));
    }

    let d_proj = d_proj.expect("gradient buffers allocated");
    let mut d_pos = d_pos3.expect("gradient buffers allocated");
    let (d_pos2, d_camera) = project_backward(&tape.positions, &pred.camera, &d_proj);
    for (a, b) in d_pos.iter_mut().zip(&d_pos2) {
        *a = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
    }
    let (fk_theta, fk_beta) = forward_kinematics_backward(skeleton, &pred.body, &tape, &d_pos);
    for (a, b) in d_theta.iter_mut().zip(&fk_theta) {
        *a = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
    }
    for (a, b) in d_beta.iter_mut().zip(&fk_beta) {
        *a = *a + *b;
    }
    check_finite(Primitive::Rodrigues, d_theta.as_flattened())?;
    Ok((
        value,
        Some(PredictionGrad {
            theta: d_theta,
            beta: d_beta,
            camera: d_camera,
        }),
    ))
}

/// One sample's objective as a function of the regressor weights.
#[derive(Debug, Clone, Copy)]
pub struct SampleObjective<'a, T> {
    pub spec: &'a RegressorSpec,
    pub skeleton: &'a Skeleton<T>,
    pub observation: &'a [T],
    pub target_j2d: &'a [[T; 2]],
    pub conf: &'a [T],
    pub supervision: Supervision<'a, T>,
    pub config: &'a LossConfig,
}

impl<T: Scalar> SampleObjective<'_, T> {
    pub fn predict(&self, params: &ParamVector<T>) -> Result<Prediction<T>, DiffError> {
        let pass = forward(self.spec, params, self.observation)?;
        Ok(Prediction {
            body: pass.body,
            camera: pass.camera,
        })
    }
}

impl<T: Scalar> Objective<T> for SampleObjective<'_, T> {
    fn value(&self, params: &ParamVector<T>) -> Result<T, DiffError> {
        let pred = self.predict(params)?;
        Ok(evaluate_prediction(
            self.skeleton,
            &pred,
            &self.supervision,
            self.target_j2d,
            self.conf,
            self.config,
            false,
        )?
        .0)
    }

    fn value_and_gradient(
        &self,
        params: &ParamVector<T>,
    ) -> Result<(T, GradientVector<T>), DiffError> {
        let pass = forward(self.spec, params, self.observation)?;
        let pred = Prediction {
            body: pass.body.clone(),
            camera: pass.camera,
        };
        let (value, grad) = evaluate_prediction(
            self.skeleton,
            &pred,
            &self.supervision,
            self.target_j2d,
            self.conf,
            self.config,
            true,
        )?;
        let grad = grad.expect("gradient requested");
        let g = pass.backward(self.spec, params, &grad.theta, &grad.beta, grad.camera)?;
        Ok((value, g))
    }
}
