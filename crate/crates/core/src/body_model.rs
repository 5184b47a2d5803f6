//! Articulated body: a kinematic tree posed by per-joint axis-angle rotations,
//! bone lengths modulated by a low-dimensional shape vector, and a
//! weak-perspective camera.
//!
//! Joint `i` sits at `pos(parent) + G(parent) · (m_i · offset_i)` where `G` is
//! the accumulated global rotation and `m_i = 1 + Σ_s basis[s][i] β_s`. The
//! root is at the origin and its rotation orients the whole body.
//!
//! Every forward map here has a matching `*_backward` that pulls a gradient on
//! its output back to its inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{
    add3, dot3, frob_dot, identity, mat_add_assign, mat_mul, mat_t_vec, mat_vec, norm3, outer,
    scale3, skew, transpose, zero3, Mat3, Vec3,
};
use crate::scalar::Scalar;

pub type Joints3D<T> = Vec<[T; 3]>;
pub type Joints2D<T> = Vec<[T; 2]>;

/// Default number of shape coefficients.
pub const SHAPE_DIM: usize = 4;
/// Seed of the shape basis shipped with [`Skeleton::human16`].
pub const DEFAULT_BASIS_SEED: u64 = 0x5eed_b0d1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BodyError {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("joint {joint} axis-angle norm {norm} exceeds pi")]
    NotCanonical { joint: usize, norm: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("camera scale must be positive, got {0}")]
    InvalidCamera(f64),
    #[error("skeleton file: {0}")]
    Format(String),
}

/// Pose (per-joint axis-angle, radians) and shape (bone-length coefficients).
#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams<T> {
    pub theta: Vec<[T; 3]>,
    pub beta: Vec<T>,
}

impl<T: Scalar> BodyParams<T> {
    /// Canonical construction: every axis-angle norm must be at most π.
    pub fn new(theta: Vec<[T; 3]>, beta: Vec<T>) -> Result<Self, BodyError> {
        for (joint, aa) in theta.iter().enumerate() {
            if aa.iter().any(|v| !v.is_finite()) {
                return Err(BodyError::NonFinite("theta"));
            }
            let n = norm3(*aa);
            if n > T::lit(std::f64::consts::PI) {
                return Err(BodyError::NotCanonical {
                    joint,
                    norm: n.as_f64(),
                });
            }
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(BodyError::NonFinite("beta"));
        }
        Ok(Self { theta, beta })
    }

    /// Unconstrained construction used for network estimates.
    pub fn estimate(theta: Vec<[T; 3]>, beta: Vec<T>) -> Self {
        Self { theta, beta }
    }

    pub fn zeros(joints: usize, shape_dim: usize) -> Self {
        Self {
            theta: vec![zero3(); joints],
            beta: vec![T::zero(); shape_dim],
        }
    }

    /// `(θ flattened, β)` as one vector of length `3J + S`.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.theta.len() * 3 + self.beta.len());
        for aa in &self.theta {
            out.extend_from_slice(aa);
        }
        out.extend_from_slice(&self.beta);
        out
    }

    pub fn cast<U: Scalar>(&self) -> BodyParams<U> {
        BodyParams {
            theta: self
                .theta
                .iter()
                .map(|a| [U::lit(a[0].as_f64()), U::lit(a[1].as_f64()), U::lit(a[2].as_f64())])
                .collect(),
            beta: self.beta.iter().map(|b| U::lit(b.as_f64())).collect(),
        }
    }
}

/// Weak-perspective camera: `p = scale · (x, y) + trans`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams<T> {
    pub scale: T,
    pub trans: [T; 2],
}

impl<T: Scalar> CameraParams<T> {
    pub fn new(scale: T, trans: [T; 2]) -> Result<Self, BodyError> {
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(BodyError::InvalidCamera(scale.as_f64()));
        }
        if !trans[0].is_finite() || !trans[1].is_finite() {
            return Err(BodyError::NonFinite("camera translation"));
        }
        Ok(Self { scale, trans })
    }

    pub fn identity() -> Self {
        Self {
            scale: T::one(),
            trans: [T::zero(); 2],
        }
    }

    pub fn cast<U: Scalar>(&self) -> CameraParams<U> {
        CameraParams {
            scale: U::lit(self.scale.as_f64()),
            trans: [U::lit(self.trans[0].as_f64()), U::lit(self.trans[1].as_f64())],
        }
    }
}

/// Kinematic tree with rest offsets and a linear bone-length shape basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton<T> {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    rest_offsets: Vec<[T; 3]>,
    /// `S` rows of `J` entries.
    shape_basis: Vec<Vec<T>>,
    /// Topological order starting at the root.
    order: Vec<usize>,
    children: Vec<Vec<usize>>,
}

/// Names, parents and rest offsets of the shipped 16-joint human-like tree.
///
/// ```text
///            3 head
///            |
///  6-5-4 --- 2 neck --- 7-8-9      arms: shoulder, elbow, wrist
///            |
///            1 spine
///            |
///            0 pelvis
///           / \
///         10   13                  legs: hip, knee, ankle
///         11   14
///         12   15
/// ```
pub const HUMAN16: [(&str, Option<usize>, [f64; 3]); 16] = [
    ("pelvis", None, [0.0, 0.0, 0.0]),
    ("spine", Some(0), [0.0, 0.25, 0.0]),
    ("neck", Some(1), [0.0, 0.25, 0.0]),
    ("head", Some(2), [0.0, 0.15, 0.0]),
    ("left_shoulder", Some(2), [0.18, 0.0, 0.0]),
    ("left_elbow", Some(4), [0.28, 0.0, 0.0]),
    ("left_wrist", Some(5), [0.25, 0.0, 0.0]),
    ("right_shoulder", Some(2), [-0.18, 0.0, 0.0]),
    ("right_elbow", Some(7), [-0.28, 0.0, 0.0]),
    ("right_wrist", Some(8), [-0.25, 0.0, 0.0]),
    ("left_hip", Some(0), [0.1, -0.05, 0.0]),
    ("left_knee", Some(10), [0.0, -0.42, 0.0]),
    ("left_ankle", Some(11), [0.0, -0.4, 0.0]),
    ("right_hip", Some(0), [-0.1, -0.05, 0.0]),
    ("right_knee", Some(13), [0.0, -0.42, 0.0]),
    ("right_ankle", Some(14), [0.0, -0.4, 0.0]),
];

impl<T: Scalar> Skeleton<T> {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<[T; 3]>,
        shape_basis: Vec<Vec<T>>,
    ) -> Result<Self, BodyError> {
        let j = parents.len();
        if j == 0 {
            return Err(BodyError::InvalidSkeleton("no joints".into()));
        }
        if names.len() != j || rest_offsets.len() != j {
            return Err(BodyError::InvalidSkeleton(
                "names, parents and offsets differ in length".into(),
            ));
        }
        if parents[0].is_some() {
            return Err(BodyError::InvalidSkeleton("joint 0 must be the root".into()));
        }
        let mut children = vec![Vec::new(); j];
        for (i, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j && *p != i => children[*p].push(i),
                Some(p) => {
                    return Err(BodyError::InvalidSkeleton(format!(
                        "joint {i} has invalid parent {p}"
                    )))
                }
                None => {
                    return Err(BodyError::InvalidSkeleton(format!(
                        "joint {i} has no parent; only joint 0 may be a root"
                    )))
                }
            }
        }
        let mut order = Vec::with_capacity(j);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            order.push(n);
            for &c in children[n].iter().rev() {
                stack.push(c);
            }
        }
        if order.len() != j {
            return Err(BodyError::InvalidSkeleton(
                "parent links contain a cycle or unreachable joint".into(),
            ));
        }
        for (i, off) in rest_offsets.iter().enumerate().skip(1) {
            if !(norm3(*off) > T::zero()) {
                return Err(BodyError::InvalidSkeleton(format!(
                    "joint {i} has a zero-length rest offset"
                )));
            }
        }
        for row in &shape_basis {
            if row.len() != j {
                return Err(BodyError::InvalidSkeleton(format!(
                    "shape basis row has {} entries, expected {j}",
                    row.len()
                )));
            }
        }
        Ok(Self {
            names,
            parents,
            rest_offsets,
            shape_basis,
            order,
            children,
        })
    }

    /// The shipped 16-joint tree with a seeded shape basis in `[-0.1, 0.1]`.
    pub fn human16() -> Self {
        Self::human16_with_basis_seed(DEFAULT_BASIS_SEED)
    }

    pub fn human16_with_basis_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = HUMAN16.len();
        let basis = (0..SHAPE_DIM)
            .map(|_| {
                (0..j)
                    .map(|i| {
                        let v: f64 = rng.random_range(-0.1..=0.1);
                        // the root has no bone
                        T::lit(if i == 0 { 0.0 } else { v })
                    })
                    .collect()
            })
            .collect();
        Self::new(
            HUMAN16.iter().map(|(n, _, _)| n.to_string()).collect(),
            HUMAN16.iter().map(|(_, p, _)| *p).collect(),
            HUMAN16
                .iter()
                .map(|(_, _, o)| [T::lit(o[0]), T::lit(o[1]), T::lit(o[2])])
                .collect(),
            basis,
        )
        .expect("built-in skeleton is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn rest_offsets(&self) -> &[[T; 3]] {
        &self.rest_offsets
    }

    pub fn shape_basis(&self) -> &[Vec<T>] {
        &self.shape_basis
    }

    pub fn children(&self, joint: usize) -> &[usize] {
        &self.children[joint]
    }

    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Joints without children (head, wrists, ankles for `human16`).
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.joint_count())
            .filter(|&i| self.children[i].is_empty())
            .collect()
    }

    /// Number of bones between `joint` and the root.
    pub fn depth(&self, joint: usize) -> usize {
        let mut d = 0;
        let mut cur = joint;
        while let Some(p) = self.parents[cur] {
            d += 1;
            cur = p;
        }
        d
    }

    /// True when `joint` lies strictly below `ancestor` in the tree.
    pub fn is_descendant(&self, joint: usize, ancestor: usize) -> bool {
        let mut cur = joint;
        while let Some(p) = self.parents[cur] {
            if p == ancestor {
                return true;
            }
            cur = p;
        }
        false
    }

    /// Copy with every rest offset multiplied by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        let mut out = self.clone();
        for off in &mut out.rest_offsets {
            *off = scale3(*off, factor);
        }
        out
    }

    /// Per-joint bone-length multipliers `1 + Σ_s basis[s][i] β_s`.
    pub fn length_multipliers(&self, beta: &[T]) -> Vec<T> {
        let mut m = vec![T::one(); self.joint_count()];
        for (row, b) in self.shape_basis.iter().zip(beta) {
            for (mi, bi) in m.iter_mut().zip(row) {
                *mi = *mi + *bi * *b;
            }
        }
        m
    }

    fn check_body(&self, body: &BodyParams<T>) -> Result<(), BodyError> {
        if body.theta.len() != self.joint_count() {
            return Err(BodyError::Dimension {
                what: "theta",
                expected: self.joint_count(),
                actual: body.theta.len(),
            });
        }
        if body.beta.len() != self.shape_dim() {
            return Err(BodyError::Dimension {
                what: "beta",
                expected: self.shape_dim(),
                actual: body.beta.len(),
            });
        }
        Ok(())
    }

    pub fn to_file(&self) -> SkeletonFile {
        SkeletonFile {
            format: SKELETON_FORMAT.into(),
            version: SKELETON_VERSION,
            joints: (0..self.joint_count())
                .map(|i| SkeletonJoint {
                    name: self.names[i].clone(),
                    parent: self.parents[i],
                    offset: self.rest_offsets[i].map(Scalar::as_f64),
                })
                .collect(),
            shape_basis: self
                .shape_basis
                .iter()
                .map(|r| r.iter().map(|v| v.as_f64()).collect())
                .collect(),
        }
    }

    pub fn from_file(file: &SkeletonFile) -> Result<Self, BodyError> {
        if file.format != SKELETON_FORMAT || file.version != SKELETON_VERSION {
            return Err(BodyError::Format(format!(
                "unsupported skeleton format {:?} version {}",
                file.format, file.version
            )));
        }
        Self::new(
            file.joints.iter().map(|j| j.name.clone()).collect(),
            file.joints.iter().map(|j| j.parent).collect(),
            file.joints.iter().map(|j| j.offset.map(T::lit)).collect(),
            file.shape_basis
                .iter()
                .map(|r| r.iter().map(|v| T::lit(*v)).collect())
                .collect(),
        )
    }

    /// Pretty JSON text of [`SkeletonFile`]; byte-stable for a given skeleton.
    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_file()).expect("skeleton serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, BodyError> {
        let file: SkeletonFile =
            serde_json::from_str(text).map_err(|e| BodyError::Format(e.to_string()))?;
        Self::from_file(&file)
    }

    /// SHA-256 of [`Skeleton::to_text`], hex encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub const SKELETON_FORMAT: &str = "madapt-skeleton";
pub const SKELETON_VERSION: u32 = 1;

/// On-disk skeleton description.
///
/// ```json
/// { "format": "madapt-skeleton", "version": 1,
///   "joints": [ { "name": "pelvis", "parent": null, "offset": [0, 0, 0] }, ... ],
///   "shape_basis": [ [J entries], ... S rows ] }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonFile {
    pub format: String,
    pub version: u32,
    pub joints: Vec<SkeletonJoint>,
    pub shape_basis: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonJoint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: [f64; 3],
}

/// Coefficients of `R = I + a·K + b·K²` (with `K = [v]×`) and of their
/// derivatives divided by `t = |v|`.
struct RodriguesCoeffs<T> {
    a: T,
    b: T,
    da_over_t: T,
    db_over_t: T,
}

fn rodrigues_coeffs<T: Scalar>(v: Vec3<T>) -> RodriguesCoeffs<T> {
    let t2 = dot3(v, v);
    let t = t2.sqrt();
    if t < T::series_threshold() {
        let t4 = t2 * t2;
        let l = T::lit;
        RodriguesCoeffs {
            a: T::one() - t2 / l(6.0) + t4 / l(120.0),
            b: l(0.5) - t2 / l(24.0) + t4 / l(720.0),
            da_over_t: l(-1.0 / 3.0) + t2 / l(30.0) - t4 / l(840.0),
            db_over_t: l(-1.0 / 12.0) + t2 / l(180.0) - t4 / l(6720.0),
        }
    } else {
        let (s, c) = t.sin_cos();
        let half = (t * T::lit(0.5)).sin();
        let one_minus_cos = T::lit(2.0) * half * half;
        RodriguesCoeffs {
            a: s / t,
            b: one_minus_cos / t2,
            da_over_t: (t * c - s) / (t2 * t),
            db_over_t: (t * s - T::lit(2.0) * one_minus_cos) / (t2 * t2),
        }
    }
}

/// Axis-angle exponential map. The zero vector maps to the identity.
pub fn rodrigues<T: Scalar>(axis_angle: Vec3<T>) -> Mat3<T> {
    let c = rodrigues_coeffs(axis_angle);
    let k = skew(axis_angle);
    let k2 = mat_mul(&k, &k);
    let mut r = identity();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = r[i][j] + c.a * k[i][j] + c.b * k2[i][j];
        }
    }
    r
}

/// `[M₂₁ − M₁₂, M₀₂ − M₂₀, M₁₀ − M₀₁]`, so that `⟨M, [e]×⟩ = e · skew_dual(M)`.
fn skew_dual<T: Scalar>(m: &Mat3<T>) -> Vec3<T> {
    [m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]]
}

/// Pulls `∂L/∂R` back to `∂L/∂v` for `R = rodrigues(v)`.
pub fn rodrigues_backward<T: Scalar>(axis_angle: Vec3<T>, d_rot: &Mat3<T>) -> Vec3<T> {
    let c = rodrigues_coeffs(axis_angle);
    let k = skew(axis_angle);
    let kt = transpose(&k);
    let k2 = mat_mul(&k, &k);
    let mut sym = mat_mul(d_rot, &kt);
    mat_add_assign(&mut sym, &mat_mul(&kt, d_rot));
    let d1 = skew_dual(d_rot);
    let d2 = skew_dual(&sym);
    let radial = c.da_over_t * frob_dot(d_rot, &k) + c.db_over_t * frob_dot(d_rot, &k2);
    [
        c.a * d1[0] + c.b * d2[0] + radial * axis_angle[0],
        c.a * d1[1] + c.b * d2[1] + radial * axis_angle[1],
        c.a * d1[2] + c.b * d2[2] + radial * axis_angle[2],
    ]
}

/// Intermediate values of one forward-kinematics pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FkTape<T> {
    pub positions: Joints3D<T>,
    local: Vec<Mat3<T>>,
    global: Vec<Mat3<T>>,
    multipliers: Vec<T>,
}

pub fn forward_kinematics<T: Scalar>(
    skeleton: &Skeleton<T>,
    body: &BodyParams<T>,
) -> Result<Joints3D<T>, BodyError> {
    Ok(forward_kinematics_taped(skeleton, body)?.positions)
}

pub fn forward_kinematics_taped<T: Scalar>(
    skeleton: &Skeleton<T>,
    body: &BodyParams<T>,
) -> Result<FkTape<T>, BodyError> {
    skeleton.check_body(body)?;
    let j = skeleton.joint_count();
    let local: Vec<Mat3<T>> = body.theta.iter().map(|aa| rodrigues(*aa)).collect();
    let multipliers = skeleton.length_multipliers(&body.beta);
    let mut global = vec![identity(); j];
    let mut positions = vec![zero3(); j];
    for &i in &skeleton.order {
        match skeleton.parents[i] {
            None => global[i] = local[i],
            Some(p) => {
                let bone = scale3(skeleton.rest_offsets[i], multipliers[i]);
                positions[i] = add3(positions[p], mat_vec(&global[p], bone));
                global[i] = mat_mul(&global[p], &local[i]);
            }
        }
    }
    Ok(FkTape {
        positions,
        local,
        global,
        multipliers,
    })
}

/// Gradients `(∂L/∂θ, ∂L/∂β)` from `∂L/∂positions`.
pub fn forward_kinematics_backward<T: Scalar>(
    skeleton: &Skeleton<T>,
    body: &BodyParams<T>,
    tape: &FkTape<T>,
    d_positions: &[[T; 3]],
) -> (Vec<[T; 3]>, Vec<T>) {
    let j = skeleton.joint_count();
    let mut d_pos: Vec<Vec3<T>> = d_positions.to_vec();
    let mut d_global = vec![[[T::zero(); 3]; 3]; j];
    let mut d_mult = vec![T::zero(); j];
    let mut d_theta = vec![zero3(); j];
    for &i in skeleton.order.iter().rev() {
        match skeleton.parents[i] {
            None => {
                d_theta[i] = rodrigues_backward(body.theta[i], &d_global[i]);
            }
            Some(p) => {
                let off = skeleton.rest_offsets[i];
                let bone = scale3(off, tape.multipliers[i]);
                let dp = d_pos[i];
                d_pos[p] = add3(d_pos[p], dp);
                let mut dg_p = outer(dp, bone);
                d_mult[i] = dot3(mat_t_vec(&tape.global[p], dp), off);
                // G_i = G_p R_i
                mat_add_assign(&mut dg_p, &mat_mul(&d_global[i], &transpose(&tape.local[i])));
                let d_local = mat_mul(&transpose(&tape.global[p]), &d_global[i]);
                d_theta[i] = rodrigues_backward(body.theta[i], &d_local);
                mat_add_assign(&mut d_global[p], &dg_p);
            }
        }
    }
    let d_beta = skeleton
        .shape_basis
        .iter()
        .map(|row| row.iter().zip(&d_mult).map(|(b, d)| *b * *d).sum())
        .collect();
    (d_theta, d_beta)
}

pub fn project<T: Scalar>(joints: &[[T; 3]], cam: &CameraParams<T>) -> Joints2D<T> {
    joints
        .iter()
        .map(|p| {
            [
                cam.scale * p[0] + cam.trans[0],
                cam.scale * p[1] + cam.trans[1],
            ]
        })
        .collect()
}

/// Gradients `(∂L/∂joints, [∂L/∂scale, ∂L/∂tx, ∂L/∂ty])` from `∂L/∂projected`.
pub fn project_backward<T: Scalar>(
    joints: &[[T; 3]],
    cam: &CameraParams<T>,
    d_projected: &[[T; 2]],
) -> (Joints3D<T>, [T; 3]) {
    let mut d_cam = [T::zero(); 3];
    let d_joints = joints
        .iter()
        .zip(d_projected)
        .map(|(p, d)| {
            d_cam[0] = d_cam[0] + d[0] * p[0] + d[1] * p[1];
            d_cam[1] = d_cam[1] + d[0];
            d_cam[2] = d_cam[2] + d[1];
            [cam.scale * d[0], cam.scale * d[1], T::zero()]
        })
        .collect();
    (d_joints, d_cam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{det3, sub3};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn chain(multiplier_basis: f64) -> Skeleton<f64> {
        Skeleton::new(
            vec!["root".into(), "elbow".into(), "tip".into()],
            vec![None, Some(0), Some(1)],
            vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            vec![vec![0.0, multiplier_basis, 0.0]],
        )
        .unwrap()
    }

    #[test]
    fn rodrigues_zero_is_identity() {
        assert_eq!(rodrigues([0.0f64; 3]), identity::<f64>());
    }

    #[test]
    fn rodrigues_quarter_turn_about_z() {
        let r = rodrigues([0.0, 0.0, FRAC_PI_2]);
        let y = mat_vec(&r, [1.0, 0.0, 0.0]);
        assert!((y[0]).abs() < 1e-12 && (y[1] - 1.0).abs() < 1e-12 && y[2].abs() < 1e-12);
    }

    #[test]
    fn rodrigues_orthonormal_near_and_far_from_zero() {
        for v in [[1e-9, -2e-9, 3e-9], [1e-3, 2e-4, -5e-4], [0.3, -1.2, 2.0], [0.0, PI, 0.0]] {
            let r = rodrigues(v);
            let rtr = mat_mul(&transpose(&r), &r);
            let id = identity::<f64>();
            for i in 0..3 {
                for j in 0..3 {
                    assert!((rtr[i][j] - id[i][j]).abs() < 1e-12);
                }
            }
            assert!((det3(&r) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rest_pose_is_cumulative_offsets() {
        let sk = Skeleton::<f64>::human16();
        let body = BodyParams::zeros(16, SHAPE_DIM);
        let pos = forward_kinematics(&sk, &body).unwrap();
        for i in 1..16 {
            let p = sk.parents()[i].unwrap();
            let d = sub3(pos[i], pos[p]);
            for k in 0..3 {
                assert!((d[k] - sk.rest_offsets()[i][k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_bone_chain_elbow_quarter_turn() {
        let sk = chain(0.0);
        let body = BodyParams::new(vec![[0.0; 3], [0.0, 0.0, FRAC_PI_2], [0.0; 3]], vec![0.0]).unwrap();
        let pos = forward_kinematics(&sk, &body).unwrap();
        assert!((pos[1][0] - 1.0).abs() < 1e-12 && pos[1][1].abs() < 1e-12);
        assert!((pos[2][0] - 1.0).abs() < 1e-12 && (pos[2][1] - 1.0).abs() < 1e-12);
        // brute force: compose the matrices by hand
        let r1 = rodrigues([0.0, 0.0, FRAC_PI_2]);
        let tip = add3([1.0, 0.0, 0.0], mat_vec(&r1, [1.0, 0.0, 0.0]));
        for k in 0..3 {
            assert!((tip[k] - pos[2][k]).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_scales_bone_and_translates_descendants() {
        // unit basis on bone 1: beta = 0.5 gives multiplier 1.5
        let sk = chain(1.0);
        let rest = forward_kinematics(&sk, &BodyParams::zeros(3, 1)).unwrap();
        let body = BodyParams::new(vec![[0.0; 3]; 3], vec![0.5]).unwrap();
        let pos = forward_kinematics(&sk, &body).unwrap();
        assert!((pos[1][0] - 1.5).abs() < 1e-15);
        let shift = sub3(pos[2], rest[2]);
        assert!((shift[0] - 0.5).abs() < 1e-15 && shift[1] == 0.0 && shift[2] == 0.0);
    }

    #[test]
    fn body_params_reject_non_canonical() {
        let err = BodyParams::new(vec![[0.0, 0.0, 3.2]], vec![]).unwrap_err();
        assert!(matches!(err, BodyError::NotCanonical { joint: 0, .. }));
        assert!(BodyParams::new(vec![[0.0, 0.0, f64::NAN]], vec![]).is_err());
    }

    #[test]
    fn fk_dimension_mismatch() {
        let sk = Skeleton::<f64>::human16();
        let body = BodyParams::zeros(15, SHAPE_DIM);
        assert!(matches!(
            forward_kinematics(&sk, &body),
            Err(BodyError::Dimension { what: "theta", .. })
        ));
    }

    #[test]
    fn skeleton_validation() {
        let off = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(Skeleton::<f64>::new(names.clone(), vec![None, Some(1)], off.clone(), vec![]).is_err());
        assert!(Skeleton::<f64>::new(names.clone(), vec![None, None], off.clone(), vec![]).is_err());
        assert!(
            Skeleton::<f64>::new(names.clone(), vec![None, Some(0)], vec![[0.0; 3]; 2], vec![])
                .is_err()
        );
        let cyc = Skeleton::<f64>::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![None, Some(2), Some(1)],
            vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            vec![],
        );
        assert!(cyc.is_err());
    }

    #[test]
    fn projection_examples() {
        let j = vec![[0.5f64, 0.5, 7.3]];
        let p = project(&j, &CameraParams::new(2.0, [0.1, -0.1]).unwrap());
        assert!((p[0][0] - 1.1).abs() < 1e-15 && (p[0][1] - 0.9).abs() < 1e-15);
        let p = project(&j, &CameraParams::identity());
        assert_eq!(p[0], [0.5, 0.5]);
        assert!(CameraParams::new(0.0, [0.0, 0.0]).is_err());
    }

    #[test]
    fn skeleton_text_round_trip() {
        let sk = Skeleton::<f64>::human16();
        let text = sk.to_text();
        let back = Skeleton::<f64>::from_text(&text).unwrap();
        assert_eq!(back, sk);
        assert_eq!(back.to_text(), text);
        assert_eq!(sk.content_hash().len(), 64);
    }

    #[test]
    fn human16_structure() {
        let sk = Skeleton::<f64>::human16();
        assert_eq!(sk.joint_count(), 16);
        assert_eq!(sk.leaves(), vec![3, 6, 9, 12, 15]);
        assert!(sk.is_descendant(6, 4));
        assert!(!sk.is_descendant(4, 6));
        assert!(sk.shape_basis().iter().flatten().all(|v| v.abs() <= 0.1));
    }
}
