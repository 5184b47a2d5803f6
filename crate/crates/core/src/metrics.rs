//! Pose metrics: root-centered MPJPE, similarity Procrustes alignment,
//! PA-MPJPE and per-joint errors, plus CSV emitters for aggregated results.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{add3, mat_vec, norm3, scale3, sub3, Mat3, Vec3};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("joint count mismatch: prediction has {pred}, ground truth has {gt}")]
    Dimension { pred: usize, gt: usize },
    #[error("Procrustes alignment needs at least 3 joints, got {0}")]
    TooFewJoints(usize),
    #[error("degenerate point set: centered prediction has rank {rank} (need 2 or 3)")]
    Degenerate { rank: usize },
}

fn check<T>(pred: &[[T; 3]], gt: &[[T; 3]]) -> Result<(), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Dimension {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

fn mean<T: Scalar>(v: &[T]) -> T {
    if v.is_empty() {
        return T::zero();
    }
    v.iter().copied().sum::<T>() / T::lit(v.len() as f64)
}

/// Root-relative per-joint distances (joint 0 is the root).
fn centered_errors<T: Scalar>(pred: &[[T; 3]], gt: &[[T; 3]]) -> Vec<T> {
    if pred.is_empty() {
        return Vec::new();
    }
    let (rp, rg) = (pred[0], gt[0]);
    pred.iter()
        .zip(gt)
        .map(|(p, g)| norm3(sub3(sub3(*p, rp), sub3(*g, rg))))
        .collect()
}

pub fn mpjpe<T: Scalar>(pred: &[[T; 3]], gt: &[[T; 3]]) -> Result<T, MetricError> {
    check(pred, gt)?;
    Ok(mean(&centered_errors(pred, gt)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform<T> {
    pub rotation: Mat3<T>,
    pub scale: T,
    pub translation: Vec3<T>,
}

impl<T: Scalar> SimilarityTransform<T> {
    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        add3(scale3(mat_vec(&self.rotation, p), self.scale), self.translation)
    }

    pub fn apply_all(&self, points: &[[T; 3]]) -> Vec<[T; 3]> {
        points.iter().map(|p| self.apply(*p)).collect()
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matrix whose columns are the eigenvectors.
pub fn symmetric_eigen<T: Scalar, const N: usize>(mut a: [[T; N]; N]) -> ([T; N], [[T; N]; N]) {
    let mut v = [[T::zero(); N]; N];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = T::one();
    }
    for _sweep in 0..64 {
        let mut off = T::zero();
        let mut diag = T::zero();
        for i in 0..N {
            diag = diag + a[i][i] * a[i][i];
            for j in (i + 1)..N {
                off = off + a[i][j] * a[i][j];
            }
        }
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for p in 0..N {
            for q in (p + 1)..N {
                if a[p][q] == T::zero() {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (T::lit(2.0) * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..N {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..N {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut values = [T::zero(); N];
    for (i, val) in values.iter_mut().enumerate() {
        *val = a[i][i];
    }
    (values, v)
}

fn centroid<T: Scalar>(points: &[[T; 3]]) -> Vec3<T> {
    let n = T::lit(points.len() as f64);
    let s = points.iter().fold([T::zero(); 3], |acc, p| add3(acc, *p));
    scale3(s, T::one() / n)
}

fn quaternion_to_matrix<T: Scalar>(q: [T; 4]) -> Mat3<T> {
    let [w, x, y, z] = q;
    let two = T::lit(2.0);
    [
        [w * w + x * x - y * y - z * z, two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), w * w - x * x + y * y - z * z, two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), w * w - x * x - y * y + z * z],
    ]
}

/// Similarity transform minimizing `Σ‖s·R·predⱼ + t − gtⱼ‖²`.
///
/// The rotation is the unit quaternion maximizing `Σ gⱼ·(R pⱼ)` over centered
/// points (the top eigenvector of Horn's 4×4 matrix), which is always a proper
/// rotation; the scale is then `λ_max / Σ‖pⱼ‖²`.
pub fn procrustes_align<T: Scalar>(
    pred: &[[T; 3]],
    gt: &[[T; 3]],
) -> Result<SimilarityTransform<T>, MetricError> {
    check(pred, gt)?;
    if pred.len() < 3 {
        return Err(MetricError::TooFewJoints(pred.len()));
    }
    let (mp, mg) = (centroid(pred), centroid(gt));
    let mut s = [[T::zero(); 3]; 3];
    let mut cov = [[T::zero(); 3]; 3];
    let mut norm_p = T::zero();
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = (sub3(*p, mp), sub3(*g, mg));
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] = s[i][j] + a[i] * b[j];
                cov[i][j] = cov[i][j] + a[i] * a[j];
            }
        }
        norm_p = norm_p + a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
    }
    let (spread, _) = symmetric_eigen(cov);
    let largest = spread.iter().copied().fold(T::zero(), T::max);
    let rank = spread
        .iter()
        .filter(|v| **v > largest * T::lit(1e-12) && **v > T::min_positive_value())
        .count();
    if rank < 2 {
        return Err(MetricError::Degenerate { rank });
    }

    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let n = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let (values, vectors) = symmetric_eigen(n);
    let mut best = 0;
    for i in 1..4 {
        if values[i] > values[best] {
            best = i;
        }
    }
    let mut q = [vectors[0][best], vectors[1][best], vectors[2][best], vectors[3][best]];
    let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    q.iter_mut().for_each(|c| *c = *c / qn);
    let rotation = quaternion_to_matrix(q);

    let mut fit = T::zero();
    for (p, g) in pred.iter().zip(gt) {
        let rp = mat_vec(&rotation, sub3(*p, mp));
        let b = sub3(*g, mg);
        fit = fit + rp[0] * b[0] + rp[1] * b[1] + rp[2] * b[2];
    }
    let scale = fit / norm_p;
    if !(scale > T::zero()) {
        return Err(MetricError::Degenerate { rank });
    }
    let translation = sub3(mg, scale3(mat_vec(&rotation, mp), scale));
    Ok(SimilarityTransform {
        rotation,
        scale,
        translation,
    })
}

fn aligned_errors<T: Scalar>(pred: &[[T; 3]], gt: &[[T; 3]]) -> Result<Vec<T>, MetricError> {
    let tf = procrustes_align(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| norm3(sub3(tf.apply(*p), *g)))
        .collect())
}

pub fn pa_mpjpe<T: Scalar>(pred: &[[T; 3]], gt: &[[T; 3]]) -> Result<T, MetricError> {
    Ok(mean(&aligned_errors(pred, gt)?))
}

/// Joint-wise distances, root-centered or after Procrustes alignment.
pub fn per_joint_error<T: Scalar>(
    pred: &[[T; 3]],
    gt: &[[T; 3]],
    aligned: bool,
) -> Result<Vec<T>, MetricError> {
    check(pred, gt)?;
    if aligned {
        aligned_errors(pred, gt)
    } else {
        Ok(centered_errors(pred, gt))
    }
}

/// One aggregated result line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub method: String,
    pub domain: String,
    pub seed: u64,
    pub mpjpe_mean: f64,
    pub pa_mpjpe_mean: f64,
    pub n_samples: usize,
}

pub const RESULTS_CSV_HEADER: &str = "experiment,method,domain,seed,mpjpe_mean,pa_mpjpe_mean,n_samples";

pub fn results_to_csv(rows: &[ResultRow]) -> String {
    let mut out = format!("{RESULTS_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.9e},{:.9e},{}",
            r.experiment, r.method, r.domain, r.seed, r.mpjpe_mean, r.pa_mpjpe_mean, r.n_samples
        );
    }
    out
}

/// Per-joint mean errors for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerJointRow {
    pub method: String,
    pub joint: String,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
}

pub fn per_joint_to_csv(rows: &[PerJointRow]) -> String {
    let mut out = String::from("method,joint,mpjpe,pa_mpjpe\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.9e},{:.9e}", r.method, r.joint, r.mpjpe, r.pa_mpjpe);
    }
    out
}
