//! Synthetic pose-lifting task: samples bodies and cameras, renders clean 2D
//! joints, corrupts them with a simulated keypoint detector, and packs the
//! result into reproducible datasets.
//!
//! A [`Sample`] exposes its fields through three views so that callers only
//! see what they are entitled to: [`TestInput`] (what a deployed model gets),
//! [`GroundTruth`] (3D supervision, training and metrics only) and the clean
//! 2D joints (diagnostics only).

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body_model::{
    forward_kinematics, project, BodyError, BodyParams, CameraParams, Joints2D, Joints3D, Skeleton,
};
use crate::regressor::{ByteCursor, CheckpointError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("invalid dataset shape: {0}")]
    InvalidShape(String),
    #[error("body model: {0}")]
    Body(#[from] BodyError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("corrupt dataset at byte {position}: {reason}")]
    Corrupt { position: usize, reason: String },
    #[error("unknown domain preset {0:?}")]
    UnknownPreset(String),
}

impl From<CheckpointError> for SynthError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Corrupt { position, reason } => SynthError::Corrupt { position, reason },
            other => SynthError::Corrupt {
                position: 0,
                reason: other.to_string(),
            },
        }
    }
}

/// Sampling distribution of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub name: String,
    /// Std-dev of the half-normal per-joint rotation magnitude (radians).
    pub pose_scale: f64,
    pub beta_range: [f64; 2],
    pub camera_scale_range: [f64; 2],
    pub camera_trans_range: [f64; 2],
    /// Std-dev of Gaussian keypoint noise in normalized image units.
    pub detector_noise_sigma: f64,
    /// Probability that a joint is reported with confidence 0.
    pub occlusion_prob: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            name: "train".into(),
            pose_scale: 0.4,
            beta_range: [-2.0, 2.0],
            camera_scale_range: [0.8, 1.2],
            camera_trans_range: [-0.2, 0.2],
            detector_noise_sigma: 0.02,
            occlusion_prob: 0.05,
        }
    }
}

/// Detector-noise levels standing in for a weaker and a stronger keypoint detector.
pub const SIGMA_OPENPOSE_LIKE: f64 = 0.02;
pub const SIGMA_RSN_LIKE: f64 = 0.01;

impl DomainConfig {
    /// Named presets: `train`, `indoor-like` (narrow poses), `in-the-wild-like` (wide poses).
    pub fn preset(name: &str) -> Result<Self, SynthError> {
        let base = Self::default();
        match name {
            "train" => Ok(base),
            "indoor-like" => Ok(Self {
                name: name.into(),
                pose_scale: 0.3,
                ..base
            }),
            "in-the-wild-like" => Ok(Self {
                name: name.into(),
                pose_scale: 0.6,
                ..base
            }),
            other => Err(SynthError::UnknownPreset(other.into())),
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["train", "indoor-like", "in-the-wild-like"]
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.detector_noise_sigma = sigma;
        self
    }

    pub fn with_occlusion(mut self, prob: f64) -> Self {
        self.occlusion_prob = prob;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let range_ok = |r: &[f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        let fail = |m: &str| Err(SynthError::InvalidDomain(format!("{}: {m}", self.name)));
        if !(self.pose_scale >= 0.0) || !self.pose_scale.is_finite() {
            return fail("pose_scale must be a finite non-negative number");
        }
        if !range_ok(&self.beta_range)
            || !range_ok(&self.camera_scale_range)
            || !range_ok(&self.camera_trans_range)
        {
            return fail("ranges must be finite and ordered");
        }
        if !(self.camera_scale_range[0] > 0.0) {
            return fail("camera scale range must be positive");
        }
        if !(self.detector_noise_sigma >= 0.0) || !self.detector_noise_sigma.is_finite() {
            return fail("detector_noise_sigma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return fail("occlusion_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Draws a body (random axis, half-normal angle clamped to π) and a camera.
pub fn sample_body(
    domain: &DomainConfig,
    joints: usize,
    shape_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(BodyParams<f64>, CameraParams<f64>), SynthError> {
    domain.validate()?;
    let mut theta = Vec::with_capacity(joints);
    for _ in 0..joints {
        let axis = loop {
            let v: [f64; 3] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-9 {
                break [v[0] / n, v[1] / n, v[2] / n];
            }
        };
        let z: f64 = StandardNormal.sample(rng);
        let angle = (z.abs() * domain.pose_scale).min(std::f64::consts::PI);
        theta.push([axis[0] * angle, axis[1] * angle, axis[2] * angle]);
    }
    let beta = (0..shape_dim)
        .map(|_| uniform(rng, domain.beta_range))
        .collect();
    let scale = uniform(rng, domain.camera_scale_range);
    let trans = [
        uniform(rng, domain.camera_trans_range),
        uniform(rng, domain.camera_trans_range),
    ];
    Ok((BodyParams::new(theta, beta)?, CameraParams::new(scale, trans)?))
}

/// Adds `N(0, σ²)` noise per coordinate and occludes joints (confidence 0, position zeroed).
pub fn simulate_detector(
    clean: &[[f64; 2]],
    domain: &DomainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Joints2D<f64>, Vec<f64>), SynthError> {
    domain.validate()?;
    let sigma = domain.detector_noise_sigma;
    let mut noisy = Vec::with_capacity(clean.len());
    let mut conf = Vec::with_capacity(clean.len());
    for p in clean {
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        let u: f64 = rng.random();
        if u < domain.occlusion_prob {
            noisy.push([0.0, 0.0]);
            conf.push(0.0);
        } else {
            noisy.push([p[0] + sigma * nx, p[1] + sigma * ny]);
            conf.push(1.0);
        }
    }
    Ok((noisy, conf))
}

/// Network input for a detection: flattened 2D joints followed by confidences.
pub fn build_observation<T: Scalar>(target_j2d: &[[T; 2]], conf: &[T]) -> Vec<T> {
    let mut obs = Vec::with_capacity(target_j2d.len() * 3);
    obs.extend_from_slice(target_j2d.as_flattened());
    obs.extend_from_slice(conf);
    obs
}

/// One task instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    observation: Vec<T>,
    target_j2d: Joints2D<T>,
    conf: Vec<T>,
    gt_body: BodyParams<T>,
    gt_cam: CameraParams<T>,
    gt_j3d: Joints3D<T>,
    gt_j2d_clean: Joints2D<T>,
}

/// What a deployed model sees: the detections (input and 2D supervision) and their confidences.
#[derive(Debug, Clone, Copy)]
pub struct TestInput<'a, T> {
    pub observation: &'a [T],
    pub target_j2d: &'a [[T; 2]],
    pub conf: &'a [T],
}

/// 3D ground truth; used by training losses and by metrics, never by adaptation.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a, T> {
    pub body: &'a BodyParams<T>,
    pub joints: &'a [[T; 3]],
}

impl<T: Scalar> Sample<T> {
    pub fn new(
        target_j2d: Joints2D<T>,
        conf: Vec<T>,
        gt_body: BodyParams<T>,
        gt_cam: CameraParams<T>,
        gt_j3d: Joints3D<T>,
        gt_j2d_clean: Joints2D<T>,
    ) -> Self {
        Self {
            observation: build_observation(&target_j2d, &conf),
            target_j2d,
            conf,
            gt_body,
            gt_cam,
            gt_j3d,
            gt_j2d_clean,
        }
    }

    pub fn test_input(&self) -> TestInput<'_, T> {
        TestInput {
            observation: &self.observation,
            target_j2d: &self.target_j2d,
            conf: &self.conf,
        }
    }

    pub fn ground_truth(&self) -> GroundTruth<'_, T> {
        GroundTruth {
            body: &self.gt_body,
            joints: &self.gt_j3d,
        }
    }

    pub fn gt_camera(&self) -> &CameraParams<T> {
        &self.gt_cam
    }

    /// Noise-free projection of the ground truth; for diagnostics only.
    pub fn clean_joints_2d(&self) -> &[[T; 2]] {
        &self.gt_j2d_clean
    }

    /// Copy with the clean 2D joints replaced by zeros.
    pub fn without_clean_joints(&self) -> Self {
        let mut s = self.clone();
        s.gt_j2d_clean.iter_mut().for_each(|p| *p = [T::zero(); 2]);
        s
    }

    /// Copy with the 3D ground truth replaced by `body` (and its joints).
    pub fn with_ground_truth(&self, body: BodyParams<T>, joints: Joints3D<T>) -> Self {
        let mut s = self.clone();
        s.gt_body = body;
        s.gt_j3d = joints;
        s
    }

    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        let c2 = |v: &Joints2D<T>| -> Joints2D<U> {
            v.iter().map(|p| [U::lit(p[0].as_f64()), U::lit(p[1].as_f64())]).collect()
        };
        Sample {
            observation: self.observation.iter().map(|v| U::lit(v.as_f64())).collect(),
            target_j2d: c2(&self.target_j2d),
            conf: self.conf.iter().map(|v| U::lit(v.as_f64())).collect(),
            gt_body: self.gt_body.cast(),
            gt_cam: self.gt_cam.cast(),
            gt_j3d: self
                .gt_j3d
                .iter()
                .map(|p| [U::lit(p[0].as_f64()), U::lit(p[1].as_f64()), U::lit(p[2].as_f64())])
                .collect(),
            gt_j2d_clean: c2(&self.gt_j2d_clean),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample<f64>>,
    pub domain: DomainConfig,
    pub seed: u64,
    pub batches: usize,
    pub batch_size: usize,
    pub joints: usize,
    pub shape_dim: usize,
    pub skeleton_hash: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples_as<T: Scalar>(&self) -> Vec<Sample<T>> {
        self.samples.iter().map(Sample::cast).collect()
    }
}

/// Generates `batches × batch_size` samples from one seeded stream.
pub fn make_dataset(
    skeleton: &Skeleton<f64>,
    domain: &DomainConfig,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Dataset, SynthError> {
    if batches == 0 || batch_size == 0 {
        return Err(SynthError::InvalidShape(format!(
            "B = {batches} and M = {batch_size} must both be at least 1"
        )));
    }
    domain.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batches * batch_size;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let (body, cam) = sample_body(domain, skeleton.joint_count(), skeleton.shape_dim(), &mut rng)?;
        let j3d = forward_kinematics(skeleton, &body)?;
        let clean = project(&j3d, &cam);
        let (noisy, conf) = simulate_detector(&clean, domain, &mut rng)?;
        samples.push(Sample::new(noisy, conf, body, cam, j3d, clean));
    }
    Ok(Dataset {
        samples,
        domain: domain.clone(),
        seed,
        batches,
        batch_size,
        joints: skeleton.joint_count(),
        shape_dim: skeleton.shape_dim(),
        skeleton_hash: skeleton.content_hash(),
    })
}

pub const DATASET_MAGIC: [u8; 4] = *b"MADS";
pub const DATASET_VERSION: u32 = 1;
/// Per-sample field order of the packed float section.
pub const SAMPLE_FIELD_ORDER: [&str; 7] = [
    "target_j2d[J][2]",
    "conf[J]",
    "gt_theta[J][3]",
    "gt_beta[S]",
    "gt_camera[scale,tx,ty]",
    "gt_j3d[J][3]",
    "gt_j2d_clean[J][2]",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    domain: DomainConfig,
    seed: u64,
    batches: usize,
    batch_size: usize,
    joints: usize,
    shape_dim: usize,
    skeleton_hash: String,
    sample_count: usize,
    field_order: Vec<String>,
}

fn floats_per_sample(j: usize, s: usize) -> usize {
    11 * j + s + 3
}

/// Writes the dataset file:
///
/// ```text
/// "MADS" | version u32 LE | header JSON length u64 LE | header JSON
/// | per sample: f64 LE values in SAMPLE_FIELD_ORDER
/// ```
pub fn serialize_dataset<W: Write>(ds: &Dataset, mut out: W) -> Result<(), SynthError> {
    let header = DatasetHeader {
        domain: ds.domain.clone(),
        seed: ds.seed,
        batches: ds.batches,
        batch_size: ds.batch_size,
        joints: ds.joints,
        shape_dim: ds.shape_dim,
        skeleton_hash: ds.skeleton_hash.clone(),
        sample_count: ds.samples.len(),
        field_order: SAMPLE_FIELD_ORDER.iter().map(|s| s.to_string()).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| SynthError::Corrupt {
        position: 0,
        reason: e.to_string(),
    })?;
    let per = floats_per_sample(ds.joints, ds.shape_dim);
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * per * ds.samples.len());
    buf.extend_from_slice(&DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut put = |v: f64| buf.extend_from_slice(&v.to_le_bytes());
    for s in &ds.samples {
        s.target_j2d.as_flattened().iter().for_each(|v| put(*v));
        s.conf.iter().for_each(|v| put(*v));
        s.gt_body.theta.as_flattened().iter().for_each(|v| put(*v));
        s.gt_body.beta.iter().for_each(|v| put(*v));
        put(s.gt_cam.scale);
        put(s.gt_cam.trans[0]);
        put(s.gt_cam.trans[1]);
        s.gt_j3d.as_flattened().iter().for_each(|v| put(*v));
        s.gt_j2d_clean.as_flattened().iter().for_each(|v| put(*v));
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn load_dataset<R: Read>(mut input: R) -> Result<Dataset, SynthError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = ByteCursor::new(&bytes);
    if cur.take(4)? != DATASET_MAGIC {
        return Err(SynthError::BadMagic);
    }
    let version = cur.u32()?;
    if version != DATASET_VERSION {
        return Err(SynthError::Version(version));
    }
    let len = cur.u64()? as usize;
    let pos = cur.pos;
    let header: DatasetHeader =
        serde_json::from_slice(cur.take(len)?).map_err(|e| SynthError::Corrupt {
            position: pos,
            reason: format!("header: {e}"),
        })?;
    let (j, s) = (header.joints, header.shape_dim);
    if header.sample_count != header.batches * header.batch_size {
        return Err(SynthError::Corrupt {
            position: pos,
            reason: "sample count differs from B·M".into(),
        });
    }
    let expected = header.sample_count * floats_per_sample(j, s) * 8;
    if cur.remaining() != expected {
        return Err(SynthError::Corrupt {
            position: cur.pos,
            reason: format!(
                "expected {expected} bytes of sample data, found {}",
                cur.remaining()
            ),
        });
    }
    let mut samples = Vec::with_capacity(header.sample_count);
    for _ in 0..header.sample_count {
        let mut vec_of = |n: usize| -> Result<Vec<f64>, SynthError> {
            (0..n).map(|_| cur.f64().map_err(SynthError::from)).collect()
        };
        let pairs = |v: Vec<f64>| -> Joints2D<f64> { v.chunks_exact(2).map(|c| [c[0], c[1]]).collect() };
        let triples =
            |v: Vec<f64>| -> Vec<[f64; 3]> { v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() };
        let target = pairs(vec_of(2 * j)?);
        let conf = vec_of(j)?;
        let theta = triples(vec_of(3 * j)?);
        let beta = vec_of(s)?;
        let cam = vec_of(3)?;
        let j3d = triples(vec_of(3 * j)?);
        let clean = pairs(vec_of(2 * j)?);
        samples.push(Sample::new(
            target,
            conf,
            BodyParams::estimate(theta, beta),
            CameraParams {
                scale: cam[0],
                trans: [cam[1], cam[2]],
            },
            j3d,
            clean,
        ));
    }
    Ok(Dataset {
        samples,
        domain: header.domain,
        seed: header.seed,
        batches: header.batches,
        batch_size: header.batch_size,
        joints: j,
        shape_dim: s,
        skeleton_hash: header.skeleton_hash,
    })
}
