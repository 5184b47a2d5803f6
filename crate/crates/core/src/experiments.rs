//! Experiment suites: the meta/aux ablation, step curves, detector-noise
//! ablation, out-of-domain protocol, learning-rate grid and inner-step grid.
//!
//! Every suite is a pure function of its [`ExperimentPlan`]; only `timing.csv`
//! (wall-clock) varies between runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{
    adapt_dual, adapt_eft, traces_to_csv, AdaptConfig, AdaptError, AdaptMode, AdaptationTrace,
};
use crate::body_model::{forward_kinematics, Skeleton};
use crate::diffcore::ParamVector;
use crate::metrics::{
    mpjpe, pa_mpjpe, per_joint_error, per_joint_to_csv, results_to_csv, MetricError, PerJointRow,
    ResultRow,
};
use crate::regressor::{regress, RegressorSpec};
use crate::synth::{make_dataset, DomainConfig, Sample, SynthError};
use crate::training::{meta_train, pretrain, TrainConfig, TrainError, Trained};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Direct regression from the pretrained network.
    None,
    /// Pretrained network, 2D-only test-time fitting.
    Eft,
    /// Meta-trained without the auxiliary network, 2D-only test-time fitting.
    MetaOnly,
    /// Meta-trained dual networks, pseudo-label test-time fitting.
    MetaDual,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::None, Method::Eft, Method::MetaOnly, Method::MetaDual];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Eft => "eft",
            Method::MetaOnly => "meta_only",
            Method::MetaDual => "meta_dual",
        }
    }

    fn adapt_mode(self) -> AdaptMode {
        match self {
            Method::None => AdaptMode::None,
            Method::Eft | Method::MetaOnly => AdaptMode::Eft,
            Method::MetaDual => AdaptMode::Dual,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Ablation,
    StepCurves,
    Detector,
    Ood,
    LrGrid,
    InnerSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    pub kind: ExperimentKind,
    pub train_domain: String,
    pub test_domain: String,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Number of training batches `B`; the training set has `B × train.batch_size` samples.
    pub train_batches: usize,
    pub test_samples: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    /// Test-time detector noise levels (detector experiment).
    pub detector_sigmas: Vec<f64>,
    /// `(alpha, beta_lr)` pairs (learning-rate grid).
    pub lr_grid: Vec<[f64; 2]>,
    /// Values of `k` (inner-step grid).
    pub inner_steps_grid: Vec<usize>,
}

/// Calibrated shared settings of the shipped presets.
pub const PRESET_ALPHA: f64 = 0.05;
pub const PRESET_BETA_LR: f64 = 1e-3;
pub const PRESET_EPOCHS: usize = 20;
pub const PRESET_HIDDEN: usize = 64;
pub const PRESET_LAMBDA: f64 = 0.3;
/// Relative loss change that ends adaptation; the dual method stops near step 6 on the presets.
pub const PRESET_EARLY_STOP_TOL: f64 = 0.03;

impl Default for ExperimentPlan {
    fn default() -> Self {
        let mut train = TrainConfig {
            alpha: PRESET_ALPHA,
            beta_lr: PRESET_BETA_LR,
            epochs: PRESET_EPOCHS,
            batch_size: 40,
            ..TrainConfig::default()
        };
        train.loss.lambda_2d = PRESET_LAMBDA;
        train.loss.lambda_3d = PRESET_LAMBDA;
        Self {
            name: "ablation".into(),
            kind: ExperimentKind::Ablation,
            train_domain: "train".into(),
            test_domain: "train".into(),
            methods: vec![Method::None, Method::Eft, Method::MetaOnly, Method::MetaDual],
            seeds: vec![1, 2, 3],
            train_batches: 50,
            test_samples: 500,
            hidden: vec![PRESET_HIDDEN, PRESET_HIDDEN],
            train,
            adapt: AdaptConfig {
                alpha: PRESET_ALPHA,
                early_stop_rel_tol: PRESET_EARLY_STOP_TOL,
                ..AdaptConfig::default()
            },
            detector_sigmas: vec![0.0, 0.01, 0.02],
            lr_grid: vec![[1e-5, 1e-4], [PRESET_ALPHA, PRESET_BETA_LR], [1e-1, 1e-1]],
            inner_steps_grid: vec![1, 2, 3],
        }
    }
}

impl ExperimentPlan {
    pub fn preset_names() -> &'static [&'static str] {
        &["ablation", "step-curves", "detector", "ood", "lr-grid", "inner-steps"]
    }

    pub fn preset(name: &str) -> Result<Self, ExperimentError> {
        let base = Self::default();
        let plan = match name {
            "ablation" => base,
            "step-curves" => Self {
                name: name.into(),
                kind: ExperimentKind::StepCurves,
                methods: vec![Method::Eft, Method::MetaDual],
                ..base
            },
            "detector" => Self {
                name: name.into(),
                kind: ExperimentKind::Detector,
                methods: vec![Method::MetaDual],
                ..base
            },
            "ood" => Self {
                name: name.into(),
                kind: ExperimentKind::Ood,
                train_domain: "indoor-like".into(),
                test_domain: "in-the-wild-like".into(),
                methods: vec![Method::Eft, Method::MetaDual],
                ..base
            },
            "lr-grid" => Self {
                name: name.into(),
                kind: ExperimentKind::LrGrid,
                methods: vec![Method::MetaDual],
                seeds: vec![1],
                train_batches: 10,
                test_samples: 100,
                train: TrainConfig {
                    epochs: 5,
                    ..base.train.clone()
                },
                ..base
            },
            "inner-steps" => Self {
                name: name.into(),
                kind: ExperimentKind::InnerSteps,
                methods: vec![Method::MetaDual],
                seeds: vec![1],
                train_batches: 25,
                test_samples: 200,
                ..base
            },
            other => {
                return Err(ExperimentError::Plan(format!(
                    "unknown preset {other:?}; available: {}",
                    Self::preset_names().join(", ")
                )))
            }
        };
        Ok(plan)
    }

    /// Copy with `alpha` applied to both the inner training step and test-time adaptation.
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.train.alpha = alpha;
        self.adapt.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Plan(m));
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.train_batches == 0 || self.test_samples == 0 {
            return bad("train_batches and test_samples must be positive".into());
        }
        DomainConfig::preset(&self.train_domain).map_err(|e| ExperimentError::Plan(e.to_string()))?;
        DomainConfig::preset(&self.test_domain).map_err(|e| ExperimentError::Plan(e.to_string()))?;
        self.train.validate().map_err(|e| ExperimentError::Plan(e.to_string()))?;
        self.adapt.validate().map_err(|e| ExperimentError::Plan(e.to_string()))?;
        match self.kind {
            ExperimentKind::Ablation => {
                for m in [Method::Eft, Method::MetaOnly, Method::MetaDual] {
                    if !self.methods.contains(&m) {
                        return bad(format!("ablation requires method {m}"));
                    }
                }
            }
            ExperimentKind::Ood if self.train_domain == self.test_domain => {
                return bad("ood requires train_domain != test_domain".into());
            }
            ExperimentKind::Detector if self.detector_sigmas.is_empty() => {
                return bad("detector_sigmas must not be empty".into());
            }
            ExperimentKind::Detector if self.detector_sigmas.iter().any(|s| !(*s >= 0.0)) => {
                return bad("detector_sigmas must be non-negative".into());
            }
            ExperimentKind::LrGrid if self.lr_grid.is_empty() => {
                return bad("lr_grid must not be empty".into());
            }
            ExperimentKind::InnerSteps if self.inner_steps_grid.contains(&0) => {
                return bad("inner_steps_grid values must be at least 1".into());
            }
            ExperimentKind::InnerSteps if self.inner_steps_grid.is_empty() => {
                return bad("inner_steps_grid must not be empty".into());
            }
            _ => {}
        }
        Ok(())
    }

    pub fn spec(&self, skeleton: &Skeleton<f64>) -> RegressorSpec {
        RegressorSpec::for_skeleton(skeleton).with_hidden(self.hidden.clone())
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Dataset seeds derived from an experiment seed.
pub fn data_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// Trained networks for one seed.
#[derive(Debug, Clone, Default)]
pub struct ModelSet {
    pub pretrained: Option<Trained<f64>>,
    pub meta_only: Option<Trained<f64>>,
    pub meta_dual: Option<Trained<f64>>,
}

pub fn train_models(
    spec: &RegressorSpec,
    skeleton: &Skeleton<f64>,
    samples: &[Sample<f64>],
    methods: &[Method],
    config: &TrainConfig,
) -> Result<ModelSet, TrainError> {
    let mut set = ModelSet::default();
    if methods.iter().any(|m| matches!(m, Method::None | Method::Eft)) {
        set.pretrained = Some(pretrain(spec, skeleton, samples, config)?);
    }
    if methods.contains(&Method::MetaOnly) {
        set.meta_only = Some(meta_train(spec, None, skeleton, samples, config)?);
    }
    if methods.contains(&Method::MetaDual) {
        set.meta_dual = Some(meta_train(spec, Some(spec), skeleton, samples, config)?);
    }
    Ok(set)
}

impl ModelSet {
    pub fn trained(&self, method: Method) -> Option<&Trained<f64>> {
        match method {
            Method::None | Method::Eft => self.pretrained.as_ref(),
            Method::MetaOnly => self.meta_only.as_ref(),
            Method::MetaDual => self.meta_dual.as_ref(),
        }
    }

    fn start(&self, method: Method) -> (&ParamVector<f64>, Option<&ParamVector<f64>>) {
        let trained = self
            .trained(method)
            .unwrap_or_else(|| panic!("no trained model for {method}"));
        (&trained.main, trained.aux.as_ref())
    }
}

/// Adapts one sample with `method`. Reads only the sample's test input; the
/// ground truth is used by the diagnostic observer and nowhere else.
pub fn adapt_sample(
    method: Method,
    models: &ModelSet,
    spec: &RegressorSpec,
    skeleton: &Skeleton<f64>,
    sample: &Sample<f64>,
    adapt: &AdaptConfig,
    train: &TrainConfig,
) -> Result<(ParamVector<f64>, AdaptationTrace), ExperimentError> {
    let cfg = AdaptConfig {
        mode: method.adapt_mode(),
        ..adapt.clone()
    };
    let gt = sample.ground_truth().joints;
    let observer = |w: &ParamVector<f64>| -> Option<(f64, f64)> {
        let (body, _) = regress(spec, w, sample.test_input().observation).ok()?;
        let joints = forward_kinematics(skeleton, &body).ok()?;
        Some((mpjpe(&joints, gt).ok()?, pa_mpjpe(&joints, gt).unwrap_or(f64::NAN)))
    };
    let (w, u) = models.start(method);
    let input = sample.test_input();
    let out = match (method, u) {
        (Method::MetaDual, Some(u)) => {
            adapt_dual(spec, spec, skeleton, w, u, input, &cfg, &train.loss, Some(&observer))?
        }
        _ => adapt_eft(spec, skeleton, w, input, &cfg, &train.loss, Some(&observer))?,
    };
    Ok(out)
}

/// Per-method evaluation over a test set.
#[derive(Debug, Clone)]
pub struct MethodEval {
    pub method: Method,
    pub traces: Vec<AdaptationTrace>,
    pub mpjpe: Vec<f64>,
    pub pa_mpjpe: Vec<f64>,
    /// Mean per-joint error (root-centered, aligned).
    pub per_joint: (Vec<f64>, Vec<f64>),
}

impl MethodEval {
    pub fn mean_mpjpe(&self) -> f64 {
        mean(&self.mpjpe)
    }

    pub fn mean_pa_mpjpe(&self) -> f64 {
        mean(&self.pa_mpjpe)
    }

    pub fn is_finite(&self) -> bool {
        self.mean_mpjpe().is_finite() && self.mean_pa_mpjpe().is_finite()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn evaluate_method(
    method: Method,
    models: &ModelSet,
    spec: &RegressorSpec,
    skeleton: &Skeleton<f64>,
    test: &[Sample<f64>],
    adapt: &AdaptConfig,
    train: &TrainConfig,
) -> Result<MethodEval, ExperimentError> {
    let per_sample = test
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (w, mut trace) = adapt_sample(method, models, spec, skeleton, s, adapt, train)?;
            trace.sample_id = i;
            let (body, _) = regress(spec, &w, s.test_input().observation)
                .map_err(|e| ExperimentError::Adapt(e.into()))?;
            let joints = forward_kinematics(skeleton, &body).map_err(|_| {
                ExperimentError::Plan(format!("non-finite prediction for sample {i}"))
            })?;
            let gt = s.ground_truth().joints;
            let flat = per_joint_error(&joints, gt, false)?;
            let aligned = per_joint_error(&joints, gt, true).unwrap_or_else(|_| vec![f64::NAN; gt.len()]);
            Ok((trace, flat, aligned))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let j = skeleton.joint_count();
    let mut eval = MethodEval {
        method,
        traces: Vec::with_capacity(test.len()),
        mpjpe: Vec::with_capacity(test.len()),
        pa_mpjpe: Vec::with_capacity(test.len()),
        per_joint: (vec![0.0; j], vec![0.0; j]),
    };
    let n = test.len() as f64;
    for (trace, flat, aligned) in per_sample {
        eval.mpjpe.push(flat.iter().sum::<f64>() / j as f64);
        eval.pa_mpjpe.push(aligned.iter().sum::<f64>() / j as f64);
        for k in 0..j {
            eval.per_joint.0[k] += flat[k] / n;
            eval.per_joint.1[k] += aligned[k] / n;
        }
        eval.traces.push(trace);
    }
    Ok(eval)
}

/// Mean per-step metrics over samples; runs that stopped early hold their final state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: String,
    pub domain: String,
    pub seed: String,
    pub step: usize,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub loss: f64,
}

fn curve_rows(method: &str, domain: &str, seed: &str, traces: &[&AdaptationTrace], steps: usize) -> Vec<CurveRow> {
    (0..=steps)
        .map(|k| {
            let pick = |f: &dyn Fn(&AdaptationTrace) -> f64| {
                mean(&traces.iter().map(|t| f(t)).collect::<Vec<_>>())
            };
            CurveRow {
                method: method.into(),
                domain: domain.into(),
                seed: seed.into(),
                step: k,
                mpjpe: pick(&|t| t.at_step(k).mpjpe.unwrap_or(f64::NAN)),
                pa_mpjpe: pick(&|t| t.at_step(k).pa_mpjpe.unwrap_or(f64::NAN)),
                loss: pick(&|t| t.at_step(k).loss),
            }
        })
        .collect()
}

fn curves_to_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("method,domain,seed,step,mpjpe,pa_mpjpe,loss\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.9e},{:.9e},{:.9e}",
            r.method, r.domain, r.seed, r.step, r.mpjpe, r.pa_mpjpe, r.loss
        );
    }
    out
}

/// Seed-level mean and spread of one (method, domain) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub domain: String,
    pub mpjpe_mean: f64,
    pub mpjpe_std: f64,
    pub pa_mpjpe_mean: f64,
    pub pa_mpjpe_std: f64,
    pub n_seeds: usize,
}

fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.domain.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, domain)| {
            let cell: Vec<&ResultRow> = rows
                .iter()
                .filter(|r| r.method == method && r.domain == domain)
                .collect();
            let m: Vec<f64> = cell.iter().map(|r| r.mpjpe_mean).collect();
            let p: Vec<f64> = cell.iter().map(|r| r.pa_mpjpe_mean).collect();
            SummaryRow {
                method,
                domain,
                mpjpe_mean: mean(&m),
                mpjpe_std: std_dev(&m),
                pa_mpjpe_mean: mean(&p),
                pa_mpjpe_std: std_dev(&p),
                n_seeds: cell.len(),
            }
        })
        .collect()
}

fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("method,domain,mpjpe_mean,mpjpe_std,pa_mpjpe_mean,pa_mpjpe_std,n_seeds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{}",
            r.method, r.domain, r.mpjpe_mean, r.mpjpe_std, r.pa_mpjpe_mean, r.pa_mpjpe_std, r.n_seeds
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CellStatus {
    Ok,
    Unstable,
}

/// One cell of the learning-rate or inner-step grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha: f64,
    pub beta_lr: f64,
    pub inner_steps: usize,
    pub method: String,
    pub seed: u64,
    pub status: CellStatus,
    pub mpjpe_mean: f64,
    pub pa_mpjpe_mean: f64,
    /// Per-sample gradient evaluations in one training epoch.
    pub gradient_evals_per_epoch: usize,
    pub detail: String,
}

fn grid_to_csv(rows: &[GridRow]) -> String {
    let mut out = String::from(
        "alpha,beta_lr,inner_steps,method,seed,status,mpjpe_mean,pa_mpjpe_mean,gradient_evals_per_epoch,detail\n",
    );
    for r in rows {
        let status = match r.status {
            CellStatus::Ok => "OK",
            CellStatus::Unstable => "UNSTABLE",
        };
        let _ = writeln!(
            out,
            "{:e},{:e},{},{},{},{},{:.9e},{:.9e},{},\"{}\"",
            r.alpha,
            r.beta_lr,
            r.inner_steps,
            r.method,
            r.seed,
            status,
            r.mpjpe_mean,
            r.pa_mpjpe_mean,
            r.gradient_evals_per_epoch,
            r.detail.replace('"', "'")
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub label: String,
    pub seconds_per_epoch: f64,
}

/// Everything an experiment produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub plan: ExperimentPlan,
    pub results: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    /// Seed-mean curves (`seed = "mean"`) followed by per-seed curves.
    pub curves: Vec<CurveRow>,
    pub per_joint: Vec<PerJointRow>,
    pub grid: Vec<GridRow>,
    pub timing: Vec<TimingRow>,
    /// `(label, traces)`, one entry per (method, domain, seed).
    pub traces: Vec<(String, Vec<AdaptationTrace>)>,
}

impl ExperimentOutput {
    pub fn summary_for(&self, method: Method, domain: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.method == method.name() && r.domain == domain)
    }

    /// Seed-mean curve of one method in one domain.
    pub fn curve(&self, method: Method, domain: &str) -> Vec<&CurveRow> {
        self.curves
            .iter()
            .filter(|r| r.method == method.name() && r.domain == domain && r.seed == "mean")
            .collect()
    }
}

struct Collector<'a> {
    plan: &'a ExperimentPlan,
    skeleton: &'a Skeleton<f64>,
    results: Vec<ResultRow>,
    curves_by_seed: Vec<CurveRow>,
    traces: Vec<(String, Vec<AdaptationTrace>)>,
    per_joint: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl Collector<'_> {
    fn record(&mut self, domain: &str, seed: u64, eval: MethodEval) {
        let method = eval.method.name();
        self.results.push(ResultRow {
            experiment: self.plan.name.clone(),
            method: method.into(),
            domain: domain.into(),
            seed,
            mpjpe_mean: eval.mean_mpjpe(),
            pa_mpjpe_mean: eval.mean_pa_mpjpe(),
            n_samples: eval.mpjpe.len(),
        });
        let refs: Vec<&AdaptationTrace> = eval.traces.iter().collect();
        self.curves_by_seed.extend(curve_rows(
            method,
            domain,
            &seed.to_string(),
            &refs,
            self.plan.adapt.max_steps,
        ));
        let key = format!("{method}@{domain}");
        match self.per_joint.iter_mut().find(|(k, _, _)| *k == key) {
            Some((_, a, b)) => {
                for i in 0..a.len() {
                    a[i] += eval.per_joint.0[i];
                    b[i] += eval.per_joint.1[i];
                }
            }
            None => self.per_joint.push((key, eval.per_joint.0, eval.per_joint.1)),
        }
        self.traces
            .push((format!("{method}_{domain}_seed{seed}"), eval.traces));
    }

    fn finish(self, grid: Vec<GridRow>, timing: Vec<TimingRow>) -> ExperimentOutput {
        let mut curves = Vec::new();
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.curves_by_seed {
            let key = (r.method.clone(), r.domain.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        for (method, domain) in keys {
            let refs: Vec<&AdaptationTrace> = self
                .traces
                .iter()
                .filter(|(label, _)| label.starts_with(&format!("{method}_{domain}_seed")))
                .flat_map(|(_, t)| t.iter())
                .collect();
            curves.extend(curve_rows(&method, &domain, "mean", &refs, self.plan.adapt.max_steps));
        }
        curves.extend(self.curves_by_seed);
        let n_seeds = self.plan.seeds.len() as f64;
        let names = self.skeleton.names();
        let per_joint = self
            .per_joint
            .iter()
            .flat_map(|(key, a, b)| {
                a.iter().zip(b).zip(names).map(move |((x, y), name)| PerJointRow {
                    method: key.clone(),
                    joint: name.clone(),
                    mpjpe: x / n_seeds,
                    pa_mpjpe: y / n_seeds,
                })
            })
            .collect();
        ExperimentOutput {
            plan: self.plan.clone(),
            summary: summarize(&self.results),
            results: self.results,
            curves,
            per_joint,
            grid,
            timing,
            traces: self.traces,
        }
    }
}

fn domain(name: &str) -> Result<DomainConfig, ExperimentError> {
    Ok(DomainConfig::preset(name)?)
}

fn sigma_label(domain: &str, sigma: f64) -> String {
    format!("{domain}@sigma={sigma}")
}

/// Runs the experiment described by `plan`.
pub fn run_experiment(
    plan: &ExperimentPlan,
    skeleton: &Skeleton<f64>,
) -> Result<ExperimentOutput, ExperimentError> {
    plan.validate()?;
    match plan.kind {
        ExperimentKind::Ablation | ExperimentKind::StepCurves => run_ablation_meta_aux(plan, skeleton),
        ExperimentKind::Detector => run_detector(plan, skeleton),
        ExperimentKind::Ood => run_ood(plan, skeleton),
        ExperimentKind::LrGrid => run_lr_grid(plan, skeleton),
        ExperimentKind::InnerSteps => run_inner_steps_grid(plan, skeleton),
    }
}

fn train_set(plan: &ExperimentPlan, skeleton: &Skeleton<f64>, seed: u64) -> Result<Vec<Sample<f64>>, ExperimentError> {
    let d = domain(&plan.train_domain)?;
    let ds = make_dataset(skeleton, &d, plan.train_batches, plan.train.batch_size, data_seed(seed, TRAIN_STREAM))?;
    Ok(ds.samples)
}

fn test_set(
    plan: &ExperimentPlan,
    skeleton: &Skeleton<f64>,
    domain: &DomainConfig,
    seed: u64,
) -> Result<Vec<Sample<f64>>, ExperimentError> {
    Ok(make_dataset(skeleton, domain, 1, plan.test_samples, data_seed(seed, TEST_STREAM))?.samples)
}

fn seeded(plan: &ExperimentPlan, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..plan.train.clone()
    }
}

/// Meta-learning / auxiliary-network ablation, also used for step curves.
pub fn run_ablation_meta_aux(
    plan: &ExperimentPlan,
    skeleton: &Skeleton<f64>,
) -> Result<ExperimentOutput, ExperimentError> {
    let spec = plan.spec(skeleton);
    let mut out = collector(plan, skeleton);
    let test_domain = domain(&plan.test_domain)?;
    for &seed in &plan.seeds {
        let train = seeded(plan, seed);
        let models = train_models(&spec, skeleton, &train_set(plan, skeleton, seed)?, &plan.methods, &train)?;
        let test = test_set(plan, skeleton, &test_domain, seed)?;
        for &m in &plan.methods {
            let eval = evaluate_method(m, &models, &spec, skeleton, &test, &plan.adapt, &train)?;
            out.record(&plan.test_domain, seed, eval);
        }
    }
    Ok(out.finish(Vec::new(), Vec::new()))
}

fn collector<'a>(plan: &'a ExperimentPlan, skeleton: &'a Skeleton<f64>) -> Collector<'a> {
    Collector {
        plan,
        skeleton,
        results: Vec::new(),
        curves_by_seed: Vec::new(),
        traces: Vec::new(),
        per_joint: Vec::new(),
    }
}

/// Detector-quality ablation: one training run per seed, test sets at each noise level.
pub fn run_detector(plan: &ExperimentPlan, skeleton: &Skeleton<f64>) -> Result<ExperimentOutput, ExperimentError> {
    let spec = plan.spec(skeleton);
    let mut out = collector(plan, skeleton);
    for &seed in &plan.seeds {
        let train = seeded(plan, seed);
        let models = train_models(&spec, skeleton, &train_set(plan, skeleton, seed)?, &plan.methods, &train)?;
        for &sigma in &plan.detector_sigmas {
            let d = domain(&plan.test_domain)?.with_noise(sigma);
            let test = test_set(plan, skeleton, &d, seed)?;
            for &m in &plan.methods {
                let eval = evaluate_method(m, &models, &spec, skeleton, &test, &plan.adapt, &train)?;
                out.record(&sigma_label(&plan.test_domain, sigma), seed, eval);
            }
        }
    }
    Ok(out.finish(Vec::new(), Vec::new()))
}

/// Out-of-domain protocol with an in-domain control.
pub fn run_ood(plan: &ExperimentPlan, skeleton: &Skeleton<f64>) -> Result<ExperimentOutput, ExperimentError> {
    let spec = plan.spec(skeleton);
    let mut out = collector(plan, skeleton);
    for &seed in &plan.seeds {
        let train = seeded(plan, seed);
        let models = train_models(&spec, skeleton, &train_set(plan, skeleton, seed)?, &plan.methods, &train)?;
        for name in [&plan.test_domain, &plan.train_domain] {
            let test = test_set(plan, skeleton, &domain(name)?, seed)?;
            for &m in &plan.methods {
                let eval = evaluate_method(m, &models, &spec, skeleton, &test, &plan.adapt, &train)?;
                out.record(name, seed, eval);
            }
        }
    }
    Ok(out.finish(Vec::new(), Vec::new()))
}

fn gradient_evals_per_epoch(plan: &ExperimentPlan, method: Method, k: usize) -> usize {
    let n = plan.train_batches * plan.train.batch_size;
    n * match method {
        Method::None | Method::Eft => 1,
        Method::MetaOnly => k + 1,
        Method::MetaDual => k + 2,
    }
}

#[allow(clippy::too_many_arguments)]
fn grid_cell(
    plan: &ExperimentPlan,
    skeleton: &Skeleton<f64>,
    seed: u64,
    cell: &ExperimentPlan,
    grid: &mut Vec<GridRow>,
    timing: &mut Vec<TimingRow>,
    out: &mut Collector<'_>,
    label: &str,
) -> Result<(), ExperimentError> {
    let spec = plan.spec(skeleton);
    let train = seeded(cell, seed);
    let samples = train_set(plan, skeleton, seed)?;
    let test = test_set(plan, skeleton, &domain(&plan.test_domain)?, seed)?;
    for &m in &plan.methods {
        let row = |status, mp, pa, detail: String| GridRow {
            alpha: cell.train.alpha,
            beta_lr: cell.train.beta_lr,
            inner_steps: cell.train.inner_steps,
            method: m.name().into(),
            seed,
            status,
            mpjpe_mean: mp,
            pa_mpjpe_mean: pa,
            gradient_evals_per_epoch: gradient_evals_per_epoch(plan, m, cell.train.inner_steps),
            detail,
        };
        let start = Instant::now();
        let models = match train_models(&spec, skeleton, &samples, &[m], &train) {
            Ok(models) => models,
            Err(e @ TrainError::Divergence { .. }) => {
                grid.push(row(CellStatus::Unstable, f64::NAN, f64::NAN, e.to_string()));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let seconds = start.elapsed().as_secs_f64() / cell.train.epochs.max(1) as f64;
        timing.push(TimingRow {
            label: format!("{label} {m} seed {seed}"),
            seconds_per_epoch: seconds,
        });
        let history = &models.trained(m).expect("model was trained").history;
        let eval = evaluate_method(m, &models, &spec, skeleton, &test, &cell.adapt, &train)?;
        let diverged = eval.traces.iter().filter(|t| t.diverged).count();
        if history.regressed() {
            let detail = format!(
                "training loss grew from {:e} to {:e}",
                history.rows[0].main_loss,
                history.final_epoch_mean().unwrap_or(f64::NAN)
            );
            grid.push(row(CellStatus::Unstable, eval.mean_mpjpe(), eval.mean_pa_mpjpe(), detail));
        } else if !eval.is_finite() || diverged * 2 > eval.traces.len() {
            let detail = format!(
                "training completed but adaptation is not stable: {diverged} of {} samples diverged",
                eval.traces.len()
            );
            grid.push(row(CellStatus::Unstable, eval.mean_mpjpe(), eval.mean_pa_mpjpe(), detail));
        } else {
            grid.push(row(CellStatus::Ok, eval.mean_mpjpe(), eval.mean_pa_mpjpe(), String::new()));
        }
        out.record(&format!("{}@{label}", plan.test_domain), seed, eval);
    }
    Ok(())
}

/// Learning-rate grid; divergent cells are reported as `UNSTABLE`.
pub fn run_lr_grid(plan: &ExperimentPlan, skeleton: &Skeleton<f64>) -> Result<ExperimentOutput, ExperimentError> {
    let mut out = collector(plan, skeleton);
    let mut grid = Vec::new();
    let mut timing = Vec::new();
    for &seed in &plan.seeds {
        for &[alpha, beta_lr] in &plan.lr_grid {
            let mut cell = plan.clone().with_alpha(alpha);
            cell.train.beta_lr = beta_lr;
            let label = format!("alpha={alpha:e},beta_lr={beta_lr:e}");
            grid_cell(plan, skeleton, seed, &cell, &mut grid, &mut timing, &mut out, &label)?;
        }
    }
    Ok(out.finish(grid, timing))
}

/// Inner-step-count grid with deterministic work counts and wall-clock per epoch.
pub fn run_inner_steps_grid(
    plan: &ExperimentPlan,
    skeleton: &Skeleton<f64>,
) -> Result<ExperimentOutput, ExperimentError> {
    let mut out = collector(plan, skeleton);
    let mut grid = Vec::new();
    let mut timing = Vec::new();
    for &seed in &plan.seeds {
        for &k in &plan.inner_steps_grid {
            let mut cell = plan.clone();
            cell.train.inner_steps = k;
            grid_cell(plan, skeleton, seed, &cell, &mut grid, &mut timing, &mut out, &format!("k={k}"))?;
        }
    }
    Ok(out.finish(grid, timing))
}

/// Minimal self-contained SVG line chart.
pub fn line_chart_svg(title: &str, y_label: &str, series: &[(String, Vec<f64>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 70.0;
    const R: f64 = 160.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let values: Vec<f64> = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = (hi - lo) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| L + (W - L - R) * i as f64 / (n - 1) as f64;
    let y = |v: f64| T + (H - T - B) * (1.0 - (v - lo) / (hi - lo));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (W - R + L) / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{L},{T} V{} H{}" fill="none" stroke="black"/>"#,
        H - B,
        W - R
    );
    for i in 0..n {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{i}</text>"#,
            x(i),
            H - B + 16.0
        );
    }
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{:.4}</text>"#,
            L - 6.0,
            y(v) + 4.0,
            v
        );
        let _ = writeln!(
            svg,
            r##"<path d="M{L},{:.1} H{}" stroke="#dddddd"/>"##,
            y(v),
            W - R
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, (W - R + L) / 2.0, H - 12.0);
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16,{}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (H - B + T) / 2.0,
        escape(y_label)
    );
    for (k, (name, v)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = v
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.1},{:.1}", x(i), y(*v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let ly = T + 18.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<path d="M{},{ly} h20" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            W - R + 10.0,
            W - R + 36.0,
            ly + 4.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf, ExperimentError> {
    fs::write(&path, contents).map_err(|source| ExperimentError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Writes the experiment directory and returns the written paths.
///
/// Layout: `plan.json`, `results.csv`, `summary.csv`, `curves.csv`,
/// `per_joint.csv`, `grid.csv` and `timing.csv` (grids only), `traces/*.csv`,
/// and `curves_mpjpe.svg` / `curves_loss.svg`.
pub fn write_output(output: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let io = |source| ExperimentError::Io {
        path: dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir.join("traces")).map_err(io)?;
    let mut written = Vec::new();
    let plan_json = serde_json::to_string_pretty(&output.plan).expect("plan serializes") + "\n";
    written.push(write(dir.join("plan.json"), &plan_json)?);
    written.push(write(dir.join("results.csv"), &results_to_csv(&output.results))?);
    written.push(write(dir.join("summary.csv"), &summary_to_csv(&output.summary))?);
    written.push(write(dir.join("curves.csv"), &curves_to_csv(&output.curves))?);
    written.push(write(dir.join("per_joint.csv"), &per_joint_to_csv(&output.per_joint))?);
    if !output.grid.is_empty() {
        written.push(write(dir.join("grid.csv"), &grid_to_csv(&output.grid))?);
    }
    if !output.timing.is_empty() {
        let mut t = String::from("label,seconds_per_epoch\n");
        for r in &output.timing {
            let _ = writeln!(t, "\"{}\",{:.6}", r.label, r.seconds_per_epoch);
        }
        written.push(write(dir.join("timing.csv"), &t)?);
    }
    for (label, traces) in &output.traces {
        written.push(write(dir.join("traces").join(format!("{label}.csv")), &traces_to_csv(traces))?);
    }
    let mean_curves: Vec<&CurveRow> = output.curves.iter().filter(|r| r.seed == "mean").collect();
    let mut labels: Vec<String> = Vec::new();
    for r in &mean_curves {
        let l = format!("{} ({})", r.method, r.domain);
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    for (file, title, pick) in [
        ("curves_mpjpe.svg", "MPJPE per adaptation step", (|r: &CurveRow| r.mpjpe) as fn(&CurveRow) -> f64),
        ("curves_loss.svg", "Inner loss per adaptation step", |r: &CurveRow| r.loss),
    ] {
        let series: Vec<(String, Vec<f64>)> = labels
            .iter()
            .map(|l| {
                let v = mean_curves
                    .iter()
                    .filter(|r| &format!("{} ({})", r.method, r.domain) == l)
                    .map(|r| pick(r))
                    .collect();
                (l.clone(), v)
            })
            .collect();
        let y_label = if file.contains("loss") { "loss" } else { "MPJPE" };
        written.push(write(dir.join(file), &line_chart_svg(title, y_label, &series))?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ExperimentPlan::preset_names() {
            let plan = ExperimentPlan::preset(name).unwrap();
            plan.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(ExperimentPlan::preset("nope").is_err());
    }

    #[test]
    fn plan_preconditions() {
        let p = ExperimentPlan {
            methods: vec![Method::Eft, Method::MetaDual],
            ..ExperimentPlan::default()
        };
        assert!(p.validate().is_err());
        let mut p = ExperimentPlan::preset("ood").unwrap();
        p.test_domain = p.train_domain.clone();
        assert!(p.validate().is_err());
        let mut p = ExperimentPlan::preset("inner-steps").unwrap();
        p.inner_steps_grid = vec![0];
        assert!(p.validate().is_err());
        let mut p = ExperimentPlan::default();
        p.seeds.clear();
        assert!(p.validate().is_err());
    }

    #[test]
    fn plan_round_trips_through_json() {
        let p = ExperimentPlan::preset("lr-grid").unwrap();
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentPlan>(&text).unwrap(), p);
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }

    #[test]
    fn svg_is_well_formed() {
        let svg = line_chart_svg("t <1>", "y", &[("a".into(), vec![1.0, 0.5, 0.25]), ("b".into(), vec![f64::NAN, 1.0])]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("t &lt;1&gt;"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn summary_mean_and_std() {
        let row = |seed, v| ResultRow {
            experiment: "x".into(),
            method: "eft".into(),
            domain: "d".into(),
            seed,
            mpjpe_mean: v,
            pa_mpjpe_mean: v,
            n_samples: 1,
        };
        let s = summarize(&[row(1, 1.0), row(2, 3.0)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mpjpe_mean, 2.0);
        assert!((s[0].mpjpe_std - 2f64.sqrt()).abs() < 1e-15);
    }
}
