//! Pretraining, meta-training without an auxiliary network, and dual-network
//! meta-training.
//!
//! The batch arithmetic is written against [`MetaProblem`], so the same code
//! drives the pose regressor ([`RegressionProblem`]) and small hand-checkable
//! fixtures.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body_model::{forward_kinematics, BodyParams, Joints3D, Skeleton};
use crate::diffcore::{
    adam_step, evaluate_with_gradient, sgd_step, AdamConfig, AdamState, DiffError,
    GradientVector, ParamVector,
};
use crate::losses::{LossConfig, SampleObjective, Supervision, Target3D};
use crate::regressor::{init_params, regress, RegressorSpec};
use crate::scalar::Scalar;
use crate::synth::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Inner (test-time) learning rate.
    pub alpha: f64,
    /// Outer learning rate.
    pub beta_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Inner steps per sample during meta-training (`k`).
    pub inner_steps: usize,
    pub optimizer: OuterOptimizer,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-5,
            beta_lr: 1e-4,
            epochs: 10,
            batch_size: 40,
            inner_steps: 1,
            optimizer: OuterOptimizer::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.beta_lr > 0.0) || !self.beta_lr.is_finite() {
            return bad(format!("beta_lr must be positive, got {}", self.beta_lr));
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        self.loss.validate().map_err(TrainError::Config)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.beta_lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Pretrain,
    MetaOnly,
    MetaDual,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Pretrain => "pretrain",
            Regime::MetaOnly => "meta_only",
            Regime::MetaDual => "meta_dual",
        })
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset has {samples} samples, fewer than one batch of {batch_size}")]
    TooSmall { samples: usize, batch_size: usize },
    #[error(
        "{regime} training diverged at epoch {epoch}, batch {batch} \
         (alpha = {alpha:e}, beta_lr = {beta_lr:e}): {source}"
    )]
    Divergence {
        regime: Regime,
        epoch: usize,
        batch: usize,
        alpha: f64,
        beta_lr: f64,
        #[source]
        source: DiffError,
    },
}

/// Per-sample losses of a meta-learning problem.
///
/// `test_loss` is the inner objective (2D only without a label, 2D + 3D against
/// the label otherwise). `train_loss` and `aux_train_loss` are the fully
/// supervised objectives of the main and auxiliary networks.
pub trait MetaProblem<T: Scalar>: Sync {
    type Label: Send + Sync;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn pseudo_label(&self, index: usize, u: &ParamVector<T>) -> Result<Self::Label, DiffError>;

    fn test_loss(
        &self,
        index: usize,
        w: &ParamVector<T>,
        label: Option<&Self::Label>,
    ) -> Result<(T, GradientVector<T>), DiffError>;

    fn train_loss(&self, index: usize, w: &ParamVector<T>) -> Result<(T, GradientVector<T>), DiffError>;

    fn aux_train_loss(
        &self,
        index: usize,
        u: &ParamVector<T>,
    ) -> Result<(T, GradientVector<T>), DiffError> {
        self.train_loss(index, u)
    }
}

/// Pseudo ground truth from the auxiliary network: body parameters and their joints.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel<T> {
    pub body: BodyParams<T>,
    pub joints: Joints3D<T>,
}

impl<T: Scalar> PseudoLabel<T> {
    pub fn target(&self) -> Target3D<'_, T> {
        Target3D {
            body: &self.body,
            joints: &self.joints,
        }
    }
}

pub fn pseudo_label<T: Scalar>(
    spec: &RegressorSpec,
    skeleton: &Skeleton<T>,
    u: &ParamVector<T>,
    observation: &[T],
) -> Result<PseudoLabel<T>, DiffError> {
    let (body, _) = regress(spec, u, observation)?;
    let joints = forward_kinematics(skeleton, &body).map_err(|_| DiffError::NonFinite {
        primitive: crate::diffcore::Primitive::ForwardKinematics,
        index: 0,
    })?;
    Ok(PseudoLabel { body, joints })
}

/// The pose-regression task over a set of samples.
pub struct RegressionProblem<'a, T> {
    pub spec: &'a RegressorSpec,
    pub aux_spec: Option<&'a RegressorSpec>,
    pub skeleton: &'a Skeleton<T>,
    pub samples: &'a [Sample<T>],
    pub loss: &'a LossConfig,
}

impl<T: Scalar> RegressionProblem<'_, T> {
    fn objective<'s>(
        &'s self,
        spec: &'s RegressorSpec,
        index: usize,
        supervision: Supervision<'s, T>,
    ) -> SampleObjective<'s, T> {
        let input = self.samples[index].test_input();
        SampleObjective {
            spec,
            skeleton: self.skeleton,
            observation: input.observation,
            target_j2d: input.target_j2d,
            conf: input.conf,
            supervision,
            config: self.loss,
        }
    }

    fn ground_truth(&self, index: usize) -> Supervision<'_, T> {
        let gt = self.samples[index].ground_truth();
        Supervision::TwoDThreeD(Target3D {
            body: gt.body,
            joints: gt.joints,
        })
    }
}

impl<T: Scalar> MetaProblem<T> for RegressionProblem<'_, T> {
    type Label = PseudoLabel<T>;

    fn len(&self) -> usize {
        self.samples.len()
    }

    fn pseudo_label(&self, index: usize, u: &ParamVector<T>) -> Result<PseudoLabel<T>, DiffError> {
        let spec = self.aux_spec.unwrap_or(self.spec);
        pseudo_label(spec, self.skeleton, u, self.samples[index].test_input().observation)
    }

    fn test_loss(
        &self,
        index: usize,
        w: &ParamVector<T>,
        label: Option<&PseudoLabel<T>>,
    ) -> Result<(T, GradientVector<T>), DiffError> {
        let supervision = match label {
            Some(l) => Supervision::TwoDThreeD(l.target()),
            None => Supervision::TwoD,
        };
        evaluate_with_gradient(&self.objective(self.spec, index, supervision), w)
    }

    fn train_loss(&self, index: usize, w: &ParamVector<T>) -> Result<(T, GradientVector<T>), DiffError> {
        evaluate_with_gradient(&self.objective(self.spec, index, self.ground_truth(index)), w)
    }

    fn aux_train_loss(
        &self,
        index: usize,
        u: &ParamVector<T>,
    ) -> Result<(T, GradientVector<T>), DiffError> {
        let spec = self.aux_spec.unwrap_or(self.spec);
        evaluate_with_gradient(&self.objective(spec, index, self.ground_truth(index)), u)
    }
}

/// One inner step `w′ = w − α∇L` on a single sample.
pub fn inner_step<T: Scalar, P: MetaProblem<T>>(
    problem: &P,
    index: usize,
    w: &ParamVector<T>,
    label: Option<&P::Label>,
    alpha: T,
) -> Result<ParamVector<T>, DiffError> {
    if !(alpha > T::zero()) {
        return Err(DiffError::InvalidHyperparameter(format!(
            "inner learning rate {alpha} must be positive"
        )));
    }
    let (_, g) = problem.test_loss(index, w, label)?;
    sgd_step(w, &g, alpha)
}

/// Batch-mean loss and gradient of one outer step.
#[derive(Debug, Clone)]
pub struct BatchGradients<T> {
    pub main_loss: T,
    pub main_grad: GradientVector<T>,
    pub aux_loss: Option<T>,
    pub aux_grad: Option<GradientVector<T>>,
}

fn mean_reduce<T: Scalar>(
    parts: Vec<(T, GradientVector<T>)>,
    layout_of: &ParamVector<T>,
) -> Result<(T, GradientVector<T>), DiffError> {
    let n = T::lit(parts.len() as f64);
    let mut total = T::zero();
    let mut grad = GradientVector::zeros(Arc::clone(layout_of.layout()));
    for (l, g) in &parts {
        total = total + *l;
        grad.accumulate(g)?;
    }
    grad.scale(T::one() / n);
    Ok((total / n, grad))
}

/// Mean training loss and gradient over `batch` at `w` (one pretraining step).
pub fn pretrain_gradients<T: Scalar, P: MetaProblem<T>>(
    problem: &P,
    batch: &[usize],
    w: &ParamVector<T>,
) -> Result<BatchGradients<T>, DiffError> {
    let parts = batch
        .par_iter()
        .map(|&i| problem.train_loss(i, w))
        .collect::<Result<Vec<_>, _>>()?;
    let (main_loss, main_grad) = mean_reduce(parts, w)?;
    Ok(BatchGradients {
        main_loss,
        main_grad,
        aux_loss: None,
        aux_grad: None,
    })
}

/// First-order meta gradients for one batch.
///
/// For each sample: take the pseudo label from `u` (as data), run `k` inner
/// steps from `w`, and evaluate the training gradient at the adapted weights.
/// The auxiliary gradient is the plain training gradient at `u`.
pub fn meta_gradients<T: Scalar, P: MetaProblem<T>>(
    problem: &P,
    batch: &[usize],
    w: &ParamVector<T>,
    u: Option<&ParamVector<T>>,
    alpha: T,
    inner_steps: usize,
) -> Result<BatchGradients<T>, DiffError> {
    let parts = batch
        .par_iter()
        .map(|&i| {
            let label = u.map(|u| problem.pseudo_label(i, u)).transpose()?;
            let mut adapted = inner_step(problem, i, w, label.as_ref(), alpha)?;
            for _ in 1..inner_steps {
                adapted = inner_step(problem, i, &adapted, label.as_ref(), alpha)?;
            }
            problem.train_loss(i, &adapted)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (main_loss, main_grad) = mean_reduce(parts, w)?;
    let (aux_loss, aux_grad) = match u {
        Some(u) => {
            let parts = batch
                .par_iter()
                .map(|&i| problem.aux_train_loss(i, u))
                .collect::<Result<Vec<_>, _>>()?;
            let (l, g) = mean_reduce(parts, u)?;
            (Some(l), Some(g))
        }
        None => (None, None),
    };
    Ok(BatchGradients {
        main_loss,
        main_grad,
        aux_loss,
        aux_grad,
    })
}

enum OuterState<T> {
    Adam(AdamState<T>),
    Sgd,
}

impl<T: Scalar> OuterState<T> {
    fn new(config: &TrainConfig, params: &ParamVector<T>) -> Self {
        match config.optimizer {
            OuterOptimizer::Adam => OuterState::Adam(AdamState::for_params(params)),
            OuterOptimizer::Sgd => OuterState::Sgd,
        }
    }

    fn apply(
        &mut self,
        config: &TrainConfig,
        params: &ParamVector<T>,
        grad: &GradientVector<T>,
    ) -> Result<ParamVector<T>, DiffError> {
        match self {
            OuterState::Adam(state) => {
                let (next, s) = adam_step(state, params, grad, &config.adam())?;
                *state = s;
                Ok(next)
            }
            OuterState::Sgd => sgd_step(params, grad, T::lit(config.beta_lr)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub batch: usize,
    pub main_loss: f64,
    pub aux_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,batch,main_loss,aux_loss\n");
        for r in &self.rows {
            let aux = r.aux_loss.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{:e},{}", r.epoch, r.batch, r.main_loss, aux);
        }
        out
    }

    pub fn last_main_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.main_loss)
    }

    /// Mean main loss over the final epoch.
    pub fn final_epoch_mean(&self) -> Option<f64> {
        let last = self.rows.last()?.epoch;
        let losses: Vec<f64> = self.rows.iter().filter(|r| r.epoch == last).map(|r| r.main_loss).collect();
        Some(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// True when the final epoch ends above the very first batch loss.
    pub fn regressed(&self) -> bool {
        match (self.rows.first(), self.final_epoch_mean()) {
            (Some(first), Some(last)) => !(last <= first.main_loss),
            _ => false,
        }
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub main: ParamVector<T>,
    pub aux: Option<ParamVector<T>>,
    pub history: TrainHistory,
}

/// Seeds the per-epoch shuffle independently of weight initialization.
fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Initialization seed of the auxiliary network.
pub fn aux_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Generic training loop. `u` present selects dual-network meta-training.
pub fn train_problem<T: Scalar, P: MetaProblem<T>>(
    problem: &P,
    regime: Regime,
    w: ParamVector<T>,
    u: Option<ParamVector<T>>,
    config: &TrainConfig,
) -> Result<Trained<T>, TrainError> {
    config.validate()?;
    let m = config.batch_size;
    if problem.len() < m {
        return Err(TrainError::TooSmall {
            samples: problem.len(),
            batch_size: m,
        });
    }
    let mut w = w;
    let mut u = u;
    let mut w_opt = OuterState::new(config, &w);
    let mut u_opt = u.as_ref().map(|u| OuterState::new(config, u));
    let mut order: Vec<usize> = (0..problem.len()).collect();
    let mut rng = shuffle_rng(config.seed);
    let mut history = TrainHistory::default();
    let alpha = T::lit(config.alpha);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (batch, idx) in order.chunks_exact(m).enumerate() {
            let diverged = |source| TrainError::Divergence {
                regime,
                epoch,
                batch,
                alpha: config.alpha,
                beta_lr: config.beta_lr,
                source,
            };
            let grads = match regime {
                Regime::Pretrain => pretrain_gradients(problem, idx, &w),
                Regime::MetaOnly | Regime::MetaDual => {
                    meta_gradients(problem, idx, &w, u.as_ref(), alpha, config.inner_steps)
                }
            }
            .map_err(diverged)?;
            w = w_opt.apply(config, &w, &grads.main_grad).map_err(diverged)?;
            if let (Some(uv), Some(opt), Some(g)) = (u.as_mut(), u_opt.as_mut(), grads.aux_grad.as_ref()) {
                *uv = opt.apply(config, uv, g).map_err(diverged)?;
            }
            history.rows.push(HistoryRow {
                epoch,
                batch,
                main_loss: grads.main_loss.as_f64(),
                aux_loss: grads.aux_loss.map(|v| v.as_f64()),
            });
        }
    }
    Ok(Trained {
        main: w,
        aux: u,
        history,
    })
}

/// Plain supervised training from `init_params(spec, config.seed)`.
pub fn pretrain<T: Scalar>(
    spec: &RegressorSpec,
    skeleton: &Skeleton<T>,
    samples: &[Sample<T>],
    config: &TrainConfig,
) -> Result<Trained<T>, TrainError> {
    let problem = RegressionProblem {
        spec,
        aux_spec: None,
        skeleton,
        samples,
        loss: &config.loss,
    };
    let w = init_params(spec, config.seed);
    train_problem(&problem, Regime::Pretrain, w, None, config)
}

/// Meta-training; with `aux_spec` the dual-network variant.
pub fn meta_train<T: Scalar>(
    spec: &RegressorSpec,
    aux_spec: Option<&RegressorSpec>,
    skeleton: &Skeleton<T>,
    samples: &[Sample<T>],
    config: &TrainConfig,
) -> Result<Trained<T>, TrainError> {
    let problem = RegressionProblem {
        spec,
        aux_spec,
        skeleton,
        samples,
        loss: &config.loss,
    };
    let w = init_params(spec, config.seed);
    let u = aux_spec.map(|s| init_params(s, aux_seed(config.seed)));
    let regime = if u.is_some() {
        Regime::MetaDual
    } else {
        Regime::MetaOnly
    };
    train_problem(&problem, regime, w, u, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Layout;

    /// Scalar toy: prediction `x·w[0] + w[1]`, 2D loss against `y2`, 3D loss against `y3`.
    struct Toy {
        xs: Vec<(f64, f64, f64)>,
    }

    fn quad(w: &ParamVector<f64>, x: f64, y: f64) -> (f64, GradientVector<f64>) {
        let r = x * w.as_slice()[0] + w.as_slice()[1] - y;
        let g = vec![2.0 * r * x, 2.0 * r];
        (r * r, GradientVector::new(Arc::clone(w.layout()), g).unwrap())
    }

    impl MetaProblem<f64> for Toy {
        type Label = f64;
        fn len(&self) -> usize {
            self.xs.len()
        }
        fn pseudo_label(&self, i: usize, u: &ParamVector<f64>) -> Result<f64, DiffError> {
            Ok(self.xs[i].0 * u.as_slice()[0] + u.as_slice()[1])
        }
        fn test_loss(
            &self,
            i: usize,
            w: &ParamVector<f64>,
            label: Option<&f64>,
        ) -> Result<(f64, GradientVector<f64>), DiffError> {
            let (x, y2, _) = self.xs[i];
            let (l, mut g) = quad(w, x, y2);
            if let Some(p) = label {
                let (l3, g3) = quad(w, x, *p);
                g.accumulate(&g3)?;
                return Ok((l + l3, g));
            }
            Ok((l, g))
        }
        fn train_loss(&self, i: usize, w: &ParamVector<f64>) -> Result<(f64, GradientVector<f64>), DiffError> {
            let (x, y2, y3) = self.xs[i];
            let (l, mut g) = quad(w, x, y2);
            let (l3, g3) = quad(w, x, y3);
            g.accumulate(&g3)?;
            Ok((l + l3, g))
        }
    }

    fn toy_params(a: f64, b: f64) -> ParamVector<f64> {
        ParamVector::new(Arc::new(Layout::flat(2)), vec![a, b]).unwrap()
    }

    #[test]
    fn hand_unrolled_dual_update_on_toy() {
        let toy = Toy {
            xs: vec![(1.0, 2.0, 2.5), (-0.5, 0.3, 0.1)],
        };
        let (w0, u0) = ([0.2, -0.1], [0.4, 0.05]);
        let alpha = 0.1;
        let lr = 0.05;

        // by hand
        let mut gw = [0.0; 2];
        let mut gu = [0.0; 2];
        let mut lw = 0.0;
        let mut lu = 0.0;
        for &(x, y2, y3) in &toy.xs {
            let p = x * u0[0] + u0[1];
            let r2 = x * w0[0] + w0[1] - y2;
            let r3 = x * w0[0] + w0[1] - p;
            let gi = [2.0 * (r2 + r3) * x, 2.0 * (r2 + r3)];
            let wp = [w0[0] - alpha * gi[0], w0[1] - alpha * gi[1]];
            let a2 = x * wp[0] + wp[1] - y2;
            let a3 = x * wp[0] + wp[1] - y3;
            lw += a2 * a2 + a3 * a3;
            gw[0] += 2.0 * (a2 + a3) * x;
            gw[1] += 2.0 * (a2 + a3);
            let b2 = x * u0[0] + u0[1] - y2;
            let b3 = x * u0[0] + u0[1] - y3;
            lu += b2 * b2 + b3 * b3;
            gu[0] += 2.0 * (b2 + b3) * x;
            gu[1] += 2.0 * (b2 + b3);
        }
        let n = toy.xs.len() as f64;
        let w1 = [w0[0] - lr * gw[0] / n, w0[1] - lr * gw[1] / n];
        let u1 = [u0[0] - lr * gu[0] / n, u0[1] - lr * gu[1] / n];

        let config = TrainConfig {
            alpha,
            beta_lr: lr,
            epochs: 1,
            batch_size: 2,
            optimizer: OuterOptimizer::Sgd,
            ..TrainConfig::default()
        };
        let out = train_problem(
            &toy,
            Regime::MetaDual,
            toy_params(w0[0], w0[1]),
            Some(toy_params(u0[0], u0[1])),
            &config,
        )
        .unwrap();
        let w = out.main.as_slice();
        let u = out.aux.as_ref().unwrap().as_slice();
        for k in 0..2 {
            assert!((w[k] - w1[k]).abs() < 1e-15, "{w:?} vs {w1:?}");
            assert!((u[k] - u1[k]).abs() < 1e-15, "{u:?} vs {u1:?}");
        }
        assert!((out.history.rows[0].main_loss - lw / n).abs() < 1e-15);
        assert!((out.history.rows[0].aux_loss.unwrap() - lu / n).abs() < 1e-15);
    }

    #[test]
    fn inner_step_requires_positive_alpha() {
        let toy = Toy {
            xs: vec![(1.0, 2.0, 2.0)],
        };
        assert!(inner_step(&toy, 0, &toy_params(0.0, 0.0), None, 0.0).is_err());
    }

    #[test]
    fn partial_batch_is_dropped() {
        let toy = Toy {
            xs: vec![(1.0, 1.0, 1.0); 5],
        };
        let config = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train_problem(&toy, Regime::Pretrain, toy_params(0.0, 0.0), None, &config).unwrap();
        assert_eq!(out.history.rows.len(), 4);
        let small = TrainConfig {
            batch_size: 6,
            ..config
        };
        assert!(matches!(
            train_problem(&toy, Regime::Pretrain, toy_params(0.0, 0.0), None, &small),
            Err(TrainError::TooSmall { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { alpha: 0.0, ..TrainConfig::default() },
            TrainConfig { beta_lr: -1.0, ..TrainConfig::default() },
            TrainConfig { inner_steps: 0, ..TrainConfig::default() },
            TrainConfig { adam_beta1: 1.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn history_csv_layout() {
        let h = TrainHistory {
            rows: vec![
                HistoryRow { epoch: 0, batch: 0, main_loss: 0.5, aux_loss: None },
                HistoryRow { epoch: 0, batch: 1, main_loss: 0.25, aux_loss: Some(1.0) },
            ],
        };
        assert_eq!(h.to_csv(), "epoch,batch,main_loss,aux_loss\n0,0,5e-1,\n0,1,2.5e-1,1e0\n");
    }
}
