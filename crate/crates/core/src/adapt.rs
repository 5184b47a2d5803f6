//! Per-sample test-time optimization with early stopping and step traces.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body_model::{BodyParams, CameraParams, Skeleton};
use crate::diffcore::{evaluate_with_gradient, sgd_step, DiffError, Objective, ParamVector};
use crate::losses::{LossConfig, SampleObjective, Supervision};
use crate::regressor::{regress, RegressorSpec};
use crate::scalar::Scalar;
use crate::synth::TestInput;
use crate::training::{pseudo_label, PseudoLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    #[default]
    Eft,
    Dual,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub max_steps: usize,
    pub alpha: f64,
    pub early_stop_rel_tol: f64,
    pub mode: AdaptMode,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            max_steps: 14,
            alpha: 1e-5,
            early_stop_rel_tol: 1e-3,
            mode: AdaptMode::Eft,
        }
    }
}

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid adaptation config: {0}")]
    Config(String),
    #[error("adaptation mode {actual:?} used where {expected:?} is required")]
    Mode { expected: AdaptMode, actual: AdaptMode },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(AdaptError::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.early_stop_rel_tol > 0.0) {
            return Err(AdaptError::Config(format!(
                "early_stop_rel_tol must be positive, got {}",
                self.early_stop_rel_tol
            )));
        }
        Ok(())
    }

    fn effective_steps(&self) -> usize {
        match self.mode {
            AdaptMode::None => 0,
            _ => self.max_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mpjpe: Option<f64>,
    pub pa_mpjpe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrace {
    pub sample_id: usize,
    /// `records[0]` is the state before any update.
    pub records: Vec<StepRecord>,
    pub stopped_early: bool,
    pub steps_executed: usize,
    /// A non-finite loss or update ended the run; the last finite parameters were returned.
    pub diverged: bool,
}

impl AdaptationTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_record(&self) -> &StepRecord {
        self.records.last().expect("trace always holds step 0")
    }

    /// Record at `step`, holding the final state after the run ended.
    pub fn at_step(&self, step: usize) -> &StepRecord {
        self.records.get(step).unwrap_or_else(|| self.final_record())
    }
}

pub const TRACE_CSV_HEADER: &str = "sample_id,step,loss,mpjpe,pa_mpjpe,stopped_early";

pub fn traces_to_csv(traces: &[AdaptationTrace]) -> String {
    let mut out = format!("{TRACE_CSV_HEADER}\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for t in traces {
        for r in &t.records {
            let _ = writeln!(
                out,
                "{},{},{:e},{},{},{}",
                t.sample_id,
                r.step,
                r.loss,
                opt(r.mpjpe),
                opt(r.pa_mpjpe),
                t.stopped_early
            );
        }
    }
    out
}

/// Relative change used by the early-stop rule.
pub fn relative_change(current: f64, previous: f64) -> f64 {
    (current - previous).abs() / previous.max(1e-12)
}

/// Diagnostic hook evaluated on the parameters of every recorded step.
pub type Observer<'a, T> = &'a (dyn Fn(&ParamVector<T>) -> Option<(f64, f64)> + Sync);

/// Gradient descent on `objective` from `w_start`.
///
/// At iteration `i ≥ 2` the run stops early when the last two recorded losses
/// satisfy `|Lᵢ₋₁ − Lᵢ₋₂| / max(Lᵢ₋₂, 1e-12) < tol`; otherwise it takes the step
/// and records the loss at the new parameters.
pub fn adapt_objective<T: Scalar, O: Objective<T> + ?Sized>(
    objective: &O,
    w_start: &ParamVector<T>,
    cfg: &AdaptConfig,
    observer: Option<Observer<'_, T>>,
) -> Result<(ParamVector<T>, AdaptationTrace), AdaptError> {
    cfg.validate()?;
    let m = cfg.effective_steps();
    let alpha = T::lit(cfg.alpha);
    let record = |step: usize, loss: T, w: &ParamVector<T>| {
        let metrics = observer.and_then(|f| f(w));
        StepRecord {
            step,
            loss: loss.as_f64(),
            mpjpe: metrics.map(|m| m.0),
            pa_mpjpe: metrics.map(|m| m.1),
        }
    };
    let mut trace = AdaptationTrace {
        sample_id: 0,
        records: Vec::with_capacity(m + 1),
        stopped_early: false,
        steps_executed: 0,
        diverged: false,
    };
    let mut w = w_start.clone();
    if m == 0 {
        let loss = objective.value(&w)?;
        trace.records.push(record(0, loss, &w));
        return Ok((w, trace));
    }
    let (loss0, mut grad) = evaluate_with_gradient(objective, &w)?;
    trace.records.push(record(0, loss0, &w));

    for i in 1..=m {
        if i >= 2 {
            let n = trace.records.len();
            let (cur, prev) = (trace.records[n - 1].loss, trace.records[n - 2].loss);
            if relative_change(cur, prev) < cfg.early_stop_rel_tol {
                trace.stopped_early = true;
                break;
            }
        }
        let next = match sgd_step(&w, &grad, alpha) {
            Ok(next) => next,
            Err(_) => {
                trace.diverged = true;
                break;
            }
        };
        let evaluated = if i < m {
            evaluate_with_gradient(objective, &next).map(|(l, g)| (l, Some(g)))
        } else {
            objective.value(&next).map(|l| (l, None))
        };
        match evaluated {
            Ok((loss, g)) if loss.is_finite() => {
                w = next;
                trace.steps_executed = i;
                trace.records.push(record(i, loss, &w));
                if let Some(g) = g {
                    grad = g;
                }
            }
            _ => {
                trace.diverged = true;
                break;
            }
        }
    }
    Ok((w, trace))
}

/// Test-time fitting of the 2D reprojection loss alone.
#[allow(clippy::too_many_arguments)]
pub fn adapt_eft<T: Scalar>(
    spec: &RegressorSpec,
    skeleton: &Skeleton<T>,
    w_start: &ParamVector<T>,
    input: TestInput<'_, T>,
    cfg: &AdaptConfig,
    loss: &LossConfig,
    observer: Option<Observer<'_, T>>,
) -> Result<(ParamVector<T>, AdaptationTrace), AdaptError> {
    if cfg.mode == AdaptMode::Dual {
        return Err(AdaptError::Mode {
            expected: AdaptMode::Eft,
            actual: cfg.mode,
        });
    }
    let objective = SampleObjective {
        spec,
        skeleton,
        observation: input.observation,
        target_j2d: input.target_j2d,
        conf: input.conf,
        supervision: Supervision::TwoD,
        config: loss,
    };
    adapt_objective(&objective, w_start, cfg, observer)
}

/// Test-time fitting against a pseudo label from the frozen auxiliary network.
///
/// The label depends only on `u_meta` and the fixed input, so it is computed once.
#[allow(clippy::too_many_arguments)]
pub fn adapt_dual<T: Scalar>(
    spec: &RegressorSpec,
    aux_spec: &RegressorSpec,
    skeleton: &Skeleton<T>,
    w_meta: &ParamVector<T>,
    u_meta: &ParamVector<T>,
    input: TestInput<'_, T>,
    cfg: &AdaptConfig,
    loss: &LossConfig,
    observer: Option<Observer<'_, T>>,
) -> Result<(ParamVector<T>, AdaptationTrace), AdaptError> {
    if cfg.mode == AdaptMode::Eft {
        return Err(AdaptError::Mode {
            expected: AdaptMode::Dual,
            actual: cfg.mode,
        });
    }
    let label = pseudo_label(aux_spec, skeleton, u_meta, input.observation)?;
    adapt_with_label(spec, skeleton, w_meta, &label, input, cfg, loss, observer)
}

/// Dual-mode adaptation with an explicit pseudo label.
#[allow(clippy::too_many_arguments)]
pub fn adapt_with_label<T: Scalar>(
    spec: &RegressorSpec,
    skeleton: &Skeleton<T>,
    w_start: &ParamVector<T>,
    label: &PseudoLabel<T>,
    input: TestInput<'_, T>,
    cfg: &AdaptConfig,
    loss: &LossConfig,
    observer: Option<Observer<'_, T>>,
) -> Result<(ParamVector<T>, AdaptationTrace), AdaptError> {
    let objective = SampleObjective {
        spec,
        skeleton,
        observation: input.observation,
        target_j2d: input.target_j2d,
        conf: input.conf,
        supervision: Supervision::TwoDThreeD(label.target()),
        config: loss,
    };
    adapt_objective(&objective, w_start, cfg, observer)
}

/// Final prediction of an adapted network.
pub fn infer<T: Scalar>(
    spec: &RegressorSpec,
    w: &ParamVector<T>,
    input: TestInput<'_, T>,
) -> Result<(BodyParams<T>, CameraParams<T>), DiffError> {
    regress(spec, w, input.observation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::GradientVector;
    use std::sync::Arc;

    struct Constant;
    impl Objective<f64> for Constant {
        fn value(&self, _: &ParamVector<f64>) -> Result<f64, DiffError> {
            Ok(2.5)
        }
        fn value_and_gradient(
            &self,
            p: &ParamVector<f64>,
        ) -> Result<(f64, GradientVector<f64>), DiffError> {
            let g = vec![0.3; p.len()];
            Ok((2.5, GradientVector::new(Arc::clone(p.layout()), g)?))
        }
    }

    #[test]
    fn zero_steps_keeps_params() {
        let p = ParamVector::from_slice(&[1.0, 2.0]);
        let cfg = AdaptConfig {
            max_steps: 0,
            ..AdaptConfig::default()
        };
        let (w, t) = adapt_objective(&Constant, &p, &cfg, None).unwrap();
        assert_eq!(w, p);
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.steps_executed, 0);
        assert!(!t.stopped_early);
    }

    #[test]
    fn none_mode_runs_no_steps() {
        let p = ParamVector::from_slice(&[1.0]);
        let cfg = AdaptConfig {
            mode: AdaptMode::None,
            ..AdaptConfig::default()
        };
        let (w, t) = adapt_objective(&Constant, &p, &cfg, None).unwrap();
        assert_eq!((w, t.records.len()), (p, 1));
    }

    #[test]
    fn trace_csv_layout() {
        let t = AdaptationTrace {
            sample_id: 3,
            records: vec![StepRecord {
                step: 0,
                loss: 0.5,
                mpjpe: Some(0.25),
                pa_mpjpe: None,
            }],
            stopped_early: false,
            steps_executed: 0,
            diverged: false,
        };
        assert_eq!(traces_to_csv(&[t]), format!("{TRACE_CSV_HEADER}\n3,0,5e-1,2.5e-1,,false\n"));
    }

    #[test]
    fn config_validation() {
        assert!(AdaptConfig::default().validate().is_ok());
        let bad = AdaptConfig {
            early_stop_rel_tol: 0.0,
            ..AdaptConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
