//! Finite-difference audit of every loss gradient through the full
//! regressor → body model → camera chain.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::body_model::Skeleton;
use crate::diffcore::{DiffError, Objective, ParamVector};
use crate::losses::{LossConfig, SampleObjective, Supervision, Target3D};
use crate::regressor::{init_params, RegressorSpec};
use crate::synth::{make_dataset, DomainConfig};
use crate::training::pseudo_label;

pub const LOSS_NAMES: [&str; 5] = ["l_2d", "l_3d", "l_train", "l_test", "l_test_u"];

/// Pass threshold on the per-coordinate relative error.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub loss: &'static str,
    pub instance: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_CHECK_TOL
    }
}

/// Five-point stencil, `O(h⁴)` truncation error.
pub fn five_point_gradient<F>(f: F, params: &ParamVector<f64>, h: f64) -> Result<Vec<f64>, DiffError>
where
    F: Fn(&ParamVector<f64>) -> Result<f64, DiffError> + Sync,
{
    (0..params.len())
        .into_par_iter()
        .map(|i| {
            let at = |d: f64| f(&params.perturbed(i, d));
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps exact zeros from dividing by zero.
pub fn per_coordinate_rel_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let floor = 1e-8 * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .enumerate()
        .fold((0.0, 0), |best, (i, e)| if e > best.0 { (e, i) } else { best })
}

/// Checks all five losses on `instances` random (parameters, sample) pairs.
pub fn run_grad_check(seed: u64, instances: usize) -> Result<Vec<GradCheckRow>, DiffError> {
    let skeleton = Skeleton::<f64>::human16();
    let spec = RegressorSpec::for_skeleton(&skeleton).with_hidden(vec![16, 16]);
    let data = make_dataset(&skeleton, &DomainConfig::default(), 1, instances, seed)
        .expect("default domain is valid");
    let mut rows = Vec::new();
    for (i, sample) in data.samples.iter().enumerate() {
        let w: ParamVector<f64> = init_params(&spec, seed.wrapping_add(1000 + i as u64));
        let u: ParamVector<f64> = init_params(&spec, seed.wrapping_add(5000 + i as u64));
        let input = sample.test_input();
        let gt = sample.ground_truth();
        let label = pseudo_label(&spec, &skeleton, &u, input.observation)?;
        let gt_target = Target3D {
            body: gt.body,
            joints: gt.joints,
        };
        let mixed = LossConfig {
            lambda_2d: 0.7,
            lambda_3d: 1.3,
            ..LossConfig::default()
        };
        let only_3d = LossConfig {
            lambda_2d: 0.0,
            lambda_3d: 1.0,
            ..LossConfig::default()
        };
        let plain = LossConfig::default();
        let cases: [(&str, Supervision<'_, f64>, &LossConfig); 5] = [
            ("l_2d", Supervision::TwoD, &plain),
            ("l_3d", Supervision::TwoDThreeD(gt_target), &only_3d),
            ("l_train", Supervision::TwoDThreeD(gt_target), &mixed),
            ("l_test", Supervision::TwoD, &mixed),
            ("l_test_u", Supervision::TwoDThreeD(label.target()), &mixed),
        ];
        for (name, supervision, config) in cases {
            let objective = SampleObjective {
                spec: &spec,
                skeleton: &skeleton,
                observation: input.observation,
                target_j2d: input.target_j2d,
                conf: input.conf,
                supervision,
                config,
            };
            let (_, analytic) = objective.value_and_gradient(&w)?;
            let numeric = five_point_gradient(|p| objective.value(p), &w, 3e-3)?;
            let (max_rel_error, worst_coordinate) =
                per_coordinate_rel_error(analytic.as_slice(), &numeric);
            rows.push(GradCheckRow {
                loss: name,
                instance: i,
                coordinates: w.len(),
                max_rel_error,
                worst_coordinate,
            });
        }
    }
    Ok(rows)
}

pub fn grad_check_to_csv(rows: &[GradCheckRow]) -> String {
    let mut out = String::from("loss,instance,coordinates,max_rel_error,worst_coordinate,passed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6e},{},{}",
            r.loss,
            r.instance,
            r.coordinates,
            r.max_rel_error,
            r.worst_coordinate,
            r.passed()
        );
    }
    out
}
