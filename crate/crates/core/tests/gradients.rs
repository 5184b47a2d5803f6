use madapt::body_model::{
    forward_kinematics, forward_kinematics_backward, forward_kinematics_taped, project,
    project_backward, rodrigues, rodrigues_backward, BodyParams, CameraParams, Skeleton,
};
use madapt::diffcore::{finite_difference_gradient, Objective, ParamVector};
use madapt::losses::{LossConfig, Supervision, SampleObjective, Target3D, XMode};
use madapt::regressor::{init_params, Activation, RegressorSpec};
use madapt::synth::{make_dataset, DomainConfig};
use proptest::prelude::*;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

fn check_objective(activation: Activation, supervision_kind: &str, x_mode: XMode) {
    let sk = Skeleton::human16();
    let spec = RegressorSpec::for_skeleton(&sk)
        .with_hidden(vec![12, 10])
        .with_activation(activation);
    let params: ParamVector<f64> = init_params(&spec, 17);
    let ds = make_dataset(&sk, &DomainConfig::default(), 1, 2, 3).unwrap();
    let sample = &ds.samples[1];
    let input = sample.test_input();
    let gt = sample.ground_truth();
    let config = LossConfig {
        lambda_2d: 1.0,
        lambda_3d: 0.7,
        x_mode,
        confidence_weighting: true,
    };
    let supervision = match supervision_kind {
        "2d" => Supervision::TwoD,
        _ => Supervision::TwoDThreeD(Target3D {
            body: gt.body,
            joints: gt.joints,
        }),
    };
    let objective = SampleObjective {
        spec: &spec,
        skeleton: &sk,
        observation: input.observation,
        target_j2d: input.target_j2d,
        conf: input.conf,
        supervision,
        config: &config,
    };
    let (value, analytic) = objective.value_and_gradient(&params).unwrap();
    assert_eq!(value, objective.value(&params).unwrap());
    let numeric = finite_difference_gradient(|w| objective.value(w), &params, 1e-6).unwrap();
    let err = rel_err(analytic.as_slice(), numeric.as_slice());
    assert!(
        err < 1e-4,
        "{activation:?}/{supervision_kind}/{x_mode:?}: relative error {err:e}"
    );
}

#[test]
fn regressor_chain_gradient_two_d() {
    check_objective(Activation::Tanh, "2d", XMode::Joints3d);
    check_objective(Activation::Relu, "2d", XMode::Joints3d);
}

#[test]
fn regressor_chain_gradient_with_3d_supervision() {
    for x_mode in [XMode::Joints3d, XMode::ParamsIdentity, XMode::Both] {
        check_objective(Activation::Tanh, "3d", x_mode);
    }
    check_objective(Activation::Relu, "3d", XMode::Joints3d);
}

fn rodrigues_fd(v: [f64; 3], g: &[[f64; 3]; 3], h: f64) -> [f64; 3] {
    let f = |v: [f64; 3]| -> f64 {
        let r = rodrigues(v);
        (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| r[i][j] * g[i][j]).sum()
    };
    let mut out = [0.0; 3];
    for k in 0..3 {
        let (mut p, mut m) = (v, v);
        p[k] += h;
        m[k] -= h;
        out[k] = (f(p) - f(m)) / (2.0 * h);
    }
    out
}

#[test]
fn rodrigues_gradient_near_zero_angle() {
    let g = [[0.3, -1.2, 0.5], [0.8, 0.1, -0.7], [-0.4, 0.9, 0.2]];
    for scale in [0.0, 1e-9, 1e-5, 1e-3, 0.5, 3.0] {
        let v = [0.6 * scale, -0.3 * scale, 0.74 * scale];
        let a = rodrigues_backward(v, &g);
        let n = rodrigues_fd(v, &g, 1e-6);
        for k in 0..3 {
            assert!((a[k] - n[k]).abs() < 1e-7, "scale {scale}: {a:?} vs {n:?}");
        }
    }
}

fn body_strategy() -> impl Strategy<Value = (Vec<[f64; 3]>, Vec<f64>)> {
    (
        prop::collection::vec(prop::array::uniform3(-0.8f64..0.8), 16),
        prop::collection::vec(-2.0f64..2.0, 4),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fk_and_projection_gradients_match_finite_differences(
        (theta, beta) in body_strategy(),
        weights in prop::collection::vec(-1.0f64..1.0, 32),
        scale in 0.5f64..1.5,
    ) {
        let sk = Skeleton::human16();
        let body = BodyParams::estimate(theta, beta);
        let cam = CameraParams::new(scale, [0.1, -0.05]).unwrap();
        let d_proj: Vec<[f64; 2]> = weights.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let objective = |b: &BodyParams<f64>| -> f64 {
            let p = project(&forward_kinematics(&sk, b).unwrap(), &cam);
            p.iter().zip(&d_proj).map(|(x, w)| x[0] * w[0] + x[1] * w[1]).sum()
        };
        let tape = forward_kinematics_taped(&sk, &body).unwrap();
        let (d_pos, _) = project_backward(&tape.positions, &cam, &d_proj);
        let (d_theta, d_beta) = forward_kinematics_backward(&sk, &body, &tape, &d_pos);
        let analytic: Vec<f64> = d_theta.as_flattened().iter().chain(&d_beta).copied().collect();
        let flat = body.flatten();
        let h = 1e-6;
        let numeric: Vec<f64> = (0..flat.len())
            .map(|i| {
                let mut p = flat.clone();
                let mut m = flat.clone();
                p[i] += h;
                m[i] -= h;
                let unflat = |v: &[f64]| BodyParams::estimate(
                    v[..48].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
                    v[48..].to_vec(),
                );
                (objective(&unflat(&p)) - objective(&unflat(&m))) / (2.0 * h)
            })
            .collect();
        prop_assert!(rel_err(&analytic, &numeric) < 1e-6);
    }
}
