use madapt::body_model::{forward_kinematics, project, BodyParams, CameraParams, Skeleton};
use madapt::losses::{loss_2d, loss_3d, loss_test, loss_test_u, loss_train, LossConfig, Prediction, XMode};
use madapt::synth::{make_dataset, DomainConfig};
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Forward kinematics rebuilt from nalgebra rotations, walking each joint's
/// ancestor chain from scratch.
fn fk_oracle(sk: &Skeleton<f64>, body: &BodyParams<f64>) -> Vec<Vector3<f64>> {
    let mult = sk.length_multipliers(&body.beta);
    let rot = |j: usize| Rotation3::from_scaled_axis(Vector3::from(body.theta[j]));
    (0..sk.joint_count())
        .map(|j| {
            let mut chain = vec![j];
            while let Some(p) = sk.parents()[*chain.last().unwrap()] {
                chain.push(p);
            }
            chain.reverse();
            let mut pos = Vector3::zeros();
            let mut frame = rot(chain[0]);
            for &k in &chain[1..] {
                pos += frame * (Vector3::from(sk.rest_offsets()[k]) * mult[k]);
                frame *= rot(k);
            }
            pos
        })
        .collect()
}

fn random_body(rng: &mut ChaCha8Rng, sk: &Skeleton<f64>, scale: f64) -> BodyParams<f64> {
    let theta = (0..sk.joint_count())
        .map(|_| [0; 3].map(|_| rng.random_range(-scale..scale)))
        .collect();
    let beta = (0..sk.shape_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
    BodyParams::estimate(theta, beta)
}

#[test]
fn forward_kinematics_matches_independent_oracle() {
    let sk = Skeleton::human16();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let body = random_body(&mut rng, &sk, 1.5);
        let ours = forward_kinematics(&sk, &body).unwrap();
        for (a, b) in ours.iter().zip(fk_oracle(&sk, &body)) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-12, "{a:?} vs {b:?}");
            }
        }
    }
}

fn prediction(rng: &mut ChaCha8Rng, sk: &Skeleton<f64>) -> Prediction<f64> {
    Prediction {
        body: random_body(rng, sk, 0.6),
        camera: CameraParams::new(rng.random_range(0.6..1.4), [rng.random_range(-0.2..0.2), 0.05]).unwrap(),
    }
}

#[test]
fn two_d_loss_matches_direct_formula() {
    let sk = Skeleton::human16();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let pred = prediction(&mut rng, &sk);
        let target: Vec<[f64; 2]> = (0..16).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let conf: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
        let joints = fk_oracle(&sk, &pred.body);
        let expected: f64 = joints
            .iter()
            .zip(&target)
            .zip(&conf)
            .map(|((p, t), c)| {
                let u = pred.camera.scale * p.x + pred.camera.trans[0] - t[0];
                let v = pred.camera.scale * p.y + pred.camera.trans[1] - t[1];
                c * (u * u + v * v)
            })
            .sum::<f64>()
            / 16.0;
        let got = loss_2d(&sk, &pred, &target, &conf).unwrap();
        assert!((got - expected).abs() <= 1e-14 * expected.max(1.0));
        assert_eq!(loss_test(&sk, &pred, &target, &conf).unwrap(), got);
    }
}

#[test]
fn train_loss_recombines_its_terms() {
    let sk = Skeleton::human16();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for x_mode in [XMode::Joints3d, XMode::ParamsIdentity, XMode::Both] {
        for _ in 0..30 {
            let pred = prediction(&mut rng, &sk);
            let gt = random_body(&mut rng, &sk, 0.6);
            let target: Vec<[f64; 2]> = (0..16).map(|_| [rng.random_range(-1.0..1.0), 0.1]).collect();
            let conf: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
            let (l2, l3) = (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
            for confidence_weighting in [true, false] {
                let config = LossConfig {
                    lambda_2d: l2,
                    lambda_3d: l3,
                    x_mode,
                    confidence_weighting,
                };
                let ones = vec![1.0; 16];
                let w = if confidence_weighting { &conf } else { &ones };
                let expected = l2 * loss_2d(&sk, &pred, &target, w).unwrap() + l3 * loss_3d(&sk, &pred.body, &gt, &config).unwrap();
                let got = loss_train(&sk, &pred, &gt, &target, &conf, &config).unwrap();
                assert!((got - expected).abs() <= 1e-14 * expected.max(1.0), "{got} vs {expected}");
            }
        }
    }
}

#[test]
fn three_d_loss_in_joint_mode_matches_oracle() {
    let sk = Skeleton::human16();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let config = LossConfig::default();
    for _ in 0..50 {
        let (a, b) = (random_body(&mut rng, &sk, 1.0), random_body(&mut rng, &sk, 1.0));
        let (pa, pb) = (fk_oracle(&sk, &a), fk_oracle(&sk, &b));
        let expected: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / 16.0;
        let got = loss_3d(&sk, &a, &b, &config).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected.max(1.0));
    }
}

#[test]
fn pseudo_label_loss_equals_train_loss_under_ground_truth_substitution() {
    let sk = Skeleton::human16();
    let ds = make_dataset(&sk, &DomainConfig::default(), 1, 100, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let config = LossConfig {
        lambda_2d: 0.4,
        lambda_3d: 1.7,
        ..LossConfig::default()
    };
    for s in &ds.samples {
        let pred = prediction(&mut rng, &sk);
        let input = s.test_input();
        let gt = s.ground_truth().body;
        let train = loss_train(&sk, &pred, gt, input.target_j2d, input.conf, &config).unwrap();
        let test_u = loss_test_u(&sk, &pred, gt, input.target_j2d, input.conf, &config).unwrap();
        assert!((train - test_u).abs() <= 1e-15 * train.abs().max(f64::MIN_POSITIVE));
    }
}

#[test]
fn projection_is_scale_then_shift() {
    let cam = CameraParams::new(2.0, [0.5, -1.0]).unwrap();
    assert_eq!(project(&[[1.0, 2.0, 9.0]], &cam), vec![[2.5, 3.0]]);
}

proptest! {
    #[test]
    fn losses_are_non_negative_and_zero_at_target(seed in 0u64..1000) {
        let sk = Skeleton::human16();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = prediction(&mut rng, &sk);
        let joints = forward_kinematics(&sk, &pred.body).unwrap();
        let exact = project(&joints, &pred.camera);
        let conf = vec![1.0; 16];
        prop_assert!(loss_2d(&sk, &pred, &exact, &conf).unwrap() < 1e-28);
        let other = random_body(&mut rng, &sk, 0.6);
        let config = LossConfig { x_mode: XMode::Both, ..LossConfig::default() };
        prop_assert!(loss_3d(&sk, &pred.body, &other, &config).unwrap() >= 0.0);
        prop_assert_eq!(loss_3d(&sk, &pred.body, &pred.body, &config).unwrap(), 0.0);
    }
}
