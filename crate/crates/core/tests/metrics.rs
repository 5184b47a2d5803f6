use madapt::metrics::{mpjpe, pa_mpjpe, procrustes_align, SimilarityTransform};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Cloud = Vec<[f64; 3]>;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Cloud {
    (0..n)
        .map(|_| [0; 3].map(|_| rng.sample::<f64, _>(StandardNormal) * 0.3))
        .collect()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let q = nalgebra::Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix()
}

fn transform(points: &[[f64; 3]], r: &Rotation3<f64>, s: f64, t: Vector3<f64>) -> Cloud {
    points
        .iter()
        .map(|p| (r * Vector3::from(*p) * s + t).into())
        .collect()
}

fn residual(points: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    points
        .iter()
        .zip(gt)
        .map(|(p, g)| (Vector3::from(*p) - Vector3::from(*g)).norm_squared())
        .sum()
}

/// SVD-based similarity alignment with the reflection correction.
fn umeyama(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> (Matrix3<f64>, f64, Vector3<f64>) {
    let n = pred.len() as f64;
    let mp = pred.iter().map(|p| Vector3::from(*p)).sum::<Vector3<f64>>() / n;
    let mg = gt.iter().map(|p| Vector3::from(*p)).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    let mut var = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = (Vector3::from(*p) - mp, Vector3::from(*g) - mg);
        h += b * a.transpose();
        var += a.norm_squared();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let s = (svd.singular_values.component_mul(&d.diagonal())).sum() / var;
    (r, s, mg - r * mp * s)
}

fn apply(tf: &SimilarityTransform<f64>, points: &[[f64; 3]]) -> Cloud {
    tf.apply_all(points)
}

#[test]
fn agrees_with_svd_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [3, 4, 16, 40] {
        for _ in 0..100 {
            let (pred, gt) = (cloud(&mut rng, n), cloud(&mut rng, n));
            let tf = procrustes_align(&pred, &gt).unwrap();
            let (r, s, t) = umeyama(&pred, &gt);
            let reference: Cloud = pred.iter().map(|p| (r * Vector3::from(*p) * s + t).into()).collect();
            let (a, b) = (residual(&apply(&tf, &pred), &gt), residual(&reference, &gt));
            assert!((a - b).abs() < 1e-10 * b.max(1.0), "n={n}: {a} vs {b}");
            assert!((tf.scale - s).abs() < 1e-8 * s.max(1.0));
            let rot = Matrix3::from_fn(|i, j| tf.rotation[i][j]);
            assert!((rot.determinant() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn residual_never_beaten_by_random_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (pred, gt) = (cloud(&mut rng, 16), cloud(&mut rng, 16));
    let tf = procrustes_align(&pred, &gt).unwrap();
    let best = residual(&apply(&tf, &pred), &gt);
    let base = Rotation3::from_matrix_unchecked(Matrix3::from_fn(|i, j| tf.rotation[i][j]));
    let t0 = Vector3::from(tf.translation);
    for k in 0..10_000 {
        let candidate = if k % 2 == 0 {
            let r = random_rotation(&mut rng);
            let s = rng.random_range(0.1..3.0);
            let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            transform(&pred, &r, s, t)
        } else {
            let eps = 10f64.powf(rng.random_range(-6.0..-1.0));
            let axis = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * eps;
            let r = Rotation3::new(axis) * base;
            let s = tf.scale * (1.0 + eps * rng.random_range(-1.0..1.0));
            let t = t0 + Vector3::new(rng.random_range(-eps..eps), rng.random_range(-eps..eps), rng.random_range(-eps..eps));
            transform(&pred, &r, s, t)
        };
        assert!(residual(&candidate, &gt) >= best - 1e-9, "candidate {k} beats alignment");
    }
}

#[test]
fn mirrored_target_still_gets_a_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pred = cloud(&mut rng, 16);
    let gt: Cloud = pred.iter().map(|p| [-p[0], p[1], p[2]]).collect();
    let tf = procrustes_align(&pred, &gt).unwrap();
    let rot = Matrix3::from_fn(|i, j| tf.rotation[i][j]);
    assert!((rot.determinant() - 1.0).abs() < 1e-12);
    assert!(pa_mpjpe(&pred, &gt).unwrap() > 1e-3);
}

fn clouds() -> impl Strategy<Value = (Cloud, Cloud, u64)> {
    (
        prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 16),
        prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 16),
        any::<u64>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pa_mpjpe_is_invariant_to_similarity_of_prediction((pred, gt, seed) in clouds()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_rotation(&mut rng);
        let s = rng.random_range(0.2..5.0);
        let t = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let moved = transform(&pred, &r, s, t);
        let (a, b) = (pa_mpjpe(&moved, &gt).unwrap(), pa_mpjpe(&pred, &gt).unwrap());
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn pa_mpjpe_of_similar_clouds_is_zero((pred, _gt, seed) in clouds()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_rotation(&mut rng);
        let moved = transform(&pred, &r, 1.7, Vector3::new(0.3, -2.0, 1.0));
        prop_assert!(pa_mpjpe(&moved, &pred).unwrap() < 1e-9);
    }

    #[test]
    fn mpjpe_ignores_global_translation((pred, gt, _s) in clouds(), dx in -5.0f64..5.0) {
        let shifted: Cloud = pred.iter().map(|p| [p[0] + dx, p[1] - dx, p[2] + 0.5 * dx]).collect();
        let (a, b) = (mpjpe(&shifted, &gt).unwrap(), mpjpe(&pred, &gt).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn metrics_are_zero_on_identical_input((pred, _gt, _s) in clouds()) {
        prop_assert_eq!(mpjpe(&pred, &pred).unwrap(), 0.0);
        prop_assert!(pa_mpjpe(&pred, &pred).unwrap() < 1e-12);
    }
}
