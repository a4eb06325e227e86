use nalgebra::{Rotation3, Unit, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skelkit::body_model::HINGE_LIMITS;
use skelkit::rotations::axis_angle;
use skelkit::{
    decompose_against_limits, make_toy_model, mpjpe, mpvpe, pa_mpjpe, pa_mpvpe, pck, procrustes_align, violation_audit,
    JointLimitSpec, KeypointSet2D, ModelDefinition, PoseBatch, PoseVector, RotMat, SimilarityTransform, ToyModelSpec,
};

fn toy() -> &'static ModelDefinition {
    static MODEL: std::sync::OnceLock<ModelDefinition> = std::sync::OnceLock::new();
    MODEL.get_or_init(|| make_toy_model(&ToyModelSpec::default()))
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.random_range(-3.1..3.1))
}

#[test]
fn procrustes_is_never_beaten_by_random_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..50 {
        let src = random_points(&mut rng, 5);
        let dst = random_points(&mut rng, 5);
        let best = procrustes_align(&src, &dst).unwrap().residual(&src, &dst);
        assert!(best <= SimilarityTransform::identity().residual(&src, &dst));
        for _ in 0..10_000 {
            let t = SimilarityTransform {
                scale: rng.random_range(0.05..3.0),
                rotation: RotMat::from_matrix(*random_rotation(&mut rng).matrix()).unwrap(),
                translation: Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
            };
            assert!(best <= t.residual(&src, &dst) + 1e-12);
        }
    }
}

#[test]
fn procrustes_recovers_planted_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..1_000 {
        let src = random_points(&mut rng, 8);
        let r = random_rotation(&mut rng);
        let s = rng.random_range(0.1..10.0);
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        let dst: Vec<_> = src.iter().map(|p| r * p * s + t).collect();
        let fit = procrustes_align(&src, &dst).unwrap();
        assert!(fit.residual(&src, &dst) < 1e-9);
        assert!((fit.scale - s).abs() < 1e-9 * s);
        assert!(pa_mpjpe(&src, &dst).unwrap() < 1e-9);
        assert!(pa_mpvpe(&src, &dst).unwrap() < 1e-9);
    }
}

#[test]
fn mpjpe_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let a = random_points(&mut rng, 17);
    let b = random_points(&mut rng, 17);
    let direct: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt())
        .sum::<f64>()
        / 17.0;
    assert!((mpjpe(&a, &b, None).unwrap() - direct).abs() < 1e-12);
    assert!((mpvpe(&a, &b, None).unwrap() - direct).abs() < 1e-12);
    let offset: Vec<_> = b.iter().map(|p| p + Vector3::new(0.5, 0.0, 0.0)).collect();
    assert!((mpvpe(&offset, &b, None).unwrap() - 0.5).abs() < 1e-12);
    assert!(mpvpe(&offset, &b, Some((Vector3::new(0.5, 0.0, 0.0), Vector3::zeros()))).unwrap() < 1e-12);
}

#[test]
fn hinge_violation_fixture() {
    let m = toy();
    let knee = m.dof_range(m.joint_index("left_knee").unwrap()).start;
    let poses: Vec<PoseVector> = [-15.0f64, 10.0, 140.0]
        .iter()
        .map(|deg| {
            let mut q = vec![0.0; m.pose_dim()];
            // Keep every other bounded DoF inside its range.
            for (i, (_, d)) in m.dofs().enumerate() {
                if let (Some(l), Some(u)) = (d.lower, d.upper) {
                    q[i] = 0.5 * (l + u);
                }
            }
            q[knee] = deg.to_radians();
            PoseVector(q)
        })
        .collect();
    let names = vec!["left_knee".to_string()];
    let table = violation_audit(&PoseBatch::Dofs(poses.clone()), m, &[10.0, 20.0, 30.0], Some(&names)).unwrap();
    assert_eq!(table.frequencies[0], vec![1.0 / 3.0, 0.0, 0.0]);
    let table = violation_audit(&PoseBatch::Dofs(poses), m, &[0.0, 4.0, 5.0, 10.0], Some(&names)).unwrap();
    assert_eq!(table.frequencies[0], vec![2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
}

#[test]
fn rotation_batches_use_the_decomposition() {
    let m = toy();
    let knee = m.joint_index("left_knee").unwrap();
    let axis = m.document().joints[knee].dofs[0].axis();
    let samples: Vec<Vec<RotMat>> = [-15.0f64, 10.0, 140.0]
        .iter()
        .map(|deg| {
            let mut rots = vec![RotMat::identity(); m.joint_count()];
            rots[knee] = RotMat::from_matrix(axis_angle(&axis, deg.to_radians())).unwrap();
            rots
        })
        .collect();
    let names = vec!["left_knee".to_string()];
    let table = violation_audit(&PoseBatch::Rotations(samples), m, &[10.0], Some(&names)).unwrap();
    assert_eq!(table.frequencies[0], vec![1.0 / 3.0]);
}

#[test]
fn poses_within_limits_give_an_empty_table() {
    let m = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let poses: Vec<PoseVector> = (0..50)
        .map(|_| skelkit::synth::sample_pose(m, &Default::default(), &mut rng))
        .collect();
    let table = violation_audit(&PoseBatch::Dofs(poses), m, &[0.0, 10.0], None).unwrap();
    assert!(table.frequencies.iter().flatten().all(|f| *f == 0.0));
}

#[test]
fn off_axis_twist_is_a_violation() {
    let spec = JointLimitSpec {
        name: "knee".into(),
        axes: vec![Vector3::x()],
        limits: vec![(Some(HINGE_LIMITS.0), Some(HINGE_LIMITS.1))],
    };
    for angle in [0.1, 0.5, 1.2] {
        for axis in [Vector3::y(), Vector3::z(), Vector3::new(0.0, 1.0, 1.0).normalize()] {
            let r = RotMat::from_matrix(axis_angle(&axis, angle)).unwrap();
            let v = decompose_against_limits(&r, &spec).unwrap();
            assert!((v.off_axis - angle).abs() < 1e-9);
            assert!((v.magnitude - angle).abs() < 1e-9);
        }
    }
}

#[test]
fn pck_fixture() {
    let gt = KeypointSet2D::visible(vec![Vector2::zeros(); 4]);
    let pred = vec![
        Vector2::new(1.0, 0.0),
        Vector2::new(0.0, 4.0),
        Vector2::new(6.0, 0.0),
        Vector2::new(0.0, -20.0),
    ];
    assert_eq!(pck(&pred, &gt, 0.05, 100.0).unwrap(), 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pa_mpjpe_never_exceeds_mpjpe(seed in any::<u64>(), n in 3usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_points(&mut rng, n);
        let b = random_points(&mut rng, n);
        prop_assert!(pa_mpjpe(&a, &b).unwrap() <= mpjpe(&a, &b, None).unwrap() + 1e-12);
    }

    #[test]
    fn distances_ignore_consistent_permutations(seed in any::<u64>(), n in 3usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_points(&mut rng, n);
        let b = random_points(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pa: Vec<_> = perm.iter().map(|&i| a[i]).collect();
        let pb: Vec<_> = perm.iter().map(|&i| b[i]).collect();
        prop_assert!((mpjpe(&a, &b, None).unwrap() - mpjpe(&pa, &pb, None).unwrap()).abs() < 1e-12);
        prop_assert!((pa_mpjpe(&a, &b).unwrap() - pa_mpjpe(&pa, &pb).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn pck_is_monotone_in_threshold(seed in any::<u64>(), t1 in 0.0f64..0.5, t2 in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = KeypointSet2D::visible((0..10).map(|_| Vector2::new(rng.random(), rng.random())).collect());
        let pred: Vec<_> = (0..10).map(|_| Vector2::new(rng.random(), rng.random())).collect();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(pck(&pred, &gt, lo, 1.0).unwrap() <= pck(&pred, &gt, hi, 1.0).unwrap());
    }

    #[test]
    fn violation_table_is_monotone(seed in any::<u64>()) {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses: Vec<PoseVector> = (0..20)
            .map(|_| PoseVector((0..m.pose_dim()).map(|_| rng.random_range(-3.0..3.0)).collect()))
            .collect();
        let table = violation_audit(&PoseBatch::Dofs(poses), m, &[0.0, 5.0, 10.0, 20.0, 30.0, 60.0], None).unwrap();
        for row in &table.frequencies {
            prop_assert!(row.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(row.iter().all(|f| (0.0..=1.0).contains(f)));
        }
    }
}

#[test]
fn uniform_offset_gives_its_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let gt = random_points(&mut rng, 24);
    let pred: Vec<_> = gt.iter().map(|p| p + Vector3::new(3.0, 4.0, 0.0)).collect();
    assert!((mpjpe(&pred, &gt, None).unwrap() - 5.0).abs() < 1e-12);
    assert!(mpjpe(&pred, &gt, Some(0)).unwrap() < 1e-12);
}
