//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{joint_stage_config, near, path, skelkit, synthetic_record, toy};
use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skelkit::{
    cont6d_to_rotmat, e_kp2d, e_pose, e_pose_terms, euler_to_rotmat, fit, fit_to_mesh, forward_kinematics, gradient,
    mpjpe, pa_mpjpe, pck, procrustes_align, refine_batch, rotmat_to_euler, save_dataset, shape_mesh, skin_mesh,
    synthetic_case, total_objective, violation_audit, Cont6D, DofKind, EulerAngles, FitConfig, FitState, InitPolicy,
    KeypointSet2D, Mesh, ModelDefinition, ParamGroup, PoseBatch, PoseVector, RotMat, ShapeVector, SimilarityTransform,
    SynthSettings, TermWeights, WeakPerspectiveCamera,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
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

fn elementary(axis: char, a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    match axis {
        'x' => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        'y' => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        _ => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}

const CONVENTIONS: [&str; 12] = [
    "xyz", "xzy", "yxz", "yzx", "zxy", "zyx", "xyx", "xzx", "yxy", "yzy", "zxz", "zyz",
];

fn rotation_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_orth: f64 = 0.0;
    let mut worst_det: f64 = 0.0;
    for _ in 0..10_000 {
        let v: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let r = *cont6d_to_rotmat(&Cont6D(v)).unwrap().matrix();
        worst_orth = worst_orth.max((r * r.transpose() - Matrix3::identity()).amax());
        worst_det = worst_det.max((r.determinant() - 1.0).abs());
    }
    let mut worst_round_trip: f64 = 0.0;
    for i in 0..10_000 {
        let conv = CONVENTIONS[i % CONVENTIONS.len()];
        let proper = conv.as_bytes()[0] == conv.as_bytes()[2];
        let b = if proper {
            rng.random_range(0.05..std::f64::consts::PI - 0.05)
        } else {
            rng.random_range(-1.5..1.5)
        };
        let angles = vec![rng.random_range(-3.0..3.0), b, rng.random_range(-3.0..3.0)];
        let e = EulerAngles::new(angles.clone(), conv.parse().unwrap()).unwrap();
        let back = rotmat_to_euler(&euler_to_rotmat(&e), e.convention());
        for (x, y) in back.angles().iter().zip(&angles) {
            worst_round_trip = worst_round_trip.max((x - y).abs());
        }
    }
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut gimbal_ok = true;
    for (conv, middle) in [
        ("xyz", half_pi),
        ("xyz", -half_pi),
        ("zyx", half_pi),
        ("zxz", 0.0),
        ("yxy", std::f64::consts::PI),
    ] {
        let m = conv
            .chars()
            .zip([0.7, middle, -0.4])
            .fold(Matrix3::identity(), |m, (c, a)| m * elementary(c, a));
        let e = rotmat_to_euler(&RotMat::from_matrix(m).unwrap(), &conv.parse().unwrap());
        gimbal_ok &= e.angles()[2] == 0.0 && (euler_to_rotmat(&e).matrix() - m).amax() < 1e-9;
    }
    let elapsed = start.elapsed();
    outcome(
        worst_orth < 1e-9 && worst_det < 1e-9 && worst_round_trip < 1e-6 && gimbal_ok && within(elapsed, 10.0),
        format!(
            "orthonormality {worst_orth:.1e}, det {worst_det:.1e}, Euler round trip {worst_round_trip:.1e}, gimbal {}",
            if gimbal_ok { "ok" } else { "mismatch" }
        ),
    )
}

/// Shaped rest joints from the raw document.
fn oracle_rest_joints(model: &ModelDefinition, beta: &[f64]) -> Vec<Vector3<f64>> {
    let doc = model.document();
    (0..doc.joints.len())
        .map(|j| {
            let mut p = Vector3::zeros();
            let mut k = j as i64;
            while k >= 0 {
                p += Vector3::from(doc.joints[k as usize].rest_offset);
                k = doc.joints[k as usize].parent;
            }
            if let Some(rows) = &doc.skeleton_regressor {
                for &(v, w) in &rows[j] {
                    for (b, coeff) in beta.iter().enumerate() {
                        p += Vector3::from(doc.shape_blendshapes[v][b]) * (w * coeff);
                    }
                }
            }
            p
        })
        .collect()
}

/// World transforms as explicit products of 4x4 matrices along each chain.
fn oracle_transforms(model: &ModelDefinition, q: &[f64], beta: &[f64]) -> Vec<Matrix4<f64>> {
    let doc = model.document();
    let rest = oracle_rest_joints(model, beta);
    let mut starts = Vec::new();
    let mut acc = 0;
    for joint in &doc.joints {
        starts.push(acc);
        acc += joint.dofs.len();
    }
    let local = |j: usize| -> Matrix4<f64> {
        let joint = &doc.joints[j];
        let mut t = match joint.parent {
            p if p < 0 => rest[j],
            p => rest[j] - rest[p as usize],
        };
        let mut r = Matrix4::identity();
        for (k, dof) in joint.dofs.iter().enumerate() {
            let v = q[starts[j] + k];
            match dof.kind {
                DofKind::Translation => t += Vector3::from(dof.axis) * v,
                DofKind::Rotation => {
                    r *= Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::from(dof.axis)), v).to_homogeneous()
                }
            }
        }
        Matrix4::new_translation(&t) * r
    };
    (0..doc.joints.len())
        .map(|j| {
            let mut chain = vec![j];
            while doc.joints[*chain.last().unwrap()].parent >= 0 {
                chain.push(doc.joints[*chain.last().unwrap()].parent as usize);
            }
            chain.iter().rev().fold(Matrix4::identity(), |m, &k| m * local(k))
        })
        .collect()
}

fn fk_oracle() -> Outcome {
    let start = Instant::now();
    let m = toy();
    let doc = m.document();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_fk: f64 = 0.0;
    let mut worst_rigid: f64 = 0.0;
    let mut rigid_count = 0;
    let mut zero_pose_exact = true;
    for _ in 0..1_000 {
        let q: Vec<f64> = (0..m.pose_dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let beta: Vec<f64> = (0..m.shape_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let posed = forward_kinematics(m, &q, &beta).unwrap();
        let world = oracle_transforms(m, &q, &beta);
        for (t, o) in posed.transforms.iter().zip(&world) {
            worst_fk = worst_fk.max((t.to_homogeneous() - o).amax());
        }
        // Vertices bound to a single joint move with that joint's transform.
        let rest = shape_mesh(m, &beta).unwrap();
        let posed_mesh = skin_mesh(m, &q, &beta).unwrap();
        let rest_joints = oracle_rest_joints(m, &beta);
        for (v, row) in doc.skinning_weights.iter().enumerate() {
            if let [(j, w)] = row[..] {
                assert_eq!(w, 1.0);
                let p = rest.vertices[v] - rest_joints[j];
                let expected = (world[j] * p.push(1.0)).xyz();
                worst_rigid = worst_rigid.max((posed_mesh.vertices[v] - expected).amax());
                rigid_count += 1;
            }
        }
        zero_pose_exact &= skin_mesh(m, &vec![0.0; m.pose_dim()], &beta).unwrap() == rest;
    }
    let elapsed = start.elapsed();
    outcome(
        worst_fk < 1e-9 && rigid_count > 0 && worst_rigid < 1e-12 && zero_pose_exact && within(elapsed, 30.0),
        format!(
            "matrix chain {worst_fk:.1e}, rigid-weight vertices {worst_rigid:.1e} over {rigid_count}, zero pose {}",
            if zero_pose_exact { "bitwise" } else { "differs" }
        ),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let m = toy();
    let all = [
        ParamGroup::Camera,
        ParamGroup::Root,
        ParamGroup::Pose,
        ParamGroup::Shape,
    ];
    let config = FitConfig {
        weights: TermWeights {
            data: 1.0,
            shape: 0.3,
            pose: 0.2,
        },
        ..FitConfig::default()
    };
    let d = m.pose_dim();
    let unpack = |x: &[f64]| FitState {
        camera: WeakPerspectiveCamera {
            scale: x[0],
            translation: [x[1], x[2]],
        },
        q: PoseVector(x[3..3 + d].to_vec()),
        beta: ShapeVector(x[3 + d..].to_vec()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let state = FitState {
            q: PoseVector((0..d).map(|_| rng.random_range(-1.5..1.5)).collect()),
            beta: ShapeVector((0..m.shape_dim()).map(|_| rng.random_range(-1.0..1.0)).collect()),
            camera: WeakPerspectiveCamera::new(rng.random_range(0.5..1.5), [rng.random_range(-0.2..0.2), -0.8])
                .unwrap(),
        };
        let joints = skelkit::regress_joints(m, &skin_mesh(m, &state.q, &state.beta).unwrap()).unwrap();
        let points: Vec<Vector2<f64>> = skelkit::project(&state.camera, &joints)
            .unwrap()
            .into_iter()
            .map(|p| p + Vector2::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)))
            .collect();
        let conf = (0..points.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let kp = KeypointSet2D::new(points, conf).unwrap();
        let g = gradient(m, &state, &kp, &config, &all).unwrap();
        let analytic: Vec<f64> = g
            .camera
            .iter()
            .chain(g.q.iter())
            .chain(g.beta.iter())
            .copied()
            .collect();
        let mut x = vec![
            state.camera.scale,
            state.camera.translation[0],
            state.camera.translation[1],
        ];
        x.extend_from_slice(&state.q);
        x.extend_from_slice(&state.beta);
        let h = 1e-6;
        let numeric: Vec<f64> = (0..x.len())
            .map(|i| {
                let (mut a, mut b) = (x.clone(), x.clone());
                a[i] += h;
                b[i] -= h;
                let f = |y: &[f64]| total_objective(m, &unpack(y), &kp, &config).unwrap().total;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect();
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(diff / scale.max(1e-12));
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-5 && within(elapsed, 120.0),
        format!("worst relative error {worst:.1e} over 100 states"),
    )
}

fn pose_prior_contract() -> Outcome {
    let m = toy();
    let mid: Vec<f64> = m
        .dofs()
        .map(|(_, d)| match (d.lower, d.upper) {
            (Some(l), Some(u)) => 0.5 * (l + u),
            _ => 0.0,
        })
        .collect();
    let mut at_limit_exact = true;
    let mut bounded = 0;
    for (i, (_, d)) in m.dofs().enumerate() {
        if let (Some(l), Some(u)) = (d.lower, d.upper) {
            let mut q = mid.clone();
            q[i] = l;
            at_limit_exact &= e_pose_terms(m, &q).unwrap()[i] == 1.0 + (l - u).exp();
            bounded += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut unbounded_zero = true;
    for _ in 0..100 {
        let q: Vec<f64> = (0..m.pose_dim()).map(|_| rng.random_range(-10.0..10.0)).collect();
        let terms = e_pose_terms(m, &q).unwrap();
        for (i, (_, d)) in m.dofs().enumerate() {
            if d.lower.is_none() && d.upper.is_none() {
                unbounded_zero &= terms[i] == 0.0;
            }
        }
    }
    let mut convex = true;
    let h = 1e-2;
    for (i, (_, d)) in m.dofs().enumerate() {
        if let (Some(l), Some(u)) = (d.lower, d.upper) {
            let f = |t: f64| {
                let mut q = mid.clone();
                q[i] = t;
                e_pose(m, &q).unwrap()
            };
            for k in 0..=200 {
                let t = (l - 1.0) + (u - l + 2.0) * k as f64 / 200.0;
                convex &= f(t + h) - 2.0 * f(t) + f(t - h) > 0.0;
            }
        }
    }
    outcome(
        at_limit_exact && unbounded_zero && convex,
        format!(
            "limit value exact on {bounded} bounded DoFs: {at_limit_exact}, unbounded zero: {unbounded_zero}, convex on grid: {convex}"
        ),
    )
}

fn synthetic_recovery() -> Outcome {
    let start = Instant::now();
    let m = toy();
    let config = FitConfig::default();
    let mut recovered = 0;
    let mut monotone = true;
    for seed in 0..100 {
        let case = synthetic_case(m, seed, &SynthSettings::default()).unwrap();
        let r = fit(m, &case.keypoints, &case.init, &config).unwrap();
        let before = e_kp2d(
            m,
            &case.init.q,
            &case.init.beta,
            &case.init.camera,
            &case.keypoints,
            config.sigma,
        )
        .unwrap();
        let after = e_kp2d(m, &r.q, &r.beta, &r.camera, &case.keypoints, config.sigma).unwrap();
        if after <= 0.05 * before {
            recovered += 1;
        }
        monotone &= r.trace.windows(2).all(|w| w[1] <= w[0]);
    }
    let elapsed = start.elapsed();
    outcome(
        recovered >= 95 && monotone && within(elapsed, 300.0),
        format!("{recovered}/100 trials reached 5% of the initial reprojection energy, monotone: {monotone}"),
    )
}

fn mean_vertex_error(a: &Mesh, b: &Mesh) -> f64 {
    a.vertices
        .iter()
        .zip(&b.vertices)
        .map(|(x, y)| (x - y).norm())
        .sum::<f64>()
        / a.vertices.len() as f64
}

/// Seeds whose upside-down start is known to stall in a local minimum
/// under the single-stage configuration.
const STALLING_SEEDS: [u64; 2] = [2, 5];

fn conversion_self_fit() -> Outcome {
    let m = toy();
    let config = joint_stage_config();
    let mut worst_warm: f64 = 0.0;
    let mut warm_by_seed = Vec::new();
    for seed in 0..6 {
        let case = synthetic_case(m, seed, &SynthSettings::default()).unwrap();
        let target = skin_mesh(m, &case.truth.q, &case.truth.beta).unwrap();
        let warm = fit_to_mesh(m, &target, &near(&case.truth, seed), &config).unwrap();
        let err = mean_vertex_error(&skin_mesh(m, &warm.q, &warm.beta).unwrap(), &target);
        worst_warm = worst_warm.max(err);
        warm_by_seed.push((seed, err, target, case));
    }
    let mut reproduced = true;
    let mut notes = Vec::new();
    for (seed, warm_err, target, case) in &warm_by_seed {
        if !STALLING_SEEDS.contains(seed) {
            continue;
        }
        let mut cold = near(&case.truth, *seed);
        cold.q.0[3] += std::f64::consts::PI;
        let r = fit_to_mesh(m, target, &cold, &config).unwrap();
        let cold_err = mean_vertex_error(&skin_mesh(m, &r.q, &r.beta).unwrap(), target);
        reproduced &= r.converged && cold_err >= 10.0 * warm_err;
        notes.push(format!("seed {seed} cold {cold_err:.2e} vs warm {warm_err:.2e}"));
    }
    outcome(
        worst_warm < 1e-3 && reproduced,
        format!("worst warm error {worst_warm:.1e}; {}", notes.join(", ")),
    )
}

fn procrustes_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst_planted: f64 = 0.0;
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
        worst_planted = worst_planted.max(procrustes_align(&src, &dst).unwrap().residual(&src, &dst));
    }
    let mut never_beaten = true;
    for _ in 0..50 {
        let src = random_points(&mut rng, 6);
        let dst = random_points(&mut rng, 6);
        let best = procrustes_align(&src, &dst).unwrap().residual(&src, &dst);
        for _ in 0..10_000 {
            let candidate = SimilarityTransform {
                scale: rng.random_range(0.05..3.0),
                rotation: RotMat::from_matrix(*random_rotation(&mut rng).matrix()).unwrap(),
                translation: Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
            };
            never_beaten &= best <= candidate.residual(&src, &dst);
        }
    }
    let mut pa_bounded = true;
    for _ in 0..1_000 {
        let n = rng.random_range(3..30);
        let a = random_points(&mut rng, n);
        let b = random_points(&mut rng, n);
        pa_bounded &= pa_mpjpe(&a, &b).unwrap() <= mpjpe(&a, &b, None).unwrap();
    }
    outcome(
        worst_planted < 1e-9 && never_beaten && pa_bounded,
        format!(
            "planted residual {worst_planted:.1e}, unbeaten by 500k random transforms: {never_beaten}, PA-MPJPE <= MPJPE: {pa_bounded}"
        ),
    )
}

fn metric_hand_cases() -> Outcome {
    let gt: Vec<Vector3<f64>> = (0..17)
        .map(|i| Vector3::new(i as f64 * 40.0, 900.0 - i as f64 * 15.0, 20.0))
        .collect();
    let pred: Vec<_> = gt.iter().map(|p| p + Vector3::new(3.0, 4.0, 0.0)).collect();
    let jpe = mpjpe(&pred, &gt, None).unwrap();

    let kp = KeypointSet2D::visible(vec![Vector2::zeros(); 4]);
    let guesses = [
        Vector2::new(1.0, 0.0),
        Vector2::new(0.0, 4.0),
        Vector2::new(6.0, 0.0),
        Vector2::new(0.0, -20.0),
    ];
    let pck_value = pck(&guesses, &kp, 0.05, 100.0).unwrap();

    let m = toy();
    let knee = m.dof_range(m.joint_index("left_knee").unwrap()).start;
    let poses: Vec<PoseVector> = [-15.0f64, 10.0, 140.0]
        .iter()
        .map(|deg| {
            let mut q: Vec<f64> = m
                .dofs()
                .map(|(_, d)| match (d.lower, d.upper) {
                    (Some(l), Some(u)) => 0.5 * (l + u),
                    _ => 0.0,
                })
                .collect();
            q[knee] = deg.to_radians();
            PoseVector(q)
        })
        .collect();
    let names = vec!["left_knee".to_string()];
    let table = violation_audit(&PoseBatch::Dofs(poses), m, &[10.0, 20.0, 30.0], Some(&names)).unwrap();
    let fixture = table.frequencies[0][0];

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut monotone = true;
    for _ in 0..50 {
        let batch: Vec<PoseVector> = (0..20)
            .map(|_| PoseVector((0..m.pose_dim()).map(|_| rng.random_range(-3.0..3.0)).collect()))
            .collect();
        let t = violation_audit(
            &PoseBatch::Dofs(batch),
            m,
            &[0.0, 5.0, 10.0, 20.0, 30.0, 60.0, 90.0],
            None,
        )
        .unwrap();
        monotone &= t.frequencies.iter().all(|row| row.windows(2).all(|w| w[1] <= w[0]));
    }
    outcome(
        jpe == 5.0 && pck_value == 0.5 && fixture == 1.0 / 3.0 && monotone,
        format!("MPJPE {jpe} mm, PCK {pck_value}, knee fixture {fixture:.4} at 10°, table monotone: {monotone}"),
    )
}

fn refinement_monotonicity() -> Outcome {
    let start = Instant::now();
    let m = toy();
    let records: Vec<_> = (0..200).map(|s| synthetic_record(s, s % 2 == 0)).collect();
    let config = FitConfig::default();
    let (round1, report1) = refine_batch(&records, m, &config, InitPolicy::BestOfBoth).unwrap();
    let (_, report2) = refine_batch(&round1, m, &config, InitPolicy::BestOfBoth).unwrap();
    let mut non_increasing = true;
    for (a, b) in report1.records.iter().zip(&report2.records) {
        let (before, mid, after) = (
            a.objective_before.unwrap(),
            a.objective_after.unwrap(),
            b.objective_after.unwrap(),
        );
        non_increasing &= mid <= before && after <= mid && b.objective_before == Some(mid);
    }
    let mean = |v: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = v.collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let initial = mean(&mut report1.records.iter().map(|r| r.objective_before.unwrap()));
    let first = report1.mean_objective_after().unwrap();
    let second = report2.mean_objective_after().unwrap();
    let elapsed = start.elapsed();
    outcome(
        non_increasing && first < initial && second <= first && within(elapsed, 300.0),
        format!(
            "mean objective {initial:.4e} -> {first:.4e} -> {second:.4e}, accepted {} then {}, per-record non-increasing: {non_increasing}",
            report1.accepted, report2.accepted
        ),
    )
}

fn run_twice(dir: &Path, name: &str, args: &dyn Fn(&str, &str) -> Vec<String>, outputs: &[&str]) -> Result<(), String> {
    let mut bytes = Vec::new();
    for (run, jobs) in [("a", "1"), ("b", "4")] {
        let argv = args(run, jobs);
        let o = skelkit(&argv.iter().map(String::as_str).collect::<Vec<_>>());
        if !o.status.success() {
            return Err(format!("{name} failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        let files: Vec<Vec<u8>> = outputs
            .iter()
            .map(|f| std::fs::read(dir.join(format!("{run}_{f}"))).map_err(|e| format!("{name}: {f}: {e}")))
            .collect::<Result<_, _>>()?;
        bytes.push(files);
    }
    if bytes[0] != bytes[1] {
        return Err(format!("{name} outputs differ between runs"));
    }
    Ok(())
}

type ArgBuilder<'a> = Box<dyn Fn(&str, &str) -> Vec<String> + 'a>;

fn cli_determinism() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let d = dir.path();
    let records: Vec<_> = (0..12).map(|s| synthetic_record(s, s % 2 == 0)).collect();
    let dataset = d.join("dataset.jsonl");
    save_dataset(&records, &dataset).unwrap();
    let case = synthetic_case(toy(), 3, &SynthSettings::default()).unwrap();
    let target = d.join("target.obj");
    std::fs::write(
        &target,
        skelkit_cli::io::render_obj(
            &skin_mesh(toy(), &case.truth.q, &case.truth.beta).unwrap(),
            toy().faces(),
        ),
    )
    .unwrap();
    let p = |name: &str| path(&d.join(name)).to_string();
    let common = |jobs: &str| -> Vec<String> {
        ["--toy-model", "--seed", "17", "--jobs", jobs]
            .iter()
            .map(|s| s.to_string())
            .collect()
    };
    let with = |jobs: &str, rest: Vec<String>| -> Vec<String> { common(jobs).into_iter().chain(rest).collect() };
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();

    let checks: Vec<(&str, ArgBuilder, Vec<&str>)> = vec![
        (
            "fit",
            Box::new(|run, jobs| {
                with(
                    jobs,
                    s(&[
                        "fit",
                        "--in",
                        &p("dataset.jsonl"),
                        "--out",
                        &p(&format!("{run}_fits.jsonl")),
                        "--init-noise",
                        "0.1",
                    ]),
                )
            }),
            vec!["fits.jsonl"],
        ),
        (
            "convert",
            Box::new(|run, jobs| {
                with(
                    jobs,
                    s(&[
                        "convert",
                        "--in",
                        &p("target.obj"),
                        "--out",
                        &p(&format!("{run}_conv.json")),
                        "--init-noise",
                        "0.2",
                    ]),
                )
            }),
            vec!["conv.json"],
        ),
        (
            "refine",
            Box::new(|run, jobs| {
                with(
                    jobs,
                    s(&[
                        "refine",
                        "--in",
                        &p("dataset.jsonl"),
                        "--out",
                        &p(&format!("{run}_refined.jsonl")),
                        "--rounds",
                        "2",
                        "--policy",
                        "best-of-both",
                        "--report",
                        &p(&format!("{run}_report.json")),
                    ]),
                )
            }),
            vec!["refined.jsonl", "report.json"],
        ),
        (
            "eval",
            Box::new(|run, jobs| {
                with(
                    jobs,
                    s(&[
                        "eval",
                        "--pred",
                        &p("a_fits.jsonl"),
                        "--gt",
                        &p("dataset.jsonl"),
                        "--out",
                        &p(&format!("{run}_eval.txt")),
                    ]),
                )
            }),
            vec!["eval.txt"],
        ),
        (
            "audit",
            Box::new(|run, jobs| {
                with(
                    jobs,
                    s(&[
                        "audit",
                        "--in",
                        &p("dataset.jsonl"),
                        "--out",
                        &p(&format!("{run}_audit.txt")),
                    ]),
                )
            }),
            vec!["audit.txt"],
        ),
        (
            "export",
            Box::new(|run, jobs| {
                with(
                    jobs,
                    s(&[
                        "export",
                        "--in",
                        &p("a_fits.jsonl"),
                        "--index",
                        "3",
                        "--out",
                        &p(&format!("{run}_mesh.obj")),
                    ]),
                )
            }),
            vec!["mesh.obj"],
        ),
    ];
    let mut failures = Vec::new();
    for (name, args, outputs) in &checks {
        if let Err(e) = run_twice(d, name, args.as_ref(), outputs) {
            failures.push(e);
        }
    }
    let names: Vec<&str> = checks.iter().map(|c| c.0).collect();
    if failures.is_empty() {
        outcome(true, format!("byte-identical reruns for {}", names.join(", ")))
    } else {
        outcome(false, failures.join("; "))
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [Criterion; 10] = [
        ("rotation suite", rotation_suite),
        ("FK oracle equivalence", fk_oracle),
        ("gradient checks", gradient_checks),
        ("pose limit prior contract", pose_prior_contract),
        ("synthetic keypoint recovery", synthetic_recovery),
        ("mesh conversion self-fit", conversion_self_fit),
        ("Procrustes optimality", procrustes_optimality),
        ("metric hand cases", metric_hand_cases),
        ("refinement monotonicity", refinement_monotonicity),
        ("CLI determinism", cli_determinism),
    ];
    let mut passed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if result.pass {
            passed += 1;
        }
        println!(
            "{} {:>2}. {name}: {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {passed}/{} criteria passed", criteria.len());
    if passed != criteria.len() {
        std::process::exit(1);
    }
}
