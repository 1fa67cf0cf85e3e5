use maskmotion_core::body::{compose_global, forward_kinematics, LocalPose, SkeletonConfig};
use maskmotion_core::geometry::{
    canonicalize_trajectory, decanonicalize_trajectory, matrix_to_rot6d, mean_squared_error, procrustes_align,
    project_points, CameraIntrinsics, Rotation6D, Trajectory, TrajectoryFrame,
};
use maskmotion_core::linalg::{Mat3, PointSeq, Vec3};
use maskmotion_core::masking::{
    confidence_remask, cosine_keep_schedule, random_mask, spatial_mask, temporal_block_mask, MaskGrid,
};
use maskmotion_core::metrics::{accel_error, jitter, mpjpe, Alignment};
use proptest::prelude::*;

fn vec3() -> impl Strategy<Value = Vec3<f64>> {
    prop::array::uniform3(-2.0f64..2.0)
}

fn rotation() -> impl Strategy<Value = Mat3<f64>> {
    (prop::array::uniform3(-1.0f64..1.0), -3.1f64..3.1)
        .prop_filter("axis needs length", |(a, _)| a.iter().map(|x| x * x).sum::<f64>() > 1e-2)
        .prop_map(|(axis, angle)| Mat3::from_axis_angle(axis, angle))
}

fn trajectory(len: usize) -> impl Strategy<Value = Trajectory<f64>> {
    prop::collection::vec((rotation(), vec3()), len)
        .prop_map(|fs| {
            let frames = fs.iter().map(|(r, t)| TrajectoryFrame::from_matrix(r, *t).unwrap()).collect();
            Trajectory::new(frames, 30.0)
        })
}

fn points(frames: usize, n: usize) -> impl Strategy<Value = PointSeq<f64>> {
    prop::collection::vec(vec3(), frames * n).prop_map(move |d| PointSeq { frames, points: n, data: d })
}

fn close(a: Vec3<f64>, b: Vec3<f64>, tol: f64) -> bool {
    (0..3).all(|k| (a[k] - b[k]).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn canonical_round_trip(traj in (2usize..20).prop_flat_map(trajectory)) {
        let canon = canonicalize_trajectory(&traj).unwrap();
        let back = decanonicalize_trajectory(&canon, &traj.frames[0]).unwrap();
        for (a, b) in traj.frames.iter().zip(&back.frames) {
            prop_assert!(close(a.trans, b.trans, 1e-6));
            prop_assert!(a.orient.to_matrix().unwrap().max_abs_diff(&b.orient.to_matrix().unwrap()) < 1e-6);
        }
    }

    #[test]
    fn canonical_form_ignores_global_rigid_motion(traj in trajectory(8), g in rotation(), t in vec3()) {
        let moved = Trajectory::new(
            traj.frames
                .iter()
                .map(|f| {
                    let r = g * f.orient.to_matrix().unwrap();
                    let p = g.mul_vec(f.trans);
                    TrajectoryFrame::from_matrix(&r, [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).unwrap()
                })
                .collect(),
            traj.fps,
        );
        let (a, b) = (canonicalize_trajectory(&traj).unwrap(), canonicalize_trajectory(&moved).unwrap());
        for (x, y) in a.deltas.iter().zip(&b.deltas) {
            let (x, y) = (x.to_array(), y.to_array());
            prop_assert!(x.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-9));
        }
    }

    #[test]
    fn six_d_decodes_to_rotation(r in prop::array::uniform6(-3.0f64..3.0), s0 in 0.1f64..10.0, s1 in 0.1f64..10.0) {
        let rot = Rotation6D::new(r);
        if let Ok(m) = rot.to_matrix() {
            prop_assert!(m.orthonormality_error() < 1e-6);
            prop_assert!((m.det() - 1.0).abs() < 1e-6);
            let scaled = Rotation6D::new([r[0] * s0, r[1] * s0, r[2] * s0, r[3] * s1, r[4] * s1, r[5] * s1]);
            prop_assert!(scaled.to_matrix().unwrap().max_abs_diff(&m) < 1e-9);
            let again = matrix_to_rot6d(&m).unwrap().to_matrix().unwrap();
            prop_assert!(again.max_abs_diff(&m) < 1e-9);
        }
    }

    #[test]
    fn procrustes_never_worse_than_raw(a in prop::collection::vec(vec3(), 6), b in prop::collection::vec(vec3(), 6)) {
        if let Ok(sim) = procrustes_align(&a, &b) {
            prop_assert!(mean_squared_error(&sim.apply_all(&a), &b) <= mean_squared_error(&a, &b) + 1e-12);
        }
    }

    #[test]
    fn principal_point_shift_shifts_projections(pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..10), dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
        let pts: Vec<Vec3<f64>> = pts.into_iter().map(|p| [p[0], p[1], p[2] + 3.0]).collect();
        let cam = CameraIntrinsics::new(600.0, [320.0, 240.0], [640.0, 480.0]).unwrap();
        let shifted = CameraIntrinsics::new(600.0, [320.0 + dx, 240.0 + dy], [640.0, 480.0]).unwrap();
        let (a, b) = (project_points(&pts, &cam).unwrap(), project_points(&pts, &shifted).unwrap());
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((q[0] - p[0] - dx).abs() < 1e-9 && (q[1] - p[1] - dy).abs() < 1e-9);
        }
    }

    #[test]
    fn fk_is_rigidly_equivariant(rots in prop::collection::vec(rotation(), 22), g in rotation(), t in vec3()) {
        let skel = SkeletonConfig::<f64>::desk_default();
        let pose = LocalPose { joint_rotations: rots.iter().map(|r| matrix_to_rot6d(r).unwrap()).collect() };
        let local = forward_kinematics(&pose, &skel).unwrap();
        prop_assert_eq!(local.joints[0], [0.0; 3]);
        let frame = TrajectoryFrame::from_matrix(&g, t).unwrap();
        let world = compose_global(&local, &frame).unwrap();
        for (w, l) in world.joints.iter().zip(&local.joints) {
            let expect = g.mul_vec(*l);
            prop_assert!(close(*w, [expect[0] + t[0], expect[1] + t[1], expect[2] + t[2]], 1e-9));
        }
        let moved: Vec<Vec3<f64>> = local.joints.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
        for (a, b) in skel.vertices_from_joints(&moved).iter().zip(&local.vertices) {
            prop_assert!(close(*a, [b[0] + t[0], b[1] + t[1], b[2] + t[2]], 1e-9));
        }
    }

    #[test]
    fn mask_generators_are_seeded(seed in any::<u64>(), ratio in 0.0f64..1.0) {
        prop_assert_eq!(random_mask(12, 8, ratio, seed), random_mask(12, 8, ratio, seed));
        prop_assert_eq!(temporal_block_mask(12, 8, ratio, seed), temporal_block_mask(12, 8, ratio, seed));
        prop_assert_eq!(spatial_mask(12, 8, ratio, seed), spatial_mask(12, 8, ratio, seed));
    }

    #[test]
    fn remask_respects_frozen(conf in prop::collection::vec(0.0f64..1.0, 40), frozen_bits in prop::collection::vec(any::<bool>(), 40), keep in 0usize..40) {
        let frozen = MaskGrid { frames: 5, tokens: 8, grid: frozen_bits.clone() };
        let free = frozen_bits.iter().filter(|b| !**b).count();
        let mask = confidence_remask(&conf, keep.min(free), &frozen);
        for i in 0..40 {
            if frozen_bits[i] {
                prop_assert!(!mask.grid[i]);
            }
        }
        let unmasked = 40 - mask.count();
        prop_assert!(unmasked <= keep.min(free) + (40 - free));
    }

    #[test]
    fn keep_schedule_is_monotone(steps in 1usize..30, total in 0usize..500) {
        let mut prev = 0;
        for t in 1..=steps {
            let k = cosine_keep_schedule(t, steps, total);
            prop_assert!(k >= prev && k <= total);
            prev = k;
        }
        prop_assert_eq!(prev, total);
    }

    #[test]
    fn pa_mpjpe_ignores_similarity(gt in points(3, 6), g in rotation(), s in 0.2f64..5.0, t in vec3()) {
        let pred = gt.map(|_, _, p| {
            let r = g.mul_vec(p);
            [s * r[0] + t[0], s * r[1] + t[1], s * r[2] + t[2]]
        });
        prop_assert!(mpjpe(&pred, &gt, Alignment::Procrustes, None).unwrap() < 1e-6);
    }

    #[test]
    fn pelvis_mpjpe_ignores_per_frame_translation(pred in points(4, 5), gt in points(4, 5), shifts in prop::collection::vec(vec3(), 4)) {
        let moved = pred.map(|t, _, p| [p[0] + shifts[t][0], p[1] + shifts[t][1], p[2] + shifts[t][2]]);
        let a = mpjpe(&pred, &gt, Alignment::Pelvis, None).unwrap();
        let b = mpjpe(&moved, &gt, Alignment::Pelvis, None).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn accel_and_jitter_kill_low_order_trends(pred in points(8, 3), gt in points(8, 3), c in vec3(), v in vec3(), a in vec3()) {
        let linear = pred.map(|t, _, p| {
            let t = t as f64;
            [p[0] + c[0] + v[0] * t, p[1] + c[1] + v[1] * t, p[2] + c[2] + v[2] * t]
        });
        let e0 = accel_error(&pred, &gt, 30.0, true).unwrap();
        let e1 = accel_error(&linear, &gt, 30.0, true).unwrap();
        prop_assert!((e0 - e1).abs() <= 1e-6 * (1.0 + e0));
        let quad = linear.map(|t, _, p| {
            let t2 = (t * t) as f64;
            [p[0] + a[0] * t2, p[1] + a[1] * t2, p[2] + a[2] * t2]
        });
        let (j0, j1) = (jitter(&pred, 30.0).unwrap(), jitter(&quad, 30.0).unwrap());
        prop_assert!((j0 - j1).abs() <= 1e-6 * (1.0 + j0));
    }
}
