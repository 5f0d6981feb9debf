use microservo::calibration::{chamfer_bidirectional, chamfer_squared_mean, paired_squared_mean};
use microservo::controller::{
    admittance_step, box_qp, dare_gain, legacy_integrate, legacy_lyapunov, legacy_shared_step, micro_step, sat,
    sat_norm, spectral_radius, AdmittanceParams, LegacyParams, LegacyState, MicroGains, MicroInput, Phase, PhaseState,
};
use microservo::estimator::{conformal_calibrate, gated_update_planar, predict, FilterConfig, FilterState, GateParams};
use microservo::geometry::{
    damped_pinv, damped_pinv_bound, euler_to_rotation, image_jacobian, project_perspective, project_weak, rot_z,
    rotation_to_euler, so3_exp, CameraModel, EulerZYX, Vec2, Vec3,
};
use microservo::labeling::{gaussian_heatmap, normalize_depth, select_tip, skeletonize, DepthClass, LabelParams};
use microservo::scenario::{observe, render_mask_at_angle, sharpness_profile, CorruptionSpec, Rig, TimedPose};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(a, b, c)| Vec3::new(a, b, c))
}

fn vec2(r: f64) -> impl Strategy<Value = Vec2> {
    (-r..r, -r..r).prop_map(|(a, b)| Vec2::new(a, b))
}

fn points(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec2>> {
    prop::collection::vec(vec2(300.0), n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn weak_projection_is_affine(p in vec3(5.0), q in vec3(5.0), a in -2.0f64..3.0, rv in vec3(3.0), t in vec3(10.0)) {
        let cam = CameraModel::default();
        let r = so3_exp(&rv);
        let lhs = project_weak(&cam, &r, &t, &(p * a + q * (1.0 - a)));
        let rhs = project_weak(&cam, &r, &t, &p) * a + project_weak(&cam, &r, &t, &q) * (1.0 - a);
        prop_assert!((lhs - rhs).norm() <= 1e-9 * (1.0 + rhs.norm()));
    }

    #[test]
    fn euler_round_trip(x in -3.1f64..3.1, y in -1.45f64..1.45, z in -3.1f64..3.1) {
        let e = EulerZYX::new(x, y, z);
        let back = rotation_to_euler(&euler_to_rotation(&e).unwrap());
        for (u, v) in back.angles().iter().zip(e.angles()) {
            prop_assert!((u - v).abs() < 1e-9, "{:?} vs {:?}", back.angles(), e.angles());
        }
    }

    #[test]
    fn damped_pinv_respects_norm_bound(
        j in prop::collection::vec(-50.0f64..50.0, 12),
        w in prop::collection::vec(0.1f64..10.0, 4),
        lambda in 0.01f64..2.0,
    ) {
        let j = DMatrix::from_row_slice(3, 4, &j);
        let wq = DMatrix::from_diagonal(&DVector::from_vec(w));
        let p = damped_pinv(&j, &wq, lambda).unwrap();
        let norm = p.singular_values().max();
        prop_assert!(norm <= damped_pinv_bound(&wq, lambda).unwrap() * (1.0 + 1e-9));
    }

    #[test]
    fn image_jacobian_lateral_block_matches_projection(p in vec3(2.0)) {
        let cam = CameraModel::from_perspective(500.0, 100.0, [320.0, 240.0], 640, 480).unwrap();
        let r = nalgebra::Matrix3::identity();
        let t = Vec3::new(0.0, 0.0, 100.0);
        let px = project_perspective(&cam, &r, &t, &p).unwrap();
        let jac = image_jacobian(&cam, &px).unwrap();
        let h = 1e-5;
        for axis in 0..2 {
            let mut d = Vec3::zeros();
            d[axis] = h;
            let fd = (project_perspective(&cam, &r, &t, &(p + d)).unwrap() - project_perspective(&cam, &r, &t, &(p - d)).unwrap()) / (2.0 * h);
            prop_assert!((fd - jac.column(axis)).norm() < 1e-6);
        }
    }

    #[test]
    fn chamfer_is_symmetric(p in points(2..40), q in points(2..40)) {
        let a = chamfer_bidirectional(&p, &q).unwrap();
        let b = chamfer_bidirectional(&q, &p).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn chamfer_never_exceeds_paired(p in points(2..60), dk in -0.1f64..0.1) {
        let c = Vec2::new(320.0, 240.0);
        let q: Vec<Vec2> = p.iter().map(|x| c + (x - c) * (1.0 + dk)).collect();
        prop_assert!(chamfer_squared_mean(&p, &q).unwrap() <= paired_squared_mean(&p, &q).unwrap());
    }

    #[test]
    fn sharpness_peaks_only_at_focus(frac in 0.01f64..0.25, offset in 0usize..7) {
        let rig = Rig::default();
        let step = rig.depth_of_field * frac;
        let grid: Vec<f64> = (-40i32..=40).map(|i| rig.focal_z + (i + offset as i32 - 3) as f64 * step).collect();
        let best = grid.iter().cloned().map(|z| sharpness_profile(&rig, z)).fold(f64::NEG_INFINITY, f64::max);
        for &z in &grid {
            let s = sharpness_profile(&rig, z);
            prop_assert_eq!(s == best, (z - rig.focal_z).abs() < 1e-12);
        }
    }

    #[test]
    fn select_tip_ignores_candidate_order(
        cands in prop::collection::vec((3i64..60, 3i64..40), 1..8),
        prev in prop::option::of((0i64..64, 0i64..48)),
        seed in any::<u64>(),
    ) {
        let params = LabelParams::default();
        let a = select_tip(&cands, prev, None, &params, (64, 48), 0);
        let mut shuffled = cands.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 7) % n as u64) as usize);
        }
        let b = select_tip(&shuffled, prev, None, &params, (64, 48), 0);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn heatmap_values_and_mass(px in 5.0f64..27.0, py in 5.0f64..27.0, s in 0.5f64..4.0) {
        let h1 = gaussian_heatmap(Vec2::new(px, py), s, (32, 32)).unwrap();
        let h2 = gaussian_heatmap(Vec2::new(px, py), s * 1.5, (32, 32)).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let v = h1.at(x, y);
                let expo = ((x as f64 - px).powi(2) + (y as f64 - py).powi(2)) / (2.0 * s * s);
                prop_assert!(v <= 1.0 && v >= 0.0);
                // strictly positive wherever the exponential is representable
                prop_assert!(expo > 700.0 || v > 0.0);
            }
        }
        prop_assert!(h2.data.iter().sum::<f64>() > h1.data.iter().sum::<f64>());
    }

    #[test]
    fn depth_classes_partition(recs in prop::collection::vec((-3.0f64..3.0, 0.0f64..1.0), 1..60), delta in 0.05f64..1.5) {
        let params = LabelParams { class_threshold: delta, ..LabelParams::default() };
        for l in normalize_depth(&recs, &params).unwrap() {
            let expect = if l.z_tilde < -delta { DepthClass::Below } else if l.z_tilde > delta { DepthClass::Above } else { DepthClass::Near };
            prop_assert_eq!(l.class, expect);
        }
    }

    #[test]
    fn rendered_skeletons_are_thin_subsets(u in 60.0f64..580.0, v in 60.0f64..420.0, angle in 0.0f64..6.28, width in 1u32..9) {
        let rig = Rig::default();
        let plane = rig.pixel_to_plane(&Vec2::new(u, v));
        let tip = rig.tip_from_camera(&Vec3::new(plane.x, plane.y, rig.focal_z));
        let mask = render_mask_at_angle(&rig, &rig.pose_for_tip(&tip), width, angle).unwrap();
        let sk = skeletonize(&mask).unwrap();
        let set: std::collections::HashSet<_> = sk.pixels.iter().copied().collect();
        for &(x, y) in &sk.pixels {
            prop_assert!(mask.get(x, y));
            let full = (-1..=1).all(|dy: i64| (-1..=1).all(|dx: i64| set.contains(&(x + dx, y + dy))));
            prop_assert!(!full);
        }
    }

    #[test]
    fn gated_update_keeps_gate_and_covariance_valid(
        e0 in vec2(50.0), y in vec2(200.0), conf in 0.0f64..1.0, steps in 1usize..20,
    ) {
        let cfg = FilterConfig::default();
        let gp = GateParams::default();
        let mut s = FilterState::default();
        s.init_planar(e0, &cfg);
        for _ in 0..steps {
            s = predict(&s, 1.0 / 30.0, cfg.q0x, cfg.q0z);
        }
        let (post, d) = gated_update_planar(&s, y, Vec2::zeros(), conf, &gp, &cfg);
        prop_assert!((0.0..=1.0).contains(&d.g));
        prop_assert!(d.r > 0.0);
        prop_assert!((post.px - post.px.transpose()).abs().max() == 0.0);
        let ev = post.px.symmetric_eigen().eigenvalues;
        prop_assert!(ev.iter().all(|&l| l >= 0.0), "{ev:?}");
    }

    #[test]
    fn posterior_moves_monotonically_with_gate(e0 in vec2(50.0), y in vec2(100.0), r in 0.1f64..50.0) {
        let cfg = FilterConfig::default();
        let mut s = FilterState::default();
        s.init_planar(e0, &cfg);
        let s = predict(&s, 1.0 / 30.0, cfg.q0x, cfg.q0z);
        let pred = s.planar_pos();
        let eps = y - pred;
        let mut last = -1.0;
        for i in 0..=10 {
            let mut t = s;
            microservo::estimator::apply_planar(&mut t, eps, i as f64 / 10.0, r);
            let moved = (t.planar_pos() - pred).dot(&eps);
            prop_assert!(moved >= last - 1e-9);
            last = moved;
        }
    }

    #[test]
    fn conformal_quantile_covers_level(scores in prop::collection::vec(0.0f64..100.0, 1..200), level in 0.5f64..0.99) {
        let q = conformal_calibrate(&scores, level).unwrap();
        let covered = scores.iter().filter(|&&s| s <= q).count() as f64 / scores.len() as f64;
        prop_assert!(covered >= level - 1e-12);
    }

    #[test]
    fn saturations_hold_exactly(v in vec3(1e3), cap in 1e-6f64..10.0, x in -1e3f64..1e3) {
        prop_assert!(sat_norm(&v, cap).norm() <= cap);
        prop_assert!(sat(x, cap).abs() <= cap);
    }

    #[test]
    fn admittance_displacement_capped(v in vec3(0.1), f in vec3(50.0)) {
        let p = AdmittanceParams::default();
        let (_, dp) = admittance_step(&v, &f, &p);
        prop_assert!(dp.norm() <= p.v_max * p.dt * 1000.0 * (1.0 + 1e-12));
    }

    #[test]
    fn micro_law_caps_and_phase_rules(
        e_lat in vec2(2.0), ez in -3.0f64..3.0, ezd in -3.0f64..3.0, zm in -1.0f64..1.0, zr in -5.0f64..5.0,
        depth in any::<bool>(), vis in any::<bool>(),
    ) {
        let g = MicroGains::default();
        let phase = PhaseState { phase: if depth { Phase::DepthDominant } else { Phase::LateralDominant }, ..PhaseState::new(0.0) };
        let input = MicroInput { e_lat, e_z: [ez, ezd], z_model: zm, z_model_rate: zr, vis };
        let out = micro_step(&input, &phase, &g);
        prop_assert!(out.u_x.norm() <= g.v_x_max);
        prop_assert!(out.u_z.abs() <= g.v_z_max);
        if !vis {
            prop_assert_eq!((out.u_x, out.u_z), (Vec2::zeros(), 0.0));
        }
        if out.phase.phase == Phase::DepthDominant {
            prop_assert_eq!(out.u_x, Vec2::zeros());
        } else {
            // lateral phase never reads the live depth estimate
            let other = micro_step(&MicroInput { e_z: [-ez + 1.0, ezd * 2.0], ..input }, &phase, &g);
            prop_assert_eq!(out, other);
        }
    }

    #[test]
    fn box_qp_meets_kkt(
        m in prop::collection::vec(-3.0f64..3.0, 16), c in prop::collection::vec(-10.0f64..10.0, 4),
        lo in prop::collection::vec(-2.0f64..0.0, 4), width in prop::collection::vec(0.0f64..3.0, 4),
    ) {
        let m = DMatrix::from_row_slice(4, 4, &m);
        let h = m.transpose() * &m;
        let lo = DVector::from_vec(lo);
        let hi = &lo + DVector::from_vec(width);
        let s = box_qp(&h, &DVector::from_vec(c), &lo, &hi).unwrap();
        prop_assert!(s.kkt <= 1e-8, "kkt {}", s.kkt);
        for i in 0..4 {
            prop_assert!(s.x[i] >= lo[i] && s.x[i] <= hi[i]);
        }
    }

    #[test]
    fn dare_closed_loop_is_stable(seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = microservo::harness::verify::random_controllable_pair(&mut rng);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let (_, k) = dare_gain(&a, &b, &q, &r).unwrap();
        prop_assert!(spectral_radius(&(&a - &b * &k)) < 1.0);
    }

    #[test]
    fn legacy_monitor_never_increases(x in vec3(2.0), v in vec2(5.0), e in vec2(150.0), yaw in -3.1f64..3.1) {
        let params = LegacyParams::default();
        let cam = CameraModel::default();
        let r_hat = rot_z(yaw);
        let a = cam.l_img() * r_hat;
        let mut st = LegacyState { x, xdot: Vec3::new(v.x, v.y, 0.0) };
        let mut e = e;
        let mut val = legacy_lyapunov(&st, &e, &r_hat, &cam, &params).unwrap();
        for _ in 0..200 {
            let acc = legacy_shared_step(&st, &Vec3::zeros(), &e, &r_hat, &cam, &params).unwrap();
            let next = legacy_integrate(&st, &acc, params.dt);
            e -= a * (next.x - st.x);
            st = next;
            let v1 = legacy_lyapunov(&st, &e, &r_hat, &cam, &params).unwrap();
            prop_assert!(v1 <= val + 1e-9);
            val = v1;
        }
    }

    #[test]
    fn dropped_frames_carry_no_observation(seed in any::<u64>(), rate in 0.0f64..0.5) {
        let rig = Rig::default();
        let poses: Vec<TimedPose> = (0..60)
            .map(|i| TimedPose { t: i as f64 / 30.0, pose: rig.pose_for_tip(&rig.workspace_center) })
            .collect();
        let spec = CorruptionSpec { dropout_rate: rate, ..CorruptionSpec::default() };
        let a = observe(&rig, &poses, &spec, seed).unwrap();
        let b = observe(&rig, &poses, &spec, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for f in &a.frames {
            if !f.valid {
                prop_assert!(f.pixel_obs.is_none() && f.confidence.is_none() && f.depth_obs.is_none() && f.sharpness.is_none());
            }
        }
    }
}
