use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use microservo::calibration::chamfer_bidirectional;
use microservo::controller::{box_qp, dare_gain, DT};
use microservo::estimator::{gated_update_planar, predict, FilterConfig, FilterState, GateParams};
use microservo::geometry::{Vec2, Vec3};
use microservo::labeling::skeletonize;
use microservo::scenario::{render_mask, Rig};
use nalgebra::{DMatrix, DVector};

fn chamfer(c: &mut Criterion) {
    let p: Vec<Vec2> = (0..500).map(|i| {
        let t = i as f64 * 0.0126;
        Vec2::new(320.0 + 150.0 * t.cos(), 240.0 + 100.0 * (2.0 * t).sin())
    }).collect();
    let q: Vec<Vec2> = p.iter().enumerate().map(|(i, v)| v + Vec2::new((i % 7) as f64 * 0.3, (i % 5) as f64 * -0.2)).collect();
    c.bench_function("chamfer_500", |b| b.iter(|| chamfer_bidirectional(black_box(&p), black_box(&q)).unwrap()));
}

fn kf_update(c: &mut Criterion) {
    let params = GateParams::default();
    let cfg = FilterConfig::default();
    let target = Vec2::new(320.0, 240.0);
    let (s0, _) = gated_update_planar(&FilterState::default(), Vec2::new(330.0, 235.0), target, 0.9, &params, &cfg);
    c.bench_function("kf_predict_update", |b| {
        b.iter(|| {
            let s = predict(black_box(&s0), DT, cfg.q0x, cfg.q0z);
            gated_update_planar(&s, black_box(Vec2::new(331.0, 236.0)), target, 0.8, &params, &cfg)
        })
    });
}

fn dare(c: &mut Criterion) {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, DT, 0.0, 1.0 - DT / 0.2]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, DT / 0.2]);
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![167.5, 14.0]));
    let r = DMatrix::identity(1, 1);
    c.bench_function("dare_2x1", |bch| bch.iter(|| dare_gain(black_box(&a), &b, &q, &r).unwrap()));
}

fn qp(c: &mut Criterion) {
    let n = 6;
    let m = DMatrix::from_fn(n, n, |i, j| ((i * 3 + j * 5) % 7) as f64 * 0.1);
    let h = &m * m.transpose() + DMatrix::identity(n, n);
    let g = DVector::from_fn(n, |i, _| (i as f64 - 2.5) * 0.7);
    let lo = DVector::from_element(n, -0.5);
    let hi = DVector::from_element(n, 0.5);
    c.bench_function("box_qp_6", |b| b.iter(|| box_qp(black_box(&h), black_box(&g), &lo, &hi).unwrap()));
}

fn skeleton(c: &mut Criterion) {
    let rig = Rig::default();
    let tip = rig.tip_from_camera(&Vec3::new(0.3, -0.2, rig.focal_z));
    let mask = render_mask(&rig, &rig.pose_for_tip(&tip), 5).unwrap();
    c.bench_function("skeletonize_640x480_w5", |b| b.iter(|| skeletonize(black_box(&mask)).unwrap()));
}

criterion_group!(benches, chamfer, kf_update, dare, qp, skeleton);
criterion_main!(benches);
