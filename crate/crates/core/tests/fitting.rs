mod common;

use common::*;
use handmesh::fitting::*;
use handmesh::hand::*;
use handmesh::metrics::{mean_error, rigid_align};
use handmesh::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn short(stage1: usize, stage2: usize) -> FitConfig {
    FitConfig {
        stage1_iterations: stage1,
        stage2_iterations: stage2,
        ..FitConfig::default()
    }
}

/// Every scalar of `HandParams` as a flat list of (getter-setter) slots.
fn perturb(p: &HandParams, idx: usize, h: f64) -> HandParams {
    let mut q = p.clone();
    let nb = q.beta.len();
    let nw = q.w.len();
    match idx {
        i if i < nb => q.beta[i] += h,
        i if i < nb + nw => q.w[i - nb] += h,
        i if i < nb + nw + 3 => q.w0[i - nb - nw] += h,
        i if i < nb + nw + 6 => q.t_delta[i - nb - nw - 3] += h,
        _ => q.s += h,
    }
    q
}

fn flat(p: &HandParams) -> Vec<f64> {
    let mut v = p.beta.clone();
    v.extend(&p.w);
    v.extend(p.w0);
    v.extend(p.t_delta);
    v.push(p.s);
    v
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let a = assets();
    let cam = crop_camera();
    let cfg = FitConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for config in 0..10 {
        let inst = instance(a, &mut rng, 3.0);
        let mut p = inst.params.clone();
        for b in p.beta.iter_mut() {
            *b = rng.random_range(-0.1..0.1);
        }
        p.s = rng.random_range(0.9..1.1);
        let mut target = inst.target.clone();
        for c in target.confidence.iter_mut() {
            *c = rng.random_range(0.3..1.0);
        }
        let (_, g) = energy_gradient(a, &p, &cam, &target, &cfg).unwrap();
        let g = flat(&g);
        let n = g.len();
        let mut idx: Vec<usize> = (0..10).chain(n - 7..n).collect();
        idx.extend((0..30).map(|_| rng.random_range(10..n - 7)));
        let h = 1e-5;
        for i in idx {
            let fp = energy(a, &perturb(&p, i, h), &cam, &target, &cfg).unwrap().total;
            let fm = energy(a, &perturb(&p, i, -h), &cam, &target, &cfg).unwrap().total;
            let fd = (fp - fm) / (2.0 * h);
            assert!(grad_close(g[i], fd), "config {config} slot {i}: {} vs {fd}", g[i]);
        }
    }
}

#[test]
fn schedule_is_instrumented() {
    let a = assets();
    let inst = instance(a, &mut ChaCha8Rng::seed_from_u64(1), 0.0);
    let cfg = FitConfig::default();
    let mut seen = Vec::new();
    let res = fit_batch(
        a,
        &[FitTask {
            target: inst.target.clone(),
            camera: crop_camera(),
            init: None,
        }],
        &cfg,
        &mut |info| {
            seen.push((
                info.stage,
                info.iteration,
                info.global_iteration,
                info.learning_rates,
                info.active_keypoints.to_vec(),
                info.optimized.to_vec(),
            ))
        },
    )
    .unwrap();
    assert_eq!(res[0].iterations, 4000);
    let s1: Vec<_> = seen.iter().filter(|s| s.0 == 1).collect();
    let s2: Vec<_> = seen.iter().filter(|s| s.0 == 2).collect();
    assert_eq!(s1.len(), 1500);
    assert_eq!(s2.len(), 2500);
    for s in &s1 {
        assert_eq!(s.4, vec![0, 5, 9, 13, 17]);
        assert_eq!(s.5, vec!["s", "t_delta", "w0"]);
    }
    for s in &s2 {
        assert_eq!(s.4, (0..21).collect::<Vec<_>>());
        assert_eq!(s.5, vec!["s", "t_delta", "w0", "w", "beta"]);
    }
    for (k, s) in seen.iter().enumerate() {
        assert_eq!(s.2, k);
        let f = 0.95f64.powi((k / 500) as i32);
        assert_eq!(s.3, [1e-2 * f, 1e-2 * f, 1e-5 * f]);
    }
    assert_eq!(seen[1500].1, 0);
    assert_eq!(seen[3999].1, 2499);
}

#[test]
fn stage_one_leaves_shape_and_pose_logits_alone() {
    let a = assets();
    let inst = instance(a, &mut ChaCha8Rng::seed_from_u64(2), 0.0);
    let res = fit(a, &inst.target, &crop_camera(), &short(200, 0)).unwrap();
    assert!(res.params.beta.iter().all(|b| *b == 0.0));
    assert!(res.params.w.iter().all(|w| *w == 0.0));
    assert_ne!(res.params.w0, [0.0; 3]);
}

#[test]
fn noiseless_targets_are_recovered() {
    let a = assets();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3 {
        let inst = instance(a, &mut rng, 0.0);
        let res = fit(a, &inst.target, &crop_camera(), &FitConfig::default()).unwrap();
        assert!(res.mean_residual() < 0.5, "{}", res.mean_residual());
        let al = rigid_align(&res.keypoints_3d, &inst.keypoints, true).unwrap();
        let e3 = mean_error(&al.aligned, &inst.keypoints).unwrap();
        assert!(e3 < 0.02 * bbox_diagonal(&inst.vertices));
        assert!(res.terms.total <= res.initial_objective);
    }
}

#[test]
fn ground_truth_initialisation_is_kept() {
    let a = assets();
    let cam = crop_camera();
    let mut p = HandParams::for_assets(a);
    p.t_delta = [0.0, 95.0, 1300.0];
    let kp = regress_keypoints(a, &skin_params(a, &p).unwrap()).unwrap();
    let target = Keypoints2D::certain(project(&kp, &cam).unwrap()).unwrap();
    let cfg = short(100, 200);
    let res = fit_batch(
        a,
        &[FitTask {
            target: target.clone(),
            camera: cam,
            init: Some(p.clone()),
        }],
        &cfg,
        &mut |_| {},
    )
    .unwrap()
    .remove(0);
    let init = energy(a, &p, &cam, &target, &cfg).unwrap();
    assert!(init.e2d < 1e-18);
    assert_eq!(res.initial_objective, init.total);
    assert!(res.terms.total <= init.total);
    assert!(res.terms.e2d < 1e-6 * 192.0 * 192.0);
}

#[test]
fn batch_matches_individual_fits() {
    let a = assets();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = short(60, 60);
    let tasks: Vec<FitTask> = (0..8)
        .map(|_| FitTask {
            target: instance(a, &mut rng, 1.0).target,
            camera: crop_camera(),
            init: None,
        })
        .collect();
    let batch = fit_batch(a, &tasks, &cfg, &mut |_| {}).unwrap();
    for (t, b) in tasks.iter().zip(&batch) {
        let single = fit(a, &t.target, &t.camera, &cfg).unwrap();
        assert_eq!(&single, b);
    }
}

#[test]
fn fitting_is_deterministic() {
    let a = assets();
    let inst = instance(a, &mut ChaCha8Rng::seed_from_u64(5), 2.0);
    let cfg = short(50, 50);
    let x = fit(a, &inst.target, &crop_camera(), &cfg).unwrap();
    let y = fit(a, &inst.target, &crop_camera(), &cfg).unwrap();
    assert_eq!(x, y);
}

#[test]
fn divergence_reports_last_finite_state() {
    let a = assets();
    let inst = instance(a, &mut ChaCha8Rng::seed_from_u64(6), 0.0);
    let cfg = FitConfig {
        lr_shape: 1e200,
        ..short(0, 5)
    };
    let init = initialize(a, &inst.target, &crop_camera(), &cfg).unwrap();
    match fit(a, &inst.target, &crop_camera(), &cfg) {
        Err(Error::Divergence {
            iteration,
            last_finite,
        }) => {
            assert_eq!(iteration, 1);
            assert_eq!(*last_finite, init);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn too_few_confident_keypoints() {
    let a = assets();
    let inst = instance(a, &mut ChaCha8Rng::seed_from_u64(7), 0.0);
    let mut target = inst.target.clone();
    for c in target.confidence.iter_mut().skip(5) {
        *c = 0.01;
    }
    assert!(fit(a, &target, &crop_camera(), &short(1, 1)).is_err());
}

#[test]
fn bone_term_ignores_target_translation() {
    let a = assets();
    let inst = instance(a, &mut ChaCha8Rng::seed_from_u64(8), 3.0);
    let cam = crop_camera();
    let cfg = FitConfig::default();
    let mut moved = inst.target.clone();
    for p in moved.points.iter_mut() {
        p[0] += 17.0;
        p[1] -= 5.0;
    }
    let e1 = energy(a, &inst.params, &cam, &inst.target, &cfg).unwrap();
    let e2 = energy(a, &inst.params, &cam, &moved, &cfg).unwrap();
    assert!((e1.e_bone - e2.e_bone).abs() < 1e-9);
    assert!(e2.e2d > e1.e2d);
}

#[test]
fn projection_matches_scalar_loop() {
    let cam = Camera::new(812.5, [40.0, -3.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pts: Vec<[f64; 3]> = (0..50)
        .map(|_| [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(10.0..900.0)])
        .collect();
    let got = project(&pts, &cam).unwrap();
    for (p, q) in pts.iter().zip(&got) {
        let u = 812.5 * p[0] / p[2] + 40.0;
        let v = 812.5 * p[1] / p[2] - 3.0;
        assert!((q[0] - u).abs() <= 1e-12 * u.abs().max(1.0));
        assert!((q[1] - v).abs() <= 1e-12 * v.abs().max(1.0));
    }
}

#[test]
fn depth_heuristic_inverts_weak_perspective() {
    let a = assets();
    let cam = crop_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let p = sample_params(a, &mut rng);
        let mut v = skin_params(a, &p).unwrap();
        let c = v.iter().fold([0.0; 3], |acc, q| [acc[0] + q[0], acc[1] + q[1], acc[2] + q[2]]);
        let n = v.len() as f64;
        v.iter_mut().for_each(|q| (0..3).for_each(|k| q[k] -= c[k] / n));
        let d = rng.random_range(300.0..5000.0);
        let proj: Vec<[f64; 2]> = v
            .iter()
            .map(|q| [cam.focal * q[0] / d + 96.0, cam.focal * q[1] / d + 96.0])
            .collect();
        let z = recover_depth(&v, &proj, &cam).unwrap();
        assert!((z - d).abs() < 0.02 * d);
    }
}
