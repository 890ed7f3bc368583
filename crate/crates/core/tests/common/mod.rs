#![allow(dead_code)]

use std::sync::OnceLock;

use handmesh::fitting::{project, Camera, Keypoints2D};
use handmesh::hand::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn assets() -> &'static HandModelAssets {
    static A: OnceLock<HandModelAssets> = OnceLock::new();
    A.get_or_init(|| generate_synthetic_assets(&SynthConfig::default()).unwrap())
}

/// 1000 px focal, principal point at the center of a 192 px crop.
pub fn crop_camera() -> Camera {
    Camera::new(1000.0, [96.0, 96.0]).unwrap()
}

/// Pose drawn through the prior from random logits, small global rotation,
/// hand framed inside the crop.
pub fn sample_params(a: &HandModelAssets, rng: &mut ChaCha8Rng) -> HandParams {
    let n = Normal::new(0.0, 3.0).unwrap();
    let mut p = HandParams::for_assets(a);
    for x in p.w.iter_mut() {
        *x = n.sample(rng);
    }
    p.w0 = [0, 1, 2].map(|_| rng.random_range(-0.4..0.4));
    p.t_delta = [
        rng.random_range(-10.0..10.0),
        95.0 + rng.random_range(-10.0..10.0),
        1300.0,
    ];
    p
}

pub struct Instance {
    pub params: HandParams,
    pub vertices: Vec<[f64; 3]>,
    pub keypoints: Vec<[f64; 3]>,
    pub clean: Vec<[f64; 2]>,
    pub target: Keypoints2D,
}

pub fn instance(a: &HandModelAssets, rng: &mut ChaCha8Rng, noise_px: f64) -> Instance {
    let params = sample_params(a, rng);
    let vertices = skin_params(a, &params).unwrap();
    let keypoints = regress_keypoints(a, &vertices).unwrap();
    let clean = project(&keypoints, &crop_camera()).unwrap();
    let n = Normal::new(0.0, 1.0).unwrap();
    let noisy = clean
        .iter()
        .map(|p| [p[0] + noise_px * n.sample(rng), p[1] + noise_px * n.sample(rng)])
        .collect();
    Instance {
        params,
        vertices,
        keypoints,
        clean,
        target: Keypoints2D::certain(noisy).unwrap(),
    }
}

pub fn bbox_diagonal(points: &[[f64; 3]]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    (0..3).map(|c| (hi[c] - lo[c]).powi(2)).sum::<f64>().sqrt()
}

/// Central-difference agreement: relative error below `1e-4`, or absolute
/// error below `1e-7` for gradients smaller than `1e-3`.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    if numeric.abs() < 1e-3 && analytic.abs() < 1e-3 {
        diff < 1e-7 || diff <= 1e-4 * numeric.abs().max(analytic.abs())
    } else {
        diff <= 1e-4 * numeric.abs().max(analytic.abs())
    }
}
