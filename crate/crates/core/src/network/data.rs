//! Synthetic rendered image/mesh pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::fitting::{project, recover_depth, Camera};
use crate::hand::{regress_keypoints, skin_params, HandModelAssets, HandParams};
use crate::render::render_mesh;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub count: usize,
    pub crop: usize,
    pub focal: f64,
    /// Standard deviation of the prior logits.
    pub logit_std: f64,
    /// Global rotation drawn uniformly from `[-r, r]` per axis (radians).
    pub orientation_range: f64,
    /// Fraction of the crop covered by the larger side of the hand.
    pub fill: f64,
    pub background: [f64; 3],
    pub color: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 16,
            crop: 192,
            focal: 1000.0,
            logit_std: 3.0,
            orientation_range: 0.4,
            fill: 0.75,
            background: [0.1, 0.1, 0.15],
            color: [0.9, 0.75, 0.6],
            seed: 0,
        }
    }
}

/// Prior pose from normal logits, random orientation, no translation.
pub fn random_params(
    assets: &HandModelAssets,
    rng: &mut impl Rng,
    logit_std: f64,
    orientation_range: f64,
) -> Result<HandParams> {
    let n = Normal::new(0.0, logit_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut p = HandParams::for_assets(assets);
    for x in p.w.iter_mut() {
        *x = n.sample(rng);
    }
    if orientation_range > 0.0 {
        p.w0 = [0, 1, 2].map(|_| rng.random_range(-orientation_range..=orientation_range));
    }
    Ok(p)
}

/// Image-aligned coordinates of camera-space `points`: pixel `x`, `y` and
/// wrist-relative depth scaled to pixels by the recovered depth.
pub fn image_aligned(
    points: &[[f64; 3]],
    keypoints: &[[f64; 3]],
    cam: &Camera,
) -> Result<Vec<[f64; 3]>> {
    let proj = project(points, cam)?;
    let root = keypoints[0];
    let rel: Vec<[f64; 3]> = keypoints
        .iter()
        .map(|p| [p[0] - root[0], p[1] - root[1], p[2] - root[2]])
        .collect();
    let depth = recover_depth(&rel, &project(keypoints, cam)?, cam)?;
    let k = cam.focal / depth;
    Ok(points
        .iter()
        .zip(proj)
        .map(|(p, uv)| [uv[0], uv[1], (p[2] - root[2]) * k])
        .collect())
}

/// Hand placed in front of a camera centred on the crop, framed to
/// `cfg.fill` of its width.
pub fn frame_params(assets: &HandModelAssets, mut params: HandParams, cfg: &SyntheticConfig) -> Result<(HandParams, Camera)> {
    let c = cfg.crop as f64 / 2.0;
    let cam = Camera::new(cfg.focal, [c, c])?;
    params.t_delta = [0.0; 3];
    params.s = 1.0;
    let v = skin_params(assets, &params)?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &v {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let depth = cfg.focal * extent / (cfg.fill * cfg.crop as f64);
    let center = [0, 1, 2].map(|k| (lo[k] + hi[k]) / 2.0);
    params.t_delta = [-center[0], -center[1], depth - center[2]];
    Ok((params, cam))
}

/// Renders one sample for fully specified parameters.
pub fn render_sample(assets: &HandModelAssets, params: &HandParams, cam: &Camera, cfg: &SyntheticConfig) -> Result<Sample> {
    let v = skin_params(assets, params)?;
    let kp = regress_keypoints(assets, &v)?;
    let mesh = image_aligned(&v, &kp, cam)?;
    let image = render_mesh(&mesh, assets.template.faces(), cfg.crop, cfg.crop, cfg.background, cfg.color);
    Ok(Sample { image, mesh })
}

/// `cfg.count` random rendered samples with their parameters.
pub fn synthetic_dataset(
    assets: &HandModelAssets,
    cfg: &SyntheticConfig,
) -> Result<Vec<(Sample, HandParams, Camera)>> {
    if cfg.crop == 0 || !(cfg.focal > 0.0) || !(cfg.fill > 0.0) {
        return Err(Error::InvalidArgument("crop, focal and fill must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.count)
        .map(|_| {
            let p = random_params(assets, &mut rng, cfg.logit_std, cfg.orientation_range)?;
            let (p, cam) = frame_params(assets, p, cfg)?;
            let s = render_sample(assets, &p, &cam, cfg)?;
            Ok((s, p, cam))
        })
        .collect()
}

pub fn synthetic_samples(assets: &HandModelAssets, cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    Ok(synthetic_dataset(assets, cfg)?.into_iter().map(|(s, _, _)| s).collect())
}
