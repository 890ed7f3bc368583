//! Pose and mesh error metrics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default 2D PCK range in pixels.
pub const PCK_RANGE_2D: (f64, f64) = (0.0, 30.0);
/// Default 3D PCK range in millimetres.
pub const PCK_RANGE_3D: (f64, f64) = (0.0, 50.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Row-major rotation applied as `R x`.
    pub rotation: [[f64; 3]; 3],
    pub scale: f64,
    pub translation: [f64; 3],
    pub aligned: Vec<[f64; 3]>,
}

impl Alignment {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [0, 1, 2].map(|i| {
            self.scale * (r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]) + self.translation[i]
        })
    }
}

/// Least-squares similarity (or rigid, with `with_scale = false`) transform
/// taking `source` onto `target` (Umeyama).
pub fn rigid_align(source: &[[f64; 3]], target: &[[f64; 3]], with_scale: bool) -> Result<Alignment> {
    if source.len() != target.len() {
        return Err(Error::Shape(format!("{} vs {} points", source.len(), target.len())));
    }
    if source.len() < 3 {
        return Err(Error::Degenerate("alignment needs at least 3 points".into()));
    }
    let n = source.len() as f64;
    let v = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);
    let mu_s = source.iter().map(v).sum::<Vector3<f64>>() / n;
    let mu_t = target.iter().map(v).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = v(s) - mu_s;
        let dt = v(t) - mu_t;
        cov += dt * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if var_s < 1e-300 {
        return Err(Error::Degenerate("source points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if sv[order[1]] <= 1e-12 * sv[order[0]].max(1e-300) {
        return Err(Error::Degenerate("point configuration is rank deficient".into()));
    }
    let mut d = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    let rot = u * d * vt;
    let scale = if with_scale {
        (0..3).map(|i| sv[i] * d[(i, i)]).sum::<f64>() / var_s
    } else {
        1.0
    };
    let trans = mu_t - scale * rot * mu_s;
    let mut rotation = [[0.0; 3]; 3];
    for (i, row) in rotation.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = rot[(i, j)];
        }
    }
    let mut out = Alignment {
        rotation,
        scale,
        translation: [trans[0], trans[1], trans[2]],
        aligned: Vec::new(),
    };
    out.aligned = source.iter().map(|p| out.apply(*p)).collect();
    Ok(out)
}

fn dist<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_pair<const D: usize>(pred: &[[f64; D]], gt: &[[f64; D]]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("no points".into()));
    }
    Ok(())
}

/// Per-point Euclidean distances.
pub fn distances<const D: usize>(pred: &[[f64; D]], gt: &[[f64; D]]) -> Result<Vec<f64>> {
    check_pair(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(a, b)| dist(a, b)).collect())
}

pub fn mean_error<const D: usize>(pred: &[[f64; D]], gt: &[[f64; D]]) -> Result<f64> {
    let d = distances(pred, gt)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub auc: f64,
}

/// PCK from precomputed distances.
pub fn pck_from_distances(distances: &[f64], thresholds: &[f64]) -> Result<PckCurve> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("no PCK thresholds".into()));
    }
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("PCK thresholds must be ascending".into()));
    }
    if distances.is_empty() {
        return Err(Error::Shape("no points".into()));
    }
    let n = distances.len() as f64;
    let values: Vec<f64> = thresholds
        .iter()
        .map(|t| distances.iter().filter(|d| **d <= *t).count() as f64 / n)
        .collect();
    let range = thresholds[thresholds.len() - 1] - thresholds[0];
    let auc = if range > 0.0 {
        thresholds
            .windows(2)
            .zip(values.windows(2))
            .map(|(t, v)| (t[1] - t[0]) * (v[0] + v[1]) / 2.0)
            .sum::<f64>()
            / range
    } else {
        values[0]
    };
    Ok(PckCurve {
        thresholds: thresholds.to_vec(),
        values,
        auc,
    })
}

pub fn pck<const D: usize>(pred: &[[f64; D]], gt: &[[f64; D]], thresholds: &[f64]) -> Result<PckCurve> {
    pck_from_distances(&distances(pred, gt)?, thresholds)
}

/// `count` evenly spaced thresholds over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

fn nearest(p: &[f64; 3], cloud: &[[f64; 3]]) -> f64 {
    cloud.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)
}

/// Harmonic mean of precision (predicted points within `d` of the ground
/// truth) and recall (ground-truth points within `d` of the prediction).
pub fn fscore(pred: &[[f64; 3]], gt: &[[f64; 3]], d: f64) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Shape("F-score needs non-empty clouds".into()));
    }
    let precision = pred.iter().filter(|p| nearest(p, gt) <= d).count() as f64 / pred.len() as f64;
    let recall = gt.iter().filter(|p| nearest(p, pred) <= d).count() as f64 / gt.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Orthographic image placement: `u = scale * x + tx`, `v = scale * y + ty`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthoCamera {
    pub scale: f64,
    pub translation: [f64; 2],
}

pub fn project_pose_2d(pose: &[[f64; 3]], cam: &OrthoCamera) -> Vec<[f64; 2]> {
    pose.iter()
        .map(|p| {
            [
                cam.scale * p[0] + cam.translation[0],
                cam.scale * p[1] + cam.translation[1],
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pck_worked_instance() {
        let c = pck_from_distances(&[1.0, 3.0], &[0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(c.values, vec![0.0, 0.5, 0.5, 1.0, 1.0]);
        // trapezoids: 0.25 + 0.5 + 0.75 + 1.0 over a range of 4
        assert!((c.auc - 2.5 / 4.0).abs() < 1e-15);
        assert!(pck_from_distances(&[1.0], &[]).is_err());
        assert!(pck_from_distances(&[1.0], &[2.0, 1.0]).is_err());
    }

    #[test]
    fn mean_error_examples() {
        assert_eq!(mean_error(&[[3.0, 4.0]], &[[0.0, 0.0]]).unwrap(), 5.0);
        assert_eq!(mean_error(&[[1.0, 2.0, 3.0]], &[[1.0, 2.0, 3.0]]).unwrap(), 0.0);
        assert!(mean_error::<2>(&[], &[]).is_err());
    }

    #[test]
    fn fscore_examples() {
        let a = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(fscore(&a, &a, 0.1).unwrap(), 1.0);
        let far = [[10.0, 0.0, 0.0], [11.0, 0.0, 0.0]];
        assert_eq!(fscore(&a, &far, 1.0).unwrap(), 0.0);
        let gt = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0], [6.0, 0.0, 0.0]];
        assert!((fscore(&a, &gt, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identity_alignment() {
        let p = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
        let a = rigid_align(&p, &p, true).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((a.rotation[i][j] - e).abs() < 1e-12);
            }
            assert!(a.translation[i].abs() < 1e-12);
        }
        let line = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        assert!(rigid_align(&line, &line, true).is_err());
    }

    #[test]
    fn orthographic_projection() {
        let cam = OrthoCamera {
            scale: 1.0,
            translation: [0.0, 0.0],
        };
        let a = project_pose_2d(&[[1.0, 2.0, 3.0]], &cam);
        let b = project_pose_2d(&[[1.0, 2.0, -7.0]], &cam);
        assert_eq!(a, b);
        let c = project_pose_2d(&[[2.0, 2.0, 3.0]], &cam);
        assert_eq!(c[0][0] - a[0][0], 1.0);
    }
}
