//! Articulated hand model: linear blend skinning with a shape basis, a
//! convex-hull pose prior over per-joint Euler-angle clusters and a sparse
//! keypoint regressor.
//!
//! Joints follow the 16-joint layout `wrist, index(3), middle(3), little(3),
//! ring(3), thumb(3)`. Keypoints follow the 21-point OpenPose hand layout:
//! wrist, then thumb, index, middle, ring and little finger, each as
//! four points from the base to the tip.

mod io;
mod kmeans;
mod layer;
mod synth;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::sparse::CsrMatrix;

pub use kmeans::kmeans;
pub use layer::{ParamVars, SkinLayer};
pub use synth::{generate_synthetic_assets, JointLimits, SynthConfig};

pub const N_JOINTS: usize = 16;
pub const N_KEYPOINTS: usize = 21;
pub const N_TIPS: usize = 5;
pub const N_CLUSTERS: usize = 64;
pub const N_BETAS: usize = 10;

/// Parent of every joint; `None` for the wrist.
pub const JOINT_PARENTS: [Option<usize>; N_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(0),
    Some(4),
    Some(5),
    Some(0),
    Some(7),
    Some(8),
    Some(0),
    Some(10),
    Some(11),
    Some(0),
    Some(13),
    Some(14),
];

/// Joint represented by each keypoint; `None` for fingertips.
pub const KEYPOINT_JOINT: [Option<usize>; N_KEYPOINTS] = [
    Some(0),
    Some(13),
    Some(14),
    Some(15),
    None,
    Some(1),
    Some(2),
    Some(3),
    None,
    Some(4),
    Some(5),
    Some(6),
    None,
    Some(10),
    Some(11),
    Some(12),
    None,
    Some(7),
    Some(8),
    Some(9),
    None,
];

pub const WRIST: usize = 0;
pub const FINGERTIPS: [usize; N_TIPS] = [4, 8, 12, 16, 20];
/// Finger base keypoints: thumb MCP, then index to little MCP.
pub const MCPS: [usize; 5] = [2, 5, 9, 13, 17];

/// The 20 parent-child links of the keypoint tree.
pub const BONES: [(usize, usize); 20] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (0, 5),
    (5, 6),
    (6, 7),
    (7, 8),
    (0, 9),
    (9, 10),
    (10, 11),
    (11, 12),
    (0, 13),
    (13, 14),
    (14, 15),
    (15, 16),
    (0, 17),
    (17, 18),
    (18, 19),
    (19, 20),
];

#[derive(Debug, Clone, PartialEq)]
pub struct HandModelAssets {
    pub template: TriMesh,
    pub parents: Vec<Option<usize>>,
    pub joint_rest: Vec<[f64; 3]>,
    /// `N x K`, rows nonnegative and summing to one.
    pub skin_weights: Tensor,
    /// `3N x |beta|`; row `3v + c` is coordinate `c` of vertex `v`.
    pub shape_basis: Tensor,
    /// `N x 21`, one convex combination of vertices per keypoint.
    pub regressor: CsrMatrix,
    /// `K x C x 3` Euler angles.
    pub cluster_centers: Tensor,
}

impl HandModelAssets {
    pub fn n_vertices(&self) -> usize {
        self.template.n_vertices()
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn n_betas(&self) -> usize {
        self.shape_basis.shape().get(1).copied().unwrap_or(0)
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_centers.shape().get(1).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vertices();
        let k = self.n_joints();
        let mut roots = 0;
        for (j, p) in self.parents.iter().enumerate() {
            match p {
                None => roots += 1,
                Some(p) if *p < j => {}
                Some(p) => {
                    return Err(Error::InvalidArgument(format!(
                        "joint {j} has parent {p}; parents must precede children"
                    )))
                }
            }
        }
        if roots != 1 || self.parents.first() != Some(&None) {
            return Err(Error::InvalidArgument("kinematic tree needs joint 0 as its only root".into()));
        }
        if self.joint_rest.len() != k {
            return Err(Error::Shape(format!("{} rest joints for {k} joints", self.joint_rest.len())));
        }
        if self.skin_weights.shape() != [n, k] {
            return Err(Error::Shape(format!("skin weights {:?}", self.skin_weights.shape())));
        }
        for (v, row) in self.skin_weights.data().chunks_exact(k).enumerate() {
            let sum: f64 = row.iter().sum();
            let nnz = row.iter().filter(|&&x| x != 0.0).count();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&x| x < 0.0) || nnz > 4 {
                return Err(Error::InvalidArgument(format!(
                    "skin weights of vertex {v} are not a convex combination of at most 4 joints"
                )));
            }
        }
        let (rows, _) = self.shape_basis.dims2()?;
        if rows != 3 * n {
            return Err(Error::Shape(format!("shape basis {:?}", self.shape_basis.shape())));
        }
        if self.regressor.nrows() != n || self.regressor.ncols() != N_KEYPOINTS {
            return Err(Error::Shape(format!(
                "regressor is {}x{}",
                self.regressor.nrows(),
                self.regressor.ncols()
            )));
        }
        let t = self.regressor.transpose();
        for kp in 0..N_KEYPOINTS {
            if (t.row_sum(kp) - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("regressor column {kp} does not sum to 1")));
            }
        }
        let cs = self.cluster_centers.shape();
        if cs.len() != 3 || cs[0] != k || cs[2] != 3 || cs[1] == 0 {
            return Err(Error::Shape(format!("cluster centers {cs:?}")));
        }
        Ok(())
    }

    /// Union of the regressor's supporting vertices, ascending.
    pub fn regressor_support(&self) -> Vec<usize> {
        (0..self.n_vertices())
            .filter(|&v| self.regressor.row(v).any(|(_, w)| w != 0.0))
            .collect()
    }
}

/// Model parameters. `w` holds `K x C` prior logits row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandParams {
    pub beta: Vec<f64>,
    pub w: Vec<f64>,
    pub w0: [f64; 3],
    pub t_delta: [f64; 3],
    pub s: f64,
}

impl HandParams {
    /// Zero shape, uniform prior logits, identity orientation, unit scale.
    pub fn neutral(n_betas: usize, n_joints: usize, n_clusters: usize) -> Self {
        Self {
            beta: vec![0.0; n_betas],
            w: vec![0.0; n_joints * n_clusters],
            w0: [0.0; 3],
            t_delta: [0.0; 3],
            s: 1.0,
        }
    }

    pub fn for_assets(assets: &HandModelAssets) -> Self {
        Self::neutral(assets.n_betas(), assets.n_joints(), assets.n_clusters())
    }

    pub fn validate(&self, assets: &HandModelAssets) -> Result<()> {
        if self.beta.len() != assets.n_betas() {
            return Err(Error::Shape(format!(
                "{} shape coefficients, model has {}",
                self.beta.len(),
                assets.n_betas()
            )));
        }
        if self.w.len() != assets.n_joints() * assets.n_clusters() {
            return Err(Error::Shape(format!("{} prior logits", self.w.len())));
        }
        let finite = self
            .beta
            .iter()
            .chain(&self.w)
            .chain(&self.w0)
            .chain(&self.t_delta)
            .chain(std::iter::once(&self.s))
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("hand parameters".into()));
        }
        if self.s <= 0.0 {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {}", self.s)));
        }
        Ok(())
    }
}

/// Per-joint softmax-weighted average of the cluster centers (`K x 3`).
pub fn pose_prior(w: &Tensor, centers: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let prior = layer::PriorMatrix::new(centers)?;
    let wv = tape.constant(w.clone())?;
    let theta = prior.apply(wv)?;
    let out = theta.value().clone();
    Ok(out)
}

/// Skinned vertices for an explicit per-joint pose `theta` (`K x 3`).
pub fn skin(
    assets: &HandModelAssets,
    beta: &[f64],
    theta: &Tensor,
    w0: [f64; 3],
    t_delta: [f64; 3],
    s: f64,
) -> Result<Vec<[f64; 3]>> {
    let layer = SkinLayer::new(assets, None)?;
    let tape = Tape::new();
    let vars = ParamVars::constants(&tape, beta, theta, w0, t_delta, s)?;
    let out = layer.vertices(&vars)?;
    let rows = out.value().to_rows3()?;
    Ok(rows)
}

/// Skinned vertices for a full parameter set, pose taken from the prior.
pub fn skin_params(assets: &HandModelAssets, params: &HandParams) -> Result<Vec<[f64; 3]>> {
    params.validate(assets)?;
    let w = Tensor::new(vec![assets.n_joints(), assets.n_clusters()], params.w.clone())?;
    let theta = pose_prior(&w, &assets.cluster_centers)?;
    skin(assets, &params.beta, &theta, params.w0, params.t_delta, params.s)
}

/// `regressor^T * vertices`, 21 keypoints in OpenPose order.
pub fn regress_keypoints(assets: &HandModelAssets, vertices: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if vertices.len() != assets.regressor.nrows() {
        return Err(Error::Shape(format!(
            "{} vertices for a regressor over {}",
            vertices.len(),
            assets.regressor.nrows()
        )));
    }
    let flat: Vec<f64> = vertices.iter().flatten().copied().collect();
    let out = assets.regressor.transpose().mul_dense(&flat, 3)?;
    Ok(out.chunks_exact(3).map(|r| [r[0], r[1], r[2]]).collect())
}

pub use io::{load_assets, save_assets};
