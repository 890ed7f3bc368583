//! Differentiable model evaluation on a [`Tape`].

use std::rc::Rc;

use super::{HandModelAssets, KEYPOINT_JOINT, N_KEYPOINTS};
use crate::autodiff::{concat_cols, concat_rows, GatherIndex, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Sparse `3K x (K * C)` map from flattened per-joint softmax weights to
/// flattened Euler angles.
#[derive(Debug, Clone)]
pub(crate) struct PriorMatrix {
    matrix: Rc<CsrMatrix>,
    joints: usize,
    clusters: usize,
}

impl PriorMatrix {
    pub(crate) fn new(centers: &Tensor) -> Result<Self> {
        let (k, c) = match centers.shape() {
            [k, c, 3] => (*k, *c),
            s => return Err(Error::Shape(format!("cluster centers {s:?}"))),
        };
        let d = centers.data();
        let mut entries = Vec::with_capacity(k * c * 3);
        for i in 0..k {
            for cl in 0..c {
                for a in 0..3 {
                    entries.push((3 * i + a, i * c + cl, d[(i * c + cl) * 3 + a]));
                }
            }
        }
        Ok(Self {
            matrix: Rc::new(CsrMatrix::from_triplets(3 * k, k * c, entries)?),
            joints: k,
            clusters: c,
        })
    }

    /// `K x C` logits to `K x 3` angles.
    pub(crate) fn apply<'t>(&self, w: Var<'t>) -> Result<Var<'t>> {
        if w.shape() != [self.joints, self.clusters] {
            return Err(Error::Shape(format!(
                "prior logits {:?}, expected [{}, {}]",
                w.shape(),
                self.joints,
                self.clusters
            )));
        }
        w.softmax_rows()?
            .reshape(vec![self.joints * self.clusters, 1])?
            .sparse_matmul(self.matrix.clone())?
            .reshape(vec![self.joints, 3])
    }
}

/// Model inputs recorded on a tape. `beta` is `|beta| x 1`, `theta` is
/// `K x 3`, `w0` and `t_delta` are `1 x 3` and `s` holds one value.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars<'t> {
    pub beta: Var<'t>,
    pub theta: Var<'t>,
    pub w0: Var<'t>,
    pub t_delta: Var<'t>,
    pub s: Var<'t>,
}

impl<'t> ParamVars<'t> {
    pub fn constants(
        tape: &'t Tape,
        beta: &[f64],
        theta: &Tensor,
        w0: [f64; 3],
        t_delta: [f64; 3],
        s: f64,
    ) -> Result<Self> {
        Ok(Self {
            beta: tape.constant(Tensor::new(vec![beta.len(), 1], beta.to_vec())?)?,
            theta: tape.constant(theta.clone())?,
            w0: tape.constant(Tensor::new(vec![1, 3], w0.to_vec())?)?,
            t_delta: tape.constant(Tensor::new(vec![1, 3], t_delta.to_vec())?)?,
            s: tape.constant(Tensor::scalar(s))?,
        })
    }
}

/// Precomputed constants for skinning a subset of the template vertices.
#[derive(Debug, Clone)]
pub struct SkinLayer {
    vertex_ids: Vec<usize>,
    template: Tensor,
    basis: Tensor,
    joint_rest: Tensor,
    joint_basis: Tensor,
    weights_expanded: Tensor,
    selector: Tensor,
    parents: Vec<Option<usize>>,
    rows: Vec<GatherIndex>,
    regressor_t: Rc<CsrMatrix>,
    prior: PriorMatrix,
}

impl SkinLayer {
    /// `subset` restricts evaluation to the given vertices (ascending, and
    /// covering the regressor support); `None` means all vertices.
    pub fn new(assets: &HandModelAssets, subset: Option<&[usize]>) -> Result<Self> {
        let n_all = assets.n_vertices();
        let ids: Vec<usize> = match subset {
            Some(s) => s.to_vec(),
            None => (0..n_all).collect(),
        };
        if ids.iter().any(|&v| v >= n_all) || ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "vertex subset must be strictly ascending and in range".into(),
            ));
        }
        let k = assets.n_joints();
        let nb = assets.n_betas();
        let n = ids.len();
        let tv = assets.template.vertices();
        let template = Tensor::new(
            vec![n, 3],
            ids.iter().flat_map(|&v| tv[v]).collect(),
        )?;
        let bd = assets.shape_basis.data();
        let mut basis = Vec::with_capacity(3 * n * nb);
        for &v in &ids {
            basis.extend_from_slice(&bd[3 * v * nb..(3 * v + 3) * nb]);
        }
        let basis = Tensor::new(vec![3 * n, nb], basis)?;

        let mut local = vec![usize::MAX; n_all];
        for (i, &v) in ids.iter().enumerate() {
            local[v] = i;
        }
        let mut reg_entries = Vec::new();
        for v in 0..n_all {
            for (kp, w) in assets.regressor.row(v) {
                if w == 0.0 {
                    continue;
                }
                if local[v] == usize::MAX {
                    return Err(Error::InvalidArgument(format!(
                        "vertex subset misses regressor support vertex {v}"
                    )));
                }
                reg_entries.push((kp, local[v], w));
            }
        }
        let regressor_t = Rc::new(CsrMatrix::from_triplets(N_KEYPOINTS, n, reg_entries)?);

        // Shape-dependent joint offsets through the keypoint regressor columns.
        let full_t = assets.regressor.transpose();
        let mut joint_basis = vec![0.0; 3 * k * nb];
        if k == KEYPOINT_JOINT.iter().flatten().count() {
            for (kp, joint) in KEYPOINT_JOINT.iter().enumerate() {
                let Some(j) = *joint else { continue };
                for (v, w) in full_t.row(kp) {
                    for c in 0..3 {
                        for b in 0..nb {
                            joint_basis[(3 * j + c) * nb + b] += w * bd[(3 * v + c) * nb + b];
                        }
                    }
                }
            }
        }
        let joint_basis = Tensor::new(vec![3 * k, nb], joint_basis)?;
        let joint_rest = Tensor::from_rows(&assets.joint_rest);

        let sw = assets.skin_weights.data();
        let mut wexp = Vec::with_capacity(n * 3 * k);
        for &v in &ids {
            for j in 0..k {
                let w = sw[v * k + j];
                wexp.extend_from_slice(&[w, w, w]);
            }
        }
        let weights_expanded = Tensor::new(vec![n, 3 * k], wexp)?;
        let mut sel = vec![0.0; 3 * k * 3];
        for j in 0..k {
            for c in 0..3 {
                sel[(3 * j + c) * 3 + c] = 1.0;
            }
        }
        Ok(Self {
            vertex_ids: ids,
            template,
            basis,
            joint_rest,
            joint_basis,
            weights_expanded,
            selector: Tensor::new(vec![3 * k, 3], sel)?,
            parents: assets.parents.clone(),
            rows: (0..k).map(|j| Rc::new(vec![j as i64])).collect(),
            regressor_t,
            prior: PriorMatrix::new(&assets.cluster_centers)?,
        })
    }

    pub fn vertex_ids(&self) -> &[usize] {
        &self.vertex_ids
    }

    /// Pose prior: `K x C` logits to `K x 3` Euler angles.
    pub fn theta<'t>(&self, w: Var<'t>) -> Result<Var<'t>> {
        self.prior.apply(w)
    }

    /// Rest joints for the given shape, `K x 3`.
    pub fn joints<'t>(&self, beta: Var<'t>) -> Result<Var<'t>> {
        let tape = beta.tape();
        let rest = tape.constant(self.joint_rest.clone())?;
        if self.joint_basis.shape()[1] == 0 {
            return Ok(rest);
        }
        let k = self.parents.len();
        let jb = tape.constant(self.joint_basis.clone())?;
        rest.add(jb.matmul(beta)?.reshape(vec![k, 3])?)
    }

    /// Posed, scaled and translated vertices of the subset, `n x 3`.
    pub fn vertices<'t>(&self, p: &ParamVars<'t>) -> Result<Var<'t>> {
        let tape = p.beta.tape();
        let n = self.vertex_ids.len();
        let k = self.parents.len();
        let mut x = tape.constant(self.template.clone())?;
        if self.basis.shape()[1] > 0 {
            let b = tape.constant(self.basis.clone())?;
            x = x.add(b.matmul(p.beta)?.reshape(vec![n, 3])?)?;
        }
        let joints = self.joints(p.beta)?;
        if p.theta.shape() != [k, 3] {
            return Err(Error::Shape(format!("pose {:?} for {k} joints", p.theta.shape())));
        }
        let rots = p.theta.euler_to_rotmat()?;
        let root_rot = p.w0.euler_to_rotmat()?.reshape(vec![3, 3])?;
        let mut m: Vec<Var<'t>> = Vec::with_capacity(k);
        let mut b: Vec<Var<'t>> = Vec::with_capacity(k);
        let mut blocks = Vec::with_capacity(k);
        for j in 0..k {
            let r_t = rots
                .gather_rows(self.rows[j].clone())?
                .reshape(vec![3, 3])?
                .transpose()?;
            let jj = joints.gather_rows(self.rows[j].clone())?;
            let (mj, bj) = match self.parents[j] {
                None => {
                    let mj = r_t.matmul(root_rot.transpose()?)?;
                    let bj = jj.sub(jj.matmul(mj)?)?;
                    (mj, bj)
                }
                Some(pa) => {
                    let mj = r_t.matmul(m[pa])?;
                    let bj = jj.matmul(m[pa])?.add(b[pa])?.sub(jj.matmul(mj)?)?;
                    (mj, bj)
                }
            };
            blocks.push(concat_rows(&[mj, bj])?);
            m.push(mj);
            b.push(bj);
        }
        let transforms = concat_cols(&blocks)?;
        let ones = tape.constant(Tensor::filled(vec![n, 1], 1.0))?;
        let xh = concat_cols(&[x, ones])?;
        let w = tape.constant(self.weights_expanded.clone())?;
        let sel = tape.constant(self.selector.clone())?;
        xh.matmul(transforms)?
            .mul(w)?
            .matmul(sel)?
            .mul_scalar(p.s)?
            .add_row(p.t_delta)
    }

    /// Keypoints regressed from subset vertices, `21 x 3`.
    pub fn keypoints<'t>(&self, vertices: Var<'t>) -> Result<Var<'t>> {
        vertices.sparse_matmul(self.regressor_t.clone())
    }
}
