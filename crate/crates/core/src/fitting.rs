//! Fitting the hand model to 2D keypoints.
//!
//! The objective is `E_2D + E_bone + E_reg` over projected model keypoints.
//! Optimisation runs in two Adam stages: first scale, translation and global
//! orientation against the wrist and finger MCPs, then every parameter
//! against all keypoints.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    concat_cols, sum_all, Adam, AdamConfig, GatherIndex, ParamGroup, StepDecay, Tape, Tensor,
    Var,
};
use crate::error::{Error, Result};
use crate::hand::{
    regress_keypoints, skin_params, HandModelAssets, HandParams, ParamVars, SkinLayer, BONES,
    FINGERTIPS, MCPS, N_KEYPOINTS, WRIST,
};

/// Wrist and the MCPs of the four fingers.
pub const STAGE1_KEYPOINTS: [usize; 5] = [WRIST, 5, 9, 13, 17];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Pixels.
    pub focal: f64,
    pub principal_point: [f64; 2],
}

impl Camera {
    pub fn new(focal: f64, principal_point: [f64; 2]) -> Result<Self> {
        let cam = Self {
            focal,
            principal_point,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::InvalidArgument(format!("focal must be positive, got {}", self.focal)));
        }
        if !self.principal_point.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("principal point".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoints2D {
    pub points: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

impl Keypoints2D {
    pub fn new(points: Vec<[f64; 2]>, confidence: Vec<f64>) -> Result<Self> {
        let kp = Self { points, confidence };
        kp.validate()?;
        Ok(kp)
    }

    /// All confidences set to one.
    pub fn certain(points: Vec<[f64; 2]>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0; n])
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != N_KEYPOINTS || self.confidence.len() != N_KEYPOINTS {
            return Err(Error::Shape(format!(
                "expected {N_KEYPOINTS} keypoints and confidences, got {} and {}",
                self.points.len(),
                self.confidence.len()
            )));
        }
        if !self.points.iter().flatten().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("keypoint coordinates".into()));
        }
        if let Some(c) = self.confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::InvalidArgument(format!("confidence {c} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Per-keypoint weights of the 2D term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMask {
    pub weights: Vec<f64>,
}

impl Default for JointMask {
    fn default() -> Self {
        let mut weights = vec![1.0; N_KEYPOINTS];
        weights[WRIST] = 2.5;
        for t in FINGERTIPS {
            weights[t] = 1.7;
        }
        for m in MCPS {
            weights[m] = 0.7;
        }
        Self { weights }
    }
}

impl JointMask {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != N_KEYPOINTS {
            return Err(Error::Shape(format!("mask has {} weights", self.weights.len())));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("mask weights must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub e2d: f64,
    pub bone: f64,
    pub reg: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            e2d: 1.0,
            bone: 1.0,
            reg: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    /// Scale and translation.
    pub lr_camera: f64,
    /// Global orientation and prior logits.
    pub lr_pose: f64,
    pub lr_shape: f64,
    /// Applied on the iteration count across both stages.
    pub decay: StepDecay,
    pub adam: AdamConfig,
    pub lambda_theta: f64,
    pub lambda_beta: f64,
    pub term_weights: TermWeights,
    pub mask: JointMask,
    /// Keypoints below this confidence get zero weight.
    pub confidence_floor: f64,
    /// Multiply mask weights by detector confidence.
    pub confidence_weighting: bool,
    pub min_keypoints: usize,
    pub stage1_keypoints: Vec<usize>,
    /// Global orientation at initialisation.
    pub init_w0: [f64; 3],
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            stage1_iterations: 1500,
            stage2_iterations: 2500,
            lr_camera: 1e-2,
            lr_pose: 1e-2,
            lr_shape: 1e-5,
            decay: StepDecay {
                every: 500,
                factor: 0.95,
            },
            adam: AdamConfig::default(),
            lambda_theta: 0.1,
            lambda_beta: 1000.0,
            term_weights: TermWeights::default(),
            mask: JointMask::default(),
            confidence_floor: 0.05,
            confidence_weighting: true,
            min_keypoints: 6,
            stage1_keypoints: STAGE1_KEYPOINTS.to_vec(),
            init_w0: [0.0; 3],
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        let rates = [self.lr_camera, self.lr_pose, self.lr_shape];
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::InvalidArgument("learning rates must be finite and >= 0".into()));
        }
        if self.stage1_keypoints.iter().any(|&k| k >= N_KEYPOINTS) {
            return Err(Error::InvalidArgument("stage-1 keypoint out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub e2d: f64,
    pub e_bone: f64,
    pub e_reg: f64,
    /// Weighted sum.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: HandParams,
    pub camera: Camera,
    pub vertices: Vec<[f64; 3]>,
    pub keypoints_3d: Vec<[f64; 3]>,
    pub terms: EnergyTerms,
    pub initial_objective: f64,
    /// Pixel distance between every projected model keypoint and its target.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// Iteration whose parameters were returned; 0 is the initialisation.
    pub best_iteration: usize,
}

impl FitResult {
    pub fn mean_residual(&self) -> f64 {
        self.residuals.iter().sum::<f64>() / self.residuals.len() as f64
    }
}

/// What an observer sees before every optimiser step.
#[derive(Debug, Clone)]
pub struct IterationInfo<'a> {
    pub stage: u8,
    /// Counted within the stage.
    pub iteration: usize,
    /// Counted across both stages; drives the learning-rate decay.
    pub global_iteration: usize,
    /// Camera, pose and shape group rates in effect for this step.
    pub learning_rates: [f64; 3],
    pub active_keypoints: &'a [usize],
    /// Names of the parameters updated by this step.
    pub optimized: &'a [&'static str],
    /// Stage objective summed over the batch.
    pub objective: f64,
}

/// One target to fit; `init` overrides the automatic initialisation.
#[derive(Debug, Clone)]
pub struct FitTask {
    pub target: Keypoints2D,
    pub camera: Camera,
    pub init: Option<HandParams>,
}

/// Pinhole projection `(f x / z + cx, f y / z + cy)`.
pub fn project(points: &[[f64; 3]], cam: &Camera) -> Result<Vec<[f64; 2]>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if !(p[2] > 0.0) {
                return Err(Error::BehindCamera { index: i, z: p[2] });
            }
            Ok([
                cam.focal * p[0] / p[2] + cam.principal_point[0],
                cam.focal * p[1] / p[2] + cam.principal_point[1],
            ])
        })
        .collect()
}

/// Differentiable projection of an `M x 3` var.
pub fn project_var<'t>(points: Var<'t>, cam: &Camera) -> Result<Var<'t>> {
    {
        let v = points.value();
        let (_, c) = v.dims2()?;
        if c != 3 {
            return Err(Error::Shape(format!("project: {:?}", v.shape())));
        }
        for (i, r) in v.data().chunks_exact(3).enumerate() {
            if !(r[2] > 0.0) {
                return Err(Error::BehindCamera { index: i, z: r[2] });
            }
        }
    }
    let tape = points.tape();
    let xy = points.select_cols(&[0, 1])?;
    let z = points.select_cols(&[2])?;
    let pp = tape.constant(Tensor::new(vec![1, 2], cam.principal_point.to_vec())?)?;
    xy.div(concat_cols(&[z, z])?)?.scale(cam.focal)?.add_row(pp)
}

/// `sum_j weights_j^2 |proj_j - target_j|^2`.
pub fn e2d_var<'t>(proj: Var<'t>, target: &[[f64; 2]], weights: &[f64]) -> Result<Var<'t>> {
    let tape = proj.tape();
    let n = target.len();
    if weights.len() != n {
        return Err(Error::Shape(format!("{} weights for {n} points", weights.len())));
    }
    let y = tape.constant(Tensor::new(vec![n, 2], target.iter().flatten().copied().collect())?)?;
    let lam = tape.constant(Tensor::new(
        vec![n, 2],
        weights.iter().flat_map(|&w| [w, w]).collect(),
    )?)?;
    proj.sub(y)?.mul(lam)?.square()?.reduce_sum()
}

/// `sum_(i,j) | |proj_j - proj_i| - len_ij |` over the given bones.
pub fn e_bone_var<'t>(
    proj: Var<'t>,
    bones: &[(usize, usize)],
    target_lengths: &[f64],
) -> Result<Var<'t>> {
    let tape = proj.tape();
    if bones.is_empty() {
        return tape.scalar_constant(0.0);
    }
    let a: GatherIndex = Rc::new(bones.iter().map(|b| b.0 as i64).collect());
    let b: GatherIndex = Rc::new(bones.iter().map(|b| b.1 as i64).collect());
    let len = tape.constant(Tensor::new(vec![bones.len(), 1], target_lengths.to_vec())?)?;
    proj.gather_rows(b)?
        .sub(proj.gather_rows(a)?)?
        .row_norms()?
        .sub(len)?
        .abs()?
        .reduce_sum()
}

/// `lambda_theta |theta|^2 + lambda_beta |beta|^2`, the root row of `theta`
/// excluded.
pub fn e_reg_var<'t>(
    theta: Var<'t>,
    beta: Var<'t>,
    lambda_theta: f64,
    lambda_beta: f64,
) -> Result<Var<'t>> {
    let k = theta.shape()[0];
    let rows: GatherIndex = Rc::new((1..k as i64).collect());
    let t = theta.gather_rows(rows)?.square()?.reduce_sum()?.scale(lambda_theta)?;
    let b = beta.square()?.reduce_sum()?.scale(lambda_beta)?;
    t.add(b)
}

/// Target preprocessed for one fit.
#[derive(Debug, Clone)]
struct Prepared {
    points: Vec<[f64; 2]>,
    weights: Vec<f64>,
}

impl Prepared {
    fn new(target: &Keypoints2D, cfg: &FitConfig) -> Result<Self> {
        target.validate()?;
        let weights = (0..N_KEYPOINTS)
            .map(|j| {
                let c = target.confidence[j];
                if c < cfg.confidence_floor {
                    0.0
                } else if cfg.confidence_weighting {
                    cfg.mask.weights[j] * c
                } else {
                    cfg.mask.weights[j]
                }
            })
            .collect();
        Ok(Self {
            points: target.points.clone(),
            weights,
        })
    }

    fn confident(&self) -> usize {
        self.weights.iter().filter(|w| **w > 0.0).count()
    }

    /// Bones with both endpoints confident and inside `subset`.
    fn bones(&self, subset: &[usize]) -> (Vec<(usize, usize)>, Vec<f64>) {
        let on = |k: usize| self.weights[k] > 0.0 && subset.contains(&k);
        let bones: Vec<(usize, usize)> = BONES.iter().copied().filter(|&(a, b)| on(a) && on(b)).collect();
        let lengths = bones
            .iter()
            .map(|&(a, b)| {
                let (p, q) = (self.points[a], self.points[b]);
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
            })
            .collect();
        (bones, lengths)
    }
}

const ALL_KEYPOINTS: [usize; N_KEYPOINTS] =
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20];

/// Energy terms as vars for one sample, restricted to `subset` keypoints.
#[allow(clippy::too_many_arguments)]
fn energy_vars<'t>(
    layer: &SkinLayer,
    vars: &ParamVars<'t>,
    theta: Var<'t>,
    prep: &Prepared,
    cam: &Camera,
    cfg: &FitConfig,
    subset: &[usize],
) -> Result<[Var<'t>; 4]> {
    let kp = layer.keypoints(layer.vertices(vars)?)?;
    let proj = project_var(kp, cam)?;
    let weights: Vec<f64> = (0..N_KEYPOINTS)
        .map(|j| if subset.contains(&j) { prep.weights[j] } else { 0.0 })
        .collect();
    let e2d = e2d_var(proj, &prep.points, &weights)?;
    let (bones, lengths) = prep.bones(subset);
    let bone = e_bone_var(proj, &bones, &lengths)?;
    let reg = e_reg_var(theta, vars.beta, cfg.lambda_theta, cfg.lambda_beta)?;
    let tw = cfg.term_weights;
    let total = sum_all(&[e2d.scale(tw.e2d)?, bone.scale(tw.bone)?, reg.scale(tw.reg)?])?;
    Ok([e2d, bone, reg, total])
}

fn check_params(assets: &HandModelAssets, params: &HandParams) -> Result<()> {
    params.validate(assets)
}

/// Objective terms at `params`.
pub fn energy(
    assets: &HandModelAssets,
    params: &HandParams,
    cam: &Camera,
    target: &Keypoints2D,
    cfg: &FitConfig,
) -> Result<EnergyTerms> {
    Ok(energy_gradient_impl(assets, params, cam, target, cfg, false)?.0)
}

/// Objective terms and the gradient of the weighted total, laid out like
/// [`HandParams`].
pub fn energy_gradient(
    assets: &HandModelAssets,
    params: &HandParams,
    cam: &Camera,
    target: &Keypoints2D,
    cfg: &FitConfig,
) -> Result<(EnergyTerms, HandParams)> {
    let (terms, grad) = energy_gradient_impl(assets, params, cam, target, cfg, true)?;
    Ok((terms, grad.expect("gradient requested")))
}

fn energy_gradient_impl(
    assets: &HandModelAssets,
    params: &HandParams,
    cam: &Camera,
    target: &Keypoints2D,
    cfg: &FitConfig,
    grad: bool,
) -> Result<(EnergyTerms, Option<HandParams>)> {
    check_params(assets, params)?;
    cfg.validate()?;
    let support = assets.regressor_support();
    let layer = SkinLayer::new(assets, Some(&support))?;
    let prep = Prepared::new(target, cfg)?;
    let tape = Tape::new();
    let t = ParamTensors::from_params(assets, params)?;
    let leaves = t.vars(&tape, [grad; 5])?;
    let theta = layer.theta(leaves.w)?;
    let vars = leaves.param_vars(theta);
    let [e2d, bone, reg, total] = energy_vars(&layer, &vars, theta, &prep, cam, cfg, &ALL_KEYPOINTS)?;
    let terms = EnergyTerms {
        e2d: e2d.item(),
        e_bone: bone.item(),
        e_reg: reg.item(),
        total: total.item(),
    };
    if !grad {
        return Ok((terms, None));
    }
    let g = tape.backward(total)?;
    let gp = HandParams {
        beta: g.wrt(leaves.beta).into_data(),
        w: g.wrt(leaves.w).into_data(),
        w0: to3(g.wrt(leaves.w0).data()),
        t_delta: to3(g.wrt(leaves.t).data()),
        s: g.wrt(leaves.s).item(),
    };
    Ok((terms, Some(gp)))
}

fn to3(d: &[f64]) -> [f64; 3] {
    [d[0], d[1], d[2]]
}

/// Optimiser-side parameter tensors in group order.
#[derive(Debug, Clone)]
struct ParamTensors {
    s: Tensor,
    t: Tensor,
    w0: Tensor,
    w: Tensor,
    beta: Tensor,
}

#[derive(Clone, Copy)]
struct Leaves<'t> {
    s: Var<'t>,
    t: Var<'t>,
    w0: Var<'t>,
    w: Var<'t>,
    beta: Var<'t>,
}

impl<'t> Leaves<'t> {
    fn param_vars(&self, theta: Var<'t>) -> ParamVars<'t> {
        ParamVars {
            beta: self.beta,
            theta,
            w0: self.w0,
            t_delta: self.t,
            s: self.s,
        }
    }
}

impl ParamTensors {
    fn from_params(assets: &HandModelAssets, p: &HandParams) -> Result<Self> {
        Ok(Self {
            s: Tensor::scalar(p.s),
            t: Tensor::new(vec![1, 3], p.t_delta.to_vec())?,
            w0: Tensor::new(vec![1, 3], p.w0.to_vec())?,
            w: Tensor::new(vec![assets.n_joints(), assets.n_clusters()], p.w.clone())?,
            beta: Tensor::new(vec![assets.n_betas(), 1], p.beta.clone())?,
        })
    }

    fn from_groups(groups: &[ParamGroup]) -> Self {
        Self {
            s: groups[0].params[0].clone(),
            t: groups[0].params[1].clone(),
            w0: groups[1].params[0].clone(),
            w: groups[1].params[1].clone(),
            beta: groups[2].params[0].clone(),
        }
    }

    fn to_params(&self) -> HandParams {
        HandParams {
            beta: self.beta.data().to_vec(),
            w: self.w.data().to_vec(),
            w0: to3(self.w0.data()),
            t_delta: to3(self.t.data()),
            s: self.s.item(),
        }
    }

    /// `active` flags follow the order `s, t, w0, w, beta`.
    fn vars<'t>(&self, tape: &'t Tape, active: [bool; 5]) -> Result<Leaves<'t>> {
        let mk = |t: &Tensor, on: bool| if on { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        Ok(Leaves {
            s: mk(&self.s, active[0])?,
            t: mk(&self.t, active[1])?,
            w0: mk(&self.w0, active[2])?,
            w: mk(&self.w, active[3])?,
            beta: mk(&self.beta, active[4])?,
        })
    }
}

/// Neutral shape and mean pose, placed by similar triangles: depth from the
/// ratio of mean 3D to mean detected 2D bone length, x and y by
/// back-projecting the detected wrist.
pub fn initialize(
    assets: &HandModelAssets,
    target: &Keypoints2D,
    cam: &Camera,
    cfg: &FitConfig,
) -> Result<HandParams> {
    cam.validate()?;
    let prep = Prepared::new(target, cfg)?;
    let mut params = HandParams::for_assets(assets);
    params.w0 = cfg.init_w0;
    let kp3 = regress_keypoints(assets, &skin_params(assets, &params)?)?;
    let (bones, len2d) = prep.bones(&ALL_KEYPOINTS);
    if bones.is_empty() {
        return Err(Error::Degenerate("no confident bone to initialise depth".into()));
    }
    let len3d: f64 = bones
        .iter()
        .map(|&(a, b)| (0..3).map(|c| (kp3[a][c] - kp3[b][c]).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>();
    let len2d: f64 = len2d.iter().sum();
    if !(len2d > 1e-9) {
        return Err(Error::Degenerate("detected bones have zero length".into()));
    }
    let z = cam.focal * len3d / len2d;
    let anchor = if prep.weights[WRIST] > 0.0 {
        WRIST
    } else {
        (0..N_KEYPOINTS).find(|&k| prep.weights[k] > 0.0).expect("confident keypoint")
    };
    let uv = prep.points[anchor];
    let x = (uv[0] - cam.principal_point[0]) * z / cam.focal;
    let y = (uv[1] - cam.principal_point[1]) * z / cam.focal;
    let a = kp3[anchor];
    params.t_delta = [x - a[0], y - a[1], z - a[2]];
    Ok(params)
}

/// Fits one target with the default schedule.
pub fn fit(
    assets: &HandModelAssets,
    target: &Keypoints2D,
    cam: &Camera,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let task = FitTask {
        target: target.clone(),
        camera: *cam,
        init: None,
    };
    Ok(fit_batch(assets, &[task], cfg, &mut |_| {})?.remove(0))
}

/// Fits every task on one shared tape per iteration with the objectives
/// summed. Parameters are not shared, so each result equals a separate fit.
/// A non-finite objective, or an iterate that puts keypoints behind the
/// camera, aborts with [`Error::Divergence`].
pub fn fit_batch(
    assets: &HandModelAssets,
    tasks: &[FitTask],
    cfg: &FitConfig,
    observer: &mut dyn FnMut(&IterationInfo),
) -> Result<Vec<FitResult>> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Ok(Vec::new());
    }
    let support = assets.regressor_support();
    let layer = SkinLayer::new(assets, Some(&support))?;
    struct State {
        prep: Prepared,
        cam: Camera,
        adam: Adam,
        best: (f64, usize, ParamTensors),
        last_finite: ParamTensors,
        initial: f64,
    }
    let mut states = Vec::with_capacity(tasks.len());
    for task in tasks {
        task.camera.validate()?;
        let prep = Prepared::new(&task.target, cfg)?;
        if prep.confident() < cfg.min_keypoints {
            return Err(Error::InvalidArgument(format!(
                "{} confident keypoints, need at least {}",
                prep.confident(),
                cfg.min_keypoints
            )));
        }
        let init = match &task.init {
            Some(p) => {
                check_params(assets, p)?;
                p.clone()
            }
            None => initialize(assets, &task.target, &task.camera, cfg)?,
        };
        let t = ParamTensors::from_params(assets, &init)?;
        let initial = {
            let tape = Tape::new();
            let l = t.vars(&tape, [false; 5])?;
            let theta = layer.theta(l.w)?;
            let e = energy_vars(&layer, &l.param_vars(theta), theta, &prep, &task.camera, cfg, &ALL_KEYPOINTS)?;
            e[3].item()
        };
        if !initial.is_finite() {
            return Err(Error::Divergence {
                iteration: 0,
                last_finite: Box::new(init),
            });
        }
        let adam = Adam::new(
            cfg.adam,
            vec![
                ParamGroup::new("camera", cfg.lr_camera, vec![t.s.clone(), t.t.clone()]),
                ParamGroup::new("pose", cfg.lr_pose, vec![t.w0.clone(), t.w.clone()]),
                ParamGroup::new("shape", cfg.lr_shape, vec![t.beta.clone()]),
            ],
        );
        states.push(State {
            prep,
            cam: task.camera,
            adam,
            best: (initial, 0, t.clone()),
            last_finite: t,
            initial,
        });
    }

    let total_iters = cfg.stage1_iterations + cfg.stage2_iterations;
    for global in 0..total_iters {
        let stage: u8 = if global < cfg.stage1_iterations { 1 } else { 2 };
        let (subset, names, active): (&[usize], &[&'static str], [bool; 5]) = if stage == 1 {
            (&cfg.stage1_keypoints, &["s", "t_delta", "w0"], [true, true, true, false, false])
        } else {
            (&ALL_KEYPOINTS, &["s", "t_delta", "w0", "w", "beta"], [true; 5])
        };
        let scale = cfg.decay.lr_at(1.0, global);
        let tape = Tape::new();
        let mut totals = Vec::with_capacity(states.len());
        let mut leaves = Vec::with_capacity(states.len());
        for st in &states {
            let t = ParamTensors::from_groups(&st.adam.groups);
            let l = t.vars(&tape, active)?;
            let theta = layer.theta(l.w)?;
            let e = match energy_vars(&layer, &l.param_vars(theta), theta, &st.prep, &st.cam, cfg, subset) {
                Err(Error::BehindCamera { .. }) => {
                    return Err(Error::Divergence {
                        iteration: global,
                        last_finite: Box::new(st.last_finite.to_params()),
                    })
                }
                other => other?,
            };
            totals.push(e[3]);
            leaves.push(l);
        }
        for (i, st) in states.iter_mut().enumerate() {
            let v = totals[i].item();
            let t = ParamTensors::from_groups(&st.adam.groups);
            if !v.is_finite() {
                return Err(Error::Divergence {
                    iteration: global,
                    last_finite: Box::new(st.last_finite.to_params()),
                });
            }
            if stage == 2 && v < st.best.0 {
                st.best = (v, global, t.clone());
            }
            st.last_finite = t;
        }
        let root = sum_all(&totals)?;
        let objective = root.item();
        let lrs = [cfg.lr_camera * scale, cfg.lr_pose * scale, cfg.lr_shape * scale];
        observer(&IterationInfo {
            stage,
            iteration: if stage == 1 { global } else { global - cfg.stage1_iterations },
            global_iteration: global,
            learning_rates: lrs,
            active_keypoints: subset,
            optimized: names,
            objective,
        });
        let grads = tape.backward(root)?;
        for (st, l) in states.iter_mut().zip(&leaves) {
            st.adam.lr_scale = scale;
            let g = vec![
                vec![grads.wrt(l.s), grads.wrt(l.t)],
                vec![grads.wrt(l.w0), grads.wrt(l.w)],
                vec![grads.wrt(l.beta)],
            ];
            let all = stage == 2;
            st.adam.step_masked(&g, |gi, pi| all || gi == 0 || (gi == 1 && pi == 0))?;
        }
    }

    let mut results = Vec::with_capacity(states.len());
    for st in states {
        let last = ParamTensors::from_groups(&st.adam.groups);
        let tape = Tape::new();
        let l = last.vars(&tape, [false; 5])?;
        let theta = layer.theta(l.w)?;
        let v = energy_vars(&layer, &l.param_vars(theta), theta, &st.prep, &st.cam, cfg, &ALL_KEYPOINTS)
            .map_or(f64::NAN, |e| e[3].item());
        let best = if v.is_finite() && v < st.best.0 {
            (v, total_iters, last)
        } else {
            st.best
        };
        let params = best.2.to_params();
        let vertices = skin_params(assets, &params)?;
        let keypoints_3d = regress_keypoints(assets, &vertices)?;
        let proj = project(&keypoints_3d, &st.cam)?;
        let residuals = proj
            .iter()
            .zip(&st.prep.points)
            .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
            .collect();
        let target = Keypoints2D {
            points: st.prep.points.clone(),
            confidence: tasks[results.len()].target.confidence.clone(),
        };
        let terms = energy(assets, &params, &st.cam, &target, cfg)?;
        results.push(FitResult {
            params,
            camera: st.cam,
            vertices,
            keypoints_3d,
            terms,
            initial_objective: st.initial,
            residuals,
            iterations: total_iters,
            best_iteration: best.1,
        });
    }
    Ok(results)
}

/// Depth at which a weak-perspective render of `world` matches the spread
/// of `projected`: `focal * std(world x) / std(projected x)`.
pub fn recover_depth(world: &[[f64; 3]], projected: &[[f64; 2]], cam: &Camera) -> Result<f64> {
    if world.len() != projected.len() || world.is_empty() {
        return Err(Error::Shape(format!(
            "{} world points and {} projections",
            world.len(),
            projected.len()
        )));
    }
    let std = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let sp = std(&mut projected.iter().map(|p| p[0]));
    if !(sp > 1e-12) {
        return Err(Error::Degenerate("projected x coordinates have no spread".into()));
    }
    let sw = std(&mut world.iter().map(|p| p[0]));
    Ok(cam.focal * sw / sp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::new(1000.0, [96.0, 96.0]).unwrap()
    }

    #[test]
    fn projection_basics() {
        let c = cam();
        assert_eq!(project(&[[0.0, 0.0, 7.0]], &c).unwrap(), vec![[96.0, 96.0]]);
        let a = project(&[[1.0, -2.0, 10.0]], &c).unwrap()[0];
        let b = project(&[[1.0, -2.0, 20.0]], &c).unwrap()[0];
        assert!(((b[0] - 96.0) * 2.0 - (a[0] - 96.0)).abs() < 1e-12);
        assert!(((b[1] - 96.0) * 2.0 - (a[1] - 96.0)).abs() < 1e-12);
        match project(&[[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]], &c) {
            Err(Error::BehindCamera { index: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[[1.0, 2.0, 0.0]])).unwrap();
        assert!(project_var(p, &c).is_err());
    }

    #[test]
    fn default_mask() {
        let m = JointMask::default();
        assert_eq!(m.weights[0], 2.5);
        for t in FINGERTIPS {
            assert_eq!(m.weights[t], 1.7);
        }
        for k in MCPS {
            assert_eq!(m.weights[k], 0.7);
        }
        let ones = [1, 3, 6, 7, 10, 11, 14, 15, 18, 19];
        assert!(ones.iter().all(|&k| m.weights[k] == 1.0));
    }

    #[test]
    fn term_examples() {
        let tape = Tape::new();
        let pts = [[1.0, 2.0], [4.0, 6.0]];
        let proj = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 4.0, 6.0]).unwrap()).unwrap();
        assert_eq!(e2d_var(proj, &pts, &[1.0, 1.0]).unwrap().item(), 0.0);
        let off = [[0.0, 2.0], [4.0, 5.0]];
        let e1 = e2d_var(proj, &off, &[1.0, 3.0]).unwrap().item();
        let e2 = e2d_var(proj, &off, &[2.0, 6.0]).unwrap().item();
        assert_eq!(e1, 1.0 + 9.0);
        assert_eq!(e2, 4.0 * e1);
        // projected bone of length 5, detected 4
        let b = e_bone_var(proj, &[(0, 1)], &[4.0]).unwrap().item();
        assert!((b - 1.0).abs() < 1e-15);
        let theta = tape.constant(Tensor::zeros(vec![16, 3])).unwrap();
        let mut bv = vec![0.0; 10];
        bv[3] = 1.0;
        let beta = tape.constant(Tensor::new(vec![10, 1], bv).unwrap()).unwrap();
        assert_eq!(e_reg_var(theta, beta, 0.1, 1000.0).unwrap().item(), 1000.0);
        let mut td = vec![0.0; 48];
        td[3] = 2.0;
        // root row ignored
        td[0] = 5.0;
        let theta = tape.constant(Tensor::new(vec![16, 3], td).unwrap()).unwrap();
        let beta = tape.constant(Tensor::zeros(vec![10, 1])).unwrap();
        assert!((e_reg_var(theta, beta, 0.1, 1000.0).unwrap().item() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn confidence_floor_zeroes_weights() {
        let mut conf = vec![1.0; 21];
        conf[3] = 0.04;
        conf[4] = 0.5;
        let kp = Keypoints2D::new(vec![[0.0, 0.0]; 21], conf).unwrap();
        let p = Prepared::new(&kp, &FitConfig::default()).unwrap();
        assert_eq!(p.weights[3], 0.0);
        assert_eq!(p.weights[4], 1.7 * 0.5);
        assert_eq!(p.confident(), 20);
        let (bones, _) = p.bones(&ALL_KEYPOINTS);
        assert_eq!(bones.len(), 18);
    }

    #[test]
    fn keypoint_validation() {
        assert!(Keypoints2D::certain(vec![[0.0, 0.0]; 20]).is_err());
        assert!(Keypoints2D::new(vec![[0.0, 0.0]; 21], vec![1.5; 21]).is_err());
        assert!(Camera::new(0.0, [0.0, 0.0]).is_err());
    }

    #[test]
    fn depth_recovery_basics() {
        let c = cam();
        let world = [[-10.0, 0.0, 0.0], [10.0, 3.0, 1.0], [0.0, -4.0, 2.0]];
        let d = 500.0;
        let proj: Vec<[f64; 2]> = world
            .iter()
            .map(|p| [c.focal * p[0] / d + 96.0, c.focal * p[1] / d + 96.0])
            .collect();
        assert!((recover_depth(&world, &proj, &c).unwrap() - d).abs() < 1e-9);
        let doubled: Vec<[f64; 3]> = world.iter().map(|p| p.map(|x| 2.0 * x)).collect();
        assert!((recover_depth(&doubled, &proj, &c).unwrap() - 2.0 * d).abs() < 1e-9);
        let flat = vec![[5.0, 1.0]; 3];
        assert!(recover_depth(&world, &flat, &c).is_err());
    }
}
