//! Python bindings: hand model assets, fitting, the mesh hierarchy,
//! trained networks and the evaluation metrics. Arrays cross the boundary
//! as nested lists.

use std::path::PathBuf;

use handmesh::fitting::{self, Camera, FitConfig, Keypoints2D};
use handmesh::hand::{self, HandModelAssets, HandParams, SynthConfig};
use handmesh::mesh::{TriMesh, VertexAdjacency};
use handmesh::metrics;
use handmesh::network::{self, MeshNet};
use handmesh::render::Image;
use handmesh::sampling::{build_hierarchy, MeshHierarchy};
use handmesh::spiral::{default_spiral_length, SpiralTable};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: handmesh::Error) -> PyErr {
    match e {
        handmesh::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn camera(focal: f64, principal_point: [f64; 2]) -> PyResult<Camera> {
    Camera::new(focal, principal_point).map_err(err)
}

/// Parametric hand model: template mesh, skinning weights, shape basis,
/// keypoint regressor and pose prior.
#[pyclass(name = "HandModel", module = "handmesh_py", frozen)]
pub struct PyHandModel {
    inner: HandModelAssets,
}

/// Fitted parameters with diagnostics.
#[pyclass(name = "FitResult", module = "handmesh_py", frozen, get_all)]
pub struct PyFitResult {
    beta: Vec<f64>,
    w: Vec<f64>,
    w0: [f64; 3],
    t_delta: [f64; 3],
    s: f64,
    vertices: Vec<[f64; 3]>,
    keypoints_3d: Vec<[f64; 3]>,
    residuals: Vec<f64>,
    mean_residual: f64,
    objective: f64,
    initial_objective: f64,
    iterations: usize,
    best_iteration: usize,
}

#[pymethods]
impl PyFitResult {
    fn __repr__(&self) -> String {
        format!(
            "FitResult(mean_residual={:.4}, objective={:.4}, best_iteration={})",
            self.mean_residual, self.objective, self.best_iteration
        )
    }
}

#[pymethods]
impl PyHandModel {
    /// Deterministic synthetic model with the MANO joint layout.
    #[staticmethod]
    #[pyo3(signature = (n_vertices = 778, seed = 0, pose_samples = 5000))]
    fn synthetic(n_vertices: usize, seed: u64, pose_samples: usize) -> PyResult<Self> {
        let cfg = SynthConfig {
            n_vertices,
            seed,
            pose_samples,
            ..SynthConfig::default()
        };
        Ok(Self {
            inner: hand::generate_synthetic_assets(&cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: hand::load_assets(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        hand::save_assets(&self.inner, path).map_err(err)
    }

    #[getter]
    fn n_vertices(&self) -> usize {
        self.inner.n_vertices()
    }

    #[getter]
    fn n_joints(&self) -> usize {
        self.inner.n_joints()
    }

    #[getter]
    fn n_betas(&self) -> usize {
        self.inner.n_betas()
    }

    #[getter]
    fn n_clusters(&self) -> usize {
        self.inner.n_clusters()
    }

    #[getter]
    fn template_vertices(&self) -> Vec<[f64; 3]> {
        self.inner.template.vertices().to_vec()
    }

    #[getter]
    fn faces(&self) -> Vec<[usize; 3]> {
        self.inner.template.faces().to_vec()
    }

    /// Posed vertices. `w` holds the prior logits row-major; omitted
    /// arguments take the neutral values.
    #[pyo3(signature = (beta = None, w = None, w0 = [0.0; 3], t_delta = [0.0; 3], s = 1.0))]
    fn skin(
        &self,
        beta: Option<Vec<f64>>,
        w: Option<Vec<f64>>,
        w0: [f64; 3],
        t_delta: [f64; 3],
        s: f64,
    ) -> PyResult<Vec<[f64; 3]>> {
        let mut p = HandParams::for_assets(&self.inner);
        if let Some(b) = beta {
            p.beta = b;
        }
        if let Some(w) = w {
            p.w = w;
        }
        p.w0 = w0;
        p.t_delta = t_delta;
        p.s = s;
        hand::skin_params(&self.inner, &p).map_err(err)
    }

    /// The 21 OpenPose-ordered keypoints of a mesh.
    fn keypoints(&self, vertices: Vec<[f64; 3]>) -> PyResult<Vec<[f64; 3]>> {
        hand::regress_keypoints(&self.inner, &vertices).map_err(err)
    }

    /// Decimation hierarchy of the template.
    #[pyo3(signature = (levels = 5))]
    fn hierarchy(&self, levels: usize) -> PyResult<PyHierarchy> {
        Ok(PyHierarchy {
            inner: build_hierarchy(&self.inner.template, levels).map_err(err)?,
        })
    }

    /// Two-stage fit to 21 pixel keypoints. The GIL is released meanwhile.
    #[pyo3(signature = (
        points,
        confidence = None,
        focal = 1000.0,
        principal_point = [96.0, 96.0],
        stage1_iterations = 1500,
        stage2_iterations = 2500,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &self,
        py: Python<'_>,
        points: Vec<[f64; 2]>,
        confidence: Option<Vec<f64>>,
        focal: f64,
        principal_point: [f64; 2],
        stage1_iterations: usize,
        stage2_iterations: usize,
    ) -> PyResult<PyFitResult> {
        let cam = camera(focal, principal_point)?;
        let target = match confidence {
            Some(c) => Keypoints2D::new(points, c),
            None => Keypoints2D::certain(points),
        }
        .map_err(err)?;
        let cfg = FitConfig {
            stage1_iterations,
            stage2_iterations,
            ..FitConfig::default()
        };
        let assets = &self.inner;
        let r = py
            .detach(|| fitting::fit(assets, &target, &cam, &cfg))
            .map_err(err)?;
        Ok(PyFitResult {
            mean_residual: r.mean_residual(),
            objective: r.terms.total,
            initial_objective: r.initial_objective,
            iterations: r.iterations,
            best_iteration: r.best_iteration,
            beta: r.params.beta,
            w: r.params.w,
            w0: r.params.w0,
            t_delta: r.params.t_delta,
            s: r.params.s,
            vertices: r.vertices,
            keypoints_3d: r.keypoints_3d,
            residuals: r.residuals,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "HandModel(n_vertices={}, n_joints={}, n_betas={})",
            self.inner.n_vertices(),
            self.inner.n_joints(),
            self.inner.n_betas()
        )
    }
}

/// Meshes from coarsest to finest with the upsampling operators between them.
#[pyclass(name = "Hierarchy", module = "handmesh_py", frozen)]
pub struct PyHierarchy {
    inner: MeshHierarchy,
}

#[pymethods]
impl PyHierarchy {
    #[staticmethod]
    #[pyo3(signature = (vertices, faces, levels = 5))]
    fn build(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>, levels: usize) -> PyResult<Self> {
        let mesh = TriMesh::new(vertices, faces).map_err(err)?;
        Ok(Self {
            inner: build_hierarchy(&mesh, levels).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: MeshHierarchy::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    /// Vertex counts, coarsest first.
    fn sizes(&self) -> Vec<usize> {
        self.inner.sizes()
    }

    fn vertices(&self, level: usize) -> PyResult<Vec<[f64; 3]>> {
        Ok(self.level(level)?.vertices().to_vec())
    }

    fn faces(&self, level: usize) -> PyResult<Vec<[usize; 3]>> {
        Ok(self.level(level)?.faces().to_vec())
    }

    /// Upsampling matrix from `level` to `level + 1` as `(rows, cols, values)`.
    fn upsample(&self, level: usize) -> PyResult<(Vec<usize>, Vec<usize>, Vec<f64>)> {
        let m = self
            .inner
            .upsample_mats
            .get(level)
            .ok_or_else(|| PyValueError::new_err(format!("no upsampling from level {level}")))?;
        let t = m.to_triplets();
        Ok((t.rows, t.cols, t.vals))
    }

    /// Spiral index table of one level; `-1` marks padding.
    #[pyo3(signature = (level, k = 2, length = None, seed = 0))]
    fn spirals(&self, level: usize, k: usize, length: Option<usize>, seed: u64) -> PyResult<Vec<Vec<i64>>> {
        let adj = VertexAdjacency::build(self.level(level)?).map_err(err)?;
        let len = length.unwrap_or_else(|| default_spiral_length(&adj, k));
        Ok(SpiralTable::build(&adj, k, len, seed).map_err(err)?.rows)
    }
}

impl PyHierarchy {
    fn level(&self, level: usize) -> PyResult<&TriMesh> {
        self.inner
            .levels
            .get(level)
            .ok_or_else(|| PyValueError::new_err(format!("level {level} of {}", self.inner.n_levels())))
    }
}

/// A trained image-to-mesh network loaded from a checkpoint directory.
#[pyclass(name = "MeshNet", module = "handmesh_py", unsendable)]
pub struct PyMeshNet {
    inner: MeshNet,
}

#[pymethods]
impl PyMeshNet {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: network::load_checkpoint(path).map_err(err)?,
        })
    }

    #[getter]
    fn faces(&self) -> Vec<[usize; 3]> {
        self.inner.hierarchy.finest().faces().to_vec()
    }

    /// Mesh in image-aligned coordinates for a PNG file.
    fn predict_file(&self, path: PathBuf) -> PyResult<Vec<[f64; 3]>> {
        let img = Image::load(path).map_err(err)?;
        self.inner.predict(&img).map_err(err)
    }

    /// Mesh for row-major RGB pixels in `[0, 1]`.
    fn predict(&self, pixels: Vec<f64>, width: usize, height: usize) -> PyResult<Vec<[f64; 3]>> {
        let img = Image::new(width, height, pixels).map_err(err)?;
        self.inner.predict(&img).map_err(err)
    }
}

#[pyfunction]
fn mean_error(pred: Vec<[f64; 3]>, gt: Vec<[f64; 3]>) -> PyResult<f64> {
    metrics::mean_error(&pred, &gt).map_err(err)
}

/// PCK values at `thresholds` and the normalised area under the curve.
#[pyfunction]
fn pck(pred: Vec<[f64; 3]>, gt: Vec<[f64; 3]>, thresholds: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
    let c = metrics::pck(&pred, &gt, &thresholds).map_err(err)?;
    Ok((c.values, c.auc))
}

#[pyfunction]
fn fscore(pred: Vec<[f64; 3]>, gt: Vec<[f64; 3]>, d: f64) -> PyResult<f64> {
    metrics::fscore(&pred, &gt, d).map_err(err)
}

/// Returns `(aligned, scale, rotation, translation)`.
#[pyfunction]
#[pyo3(signature = (source, target, with_scale = true))]
#[allow(clippy::type_complexity)]
fn rigid_align(
    source: Vec<[f64; 3]>,
    target: Vec<[f64; 3]>,
    with_scale: bool,
) -> PyResult<(Vec<[f64; 3]>, f64, [[f64; 3]; 3], [f64; 3])> {
    let a = metrics::rigid_align(&source, &target, with_scale).map_err(err)?;
    Ok((a.aligned, a.scale, a.rotation, a.translation))
}

#[pyfunction]
#[pyo3(signature = (world, projected, focal, principal_point = [0.0, 0.0]))]
fn recover_depth(world: Vec<[f64; 3]>, projected: Vec<[f64; 2]>, focal: f64, principal_point: [f64; 2]) -> PyResult<f64> {
    fitting::recover_depth(&world, &projected, &camera(focal, principal_point)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (points, focal, principal_point))]
fn project(points: Vec<[f64; 3]>, focal: f64, principal_point: [f64; 2]) -> PyResult<Vec<[f64; 2]>> {
    fitting::project(&points, &camera(focal, principal_point)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, target, edges, lambda_vertex = 0.01, lambda_edge = 0.01))]
fn mesh_loss(
    pred: Vec<[f64; 3]>,
    target: Vec<[f64; 3]>,
    edges: Vec<(usize, usize)>,
    lambda_vertex: f64,
    lambda_edge: f64,
) -> PyResult<f64> {
    network::mesh_loss(&pred, &target, &edges, lambda_vertex, lambda_edge).map_err(err)
}

#[pymodule]
pub fn handmesh_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHandModel>()?;
    m.add_class::<PyFitResult>()?;
    m.add_class::<PyHierarchy>()?;
    m.add_class::<PyMeshNet>()?;
    m.add_function(wrap_pyfunction!(mean_error, m)?)?;
    m.add_function(wrap_pyfunction!(pck, m)?)?;
    m.add_function(wrap_pyfunction!(fscore, m)?)?;
    m.add_function(wrap_pyfunction!(rigid_align, m)?)?;
    m.add_function(wrap_pyfunction!(recover_depth, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(mesh_loss, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
