use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;

/// Runs `code` with the module importable as `handmesh_py`.
fn run(code: &str) {
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(handmesh_py::handmesh_py)(py);
        py.import("sys")
            .unwrap()
            .getattr("modules")
            .unwrap()
            .set_item("handmesh_py", m)
            .unwrap();
        let code = CString::new(code).unwrap();
        let globals = PyDict::new(py);
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed: {e}");
        }
    });
}

#[test]
fn model_skin_and_hierarchy() {
    run(r#"
import handmesh_py as hm
m = hm.HandModel.synthetic(seed=1, pose_samples=500)
assert m.n_vertices == 778 and m.n_joints == 16
v = m.skin()
assert len(v) == 778 and len(v[0]) == 3
kp = m.keypoints(v)
assert len(kp) == 21
moved = m.skin(t_delta=[1.0, 2.0, 3.0])
assert all(abs(b[i] - a[i] - d) < 1e-9 for a, b in zip(v, moved) for i, d in enumerate([1.0, 2.0, 3.0]))
h = m.hierarchy()
assert h.sizes() == [51, 100, 197, 392, 778]
rows, cols, vals = h.upsample(0)
assert len(rows) == len(cols) == len(vals)
table = h.spirals(4, k=2)
assert len(table) == 778 and all(r[0] == i for i, r in enumerate(table))
"#);
}

#[test]
fn fit_recovers_projected_keypoints() {
    run(r#"
import handmesh_py as hm
m = hm.HandModel.synthetic(seed=2, pose_samples=500)
v = m.skin(w0=[0.1, -0.2, 0.05], t_delta=[0.0, 90.0, 1300.0])
uv = hm.project(m.keypoints(v), focal=1000.0, principal_point=[96.0, 96.0])
r = m.fit(uv, stage1_iterations=200, stage2_iterations=400)
assert r.mean_residual < 1.0, r
assert len(r.vertices) == 778 and len(r.residuals) == 21
assert r.objective <= r.initial_objective
try:
    m.fit(uv[:3])
except ValueError:
    pass
else:
    raise AssertionError("short target accepted")
"#);
}

#[test]
fn metrics_match_hand_computed_values() {
    run(r#"
import handmesh_py as hm
assert hm.mean_error([[0, 0, 0]], [[3, 4, 0]]) == 5.0
values, auc = hm.pck([[0, 0, 0], [0, 0, 0]], [[1, 0, 0], [3, 0, 0]], [0, 1, 2, 3, 4])
assert values == [0, 0.5, 0.5, 1, 1] and abs(auc - 0.625) < 1e-12
pts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
assert hm.fscore(pts, pts, 0.1) == 1.0
moved = [[2 * p[0] + 1, 2 * p[1], 2 * p[2] - 3] for p in pts]
aligned, s, rot, t = hm.rigid_align(pts, moved)
assert abs(s - 2) < 1e-9 and hm.mean_error(aligned, moved) < 1e-9
assert hm.mesh_loss(pts, pts, [(0, 1), (1, 2)]) == 0.0
"#);
}
