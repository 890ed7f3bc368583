"""Smoke test for the handmesh Python bindings.

Imports `handmesh_py` if it is installed, otherwise builds the extension
with cargo and loads it from a temporary directory.
"""

import math
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import handmesh_py

        return handmesh_py
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "-p", "handmesh-py", "--features", "extension-module", "--release"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / "libhandmesh_py.so"
    tmp = pathlib.Path(tempfile.mkdtemp())
    shutil.copy(lib, tmp / "handmesh_py.so")
    sys.path.insert(0, str(tmp))
    import handmesh_py

    return handmesh_py


def main():
    hm = load()
    print("handmesh_py", hm.__version__)

    model = hm.HandModel.synthetic(seed=0, pose_samples=1000)
    print(model)
    rest = model.skin()
    assert len(rest) == model.n_vertices == 778

    posed = model.skin(w0=[0.2, 0.1, -0.3], t_delta=[5.0, 80.0, 1200.0])
    kp = model.keypoints(posed)
    assert len(kp) == 21

    uv = hm.project(kp, focal=1000.0, principal_point=[96.0, 96.0])
    fit = model.fit(uv, stage1_iterations=300, stage2_iterations=600)
    print(f"fit: mean residual {fit.mean_residual:.3f} px after {fit.iterations} iterations")
    assert fit.mean_residual < 1.0

    h = model.hierarchy()
    assert h.sizes() == [51, 100, 197, 392, 778], h.sizes()
    table = h.spirals(4, k=2)
    print(f"hierarchy {h.sizes()}, spiral length {len(table[0])}")

    err = hm.mean_error(fit.vertices, posed)
    aligned, scale, _, _ = hm.rigid_align(fit.vertices, posed)
    aligned_err = hm.mean_error(aligned, posed)
    _, auc = hm.pck(aligned, posed, [i * 0.5 for i in range(21)])
    f = hm.fscore(aligned, posed, 5.0)
    print(f"mesh error {err:.2f}, aligned {aligned_err:.2f}, pck auc {auc:.3f}, f@5 {f:.3f}")
    assert aligned_err <= err + 1e-9

    centered = [[x - kp[0][0], y - kp[0][1], z - kp[0][2]] for x, y, z in kp]
    flat = [[x, y, 0.0] for x, y, _ in centered]
    image = hm.project([[x, y, 500.0] for x, y, _ in centered], focal=1000.0, principal_point=[0.0, 0.0])
    depth = hm.recover_depth(flat, image, focal=1000.0)
    print(f"recovered depth {depth:.3f}")
    assert math.isclose(depth, 500.0, rel_tol=1e-9)

    print("OK")


if __name__ == "__main__":
    main()
