use std::sync::OnceLock;

use handmesh::geom::{barycentric_point, dot, sub};
use handmesh::hand::{generate_synthetic_assets, SynthConfig};
use handmesh::mesh::primitives;
use handmesh::sampling::*;
use handmesh::{TriMesh, VertexAdjacency};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn template() -> &'static TriMesh {
    static T: OnceLock<TriMesh> = OnceLock::new();
    T.get_or_init(|| {
        generate_synthetic_assets(&SynthConfig {
            pose_samples: 100,
            kmeans_iterations: 1,
            ..SynthConfig::default()
        })
        .unwrap()
        .template
    })
}

fn hierarchy() -> &'static MeshHierarchy {
    static H: OnceLock<MeshHierarchy> = OnceLock::new();
    H.get_or_init(|| build_hierarchy(template(), 5).unwrap())
}

fn apply(q: &handmesh::sparse::CsrMatrix, v: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let flat: Vec<f64> = v.iter().flatten().copied().collect();
    q.mul_dense(&flat, 3)
        .unwrap()
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
}

#[test]
fn template_hierarchy_sizes_and_subsets() {
    let h = hierarchy();
    assert_eq!(h.sizes(), vec![51, 100, 197, 392, 778]);
    assert_eq!(h.finest(), template());
    for i in 0..4 {
        let (coarse, fine) = (&h.levels[i], &h.levels[i + 1]);
        let keep = &h.keep_maps[i];
        let mut seen = keep.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), keep.len());
        for (j, &k) in keep.iter().enumerate() {
            assert_eq!(coarse.vertices()[j], fine.vertices()[k]);
        }
        VertexAdjacency::build(coarse).unwrap();
    }
}

#[test]
fn template_upsample_rows() {
    let h = hierarchy();
    for i in 0..4 {
        let q = &h.upsample_mats[i];
        let keep = &h.keep_maps[i];
        let mut kept = vec![None; q.nrows()];
        for (j, &k) in keep.iter().enumerate() {
            kept[k] = Some(j);
        }
        for r in 0..q.nrows() {
            let row: Vec<(usize, f64)> = q.row(r).collect();
            assert!(row.len() <= 3, "{row:?}");
            assert!(row.iter().all(|&(_, w)| w >= 0.0));
            assert!((q.row_sum(r) - 1.0).abs() < 1e-9);
            if let Some(j) = kept[r] {
                assert_eq!(row, vec![(j, 1.0)]);
            }
        }
    }
}

#[test]
fn upsampled_template_stays_close() {
    let h = hierarchy();
    for i in 0..4 {
        let fine = &h.levels[i + 1];
        let up = apply(&h.upsample_mats[i], h.levels[i].vertices());
        let mean = up
            .iter()
            .zip(fine.vertices())
            .map(|(a, b)| dot(sub(*a, *b), sub(*a, *b)).sqrt())
            .sum::<f64>()
            / up.len() as f64;
        assert!(mean < 0.05 * fine.bbox_diagonal(), "level {i}: {mean}");
    }
}

#[test]
fn hierarchy_directory_round_trip() {
    let h = hierarchy();
    let dir = tempfile::tempdir().unwrap();
    h.save(dir.path()).unwrap();
    let back = MeshHierarchy::load(dir.path()).unwrap();
    assert_eq!(back.levels, h.levels);
    assert_eq!(back.keep_maps, h.keep_maps);
    assert_eq!(back.upsample_mats, h.upsample_mats);
}

fn point_triangle_sq(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> (f64, [f64; 3]) {
    // dense search over the triangle followed by local refinement
    let mut best = (f64::INFINITY, [0.0; 3]);
    let n = 60;
    for i in 0..=n {
        for j in 0..=n - i {
            let w = [i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64];
            let q = barycentric_point(w, a, b, c);
            let d = dot(sub(p, q), sub(p, q));
            if d < best.0 {
                best = (d, w);
            }
        }
    }
    let mut step = 1.0 / n as f64;
    while step > 1e-13 {
        let mut improved = false;
        for (di, dj) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (1.0, -1.0), (-1.0, 1.0)] {
            let u = best.1[0] + di * step;
            let v = best.1[1] + dj * step;
            if u < 0.0 || v < 0.0 || u + v > 1.0 {
                continue;
            }
            let w = [u, v, 1.0 - u - v];
            let q = barycentric_point(w, a, b, c);
            let d = dot(sub(p, q), sub(p, q));
            if d < best.0 {
                best = (d, w);
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best
}

#[test]
fn upsample_matches_projection_oracle() {
    let coarse = primitives::icosphere(1);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..10 {
        let p = [0, 1, 2].map(|_| rng.random_range(-1.3..1.3));
        let mut verts = coarse.vertices().to_vec();
        verts.push(p);
        // the fine mesh only needs the extra vertex; faces are irrelevant to projection
        let fine = TriMesh::new(verts, coarse.faces().to_vec()).unwrap();
        let keep: Vec<usize> = (0..coarse.n_vertices()).collect();
        let q = build_upsample(&fine, &coarse, &keep).unwrap();
        let last = fine.n_vertices() - 1;
        let mut recon = [0.0; 3];
        for (c, w) in q.row(last) {
            for k in 0..3 {
                recon[k] += w * coarse.vertices()[c][k];
            }
        }
        let mut best = (f64::INFINITY, [0.0; 3]);
        for f in coarse.faces() {
            let [a, b, c] = f.map(|i| coarse.vertices()[i]);
            let (d, w) = point_triangle_sq(p, a, b, c);
            if d < best.0 {
                best = (d, barycentric_point(w, a, b, c));
            }
        }
        let err = dot(sub(recon, best.1), sub(recon, best.1)).sqrt();
        assert!(err < 1e-6, "trial {trial}: {err}");
        let got = dot(sub(recon, p), sub(recon, p));
        assert!(got <= best.0 + 1e-12);
    }
}

#[test]
fn upsample_is_affine_exact_for_interior_projections() {
    let coarse = primitives::grid(5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = |p: [f64; 3]| 2.0 * p[0] - 3.0 * p[1] + 0.5;
    let mut verts = coarse.vertices().to_vec();
    let lo = coarse.bounding_box().0;
    let hi = coarse.bounding_box().1;
    for _ in 0..20 {
        verts.push([
            rng.random_range(lo[0]..hi[0]),
            rng.random_range(lo[1]..hi[1]),
            rng.random_range(-0.2..0.2),
        ]);
    }
    let fine = TriMesh::new(verts, coarse.faces().to_vec()).unwrap();
    let keep: Vec<usize> = (0..coarse.n_vertices()).collect();
    let q = build_upsample(&fine, &coarse, &keep).unwrap();
    let vals: Vec<f64> = coarse.vertices().iter().map(|&p| f(p)).collect();
    let up = q.mul_dense(&vals, 1).unwrap();
    for (i, p) in fine.vertices().iter().enumerate() {
        assert!((up[i] - f(*p)).abs() < 1e-9);
    }
}
