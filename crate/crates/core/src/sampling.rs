//! Quadric-error edge-collapse decimation, barycentric upsampling matrices
//! and the multi-level mesh hierarchy.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::mesh::{load_mesh, save_mesh, TriMesh};
use crate::sparse::{CsrMatrix, Triplets};

/// Vertex counts of the five-level hierarchy of the 778-vertex template.
pub const TEMPLATE_LEVEL_SIZES: [usize; 5] = [778, 392, 197, 100, 51];

const BOUNDARY_WEIGHT: f64 = 1000.0;

type Quadric = [f64; 10];

fn plane_quadric(n: Vec3, p: Vec3, w: f64) -> Quadric {
    let d = -geom::dot(n, p);
    let (a, b, c) = (n[0], n[1], n[2]);
    [
        w * a * a,
        w * a * b,
        w * a * c,
        w * a * d,
        w * b * b,
        w * b * c,
        w * b * d,
        w * c * c,
        w * c * d,
        w * d * d,
    ]
}

fn quadric_add(q: &mut Quadric, r: &Quadric) {
    q.iter_mut().zip(r).for_each(|(a, b)| *a += b);
}

fn quadric_eval(q: &Quadric, p: Vec3, r: &Quadric) -> f64 {
    let s: Vec<f64> = q.iter().zip(r).map(|(a, b)| a + b).collect();
    let (x, y, z) = (p[0], p[1], p[2]);
    s[0] * x * x
        + 2.0 * s[1] * x * y
        + 2.0 * s[2] * x * z
        + 2.0 * s[3] * x
        + s[4] * y * y
        + 2.0 * s[5] * y * z
        + 2.0 * s[6] * y
        + s[7] * z * z
        + 2.0 * s[8] * z
        + s[9]
}

struct Work {
    pos: Vec<Vec3>,
    faces: Vec<Option<[usize; 3]>>,
    vfaces: Vec<Vec<usize>>,
    alive: Vec<bool>,
    quadrics: Vec<Quadric>,
    area_eps: f64,
}

enum Verdict {
    Ok,
    Blocked,
}

impl Work {
    fn new(mesh: &TriMesh) -> Self {
        let n = mesh.n_vertices();
        let pos = mesh.vertices().to_vec();
        let mut vfaces = vec![Vec::new(); n];
        for (fi, f) in mesh.faces().iter().enumerate() {
            for &v in f {
                vfaces[v].push(fi);
            }
        }
        let mut quadrics = vec![[0.0; 10]; n];
        let mut edge_faces: std::collections::HashMap<(usize, usize), Vec<usize>> =
            std::collections::HashMap::new();
        for (fi, f) in mesh.faces().iter().enumerate() {
            let nrm = geom::face_normal(pos[f[0]], pos[f[1]], pos[f[2]]);
            let area = 0.5 * geom::norm(nrm);
            let q = plane_quadric(geom::normalize(nrm), pos[f[0]], area);
            for &v in f {
                quadric_add(&mut quadrics[v], &q);
            }
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edge_faces.entry((a.min(b), a.max(b))).or_default().push(fi);
            }
        }
        for ((a, b), fs) in &edge_faces {
            if fs.len() != 1 {
                continue;
            }
            let f = mesh.faces()[fs[0]];
            let nrm = geom::normalize(geom::face_normal(pos[f[0]], pos[f[1]], pos[f[2]]));
            let e = geom::sub(pos[*b], pos[*a]);
            let side = geom::normalize(geom::cross(e, nrm));
            let q = plane_quadric(side, pos[*a], BOUNDARY_WEIGHT * geom::dot(e, e));
            quadric_add(&mut quadrics[*a], &q);
            quadric_add(&mut quadrics[*b], &q);
        }
        let diag = mesh.bbox_diagonal();
        Self {
            pos,
            faces: mesh.faces().iter().map(|f| Some(*f)).collect(),
            vfaces,
            alive: vec![true; n],
            quadrics,
            area_eps: 1e-12 * diag * diag,
        }
    }

    fn neighbours(&self, v: usize) -> BTreeSet<usize> {
        self.vfaces[v]
            .iter()
            .filter_map(|&fi| self.faces[fi])
            .flatten()
            .filter(|&u| u != v)
            .collect()
    }

    fn edges(&self) -> Vec<(usize, usize, usize)> {
        let mut count = std::collections::BTreeMap::new();
        for f in self.faces.iter().flatten() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        count.into_iter().map(|((a, b), c)| (a, b, c)).collect()
    }

    fn is_boundary(&self, v: usize) -> bool {
        let mut count = std::collections::HashMap::new();
        for f in self.vfaces[v].iter().filter_map(|&fi| self.faces[fi]) {
            for &u in &f {
                if u != v {
                    *count.entry(u).or_insert(0) += 1;
                }
            }
        }
        count.values().any(|&c| c == 1)
    }

    /// Can `u` be collapsed onto `v` without breaking manifoldness,
    /// flipping or degenerating a face, or orphaning a vertex?
    fn check(&self, u: usize, v: usize, edge_face_count: usize) -> Verdict {
        let shared: Vec<[usize; 3]> = self.vfaces[u]
            .iter()
            .filter_map(|&fi| self.faces[fi])
            .filter(|f| f.contains(&v))
            .collect();
        let opposite: BTreeSet<usize> = shared
            .iter()
            .map(|f| *f.iter().find(|&&w| w != u && w != v).expect("triangle"))
            .collect();
        let common: BTreeSet<usize> = self
            .neighbours(u)
            .intersection(&self.neighbours(v))
            .copied()
            .collect();
        if common != opposite {
            return Verdict::Blocked;
        }
        if edge_face_count == 2 && self.is_boundary(u) && self.is_boundary(v) {
            return Verdict::Blocked;
        }
        for &w in &opposite {
            let live = self.vfaces[w].iter().filter(|&&fi| self.faces[fi].is_some()).count();
            let lost = shared.iter().filter(|f| f.contains(&w)).count();
            if live <= lost {
                return Verdict::Blocked;
            }
        }
        let moved = self.vfaces[u]
            .iter()
            .filter_map(|&fi| self.faces[fi])
            .filter(|f| !f.contains(&v));
        let sorted = |f: [usize; 3]| {
            let mut s = f;
            s.sort_unstable();
            s
        };
        let around_v: HashSet<[usize; 3]> = self.vfaces[v]
            .iter()
            .filter_map(|&fi| self.faces[fi])
            .map(sorted)
            .collect();
        let mut any = false;
        for f in moved {
            any = true;
            let old = geom::face_normal(self.pos[f[0]], self.pos[f[1]], self.pos[f[2]]);
            let g = f.map(|w| if w == u { v } else { w });
            if around_v.contains(&sorted(g)) {
                return Verdict::Blocked;
            }
            let new = geom::face_normal(self.pos[g[0]], self.pos[g[1]], self.pos[g[2]]);
            if 0.5 * geom::norm(new) <= self.area_eps || geom::dot(old, new) <= 0.0 {
                return Verdict::Blocked;
            }
        }
        let remaining = self.faces.iter().flatten().count() - shared.len();
        if !any && remaining == 0 {
            return Verdict::Blocked;
        }
        Verdict::Ok
    }

    fn collapse(&mut self, u: usize, v: usize) {
        let fs = std::mem::take(&mut self.vfaces[u]);
        for fi in fs {
            let Some(f) = self.faces[fi] else { continue };
            if f.contains(&v) {
                self.faces[fi] = None;
            } else {
                self.faces[fi] = Some(f.map(|w| if w == u { v } else { w }));
                self.vfaces[v].push(fi);
            }
        }
        for list in self.vfaces.iter_mut() {
            list.retain(|&fi| self.faces[fi].is_some());
        }
        self.alive[u] = false;
        let qu = self.quadrics[u];
        quadric_add(&mut self.quadrics[v], &qu);
    }
}

/// Collapses edges greedily by quadric error until `target` vertices
/// remain. Every collapse moves one endpoint onto the other, so surviving
/// positions are a subset of the input. Returns the decimated mesh and, for
/// each of its vertices, the index of the same vertex in `mesh`.
pub fn decimate(mesh: &TriMesh, target: usize) -> Result<(TriMesh, Vec<usize>)> {
    let n = mesh.n_vertices();
    if target == 0 || target > n {
        return Err(Error::InvalidArgument(format!(
            "decimation target {target} must be in 1..={n}"
        )));
    }
    let referenced: HashSet<usize> = mesh.faces().iter().flatten().copied().collect();
    if referenced.len() != n {
        return Err(Error::InvalidMesh("decimation needs every vertex to lie on a face".into()));
    }
    let mut work = Work::new(mesh);
    let mut count = n;
    while count > target {
        let mut candidates: Vec<(f64, usize, usize, usize, usize)> = Vec::new();
        for (a, b, faces) in work.edges() {
            for (u, v) in [(a, b), (b, a)] {
                let cost = quadric_eval(&work.quadrics[u], work.pos[v], &work.quadrics[v]);
                candidates.push((cost, a, b, u, faces));
            }
        }
        candidates.sort_by(|x, y| {
            x.0.total_cmp(&y.0)
                .then((x.1, x.2).cmp(&(y.1, y.2)))
                .then(x.3.cmp(&y.3))
        });
        let mut blocked = 0;
        let mut done = false;
        for &(_, a, b, u, faces) in &candidates {
            let v = if u == a { b } else { a };
            match work.check(u, v, faces) {
                Verdict::Ok => {
                    work.collapse(u, v);
                    done = true;
                    break;
                }
                Verdict::Blocked => blocked += 1,
            }
        }
        if !done {
            return Err(Error::Decimation {
                target,
                reached: count,
                blocked,
            });
        }
        count -= 1;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| work.alive[i]).collect();
    let mut remap = vec![usize::MAX; n];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
    }
    let vertices = keep.iter().map(|&i| work.pos[i]).collect();
    let faces = work
        .faces
        .iter()
        .flatten()
        .map(|f| f.map(|w| remap[w]))
        .collect();
    Ok((TriMesh::new(vertices, faces)?, keep))
}

/// Sparse `fine x coarse` matrix. Kept fine vertices get one-hot rows; every
/// other fine vertex is projected onto the closest coarse triangle and gets
/// the barycentric weights of that projection.
pub fn build_upsample(fine: &TriMesh, coarse: &TriMesh, keep_map: &[usize]) -> Result<CsrMatrix> {
    if coarse.n_faces() == 0 {
        return Err(Error::InvalidMesh("coarse mesh has no faces".into()));
    }
    if keep_map.len() != coarse.n_vertices() {
        return Err(Error::Shape(format!(
            "keep map has {} entries for {} coarse vertices",
            keep_map.len(),
            coarse.n_vertices()
        )));
    }
    let m = fine.n_vertices();
    let mut kept = vec![None; m];
    for (ci, &fi) in keep_map.iter().enumerate() {
        if fi >= m || kept[fi].is_some() {
            return Err(Error::InvalidArgument(format!(
                "keep map entry {fi} is out of range or repeated"
            )));
        }
        kept[fi] = Some(ci);
    }
    let cv = coarse.vertices();
    let mut entries = Vec::new();
    for (q, p) in fine.vertices().iter().enumerate() {
        if let Some(ci) = kept[q] {
            entries.push((q, ci, 1.0));
            continue;
        }
        let mut best = (f64::INFINITY, 0usize, [0.0; 3]);
        for (fi, f) in coarse.faces().iter().enumerate() {
            let w = geom::closest_point_barycentric(*p, cv[f[0]], cv[f[1]], cv[f[2]]);
            let x = geom::barycentric_point(w, cv[f[0]], cv[f[1]], cv[f[2]]);
            let d = geom::norm(geom::sub(x, *p));
            if d < best.0 {
                best = (d, fi, w);
            }
        }
        let f = coarse.faces()[best.1];
        for k in 0..3 {
            if best.2[k] != 0.0 {
                entries.push((q, f[k], best.2[k]));
            }
        }
    }
    CsrMatrix::from_triplets(m, coarse.n_vertices(), entries)
}

#[derive(Debug, Clone)]
pub struct MeshHierarchy {
    /// Coarsest first.
    pub levels: Vec<TriMesh>,
    /// `keep_maps[i][j]` is the index in `levels[i + 1]` of vertex `j` of `levels[i]`.
    pub keep_maps: Vec<Vec<usize>>,
    /// `upsample_mats[i]` maps `levels[i]` onto `levels[i + 1]`.
    pub upsample_mats: Vec<CsrMatrix>,
}

/// Vertex counts from finest to coarsest: the template counts for a
/// 778-vertex input, successive ceil-halving otherwise.
pub fn level_sizes(n: usize, levels: usize) -> Vec<usize> {
    let mut sizes = vec![n];
    for i in 1..levels {
        let next = if n == TEMPLATE_LEVEL_SIZES[0] && i < TEMPLATE_LEVEL_SIZES.len() {
            TEMPLATE_LEVEL_SIZES[i]
        } else {
            sizes[i - 1].div_ceil(2)
        };
        sizes.push(next);
    }
    sizes
}

pub fn build_hierarchy(mesh: &TriMesh, levels: usize) -> Result<MeshHierarchy> {
    if levels < 2 {
        return Err(Error::InvalidArgument(format!(
            "a hierarchy needs at least 2 levels, got {levels}"
        )));
    }
    let sizes = level_sizes(mesh.n_vertices(), levels);
    let mut meshes = vec![mesh.clone()];
    let mut keeps = Vec::new();
    let mut ups = Vec::new();
    for &size in &sizes[1..] {
        let fine = meshes.last().expect("finest level");
        let (coarse, keep) = decimate(fine, size)?;
        log::debug!("decimated {} -> {} vertices", fine.n_vertices(), coarse.n_vertices());
        ups.push(build_upsample(fine, &coarse, &keep)?);
        keeps.push(keep);
        meshes.push(coarse);
    }
    meshes.reverse();
    keeps.reverse();
    ups.reverse();
    Ok(MeshHierarchy {
        levels: meshes,
        keep_maps: keeps,
        upsample_mats: ups,
    })
}

#[derive(Serialize, Deserialize)]
struct KeepFile {
    keep: Vec<usize>,
}

impl MeshHierarchy {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(TriMesh::n_vertices).collect()
    }

    pub fn finest(&self) -> &TriMesh {
        self.levels.last().expect("non-empty hierarchy")
    }

    /// Writes `level_i.obj`, `keep_i.json` and `upsample_i.json`, with
    /// `i` counting from the coarsest level.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, level) in self.levels.iter().enumerate() {
            save_mesh(level, dir.join(format!("level_{i}.obj")))?;
        }
        for (i, (keep, up)) in self.keep_maps.iter().zip(&self.upsample_mats).enumerate() {
            let kp = dir.join(format!("keep_{i}.json"));
            let s = serde_json::to_string(&KeepFile { keep: keep.clone() })?;
            fs::write(&kp, s).map_err(|e| Error::io(&kp, e))?;
            let up_path = dir.join(format!("upsample_{i}.json"));
            fs::write(&up_path, serde_json::to_string(&up.to_triplets())?)
                .map_err(|e| Error::io(&up_path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut levels = Vec::new();
        while dir.join(format!("level_{}.obj", levels.len())).exists() {
            levels.push(load_mesh(dir.join(format!("level_{}.obj", levels.len())))?);
        }
        if levels.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{} holds fewer than 2 levels",
                dir.display()
            )));
        }
        let mut keep_maps = Vec::new();
        let mut upsample_mats = Vec::new();
        for i in 0..levels.len() - 1 {
            let kp = dir.join(format!("keep_{i}.json"));
            let text = fs::read_to_string(&kp).map_err(|e| Error::io(&kp, e))?;
            let keep: KeepFile = serde_json::from_str(&text)?;
            let up_path = dir.join(format!("upsample_{i}.json"));
            let text = fs::read_to_string(&up_path).map_err(|e| Error::io(&up_path, e))?;
            let t: Triplets = serde_json::from_str(&text)?;
            let up = CsrMatrix::from_triplet_struct(&t)?;
            if up.nrows() != levels[i + 1].n_vertices() || up.ncols() != levels[i].n_vertices() {
                return Err(Error::Shape(format!("upsample_{i} has shape {:?}", t.shape)));
            }
            if keep.keep.len() != levels[i].n_vertices() {
                return Err(Error::Shape(format!("keep_{i} has {} entries", keep.keep.len())));
            }
            keep_maps.push(keep.keep);
            upsample_mats.push(up);
        }
        Ok(Self {
            levels,
            keep_maps,
            upsample_mats,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives::*;
    use crate::mesh::VertexAdjacency;

    fn assert_subset(fine: &TriMesh, coarse: &TriMesh, keep: &[usize]) {
        for (ci, &fi) in keep.iter().enumerate() {
            assert_eq!(coarse.vertices()[ci], fine.vertices()[fi]);
        }
        let set: HashSet<usize> = keep.iter().copied().collect();
        assert_eq!(set.len(), keep.len());
    }

    #[test]
    fn icosahedron_to_six() {
        let ico = icosahedron();
        let (c, keep) = decimate(&ico, 6).unwrap();
        assert_eq!(c.n_vertices(), 6);
        assert_subset(&ico, &c, &keep);
        for p in c.vertices() {
            assert!(ico.vertices().contains(p));
        }
        assert_eq!(c.euler_characteristic(), 2);
        VertexAdjacency::build(&c).unwrap();
    }

    #[test]
    fn identity_target() {
        let g = grid(4);
        let (c, keep) = decimate(&g, 16).unwrap();
        assert_eq!(c, g);
        assert_eq!(keep, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn bad_targets() {
        assert!(decimate(&grid(3), 10).is_err());
        assert!(decimate(&grid(3), 0).is_err());
        assert!(matches!(decimate(&tetrahedron(), 3), Err(Error::Decimation { .. })));
    }

    #[test]
    fn sphere_keeps_genus_and_manifoldness() {
        let s = icosphere(2);
        let (c, keep) = decimate(&s, 81).unwrap();
        assert_eq!(c.n_vertices(), 81);
        assert_eq!(c.euler_characteristic(), 2);
        assert_subset(&s, &c, &keep);
        VertexAdjacency::build(&c).unwrap();
    }

    #[test]
    fn grid_keeps_corners() {
        let g = grid(7);
        let (c, keep) = decimate(&g, 25).unwrap();
        for corner in [0, 6, 42, 48] {
            assert!(keep.contains(&corner), "corner {corner} collapsed");
        }
        assert_eq!(c.euler_characteristic(), 1);
    }

    #[test]
    fn grid_hierarchy_sizes() {
        let h = build_hierarchy(&grid(7), 3).unwrap();
        assert_eq!(h.sizes(), vec![13, 25, 49]);
        assert_eq!(h.upsample_mats[1].nrows(), 49);
        assert_eq!(h.upsample_mats[1].ncols(), 25);
        assert!(build_hierarchy(&grid(7), 1).is_err());
    }

    #[test]
    fn template_level_sizes_are_pinned() {
        assert_eq!(level_sizes(778, 5), TEMPLATE_LEVEL_SIZES.to_vec());
        assert_eq!(level_sizes(49, 3), vec![49, 25, 13]);
        assert_eq!(level_sizes(778, 6)[5], 26);
    }

    #[test]
    fn upsample_rows() {
        let s = icosphere(1);
        let (c, keep) = decimate(&s, 21).unwrap();
        let q = build_upsample(&s, &c, &keep).unwrap();
        assert_eq!((q.nrows(), q.ncols()), (42, 21));
        for r in 0..42 {
            assert!((q.row_sum(r) - 1.0).abs() < 1e-9);
            assert!(q.row(r).count() <= 3);
            assert!(q.row(r).all(|(_, v)| (0.0..=1.0).contains(&v)));
        }
        for (ci, &fi) in keep.iter().enumerate() {
            assert_eq!(q.row(fi).collect::<Vec<_>>(), vec![(ci, 1.0)]);
        }
    }

    #[test]
    fn upsample_centroid_weights() {
        let coarse = triangle();
        let c = geom::centroid(coarse.vertices());
        let fine = TriMesh::new(
            vec![coarse.vertices()[0], coarse.vertices()[1], coarse.vertices()[2], c],
            vec![[0, 1, 3], [1, 2, 3], [2, 0, 3]],
        )
        .unwrap();
        let q = build_upsample(&fine, &coarse, &[0, 1, 2]).unwrap();
        for k in 0..3 {
            assert!((q.get(3, k) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(build_upsample(&fine, &coarse, &[0, 1]).is_err());
        assert!(build_upsample(&fine, &coarse, &[0, 0, 1]).is_err());
    }

    #[test]
    fn hierarchy_round_trip() {
        let h = build_hierarchy(&icosphere(1), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        h.save(dir.path()).unwrap();
        let back = MeshHierarchy::load(dir.path()).unwrap();
        assert_eq!(back.keep_maps, h.keep_maps);
        assert_eq!(back.upsample_mats, h.upsample_mats);
        assert_eq!(back.sizes(), h.sizes());
    }
}
