//! Triangle meshes, ordered one-ring adjacency and ASCII OBJ I/O.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An oriented triangle mesh with 0-based vertex indices.
///
/// Construction validates index ranges, rejects degenerate faces, edges with
/// more than two incident faces and inconsistent winding. Once built the
/// mesh is immutable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::InvalidMesh("mesh has no vertices".into()));
        }
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references vertex out of range (n_vertices = {n})"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {fi} is degenerate: {f:?}")));
            }
        }
        if let Some((fi, p)) = vertices
            .iter()
            .enumerate()
            .find(|(_, p)| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::InvalidMesh(format!("vertex {fi} is not finite: {p:?}")));
        }
        check_edges(&faces)?;
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    /// Same topology with new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<[f64; 3]>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Shape(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
        })
    }

    /// Undirected edges `(a, b)` with `a < b`, each once, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter().collect()
    }

    /// V - E + F.
    pub fn euler_characteristic(&self) -> i64 {
        self.n_vertices() as i64 - self.edges().len() as i64 + self.n_faces() as i64
    }

    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        bounding_box(&self.vertices)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        dist(&lo, &hi)
    }
}

pub(crate) fn bounding_box(points: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

pub(crate) fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_edges(faces: &[[usize; 3]]) -> Result<()> {
    let mut undirected: HashMap<(usize, usize), (usize, usize)> =
        HashMap::with_capacity(faces.len() * 3 / 2 + 1);
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            // (faces, faces traversing the edge as a -> b with a < b)
            let entry = undirected.entry((a.min(b), a.max(b))).or_insert((0, 0));
            entry.0 += 1;
            if a < b {
                entry.1 += 1;
            }
        }
    }
    let mut bad: Vec<_> = undirected
        .iter()
        .filter(|(_, &(n, fwd))| n > 2 || (n == 2 && fwd != 1))
        .collect();
    bad.sort();
    if let Some((&(a, b), &(n, _))) = bad.first() {
        if n > 2 {
            return Err(Error::InvalidMesh(format!("edge ({a}, {b}) has {n} incident faces")));
        }
        return Err(Error::InconsistentWinding(a, b));
    }
    Ok(())
}

/// Cyclically ordered one-rings.
///
/// `rings[v]` lists the neighbours of `v` following the face winding: for a
/// face `(v, a, b)` the neighbour `b` directly follows `a`. Viewed from
/// outside with counter-clockwise faces this is a counter-clockwise turn,
/// i.e. clockwise in image coordinates with a downward y axis. Interior
/// rings start at their smallest neighbour; boundary rings are open chains
/// starting at the boundary end that has no predecessor.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexAdjacency {
    rings: Vec<Vec<usize>>,
    boundary: Vec<bool>,
}

impl VertexAdjacency {
    pub fn build(mesh: &TriMesh) -> Result<Self> {
        let n = mesh.n_vertices();
        // Successor map per vertex: a -> b for each incident face (v, a, b).
        let mut next: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for f in mesh.faces() {
            for k in 0..3 {
                let v = f[k];
                next[v].push((f[(k + 1) % 3], f[(k + 2) % 3]));
            }
        }
        let mut rings = Vec::with_capacity(n);
        let mut boundary = Vec::with_capacity(n);
        for (v, fan) in next.iter_mut().enumerate() {
            if fan.is_empty() {
                rings.push(Vec::new());
                boundary.push(true);
                continue;
            }
            fan.sort_unstable();
            let succ: HashMap<usize, usize> = fan.iter().copied().collect();
            if succ.len() != fan.len() {
                return Err(Error::NonManifold { vertex: v });
            }
            let has_pred: BTreeSet<usize> = fan.iter().map(|&(_, b)| b).collect();
            let starts: Vec<usize> = fan
                .iter()
                .map(|&(a, _)| a)
                .filter(|a| !has_pred.contains(a))
                .collect();
            let (start, is_boundary) = match starts.len() {
                0 => (fan[0].0, false),
                1 => (starts[0], true),
                _ => return Err(Error::NonManifold { vertex: v }),
            };
            let mut ring = vec![start];
            let mut cur = start;
            while let Some(&nx) = succ.get(&cur) {
                if nx == start {
                    break;
                }
                if ring.len() > fan.len() {
                    return Err(Error::NonManifold { vertex: v });
                }
                ring.push(nx);
                cur = nx;
            }
            let covered = if is_boundary { ring.len() - 1 } else { ring.len() };
            if covered != fan.len() {
                return Err(Error::NonManifold { vertex: v });
            }
            rings.push(ring);
            boundary.push(is_boundary);
        }
        Ok(Self { rings, boundary })
    }

    pub fn ring(&self, v: usize) -> &[usize] {
        &self.rings[v]
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary[v]
    }

    pub fn n_vertices(&self) -> usize {
        self.rings.len()
    }

    pub fn mean_valence(&self) -> f64 {
        let total: usize = self.rings.iter().map(Vec::len).sum();
        total as f64 / self.rings.len().max(1) as f64
    }
}

/// Reads an ASCII OBJ file; only `v` and `f` records are used.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text)
}

pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut ignored: BTreeSet<String> = BTreeSet::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut parts = content.split_whitespace();
        let tag = parts.next().unwrap_or_default();
        match tag {
            "v" => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|s| {
                        s.parse::<f64>().map_err(|_| Error::Parse {
                            line,
                            msg: format!("bad coordinate {s:?}"),
                        })
                    })
                    .collect::<Result<_>>()?;
                if coords.len() != 3 {
                    return Err(Error::Parse {
                        line,
                        msg: "vertex needs three coordinates".into(),
                    });
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            "f" => {
                let idx: Vec<&str> = parts.collect();
                if idx.len() != 3 {
                    return Err(Error::Parse {
                        line,
                        msg: format!("face has {} vertices; only triangles are supported", idx.len()),
                    });
                }
                let mut face = [0usize; 3];
                for (k, tok) in idx.iter().enumerate() {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| Error::Parse {
                        line,
                        msg: format!("bad face index {tok:?}"),
                    })?;
                    let resolved = if i > 0 {
                        i - 1
                    } else if i < 0 {
                        vertices.len() as i64 + i
                    } else {
                        -1
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(Error::Parse {
                            line,
                            msg: format!("face index {i} out of range"),
                        });
                    }
                    face[k] = resolved as usize;
                }
                faces.push(face);
            }
            other => {
                ignored.insert(other.to_string());
            }
        }
    }
    for tag in ignored {
        warn!("ignoring OBJ records of type {tag:?}");
    }
    TriMesh::new(vertices, faces)
}

pub fn save_mesh(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if mesh.n_vertices() == 0 {
        return Err(Error::InvalidMesh("refusing to save a mesh with no vertices".into()));
    }
    fs::write(path, to_obj_string(mesh)).map_err(|e| Error::io(path, e))
}

pub fn to_obj_string(mesh: &TriMesh) -> String {
    let mut out = String::with_capacity(mesh.n_vertices() * 48 + mesh.n_faces() * 24);
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

/// Small reference meshes used by tests, examples and the CLI.
pub mod primitives {
    use super::TriMesh;

    pub fn triangle() -> TriMesh {
        TriMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .expect("valid triangle")
    }

    pub fn tetrahedron() -> TriMesh {
        TriMesh::new(
            vec![
                [1.0, 1.0, 1.0],
                [1.0, -1.0, -1.0],
                [-1.0, 1.0, -1.0],
                [-1.0, -1.0, 1.0],
            ],
            vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
        )
        .expect("valid tetrahedron")
    }

    pub fn icosahedron() -> TriMesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let vertices = vec![
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ];
        let faces = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        TriMesh::new(vertices, faces).expect("valid icosahedron")
    }

    /// Unit sphere from `levels` rounds of 4-to-1 midpoint subdivision of
    /// the icosahedron (12, 42, 162, 642, ... vertices).
    pub fn icosphere(levels: usize) -> TriMesh {
        let ico = icosahedron();
        let norm = |p: [f64; 3]| {
            let l = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            [p[0] / l, p[1] / l, p[2] / l]
        };
        let mut vertices: Vec<[f64; 3]> = ico.vertices().iter().map(|p| norm(*p)).collect();
        let mut faces = ico.faces().to_vec();
        for _ in 0..levels {
            let mut mids = std::collections::HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            for f in &faces {
                let mut m = [0usize; 3];
                for k in 0..3 {
                    let (a, b) = (f[k], f[(k + 1) % 3]);
                    m[k] = *mids.entry((a.min(b), a.max(b))).or_insert_with(|| {
                        let (p, q) = (vertices[a], vertices[b]);
                        vertices.push(norm([p[0] + q[0], p[1] + q[1], p[2] + q[2]]));
                        vertices.len() - 1
                    });
                }
                next.push([f[0], m[0], m[2]]);
                next.push([f[1], m[1], m[0]]);
                next.push([f[2], m[2], m[1]]);
                next.push(m);
            }
            faces = next;
        }
        TriMesh::new(vertices, faces).expect("valid icosphere")
    }

    /// `n x n` vertex grid in the z = 0 plane, each cell split along the
    /// same diagonal, counter-clockwise seen from +z.
    pub fn grid(n: usize) -> TriMesh {
        assert!(n >= 2, "grid needs at least 2x2 vertices");
        let mut vertices = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                vertices.push([c as f64, r as f64, 0.0]);
            }
        }
        let mut faces = Vec::with_capacity(2 * (n - 1) * (n - 1));
        for r in 0..n - 1 {
            for c in 0..n - 1 {
                let a = r * n + c;
                let b = a + 1;
                let d = a + n;
                let e = d + 1;
                faces.push([a, b, e]);
                faces.push([a, e, d]);
            }
        }
        TriMesh::new(vertices, faces).expect("valid grid")
    }
}
