//! k-rings, the spiral patch operator and spiral convolution.
//!
//! A spiral for vertex `v` lists `v`, then its 1-ring in the fixed
//! rotational direction of [`VertexAdjacency`] starting at a seeded random
//! neighbour, then each outer ring starting next to the previous ring's
//! start. Rows are truncated or padded with `-1` to a fixed length.

use std::collections::HashSet;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GatherIndex, Tensor, Var};
use crate::error::{Error, Result};
use crate::mesh::VertexAdjacency;

/// Pad sentinel in spiral rows.
pub const PAD: i64 = -1;

/// Rings `0..=k` around `v`; each ring sorted ascending. Empty rings are
/// kept so that `rings.len() == k + 1`.
pub fn compute_rings(adj: &VertexAdjacency, v: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if v >= adj.n_vertices() {
        return Err(Error::InvalidArgument(format!(
            "vertex {v} out of range ({} vertices)",
            adj.n_vertices()
        )));
    }
    let mut disk: HashSet<usize> = HashSet::from([v]);
    let mut rings = vec![vec![v]];
    for _ in 0..k {
        let last = rings.last().expect("ring 0 exists");
        let mut next: Vec<usize> = last
            .iter()
            .flat_map(|&u| adj.ring(u).iter().copied())
            .filter(|u| !disk.contains(u))
            .collect();
        next.sort_unstable();
        next.dedup();
        disk.extend(next.iter().copied());
        rings.push(next);
    }
    Ok(rings)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpiralTable {
    pub k: usize,
    #[serde(rename = "L")]
    pub length: usize,
    pub seed: u64,
    pub rows: Vec<Vec<i64>>,
}

/// `1 + sum_r ceil(r * mean valence)` for `r = 1..=k`, i.e. the expected
/// k-disk size on a regular mesh with the template's mean valence.
pub fn default_spiral_length(adj: &VertexAdjacency, k: usize) -> usize {
    let valence = adj.mean_valence();
    1 + (1..=k).map(|r| (r as f64 * valence).ceil() as usize).sum::<usize>()
}

impl SpiralTable {
    pub fn build(adj: &VertexAdjacency, k: usize, length: usize, seed: u64) -> Result<Self> {
        if length == 0 {
            return Err(Error::InvalidArgument("spiral length must be at least 1".into()));
        }
        let rows = (0..adj.n_vertices())
            .map(|v| spiral_row(adj, v, k, length, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            k,
            length,
            seed,
            rows,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.rows.len()
    }

    /// All rows concatenated; suitable for [`Var::gather_rows`].
    pub fn gather_index(&self) -> GatherIndex {
        Rc::new(self.rows.iter().flatten().copied().collect())
    }

    /// Checks row lengths, centre entries, index ranges and tail-only pads.
    pub fn validate(&self, n_vertices: usize) -> Result<()> {
        if self.rows.len() != n_vertices {
            return Err(Error::Shape(format!(
                "spiral table has {} rows for {n_vertices} vertices",
                self.rows.len()
            )));
        }
        for (v, row) in self.rows.iter().enumerate() {
            if row.len() != self.length {
                return Err(Error::Shape(format!("row {v} has length {}", row.len())));
            }
            if row[0] != v as i64 {
                return Err(Error::InvalidArgument(format!("row {v} does not start at {v}")));
            }
            let first_pad = row.iter().position(|&i| i == PAD).unwrap_or(row.len());
            if row[first_pad..].iter().any(|&i| i != PAD) {
                return Err(Error::InvalidArgument(format!("row {v} has interior padding")));
            }
            if row[..first_pad]
                .iter()
                .any(|&i| i < 0 || i as usize >= n_vertices)
            {
                return Err(Error::InvalidArgument(format!("row {v} has an out-of-range index")));
            }
        }
        Ok(())
    }
}

fn spiral_row(
    adj: &VertexAdjacency,
    v: usize,
    k: usize,
    length: usize,
    seed: u64,
) -> Result<Vec<i64>> {
    let rings = compute_rings(adj, v, k)?;
    let mut order = vec![v];
    if k >= 1 {
        let mut first: Vec<usize> = adj.ring(v).to_vec();
        if !adj.is_boundary(v) && !first.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(v as u64);
            let offset = rng.random_range(0..first.len());
            first.rotate_left(offset);
        }
        let mut inside: HashSet<usize> = HashSet::from([v]);
        let mut prev = first;
        for ring in rings.iter().skip(2) {
            inside.extend(prev.iter().copied());
            order.extend(prev.iter().copied());
            let target: HashSet<usize> = ring.iter().copied().collect();
            let mut next = Vec::with_capacity(ring.len());
            let mut seen = HashSet::with_capacity(ring.len());
            for &p in &prev {
                let nb = adj.ring(p);
                let n = nb.len();
                // Enter p's ring right after the last inner vertex so outer
                // neighbours come out in the same rotational direction.
                let start = (0..n)
                    .find(|&j| inside.contains(&nb[j]) && !inside.contains(&nb[(j + 1) % n]))
                    .map_or(0, |j| (j + 1) % n);
                for t in 0..n {
                    let u = nb[(start + t) % n];
                    if target.contains(&u) && seen.insert(u) {
                        next.push(u);
                    }
                }
            }
            prev = next;
        }
        order.extend(prev);
    }
    let mut row: Vec<i64> = order.into_iter().take(length).map(|i| i as i64).collect();
    row.resize(length, PAD);
    Ok(row)
}

/// `out[v][l] = features[spirals[v][l]]`, zero for pads; shape `n x L x d`.
pub fn spiral_gather(features: &Tensor, table: &SpiralTable) -> Result<Tensor> {
    let (n, d) = features.dims2()?;
    if n != table.n_vertices() {
        return Err(Error::Shape(format!(
            "features have {n} rows, spiral table {}",
            table.n_vertices()
        )));
    }
    let mut out = vec![0.0; n * table.length * d];
    for (v, row) in table.rows.iter().enumerate() {
        for (l, &src) in row.iter().enumerate() {
            if src >= 0 {
                let dst = (v * table.length + l) * d;
                out[dst..dst + d].copy_from_slice(features.row(src as usize));
            }
        }
    }
    Tensor::new(vec![n, table.length, d], out)
}

/// Spiral convolution: `flatten(gather(features)[v]) * weights + bias`.
/// `weights` is `(L * d_in) x d_out`, `bias` has `d_out` entries.
pub fn spiral_conv(
    features: &Tensor,
    table: &SpiralTable,
    weights: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    let (n, d_in) = features.dims2()?;
    let (wr, d_out) = weights.dims2()?;
    if wr != table.length * d_in || bias.numel() != d_out {
        return Err(Error::Shape(format!(
            "spiral_conv: weights {:?} and bias {:?} for L = {} and d_in = {d_in}",
            weights.shape(),
            bias.shape(),
            table.length
        )));
    }
    let gathered = spiral_gather(features, table)?;
    let patches = gathered.reshaped(vec![n, wr])?;
    let tape = crate::autodiff::Tape::new();
    let x = tape.constant(patches)?;
    let w = tape.constant(weights.clone())?;
    let b = tape.constant(bias.clone())?;
    let y = x.matmul(w)?.add_row(b)?;
    let out = y.value().clone();
    Ok(out)
}

/// Differentiable spiral convolution on a tape.
pub fn spiral_conv_var<'t>(
    features: Var<'t>,
    index: &GatherIndex,
    length: usize,
    weights: Var<'t>,
    bias: Var<'t>,
) -> Result<Var<'t>> {
    let shape = features.shape();
    let (n, d_in) = match shape.as_slice() {
        [n, d] => (*n, *d),
        _ => return Err(Error::Shape(format!("spiral_conv: features {shape:?}"))),
    };
    if index.len() != n * length {
        return Err(Error::Shape(format!(
            "spiral index has {} entries for {n} vertices x L = {length}",
            index.len()
        )));
    }
    features
        .gather_rows(index.clone())?
        .reshape(vec![n, length * d_in])?
        .matmul(weights)?
        .add_row(bias)
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use rand::Rng;

    use super::*;
    use crate::autodiff::Tape;
    use crate::mesh::primitives::*;
    use crate::mesh::TriMesh;

    fn adj(m: &TriMesh) -> VertexAdjacency {
        VertexAdjacency::build(m).unwrap()
    }

    /// Plain BFS distances, independent of `compute_rings`.
    fn bfs_dist(a: &VertexAdjacency, v: usize) -> Vec<Option<usize>> {
        let mut d = vec![None; a.n_vertices()];
        d[v] = Some(0);
        let mut q = VecDeque::from([v]);
        while let Some(u) = q.pop_front() {
            for &w in a.ring(u) {
                if d[w].is_none() {
                    d[w] = Some(d[u].unwrap() + 1);
                    q.push_back(w);
                }
            }
        }
        d
    }

    fn check_rings_against_bfs(m: &TriMesh, k: usize) {
        let a = adj(m);
        for v in 0..m.n_vertices() {
            let rings = compute_rings(&a, v, k).unwrap();
            let d = bfs_dist(&a, v);
            for (r, ring) in rings.iter().enumerate() {
                let expect: Vec<usize> = (0..m.n_vertices()).filter(|&u| d[u] == Some(r)).collect();
                assert_eq!(ring, &expect, "vertex {v} ring {r}");
            }
        }
    }

    #[test]
    fn rings_match_bfs() {
        check_rings_against_bfs(&tetrahedron(), 2);
        check_rings_against_bfs(&icosahedron(), 3);
        check_rings_against_bfs(&grid(7), 3);
    }

    #[test]
    fn tetrahedron_rings() {
        let a = adj(&tetrahedron());
        let r = compute_rings(&a, 0, 2).unwrap();
        assert_eq!(r, vec![vec![0], vec![1, 2, 3], vec![]]);
        assert!(compute_rings(&a, 9, 1).is_err());
    }

    #[test]
    fn icosahedron_ring_sizes() {
        let a = adj(&icosahedron());
        for v in 0..12 {
            let r = compute_rings(&a, v, 2).unwrap();
            assert_eq!((r[1].len(), r[2].len()), (5, 5));
        }
    }

    #[test]
    fn grid_interior_spiral() {
        let g = grid(7);
        let a = adj(&g);
        let t = SpiralTable::build(&a, 2, 16, 0).unwrap();
        t.validate(49).unwrap();
        let v = 3 * 7 + 3;
        let row = &t.rows[v];
        let rings = compute_rings(&a, v, 2).unwrap();
        assert_eq!(rings[1].len(), 6);
        assert_eq!(rings[2].len(), 12);
        assert_eq!(row[0], v as i64);
        let r1: HashSet<i64> = rings[1].iter().map(|&x| x as i64).collect();
        let r2: HashSet<i64> = rings[2].iter().map(|&x| x as i64).collect();
        assert!(row[1..7].iter().all(|x| r1.contains(x)));
        assert!(row[7..16].iter().all(|x| r2.contains(x)));
        assert!(!row.contains(&PAD));
        // consecutive 1-ring entries are mesh neighbours (cyclic order)
        for w in row[1..7].windows(2) {
            assert!(a.ring(w[0] as usize).contains(&(w[1] as usize)));
        }
    }

    #[test]
    fn grid_spiral_runs_in_one_direction() {
        let g = grid(7);
        let a = adj(&g);
        let t = SpiralTable::build(&a, 2, 19, 5).unwrap();
        let v = 3 * 7 + 3;
        let p = g.vertices();
        let c = p[v];
        let angle = |i: i64| {
            let q = p[i as usize];
            (q[1] - c[1]).atan2(q[0] - c[0])
        };
        // successive entries within a ring turn counter-clockwise (seen from +z)
        for span in [1..7, 7..19] {
            let row = &t.rows[v][span];
            let mut turned = 0.0;
            for w in row.windows(2) {
                let mut d = angle(w[1]) - angle(w[0]);
                while d <= -std::f64::consts::PI {
                    d += 2.0 * std::f64::consts::PI;
                }
                while d > std::f64::consts::PI {
                    d -= 2.0 * std::f64::consts::PI;
                }
                assert!(d > 0.0, "row {row:?} turns backwards");
                turned += d;
            }
            assert!(turned < 2.0 * std::f64::consts::PI);
        }
    }

    #[test]
    fn tetrahedron_spiral_is_padded() {
        let t = SpiralTable::build(&adj(&tetrahedron()), 2, 16, 1).unwrap();
        for row in &t.rows {
            assert_eq!(row.iter().filter(|&&i| i == PAD).count(), 12);
            assert!(row[4..].iter().all(|&i| i == PAD));
        }
    }

    #[test]
    fn truncation_keeps_centre_most_entries() {
        let a = adj(&icosahedron());
        let t = SpiralTable::build(&a, 2, 4, 0).unwrap();
        let rings = compute_rings(&a, 0, 1).unwrap();
        assert!(t.rows[0][1..].iter().all(|&i| rings[1].contains(&(i as usize))));
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let a = adj(&icosahedron());
        let t1 = SpiralTable::build(&a, 2, 11, 9).unwrap();
        let t2 = SpiralTable::build(&a, 2, 11, 9).unwrap();
        assert_eq!(t1, t2);
        let t3 = SpiralTable::build(&a, 2, 11, 10).unwrap();
        assert_ne!(t1.rows, t3.rows);
    }

    #[test]
    fn shuffled_faces_give_identical_table() {
        use rand::seq::SliceRandom;
        let m = grid(7);
        let base = SpiralTable::build(&adj(&m), 2, 19, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut faces = m.faces().to_vec();
        faces.shuffle(&mut rng);
        for f in faces.iter_mut() {
            f.rotate_left(rng.random_range(0..3));
        }
        let shuffled = TriMesh::new(m.vertices().to_vec(), faces).unwrap();
        let t = SpiralTable::build(&adj(&shuffled), 2, 19, 4).unwrap();
        assert_eq!(t, base);
    }

    #[test]
    fn boundary_rows_start_at_chain_end() {
        let a = adj(&grid(5));
        let t = SpiralTable::build(&a, 1, 7, 0).unwrap();
        assert_eq!(t.rows[0][1], a.ring(0)[0] as i64);
        t.validate(25).unwrap();
    }

    #[test]
    fn default_length_on_grid() {
        let a = adj(&grid(7));
        // mean valence of a 7x7 grid is below 6, so L <= 19
        let l = default_spiral_length(&a, 2);
        assert!((10..=19).contains(&l));
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn gather_one_hot_and_pads() {
        let t = SpiralTable::build(&adj(&tetrahedron()), 2, 6, 0).unwrap();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let f = Tensor::new(vec![4, 4], eye).unwrap();
        let g = spiral_gather(&f, &t).unwrap();
        assert_eq!(g.shape(), &[4, 6, 4]);
        for v in 0..4 {
            let first = &g.data()[v * 24..v * 24 + 4];
            assert_eq!(first[v], 1.0);
            assert_eq!(first.iter().sum::<f64>(), 1.0);
            assert!(g.data()[v * 24 + 16..v * 24 + 24].iter().all(|&x| x == 0.0));
        }
        let bad = Tensor::zeros(vec![3, 4]);
        assert!(spiral_gather(&bad, &t).is_err());
    }

    #[test]
    fn conv_matches_sum_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let meshes = [icosahedron(), grid(7), tetrahedron()];
        for case in 0..20 {
            let m = &meshes[case % 3];
            let a = adj(m);
            let l = rng.random_range(1..14);
            let t = SpiralTable::build(&a, 2, l, case as u64).unwrap();
            let (d_in, d_out) = (rng.random_range(1..5), rng.random_range(1..5));
            let f = random_tensor(&mut rng, vec![m.n_vertices(), d_in]);
            let w = random_tensor(&mut rng, vec![l * d_in, d_out]);
            let b = random_tensor(&mut rng, vec![d_out]);
            let out = spiral_conv(&f, &t, &w, &b).unwrap();
            // (f * g)_v = sum_l g_l f(S_l(v)) + b with g_l the l-th weight block
            for v in 0..m.n_vertices() {
                for o in 0..d_out {
                    let mut acc = b.data()[o];
                    for (li, &s) in t.rows[v].iter().enumerate() {
                        if s < 0 {
                            continue;
                        }
                        for i in 0..d_in {
                            acc += w.at2(li * d_in + i, o) * f.at2(s as usize, i);
                        }
                    }
                    assert!((out.at2(v, o) - acc).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn delta_kernel_and_bias_only() {
        let m = icosahedron();
        let t = SpiralTable::build(&adj(&m), 2, 5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_tensor(&mut rng, vec![12, 3]);
        let mut w = Tensor::zeros(vec![15, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let out = spiral_conv(&f, &t, &w, &Tensor::zeros(vec![3])).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-15);
        let b = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let out = spiral_conv(&f, &t, &Tensor::zeros(vec![15, 3]), &b).unwrap();
        for v in 0..12 {
            assert_eq!(out.row(v), b.data());
        }
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let m = grid(5);
        let t = SpiralTable::build(&adj(&m), 2, 9, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f1 = random_tensor(&mut rng, vec![25, 2]);
        let f2 = random_tensor(&mut rng, vec![25, 2]);
        let w = random_tensor(&mut rng, vec![18, 4]);
        let zero = Tensor::zeros(vec![4]);
        let alpha = 1.7;
        let mix = Tensor::new(
            vec![25, 2],
            f1.data().iter().zip(f2.data()).map(|(a, b)| alpha * a + b).collect(),
        )
        .unwrap();
        let lhs = spiral_conv(&mix, &t, &w, &zero).unwrap();
        let c1 = spiral_conv(&f1, &t, &w, &zero).unwrap();
        let c2 = spiral_conv(&f2, &t, &w, &zero).unwrap();
        for i in 0..lhs.numel() {
            assert!((lhs.data()[i] - (alpha * c1.data()[i] + c2.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_conv_matches_plain() {
        let m = icosahedron();
        let t = SpiralTable::build(&adj(&m), 2, 8, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_tensor(&mut rng, vec![12, 2]);
        let w = random_tensor(&mut rng, vec![16, 3]);
        let b = random_tensor(&mut rng, vec![3]);
        let tape = Tape::new();
        let y = spiral_conv_var(
            tape.leaf(f.clone()).unwrap(),
            &t.gather_index(),
            8,
            tape.leaf(w.clone()).unwrap(),
            tape.leaf(b.clone()).unwrap(),
        )
        .unwrap();
        assert!(y.value().max_abs_diff(&spiral_conv(&f, &t, &w, &b).unwrap()) < 1e-14);
    }

    #[test]
    fn json_uses_pad_sentinel_and_l_key() {
        let t = SpiralTable::build(&adj(&tetrahedron()), 2, 6, 1).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"L\":6"));
        assert!(s.contains("-1"));
        let back: SpiralTable = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}
