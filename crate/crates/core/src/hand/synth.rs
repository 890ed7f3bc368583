//! Procedural five-fingered hand used in place of learned model assets.
//!
//! Millimetre units. The wrist opening lies in the `y = 0` plane, fingers
//! point along `-y`, the palm faces `-z` and the thumb leaves the palm side
//! at `x = -W/2`. Positive rotation about `+x` flexes a finger towards the
//! palm.

use std::collections::{HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kmeans::kmeans;
use super::{HandModelAssets, JOINT_PARENTS, N_BETAS, N_CLUSTERS, N_JOINTS, N_KEYPOINTS};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::mesh::TriMesh;
use crate::sparse::CsrMatrix;

const PALM_WIDTH: f64 = 80.0;
const PALM_DEPTH: f64 = 24.0;
const PALM_LENGTH: f64 = 90.0;
const NX: usize = 7;
const NZ: usize = 3;
const PERIMETER: usize = 2 * (NX + NZ);
const CAP_INTERIOR: usize = (NX - 1) * (NZ - 1);
const RING: usize = 8;
/// Smallest vertex count the palm/finger topology supports.
pub const MIN_VERTICES: usize = PERIMETER * 4 + CAP_INTERIOR + 5 * (3 * RING + 1);

/// Per-joint Euler-angle ranges `[lo, hi]` for the x, y and z angles.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLimits {
    pub ranges: Vec<[[f64; 2]; 3]>,
}

impl Default for JointLimits {
    fn default() -> Self {
        let zero = [0.0, 0.0];
        let mcp = [[0.0, 1.2], zero, [-0.25, 0.25]];
        let pip = [[0.0, 1.4], zero, zero];
        let dip = [[0.0, 1.0], zero, zero];
        let finger = [mcp, pip, dip];
        let mut ranges = vec![[zero; 3]];
        for _ in 0..4 {
            ranges.extend(finger);
        }
        ranges.push([[-0.2, 0.2], [-0.6, 0.1], [-0.3, 0.3]]);
        ranges.push([zero, [-0.8, 0.0], zero]);
        ranges.push([zero, [-0.9, 0.0], zero]);
        Self { ranges }
    }
}

impl JointLimits {
    pub fn contains(&self, joint: usize, angles: [f64; 3], tol: f64) -> bool {
        self.ranges[joint]
            .iter()
            .zip(angles)
            .all(|(r, a)| a >= r[0] - tol && a <= r[1] + tol)
    }

    /// Uniform sample inside the box of `joint`.
    pub fn sample(&self, joint: usize, rng: &mut impl Rng) -> [f64; 3] {
        self.ranges[joint].map(|[lo, hi]| if hi > lo { rng.random_range(lo..hi) } else { lo })
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_vertices: usize,
    pub seed: u64,
    pub pose_samples: usize,
    pub clusters: usize,
    pub kmeans_iterations: usize,
    pub limits: JointLimits,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_vertices: 778,
            seed: 0,
            pose_samples: 5000,
            clusters: N_CLUSTERS,
            kmeans_iterations: 50,
            limits: JointLimits::default(),
        }
    }
}

/// Per finger in thumb, index, middle, ring, little order.
struct FingerSpec {
    lengths: [f64; 3],
    radii: [f64; 2],
    joints: [usize; 3],
    tip_keypoint: usize,
    joint_keypoints: [usize; 3],
}

const FINGERS: [FingerSpec; 5] = [
    FingerSpec {
        lengths: [38.0, 32.0, 26.0],
        radii: [6.0, 8.0],
        joints: [13, 14, 15],
        tip_keypoint: 4,
        joint_keypoints: [1, 2, 3],
    },
    FingerSpec {
        lengths: [42.0, 26.0, 22.0],
        radii: [5.2, 7.0],
        joints: [1, 2, 3],
        tip_keypoint: 8,
        joint_keypoints: [5, 6, 7],
    },
    FingerSpec {
        lengths: [46.0, 30.0, 24.0],
        radii: [5.4, 7.2],
        joints: [4, 5, 6],
        tip_keypoint: 12,
        joint_keypoints: [9, 10, 11],
    },
    FingerSpec {
        lengths: [44.0, 28.0, 23.0],
        radii: [5.2, 7.0],
        joints: [10, 11, 12],
        tip_keypoint: 16,
        joint_keypoints: [13, 14, 15],
    },
    FingerSpec {
        lengths: [34.0, 21.0, 19.0],
        radii: [4.6, 6.2],
        joints: [7, 8, 9],
        tip_keypoint: 20,
        joint_keypoints: [17, 18, 19],
    },
];

#[derive(Clone, Copy)]
struct Attr {
    finger: Option<usize>,
    /// Distance from the finger base along its axis.
    t: f64,
    ring_center: Vec3,
}

struct Builder {
    pos: Vec<Vec3>,
    attr: Vec<Attr>,
    faces: Vec<[usize; 3]>,
}

impl Builder {
    fn vertex(&mut self, p: Vec3, attr: Attr) -> usize {
        self.pos.push(p);
        self.attr.push(attr);
        self.pos.len() - 1
    }

    fn quad(&mut self, a: usize, b: usize, c: usize, d: usize) {
        self.faces.push([a, b, c]);
        self.faces.push([a, c, d]);
    }
}

fn palm_attr(_p: Vec3) -> Attr {
    Attr {
        finger: None,
        t: 0.0,
        ring_center: [0.0; 3],
    }
}

/// `(x, z)` of perimeter point `i`, counter-clockwise from the palm-side
/// corner at `x = -W/2`.
fn perimeter_xz(i: usize) -> (f64, f64) {
    let dx = PALM_WIDTH / NX as f64;
    let dz = PALM_DEPTH / NZ as f64;
    let (x0, z0) = (-PALM_WIDTH / 2.0, -PALM_DEPTH / 2.0);
    let i = i % PERIMETER;
    if i <= NX {
        (x0 + i as f64 * dx, z0)
    } else if i <= NX + NZ {
        (-x0, z0 + (i - NX) as f64 * dz)
    } else if i <= 2 * NX + NZ {
        (-x0 - (i - NX - NZ) as f64 * dx, -z0)
    } else {
        (x0, -z0 - (i - 2 * NX - NZ) as f64 * dz)
    }
}

/// Perimeter index of cap grid point `(cx, cz)` on the cap boundary.
fn cap_boundary_index(cx: usize, cz: usize) -> Option<usize> {
    if cz == 0 {
        Some(cx)
    } else if cx == NX {
        Some(NX + cz)
    } else if cz == NZ {
        Some(NX + NZ + (NX - cx))
    } else if cx == 0 {
        Some((2 * NX + NZ + (NZ - cz)) % PERIMETER)
    } else {
        None
    }
}

/// `(rings per segment, palm y-quads)` maximising the base vertex count.
fn choose_resolution(n: usize) -> Option<(usize, usize, usize)> {
    let mut best: Option<(usize, usize, usize)> = None;
    for rps in 1..=40 {
        for ny in 3..=200 {
            let base = PERIMETER * (ny + 1) + CAP_INTERIOR + 5 * (3 * rps * RING + 1);
            if base > n {
                break;
            }
            if best.is_none_or(|(b, r, _)| base > b || (base == b && rps > r)) {
                best = Some((base, rps, ny));
            }
        }
    }
    best
}

struct Layout {
    joint_rings: Vec<Vec<usize>>,
    tips: [usize; 5],
}

fn build_geometry(rps: usize, ny: usize) -> (Builder, Layout) {
    let mut b = Builder {
        pos: Vec::new(),
        attr: Vec::new(),
        faces: Vec::new(),
    };
    let dy = PALM_LENGTH / ny as f64;
    let mut rings = Vec::with_capacity(ny + 1);
    for r in 0..=ny {
        let y = -(r as f64) * dy;
        let ring: Vec<usize> = (0..PERIMETER)
            .map(|i| {
                let (x, z) = perimeter_xz(i);
                let p = [x, y, z];
                b.vertex(p, palm_attr(p))
            })
            .collect();
        rings.push(ring);
    }
    let thumb_row = ((ny * 3) / 10).clamp(1, ny - 2);
    let side = [2 * NX + NZ, 2 * NX + NZ + 1, 2 * NX + NZ + 2];
    for r in 0..ny {
        for i in 0..PERIMETER {
            if r == thumb_row && side.contains(&i) {
                continue;
            }
            let j = (i + 1) % PERIMETER;
            b.quad(rings[r][i], rings[r][j], rings[r + 1][j], rings[r + 1][i]);
        }
    }

    let mut cap = vec![vec![usize::MAX; NZ + 1]; NX + 1];
    for (cx, col) in cap.iter_mut().enumerate() {
        for (cz, slot) in col.iter_mut().enumerate() {
            *slot = match cap_boundary_index(cx, cz) {
                Some(i) => rings[ny][i],
                None => {
                    let (x0, z0) = perimeter_xz(0);
                    let p = [
                        x0 + cx as f64 * PALM_WIDTH / NX as f64,
                        -PALM_LENGTH,
                        z0 + cz as f64 * PALM_DEPTH / NZ as f64,
                    ];
                    b.vertex(p, palm_attr(p))
                }
            };
        }
    }
    for cx in (1..NX).step_by(2) {
        for cz in 0..NZ {
            b.quad(cap[cx][cz], cap[cx + 1][cz], cap[cx + 1][cz + 1], cap[cx][cz + 1]);
        }
    }

    let mut joint_rings = vec![Vec::new(); N_JOINTS];
    joint_rings[0] = rings[0].clone();
    let mut tips = [0usize; 5];

    // Finger holes as (loop, axis, e1, e2, half extents along e1/e2).
    let mut holes: Vec<(Vec<usize>, Vec3, Vec3, Vec3)> = Vec::new();
    let (ta, tb) = (rings[thumb_row].clone(), rings[thumb_row + 1].clone());
    let thumb_loop = vec![
        ta[side[0]],
        ta[side[1]],
        ta[side[2]],
        ta[0],
        tb[0],
        tb[side[2]],
        tb[side[1]],
        tb[side[0]],
    ];
    let d = geom::normalize([-0.8, -0.6, -0.3]);
    let e1 = geom::normalize(geom::sub([0.0, -1.0, 0.0], geom::scale(d, -d[1])));
    let z = [0.0, 0.0, 1.0];
    let e2 = geom::normalize(geom::sub(
        geom::sub(z, geom::scale(d, d[2])),
        geom::scale(e1, geom::dot(z, e1)),
    ));
    holes.push((thumb_loop, d, e1, e2));
    for q in [0, 2, 4, 6] {
        let lp = vec![
            cap[q][0],
            cap[q + 1][0],
            cap[q + 1][1],
            cap[q + 1][2],
            cap[q + 1][3],
            cap[q][3],
            cap[q][2],
            cap[q][1],
        ];
        holes.push((lp, [0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]));
    }

    for (f, (lp, axis, e1, e2)) in holes.into_iter().enumerate() {
        let spec = &FINGERS[f];
        let c0 = geom::centroid(&lp.iter().map(|&v| b.pos[v]).collect::<Vec<_>>());
        let (mut h1, mut h2) = (0.0f64, 0.0f64);
        for &v in &lp {
            let o = geom::sub(b.pos[v], c0);
            h1 = h1.max(geom::dot(o, e1).abs());
            h2 = h2.max(geom::dot(o, e2).abs());
        }
        let angles: Vec<f64> = lp
            .iter()
            .map(|&v| {
                let o = geom::sub(b.pos[v], c0);
                (geom::dot(o, e2) / h2).atan2(geom::dot(o, e1) / h1)
            })
            .collect();
        for &v in &lp {
            b.attr[v] = Attr {
                finger: Some(f),
                t: 0.0,
                ring_center: c0,
            };
        }
        let [l1, l2, l3] = spec.lengths;
        let total = l1 + l2 + l3;
        let mut prev = lp.clone();
        joint_rings[spec.joints[0]] = lp.clone();
        for j in 1..=3 * rps {
            let seg = (j - 1) / rps;
            let frac = ((j - 1) % rps + 1) as f64 / rps as f64;
            let t = match seg {
                0 => frac * l1,
                1 => l1 + frac * l2,
                _ => l1 + l2 + frac * 0.8 * l3,
            };
            let taper = 1.0 - 0.25 * t / total;
            let round = if j == 3 * rps { 0.75 } else { 1.0 };
            let center = geom::add(c0, geom::scale(axis, t));
            let ring: Vec<usize> = angles
                .iter()
                .map(|&phi| {
                    let off = geom::add(
                        geom::scale(e1, spec.radii[0] * taper * round * phi.cos()),
                        geom::scale(e2, spec.radii[1] * taper * round * phi.sin()),
                    );
                    b.vertex(
                        geom::add(center, off),
                        Attr {
                            finger: Some(f),
                            t,
                            ring_center: center,
                        },
                    )
                })
                .collect();
            for k in 0..RING {
                let k1 = (k + 1) % RING;
                b.quad(prev[k], prev[k1], ring[k1], ring[k]);
            }
            if j == rps {
                joint_rings[spec.joints[1]] = ring.clone();
            } else if j == 2 * rps {
                joint_rings[spec.joints[2]] = ring.clone();
            }
            prev = ring;
        }
        let apex_c = geom::add(c0, geom::scale(axis, total));
        let apex = b.vertex(
            apex_c,
            Attr {
                finger: Some(f),
                t: total,
                ring_center: apex_c,
            },
        );
        for k in 0..RING {
            b.faces.push([prev[k], prev[(k + 1) % RING], apex]);
        }
        tips[f] = apex;
    }
    (b, Layout { joint_rings, tips })
}

/// Makes face winding consistent by breadth-first propagation, then flips
/// everything if the surface encloses negative volume.
fn orient(pos: &[Vec3], faces: &mut [[usize; 3]]) -> Result<()> {
    let mut edge_faces: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            edge_faces.entry((a.min(b), a.max(b))).or_default().push(fi);
        }
    }
    let directed = |f: &[usize; 3], a: usize, b: usize| {
        (0..3).any(|k| f[k] == a && f[(k + 1) % 3] == b)
    };
    let mut done = vec![false; faces.len()];
    for start in 0..faces.len() {
        if done[start] {
            continue;
        }
        done[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(fi) = queue.pop_front() {
            let f = faces[fi];
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                for &g in &edge_faces[&(a.min(b), a.max(b))] {
                    if g == fi {
                        continue;
                    }
                    if !done[g] {
                        if directed(&faces[g], a, b) {
                            faces[g].swap(1, 2);
                        }
                        done[g] = true;
                        queue.push_back(g);
                    } else if directed(&faces[g], a, b) {
                        return Err(Error::InvalidMesh("hand surface is not orientable".into()));
                    }
                }
            }
        }
    }
    let c = geom::centroid(pos);
    let volume: f64 = faces
        .iter()
        .map(|f| {
            let (a, b, d) = (geom::sub(pos[f[0]], c), geom::sub(pos[f[1]], c), geom::sub(pos[f[2]], c));
            geom::dot(a, geom::cross(b, d))
        })
        .sum();
    if volume < 0.0 {
        faces.iter_mut().for_each(|f| f.swap(1, 2));
    }
    Ok(())
}

/// Per-vertex data that is averaged when an edge is split.
struct VertexData {
    pos: Vec<Vec3>,
    weights: Vec<Vec<f64>>,
    basis: Vec<Vec<f64>>,
}

fn split_longest(data: &mut VertexData, faces: &mut Vec<[usize; 3]>) {
    let mut best: Option<(f64, usize, usize)> = None;
    for f in faces.iter() {
        for k in 0..3 {
            let (a, b) = (f[k].min(f[(k + 1) % 3]), f[k].max(f[(k + 1) % 3]));
            let l = geom::norm(geom::sub(data.pos[a], data.pos[b]));
            let better = match best {
                None => true,
                Some((bl, ba, bb)) => l > bl || (l == bl && (a, b) < (ba, bb)),
            };
            if better {
                best = Some((l, a, b));
            }
        }
    }
    let (_, a, b) = best.expect("mesh has edges");
    let mid = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| 0.5 * (p + q)).collect::<Vec<_>>();
    let m = data.pos.len();
    let p = mid(&data.pos[a], &data.pos[b]);
    data.pos.push([p[0], p[1], p[2]]);
    let w = mid(&data.weights[a], &data.weights[b]);
    data.weights.push(w);
    let s = mid(&data.basis[a], &data.basis[b]);
    data.basis.push(s);
    let mut out = Vec::with_capacity(faces.len() + 2);
    for f in faces.iter() {
        let hit = (0..3).find(|&k| {
            let (x, y) = (f[k], f[(k + 1) % 3]);
            (x == a && y == b) || (x == b && y == a)
        });
        match hit {
            Some(k) => {
                let (x, y, z) = (f[k], f[(k + 1) % 3], f[(k + 2) % 3]);
                out.push([x, m, z]);
                out.push([m, y, z]);
            }
            None => out.push(*f),
        }
    }
    *faces = out;
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn skin_row(attr: &Attr) -> Vec<f64> {
    let mut w = vec![0.0; N_JOINTS];
    let Some(f) = attr.finger else {
        w[0] = 1.0;
        return w;
    };
    let spec = &FINGERS[f];
    let [l1, l2, l3] = spec.lengths;
    let bounds = [0.0, l1, l1 + l2];
    let halfw = [0.25 * l1, 0.25 * l1.min(l2), 0.25 * l2.min(l3)];
    let past: Vec<f64> = bounds
        .iter()
        .zip(halfw)
        .map(|(&b, h)| smoothstep((attr.t - b + h) / (2.0 * h)))
        .collect();
    let chain = [0, spec.joints[0], spec.joints[1], spec.joints[2]];
    w[chain[0]] += 1.0 - past[0];
    w[chain[1]] += past[0] - past[1];
    w[chain[2]] += past[1] - past[2];
    w[chain[3]] += past[2];
    w.iter_mut().for_each(|x| {
        if *x < 1e-15 {
            *x = 0.0;
        }
    });
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Ten linear shape modes, 10% change per unit coefficient: overall size,
/// palm width, palm length, thickness, five finger lengths, finger girth.
fn basis_row(p: Vec3, attr: &Attr, finger_frames: &[(Vec3, Vec3)]) -> Vec<f64> {
    let mut m = vec![[0.0; 3]; N_BETAS];
    m[0] = geom::scale(p, 0.1);
    let anchor = match attr.finger {
        Some(f) => finger_frames[f].0,
        None => p,
    };
    m[1] = [0.1 * anchor[0], 0.0, 0.0];
    m[2] = [0.0, 0.1 * anchor[1], 0.0];
    m[3] = [0.0, 0.0, 0.1 * p[2]];
    if let Some(f) = attr.finger {
        m[4 + f] = geom::scale(finger_frames[f].1, 0.1 * attr.t);
        if attr.t > 0.0 {
            m[9] = geom::scale(geom::sub(p, attr.ring_center), 0.1);
        }
    }
    let mut row = vec![0.0; 3 * N_BETAS];
    for (b, d) in m.iter().enumerate() {
        for c in 0..3 {
            row[c * N_BETAS + b] = d[c];
        }
    }
    row
}

/// Builds a procedural hand with exactly `config.n_vertices` vertices,
/// smooth skinning weights, ten shape modes, a ring-centroid regressor and
/// k-means pose clusters drawn from `config.limits`.
pub fn generate_synthetic_assets(config: &SynthConfig) -> Result<HandModelAssets> {
    let n = config.n_vertices;
    if n < MIN_VERTICES {
        return Err(Error::InvalidArgument(format!(
            "synthetic hand needs at least {MIN_VERTICES} vertices, got {n}"
        )));
    }
    if config.limits.ranges.len() != N_JOINTS {
        return Err(Error::InvalidArgument(format!(
            "joint limits for {} joints, expected {N_JOINTS}",
            config.limits.ranges.len()
        )));
    }
    let (_, rps, ny) = choose_resolution(n).expect("n >= MIN_VERTICES");
    let (mut b, layout) = build_geometry(rps, ny);
    orient(&b.pos, &mut b.faces)?;

    let frames: Vec<(Vec3, Vec3)> = (0..5)
        .map(|f| {
            let base = geom::centroid(
                &layout.joint_rings[FINGERS[f].joints[0]]
                    .iter()
                    .map(|&v| b.pos[v])
                    .collect::<Vec<_>>(),
            );
            let tip = b.pos[layout.tips[f]];
            (base, geom::normalize(geom::sub(tip, base)))
        })
        .collect();
    let mut data = VertexData {
        weights: b.attr.iter().map(skin_row).collect(),
        basis: b
            .pos
            .iter()
            .zip(&b.attr)
            .map(|(p, a)| basis_row(*p, a, &frames))
            .collect(),
        pos: b.pos,
    };
    let mut faces = b.faces;
    while data.pos.len() < n {
        split_longest(&mut data, &mut faces);
    }
    let template = TriMesh::new(data.pos.clone(), faces)?;

    let mut reg = Vec::new();
    for (j, ring) in layout.joint_rings.iter().enumerate() {
        let kp = super::KEYPOINT_JOINT
            .iter()
            .position(|&x| x == Some(j))
            .expect("every joint has a keypoint");
        for &v in ring {
            reg.push((v, kp, 1.0 / ring.len() as f64));
        }
    }
    for (f, &tip) in layout.tips.iter().enumerate() {
        reg.push((tip, FINGERS[f].tip_keypoint, 1.0));
        debug_assert_eq!(
            super::KEYPOINT_JOINT[FINGERS[f].joint_keypoints[0]],
            Some(FINGERS[f].joints[0])
        );
    }
    let regressor = CsrMatrix::from_triplets(n, N_KEYPOINTS, reg)?;
    let joint_rest = layout
        .joint_rings
        .iter()
        .map(|ring| geom::centroid(&ring.iter().map(|&v| data.pos[v]).collect::<Vec<_>>()))
        .collect();

    let cluster_centers = cluster_poses(config)?;
    let assets = HandModelAssets {
        template,
        parents: JOINT_PARENTS.to_vec(),
        joint_rest,
        skin_weights: Tensor::new(vec![n, N_JOINTS], data.weights.concat())?,
        shape_basis: Tensor::new(vec![3 * n, N_BETAS], data.basis.concat())?,
        regressor,
        cluster_centers,
    };
    assets.validate()?;
    Ok(assets)
}

fn cluster_poses(config: &SynthConfig) -> Result<Tensor> {
    let c = config.clusters;
    let mut data = Vec::with_capacity(N_JOINTS * c * 3);
    for j in 0..N_JOINTS {
        let fixed = config.limits.ranges[j].iter().all(|r| r[0] == r[1]);
        if fixed {
            let p = config.limits.ranges[j].map(|r| r[0]);
            for _ in 0..c {
                data.extend_from_slice(&p);
            }
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(j as u64);
        let samples: Vec<[f64; 3]> = (0..config.pose_samples.max(c))
            .map(|_| config.limits.sample(j, &mut rng))
            .collect();
        let centers = kmeans(&samples, c, config.kmeans_iterations, rng.random())?;
        for p in centers {
            data.extend_from_slice(&p);
        }
    }
    Tensor::new(vec![N_JOINTS, c, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::VertexAdjacency;

    #[test]
    fn resolution_for_template_size() {
        let (base, rps, ny) = choose_resolution(778).unwrap();
        assert_eq!((base, rps, ny), (777, 5, 7));
        assert!(choose_resolution(MIN_VERTICES - 1).is_none());
    }

    #[test]
    fn perimeter_is_closed_rectangle() {
        assert_eq!(perimeter_xz(0), (-40.0, -12.0));
        assert_eq!(perimeter_xz(NX), (40.0, -12.0));
        assert_eq!(perimeter_xz(NX + NZ), (40.0, 12.0));
        assert_eq!(perimeter_xz(2 * NX + NZ), (-40.0, 12.0));
        assert_eq!(cap_boundary_index(0, 0), Some(0));
        assert_eq!(cap_boundary_index(0, 1), Some(PERIMETER - 1));
        assert_eq!(cap_boundary_index(3, 1), None);
    }

    #[test]
    fn geometry_is_a_manifold_with_one_boundary_loop() {
        let (mut b, layout) = build_geometry(2, 4);
        orient(&b.pos, &mut b.faces).unwrap();
        let m = TriMesh::new(b.pos.clone(), b.faces.clone()).unwrap();
        let adj = VertexAdjacency::build(&m).unwrap();
        let boundary: Vec<usize> = (0..m.n_vertices()).filter(|&v| adj.is_boundary(v)).collect();
        assert_eq!(boundary, layout.joint_rings[0]);
        // disk topology: V - E + F = 1
        assert_eq!(m.euler_characteristic(), 1);
    }

    #[test]
    fn skin_rows_blend_two_joints_at_most() {
        for f in 0..5 {
            let total: f64 = FINGERS[f].lengths.iter().sum();
            for i in 0..=50 {
                let a = Attr {
                    finger: Some(f),
                    t: total * i as f64 / 50.0,
                    ring_center: [0.0; 3],
                };
                let w = skin_row(&a);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(w.iter().filter(|&&x| x > 0.0).count() <= 2);
            }
        }
    }
}
