//! Image-to-mesh network: a strided convolutional encoder producing a
//! latent code and a spiral-convolution decoder over a mesh hierarchy.

mod checkpoint;
pub mod data;
mod train;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GatherIndex, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mesh::VertexAdjacency;
use crate::render::Image;
use crate::sampling::MeshHierarchy;
use crate::sparse::CsrMatrix;
use crate::spiral::{default_spiral_length, spiral_conv_var, SpiralTable};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{augment, train, train_with_spirals, AugmentConfig, EpochLog, Sample, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Square input size in pixels.
    pub crop: usize,
    /// Output channels of the stride-2 3x3 convolution blocks.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub alpha: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            crop: 192,
            channels: vec![16, 32, 32, 64, 64],
            latent_dim: 64,
            alpha: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    /// Channels per hierarchy level, coarsest first.
    pub widths: Vec<usize>,
    pub spiral_k: usize,
    /// Spiral length per level, coarsest first; derived from the mean
    /// valence when absent.
    pub spiral_lengths: Option<Vec<usize>>,
    pub spiral_seed: u64,
    pub alpha: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            widths: vec![64, 32, 32, 16, 16],
            spiral_k: 2,
            spiral_lengths: None,
            spiral_seed: 0,
            alpha: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

/// Per-axis statistics used to whiten inputs and targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub vertex_mean: [f64; 3],
    pub vertex_std: [f64; 3],
    pub image_mean: [f64; 3],
    pub image_std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            vertex_mean: [0.0; 3],
            vertex_std: [1.0; 3],
            image_mean: [0.0; 3],
            image_std: [1.0; 3],
        }
    }
}

impl Normalization {
    pub fn fit(meshes: &[&[[f64; 3]]], images: &[&Image]) -> Self {
        let stats = |vals: &mut dyn Iterator<Item = [f64; 3]>| {
            let mut n = 0.0_f64;
            let mut s = [0.0; 3];
            let mut s2 = [0.0; 3];
            for v in vals {
                n += 1.0;
                for c in 0..3 {
                    s[c] += v[c];
                    s2[c] += v[c] * v[c];
                }
            }
            let mean = s.map(|x| x / n.max(1.0));
            let std = [0, 1, 2].map(|c| {
                let var = s2[c] / n.max(1.0) - mean[c] * mean[c];
                let sd = var.max(0.0).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            });
            (mean, std)
        };
        let (vertex_mean, vertex_std) = stats(&mut meshes.iter().flat_map(|m| m.iter().copied()));
        let (image_mean, image_std) = stats(
            &mut images
                .iter()
                .flat_map(|im| im.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])),
        );
        Self {
            vertex_mean,
            vertex_std,
            image_mean,
            image_std,
        }
    }

    pub fn normalize_mesh(&self, mesh: &[[f64; 3]]) -> Vec<[f64; 3]> {
        mesh.iter()
            .map(|p| [0, 1, 2].map(|c| (p[c] - self.vertex_mean[c]) / self.vertex_std[c]))
            .collect()
    }

    pub fn denormalize_mesh(&self, mesh: &[[f64; 3]]) -> Vec<[f64; 3]> {
        mesh.iter()
            .map(|p| [0, 1, 2].map(|c| p[c] * self.vertex_std[c] + self.vertex_mean[c]))
            .collect()
    }
}

/// im2col gather for a 3x3, stride-2, padding-1 convolution over an
/// `h x w` row-major pixel grid.
fn conv_index(h: usize, w: usize) -> (GatherIndex, usize, usize) {
    let ho = h.div_ceil(2);
    let wo = w.div_ceil(2);
    let mut idx = Vec::with_capacity(ho * wo * 9);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..3 {
                for kx in 0..3 {
                    let y = (2 * oy + ky) as i64 - 1;
                    let x = (2 * ox + kx) as i64 - 1;
                    if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                        idx.push(-1);
                    } else {
                        idx.push(y * w as i64 + x);
                    }
                }
            }
        }
    }
    (Rc::new(idx), ho, wo)
}

/// Encoder and decoder weights plus the fixed mesh operators.
#[derive(Debug, Clone)]
pub struct MeshNet {
    pub config: NetworkConfig,
    pub hierarchy: MeshHierarchy,
    pub tables: Vec<SpiralTable>,
    pub params: Vec<(String, Tensor)>,
    pub norm: Normalization,
    spiral_index: Vec<GatherIndex>,
    upsample: Vec<Rc<CsrMatrix>>,
    conv: Vec<(GatherIndex, usize, usize)>,
}

impl MeshNet {
    /// Randomly initialised network over `hierarchy`.
    pub fn new(config: NetworkConfig, hierarchy: MeshHierarchy, seed: u64) -> Result<Self> {
        let mut net = Self::with_operators(config, hierarchy, None)?;
        net.params = net.init_params(seed);
        Ok(net)
    }

    /// Like [`MeshNet::new`] with precomputed spiral tables, one per level.
    pub fn with_spirals(
        config: NetworkConfig,
        hierarchy: MeshHierarchy,
        tables: Vec<SpiralTable>,
        seed: u64,
    ) -> Result<Self> {
        let mut net = Self::with_operators(config, hierarchy, Some(tables))?;
        net.params = net.init_params(seed);
        Ok(net)
    }

    pub(crate) fn with_operators(
        config: NetworkConfig,
        hierarchy: MeshHierarchy,
        tables: Option<Vec<SpiralTable>>,
    ) -> Result<Self> {
        let enc = &config.encoder;
        let dec = &config.decoder;
        if enc.crop == 0 || enc.channels.is_empty() || enc.channels.contains(&0) {
            return Err(Error::InvalidArgument("encoder needs a crop and positive channels".into()));
        }
        if enc.latent_dim != dec.latent_dim || dec.latent_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "encoder latent {} and decoder latent {} differ",
                enc.latent_dim, dec.latent_dim
            )));
        }
        let levels = hierarchy.n_levels();
        if dec.widths.len() != levels || dec.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "{} decoder widths for {levels} hierarchy levels",
                dec.widths.len()
            )));
        }
        let tables = match tables {
            Some(t) => t,
            None => {
                let mut out = Vec::with_capacity(levels);
                for (i, level) in hierarchy.levels.iter().enumerate() {
                    let adj = VertexAdjacency::build(level)?;
                    let len = match &dec.spiral_lengths {
                        Some(l) if l.len() == levels => l[i],
                        Some(l) => {
                            return Err(Error::InvalidArgument(format!(
                                "{} spiral lengths for {levels} levels",
                                l.len()
                            )))
                        }
                        None => default_spiral_length(&adj, dec.spiral_k),
                    };
                    out.push(SpiralTable::build(&adj, dec.spiral_k, len, dec.spiral_seed)?);
                }
                out
            }
        };
        if tables.len() != levels {
            return Err(Error::InvalidArgument("one spiral table per level required".into()));
        }
        for (t, level) in tables.iter().zip(&hierarchy.levels) {
            t.validate(level.n_vertices())?;
        }
        let mut conv = Vec::new();
        let (mut h, mut w) = (enc.crop, enc.crop);
        for _ in &enc.channels {
            let c = conv_index(h, w);
            h = c.1;
            w = c.2;
            conv.push(c);
        }
        Ok(Self {
            spiral_index: tables.iter().map(SpiralTable::gather_index).collect(),
            upsample: hierarchy.upsample_mats.iter().cloned().map(Rc::new).collect(),
            tables,
            hierarchy,
            config,
            params: Vec::new(),
            norm: Normalization::default(),
            conv,
        })
    }

    /// Names and shapes of every weight, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let enc = &self.config.encoder;
        let dec = &self.config.decoder;
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &c) in enc.channels.iter().enumerate() {
            out.push((format!("enc.conv{i}.w"), vec![9 * cin, c]));
            out.push((format!("enc.conv{i}.b"), vec![1, c]));
            cin = c;
        }
        out.push(("enc.fc.w".into(), vec![cin, enc.latent_dim]));
        out.push(("enc.fc.b".into(), vec![1, enc.latent_dim]));
        let n0 = self.hierarchy.levels[0].n_vertices();
        out.push(("dec.fc.w".into(), vec![dec.latent_dim, n0 * dec.widths[0]]));
        out.push(("dec.fc.b".into(), vec![1, n0 * dec.widths[0]]));
        for i in 1..dec.widths.len() {
            let l = self.tables[i].length;
            out.push((format!("dec.conv{i}.w"), vec![l * dec.widths[i - 1], dec.widths[i]]));
            out.push((format!("dec.conv{i}.b"), vec![1, dec.widths[i]]));
        }
        let last = dec.widths.len() - 1;
        let l = self.tables[last].length;
        out.push(("dec.out.w".into(), vec![l * dec.widths[last], 3]));
        out.push(("dec.out.b".into(), vec![1, 3]));
        out
    }

    fn init_params(&self, seed: u64) -> Vec<(String, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = self.config.decoder.alpha;
        self.param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".b") {
                    vec![0.0; n]
                } else {
                    let bound = (6.0 / ((1.0 + alpha * alpha) * shape[0] as f64)).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                let t = Tensor::new(shape, data).expect("shape matches data");
                (name, t)
            })
            .collect()
    }

    pub fn n_vertices(&self) -> usize {
        self.hierarchy.finest().n_vertices()
    }

    /// Whitened `crop^2 x 3` input; other sizes are rejected.
    pub fn image_tensor(&self, image: &Image) -> Result<Tensor> {
        let crop = self.config.encoder.crop;
        if image.width != crop || image.height != crop {
            return Err(Error::Shape(format!(
                "image is {}x{}, encoder expects {crop}x{crop}",
                image.width, image.height
            )));
        }
        let n = &self.norm;
        let data = image
            .data
            .chunks_exact(3)
            .flat_map(|p| [0, 1, 2].map(|c| (p[c] - n.image_mean[c]) / n.image_std[c]))
            .collect();
        Tensor::new(vec![crop * crop, 3], data)
    }

    pub fn leaves<'t>(&self, tape: &'t Tape) -> Result<Vec<Var<'t>>> {
        self.params.iter().map(|(_, t)| tape.leaf(t.clone())).collect()
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> Result<Vec<Var<'t>>> {
        self.params.iter().map(|(_, t)| tape.constant(t.clone())).collect()
    }

    /// `1 x latent` code for a whitened image var.
    pub fn encode_var<'t>(&self, p: &[Var<'t>], image: Var<'t>) -> Result<Var<'t>> {
        let enc = &self.config.encoder;
        let mut x = image;
        let mut cin = 3;
        for (i, (idx, ho, wo)) in self.conv.iter().enumerate() {
            x = x
                .gather_rows(idx.clone())?
                .reshape(vec![ho * wo, 9 * cin])?
                .matmul(p[2 * i])?
                .add_row(p[2 * i + 1])?
                .leaky_relu(enc.alpha)?;
            cin = enc.channels[i];
        }
        let k = 2 * self.conv.len();
        x.mean_rows()?.matmul(p[k])?.add_row(p[k + 1])
    }

    /// Whitened `N x 3` mesh for a `1 x latent` code var.
    pub fn decode_var<'t>(&self, p: &[Var<'t>], z: Var<'t>) -> Result<Var<'t>> {
        let dec = &self.config.decoder;
        let mut k = 2 * self.conv.len() + 2;
        let n0 = self.hierarchy.levels[0].n_vertices();
        let mut x = z.matmul(p[k])?.add_row(p[k + 1])?.reshape(vec![n0, dec.widths[0]])?;
        k += 2;
        for i in 1..dec.widths.len() {
            x = x.sparse_matmul(self.upsample[i - 1].clone())?;
            x = spiral_conv_var(x, &self.spiral_index[i], self.tables[i].length, p[k], p[k + 1])?
                .leaky_relu(dec.alpha)?;
            k += 2;
        }
        let last = dec.widths.len() - 1;
        spiral_conv_var(x, &self.spiral_index[last], self.tables[last].length, p[k], p[k + 1])
    }

    pub fn encode(&self, image: &Image) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.constants(&tape)?;
        let x = tape.constant(self.image_tensor(image)?)?;
        let z = self.encode_var(&p, x)?;
        let out = z.value().data().to_vec();
        Ok(out)
    }

    /// Decoder output in whitened coordinates.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<[f64; 3]>> {
        let dim = self.config.decoder.latent_dim;
        if z.len() != dim {
            return Err(Error::Shape(format!("latent of {} values, expected {dim}", z.len())));
        }
        let tape = Tape::new();
        let p = self.constants(&tape)?;
        let zv = tape.constant(Tensor::new(vec![1, dim], z.to_vec())?)?;
        let out = self.decode_var(&p, zv)?;
        let rows = out.value().to_rows3()?;
        Ok(rows)
    }

    /// Mesh in image-aligned coordinates for an image of any size; the
    /// image is resized to the crop.
    pub fn predict(&self, image: &Image) -> Result<Vec<[f64; 3]>> {
        let crop = self.config.encoder.crop;
        let img = image.resized(crop, crop);
        let z = self.encode(&img)?;
        Ok(self.norm.denormalize_mesh(&self.decode(&z)?))
    }
}

/// Edge endpoints as two gather indices.
pub fn edge_index(edges: &[(usize, usize)]) -> (GatherIndex, GatherIndex) {
    (
        Rc::new(edges.iter().map(|e| e.0 as i64).collect()),
        Rc::new(edges.iter().map(|e| e.1 as i64).collect()),
    )
}

/// `lambda_vertex |pred - target|_1 + lambda_edge sum_(u,v) | |pred_v - pred_u|
/// - |target_v - target_u| |`.
pub fn mesh_loss_var<'t>(
    pred: Var<'t>,
    target: Var<'t>,
    edges: &(GatherIndex, GatherIndex),
    lambda_vertex: f64,
    lambda_edge: f64,
) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mesh loss: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let vertex = pred.sub(target)?.l1_norm()?.scale(lambda_vertex)?;
    if edges.0.is_empty() {
        return Ok(vertex);
    }
    let lp = pred.gather_rows(edges.1.clone())?.sub(pred.gather_rows(edges.0.clone())?)?.row_norms()?;
    let lt = target
        .gather_rows(edges.1.clone())?
        .sub(target.gather_rows(edges.0.clone())?)?
        .row_norms()?;
    let edge = lp.sub(lt)?.abs()?.reduce_sum()?.scale(lambda_edge)?;
    vertex.add(edge)
}

/// Value of [`mesh_loss_var`].
pub fn mesh_loss(
    pred: &[[f64; 3]],
    target: &[[f64; 3]],
    edges: &[(usize, usize)],
    lambda_vertex: f64,
    lambda_edge: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let p = tape.constant(Tensor::from_rows(pred))?;
    let t = tape.constant(Tensor::from_rows(target))?;
    let v = mesh_loss_var(p, t, &edge_index(edges), lambda_vertex, lambda_edge)?.item();
    Ok(v)
}

/// Keypoints regressed from a predicted mesh.
pub fn predict_pose(
    mesh: &[[f64; 3]],
    assets: &crate::hand::HandModelAssets,
) -> Result<Vec<[f64; 3]>> {
    crate::hand::regress_keypoints(assets, mesh)
}
