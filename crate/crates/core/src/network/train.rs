use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{edge_index, mesh_loss_var, MeshNet, NetworkConfig, Normalization};
use crate::autodiff::{adam_step, sum_all, AdamConfig, AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::render::Image;
use crate::sampling::MeshHierarchy;
use crate::spiral::SpiralTable;

/// Image with its target mesh in image-aligned coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mesh: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub rotation_deg: f64,
    pub scale_range: [f64; 2],
    /// Maximum shift as a fraction of the crop size.
    pub translate_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rotation_deg: 30.0,
            scale_range: [0.8, 1.2],
            translate_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Epochs after which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub lambda_vertex: f64,
    pub lambda_edge: f64,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 150,
            decay_epochs: vec![90, 120],
            decay_factor: 0.1,
            batch_size: 32,
            crop: 192,
            lambda_vertex: 0.01,
            lambda_edge: 0.01,
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Small-crop overfitting setup for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            lr: 1e-3,
            epochs: 500,
            decay_epochs: vec![350, 450],
            batch_size: 4,
            crop: 32,
            augment: AugmentConfig {
                enabled: false,
                ..AugmentConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.crop == 0 {
            return bad("epochs, batch size and crop must be positive".into());
        }
        if let Some(e) = self.decay_epochs.iter().find(|&&e| e >= self.epochs) {
            return bad(format!("decay epoch {e} is not below {} epochs", self.epochs));
        }
        if !(self.decay_factor > 0.0) {
            return bad(format!("decay factor {}", self.decay_factor));
        }
        if !(self.lambda_vertex >= 0.0 && self.lambda_edge >= 0.0)
            || self.lambda_vertex + self.lambda_edge == 0.0
        {
            return bad("loss weights must be nonnegative and not both zero".into());
        }
        let a = &self.augment;
        if a.enabled
            && !(a.rotation_deg >= 0.0
                && a.translate_frac >= 0.0
                && a.scale_range[0] > 0.0
                && a.scale_range[0] <= a.scale_range[1])
        {
            return bad("augmentation ranges".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.decay_factor.powi(n as i32)
    }
}

/// Per-epoch log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Mean absolute whitened vertex error over the unaugmented dataset
    /// after the epoch.
    pub vertex_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_vertex_l1: f64,
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    pub fn final_vertex_l1(&self) -> f64 {
        self.epochs.last().map_or(self.initial_vertex_l1, |e| e.vertex_l1)
    }
}

/// Random similarity about the crop centre applied to the image and, with
/// depth scaled alike, to the mesh.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let ang = rng.random_range(-1.0..=1.0) * cfg.rotation_deg.to_radians();
    let s = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]);
    let (w, h) = (sample.image.width as f64, sample.image.height as f64);
    let t = [
        rng.random_range(-1.0..=1.0) * cfg.translate_frac * w,
        rng.random_range(-1.0..=1.0) * cfg.translate_frac * h,
    ];
    let c = [w / 2.0, h / 2.0];
    let (sn, cs) = ang.sin_cos();
    let mesh = sample
        .mesh
        .iter()
        .map(|p| {
            let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
            [
                c[0] + s * (cs * dx - sn * dy) + t[0],
                c[1] + s * (sn * dx + cs * dy) + t[1],
                s * p[2],
            ]
        })
        .collect();
    let src = &sample.image;
    let mut image = Image::filled(src.width, src.height, [0.0; 3]);
    for y in 0..src.height {
        for x in 0..src.width {
            let dx = (x as f64 + 0.5 - c[0] - t[0]) / s;
            let dy = (y as f64 + 0.5 - c[1] - t[1]) / s;
            let px = c[0] + cs * dx + sn * dy;
            let py = c[1] - sn * dx + cs * dy;
            image.set(x, y, src.sample(px, py, [0.0; 3]));
        }
    }
    Sample { image, mesh }
}

fn vertex_l1(net: &MeshNet, inputs: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, t) in inputs.iter().zip(targets) {
        let tape = Tape::new();
        let p = net.constants(&tape)?;
        let xv = tape.constant(x.clone())?;
        let pred = net.decode_var(&p, net.encode_var(&p, xv)?)?;
        let v = pred.value();
        total += v.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += t.numel();
    }
    Ok(total / count as f64)
}

/// Trains a fresh network on `dataset`. Images are resized to the crop,
/// targets whitened with dataset statistics stored in the returned net.
pub fn train(
    dataset: &[Sample],
    hierarchy: &MeshHierarchy,
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(MeshNet, TrainReport)> {
    train_with_spirals(dataset, hierarchy, None, cfg, net_cfg, on_epoch)
}

/// [`train`] with precomputed spiral tables instead of ones built from
/// the decoder config.
pub fn train_with_spirals(
    dataset: &[Sample],
    hierarchy: &MeshHierarchy,
    tables: Option<Vec<SpiralTable>>,
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(MeshNet, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let n_vertices = hierarchy.finest().n_vertices();
    if let Some((i, s)) = dataset.iter().enumerate().find(|(_, s)| s.mesh.len() != n_vertices) {
        return Err(Error::Shape(format!(
            "sample {i} has {} vertices, hierarchy has {n_vertices}",
            s.mesh.len()
        )));
    }
    let mut net_cfg = net_cfg.clone();
    net_cfg.encoder.crop = cfg.crop;
    let mut net = match tables {
        Some(t) => MeshNet::with_spirals(net_cfg, hierarchy.clone(), t, cfg.seed)?,
        None => MeshNet::new(net_cfg, hierarchy.clone(), cfg.seed)?,
    };

    let samples: Vec<Sample> = dataset
        .iter()
        .map(|s| Sample {
            image: s.image.resized(cfg.crop, cfg.crop),
            mesh: s.mesh.clone(),
        })
        .collect();
    let meshes: Vec<&[[f64; 3]]> = samples.iter().map(|s| s.mesh.as_slice()).collect();
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    net.norm = Normalization::fit(&meshes, &images);

    let tensors = |s: &Sample, net: &MeshNet| -> Result<(Tensor, Tensor)> {
        Ok((
            net.image_tensor(&s.image)?,
            Tensor::from_rows(&net.norm.normalize_mesh(&s.mesh)),
        ))
    };
    let (inputs, targets): (Vec<Tensor>, Vec<Tensor>) = samples
        .iter()
        .map(|s| tensors(s, &net))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();

    let edges = edge_index(&hierarchy.finest().edges());
    let mut states: Vec<AdamState> = net.params.iter().map(|(_, t)| AdamState::zeros(t.numel())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = TrainReport {
        initial_vertex_l1: vertex_l1(&net, &inputs, &targets)?,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    log::info!("initial vertex L1 {:.6}", report.initial_vertex_l1);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let tape = Tape::new();
            let p = net.leaves(&tape)?;
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (x, t) = if cfg.augment.enabled {
                    tensors(&augment(&samples[i], &cfg.augment, &mut rng), &net)?
                } else {
                    (inputs[i].clone(), targets[i].clone())
                };
                let xv = tape.constant(x)?;
                let tv = tape.constant(t)?;
                let pred = net.decode_var(&p, net.encode_var(&p, xv)?)?;
                losses.push(mesh_loss_var(pred, tv, &edges, cfg.lambda_vertex, cfg.lambda_edge)?);
            }
            let loss = sum_all(&losses)?.scale(1.0 / batch.len() as f64)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss {value} at epoch {epoch}, batch {bi} (lr {lr})"
                )));
            }
            epoch_loss += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            for ((v, (_, param)), state) in p.iter().zip(net.params.iter_mut()).zip(states.iter_mut()) {
                adam_step(param, &grads.wrt(*v), state, lr, &cfg.adam)?;
            }
        }
        let log = EpochLog {
            epoch,
            lr,
            loss: epoch_loss / samples.len() as f64,
            vertex_l1: vertex_l1(&net, &inputs, &targets)?,
        };
        log::info!("epoch {epoch} lr {lr:e} loss {:.6} vertex L1 {:.6}", log.loss, log.vertex_l1);
        on_epoch(&log);
        report.epochs.push(log);
    }
    Ok((net, report))
}
