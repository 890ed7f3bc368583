use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use handmesh::dataset::{KeypointFile, KeypointRecord};
use handmesh::fitting::project;
use handmesh::hand::{load_assets, regress_keypoints, skin_params};
use handmesh::network::data::{synthetic_dataset, SyntheticConfig};
use handmesh::network::{load_checkpoint, save_checkpoint, train_with_spirals, NetworkConfig, Sample, TrainConfig};
use handmesh::render::Image;
use handmesh::sampling::MeshHierarchy;
use handmesh::spiral::SpiralTable;
use handmesh::{load_mesh, save_mesh, TriMesh};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::io::{ensure_dir, file_stem, list_files, read_json, summary, write_json};
use crate::Globals;

#[derive(Args)]
pub struct SynthDataArgs {
    #[arg(long)]
    pub assets: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 192)]
    pub crop: usize,
    #[arg(long, default_value_t = 1000.0)]
    pub focal: f64,
    /// Directory receiving `images/`, `meshes/`, `params/` and
    /// `keypoints/synthetic.json`.
    #[arg(long, env = "HANDMESH_OUT")]
    pub out: PathBuf,
}

pub fn synth_data(a: SynthDataArgs, g: &Globals) -> Result<Value> {
    let assets = load_assets(&a.assets)?;
    let cfg = SyntheticConfig {
        count: a.count,
        crop: a.crop,
        focal: a.focal,
        seed: g.seed_or(0),
        ..SyntheticConfig::default()
    };
    let data = synthetic_dataset(&assets, &cfg)?;
    for d in ["images", "meshes", "params", "keypoints"] {
        ensure_dir(&a.out.join(d))?;
    }
    let c = a.crop as f64;
    let mut records = Vec::with_capacity(data.len());
    for (i, (sample, params, cam)) in data.iter().enumerate() {
        let id = format!("sample_{i:04}");
        sample.image.save_png(a.out.join("images").join(format!("{id}.png")))?;
        let mesh = TriMesh::new(sample.mesh.clone(), assets.template.faces().to_vec())?;
        save_mesh(&mesh, a.out.join("meshes").join(format!("{id}.obj")))?;
        write_json(&a.out.join("params").join(format!("{id}.json")), params)?;
        let kp = regress_keypoints(&assets, &skin_params(&assets, params)?)?;
        records.push(KeypointRecord {
            image_id: id,
            crop_box: [0.0, 0.0, c, c],
            keypoints: project(&kp, cam)?.into_iter().map(|[u, v]| [u, v, 1.0]).collect(),
            camera: Some(*cam),
        });
    }
    KeypointFile {
        source: "synthetic".into(),
        camera: None,
        records,
    }
    .save(a.out.join("keypoints").join("synthetic.json"))?;
    summary(g, format!("rendered {} samples into {}", data.len(), a.out.display()));
    Ok(json!({
        "command": "synth-data",
        "out": a.out,
        "seed": cfg.seed,
        "count": data.len(),
        "crop": a.crop,
    }))
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Full-size schedule: 192 px crops, 150 epochs, augmentation.
    Default,
    /// Small-crop overfitting schedule for quick runs.
    Toy,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory with `images/<name>.png` and `meshes/<name>.obj` pairs.
    #[arg(long, required_unless_present = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on this many rendered samples instead (needs --assets).
    #[arg(long, conflicts_with = "data", requires = "assets")]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// Hierarchy directory written by `decimate`.
    #[arg(long)]
    pub hierarchy: PathBuf,
    /// Spiral tables written by `spirals`; built from the config otherwise.
    #[arg(long)]
    pub spirals: Option<PathBuf>,
    /// JSON with optional `train` and `network` objects overriding the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    /// Checkpoint directory to write.
    #[arg(long, env = "HANDMESH_OUT")]
    pub out: PathBuf,
}

#[derive(Deserialize)]
struct TrainFile {
    train: TrainConfig,
    network: NetworkConfig,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn load_pairs(dir: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for mesh_path in list_files(&dir.join("meshes"), "obj")? {
        let name = file_stem(&mesh_path);
        let img_path = dir.join("images").join(format!("{name}.png"));
        let image = Image::load(&img_path).with_context(|| format!("image for {name}"))?;
        let mesh = load_mesh(&mesh_path)?.vertices().to_vec();
        out.push(Sample { image, mesh });
    }
    anyhow::ensure!(!out.is_empty(), "no meshes found in {}", dir.join("meshes").display());
    Ok(out)
}

pub fn train(a: TrainArgs, g: &Globals) -> Result<Value> {
    let preset = match a.preset {
        Preset::Default => TrainConfig::default(),
        Preset::Toy => TrainConfig::toy(),
    };
    let mut cfg = json!({ "train": preset, "network": NetworkConfig::default() });
    if let Some(p) = &a.config {
        merge(&mut cfg, read_json(p)?);
    }
    let TrainFile { train: mut tcfg, network } =
        serde_json::from_value(cfg).context("training config")?;
    tcfg.seed = g.seed_or(tcfg.seed);

    let hierarchy = MeshHierarchy::load(&a.hierarchy)?;
    let tables: Option<Vec<SpiralTable>> = a.spirals.as_deref().map(read_json).transpose()?;
    let samples = match (&a.data, a.synthetic, &a.assets) {
        (Some(d), _, _) => load_pairs(d)?,
        (None, Some(n), Some(assets)) => {
            let s = SyntheticConfig {
                count: n,
                crop: tcfg.crop,
                seed: tcfg.seed,
                ..SyntheticConfig::default()
            };
            synthetic_dataset(&load_assets(assets)?, &s)?
                .into_iter()
                .map(|(s, _, _)| s)
                .collect()
        }
        _ => anyhow::bail!("either --data or --synthetic with --assets is required"),
    };

    let (net, report) = train_with_spirals(&samples, &hierarchy, tables, &tcfg, &network, |_| {})?;
    save_checkpoint(&net, Some(&report), &a.out)?;
    let last = report.final_vertex_l1();
    summary(
        g,
        format!(
            "trained on {} samples for {} epochs: vertex L1 {:.4} -> {:.4}",
            samples.len(),
            report.epochs.len(),
            report.initial_vertex_l1,
            last
        ),
    );
    Ok(json!({
        "command": "train",
        "out": a.out,
        "seed": tcfg.seed,
        "samples": samples.len(),
        "epochs": report.epochs.len(),
        "initial_vertex_l1": report.initial_vertex_l1,
        "final_vertex_l1": last,
    }))
}

#[derive(Args)]
pub struct InferArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PNG image, or a directory of them.
    #[arg(long)]
    pub image: PathBuf,
    /// OBJ file for a single image, otherwise a directory.
    #[arg(long, env = "HANDMESH_OUT")]
    pub out: PathBuf,
}

pub fn infer(a: InferArgs, g: &Globals) -> Result<Value> {
    let net = load_checkpoint(&a.ckpt)?;
    let faces = net.hierarchy.finest().faces().to_vec();
    let jobs: Vec<(PathBuf, PathBuf)> = if a.image.is_dir() {
        ensure_dir(&a.out)?;
        list_files(&a.image, "png")?
            .into_iter()
            .map(|p| {
                let o = a.out.join(format!("{}.obj", file_stem(&p)));
                (p, o)
            })
            .collect()
    } else {
        crate::io::ensure_parent(&a.out)?;
        vec![(a.image.clone(), a.out.clone())]
    };
    let mut written = BTreeMap::new();
    for (img, out) in &jobs {
        let mesh = net.predict(&Image::load(img)?)?;
        save_mesh(&TriMesh::new(mesh, faces.clone())?, out)?;
        written.insert(img.display().to_string(), out.display().to_string());
    }
    summary(g, format!("predicted {} meshes", written.len()));
    Ok(json!({
        "command": "infer",
        "out": a.out,
        "meshes": written,
    }))
}
