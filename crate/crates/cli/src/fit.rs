use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use handmesh::dataset::{run_pipeline, KeypointFile, KeypointRecord, PipelineConfig};
use handmesh::fitting::{self, project, FitConfig};
use handmesh::hand::{load_assets, regress_keypoints, skin_params, HandModelAssets, HandParams};
use handmesh::network::data::{frame_params, random_params, SyntheticConfig};
use handmesh::{save_mesh, TriMesh};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::io::{ensure_parent, file_stem, list_files, read_json, sibling, summary, write_json};
use crate::Globals;

#[derive(Args)]
pub struct FitArgs {
    /// Keypoint file with one or more records.
    #[arg(long, required_unless_present = "synthetic")]
    pub keypoints: Option<PathBuf>,
    /// Fit this many targets projected from random prior poses instead.
    #[arg(long, conflicts_with = "keypoints")]
    pub synthetic: Option<usize>,
    /// Gaussian pixel noise added to synthetic targets.
    #[arg(long, default_value_t = 0.0, requires = "synthetic")]
    pub noise: f64,
    /// Only fit the record with this image id.
    #[arg(long)]
    pub record: Option<String>,
    #[arg(long)]
    pub assets: PathBuf,
    /// Fit configuration (JSON); missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Focal length for records without a camera.
    #[arg(long, default_value_t = 1000.0)]
    pub focal: f64,
    /// Result JSON; meshes are written next to it as OBJ.
    #[arg(long, env = "HANDMESH_OUT")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct GroundTruth {
    params: HandParams,
    keypoints_3d: Vec<[f64; 3]>,
}

#[derive(Serialize)]
struct FitOutput {
    image_id: String,
    mesh_path: String,
    mean_residual_px: f64,
    #[serde(flatten)]
    result: fitting::FitResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    ground_truth: Option<GroundTruth>,
}

fn synthetic_records(
    assets: &HandModelAssets,
    count: usize,
    noise: f64,
    focal: f64,
    seed: u64,
) -> Result<Vec<(KeypointRecord, GroundTruth)>> {
    let cfg = SyntheticConfig {
        focal,
        ..SyntheticConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).context("noise must be finite and >= 0")?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let p = random_params(assets, &mut rng, cfg.logit_std, cfg.orientation_range)?;
        let (p, cam) = frame_params(assets, p, &cfg)?;
        let kp = regress_keypoints(assets, &skin_params(assets, &p)?)?;
        let keypoints = project(&kp, &cam)?
            .into_iter()
            .map(|[u, v]| [u + normal.sample(&mut rng), v + normal.sample(&mut rng), 1.0])
            .collect();
        let c = cfg.crop as f64;
        let record = KeypointRecord {
            image_id: format!("synthetic_{i:04}"),
            crop_box: [0.0, 0.0, c, c],
            keypoints,
            camera: Some(cam),
        };
        out.push((record, GroundTruth { params: p, keypoints_3d: kp }));
    }
    Ok(out)
}

pub fn fit(a: FitArgs, g: &Globals) -> Result<Value> {
    let assets = load_assets(&a.assets)?;
    let cfg: FitConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => FitConfig::default(),
    };
    let seed = g.seed_or(0);
    let mut jobs: Vec<(KeypointRecord, Option<GroundTruth>)> = match (&a.keypoints, a.synthetic) {
        (Some(path), _) => {
            let file = KeypointFile::load(path)?;
            let fallback = file.camera;
            file.records
                .into_iter()
                .map(|mut r| {
                    r.camera = Some(r.resolve_camera(fallback, a.focal)?);
                    Ok((r, None))
                })
                .collect::<Result<_>>()?
        }
        (None, Some(n)) => synthetic_records(&assets, n, a.noise, a.focal, seed)?
            .into_iter()
            .map(|(r, gt)| (r, Some(gt)))
            .collect(),
        (None, None) => anyhow::bail!("either --keypoints or --synthetic is required"),
    };
    if let Some(id) = &a.record {
        jobs.retain(|(r, _)| &r.image_id == id);
        anyhow::ensure!(!jobs.is_empty(), "no record with image id {id:?}");
    }
    anyhow::ensure!(!jobs.is_empty(), "no records to fit");

    let results: Vec<fitting::FitResult> = jobs
        .par_iter()
        .map(|(r, _)| {
            let cam = r.camera.expect("camera resolved above");
            fitting::fit(&assets, &r.target()?, &cam, &cfg)
                .with_context(|| format!("fitting {}", r.image_id))
        })
        .collect::<Result<_>>()?;

    ensure_parent(&a.out)?;
    let single = jobs.len() == 1;
    let mut outputs = Vec::with_capacity(jobs.len());
    for (i, ((record, gt), result)) in jobs.into_iter().zip(results).enumerate() {
        let mesh_file = if single {
            sibling(&a.out, ".obj")
        } else {
            sibling(&a.out, &format!("_{i}.obj"))
        };
        save_mesh(&TriMesh::new(result.vertices.clone(), assets.template.faces().to_vec())?, &mesh_file)?;
        outputs.push(FitOutput {
            image_id: record.image_id,
            mesh_path: file_stem(&mesh_file) + ".obj",
            mean_residual_px: result.mean_residual(),
            result,
            ground_truth: gt,
        });
    }
    write_json(&a.out, &json!({ "results": outputs }))?;
    let mean = outputs.iter().map(|o| o.mean_residual_px).sum::<f64>() / outputs.len() as f64;
    summary(g, format!("fitted {} targets, mean reprojection error {mean:.3} px", outputs.len()));
    Ok(json!({
        "command": "fit",
        "out": a.out,
        "seed": seed,
        "fitted": outputs.len(),
        "mean_residual_px": mean,
        "meshes": outputs.iter().map(|o| o.mesh_path.clone()).collect::<Vec<_>>(),
    }))
}

#[derive(Args)]
pub struct FilterArgs {
    /// Directory of keypoint files (every *.json), or a single file.
    #[arg(long)]
    pub keypoints: PathBuf,
    #[arg(long)]
    pub assets: PathBuf,
    /// Pipeline configuration (JSON); missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory to create or resume.
    #[arg(long, env = "HANDMESH_OUT")]
    pub out: PathBuf,
}

pub fn filter_dataset(a: FilterArgs, g: &Globals) -> Result<Value> {
    let assets = load_assets(&a.assets)?;
    let mut cfg: PipelineConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    cfg.seed = g.seed_or(cfg.seed);
    let inputs = if a.keypoints.is_dir() {
        list_files(&a.keypoints, "json")?
    } else {
        vec![a.keypoints.clone()]
    };
    let (m, stats) = run_pipeline(&inputs, &assets, &cfg, &a.out)?;
    summary(
        g,
        format!(
            "{} accepted, {} rejected, {} file errors ({} fitted, {} reused)",
            m.accepted.len(),
            m.rejected.len(),
            m.file_errors.len(),
            stats.fitted,
            stats.reused
        ),
    );
    Ok(json!({
        "command": "filter-dataset",
        "out": a.out,
        "manifest": a.out.join("manifest.json"),
        "seed": cfg.seed,
        "counts": m.counts,
        "thresholds_are_defaults": m.thresholds_are_defaults,
        "fitted": stats.fitted,
        "reused": stats.reused,
        "file_errors": m.file_errors.len(),
    }))
}
