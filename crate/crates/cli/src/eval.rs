use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use handmesh::dataset::KeypointFile;
use handmesh::fitting::{project, FitResult};
use handmesh::hand::{load_assets, regress_keypoints, BONES};
use handmesh::metrics::{distances, fscore, linspace, pck_from_distances, rigid_align, PckCurve};
use handmesh::render::{overlay as draw_overlay, Image};
use handmesh::load_mesh;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::io::{ensure_parent, file_stem, list_files, read_json, sibling, summary, write_json};
use crate::Globals;

#[derive(Args)]
pub struct EvaluateArgs {
    /// Directory of predicted meshes (OBJ).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth meshes, matched to predictions by file name.
    #[arg(long)]
    pub gt: PathBuf,
    /// Asset directory; enables pose metrics on regressed keypoints.
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// F-score distances.
    #[arg(long, value_delimiter = ',', default_value = "5,15")]
    pub fscore: Vec<f64>,
    /// PCK threshold range `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.0, 50.0])]
    pub pck_range: Vec<f64>,
    #[arg(long, default_value_t = 51)]
    pub pck_steps: usize,
    /// Align with rotation and translation only, without scale.
    #[arg(long)]
    pub no_scale: bool,
    /// Also write the PCK curves next to the report as CSV.
    #[arg(long)]
    pub csv: bool,
    /// Report JSON.
    #[arg(long, env = "HANDMESH_OUT")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct FScore {
    d: f64,
    value: f64,
    aligned_value: f64,
}

#[derive(Serialize)]
struct PointMetrics {
    error: f64,
    aligned_error: f64,
    pck: PckCurve,
    aligned_pck: PckCurve,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    fscore: Vec<FScore>,
}

#[derive(Serialize)]
struct SampleMetrics {
    name: String,
    mesh_error: f64,
    aligned_mesh_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pose_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    aligned_pose_error: Option<f64>,
}

#[derive(Serialize)]
struct Report {
    samples: usize,
    missing: Vec<String>,
    alignment: &'static str,
    mesh: PointMetrics,
    pose: Option<PointMetrics>,
    per_sample: Vec<SampleMetrics>,
}

/// Raw and aligned distances for one pair.
struct PairDistances {
    raw: Vec<f64>,
    aligned: Vec<f64>,
    aligned_points: Vec<[f64; 3]>,
}

fn pair(pred: &[[f64; 3]], gt: &[[f64; 3]], with_scale: bool) -> Result<PairDistances> {
    let al = rigid_align(pred, gt, with_scale)?;
    Ok(PairDistances {
        raw: distances(pred, gt)?,
        aligned: distances(&al.aligned, gt)?,
        aligned_points: al.aligned,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize(all: &[PairDistances], thresholds: &[f64], fs: Vec<FScore>) -> Result<PointMetrics> {
    let raw: Vec<f64> = all.iter().flat_map(|p| p.raw.iter().copied()).collect();
    let aligned: Vec<f64> = all.iter().flat_map(|p| p.aligned.iter().copied()).collect();
    Ok(PointMetrics {
        error: mean(&all.iter().map(|p| mean(&p.raw)).collect::<Vec<_>>()),
        aligned_error: mean(&all.iter().map(|p| mean(&p.aligned)).collect::<Vec<_>>()),
        pck: pck_from_distances(&raw, thresholds)?,
        aligned_pck: pck_from_distances(&aligned, thresholds)?,
        fscore: fs,
    })
}

pub fn evaluate(a: EvaluateArgs, g: &Globals) -> Result<Value> {
    anyhow::ensure!(a.pck_range[0] < a.pck_range[1], "PCK range must be increasing");
    anyhow::ensure!(a.pck_steps >= 2, "at least 2 PCK steps are needed");
    let thresholds = linspace(a.pck_range[0], a.pck_range[1], a.pck_steps);
    let assets = a.assets.as_deref().map(load_assets).transpose()?;
    let with_scale = !a.no_scale;

    let mut names = Vec::new();
    let mut missing = Vec::new();
    for gt in list_files(&a.gt, "obj")? {
        let name = file_stem(&gt);
        if a.pred.join(format!("{name}.obj")).is_file() {
            names.push(name);
        } else {
            missing.push(name);
        }
    }
    anyhow::ensure!(!names.is_empty(), "no prediction matches a ground-truth mesh");

    type Evaluated = (PairDistances, Option<PairDistances>, Vec<(f64, f64)>);
    let evaluated: Vec<Evaluated> = names
        .par_iter()
        .map(|name| -> Result<Evaluated> {
            let p = load_mesh(a.pred.join(format!("{name}.obj")))?;
            let t = load_mesh(a.gt.join(format!("{name}.obj")))?;
            let mesh = pair(p.vertices(), t.vertices(), with_scale).with_context(|| name.clone())?;
            let fs = a
                .fscore
                .iter()
                .map(|&d| Ok((fscore(p.vertices(), t.vertices(), d)?, fscore(&mesh.aligned_points, t.vertices(), d)?)))
                .collect::<Result<Vec<_>>>()?;
            let pose = match &assets {
                Some(assets) => {
                    let kp = regress_keypoints(assets, p.vertices())?;
                    let kt = regress_keypoints(assets, t.vertices())?;
                    Some(pair(&kp, &kt, with_scale)?)
                }
                None => None,
            };
            Ok((mesh, pose, fs))
        })
        .collect::<Result<_>>()?;

    let per_sample: Vec<SampleMetrics> = names
        .iter()
        .zip(&evaluated)
        .map(|(name, (m, p, _))| SampleMetrics {
            name: name.clone(),
            mesh_error: mean(&m.raw),
            aligned_mesh_error: mean(&m.aligned),
            pose_error: p.as_ref().map(|p| mean(&p.raw)),
            aligned_pose_error: p.as_ref().map(|p| mean(&p.aligned)),
        })
        .collect();
    let fs: Vec<FScore> = a
        .fscore
        .iter()
        .enumerate()
        .map(|(i, &d)| FScore {
            d,
            value: mean(&evaluated.iter().map(|e| e.2[i].0).collect::<Vec<_>>()),
            aligned_value: mean(&evaluated.iter().map(|e| e.2[i].1).collect::<Vec<_>>()),
        })
        .collect();
    let (meshes, poses): (Vec<PairDistances>, Vec<Option<PairDistances>>) =
        evaluated.into_iter().map(|(m, p, _)| (m, p)).unzip();
    let mesh = summarize(&meshes, &thresholds, fs)?;
    let pose = match poses.into_iter().collect::<Option<Vec<_>>>() {
        Some(p) => Some(summarize(&p, &thresholds, Vec::new())?),
        None => None,
    };
    let report = Report {
        samples: names.len(),
        missing,
        alignment: if with_scale { "similarity" } else { "rigid" },
        mesh,
        pose,
        per_sample,
    };
    write_json(&a.out, &report)?;

    let csv_path = if a.csv {
        let mut csv = String::from("threshold,mesh,mesh_aligned");
        if report.pose.is_some() {
            csv.push_str(",pose,pose_aligned");
        }
        csv.push('\n');
        for (i, t) in thresholds.iter().enumerate() {
            write!(csv, "{t},{},{}", report.mesh.pck.values[i], report.mesh.aligned_pck.values[i])?;
            if let Some(p) = &report.pose {
                write!(csv, ",{},{}", p.pck.values[i], p.aligned_pck.values[i])?;
            }
            csv.push('\n');
        }
        let path = sibling(&a.out, ".csv");
        std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
        Some(path)
    } else {
        None
    };

    summary(
        g,
        format!(
            "{} samples: mesh error {:.4} (aligned {:.4}), AUC {:.3}",
            report.samples, report.mesh.error, report.mesh.aligned_error, report.mesh.pck.auc
        ),
    );
    Ok(json!({
        "command": "evaluate",
        "out": a.out,
        "csv": csv_path,
        "samples": report.samples,
        "missing": report.missing.len(),
        "mesh_error": report.mesh.error,
        "aligned_mesh_error": report.mesh.aligned_error,
        "mesh_auc": report.mesh.pck.auc,
        "pose_error": report.pose.as_ref().map(|p| p.error),
        "aligned_pose_error": report.pose.as_ref().map(|p| p.aligned_error),
    }))
}

#[derive(Args)]
pub struct OverlayArgs {
    /// Background image (PNG).
    #[arg(long)]
    pub image: PathBuf,
    /// Mesh in image-aligned coordinates (x, y in pixels).
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Fit result JSON; its mesh and keypoints are projected with its camera.
    #[arg(long, conflicts_with = "mesh")]
    pub fit: Option<PathBuf>,
    /// Which result of `--fit` to draw.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Keypoint file whose detections are drawn.
    #[arg(long)]
    pub keypoints: Option<PathBuf>,
    /// Image id within `--keypoints`; the first record otherwise.
    #[arg(long)]
    pub record: Option<String>,
    /// Asset directory; supplies the wireframe for `--fit` and skeleton
    /// keypoints for `--mesh`.
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// Output PNG.
    #[arg(long, env = "HANDMESH_OUT")]
    pub out: PathBuf,
}

#[derive(Deserialize)]
struct FitFile {
    results: Vec<FitResult>,
}

pub fn overlay(a: OverlayArgs, g: &Globals) -> Result<Value> {
    let base = Image::load(&a.image)?;
    let assets = a.assets.as_deref().map(load_assets).transpose()?;
    let mut wire: Option<(Vec<[f64; 2]>, Vec<(usize, usize)>)> = None;
    let mut keypoints: Option<Vec<[f64; 2]>> = None;

    if let Some(path) = &a.mesh {
        let mesh = load_mesh(path)?;
        let pts: Vec<[f64; 2]> = mesh.vertices().iter().map(|p| [p[0], p[1]]).collect();
        if let Some(assets) = &assets {
            let kp = regress_keypoints(assets, mesh.vertices())?;
            keypoints = Some(kp.iter().map(|p| [p[0], p[1]]).collect());
        }
        wire = Some((pts, mesh.edges()));
    }
    if let Some(path) = &a.fit {
        let file: FitFile = read_json(path)?;
        let r = file
            .results
            .get(a.index)
            .with_context(|| format!("{} holds {} results", path.display(), file.results.len()))?;
        keypoints = Some(project(&r.keypoints_3d, &r.camera)?);
        if let Some(assets) = &assets {
            wire = Some((project(&r.vertices, &r.camera)?, assets.template.edges()));
        }
    }
    if let Some(path) = &a.keypoints {
        let file = KeypointFile::load(path)?;
        let rec = match &a.record {
            Some(id) => file.records.iter().find(|r| &r.image_id == id),
            None => file.records.first(),
        }
        .context("no matching keypoint record")?;
        keypoints = Some(rec.keypoints.iter().map(|k| [k[0], k[1]]).collect());
    }
    anyhow::ensure!(
        wire.is_some() || keypoints.is_some(),
        "nothing to draw: pass --mesh, --fit or --keypoints"
    );
    let img = draw_overlay(
        &base,
        keypoints.as_deref(),
        &BONES,
        wire.as_ref().map(|(p, e)| (p.as_slice(), e.as_slice())),
    );
    ensure_parent(&a.out)?;
    img.save_png(&a.out)?;
    summary(g, format!("overlay written to {}", a.out.display()));
    Ok(json!({
        "command": "render-overlay",
        "out": a.out,
        "width": img.width,
        "height": img.height,
        "keypoints": keypoints.map_or(0, |k| k.len()),
        "edges": wire.map_or(0, |w| w.1.len()),
    }))
}
