use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use handmesh::hand::{generate_synthetic_assets, load_assets, save_assets, SynthConfig};
use handmesh::mesh::{load_mesh, VertexAdjacency};
use handmesh::sampling::{build_hierarchy, MeshHierarchy};
use handmesh::spiral::{default_spiral_length, SpiralTable};
use serde_json::{json, Value};

use crate::io::{summary, write_json};
use crate::Globals;

#[derive(Args)]
pub struct SynthModelArgs {
    #[arg(long, default_value_t = 778)]
    pub vertices: usize,
    /// Poses sampled to build the pose prior.
    #[arg(long, default_value_t = 5000)]
    pub pose_samples: usize,
    #[arg(long, default_value_t = 64)]
    pub clusters: usize,
    /// Asset directory to create.
    #[arg(long, env = "HANDMESH_OUT")]
    pub out: PathBuf,
}

pub fn synth_model(a: SynthModelArgs, g: &Globals) -> Result<Value> {
    let cfg = SynthConfig {
        n_vertices: a.vertices,
        seed: g.seed_or(0),
        pose_samples: a.pose_samples,
        clusters: a.clusters,
        ..SynthConfig::default()
    };
    let assets = generate_synthetic_assets(&cfg)?;
    save_assets(&assets, &a.out)?;
    summary(g, format!("wrote {}-vertex hand model to {}", assets.n_vertices(), a.out.display()));
    Ok(json!({
        "command": "synth-model",
        "out": a.out,
        "seed": cfg.seed,
        "n_vertices": assets.n_vertices(),
        "n_faces": assets.template.n_faces(),
        "n_joints": assets.n_joints(),
        "n_betas": assets.n_betas(),
        "n_clusters": assets.n_clusters(),
    }))
}

#[derive(Args)]
pub struct DecimateArgs {
    /// Mesh to decimate (OBJ).
    #[arg(long, conflicts_with = "assets", required_unless_present = "assets")]
    pub mesh: Option<PathBuf>,
    /// Asset directory whose template is decimated.
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// Number of levels including the input mesh.
    #[arg(long, default_value_t = 5)]
    pub levels: usize,
    /// Hierarchy directory to create.
    #[arg(long, env = "HANDMESH_OUT")]
    pub out: PathBuf,
}

pub fn decimate(a: DecimateArgs, g: &Globals) -> Result<Value> {
    let mesh = match (&a.mesh, &a.assets) {
        (Some(m), _) => load_mesh(m)?,
        (None, Some(d)) => load_assets(d)?.template,
        (None, None) => anyhow::bail!("either --mesh or --assets is required"),
    };
    let h = build_hierarchy(&mesh, a.levels)?;
    h.save(&a.out)?;
    let mut sizes = h.sizes();
    sizes.reverse();
    summary(g, format!("level sizes, finest first: {sizes:?}"));
    Ok(json!({
        "command": "decimate",
        "out": a.out,
        "levels": h.n_levels(),
        "sizes": sizes,
    }))
}

#[derive(Args)]
pub struct SpiralsArgs {
    /// Hierarchy directory written by `decimate`.
    #[arg(long)]
    pub hierarchy: PathBuf,
    /// Ring count.
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Spiral length per level, coarsest first; derived from the mean
    /// valence when omitted.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    /// Output JSON file.
    #[arg(long, env = "HANDMESH_OUT")]
    pub out: PathBuf,
}

pub fn spirals(a: SpiralsArgs, g: &Globals) -> Result<Value> {
    let h = MeshHierarchy::load(&a.hierarchy).with_context(|| format!("loading {}", a.hierarchy.display()))?;
    if let Some(l) = &a.lengths {
        anyhow::ensure!(
            l.len() == h.n_levels(),
            "{} lengths given for {} levels",
            l.len(),
            h.n_levels()
        );
    }
    let seed = g.seed_or(0);
    let mut tables = Vec::new();
    for (i, level) in h.levels.iter().enumerate() {
        let adj = VertexAdjacency::build(level)?;
        let len = match &a.lengths {
            Some(l) => l[i],
            None => default_spiral_length(&adj, a.k),
        };
        tables.push(SpiralTable::build(&adj, a.k, len, seed)?);
    }
    write_json(&a.out, &tables)?;
    let levels: Vec<Value> = tables
        .iter()
        .map(|t| json!({"n_vertices": t.n_vertices(), "k": t.k, "length": t.length}))
        .collect();
    summary(g, format!("{} spiral tables written to {}", tables.len(), a.out.display()));
    Ok(json!({
        "command": "spirals",
        "out": a.out,
        "seed": seed,
        "levels": levels,
    }))
}
