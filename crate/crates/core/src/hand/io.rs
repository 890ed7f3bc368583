//! Asset container: `template.obj`, `assets.json` and `tensors.hmck`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HandModelAssets;
use crate::autodiff::checkpoint::{find, read_checkpoint, write_checkpoint};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mesh::{load_mesh, save_mesh};
use crate::sparse::CsrMatrix;

#[derive(Serialize, Deserialize)]
struct AssetsJson {
    /// `-1` marks the root.
    parents: Vec<i64>,
    joint_rest: Vec<[f64; 3]>,
    n_betas: usize,
    n_clusters: usize,
    n_vertices: usize,
}

pub fn save_assets(assets: &HandModelAssets, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_mesh(&assets.template, dir.join("template.obj"))?;
    let meta = AssetsJson {
        parents: assets
            .parents
            .iter()
            .map(|p| p.map_or(-1, |p| p as i64))
            .collect(),
        joint_rest: assets.joint_rest.clone(),
        n_betas: assets.n_betas(),
        n_clusters: assets.n_clusters(),
        n_vertices: assets.n_vertices(),
    };
    let path = dir.join("assets.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    let t = assets.regressor.to_triplets();
    let as_f64 = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let nnz = t.vals.len();
    let tensors = vec![
        ("skin_weights".to_string(), assets.skin_weights.clone()),
        ("shape_basis".to_string(), assets.shape_basis.clone()),
        ("cluster_centers".to_string(), assets.cluster_centers.clone()),
        ("regressor_rows".to_string(), Tensor::new(vec![nnz], as_f64(&t.rows))?),
        ("regressor_cols".to_string(), Tensor::new(vec![nnz], as_f64(&t.cols))?),
        ("regressor_vals".to_string(), Tensor::new(vec![nnz], t.vals)?),
        (
            "regressor_shape".to_string(),
            Tensor::new(vec![2], vec![t.shape[0] as f64, t.shape[1] as f64])?,
        ),
    ];
    write_checkpoint(dir.join("tensors.hmck"), &tensors)
}

pub fn load_assets(dir: impl AsRef<Path>) -> Result<HandModelAssets> {
    let dir = dir.as_ref();
    let template = load_mesh(dir.join("template.obj"))?;
    let path = dir.join("assets.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: AssetsJson = serde_json::from_str(&text)?;
    let parents = meta
        .parents
        .iter()
        .map(|&p| if p < 0 { None } else { Some(p as usize) })
        .collect();
    let tensors = read_checkpoint(dir.join("tensors.hmck"))?;
    let idx = |name: &str| -> Result<Vec<usize>> {
        find(&tensors, name)?
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(Error::Checkpoint(format!("{name} holds a non-index value {x}")))
                }
            })
            .collect()
    };
    let rows = idx("regressor_rows")?;
    let cols = idx("regressor_cols")?;
    let shape = idx("regressor_shape")?;
    let vals = find(&tensors, "regressor_vals")?.data().to_vec();
    if shape.len() != 2 || rows.len() != vals.len() || cols.len() != vals.len() {
        return Err(Error::Checkpoint("malformed regressor triplets".into()));
    }
    let regressor = CsrMatrix::from_triplets(
        shape[0],
        shape[1],
        rows.iter().zip(&cols).zip(&vals).map(|((&r, &c), &v)| (r, c, v)).collect::<Vec<_>>(),
    )?;
    let assets = HandModelAssets {
        template,
        parents,
        joint_rest: meta.joint_rest,
        skin_weights: find(&tensors, "skin_weights")?.clone(),
        shape_basis: find(&tensors, "shape_basis")?.clone(),
        regressor,
        cluster_centers: find(&tensors, "cluster_centers")?.clone(),
    };
    if assets.n_vertices() != meta.n_vertices
        || assets.n_betas() != meta.n_betas
        || assets.n_clusters() != meta.n_clusters
    {
        return Err(Error::Checkpoint("assets.json disagrees with the stored tensors".into()));
    }
    assets.validate()?;
    Ok(assets)
}
