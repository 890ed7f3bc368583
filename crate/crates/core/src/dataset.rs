//! Weak-label dataset construction: fit the hand model to detector
//! keypoints, keep plausible fits and cap the number of samples per source.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{fit, Camera, EnergyTerms, FitConfig, FitResult, Keypoints2D};
use crate::hand::{HandModelAssets, HandParams, N_KEYPOINTS};
use crate::mesh::{save_mesh, TriMesh};

/// One detection: 21 `(x, y, confidence)` triples in image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointRecord {
    pub image_id: String,
    /// `[x, y, width, height]` of the hand crop in image pixels.
    pub crop_box: [f64; 4],
    pub keypoints: Vec<[f64; 3]>,
    /// Per-record intrinsics; otherwise the file's, otherwise a default
    /// focal with the principal point at the crop centre.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Camera>,
}

/// All detections from one source video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Camera>,
    pub records: Vec<KeypointRecord>,
}

impl KeypointRecord {
    pub fn validate(&self) -> Result<()> {
        if self.keypoints.len() != N_KEYPOINTS {
            return Err(Error::Shape(format!(
                "{}: {} keypoints, expected {N_KEYPOINTS}",
                self.image_id,
                self.keypoints.len()
            )));
        }
        if self.keypoints.iter().any(|k| !(0.0..=1.0).contains(&k[2])) {
            return Err(Error::InvalidArgument(format!("{}: confidence outside [0, 1]", self.image_id)));
        }
        if self.keypoints.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{}: keypoints", self.image_id)));
        }
        Ok(())
    }

    /// The record's camera, else `fallback`, else `default_focal` with the
    /// principal point at the crop centre.
    pub fn resolve_camera(&self, fallback: Option<Camera>, default_focal: f64) -> Result<Camera> {
        match self.camera.or(fallback) {
            Some(c) => Ok(c),
            None => {
                let b = self.crop_box;
                Camera::new(default_focal, [b[0] + b[2] / 2.0, b[1] + b[3] / 2.0])
            }
        }
    }

    pub fn target(&self) -> Result<Keypoints2D> {
        Keypoints2D::new(
            self.keypoints.iter().map(|k| [k[0], k[1]]).collect(),
            self.keypoints.iter().map(|k| k[2]).collect(),
        )
    }
}

impl KeypointFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Self = serde_json::from_str(&text)?;
        for r in &file.records {
            r.validate()?;
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Builds a record from an OpenPose JSON frame, taking the person whose
/// right hand has the highest total confidence.
pub fn from_openpose(json: &str, image_id: &str, crop_box: [f64; 4]) -> Result<KeypointRecord> {
    #[derive(Deserialize)]
    struct Person {
        #[serde(default)]
        hand_right_keypoints_2d: Vec<f64>,
    }
    #[derive(Deserialize)]
    struct Frame {
        people: Vec<Person>,
    }
    let frame: Frame = serde_json::from_str(json)?;
    let flat = frame
        .people
        .iter()
        .map(|p| &p.hand_right_keypoints_2d)
        .filter(|k| k.len() == 3 * N_KEYPOINTS)
        .max_by(|a, b| {
            let c = |k: &Vec<f64>| k.chunks(3).map(|t| t[2]).sum::<f64>();
            c(a).total_cmp(&c(b))
        })
        .ok_or_else(|| Error::InvalidArgument(format!("{image_id}: no person with 63 right-hand values")))?;
    let rec = KeypointRecord {
        image_id: image_id.to_string(),
        crop_box,
        keypoints: flat.chunks(3).map(|t| [t[0], t[1], t[2]]).collect(),
        camera: None,
    };
    rec.validate()?;
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_total_confidence: f64,
    pub min_joint_confidence: f64,
    /// Squared model units (mm^2).
    pub max_normalized_mse: f64,
    pub max_samples_per_source: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_total_confidence: 12.6,
            min_joint_confidence: 0.1,
            max_normalized_mse: DEFAULT_MAX_NORMALIZED_MSE,
            max_samples_per_source: 500,
        }
    }
}

/// Median normalized MSE of full-schedule fits to 2 px-noise synthetic
/// detections at 1000 px focal, so roughly half of such fits pass.
pub const DEFAULT_MAX_NORMALIZED_MSE: f64 = 9.0;

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let t = [self.min_total_confidence, self.min_joint_confidence, self.max_normalized_mse];
        if t.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::InvalidArgument("filter thresholds must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    TotalConfidence { total: f64, min: f64 },
    JointConfidence { joint: usize, confidence: f64, min: f64 },
    Mse { normalized_mse: f64, max: f64 },
    FitFailed { message: String },
    SourceCap { cap: usize },
}

/// Mean squared pixel residual divided by `(focal / depth)^2`, with the
/// depth taken as the mean camera-space depth of the fitted keypoints.
pub fn normalized_mse(fit: &FitResult, cam: &Camera) -> f64 {
    let mse = fit.residuals.iter().map(|r| r * r).sum::<f64>() / fit.residuals.len() as f64;
    let depth = fit.keypoints_3d.iter().map(|p| p[2]).sum::<f64>() / fit.keypoints_3d.len() as f64;
    mse / (cam.focal / depth).powi(2)
}

pub fn filter_sample(fit: &FitResult, kp: &Keypoints2D, cam: &Camera, cfg: &FilterConfig) -> std::result::Result<(), Rejection> {
    let total: f64 = kp.confidence.iter().sum();
    if total < cfg.min_total_confidence {
        return Err(Rejection::TotalConfidence {
            total,
            min: cfg.min_total_confidence,
        });
    }
    if let Some((joint, &confidence)) = kp
        .confidence
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .filter(|(_, c)| **c < cfg.min_joint_confidence)
    {
        return Err(Rejection::JointConfidence {
            joint,
            confidence,
            min: cfg.min_joint_confidence,
        });
    }
    let nmse = normalized_mse(fit, cam);
    if !(nmse <= cfg.max_normalized_mse) {
        return Err(Rejection::Mse {
            normalized_mse: nmse,
            max: cfg.max_normalized_mse,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub fit: FitConfig,
    pub filter: FilterConfig,
    pub split: SplitConfig,
    /// Focal length in pixels when no camera is given.
    pub default_focal: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            filter: FilterConfig::default(),
            split: SplitConfig::default(),
            default_focal: 1000.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub mean_residual_px: f64,
    pub normalized_mse: f64,
    pub terms: EnergyTerms,
    pub best_iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedSample {
    pub image_id: String,
    pub source: String,
    pub crop_box: [f64; 4],
    /// Relative to the dataset directory.
    pub mesh_path: String,
    pub params_path: String,
    pub camera: Camera,
    pub diagnostics: FitDiagnostics,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedSample {
    pub image_id: String,
    pub source: String,
    #[serde(flatten)]
    pub rejection: Rejection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileError {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub filter: FilterConfig,
    /// Filter thresholds are tuned defaults rather than published values.
    pub thresholds_are_defaults: bool,
    pub counts: BTreeMap<String, usize>,
    pub accepted: Vec<AcceptedSample>,
    pub rejected: Vec<RejectedSample>,
    pub file_errors: Vec<FileError>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// How much work a pipeline run did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PipelineStats {
    pub fitted: usize,
    pub reused: usize,
}

/// What is stored per fitted record, used to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
enum FitRecord {
    Ok {
        params: HandParams,
        camera: Camera,
        vertices: Vec<[f64; 3]>,
        diagnostics: FitDiagnostics,
        passed: bool,
        rejection: Option<Rejection>,
    },
    Failed {
        message: String,
    },
}

struct Job {
    source: String,
    record: KeypointRecord,
    camera: Camera,
}

/// File-name-safe, injective encoding of an image id.
pub fn stem(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for c in id.chars() {
        if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
            out.push(c);
        } else {
            out.push_str(&format!("_{:x}_", c as u32));
        }
    }
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn split_for(id: &str, seed: u64, cfg: &SplitConfig) -> Split {
    // FNV-1a over the id, mixed with the seed
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h = mix(h);
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    if u < cfg.test_fraction {
        Split::Test
    } else if u < cfg.test_fraction + cfg.val_fraction {
        Split::Val
    } else {
        Split::Train
    }
}

fn source_seed(seed: u64, source: &str) -> u64 {
    source
        .bytes()
        .fold(mix(seed), |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn fit_job(job: &Job, assets: &HandModelAssets, cfg: &PipelineConfig) -> FitRecord {
    let target = match job.record.target() {
        Ok(t) => t,
        Err(e) => return FitRecord::Failed { message: e.to_string() },
    };
    match fit(assets, &target, &job.camera, &cfg.fit) {
        Ok(r) => {
            let diagnostics = FitDiagnostics {
                mean_residual_px: r.mean_residual(),
                normalized_mse: normalized_mse(&r, &job.camera),
                terms: r.terms,
                best_iteration: r.best_iteration,
            };
            let verdict = filter_sample(&r, &target, &job.camera, &cfg.filter);
            FitRecord::Ok {
                params: r.params,
                camera: r.camera,
                vertices: r.vertices,
                diagnostics,
                passed: verdict.is_ok(),
                rejection: verdict.err(),
            }
        }
        Err(e) => FitRecord::Failed { message: e.to_string() },
    }
}

/// Fits, filters and caps every record of `inputs`, writing meshes, params
/// and `manifest.json` under `out`. Fits already present in `out/fits` are
/// reused, so an interrupted run can be restarted.
pub fn run_pipeline(
    inputs: &[PathBuf],
    assets: &HandModelAssets,
    cfg: &PipelineConfig,
    out: impl AsRef<Path>,
) -> Result<(DatasetManifest, PipelineStats)> {
    cfg.fit.validate()?;
    cfg.filter.validate()?;
    let out = out.as_ref();
    let fits_dir = out.join("fits");
    for d in [out.to_path_buf(), fits_dir.clone(), out.join("meshes"), out.join("params")] {
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut paths = inputs.to_vec();
    paths.sort();
    let mut file_errors = Vec::new();
    let mut jobs = Vec::new();
    let mut seen = HashMap::new();
    for path in &paths {
        let file = match KeypointFile::load(path) {
            Ok(f) => f,
            Err(e) => {
                file_errors.push(FileError {
                    path: path.display().to_string(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        for record in file.records {
            if let Some(prev) = seen.insert(record.image_id.clone(), path.clone()) {
                file_errors.push(FileError {
                    path: path.display().to_string(),
                    message: format!("duplicate image id {} (first in {})", record.image_id, prev.display()),
                });
                continue;
            }
            let camera = record.resolve_camera(file.camera, cfg.default_focal)?;
            jobs.push(Job {
                source: file.source.clone(),
                record,
                camera,
            });
        }
    }

    let results: Vec<(FitRecord, bool)> = jobs
        .par_iter()
        .map(|job| -> Result<(FitRecord, bool)> {
            let path = fits_dir.join(format!("{}.json", stem(&job.record.image_id)));
            if let Ok(text) = fs::read_to_string(&path) {
                if let Ok(rec) = serde_json::from_str::<FitRecord>(&text) {
                    return Ok((rec, true));
                }
            }
            let rec = fit_job(job, assets, cfg);
            write_atomic(&path, serde_json::to_string(&rec)?.as_bytes())?;
            Ok((rec, false))
        })
        .collect::<Result<_>>()?;
    let stats = PipelineStats {
        fitted: results.iter().filter(|r| !r.1).count(),
        reused: results.iter().filter(|r| r.1).count(),
    };

    let mut passing: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut rejected_at: BTreeMap<usize, Rejection> = BTreeMap::new();
    for (i, (rec, _)) in results.iter().enumerate() {
        match rec {
            FitRecord::Ok { passed: true, .. } => passing.entry(jobs[i].source.as_str()).or_default().push(i),
            FitRecord::Ok { rejection, .. } => {
                let r = rejection.clone().unwrap_or(Rejection::FitFailed {
                    message: "rejected".into(),
                });
                rejected_at.insert(i, r);
            }
            FitRecord::Failed { message } => {
                rejected_at.insert(i, Rejection::FitFailed { message: message.clone() });
            }
        }
    }
    let cap = cfg.filter.max_samples_per_source;
    let mut keep = vec![false; jobs.len()];
    for (source, idx) in &passing {
        if idx.len() <= cap {
            idx.iter().for_each(|&i| keep[i] = true);
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(source_seed(cfg.seed, source));
            for k in sample(&mut rng, idx.len(), cap) {
                keep[idx[k]] = true;
            }
            for &i in idx {
                if !keep[i] {
                    rejected_at.insert(i, Rejection::SourceCap { cap });
                }
            }
        }
    }

    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for (i, job) in jobs.iter().enumerate() {
        let id = &job.record.image_id;
        if keep[i] {
            let FitRecord::Ok {
                params,
                camera,
                vertices,
                diagnostics,
                ..
            } = &results[i].0
            else {
                unreachable!("kept samples have fits")
            };
            let s = stem(id);
            let mesh_path = format!("meshes/{s}.obj");
            let params_path = format!("params/{s}.json");
            let mesh = TriMesh::new(vertices.clone(), assets.template.faces().to_vec())?;
            save_mesh(&mesh, out.join(&mesh_path))?;
            write_atomic(&out.join(&params_path), serde_json::to_string_pretty(params)?.as_bytes())?;
            accepted.push(AcceptedSample {
                image_id: id.clone(),
                source: job.source.clone(),
                crop_box: job.record.crop_box,
                mesh_path,
                params_path,
                camera: *camera,
                diagnostics: diagnostics.clone(),
                split: split_for(id, cfg.seed, &cfg.split),
            });
        } else if let Some(r) = rejected_at.remove(&i) {
            rejected.push(RejectedSample {
                image_id: id.clone(),
                source: job.source.clone(),
                rejection: r,
            });
        }
    }

    let mut counts = BTreeMap::new();
    counts.insert("records".to_string(), jobs.len());
    counts.insert("accepted".to_string(), accepted.len());
    counts.insert("rejected".to_string(), rejected.len());
    counts.insert("file_errors".to_string(), file_errors.len());
    for split in [Split::Train, Split::Val, Split::Test] {
        let name = serde_json::to_value(split)?.as_str().unwrap_or_default().to_string();
        counts.insert(name, accepted.iter().filter(|a| a.split == split).count());
    }
    let manifest = DatasetManifest {
        seed: cfg.seed,
        filter: cfg.filter.clone(),
        thresholds_are_defaults: true,
        counts,
        accepted,
        rejected,
        file_errors,
    };
    write_atomic(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok((manifest, stats))
}
