mod common;

use std::path::{Path, PathBuf};

use handmesh::dataset::*;
use handmesh::fitting::{project, FitConfig, FitResult, Keypoints2D};
use handmesh::hand::{regress_keypoints, skin_params};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{assets, crop_camera, sample_params};

/// Short schedule so hundreds of records fit in seconds.
fn quick_config(cap: usize, seed: u64) -> PipelineConfig {
    PipelineConfig {
        fit: FitConfig {
            stage1_iterations: 20,
            stage2_iterations: 30,
            ..FitConfig::default()
        },
        filter: FilterConfig {
            max_normalized_mse: 1e6,
            max_samples_per_source: cap,
            ..FilterConfig::default()
        },
        seed,
        ..PipelineConfig::default()
    }
}

fn record(id: &str, rng: &mut ChaCha8Rng) -> KeypointRecord {
    let a = assets();
    let p = sample_params(a, rng);
    let kp = regress_keypoints(a, &skin_params(a, &p).unwrap()).unwrap();
    let uv = project(&kp, &crop_camera()).unwrap();
    KeypointRecord {
        image_id: id.to_string(),
        crop_box: [0.0, 0.0, 192.0, 192.0],
        keypoints: uv.iter().map(|q| [q[0], q[1], 0.9]).collect(),
        camera: None,
    }
}

fn write_source(dir: &Path, source: &str, n: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let file = KeypointFile {
        source: source.to_string(),
        camera: Some(crop_camera()),
        records: (0..n).map(|i| record(&format!("{source}_{i:04}"), &mut rng)).collect(),
    };
    let path = dir.join(format!("{source}.json"));
    file.save(&path).unwrap();
    path
}

fn fake_fit(residual: f64, depth: f64) -> FitResult {
    let a = assets();
    let params = handmesh::hand::HandParams::for_assets(a);
    FitResult {
        params,
        camera: crop_camera(),
        vertices: Vec::new(),
        keypoints_3d: vec![[0.0, 0.0, depth]; 21],
        terms: handmesh::fitting::EnergyTerms {
            e2d: 0.0,
            e_bone: 0.0,
            e_reg: 0.0,
            total: 0.0,
        },
        initial_objective: 0.0,
        residuals: vec![residual; 21],
        iterations: 0,
        best_iteration: 0,
    }
}

fn confident(c: f64) -> Keypoints2D {
    Keypoints2D::new(vec![[0.0, 0.0]; 21], vec![c; 21]).unwrap()
}

#[test]
fn filter_examples() {
    let cam = crop_camera();
    let cfg = FilterConfig::default();
    assert_eq!(filter_sample(&fake_fit(0.0, 1000.0), &confident(1.0), &cam, &cfg), Ok(()));

    let mut kp = confident(1.0);
    kp.confidence[7] = 0.0;
    assert!(matches!(
        filter_sample(&fake_fit(0.0, 1000.0), &kp, &cam, &cfg),
        Err(Rejection::JointConfidence { joint: 7, .. })
    ));
    assert!(matches!(
        filter_sample(&fake_fit(0.0, 1000.0), &confident(0.5), &cam, &cfg),
        Err(Rejection::TotalConfidence { .. })
    ));

    // at depth 2000 and focal 1000 a pixel is 2 mm, so a uniform residual r
    // gives a normalized MSE of 4 r^2
    let r_max = (cfg.max_normalized_mse / 4.0).sqrt();
    let below = fake_fit(r_max * (1.0 - 1e-9), 2000.0);
    let above = fake_fit(r_max * (1.0 + 1e-9), 2000.0);
    assert_eq!(filter_sample(&below, &confident(1.0), &cam, &cfg), Ok(()));
    assert!(matches!(
        filter_sample(&above, &confident(1.0), &cam, &cfg),
        Err(Rejection::Mse { .. })
    ));
    assert!((normalized_mse(&fake_fit(1.5, 2000.0), &cam) - 9.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn loosening_never_rejects_accepted(
        residual in 0.0f64..5.0,
        depth in 500.0f64..3000.0,
        conf in prop::collection::vec(0.0f64..=1.0, 21),
        total in 0.0f64..21.0,
        joint in 0.0f64..1.0,
        mse in 0.0f64..30.0,
        slack in prop::array::uniform3(0.0f64..5.0),
    ) {
        let kp = Keypoints2D::new(vec![[0.0, 0.0]; 21], conf).unwrap();
        let fit = fake_fit(residual, depth);
        let cam = crop_camera();
        let strict = FilterConfig {
            min_total_confidence: total,
            min_joint_confidence: joint,
            max_normalized_mse: mse,
            ..FilterConfig::default()
        };
        let loose = FilterConfig {
            min_total_confidence: (total - slack[0]).max(0.0),
            min_joint_confidence: (joint - slack[1] / 5.0).max(0.0),
            max_normalized_mse: mse + slack[2],
            ..FilterConfig::default()
        };
        if filter_sample(&fit, &kp, &cam, &strict).is_ok() {
            prop_assert!(filter_sample(&fit, &kp, &cam, &loose).is_ok());
        }
    }
}

#[test]
fn small_run_accepts_everything_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_source(dir.path(), "clip", 10, 1);
    let out = dir.path().join("out");
    let (m, stats) = run_pipeline(&[input], assets(), &quick_config(500, 0), &out).unwrap();
    assert_eq!(m.accepted.len(), 10);
    assert!(m.rejected.is_empty());
    assert_eq!(m.counts["accepted"], 10);
    assert_eq!(m.counts["records"], 10);
    assert_eq!(stats, PipelineStats { fitted: 10, reused: 0 });
    for a in &m.accepted {
        let mesh = handmesh::load_mesh(out.join(&a.mesh_path)).unwrap();
        assert_eq!(mesh.n_vertices(), 778);
        assert!(out.join(&a.params_path).exists());
    }
    assert_eq!(DatasetManifest::load(out.join("manifest.json")).unwrap(), m);
}

#[test]
fn unreadable_files_are_recorded_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_source(dir.path(), "good", 3, 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let missing = dir.path().join("missing.json");
    let (m, _) = run_pipeline(&[good, bad, missing], assets(), &quick_config(500, 0), dir.path().join("out")).unwrap();
    assert_eq!(m.accepted.len(), 3);
    assert_eq!(m.file_errors.len(), 2);
}

#[test]
fn rejections_carry_reasons() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut low = record("low", &mut rng);
    low.keypoints[3][2] = 0.01;
    let mut few = record("few", &mut rng);
    for k in few.keypoints.iter_mut().skip(3) {
        k[2] = 0.0;
    }
    let file = KeypointFile {
        source: "s".into(),
        camera: Some(crop_camera()),
        records: vec![record("ok", &mut rng), low, few],
    };
    let path = dir.path().join("s.json");
    file.save(&path).unwrap();
    let (m, _) = run_pipeline(&[path], assets(), &quick_config(500, 0), dir.path().join("out")).unwrap();
    assert_eq!(m.accepted.iter().map(|a| a.image_id.as_str()).collect::<Vec<_>>(), vec!["ok"]);
    let reasons: Vec<_> = m.rejected.iter().map(|r| (r.image_id.as_str(), &r.rejection)).collect();
    assert!(matches!(reasons[0], ("low", Rejection::JointConfidence { joint: 3, .. })));
    assert!(matches!(reasons[1], ("few", Rejection::FitFailed { .. })));
}

fn accepted_ids(m: &DatasetManifest) -> Vec<String> {
    m.accepted.iter().map(|a| a.image_id.clone()).collect()
}

#[test]
fn cap_is_seeded_and_resume_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = vec![write_source(dir.path(), "a", 30, 3), write_source(dir.path(), "b", 5, 4)];
    let out = dir.path().join("out");
    let (m, _) = run_pipeline(&inputs, assets(), &quick_config(20, 7), &out).unwrap();
    assert_eq!(m.accepted.iter().filter(|s| s.source == "a").count(), 20);
    assert_eq!(m.accepted.iter().filter(|s| s.source == "b").count(), 5);
    let capped = m
        .rejected
        .iter()
        .filter(|r| matches!(r.rejection, Rejection::SourceCap { cap: 20 }))
        .count();
    assert_eq!(capped, 10);
    let mut ids: Vec<String> = accepted_ids(&m);
    ids.extend(m.rejected.iter().map(|r| r.image_id.clone()));
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 35);

    // same seed, fresh directory: same selection
    let (m2, _) = run_pipeline(&inputs, assets(), &quick_config(20, 7), dir.path().join("fresh")).unwrap();
    assert_eq!(m2, m);
    let (m3, _) = run_pipeline(&inputs, assets(), &quick_config(20, 8), dir.path().join("other")).unwrap();
    assert_ne!(accepted_ids(&m3), accepted_ids(&m));

    // interrupted run: drop the manifest and some fits, then resume
    std::fs::remove_file(out.join("manifest.json")).unwrap();
    let mut removed = 0;
    for (i, e) in std::fs::read_dir(out.join("fits")).unwrap().enumerate() {
        if i % 3 == 0 {
            std::fs::remove_file(e.unwrap().path()).unwrap();
            removed += 1;
        }
    }
    let (resumed, stats) = run_pipeline(&inputs, assets(), &quick_config(20, 7), &out).unwrap();
    assert_eq!(stats, PipelineStats { fitted: removed, reused: 35 - removed });
    assert_eq!(resumed, m);
    assert_eq!(
        std::fs::read(out.join("manifest.json")).unwrap(),
        std::fs::read(dir.path().join("fresh/manifest.json")).unwrap()
    );
}
