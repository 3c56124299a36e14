//! Stage functions and the end-to-end runner.
//!
//! crop → calibrate → localize → merge → evaluate. Every stage is a pure
//! function of its inputs; per-person work inside `localize` and the ablation
//! sweep runs on a dedicated thread pool but results are collected in input
//! order, so outputs do not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, select_standing, CalibrationOptions};
use crate::cropping::{estimate_crop_params, generate_patches, solve_layout, uniform_layout, CropParams, Patch};
use crate::error::{Error, Result};
use crate::formats::{
    digest_of, AnnotationFile, PatchFile, Penalties, PersonAnnotation, Provenance, ReconstructedPerson,
    ReconstructionFile, SceneFile, TruthFile, SCHEMA_VERSION,
};
use crate::geometry::{ground_intersect, CameraIntrinsics, GroundPlane, Point3};
use crate::hvip::{ground_normal_loss, locate, observations_for};
use crate::merging::{deduplicate, MergeConfig};
use crate::metrics::{evaluate, EvaluationOptions, EvaluationReport};
use crate::simulate::{generate, render_annotations, standing_segment_length, RenderNoise, SceneSpec};
use crate::skeleton::{midpoint, LEFT_ANKLE, LEFT_SHOULDER, RIGHT_ANKLE, RIGHT_SHOULDER};

/// Environment variable consulted for the default worker count.
pub const WORKERS_ENV: &str = "CROWDLOC_WORKERS";

/// Worker count from an explicit value, else [`WORKERS_ENV`], else the
/// available parallelism.
pub fn resolve_workers(explicit: Option<usize>) -> Result<usize> {
    if let Some(n) = explicit {
        return if n == 0 { Err(Error::Config("worker count must be positive".into())) } else { Ok(n) };
    }
    match std::env::var(WORKERS_ENV) {
        Ok(text) => match text.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV}={text:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn with_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(job))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Estimate person heights from the annotated boxes.
    #[default]
    Auto,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CropConfig {
    pub mode: CropMode,
    /// Required in manual mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<CropParams>,
    /// Use a constant block size instead of the adaptive layout.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uniform_block: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub crop: CropConfig,
    pub calibration: CalibrationOptions,
    /// Keypoint confidence threshold for standing-person selection.
    pub tau: f64,
    pub merge: MergeConfig,
    pub evaluation: EvaluationOptions,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            crop: CropConfig::default(),
            calibration: CalibrationOptions::default(),
            tau: 0.5,
            merge: MergeConfig::default(),
            evaluation: EvaluationOptions::default(),
        }
    }
}

/// One line of the intermediate-parameter log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: String,
    pub message: String,
    pub data: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineLog {
    pub entries: Vec<LogEntry>,
}

impl PipelineLog {
    fn record<T: Serialize>(&mut self, stage: &str, message: &str, data: &T) {
        let data = serde_json::to_value(data).expect("serializable");
        log::info!("[{stage}] {message}: {data}");
        self.entries.push(LogEntry { stage: stage.into(), message: message.into(), data });
    }
}

fn provenance(digest: &str) -> Provenance {
    Provenance::new(digest.to_string())
}

/// Builds the patch grid for an annotated image.
pub fn crop_stage(annotations: &AnnotationFile, config: &CropConfig, digest: &str) -> Result<PatchFile> {
    let (w, h) = (annotations.image_width, annotations.image_height);
    let params = match config.mode {
        CropMode::Manual => config
            .params
            .ok_or_else(|| Error::Config("manual cropping requires crop parameters".into()))?,
        CropMode::Auto => {
            let boxes: Vec<_> = annotations.people.iter().map(|p| p.bbox).collect();
            estimate_crop_params(&boxes, w, h)?
        }
    };
    let (layout, patches) = match config.uniform_block {
        Some(block) => (None, uniform_layout(&params, block)?),
        None => {
            let layout = solve_layout(&params)?;
            let patches = generate_patches(&layout, &params);
            (Some(layout), patches)
        }
    };
    Ok(PatchFile {
        schema_version: SCHEMA_VERSION,
        params,
        layout,
        uniform_block: config.uniform_block,
        patches,
        provenance: Some(provenance(digest)),
    })
}

/// Selects standing people and fits the camera and ground.
pub fn calibrate_stage(
    annotations: &AnnotationFile,
    options: &CalibrationOptions,
    tau: f64,
    digest: &str,
) -> Result<SceneFile> {
    let keypoints: Vec<_> = annotations.people.iter().map(|p| p.keypoints.clone()).collect();
    let obs = select_standing(&keypoints, tau);
    let size = (annotations.image_width, annotations.image_height);
    let result = calibrate(&obs, size, options)?;
    let mut scene = SceneFile::from_calibration(&result, obs.len(), size);
    scene.provenance = Some(provenance(digest));
    Ok(scene)
}

/// Ankle and shoulder 3D proxies: the ankle midpoint on the ankle plane and
/// the shoulder-midpoint ray cut by the vertical plane through that ankle
/// point facing the camera.
fn body_axis_proxies(person: &PersonAnnotation, camera: &CameraIntrinsics, ankle_plane: &GroundPlane) -> Option<(Point3, Point3)> {
    let k = &person.keypoints;
    let get = |i: usize| k.get(i).filter(|p| p.visible());
    let ankle = midpoint(get(LEFT_ANKLE)?, get(RIGHT_ANKLE)?);
    let shoulder = midpoint(get(LEFT_SHOULDER)?, get(RIGHT_SHOULDER)?);
    let a = ground_intersect(ankle, camera, ankle_plane).ok()?;
    let n = ankle_plane.normal();
    let facing = a.coords - n * a.coords.dot(&n);
    let m = facing.try_normalize(1e-12)?;
    let ray = camera.backproject(shoulder);
    let denom = m.dot(&ray);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = m.dot(&a.coords) / denom;
    (t > 0.0).then(|| (Point3::from(ray * t), a))
}

fn localize_person(
    person: &PersonAnnotation,
    scene: &SceneFile,
    patches: &[Patch],
) -> Result<Vec<ReconstructedPerson>> {
    let proxies = body_axis_proxies(person, &scene.camera, &scene.ankle_plane);
    let ground_normal = proxies.and_then(|(s, a)| ground_normal_loss(&s, &a, &scene.ground.normal()).ok());
    observations_for(person, patches)?
        .iter()
        .map(|obs| {
            let patch = patches.iter().find(|p| p.id == obs.patch).expect("patch from list");
            let located = locate(obs, patch, &scene.camera, &scene.ground)?;
            Ok(ReconstructedPerson {
                id: located.id,
                patch: located.patch,
                torso_px: located.torso_px,
                hvip_px: located.hvip_px,
                hvip_m: located.hvip_m,
                torso_height_m: located.torso_height,
                torso_m: located.torso_m,
                penalties: Penalties { ground_normal, out_of_bound: None },
                collinearity_px: located.collinearity_px,
                keypoints: person.keypoints.clone(),
                bbox: Some(person.bbox),
                seen_in: located.seen_in,
            })
        })
        .collect()
}

/// Lifts every annotated person, once per patch that sees them. People that
/// cannot be located are skipped and counted.
pub fn localize_stage(
    scene: &SceneFile,
    annotations: &AnnotationFile,
    patches: &PatchFile,
    workers: usize,
    digest: &str,
) -> Result<(ReconstructionFile, usize)> {
    let results: Vec<Result<Vec<ReconstructedPerson>>> = with_pool(workers, || {
        annotations
            .people
            .par_iter()
            .map(|p| localize_person(p, scene, &patches.patches))
            .collect()
    })?;
    let mut people = Vec::new();
    let mut failed = 0usize;
    for (person, r) in annotations.people.iter().zip(results) {
        match r {
            Ok(found) => people.extend(found),
            Err(e) => {
                log::warn!("person {:?} not located: {e}", person.id);
                failed += 1;
            }
        }
    }
    Ok((
        ReconstructionFile {
            schema_version: SCHEMA_VERSION,
            camera: scene.camera,
            ground: scene.ground,
            patches: patches.patches.clone(),
            people,
            merged: false,
            provenance: Some(provenance(digest)),
        },
        failed,
    ))
}

pub fn merge_stage(reconstruction: &ReconstructionFile, config: &MergeConfig, digest: &str) -> Result<ReconstructionFile> {
    let people = deduplicate(&reconstruction.people, &reconstruction.patches, config)?;
    Ok(ReconstructionFile {
        people,
        merged: true,
        provenance: Some(provenance(digest)),
        ..reconstruction.clone()
    })
}

pub fn evaluate_stage(reconstruction: &ReconstructionFile, truth: &TruthFile, options: &EvaluationOptions) -> EvaluationReport {
    evaluate(&reconstruction.people, &truth.people, options)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub patches: PatchFile,
    pub scene: SceneFile,
    pub reconstruction: ReconstructionFile,
    pub report: Option<EvaluationReport>,
    pub log: PipelineLog,
}

/// Digest identifying a configuration applied to a particular input.
pub fn run_digest(config: &SceneConfig, annotations: &AnnotationFile) -> String {
    digest_of(&(config, digest_of(annotations)))
}

/// Runs every stage in order. Stage failures carry the stage name.
pub fn run_pipeline(
    config: &SceneConfig,
    annotations: &AnnotationFile,
    truth: Option<&TruthFile>,
    workers: usize,
) -> Result<PipelineOutput> {
    annotations.validate().map_err(|e| e.in_stage("input"))?;
    let digest = run_digest(config, annotations);
    let mut log = PipelineLog::default();
    log.record("input", "annotations", &serde_json::json!({
        "people": annotations.people.len(),
        "image": [annotations.image_width, annotations.image_height],
        "config_digest": digest,
    }));

    let patches = crop_stage(annotations, &config.crop, &digest).map_err(|e| e.in_stage("crop"))?;
    log.record("crop", "parameters", &patches.params);
    log.record("crop", "layout", &serde_json::json!({ "layout": patches.layout, "patches": patches.patches.len() }));

    let scene = calibrate_stage(annotations, &config.calibration, config.tau, &digest).map_err(|e| e.in_stage("calibrate"))?;
    log.record("calibrate", "scene", &serde_json::json!({
        "focal": scene.camera.f,
        "normal": scene.ground.normal(),
        "offset": scene.ground.offset(),
        "residual": scene.residual,
        "selected": scene.observations_selected,
        "used": scene.observations_used,
        "warnings": scene.warnings,
    }));

    let (raw, failed) = localize_stage(&scene, annotations, &patches, workers, &digest).map_err(|e| e.in_stage("localize"))?;
    log.record("localize", "detections", &serde_json::json!({ "detections": raw.people.len(), "failed": failed }));

    let reconstruction = merge_stage(&raw, &config.merge, &digest).map_err(|e| e.in_stage("merge"))?;
    log.record("merge", "people", &serde_json::json!({ "before": raw.people.len(), "after": reconstruction.people.len() }));

    let report = truth.map(|t| evaluate_stage(&reconstruction, t, &config.evaluation));
    if let Some(r) = &report {
        log.record("evaluate", "metrics", r);
    }
    Ok(PipelineOutput { patches, scene, reconstruction, report, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSpec {
    /// Scene template; `seed` is the first seed and `person_count` is
    /// overridden by each count.
    pub scene: SceneSpec,
    pub counts: Vec<usize>,
    pub seeds: u64,
    /// Height prior; the segment length of the mean stature when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height_prior: Option<f64>,
    pub calibration: CalibrationOptions,
    pub tau: f64,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec { standing_fraction: 1.0, keypoint_noise: 2.0, ..SceneSpec::default() },
            counts: (1..=30).collect(),
            seeds: 20,
            height_prior: None,
            calibration: CalibrationOptions::default(),
            tau: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub count: usize,
    /// Mean `1 − cos` between the estimated and true normals.
    pub normal_cosine_distance: Option<f64>,
    /// Root mean square focal length error, pixels.
    pub focal_rmse: Option<f64>,
    /// Runs that produced a calibration.
    pub runs: usize,
    pub failures: usize,
}

/// Calibration error against the number of people in view, aggregated over
/// seeds. Counts below the calibration minimum produce empty cells.
pub fn emit_ablation_curves(spec: &AblationSpec, workers: usize) -> Result<Vec<AblationRow>> {
    spec.scene.validate()?;
    let h = spec.height_prior.unwrap_or_else(|| {
        standing_segment_length((spec.scene.stature_range[0] + spec.scene.stature_range[1]) / 2.0)
    });
    let options = CalibrationOptions { height_prior: h, ..spec.calibration.clone() };
    let jobs: Vec<(usize, u64)> = spec
        .counts
        .iter()
        .flat_map(|&c| (0..spec.seeds).map(move |s| (c, s)))
        .collect();
    let outcomes: Vec<Result<Option<(f64, f64)>>> = with_pool(workers, || {
        jobs.par_iter()
            .map(|&(count, s)| {
                let scene_spec = SceneSpec { seed: spec.scene.seed.wrapping_add(s), person_count: count, ..spec.scene.clone() };
                let scene = generate(&scene_spec)?;
                let ann = render_annotations(&scene, &RenderNoise::from_spec(&scene_spec))?;
                let kps: Vec<_> = ann.people.iter().map(|p| p.keypoints.clone()).collect();
                let obs = select_standing(&kps, spec.tau);
                match calibrate(&obs, (scene_spec.image_width, scene_spec.image_height), &options) {
                    Ok(r) => Ok(Some((
                        1.0 - r.ground.normal().dot(&scene.ground.normal()),
                        r.camera.f - scene.camera.f,
                    ))),
                    Err(Error::InsufficientData(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect()
    })?;
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(spec.counts.len());
    for (i, &count) in spec.counts.iter().enumerate() {
        let chunk = &outcomes[i * spec.seeds as usize..(i + 1) * spec.seeds as usize];
        let mut cos = Vec::new();
        let mut focal = Vec::new();
        for r in chunk {
            if let Some((c, f)) = *r {
                cos.push(c);
                focal.push(f);
            }
        }
        let runs = cos.len();
        rows.push(AblationRow {
            count,
            normal_cosine_distance: (runs > 0).then(|| cos.iter().sum::<f64>() / runs as f64),
            focal_rmse: (runs > 0).then(|| (focal.iter().map(|f| f * f).sum::<f64>() / runs as f64).sqrt()),
            runs,
            failures: chunk.len() - runs,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_scene(seed: u64, n: usize) -> (SceneSpec, AnnotationFile, TruthFile) {
        let spec = SceneSpec {
            seed,
            person_count: n,
            standing_fraction: 1.0,
            stature_range: [1.7, 1.7],
            max_yaw_deg: 0.0,
            ..SceneSpec::default()
        };
        let scene = generate(&spec).unwrap();
        let ann = render_annotations(&scene, &RenderNoise::default()).unwrap();
        (spec, ann, scene.truth().unwrap())
    }

    fn closure_config() -> SceneConfig {
        SceneConfig {
            calibration: CalibrationOptions { height_prior: standing_segment_length(1.7), ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_scene_closes() {
        let (_, ann, truth) = small_scene(3, 60);
        let out = run_pipeline(&closure_config(), &ann, Some(&truth), 2).unwrap();
        let r = out.report.unwrap();
        assert_eq!(r.matched, 60);
        assert!(r.ppds.unwrap().value > 1.0 - 1e-6, "{:?}", r.ppds);
        assert_eq!(out.reconstruction.people.len(), 60);
        let stages: Vec<&str> = out.log.entries.iter().map(|e| e.stage.as_str()).collect();
        for s in ["crop", "calibrate", "localize", "merge", "evaluate"] {
            assert!(stages.contains(&s));
        }
        // standing people are aligned with the normal
        for p in &out.reconstruction.people {
            assert!(p.penalties.ground_normal.unwrap() < 1e-6);
        }
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let (_, ann, truth) = small_scene(4, 40);
        let a = run_pipeline(&closure_config(), &ann, Some(&truth), 1).unwrap();
        let b = run_pipeline(&closure_config(), &ann, Some(&truth), 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let (_, mut ann, _) = small_scene(5, 10);
        ann.people.truncate(2);
        let err = run_pipeline(&SceneConfig::default(), &ann, None, 1).unwrap_err();
        assert!(err.to_string().starts_with("calibrate stage failed"), "{err}");
        assert_eq!(err.exit_code(), Error::InsufficientData(String::new()).exit_code());
        let manual = SceneConfig { crop: CropConfig { mode: CropMode::Manual, ..Default::default() }, ..Default::default() };
        let err = run_pipeline(&manual, &ann, None, 1).unwrap_err();
        assert!(err.to_string().starts_with("crop stage failed"), "{err}");
    }

    #[test]
    fn workers_resolution() {
        assert_eq!(resolve_workers(Some(3)).unwrap(), 3);
        assert!(resolve_workers(Some(0)).is_err());
    }

    #[test]
    fn ablation_rows() {
        let spec = AblationSpec {
            scene: SceneSpec { keypoint_noise: 0.0, stature_range: [1.7, 1.7], max_yaw_deg: 0.0, standing_fraction: 1.0, ..SceneSpec::default() },
            counts: vec![1, 2, 3, 6],
            seeds: 3,
            ..Default::default()
        };
        let rows = emit_ablation_curves(&spec, 2).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[0].normal_cosine_distance.is_none() && rows[1].failures == 3);
        for row in &rows[2..] {
            assert_eq!(row.runs, 3);
            assert!(row.normal_cosine_distance.unwrap() < 1e-8, "{row:?}");
            assert!(row.focal_rmse.unwrap() < 1e-3 * 6000.0, "{row:?}");
        }
        assert_eq!(rows, emit_ablation_curves(&spec, 1).unwrap());
    }
}
