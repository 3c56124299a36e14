//! Cross-module checks on simulated scenes.

use crowdloc::cropping::{global_to_local, Patch};
use crowdloc::formats::{read_json, write_json, AnnotationFile, ReconstructionFile, TruthFile};
use crowdloc::geometry::project;
use crowdloc::hvip::{locate, observations_for, HvipInput, PersonObservation};
use crowdloc::pipeline::{calibrate_stage, crop_stage, localize_stage, merge_stage, run_digest, run_pipeline, SceneConfig};
use crowdloc::simulate::{generate, render_annotations, RenderNoise, SceneSpec};

fn noiseless(seed: u64, people: usize) -> (crowdloc::simulate::Scene, AnnotationFile) {
    let scene = generate(&SceneSpec { seed, person_count: people, keypoint_noise: 0.0, ..SceneSpec::default() }).unwrap();
    let ann = render_annotations(&scene, &RenderNoise::default()).unwrap();
    (scene, ann)
}

#[test]
fn files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, ann) = noiseless(11, 40);
    let truth = scene.truth().unwrap();
    write_json(&dir.path().join("a.json"), &ann).unwrap();
    write_json(&dir.path().join("nested/t.json"), &truth).unwrap();
    assert_eq!(read_json::<AnnotationFile>(&dir.path().join("a.json")).unwrap(), ann);
    assert_eq!(read_json::<TruthFile>(&dir.path().join("nested/t.json")).unwrap(), truth);

    let out = run_pipeline(&SceneConfig::default(), &ann, Some(&truth), 2).unwrap();
    write_json(&dir.path().join("r.json"), &out.reconstruction).unwrap();
    assert_eq!(read_json::<ReconstructionFile>(&dir.path().join("r.json")).unwrap(), out.reconstruction);
}

#[test]
fn truth_pixels_are_projections() {
    let (scene, ann) = noiseless(12, 60);
    let truth = scene.truth().unwrap();
    for (t, a) in truth.people.iter().zip(&ann.people) {
        assert!(project(&t.torso_m, &scene.camera).unwrap().distance(&t.torso_px) < 1e-9);
        assert!(t.torso_px.distance(&a.torso.unwrap()) < 1e-9);
        assert!(t.hvip_px.distance(&a.hvip.unwrap()) < 1e-9);
    }
}

#[test]
fn location_does_not_depend_on_the_patch() {
    let (scene, ann) = noiseless(13, 30);
    let patches: Vec<Patch> = (0..4)
        .map(|i| Patch { id: i, x: i as u32 * 700, y: i as u32 * 300, size: 9000, row: i, overlap: i % 2 == 1 })
        .collect();
    for a in &ann.people {
        let (torso, hvip) = (a.torso.unwrap(), a.hvip.unwrap());
        let located: Vec<_> = patches
            .iter()
            .map(|patch| {
                let obs = PersonObservation {
                    id: a.id,
                    patch: patch.id,
                    torso_local: global_to_local(torso, patch),
                    hvip: HvipInput::Pixel(global_to_local(hvip, patch)),
                    delta_t: None,
                    keypoints: vec![],
                    body_center: None,
                };
                locate(&obs, patch, &scene.camera, &scene.ground).unwrap().torso_m
            })
            .collect();
        for p in &located[1..] {
            assert!((p - located[0]).norm() < 1e-9 * located[0].coords.norm());
        }
    }
}

#[test]
fn every_person_gets_at_least_one_observation() {
    let (_, ann) = noiseless(14, 150);
    let patches = crop_stage(&ann, &Default::default(), "").unwrap();
    for person in &ann.people {
        let obs = observations_for(person, &patches.patches).unwrap();
        assert!(!obs.is_empty());
        let mut ids: Vec<_> = obs.iter().map(|o| o.patch).collect();
        ids.dedup();
        assert_eq!(ids.len(), obs.len(), "one observation per patch");
    }
}

#[test]
fn staged_run_equals_pipeline() {
    let (scene, ann) = noiseless(15, 120);
    let truth = scene.truth().unwrap();
    let config = SceneConfig::default();
    let digest = run_digest(&config, &ann);
    let patches = crop_stage(&ann, &config.crop, &digest).unwrap();
    let calibrated = calibrate_stage(&ann, &config.calibration, config.tau, &digest).unwrap();
    let (raw, failed) = localize_stage(&calibrated, &ann, &patches, 3, &digest).unwrap();
    let merged = merge_stage(&raw, &config.merge, &digest).unwrap();
    let whole = run_pipeline(&config, &ann, Some(&truth), 1).unwrap();
    assert_eq!(failed, 0);
    assert_eq!(whole.patches, patches);
    assert_eq!(whole.scene, calibrated);
    assert_eq!(whole.reconstruction, merged);
    assert_eq!(whole.report.unwrap().matched, merged.people.len());
}
