mod common;

use std::sync::Arc;

use common::{fixture_config, write_fixture, Disk};
use restorelab_core::backends::{diffusion_fill, Backends, InpaintRequest, Inpainter};
use restorelab_core::compose::{parse_edit_script, render, SceneEdit};
use restorelab_core::geometry::MorphKind;
use restorelab_core::geometry::{morph, pad_bbox, restoration_region, BBox, BinaryMask, ImageBuffer};
use restorelab_core::runner::{
    edit_run, load_scene, run_direct, run_pipeline, run_pipeline_with, PipelineInput, COMPOSITE_FILE,
};
use restorelab_core::store::{artifact, load_stage_output, verify_chain, RunHandle, RunStatus};
use restorelab_core::{Error, Result};

fn one_disk() -> Disk {
    Disk { class: "cat", confidence: 0.9, center: (40, 36), radius: 14, color: [200, 30, 30, 255] }
}

#[test]
fn single_object_matches_hand_chained_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let disk = one_disk();
    let image = write_fixture(tmp.path(), "cat", 96, 80, &[disk], &[]);
    let damage = BinaryMask::from_bbox(96, 80, BBox::new(30, 20, 20, 10).unwrap()).unwrap();
    let damage_path = tmp.path().join("damage.png");
    damage.save(&damage_path).unwrap();
    let config = fixture_config("PATH2", tmp.path(), &tmp.path().join("runs"));

    let result = run_pipeline(&config, &tmp.path().join("cat.png"), Some(&damage_path)).unwrap();

    // Chain the fixture answers by hand through each stage contract.
    let full = common::disk_mask(96, 80, &disk);
    let padded = pad_bbox(full.tight_bbox().unwrap(), 8, (96, 80));
    let crop = image.crop(padded).unwrap();
    let mask = morph(&full.crop(padded).unwrap(), MorphKind::Dilate, 3).unwrap();
    let region = restoration_region(&mask, Some(&damage.crop(padded).unwrap()), 0).unwrap();
    let restored = diffusion_fill(&crop, &region);
    let holes = morph(&full, MorphKind::Dilate, 3).unwrap();
    let mut expected = diffusion_fill(&image, &holes);
    for y in 0..padded.h {
        for x in 0..padded.w {
            if mask.get(x, y) {
                expected.set_pixel(padded.x + x, padded.y + y, restored.pixel(x, y));
            }
        }
    }
    assert_eq!(result.composite, expected);
    assert_eq!(result.scene.objects.len(), 1);
    assert_eq!(result.scene.objects[0].class_label, "cat");

    let names: Vec<String> = result.manifests.iter().map(|m| format!("{:02}_{}", m.stage_index, m.stage_name)).collect();
    assert_eq!(names, ["00_input", "01_segment", "02_mask-refine", "03_restore", "04_compose"]);
    assert_eq!(result.run.meta().unwrap().status, RunStatus::Complete);
    let (arts, _) = load_stage_output(&result.run, "compose").unwrap();
    assert_eq!(ImageBuffer::decode_png(artifact(&arts, COMPOSITE_FILE).unwrap()).unwrap(), expected);
    assert!(result.manifests[3].outputs.iter().any(|o| o.path == "03_restore/0_restored.png"));
}

#[test]
fn path1_plan_runs_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path(), "pair", 512, 512, &common::two_disks(), &[]);
    let config = fixture_config("PATH1", tmp.path(), &tmp.path().join("runs"));
    let result = run_pipeline(&config, &tmp.path().join("pair.png"), None).unwrap();
    let stages: Vec<&str> = result.manifests.iter().map(|m| m.stage_name.as_str()).collect();
    assert_eq!(stages, ["input", "detect", "remove-background", "mask-refine", "restore", "compose"]);
    assert_eq!(result.scene.objects.len(), 2);
    verify_chain(&result.run).unwrap();
}

#[test]
fn low_confidence_objects_are_dropped_and_logged() {
    let tmp = tempfile::tempdir().unwrap();
    let weak = Disk { confidence: 0.1, center: (70, 50), radius: 6, ..one_disk() };
    write_fixture(tmp.path(), "cat", 96, 80, &[one_disk(), weak], &[]);
    let config = fixture_config("PATH2", tmp.path(), &tmp.path().join("runs"));
    let result = run_pipeline(&config, &tmp.path().join("cat.png"), None).unwrap();
    assert_eq!(result.scene.objects.len(), 1);
    let dropped = &result.manifests[1].params["detections"]["dropped"];
    assert_eq!(dropped.as_array().unwrap().len(), 1);
}

struct Broken;

impl Inpainter for Broken {
    fn backend_id(&self) -> &str {
        "broken"
    }
    fn inpaint_raw(&self, _: &ImageBuffer, _: &BinaryMask, _: &InpaintRequest) -> Result<ImageBuffer> {
        Err(Error::Backend("model crashed".into()))
    }
}

#[test]
fn failed_stage_is_recorded_and_earlier_stages_stay_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let image = write_fixture(tmp.path(), "cat", 96, 80, &[one_disk()], &[]);
    let config = fixture_config("PATH2", tmp.path(), &tmp.path().join("runs"));
    let mut backends = Backends::from_config(&config).unwrap();
    backends.inpainter = Some(Arc::new(Broken));
    let input = PipelineInput::new("cat", image, None).unwrap();
    let err = run_pipeline_with(&config, &backends, &input).unwrap_err();
    assert!(matches!(&err, Error::Stage { stage, .. } if stage == "restore"), "{err:?}");

    let run_dir = std::fs::read_dir(&config.run_root).unwrap().next().unwrap().unwrap().path();
    let run = RunHandle::open(&run_dir).unwrap();
    match run.meta().unwrap().status {
        RunStatus::Failed { stage, error } => {
            assert_eq!(stage, "restore");
            assert!(error.contains("model crashed"));
        }
        other => panic!("unexpected status {other:?}"),
    }
    for stage in ["input", "segment", "mask-refine"] {
        load_stage_output(&run, stage).unwrap();
    }
    assert!(!run.is_finalized("restore"));
    verify_chain(&run).unwrap();
}

#[test]
fn direct_run_delegates_to_one_inpaint() {
    let tmp = tempfile::tempdir().unwrap();
    let image = write_fixture(tmp.path(), "cat", 96, 80, &[one_disk()], &[]);
    let config = fixture_config("PATH2", tmp.path(), &tmp.path().join("runs"));
    let damage = BinaryMask::from_bbox(96, 80, BBox::new(30, 20, 20, 10).unwrap()).unwrap();
    let damage_path = tmp.path().join("damage.png");
    damage.save(&damage_path).unwrap();
    let result = run_direct(&config, &tmp.path().join("cat.png"), Some(&damage_path)).unwrap();
    assert_eq!(result.composite, diffusion_fill(&image, &damage));
    let stages: Vec<&str> = result.manifests.iter().map(|m| m.stage_name.as_str()).collect();
    assert_eq!(stages, ["input", "direct"]);

    let none = tmp.path().join("none.png");
    BinaryMask::empty(96, 80).unwrap().save(&none).unwrap();
    let untouched = run_direct(&config, &tmp.path().join("cat.png"), Some(&none)).unwrap();
    assert_eq!(untouched.composite, image);
    assert!(matches!(run_direct(&config, &tmp.path().join("cat.png"), None), Err(Error::InvalidArgument(_))));
}

#[test]
fn edits_land_in_new_stages() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(tmp.path(), "pair", 512, 512, &common::two_disks(), &[]);
    let config = fixture_config("PATH2", tmp.path(), &tmp.path().join("runs"));
    let result = run_pipeline(&config, &tmp.path().join("pair.png"), None).unwrap();
    let compose_before = std::fs::read(result.run.root.join("04_compose").join(COMPOSITE_FILE)).unwrap();

    let edits = parse_edit_script(r#"[{"op":"move","object_id":0,"dx":10,"dy":0,"dz":2},{"op":"set_visibility","object_id":1,"visible":false}]"#).unwrap();
    let (manifest, composite) = edit_run(&result.run.root, &edits).unwrap();
    assert_eq!(manifest.stage_index, 5);
    assert_eq!(manifest.stage_name, "edits");
    let (scene, dir) = load_scene(&result.run).unwrap();
    assert_eq!(dir, "05_edits");
    assert_eq!(scene.objects[0].origin.0, result.scene.objects[0].origin.0 + 10);
    assert!(!scene.objects[1].visible);
    assert_eq!(render(&scene, 1.0), composite);

    let (second, _) = edit_run(&result.run.root, &[SceneEdit::Remove { object_id: 1 }]).unwrap();
    assert_eq!(second.stage_index, 6);
    assert_eq!(load_scene(&result.run).unwrap().0.objects.len(), 1);
    verify_chain(&result.run).unwrap();
    assert_eq!(std::fs::read(result.run.root.join("04_compose").join(COMPOSITE_FILE)).unwrap(), compose_before);
    assert!(matches!(edit_run(&result.run.root, &[SceneEdit::Remove { object_id: 9 }]), Err(Error::NotFound(_))));
}
