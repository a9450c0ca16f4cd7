//! End-to-end orchestration: pipeline and direct-baseline runs, edit
//! sessions over finished runs, and the evaluation driver.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backends::{Backends, CallContext};
use crate::compose::{apply_edits, render, SceneEdit, Tuner};
use crate::config::{IsolationPath, PipelineConfig, StageKind, StagePlan};
use crate::error::{invalid, Error, Result};
use crate::evaluate::{distort, export_report, measure, EvalReport, ScoreRecord};
use crate::geometry::{morph, BBox, BinaryMask, ImageBuffer};
use crate::isolate::{
    assemble, crop_name, damage_crops, detect_objects, isolate_path2, remove_backgrounds, scene_from_artifacts,
    scene_to_artifacts, Detections, Isolation, IsolationParams, Scene, SCENE_FILE,
};
use crate::restore::{direct_restore, restore_background, restore_objects, RestoreParams};
use crate::store::{
    init_run, init_run_with_plan, load_stage_output, verify_chain, write_stage_output, Artifact, FileDigest,
    RunHandle, RunStatus, StageManifest, StageMeta,
};

pub const INPUT_FILE: &str = "input.png";
pub const DAMAGE_FILE: &str = "damage.png";
pub const PLATE_FILE: &str = "background_plate.png";
pub const HOLES_FILE: &str = "holes.png";
pub const RESTORED_BACKGROUND_FILE: &str = "background_restored.png";
pub const COMPOSITE_FILE: &str = "composite.png";
pub const DETECTIONS_FILE: &str = "detections.json";
pub const EDITS_FILE: &str = "edits.json";
pub const DISTORT_SUFFIX: &str = ".distort.json";

pub const METHOD_PIPELINE: &str = "pipeline";
pub const METHOD_DIRECT: &str = "direct";

/// A decoded input image, its optional damage mask, and the key fixture
/// backends use to find its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineInput {
    pub key: String,
    pub image: ImageBuffer,
    pub damage: Option<BinaryMask>,
}

impl PipelineInput {
    pub fn new(key: impl Into<String>, image: ImageBuffer, damage: Option<BinaryMask>) -> Result<Self> {
        if let Some(d) = &damage {
            if d.dimensions() != image.dimensions() {
                return Err(invalid(format!(
                    "damage mask is {:?}, image is {:?}",
                    d.dimensions(),
                    image.dimensions()
                )));
            }
        }
        Ok(Self {
            key: key.into(),
            image,
            damage,
        })
    }

    pub fn load(image: &Path, damage: Option<&Path>) -> Result<Self> {
        let key = image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let img = ImageBuffer::load(image)?;
        let damage = damage.map(BinaryMask::load).transpose()?;
        Self::new(key, img, damage)
    }

    fn context(&self) -> CallContext {
        CallContext::for_image(&self.key)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run: RunHandle,
    pub scene: Scene,
    pub composite: ImageBuffer,
    pub manifests: Vec<StageManifest>,
}

/// Run the full pipeline on one image file.
pub fn run_pipeline(config: &PipelineConfig, image: &Path, damage: Option<&Path>) -> Result<RunResult> {
    config.validate()?;
    let input = PipelineInput::load(image, damage)?;
    let backends = Backends::from_config(config)?;
    run_pipeline_with(config, &backends, &input)
}

/// Run the direct baseline on one image file.
pub fn run_direct(config: &PipelineConfig, image: &Path, damage: Option<&Path>) -> Result<RunResult> {
    let damage = damage.ok_or_else(|| invalid("direct restoration needs a damage mask"))?;
    let input = PipelineInput::load(image, Some(damage))?;
    let backends = Backends::from_config(config)?;
    run_direct_with(config, &backends, &input, None)
}

/// Tracks stage order and records the failing stage in `run.json`.
struct Session<'a> {
    run: RunHandle,
    plan: &'a StagePlan,
    manifests: Vec<StageManifest>,
}

impl<'a> Session<'a> {
    fn stage(
        &mut self,
        kind: StageKind,
        body: impl FnOnce(Option<&StageManifest>) -> Result<(Vec<Artifact>, StageMeta)>,
    ) -> Result<()> {
        let desc = self
            .plan
            .get(kind)
            .ok_or_else(|| invalid(format!("stage {kind} is not in the plan")))?;
        let started = crate::store::now_rfc3339();
        let out = body(self.manifests.last())
            .and_then(|(artifacts, meta)| write_stage_output(&self.run, &desc.dir_name(), &artifacts, meta.started(started)))
            .map_err(|e| e.in_stage(kind.name()))?;
        self.manifests.push(out);
        Ok(())
    }

    fn finish(self, result: Result<()>) -> Result<Vec<StageManifest>> {
        match result {
            Ok(()) => {
                self.run.set_status(RunStatus::Complete)?;
                verify_chain(&self.run)
            }
            Err(e) => {
                let stage = match &e {
                    Error::Stage { stage, .. } => stage.clone(),
                    _ => String::new(),
                };
                let error = e.root().to_string();
                if let Err(status_err) = self.run.set_status(RunStatus::Failed { stage, error }) {
                    log::error!("could not record failure in {}: {status_err}", self.run.root.display());
                }
                Err(e)
            }
        }
    }
}

/// `names` from the previous stage's outputs, as this stage's inputs.
fn inputs_from(prev: Option<&StageManifest>, names: &[String]) -> Result<Vec<FileDigest>> {
    let prev = prev.ok_or_else(|| invalid("stage has no predecessor"))?;
    names
        .iter()
        .map(|n| {
            prev.outputs
                .iter()
                .find(|o| o.path.rsplit('/').next() == Some(n.as_str()))
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("{n} in outputs of {}", prev.stage_name)))
        })
        .collect()
}

fn all_inputs(prev: Option<&StageManifest>) -> Result<Vec<FileDigest>> {
    Ok(prev.ok_or_else(|| invalid("stage has no predecessor"))?.outputs.clone())
}

fn input_artifacts(input: &PipelineInput) -> Result<Vec<Artifact>> {
    let mut out = vec![Artifact::new(INPUT_FILE, input.image.encode_png()?)];
    if let Some(d) = &input.damage {
        out.push(Artifact::new(DAMAGE_FILE, d.encode_png()?));
    }
    Ok(out)
}

fn input_meta(input: &PipelineInput) -> StageMeta {
    StageMeta::new("none")
        .param("image_key", &input.key)
        .param("size", [input.image.width(), input.image.height()])
        .param("damage", input.damage.is_some())
}

fn isolation_params(config: &PipelineConfig) -> IsolationParams {
    IsolationParams {
        min_confidence: config.min_confidence,
        instance_pad: config.instance_pad,
        hole_dilation: config.morph_radius,
    }
}

fn isolation_artifacts(iso: &Isolation, damage: Option<&BinaryMask>) -> Result<Vec<Artifact>> {
    let mut out = scene_to_artifacts(&iso.scene, "crop", PLATE_FILE)?;
    out.push(Artifact::new(HOLES_FILE, iso.holes.encode_png()?));
    if let Some(d) = damage {
        out.push(Artifact::new(DAMAGE_FILE, d.encode_png()?));
    }
    Ok(out)
}

fn isolation_meta(backend_id: &str, params: &IsolationParams, detections: &Detections) -> StageMeta {
    StageMeta::new(backend_id)
        .param("min_confidence", params.min_confidence)
        .param("instance_pad", params.instance_pad)
        .param("hole_dilation", params.hole_dilation)
        .param("detections", detections.summary())
}

fn object_file_names(scene: &Scene, crop_kind: &str) -> Vec<String> {
    scene
        .objects
        .iter()
        .flat_map(|o| [crop_name(o.id, crop_kind), crop_name(o.id, "mask")])
        .collect()
}

fn with_optional(mut names: Vec<String>, extra: &[&str], damage: bool) -> Vec<String> {
    names.extend(extra.iter().map(|s| s.to_string()));
    if damage {
        names.push(DAMAGE_FILE.to_string());
    }
    names
}

/// Pipeline run with already-built backends.
pub fn run_pipeline_with(config: &PipelineConfig, backends: &Backends, input: &PipelineInput) -> Result<RunResult> {
    config.validate()?;
    let inpainter = backends.inpainter()?.clone();
    let plan = crate::config::resolve_stage_plan(config);
    let run = init_run(&config.run_root, config)?;
    let mut session = Session {
        run,
        plan: &plan,
        manifests: Vec::new(),
    };
    let ctx = input.context();
    let iso_params = isolation_params(config);
    let restore_params = RestoreParams::from_config(config);
    let has_damage = input.damage.is_some();
    let mut outcome: Option<(Scene, ImageBuffer)> = None;

    let result = (|| -> Result<()> {
        session.stage(StageKind::Input, |_| Ok((input_artifacts(input)?, input_meta(input))))?;

        let mut isolation: Option<Isolation> = None;
        match config.isolation_path {
            IsolationPath::Path2 => {
                let segmenter = backends.segmenter()?.clone();
                session.stage(StageKind::Segment, |prev| {
                    let iso = isolate_path2(&input.image, segmenter.as_ref(), &iso_params, &ctx)?;
                    let meta = isolation_meta(segmenter.backend_id(), &iso_params, &iso.detections)
                        .inputs(all_inputs(prev)?);
                    let artifacts = isolation_artifacts(&iso, input.damage.as_ref())?;
                    isolation = Some(iso);
                    Ok((artifacts, meta))
                })?;
            }
            IsolationPath::Path1 => {
                let detector = backends.detector()?.clone();
                let remover = backends.background_remover()?.clone();
                let mut detections: Option<Detections> = None;
                session.stage(StageKind::Detect, |prev| {
                    let dets = detect_objects(&input.image, detector.as_ref(), &iso_params, &ctx)?;
                    let boxes: Vec<serde_json::Value> = dets
                        .kept
                        .iter()
                        .enumerate()
                        .map(|(id, (o, padded))| {
                            serde_json::json!({"id": id, "class": o.class_label, "confidence": o.confidence, "bbox": o.bbox, "crop_box": padded})
                        })
                        .collect();
                    let mut artifacts = vec![Artifact::new(
                        DETECTIONS_FILE,
                        serde_json::to_vec_pretty(&boxes).expect("detections serialize"),
                    )];
                    for (id, (_, padded)) in dets.kept.iter().enumerate() {
                        artifacts.push(Artifact::new(crop_name(id as u32, "crop"), input.image.crop(*padded)?.encode_png()?));
                    }
                    artifacts.push(Artifact::new(PLATE_FILE, input.image.encode_png()?));
                    if let Some(d) = &input.damage {
                        artifacts.push(Artifact::new(DAMAGE_FILE, d.encode_png()?));
                    }
                    let meta = isolation_meta(detector.backend_id(), &iso_params, &dets).inputs(all_inputs(prev)?);
                    detections = Some(dets);
                    Ok((artifacts, meta))
                })?;
                let dets = detections.expect("detect stage sets detections");
                session.stage(StageKind::RemoveBackground, |prev| {
                    let names: Vec<String> = (0..dets.kept.len() as u32).map(|id| crop_name(id, "crop")).collect();
                    let inputs = inputs_from(prev, &with_optional(names, &[PLATE_FILE], has_damage))?;
                    let objects = remove_backgrounds(&input.image, &dets, remover.as_ref(), &ctx)?;
                    let iso = assemble(&input.image, objects, dets.clone(), &iso_params)?;
                    let meta = StageMeta::new(remover.backend_id()).inputs(inputs);
                    let artifacts = isolation_artifacts(&iso, input.damage.as_ref())?;
                    isolation = Some(iso);
                    Ok((artifacts, meta))
                })?;
            }
        }
        let iso = isolation.expect("isolation stage sets the scene");

        let mut refined: Option<(Scene, BTreeMap<u32, BinaryMask>)> = None;
        session.stage(StageKind::MaskRefine, |prev| {
            let names = with_optional(object_file_names(&iso.scene, "crop"), &[SCENE_FILE, PLATE_FILE, HOLES_FILE], has_damage);
            let inputs = inputs_from(prev, &names)?;
            let mut scene = iso.scene.clone();
            for o in &mut scene.objects {
                o.mask = morph(&o.mask, config.morph_kind, config.morph_radius)?;
            }
            let damage = match &input.damage {
                Some(d) => damage_crops(&scene, d)?,
                None => BTreeMap::new(),
            };
            let mut artifacts = scene_to_artifacts(&scene, "crop", PLATE_FILE)?;
            artifacts.push(Artifact::new(HOLES_FILE, iso.holes.encode_png()?));
            for (id, d) in &damage {
                artifacts.push(Artifact::new(crop_name(*id, "damage"), d.encode_png()?));
            }
            let meta = StageMeta::new("none")
                .param("morph_kind", config.morph_kind)
                .param("morph_radius", config.morph_radius)
                .inputs(inputs);
            refined = Some((scene, damage));
            Ok((artifacts, meta))
        })?;
        let (scene, damage) = refined.expect("mask-refine sets the scene");

        let mut restored: Option<Scene> = None;
        session.stage(StageKind::Restore, |prev| {
            let mut names = with_optional(object_file_names(&scene, "crop"), &[PLATE_FILE, HOLES_FILE], false);
            names.extend(damage.keys().map(|id| crop_name(*id, "damage")));
            let inputs = inputs_from(prev, &names)?;
            let results = restore_objects(&scene.objects, &damage, inpainter.as_ref(), &restore_params, config.inpaint.parallelism)?;
            let background = restore_background(&scene.background, &iso.holes, inpainter.as_ref(), &restore_params)?;
            let mut out = scene.clone();
            out.background = background;
            let mut regions = Vec::new();
            let mut prompts = BTreeMap::new();
            out.objects = results
                .into_iter()
                .map(|r| {
                    regions.push(Artifact::new(crop_name(r.object.id, "region"), r.region.encode_png()?));
                    prompts.insert(r.object.id.to_string(), r.object.provenance.prompt.clone());
                    Ok(r.object)
                })
                .collect::<Result<_>>()?;
            let mut artifacts = scene_to_artifacts(&out, "restored", RESTORED_BACKGROUND_FILE)?;
            artifacts.extend(regions);
            let meta = StageMeta::new(inpainter.backend_id())
                .param("prompt_template", &restore_params.prompt_template)
                .param("steps", restore_params.steps)
                .param("guidance", restore_params.guidance)
                .param("region_dilation", restore_params.region_dilation)
                .param("parallelism", config.inpaint.parallelism)
                .param("prompts", prompts)
                .seed(restore_params.seed)
                .inputs(inputs);
            restored = Some(out);
            Ok((artifacts, meta))
        })?;
        let scene = restored.expect("restore sets the scene");

        session.stage(StageKind::Compose, |prev| {
            let names = with_optional(object_file_names(&scene, "restored"), &[SCENE_FILE, RESTORED_BACKGROUND_FILE], false);
            let inputs = inputs_from(prev, &names)?;
            let composite = render(&scene, config.depth_scale_factor);
            let mut artifacts = vec![Artifact::new(COMPOSITE_FILE, composite.encode_png()?)];
            artifacts.extend(scene_to_artifacts(&scene, "restored", RESTORED_BACKGROUND_FILE)?);
            let meta = StageMeta::new("none")
                .param("depth_scale_factor", config.depth_scale_factor)
                .inputs(inputs);
            outcome = Some((scene.clone(), composite));
            Ok((artifacts, meta))
        })
    })();

    let run = session.run.clone();
    let manifests = session.finish(result)?;
    let (scene, composite) = outcome.expect("compose sets the outcome");
    Ok(RunResult {
        run,
        scene,
        composite,
        manifests,
    })
}

/// Direct-baseline run: one whole-image inpaint call. `subject` fills the
/// prompt template's class slot.
pub fn run_direct_with(
    config: &PipelineConfig,
    backends: &Backends,
    input: &PipelineInput,
    subject: Option<&str>,
) -> Result<RunResult> {
    let damage = input
        .damage
        .as_ref()
        .ok_or_else(|| invalid("direct restoration needs a damage mask"))?;
    let inpainter = backends.inpainter()?.clone();
    let params = RestoreParams::from_config(config);
    let plan = StagePlan::direct();
    let run = init_run_with_plan(&config.run_root, config, &plan, "direct")?;
    let mut session = Session {
        run,
        plan: &plan,
        manifests: Vec::new(),
    };
    let mut composite: Option<ImageBuffer> = None;
    let result = (|| -> Result<()> {
        session.stage(StageKind::Input, |_| Ok((input_artifacts(input)?, input_meta(input))))?;
        session.stage(StageKind::Direct, |prev| {
            let inputs = all_inputs(prev)?;
            let out = direct_restore(&input.image, damage, inpainter.as_ref(), &params, subject)?;
            let artifacts = vec![Artifact::new(COMPOSITE_FILE, out.encode_png()?)];
            let meta = StageMeta::new(inpainter.backend_id())
                .param("prompt", params.prompt_for(subject.unwrap_or(crate::restore::SCENE_CLASS)))
                .param("steps", params.steps)
                .param("guidance", params.guidance)
                .seed(params.seed)
                .inputs(inputs);
            composite = Some(out);
            Ok((artifacts, meta))
        })
    })();
    let run = session.run.clone();
    let manifests = session.finish(result)?;
    let composite = composite.expect("direct stage sets the composite");
    Ok(RunResult {
        run,
        scene: Scene::new(composite.clone(), Vec::new())?,
        composite,
        manifests,
    })
}

/// The editable scene of a run: the latest saved edits, else the compose
/// stage. Returns the scene and the stage directory it came from.
pub fn load_scene(run: &RunHandle) -> Result<(Scene, String)> {
    let stage = if run.is_finalized(StageKind::Edits.name()) {
        StageKind::Edits.name()
    } else {
        StageKind::Compose.name()
    };
    let dir = run.stage_dir(stage)?;
    let (artifacts, _) = load_stage_output(run, &dir)?;
    Ok((scene_from_artifacts(&artifacts, "restored", RESTORED_BACKGROUND_FILE)?, dir))
}

/// Persist an edited scene, the edits that produced it and its render as
/// a new edits stage after every existing stage.
pub fn save_edits(run: &RunHandle, scene: &Scene, edits: &[SceneEdit], depth_scale_factor: f64) -> Result<(StageManifest, ImageBuffer)> {
    let last = run
        .manifests()?
        .pop()
        .ok_or_else(|| invalid(format!("run {} has no finalized stages", run.run_id)))?;
    let desc = run.append_stage(StageKind::Edits)?;
    let composite = render(scene, depth_scale_factor);
    let mut artifacts = vec![Artifact::new(COMPOSITE_FILE, composite.encode_png()?)];
    artifacts.extend(scene_to_artifacts(scene, "restored", RESTORED_BACKGROUND_FILE)?);
    artifacts.push(Artifact::new(
        EDITS_FILE,
        serde_json::to_vec_pretty(edits).expect("edits serialize"),
    ));
    // Inputs: whatever the new stage reuses unchanged from the last one.
    let inputs = last
        .outputs
        .iter()
        .filter(|o| {
            artifacts
                .iter()
                .any(|a| crate::store::digest_hex(&a.bytes) == o.digest && o.path.ends_with(&format!("/{}", a.name)))
        })
        .cloned()
        .collect();
    let meta = StageMeta::new("none")
        .param("edit_count", edits.len())
        .param("depth_scale_factor", depth_scale_factor)
        .inputs(inputs);
    let manifest = write_stage_output(run, &desc.dir_name(), &artifacts, meta)?;
    Ok((manifest, composite))
}

/// Apply an edit script to a finished run and save the result.
pub fn edit_run(run_dir: &Path, edits: &[SceneEdit]) -> Result<(StageManifest, ImageBuffer)> {
    let run = RunHandle::open(run_dir)?;
    let config = run.config()?;
    let (scene, _) = load_scene(&run)?;
    let needs_inpainter = edits.iter().any(|e| matches!(e, SceneEdit::Tune { .. }));
    let backends = if needs_inpainter {
        Backends::from_config(&config)?
    } else {
        Backends::default()
    };
    let params = RestoreParams::from_config(&config);
    let tuner = backends
        .inpainter
        .as_deref()
        .map(|inpainter| Tuner { inpainter, params: &params });
    let edited = apply_edits(&scene, edits, tuner)?;
    save_edits(&run, &edited, edits, config.depth_scale_factor)
}

/// Top-level `*.png` files of a directory, sorted by name. Files ending in
/// `_mask.png` are masks, not inputs, and are skipped.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if path.is_file() && name.ends_with(".png") && !name.ends_with("_mask.png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// One distortion region from a `<stem>.distort.json` annotation. Unset
/// fields fall back to the config's eval settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortRegion {
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<crate::config::DistortionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_class: Option<String>,
    #[serde(default)]
    pub regions: Vec<DistortRegion>,
}

fn load_distort_spec(image: &Path) -> Result<DistortSpec> {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let path = image.with_file_name(format!("{stem}{DISTORT_SUFFIX}"));
    match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(DistortSpec::default()),
        Err(e) => Err(Error::io(&path, e)),
    }
}

/// Upper third of a box: the default distortion target.
pub fn upper_third(b: BBox) -> BBox {
    BBox::new(b.x, b.y, b.w, (b.h / 3).max(1)).expect("non-empty sub-box")
}

/// Everything an evaluation produced.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub scatter_csv: String,
    pub records: Vec<ScoreRecord>,
    pub skipped: Vec<String>,
}

pub fn parse_methods(list: &str) -> Result<Vec<String>> {
    let methods: Vec<String> = list.split(',').map(|m| m.trim().to_string()).filter(|m| !m.is_empty()).collect();
    if methods.is_empty() {
        return Err(invalid("no methods given"));
    }
    for m in &methods {
        if m != METHOD_PIPELINE && m != METHOD_DIRECT {
            return Err(invalid(format!("unknown method `{m}` (expected {METHOD_PIPELINE} or {METHOD_DIRECT})")));
        }
    }
    let mut seen = methods.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != methods.len() {
        return Err(invalid("methods must be unique"));
    }
    Ok(methods)
}

/// Score one dataset image. `None` when the scorer finds no ground truth.
fn evaluate_image(
    config: &PipelineConfig,
    backends: &Backends,
    image_path: &Path,
    methods: &[String],
    out_dir: &Path,
) -> Result<Option<ScoreRecord>> {
    let scorer = backends.scorer()?;
    let input = PipelineInput::load(image_path, None)?;
    let spec = load_distort_spec(image_path)?;
    let ctx = input.context();

    let originals = scorer.detect(&input.image, 0.0, &ctx.clone().with_variant("original"))?;
    let gt = match &spec.true_class {
        Some(c) => originals.iter().find(|o| &o.class_label == c),
        None => originals.first(),
    };
    let Some(gt) = gt.cloned() else {
        log::warn!("{}: no ground-truth detection, skipped", input.key);
        return Ok(None);
    };
    let gate = config.eval.iou_threshold.map(|t| (gt.bbox, t));
    let g = gt.confidence;

    let regions = if spec.regions.is_empty() {
        vec![DistortRegion {
            bbox: upper_third(gt.bbox),
            kind: None,
            strength: None,
            seed: None,
        }]
    } else {
        spec.regions.clone()
    };
    let (w, h) = input.image.dimensions();
    let mut distorted = input.image.clone();
    let mut damage = BinaryMask::empty(w, h)?;
    for (i, r) in regions.iter().enumerate() {
        let seed = r.seed.unwrap_or(config.eval.distortion_seed.wrapping_add(i as u64));
        distorted = distort(
            &distorted,
            r.bbox,
            r.kind.unwrap_or(config.eval.distortion),
            seed,
            r.strength.unwrap_or(config.eval.distortion_strength),
        )?;
        damage = damage.union(&BinaryMask::from_bbox(w, h, r.bbox)?)?;
    }
    let distorted_dir = out_dir.join("distorted");
    fs::create_dir_all(&distorted_dir).map_err(|e| Error::io(&distorted_dir, e))?;
    distorted.save(&distorted_dir.join(format!("{}.png", input.key)))?;

    let score = |img: &ImageBuffer, variant: &str| {
        measure(img, scorer.as_ref(), &gt.class_label, &ctx.clone().with_variant(variant), gate)
    };
    let d = score(&distorted, "distorted")?;

    let mut run_config = config.clone();
    run_config.run_root = out_dir.join("runs");
    let damaged = PipelineInput::new(&input.key, distorted, Some(damage))?;
    let mut r = BTreeMap::new();
    for m in methods {
        let result = match m.as_str() {
            METHOD_PIPELINE => run_pipeline_with(&run_config, backends, &damaged)?,
            _ => run_direct_with(&run_config, backends, &damaged, Some(&gt.class_label))?,
        };
        r.insert(m.clone(), score(&result.composite, m)?);
    }
    ScoreRecord::new(input.key, gt.class_label, g, d, r).map(Some)
}

/// Distort, restore and score every image of `dataset`, then write
/// `report.json`, `scatter.csv` and `records.json` into `out_dir`.
pub fn run_eval(config: &PipelineConfig, dataset: &Path, methods: &[String], out_dir: &Path) -> Result<EvalOutcome> {
    config.validate()?;
    let backends = Backends::from_config(config)?;
    backends.scorer()?;
    run_eval_with(config, &backends, dataset, methods, out_dir)
}

pub fn run_eval_with(
    config: &PipelineConfig,
    backends: &Backends,
    dataset: &Path,
    methods: &[String],
    out_dir: &Path,
) -> Result<EvalOutcome> {
    let methods = parse_methods(&methods.join(","))?;
    let images = list_images(dataset)?;
    if images.is_empty() {
        return Err(invalid(format!("no images in {}", dataset.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Option<ScoreRecord>>>>> = images.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..config.eval.workers.min(images.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(path) = images.get(i) else { break };
                let r = evaluate_image(config, backends, path, &methods, out_dir);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (path, slot) in images.iter().zip(slots) {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match slot.into_inner().expect("slot lock").expect("every slot filled") {
            Ok(Some(r)) => records.push(r),
            Ok(None) => skipped.push(name),
            Err(e) => return Err(invalid(format!("{name}: {e}"))),
        }
    }
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let (report, scatter_csv) = export_report(&records, &methods, Some(config.digest()))?;

    let write = |name: &str, bytes: &[u8]| {
        let p = out_dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write("report.json", &serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    write("scatter.csv", scatter_csv.as_bytes())?;
    write("records.json", &serde_json::to_vec_pretty(&records).expect("records serialize"))?;
    Ok(EvalOutcome {
        report,
        scatter_csv,
        records,
        skipped,
    })
}
