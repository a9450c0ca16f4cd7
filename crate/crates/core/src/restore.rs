//! Restoration through the inpainter: per object, for the background
//! plate, prompt-driven tuning of a single object, and the whole-image
//! direct baseline.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::backends::{InpaintRequest, Inpainter};
use crate::config::PipelineConfig;
use crate::error::{invalid, Result};
use crate::geometry::{restoration_region, BinaryMask, ImageBuffer};
use crate::isolate::{Provenance, SceneObject};

pub const CLASS_PLACEHOLDER: &str = "{class}";
pub const BACKGROUND_CLASS: &str = "background";
/// Subject used for the direct baseline when no class is known.
pub const SCENE_CLASS: &str = "scene";

#[derive(Debug, Clone, PartialEq)]
pub struct RestoreParams {
    pub prompt_template: String,
    pub seed: u64,
    pub steps: u32,
    pub guidance: f64,
    pub region_dilation: u32,
}

impl RestoreParams {
    pub fn from_config(config: &PipelineConfig) -> Self {
        Self {
            prompt_template: config.inpaint.prompt_template.clone(),
            seed: config.inpaint.seed,
            steps: config.inpaint.steps,
            guidance: config.inpaint.guidance,
            region_dilation: config.inpaint.region_dilation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("steps must be >= 1"));
        }
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return Err(invalid("guidance must be >= 0"));
        }
        Ok(())
    }

    pub fn prompt_for(&self, class_label: &str) -> String {
        self.prompt_template.replace(CLASS_PLACEHOLDER, class_label)
    }

    /// Per-object seed: the run seed offset by the object id.
    pub fn object_seed(&self, id: u32) -> u64 {
        self.seed.wrapping_add(id as u64)
    }

    fn request(&self, prompt: String, seed: u64) -> InpaintRequest {
        InpaintRequest {
            prompt,
            seed,
            steps: self.steps,
            guidance: self.guidance,
        }
    }
}

/// A restored object and the region that was re-synthesized.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRestoration {
    pub object: SceneObject,
    pub region: BinaryMask,
}

pub fn restore_object(
    obj: &SceneObject,
    damage: Option<&BinaryMask>,
    inpainter: &dyn Inpainter,
    params: &RestoreParams,
) -> Result<ObjectRestoration> {
    params.validate()?;
    if let Some(d) = damage {
        if d.dimensions() != obj.mask.dimensions() {
            return Err(invalid(format!(
                "object {}: damage mask {:?} does not match crop {:?}",
                obj.id,
                d.dimensions(),
                obj.mask.dimensions()
            )));
        }
    }
    let region = restoration_region(&obj.mask, damage, params.region_dilation)?;
    let prompt = params.prompt_for(&obj.class_label);
    let seed = params.object_seed(obj.id);
    let crop = inpainter.inpaint(&obj.crop, &region, &params.request(prompt.clone(), seed))?;
    let object = SceneObject {
        crop,
        provenance: Provenance {
            stage: "restore".into(),
            effective_seed: Some(seed),
            prompt: Some(prompt),
        },
        ..obj.clone()
    };
    Ok(ObjectRestoration { object, region })
}

/// Restore objects with up to `parallelism` concurrent inpainter calls.
/// Results come back in input order regardless of completion order.
pub fn restore_objects(
    objects: &[SceneObject],
    damage: &BTreeMap<u32, BinaryMask>,
    inpainter: &dyn Inpainter,
    params: &RestoreParams,
    parallelism: usize,
) -> Result<Vec<ObjectRestoration>> {
    if parallelism <= 1 || objects.len() <= 1 {
        return objects
            .iter()
            .map(|o| restore_object(o, damage.get(&o.id), inpainter, params))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<ObjectRestoration>>>> = objects.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..parallelism.min(objects.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(o) = objects.get(i) else { break };
                let r = restore_object(o, damage.get(&o.id), inpainter, params);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

pub fn restore_background(
    plate: &ImageBuffer,
    holes: &BinaryMask,
    inpainter: &dyn Inpainter,
    params: &RestoreParams,
) -> Result<ImageBuffer> {
    params.validate()?;
    let request = params.request(params.prompt_for(BACKGROUND_CLASS), params.seed);
    inpainter.inpaint(plate, holes, &request)
}

/// Re-synthesize an object's whole mask region from a user prompt.
pub fn tune_object(
    obj: &SceneObject,
    prompt: &str,
    inpainter: &dyn Inpainter,
    params: &RestoreParams,
) -> Result<SceneObject> {
    if prompt.trim().is_empty() {
        return Err(invalid("tuning prompt must not be empty"));
    }
    params.validate()?;
    let region = restoration_region(&obj.mask, None, params.region_dilation)?;
    let seed = params.object_seed(obj.id);
    let crop = inpainter.inpaint(&obj.crop, &region, &params.request(prompt.to_string(), seed))?;
    Ok(SceneObject {
        crop,
        prompt: Some(prompt.to_string()),
        provenance: Provenance {
            stage: "tune".into(),
            effective_seed: Some(seed),
            prompt: Some(prompt.to_string()),
        },
        ..obj.clone()
    })
}

/// The baseline: one inpaint call over the whole image with the damage
/// mask, no isolation. `subject` fills the prompt template and defaults to
/// [`SCENE_CLASS`].
pub fn direct_restore(
    image: &ImageBuffer,
    damage: &BinaryMask,
    inpainter: &dyn Inpainter,
    params: &RestoreParams,
    subject: Option<&str>,
) -> Result<ImageBuffer> {
    params.validate()?;
    let request = params.request(params.prompt_for(subject.unwrap_or(SCENE_CLASS)), params.seed);
    inpainter.inpaint(image, damage, &request)
}
