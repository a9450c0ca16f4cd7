//! The model boundary.
//!
//! Four role contracts (detector, segmenter, background remover,
//! inpainter) with two implementations each: deterministic file-driven
//! fixtures for offline work, and an HTTP adapter for the inference
//! sidecar. The provided trait methods enforce the output contracts
//! (thresholding, sort order, tight mask boxes, untouched unmasked pixels)
//! so every implementation behaves the same way to callers.

mod fixture;
mod http;
pub mod wire;

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::config::{BackendLocator, PipelineConfig};
use crate::error::{invalid, Error, Result};
use crate::geometry::{BBox, BinaryMask, ImageBuffer};
use crate::store::digest_hex;

pub use fixture::{
    diffusion_fill, load_fixture_annotations, FixtureBackend, FixtureInpainter, FixtureObject,
    FixtureRecord, FILL_ITERATIONS,
};
pub use http::HttpBackend;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectedObject {
    pub class_label: String,
    pub confidence: f64,
    pub bbox: BBox,
    /// Full-image mask; present for segmenter output.
    pub mask: Option<BinaryMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendRole {
    Detector,
    Segmenter,
    BackgroundRemover,
    Inpainter,
}

impl BackendRole {
    pub fn name(self) -> &'static str {
        match self {
            BackendRole::Detector => "detector",
            BackendRole::Segmenter => "segmenter",
            BackendRole::BackgroundRemover => "background_remover",
            BackendRole::Inpainter => "inpainter",
        }
    }
}

impl fmt::Display for BackendRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendSpec {
    pub role: BackendRole,
    pub locator: BackendLocator,
    pub backend_id: String,
}

impl BackendSpec {
    pub fn new(role: BackendRole, locator: BackendLocator) -> Result<Self> {
        let loc = locator.locator();
        if loc.trim().is_empty() {
            return Err(invalid(format!("{role} locator is empty")));
        }
        let digest = digest_hex(format!("{}\n{}\n{}", role.name(), locator.kind(), loc).as_bytes());
        let backend_id = format!("{}:{}:{}", role.name(), locator.kind(), &digest[..12]);
        Ok(Self {
            role,
            locator,
            backend_id,
        })
    }
}

/// What a backend call is about, beyond the pixels. HTTP backends ignore
/// it; fixture backends use it to find their annotation records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CallContext {
    /// File stem of the source image.
    pub image_key: Option<String>,
    /// Which version of the image is being scored (`distorted`,
    /// `pipeline`, ...). `None` means the original.
    pub variant: Option<String>,
    /// The scene object a crop belongs to.
    pub object: Option<ObjectRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectRef {
    pub id: u32,
    pub origin: (u32, u32),
}

impl CallContext {
    pub fn for_image(key: impl Into<String>) -> Self {
        Self {
            image_key: Some(key.into()),
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: impl Into<String>) -> Self {
        self.variant = Some(variant.into());
        self
    }

    pub fn with_object(mut self, id: u32, origin: (u32, u32)) -> Self {
        self.object = Some(ObjectRef { id, origin });
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintRequest {
    pub prompt: String,
    pub seed: u64,
    pub steps: u32,
    pub guidance: f64,
}

/// Confidence descending, then bbox `(y, x)` ascending.
pub fn detection_order(a: &DetectedObject, b: &DetectedObject) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.bbox.y.cmp(&b.bbox.y))
        .then(a.bbox.x.cmp(&b.bbox.x))
}

fn check_detection(o: &DetectedObject, image: (u32, u32)) -> Result<()> {
    if !(0.0..=1.0).contains(&o.confidence) {
        return Err(Error::Protocol(format!(
            "confidence {} for `{}` outside [0,1]",
            o.confidence, o.class_label
        )));
    }
    if !o.bbox.is_within(image.0, image.1) {
        return Err(Error::Protocol(format!(
            "bbox {:?} for `{}` exceeds {}x{} image",
            <[u32; 4]>::from(o.bbox),
            o.class_label,
            image.0,
            image.1
        )));
    }
    Ok(())
}

fn threshold_and_sort(mut objects: Vec<DetectedObject>, min_confidence: f64) -> Vec<DetectedObject> {
    objects.retain(|o| o.confidence >= min_confidence);
    objects.sort_by(detection_order);
    objects
}

pub trait Detector: Send + Sync {
    fn backend_id(&self) -> &str;

    /// Raw backend answer, in any order and unfiltered.
    fn detect_raw(&self, image: &ImageBuffer, min_confidence: f64, ctx: &CallContext) -> Result<Vec<DetectedObject>>;

    fn detect(&self, image: &ImageBuffer, min_confidence: f64, ctx: &CallContext) -> Result<Vec<DetectedObject>> {
        let mut objects = self.detect_raw(image, min_confidence, ctx)?;
        for o in &mut objects {
            check_detection(o, image.dimensions())?;
            o.mask = None;
        }
        Ok(threshold_and_sort(objects, min_confidence))
    }
}

pub trait Segmenter: Send + Sync {
    fn backend_id(&self) -> &str;

    fn segment_raw(&self, image: &ImageBuffer, min_confidence: f64, ctx: &CallContext) -> Result<Vec<DetectedObject>>;

    fn segment(&self, image: &ImageBuffer, min_confidence: f64, ctx: &CallContext) -> Result<Vec<DetectedObject>> {
        let objects = self.segment_raw(image, min_confidence, ctx)?;
        for o in &objects {
            check_detection(o, image.dimensions())?;
            let mask = o
                .mask
                .as_ref()
                .ok_or_else(|| Error::Protocol(format!("segment object `{}` has no mask", o.class_label)))?;
            if mask.dimensions() != image.dimensions() {
                return Err(Error::Protocol(format!(
                    "mask for `{}` is {:?}, image is {:?}",
                    o.class_label,
                    mask.dimensions(),
                    image.dimensions()
                )));
            }
            if mask.tight_bbox() != Some(o.bbox) {
                return Err(Error::Protocol(format!(
                    "bbox {:?} of `{}` is not the tight box of its mask ({:?})",
                    <[u32; 4]>::from(o.bbox),
                    o.class_label,
                    mask.tight_bbox().map(<[u32; 4]>::from)
                )));
            }
        }
        Ok(threshold_and_sort(objects, min_confidence))
    }
}

pub trait BackgroundRemover: Send + Sync {
    fn backend_id(&self) -> &str;

    fn remove_background_raw(&self, crop: &ImageBuffer, ctx: &CallContext) -> Result<BinaryMask>;

    fn remove_background(&self, crop: &ImageBuffer, ctx: &CallContext) -> Result<BinaryMask> {
        let mask = self.remove_background_raw(crop, ctx)?;
        if mask.dimensions() != crop.dimensions() {
            return Err(Error::Protocol(format!(
                "foreground mask is {:?}, crop is {:?}",
                mask.dimensions(),
                crop.dimensions()
            )));
        }
        Ok(mask)
    }
}

pub trait Inpainter: Send + Sync {
    fn backend_id(&self) -> &str;

    fn inpaint_raw(&self, image: &ImageBuffer, mask: &BinaryMask, request: &InpaintRequest) -> Result<ImageBuffer>;

    /// Synthesize the masked pixels. Unmasked pixels are copied from the
    /// input whatever the backend returns, and an empty mask skips the
    /// backend entirely.
    fn inpaint(&self, image: &ImageBuffer, mask: &BinaryMask, request: &InpaintRequest) -> Result<ImageBuffer> {
        if image.dimensions() != mask.dimensions() {
            return Err(invalid(format!(
                "inpaint image is {:?} but mask is {:?}",
                image.dimensions(),
                mask.dimensions()
            )));
        }
        if mask.is_empty() {
            return Ok(image.clone());
        }
        let synthesized = self.inpaint_raw(image, mask, request)?;
        if synthesized.dimensions() != image.dimensions() {
            return Err(Error::Protocol(format!(
                "inpainted image is {:?}, expected {:?}",
                synthesized.dimensions(),
                image.dimensions()
            )));
        }
        let mut out = image.clone();
        for ((dst, src), &m) in out
            .pixels_mut()
            .chunks_exact_mut(4)
            .zip(synthesized.pixels().chunks_exact(4))
            .zip(mask.values())
        {
            if m != 0 {
                dst.copy_from_slice(src);
            }
        }
        Ok(out)
    }
}

/// The backends a config names, instantiated.
#[derive(Clone, Default)]
pub struct Backends {
    pub detector: Option<Arc<dyn Detector>>,
    pub segmenter: Option<Arc<dyn Segmenter>>,
    pub background_remover: Option<Arc<dyn BackgroundRemover>>,
    pub inpainter: Option<Arc<dyn Inpainter>>,
    pub scorer: Option<Arc<dyn Detector>>,
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("detector", &self.detector.as_ref().map(|b| b.backend_id().to_string()))
            .field("segmenter", &self.segmenter.as_ref().map(|b| b.backend_id().to_string()))
            .field(
                "background_remover",
                &self.background_remover.as_ref().map(|b| b.backend_id().to_string()),
            )
            .field("inpainter", &self.inpainter.as_ref().map(|b| b.backend_id().to_string()))
            .field("scorer", &self.scorer.as_ref().map(|b| b.backend_id().to_string()))
            .finish()
    }
}

impl Backends {
    pub fn from_config(config: &PipelineConfig) -> Result<Self> {
        let timeout = Duration::from_secs(config.backends.timeout_secs);
        let b = &config.backends;
        Ok(Self {
            detector: b
                .detector
                .as_ref()
                .map(|l| build_detector(BackendSpec::new(BackendRole::Detector, l.clone())?, timeout))
                .transpose()?,
            segmenter: b
                .segmenter
                .as_ref()
                .map(|l| -> Result<Arc<dyn Segmenter>> {
                    let spec = BackendSpec::new(BackendRole::Segmenter, l.clone())?;
                    Ok(match &spec.locator {
                        BackendLocator::Fixture(dir) => Arc::new(FixtureBackend::new(dir, spec.backend_id.clone())),
                        BackendLocator::Http(url) => Arc::new(HttpBackend::new(url, spec.backend_id.clone(), timeout)),
                    })
                })
                .transpose()?,
            background_remover: b
                .background_remover
                .as_ref()
                .map(|l| -> Result<Arc<dyn BackgroundRemover>> {
                    let spec = BackendSpec::new(BackendRole::BackgroundRemover, l.clone())?;
                    Ok(match &spec.locator {
                        BackendLocator::Fixture(dir) => Arc::new(FixtureBackend::new(dir, spec.backend_id.clone())),
                        BackendLocator::Http(url) => Arc::new(HttpBackend::new(url, spec.backend_id.clone(), timeout)),
                    })
                })
                .transpose()?,
            inpainter: b
                .inpainter
                .as_ref()
                .map(|l| -> Result<Arc<dyn Inpainter>> {
                    let spec = BackendSpec::new(BackendRole::Inpainter, l.clone())?;
                    Ok(match &spec.locator {
                        BackendLocator::Fixture(_) => Arc::new(FixtureInpainter::new(spec.backend_id.clone())),
                        BackendLocator::Http(url) => Arc::new(HttpBackend::new(url, spec.backend_id.clone(), timeout)),
                    })
                })
                .transpose()?,
            scorer: config
                .eval
                .scorer
                .as_ref()
                .map(|l| build_detector(BackendSpec::new(BackendRole::Detector, l.clone())?, timeout))
                .transpose()?,
        })
    }

    pub fn detector(&self) -> Result<&Arc<dyn Detector>> {
        self.detector.as_ref().ok_or_else(|| invalid("no detector configured"))
    }

    pub fn segmenter(&self) -> Result<&Arc<dyn Segmenter>> {
        self.segmenter.as_ref().ok_or_else(|| invalid("no segmenter configured"))
    }

    pub fn background_remover(&self) -> Result<&Arc<dyn BackgroundRemover>> {
        self.background_remover
            .as_ref()
            .ok_or_else(|| invalid("no background_remover configured"))
    }

    pub fn inpainter(&self) -> Result<&Arc<dyn Inpainter>> {
        self.inpainter.as_ref().ok_or_else(|| invalid("no inpainter configured"))
    }

    pub fn scorer(&self) -> Result<&Arc<dyn Detector>> {
        self.scorer.as_ref().ok_or_else(|| invalid("no eval.scorer configured"))
    }
}

fn build_detector(spec: BackendSpec, timeout: Duration) -> Result<Arc<dyn Detector>> {
    Ok(match &spec.locator {
        BackendLocator::Fixture(dir) => Arc::new(FixtureBackend::new(dir, spec.backend_id.clone())),
        BackendLocator::Http(url) => Arc::new(HttpBackend::new(url, spec.backend_id.clone(), timeout)),
    })
}
