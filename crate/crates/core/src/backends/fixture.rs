//! File-driven stand-ins for the ML models.
//!
//! Detector, segmenter and background remover answers come from
//! `<stem>.fixtures.json` files next to the images; the inpainter is a
//! small deterministic diffusion fill that needs no files at all.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{wire, BackgroundRemover, CallContext, DetectedObject, Detector, InpaintRequest, Inpainter, Segmenter};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask, ImageBuffer};

pub const FIXTURE_SUFFIX: &str = ".fixtures.json";

/// Jacobi sweeps run by the fixture inpainter.
pub const FILL_ITERATIONS: usize = 32;

/// One object as written in a fixture file. The mask, when present, is
/// either inline base64 PNG (as on the wire) or a PNG path relative to the
/// fixture directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureObject {
    #[serde(rename = "class")]
    pub class_label: String,
    pub confidence: f64,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_png_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureFile {
    #[serde(default)]
    objects: Vec<FixtureObject>,
    /// Object id -> foreground mask file for background removal.
    #[serde(default)]
    background_masks: BTreeMap<String, String>,
    /// Variant name -> detections reported for that version of the image.
    #[serde(default)]
    scores: BTreeMap<String, Vec<FixtureObject>>,
}

/// A validated fixture file with every mask decoded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixtureRecord {
    pub objects: Vec<DetectedObject>,
    pub background_masks: BTreeMap<u32, BinaryMask>,
    pub scores: BTreeMap<String, Vec<DetectedObject>>,
}

impl FixtureRecord {
    /// Detections for `variant`; the original image's objects when the
    /// variant is absent or has no scripted entry.
    pub fn objects_for(&self, variant: Option<&str>) -> &[DetectedObject] {
        match variant {
            Some(v) if v != "original" => self.scores.get(v).unwrap_or(&self.objects),
            _ => &self.objects,
        }
    }
}

fn stem_of(image_name: &str) -> String {
    let name = image_name.strip_suffix(FIXTURE_SUFFIX).unwrap_or(image_name);
    match Path::new(name).extension().and_then(|e| e.to_str()) {
        Some(ext) if ["png", "jpg", "jpeg"].contains(&ext.to_ascii_lowercase().as_str()) => Path::new(name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        _ => Path::new(name)
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    }
}

fn read_mask_file(dir: &Path, rel: &str) -> Result<BinaryMask> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            Error::Protocol(format!("fixture mask {} does not exist", path.display()))
        } else {
            Error::io(&path, e)
        }
    })?;
    BinaryMask::decode_png(&bytes).map_err(|e| Error::Protocol(format!("{}: {e}", path.display())))
}

fn resolve_object(dir: &Path, o: FixtureObject) -> Result<DetectedObject> {
    let mask = match (&o.mask_png_b64, &o.mask_file) {
        (Some(_), Some(_)) => {
            return Err(Error::Protocol(format!(
                "object `{}` sets both mask_png_b64 and mask_file",
                o.class_label
            )))
        }
        (Some(b64), None) => Some(wire::decode_mask("mask_png_b64", b64)?),
        (None, Some(file)) => Some(read_mask_file(dir, file)?),
        (None, None) => None,
    };
    wire::WireObject {
        class_label: o.class_label,
        confidence: o.confidence,
        bbox: o.bbox,
        mask_png_b64: None,
    }
    .into_detected()
    .map(|d| DetectedObject { mask, ..d })
}

/// Read and validate `<dir>/<stem>.fixtures.json`. `image_name` may be the
/// image file name or its bare stem.
pub fn load_fixture_annotations(dir: &Path, image_name: &str) -> Result<FixtureRecord> {
    let path = dir.join(format!("{}{FIXTURE_SUFFIX}", stem_of(image_name)));
    let text = fs::read_to_string(&path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            Error::NotFound(path.display().to_string())
        } else {
            Error::io(&path, e)
        }
    })?;
    let file: FixtureFile =
        serde_json::from_str(&text).map_err(|e| Error::Protocol(format!("{}: {e}", path.display())))?;

    let objects = file
        .objects
        .into_iter()
        .map(|o| resolve_object(dir, o))
        .collect::<Result<Vec<_>>>()?;
    let mut background_masks = BTreeMap::new();
    for (id, rel) in file.background_masks {
        let id: u32 = id
            .parse()
            .map_err(|_| Error::Protocol(format!("background_masks key `{id}` is not an object id")))?;
        background_masks.insert(id, read_mask_file(dir, &rel)?);
    }
    let mut scores = BTreeMap::new();
    for (variant, objs) in file.scores {
        let objs = objs
            .into_iter()
            .map(|o| resolve_object(dir, o))
            .collect::<Result<Vec<_>>>()?;
        scores.insert(variant, objs);
    }
    Ok(FixtureRecord {
        objects,
        background_masks,
        scores,
    })
}

/// Detector, segmenter and background remover answering from fixture files.
#[derive(Debug, Clone)]
pub struct FixtureBackend {
    dir: PathBuf,
    backend_id: String,
}

impl FixtureBackend {
    pub fn new(dir: impl Into<PathBuf>, backend_id: impl Into<String>) -> Self {
        Self {
            dir: dir.into(),
            backend_id: backend_id.into(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// The fixture stem for a call: the context's image key, or else the
    /// stem of the fixture image in the directory whose pixels equal `image`.
    pub fn resolve_key(&self, image: &ImageBuffer, ctx: &CallContext) -> Result<String> {
        if let Some(key) = &ctx.image_key {
            return Ok(key.clone());
        }
        let entries = fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut stems: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                e.file_name()
                    .to_str()
                    .and_then(|n| n.strip_suffix(FIXTURE_SUFFIX))
                    .map(str::to_string)
            })
            .collect();
        stems.sort();
        for stem in stems {
            let png = self.dir.join(format!("{stem}.png"));
            if let Ok(candidate) = ImageBuffer::load(&png) {
                if candidate == *image {
                    return Ok(stem);
                }
            }
        }
        Err(Error::NotFound(format!(
            "no fixture in {} matches the image",
            self.dir.display()
        )))
    }

    fn record(&self, image: &ImageBuffer, ctx: &CallContext) -> Result<FixtureRecord> {
        load_fixture_annotations(&self.dir, &self.resolve_key(image, ctx)?)
    }
}

impl Detector for FixtureBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn detect_raw(&self, image: &ImageBuffer, _: f64, ctx: &CallContext) -> Result<Vec<DetectedObject>> {
        Ok(self.record(image, ctx)?.objects_for(ctx.variant.as_deref()).to_vec())
    }
}

impl Segmenter for FixtureBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn segment_raw(&self, image: &ImageBuffer, _: f64, ctx: &CallContext) -> Result<Vec<DetectedObject>> {
        Ok(self.record(image, ctx)?.objects_for(ctx.variant.as_deref()).to_vec())
    }
}

impl BackgroundRemover for FixtureBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    /// The object's `background_masks` entry; crop-sized masks pass through,
    /// larger (canvas-level) masks are cropped at the object's origin. An
    /// object without an entry is all foreground.
    fn remove_background_raw(&self, crop: &ImageBuffer, ctx: &CallContext) -> Result<BinaryMask> {
        let (w, h) = crop.dimensions();
        let Some(object) = ctx.object else {
            return BinaryMask::full(w, h);
        };
        let key = ctx
            .image_key
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("fixture background removal needs an image key".into()))?;
        let record = load_fixture_annotations(&self.dir, key)?;
        let Some(mask) = record.background_masks.get(&object.id) else {
            return BinaryMask::full(w, h);
        };
        if mask.dimensions() == (w, h) {
            return Ok(mask.clone());
        }
        let region = BBox::new(object.origin.0, object.origin.1, w, h)?;
        if region.is_within(mask.width(), mask.height()) {
            mask.crop(region)
        } else {
            Err(Error::Protocol(format!(
                "fixture mask for object {} is {:?}, crop is {:?} at {:?}",
                object.id,
                mask.dimensions(),
                (w, h),
                object.origin
            )))
        }
    }
}

/// Deterministic stand-in inpainter: neighbor-average diffusion fill.
/// Prompt, seed, steps and guidance are accepted and ignored.
#[derive(Debug, Clone)]
pub struct FixtureInpainter {
    backend_id: String,
}

impl FixtureInpainter {
    pub fn new(backend_id: impl Into<String>) -> Self {
        Self {
            backend_id: backend_id.into(),
        }
    }
}

impl Inpainter for FixtureInpainter {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn inpaint_raw(&self, image: &ImageBuffer, mask: &BinaryMask, _: &InpaintRequest) -> Result<ImageBuffer> {
        Ok(diffusion_fill(image, mask))
    }
}

/// Fill masked pixels: seed them with the mean color of the mask's outer
/// ring (8-connected), then run [`FILL_ITERATIONS`] Jacobi sweeps where each
/// masked pixel becomes the mean of its in-bounds 4-neighbors. All four
/// channels are filled. A mask with no ring (covering the whole image)
/// seeds from the mean of the whole image.
pub fn diffusion_fill(image: &ImageBuffer, mask: &BinaryMask) -> ImageBuffer {
    let (w, h) = (image.width() as usize, image.height() as usize);
    debug_assert_eq!((w as u32, h as u32), mask.dimensions());
    let masked = |i: usize| mask.values()[i] != 0;

    let mut values: Vec<[f64; 4]> = image
        .pixels()
        .chunks_exact(4)
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64, p[3] as f64])
        .collect();
    let holes: Vec<usize> = (0..w * h).filter(|&i| masked(i)).collect();
    if holes.is_empty() {
        return image.clone();
    }

    let mut sum = [0f64; 4];
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if masked(i) {
                continue;
            }
            let touches = (-1i64..=1).any(|dy| {
                (-1i64..=1).any(|dx| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 && masked(ny as usize * w + nx as usize)
                })
            });
            if touches {
                for c in 0..4 {
                    sum[c] += values[i][c];
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        for v in &values {
            for c in 0..4 {
                sum[c] += v[c];
            }
        }
        count = values.len();
    }
    let seed = sum.map(|s| s / count as f64);
    for &i in &holes {
        values[i] = seed;
    }

    let mut next = values.clone();
    for _ in 0..FILL_ITERATIONS {
        for &i in &holes {
            let (x, y) = (i % w, i / w);
            let mut acc = [0f64; 4];
            let mut n = 0usize;
            let mut add = |j: usize| {
                for c in 0..4 {
                    acc[c] += values[j][c];
                }
                n += 1;
            };
            if x > 0 {
                add(i - 1);
            }
            if x + 1 < w {
                add(i + 1);
            }
            if y > 0 {
                add(i - w);
            }
            if y + 1 < h {
                add(i + w);
            }
            next[i] = acc.map(|a| a / n as f64);
        }
        std::mem::swap(&mut values, &mut next);
    }

    let mut out = image.clone();
    let px = out.pixels_mut();
    for &i in &holes {
        for c in 0..4 {
            px[i * 4 + c] = values[i][c].round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}
