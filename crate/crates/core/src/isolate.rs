//! Splitting an image into scene objects and a background plate.
//!
//! Path 1 detects objects and asks a background remover for each padded
//! crop's foreground mask; Path 2 gets both boxes and masks from a single
//! instance-segmentation call. Both produce the same [`Scene`] shape, and
//! given the same masks they produce equal scenes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backends::{BackgroundRemover, CallContext, DetectedObject, Detector, Segmenter};
use crate::error::{invalid, Error, Result};
use crate::geometry::{morph, pad_bbox, BBox, BinaryMask, ImageBuffer, MorphKind};
use crate::store::{artifact, Artifact};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Last stage that produced the object's pixels.
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

impl Provenance {
    pub fn isolation() -> Self {
        Self {
            stage: "isolation".into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: u32,
    pub class_label: String,
    pub confidence: f64,
    /// Padded bounding-box region of the source image.
    pub crop: ImageBuffer,
    /// Crop-local foreground mask.
    pub mask: BinaryMask,
    /// Top-left corner of the crop on the canvas. Edits may move it
    /// off-canvas; rendering clips.
    pub origin: (i64, i64),
    pub z_layer: i32,
    pub scale: f64,
    pub visible: bool,
    pub prompt: Option<String>,
    pub provenance: Provenance,
}

impl SceneObject {
    pub fn new(
        id: u32,
        class_label: impl Into<String>,
        confidence: f64,
        crop: ImageBuffer,
        mask: BinaryMask,
        origin: (i64, i64),
    ) -> Result<Self> {
        if crop.dimensions() != mask.dimensions() {
            return Err(invalid(format!(
                "object {id}: crop {:?} and mask {:?} differ",
                crop.dimensions(),
                mask.dimensions()
            )));
        }
        Ok(Self {
            id,
            class_label: class_label.into(),
            confidence,
            crop,
            mask,
            origin,
            z_layer: 0,
            scale: 1.0,
            visible: true,
            prompt: None,
            provenance: Provenance::isolation(),
        })
    }

    pub fn size(&self) -> (u32, u32) {
        self.crop.dimensions()
    }

    /// Canvas box of the crop at its origin. Only meaningful while the
    /// origin is non-negative.
    pub fn canvas_bbox(&self) -> Result<BBox> {
        if self.origin.0 < 0 || self.origin.1 < 0 {
            return Err(invalid(format!("object {} lies off-canvas", self.id)));
        }
        BBox::new(self.origin.0 as u32, self.origin.1 as u32, self.crop.width(), self.crop.height())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub canvas: (u32, u32),
    pub background: ImageBuffer,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn new(background: ImageBuffer, objects: Vec<SceneObject>) -> Result<Self> {
        let scene = Self {
            canvas: background.dimensions(),
            background,
            objects,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.background.dimensions() != self.canvas {
            return Err(invalid("background does not match canvas"));
        }
        let mut seen = BTreeSet::new();
        for o in &self.objects {
            if !seen.insert(o.id) {
                return Err(invalid(format!("duplicate object id {}", o.id)));
            }
            if o.crop.dimensions() != o.mask.dimensions() {
                return Err(invalid(format!("object {}: crop and mask differ", o.id)));
            }
        }
        Ok(())
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_index(&self, id: u32) -> Result<usize> {
        self.objects
            .iter()
            .position(|o| o.id == id)
            .ok_or_else(|| Error::NotFound(format!("object {id}")))
    }
}

/// Knobs for the isolation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsolationParams {
    pub min_confidence: f64,
    pub instance_pad: u32,
    pub hole_dilation: u32,
}

/// Result of the detection half of isolation: kept objects with their
/// padded boxes, plus what fell under the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Detections {
    pub kept: Vec<(DetectedObject, BBox)>,
    pub dropped: Vec<DetectedObject>,
}

impl Detections {
    fn split(all: Vec<DetectedObject>, params: &IsolationParams, canvas: (u32, u32)) -> Self {
        let (kept, dropped): (Vec<_>, Vec<_>) = all
            .into_iter()
            .partition(|o| o.confidence >= params.min_confidence);
        Self {
            kept: kept
                .into_iter()
                .map(|o| {
                    let padded = pad_bbox(o.bbox, params.instance_pad, canvas);
                    (o, padded)
                })
                .collect(),
            dropped,
        }
    }

    /// Summary for stage manifests.
    pub fn summary(&self) -> serde_json::Value {
        let row = |o: &DetectedObject| serde_json::json!({"class": o.class_label, "confidence": o.confidence});
        serde_json::json!({
            "kept": self.kept.iter().map(|(o, _)| row(o)).collect::<Vec<_>>(),
            "dropped": self.dropped.iter().map(row).collect::<Vec<_>>(),
        })
    }
}

/// Isolated scene plus the hole mask for background restoration.
#[derive(Debug, Clone, PartialEq)]
pub struct Isolation {
    pub scene: Scene,
    pub holes: BinaryMask,
    pub detections: Detections,
}

/// Run the detector and pad every kept box. Everything the backend
/// returned is requested (threshold 0) so that dropped objects can be
/// reported.
pub fn detect_objects(
    image: &ImageBuffer,
    detector: &dyn Detector,
    params: &IsolationParams,
    ctx: &CallContext,
) -> Result<Detections> {
    let all = detector.detect(image, 0.0, ctx)?;
    Ok(Detections::split(all, params, image.dimensions()))
}

/// Crop every kept detection and ask the background remover for its mask.
pub fn remove_backgrounds(
    image: &ImageBuffer,
    detections: &Detections,
    remover: &dyn BackgroundRemover,
    ctx: &CallContext,
) -> Result<Vec<SceneObject>> {
    detections
        .kept
        .iter()
        .enumerate()
        .map(|(id, (det, padded))| {
            let id = id as u32;
            let crop = image.crop(*padded)?;
            let call = ctx.clone().with_object(id, (padded.x, padded.y));
            let mask = remover.remove_background(&crop, &call)?;
            SceneObject::new(id, &det.class_label, det.confidence, crop, mask, (padded.x as i64, padded.y as i64))
        })
        .collect()
}

pub fn isolate_path1(
    image: &ImageBuffer,
    detector: &dyn Detector,
    remover: &dyn BackgroundRemover,
    params: &IsolationParams,
    ctx: &CallContext,
) -> Result<Isolation> {
    let detections = detect_objects(image, detector, params, ctx).map_err(|e| e.in_stage("detect"))?;
    let objects = remove_backgrounds(image, &detections, remover, ctx).map_err(|e| e.in_stage("remove-background"))?;
    assemble(image, objects, detections, params)
}

pub fn isolate_path2(
    image: &ImageBuffer,
    segmenter: &dyn Segmenter,
    params: &IsolationParams,
    ctx: &CallContext,
) -> Result<Isolation> {
    let all = segmenter
        .segment(image, 0.0, ctx)
        .map_err(|e| e.in_stage("segment"))?;
    let detections = Detections::split(all, params, image.dimensions());
    let objects = detections
        .kept
        .iter()
        .enumerate()
        .map(|(id, (det, padded))| {
            let full = det.mask.as_ref().expect("segment output carries masks");
            SceneObject::new(
                id as u32,
                &det.class_label,
                det.confidence,
                image.crop(*padded)?,
                full.crop(*padded)?,
                (padded.x as i64, padded.y as i64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(image, objects, detections, params)
}

pub fn assemble(
    image: &ImageBuffer,
    objects: Vec<SceneObject>,
    detections: Detections,
    params: &IsolationParams,
) -> Result<Isolation> {
    let (plate, holes) = extract_background(image, &objects, params.hole_dilation)?;
    Ok(Isolation {
        scene: Scene::new(plate, objects)?,
        holes,
        detections,
    })
}

/// The background plate is the image itself; the holes are the union of
/// all object masks placed at their origins, dilated by `hole_dilation`.
pub fn extract_background(
    image: &ImageBuffer,
    objects: &[SceneObject],
    hole_dilation: u32,
) -> Result<(ImageBuffer, BinaryMask)> {
    let (w, h) = image.dimensions();
    let mut holes = BinaryMask::empty(w, h)?;
    for o in objects {
        holes.paste_union(&o.mask, o.origin);
    }
    if hole_dilation > 0 {
        holes = morph(&holes, MorphKind::Dilate, hole_dilation)?;
    }
    Ok((image.clone(), holes))
}

/// Pixel-free description of a scene, stored as `scene.json` and served
/// to the editor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDoc {
    pub canvas: [u32; 2],
    pub objects: Vec<ObjectDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectDoc {
    pub id: u32,
    #[serde(rename = "class")]
    pub class_label: String,
    pub confidence: f64,
    pub origin: [i64; 2],
    pub size: [u32; 2],
    pub z_layer: i32,
    pub scale: f64,
    pub visible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub provenance: Provenance,
}

impl SceneDoc {
    pub fn of(scene: &Scene) -> Self {
        Self {
            canvas: [scene.canvas.0, scene.canvas.1],
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectDoc {
                    id: o.id,
                    class_label: o.class_label.clone(),
                    confidence: o.confidence,
                    origin: [o.origin.0, o.origin.1],
                    size: [o.crop.width(), o.crop.height()],
                    z_layer: o.z_layer,
                    scale: o.scale,
                    visible: o.visible,
                    prompt: o.prompt.clone(),
                    provenance: o.provenance.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("scene doc serializes")
    }
}

pub const SCENE_FILE: &str = "scene.json";

pub fn crop_name(id: u32, kind: &str) -> String {
    format!("{id}_{kind}.png")
}

/// Scene as stage artifacts: `scene.json`, `<id>_<crop_kind>.png`,
/// `<id>_mask.png` and the background under `background_name`.
pub fn scene_to_artifacts(scene: &Scene, crop_kind: &str, background_name: &str) -> Result<Vec<Artifact>> {
    let mut out = vec![Artifact::new(SCENE_FILE, SceneDoc::of(scene).to_json_bytes())];
    for o in &scene.objects {
        out.push(Artifact::new(crop_name(o.id, crop_kind), o.crop.encode_png()?));
        out.push(Artifact::new(crop_name(o.id, "mask"), o.mask.encode_png()?));
    }
    out.push(Artifact::new(background_name, scene.background.encode_png()?));
    Ok(out)
}

/// Inverse of [`scene_to_artifacts`].
pub fn scene_from_artifacts(artifacts: &[Artifact], crop_kind: &str, background_name: &str) -> Result<Scene> {
    let doc: SceneDoc = serde_json::from_slice(artifact(artifacts, SCENE_FILE)?)
        .map_err(|e| Error::Protocol(format!("{SCENE_FILE}: {e}")))?;
    let background = ImageBuffer::decode_png(artifact(artifacts, background_name)?)?;
    let mut objects = Vec::with_capacity(doc.objects.len());
    for d in doc.objects {
        let crop = ImageBuffer::decode_png(artifact(artifacts, &crop_name(d.id, crop_kind))?)?;
        let mask = BinaryMask::decode_png(artifact(artifacts, &crop_name(d.id, "mask"))?)?;
        if crop.dimensions() != (d.size[0], d.size[1]) {
            return Err(Error::Protocol(format!("object {} size disagrees with {SCENE_FILE}", d.id)));
        }
        let mut o = SceneObject::new(d.id, d.class_label, d.confidence, crop, mask, (d.origin[0], d.origin[1]))?;
        o.z_layer = d.z_layer;
        o.scale = d.scale;
        o.visible = d.visible;
        o.prompt = d.prompt;
        o.provenance = d.provenance;
        objects.push(o);
    }
    let scene = Scene::new(background, objects)?;
    if scene.canvas != (doc.canvas[0], doc.canvas[1]) {
        return Err(Error::Protocol(format!("canvas disagrees with {SCENE_FILE}")));
    }
    Ok(scene)
}

/// Per-object crops of a canvas-level damage mask, keyed by object id.
pub fn damage_crops(scene: &Scene, damage: &BinaryMask) -> Result<BTreeMap<u32, BinaryMask>> {
    scene
        .objects
        .iter()
        .map(|o| Ok((o.id, damage.crop(o.canvas_bbox()?)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{FixtureBackend, ObjectRef};

    fn bb(x: u32, y: u32, w: u32, h: u32) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    struct Boxes(Vec<DetectedObject>);

    impl Detector for Boxes {
        fn backend_id(&self) -> &str {
            "boxes"
        }
        fn detect_raw(&self, _: &ImageBuffer, _: f64, _: &CallContext) -> Result<Vec<DetectedObject>> {
            Ok(self.0.clone())
        }
    }

    impl Segmenter for Boxes {
        fn backend_id(&self) -> &str {
            "boxes"
        }
        fn segment_raw(&self, _: &ImageBuffer, _: f64, _: &CallContext) -> Result<Vec<DetectedObject>> {
            Ok(self.0.clone())
        }
    }

    /// Background remover that crops a canvas-level mask at the object's origin.
    struct CanvasMasks(Vec<BinaryMask>);

    impl BackgroundRemover for CanvasMasks {
        fn backend_id(&self) -> &str {
            "canvas-masks"
        }
        fn remove_background_raw(&self, crop: &ImageBuffer, ctx: &CallContext) -> Result<BinaryMask> {
            let ObjectRef { id, origin } = ctx.object.unwrap();
            self.0[id as usize].crop(bb(origin.0, origin.1, crop.width(), crop.height()))
        }
    }

    fn gradient(w: u32, h: u32) -> ImageBuffer {
        let px = (0..w * h)
            .flat_map(|i| [(i % 251) as u8, (i / 7 % 256) as u8, 77, 255])
            .collect();
        ImageBuffer::new(w, h, px).unwrap()
    }

    fn params() -> IsolationParams {
        IsolationParams {
            min_confidence: 0.25,
            instance_pad: 4,
            hole_dilation: 1,
        }
    }

    fn det(class: &str, conf: f64, mask: &BinaryMask) -> DetectedObject {
        DetectedObject {
            class_label: class.into(),
            confidence: conf,
            bbox: mask.tight_bbox().unwrap(),
            mask: Some(mask.clone()),
        }
    }

    #[test]
    fn path1_single_zebra_full_foreground() {
        let image = gradient(40, 30);
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(
            tmp.path().join("z.fixtures.json"),
            r#"{"objects": [{"class": "zebra", "confidence": 0.91, "bbox": [10, 10, 8, 6]}]}"#,
        )
        .unwrap();
        let fx = FixtureBackend::new(tmp.path(), "fx");
        let iso = isolate_path1(&image, &fx, &fx, &params(), &CallContext::for_image("z")).unwrap();
        assert_eq!(iso.scene.objects.len(), 1);
        let o = &iso.scene.objects[0];
        assert_eq!(o.id, 0);
        assert_eq!(o.origin, (6, 6));
        assert_eq!(o.crop, image.crop(bb(6, 6, 16, 14)).unwrap());
        assert_eq!(o.mask, BinaryMask::full(16, 14).unwrap());
        assert_eq!(iso.scene.background, image);
        let expected_holes = morph(&BinaryMask::from_bbox(40, 30, bb(6, 6, 16, 14)).unwrap(), MorphKind::Dilate, 1).unwrap();
        assert_eq!(iso.holes, expected_holes);
    }

    #[test]
    fn zero_detections_give_empty_scene() {
        let image = gradient(8, 8);
        let iso = isolate_path1(&image, &Boxes(vec![]), &CanvasMasks(vec![]), &params(), &CallContext::default()).unwrap();
        assert!(iso.scene.objects.is_empty());
        assert_eq!(iso.scene.background, image);
        assert!(iso.holes.is_empty());
        let iso2 = isolate_path2(&image, &Boxes(vec![]), &params(), &CallContext::default()).unwrap();
        assert!(iso2.scene.objects.is_empty());
    }

    #[test]
    fn ids_follow_detection_order_and_threshold_drops_are_reported() {
        let image = gradient(64, 64);
        let m_a = BinaryMask::from_bbox(64, 64, bb(40, 5, 6, 6)).unwrap();
        let m_b = BinaryMask::from_bbox(64, 64, bb(5, 30, 9, 9)).unwrap();
        let m_c = BinaryMask::from_bbox(64, 64, bb(20, 20, 4, 4)).unwrap();
        let dets = vec![det("dog", 0.6, &m_a), det("horse", 0.95, &m_b), det("cat", 0.1, &m_c)];
        let iso = isolate_path1(
            &image,
            &Boxes(dets),
            &CanvasMasks(vec![m_b.clone(), m_a.clone()]),
            &params(),
            &CallContext::default(),
        )
        .unwrap();
        let labels: Vec<_> = iso.scene.objects.iter().map(|o| (o.id, o.class_label.as_str())).collect();
        assert_eq!(labels, [(0, "horse"), (1, "dog")]);
        assert_eq!(iso.detections.dropped.len(), 1);
        assert_eq!(iso.detections.dropped[0].class_label, "cat");
    }

    #[test]
    fn path2_mask_is_cropped_fixture_mask() {
        let image = gradient(64, 64);
        let mut m = BinaryMask::from_bbox(64, 64, bb(20, 30, 10, 10)).unwrap();
        m.set(20, 30, false);
        let d = det("zebra", 0.9, &m);
        let iso = isolate_path2(&image, &Boxes(vec![d]), &params(), &CallContext::default()).unwrap();
        let o = &iso.scene.objects[0];
        assert_eq!(o.origin, (16, 26));
        assert_eq!(o.mask, m.crop(bb(16, 26, 18, 18)).unwrap());
        assert!(!o.mask.get(4, 4));
        assert!(o.mask.get(5, 4));
    }

    #[test]
    fn paths_agree_when_masks_agree() {
        let image = gradient(64, 48);
        let m0 = BinaryMask::from_bbox(64, 48, bb(3, 4, 12, 9)).unwrap();
        let mut m1 = BinaryMask::from_bbox(64, 48, bb(30, 20, 15, 15)).unwrap();
        m1.set(30, 20, false);
        let dets = vec![det("zebra", 0.9, &m0), det("horse", 0.7, &m1)];
        let p1 = isolate_path1(
            &image,
            &Boxes(dets.clone()),
            &CanvasMasks(vec![m0.clone(), m1.clone()]),
            &params(),
            &CallContext::default(),
        )
        .unwrap();
        let p2 = isolate_path2(&image, &Boxes(dets), &params(), &CallContext::default()).unwrap();
        assert_eq!(p1.scene, p2.scene);
        assert_eq!(p1.holes, p2.holes);
    }

    #[test]
    fn extract_background_examples() {
        let image = gradient(10, 10);
        let (plate, holes) = extract_background(&image, &[], 2).unwrap();
        assert_eq!(plate, image);
        assert!(holes.is_empty());

        let whole = SceneObject::new(0, "x", 1.0, image.clone(), BinaryMask::full(10, 10).unwrap(), (0, 0)).unwrap();
        let (_, holes) = extract_background(&image, &[whole], 0).unwrap();
        assert_eq!(holes, BinaryMask::full(10, 10).unwrap());

        let a = SceneObject::new(0, "a", 1.0, image.crop(bb(0, 0, 2, 2)).unwrap(), BinaryMask::new(2, 2, vec![255, 0, 0, 255]).unwrap(), (1, 1)).unwrap();
        let b = SceneObject::new(1, "b", 1.0, image.crop(bb(0, 0, 3, 1)).unwrap(), BinaryMask::full(3, 1).unwrap(), (6, 8)).unwrap();
        let (_, holes) = extract_background(&image, &[a, b], 0).unwrap();
        let mut expected = BinaryMask::empty(10, 10).unwrap();
        for (x, y) in [(1, 1), (2, 2), (6, 8), (7, 8), (8, 8)] {
            expected.set(x, y, true);
        }
        assert_eq!(holes, expected);
    }

    #[test]
    fn scene_artifacts_round_trip() {
        let image = gradient(20, 20);
        let m = BinaryMask::from_bbox(20, 20, bb(2, 2, 5, 5)).unwrap();
        let iso = isolate_path2(&image, &Boxes(vec![det("cat", 0.5, &m)]), &params(), &CallContext::default()).unwrap();
        let mut scene = iso.scene;
        scene.objects[0].z_layer = 3;
        scene.objects[0].prompt = Some("a cat".into());
        let arts = scene_to_artifacts(&scene, "crop", "plate.png").unwrap();
        assert_eq!(scene_from_artifacts(&arts, "crop", "plate.png").unwrap(), scene);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let image = gradient(4, 4);
        let o = SceneObject::new(0, "a", 1.0, gradient(1, 1), BinaryMask::full(1, 1).unwrap(), (0, 0)).unwrap();
        assert!(Scene::new(image, vec![o.clone(), o]).is_err());
    }
}
