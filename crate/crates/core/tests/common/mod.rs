//! Fixture datasets shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::path::Path;

use restorelab_core::config::{parse_config, PipelineConfig};
use restorelab_core::geometry::{BinaryMask, ImageBuffer};
use serde_json::{json, Value};

/// A solid disk painted into the fixture image.
#[derive(Debug, Clone, Copy)]
pub struct Disk {
    pub class: &'static str,
    pub confidence: f64,
    pub center: (i64, i64),
    pub radius: i64,
    pub color: [u8; 4],
}

pub fn textured(w: u32, h: u32) -> ImageBuffer {
    let mut px = Vec::with_capacity((w * h * 4) as usize);
    for y in 0..h {
        for x in 0..w {
            px.extend_from_slice(&[((x * 7 + y * 3) % 256) as u8, ((x * 2 + y * 5) % 256) as u8, ((x ^ y) % 256) as u8, 255]);
        }
    }
    ImageBuffer::new(w, h, px).unwrap()
}

pub fn disk_mask(w: u32, h: u32, d: &Disk) -> BinaryMask {
    let mut m = BinaryMask::empty(w, h).unwrap();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as i64 - d.center.0, y as i64 - d.center.1);
            if dx * dx + dy * dy <= d.radius * d.radius {
                m.set(x, y, true);
            }
        }
    }
    m
}

pub fn paint(image: &mut ImageBuffer, mask: &BinaryMask, color: [u8; 4]) {
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(x, y) {
                image.set_pixel(x, y, color);
            }
        }
    }
}

fn object_json(d: &Disk, bbox: [u32; 4], mask_file: Option<&str>) -> Value {
    let mut v = json!({"class": d.class, "confidence": d.confidence, "bbox": bbox});
    if let Some(f) = mask_file {
        v["mask_file"] = json!(f);
    }
    v
}

/// Write `<stem>.png`, one `<stem>_<i>_mask.png` per disk and
/// `<stem>.fixtures.json` into `dir`. Disks must be listed in descending
/// confidence so that index `i` is the object id. `scores` maps variant
/// names to `(class, confidence)` detections; scripted score entries reuse
/// the first disk's box.
pub fn write_fixture(dir: &Path, stem: &str, w: u32, h: u32, disks: &[Disk], scores: &[(&str, &[(&str, f64)])]) -> ImageBuffer {
    let mut image = textured(w, h);
    let mut objects = Vec::new();
    let mut background_masks = serde_json::Map::new();
    let mut boxes = Vec::new();
    for (i, d) in disks.iter().enumerate() {
        let mask = disk_mask(w, h, d);
        paint(&mut image, &mask, d.color);
        let file = format!("{stem}_{i}_mask.png");
        mask.save(&dir.join(&file)).unwrap();
        let b = mask.tight_bbox().unwrap();
        let bbox = [b.x, b.y, b.w, b.h];
        boxes.push(bbox);
        objects.push(object_json(d, bbox, Some(&file)));
        background_masks.insert(i.to_string(), json!(file));
    }
    let mut score_map = serde_json::Map::new();
    for (variant, dets) in scores {
        let list: Vec<Value> = dets
            .iter()
            .map(|(class, c)| json!({"class": class, "confidence": c, "bbox": boxes.first().copied().unwrap_or([0, 0, 1, 1])}))
            .collect();
        score_map.insert(variant.to_string(), json!(list));
    }
    image.save(&dir.join(format!("{stem}.png"))).unwrap();
    let doc = json!({"objects": objects, "background_masks": background_masks, "scores": score_map});
    std::fs::write(dir.join(format!("{stem}.fixtures.json")), serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    image
}

/// Fixture-backed config for either isolation path.
pub fn fixture_config(path: &str, fixtures: &Path, run_root: &Path) -> PipelineConfig {
    let f = fixtures.display().to_string();
    let doc = json!({
        "isolation_path": path,
        "backends": {
            "detector": {"fixture": f},
            "segmenter": {"fixture": f},
            "background_remover": {"fixture": f},
            "inpainter": {"fixture": f},
        },
        "eval": {"scorer": {"fixture": f}},
        "run_root": run_root.display().to_string(),
    });
    parse_config(&doc.to_string()).unwrap()
}

/// The two-object 512x512 scene used by the determinism and path checks.
pub fn two_disks() -> [Disk; 2] {
    [
        Disk { class: "zebra", confidence: 0.92, center: (180, 200), radius: 70, color: [240, 240, 240, 255] },
        Disk { class: "horse", confidence: 0.81, center: (330, 300), radius: 60, color: [120, 70, 30, 255] },
    ]
}
