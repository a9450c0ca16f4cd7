#![allow(dead_code)]

use std::path::{Path, PathBuf};

use restorelab_core::geometry::{BinaryMask, ImageBuffer};
use serde_json::json;

/// Two disjoint disks on a textured 128x96 canvas: a fixture image, its
/// masks and annotations in `dir`, plus a config file next to them.
pub fn fixture_dataset(dir: &Path, stem: &str) -> PathBuf {
    let (w, h) = (128u32, 96u32);
    let mut px = Vec::new();
    for y in 0..h {
        for x in 0..w {
            px.extend_from_slice(&[((x * 7 + y * 3) % 256) as u8, ((x * 2 + y * 5) % 256) as u8, ((x ^ y) % 256) as u8, 255]);
        }
    }
    let mut image = ImageBuffer::new(w, h, px).unwrap();
    let disks = [("zebra", 0.9, (36i64, 40i64), 16i64, [250u8, 250, 250, 255]), ("horse", 0.7, (90, 56), 14, [120, 70, 30, 255])];
    let mut objects = Vec::new();
    for (i, (class, conf, c, r, color)) in disks.iter().enumerate() {
        let mut m = BinaryMask::empty(w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as i64 - c.0, y as i64 - c.1);
                if dx * dx + dy * dy <= r * r {
                    m.set(x, y, true);
                    image.set_pixel(x, y, *color);
                }
            }
        }
        let file = format!("{stem}_{i}_mask.png");
        m.save(&dir.join(&file)).unwrap();
        let b = m.tight_bbox().unwrap();
        objects.push(json!({"class": class, "confidence": conf, "bbox": [b.x, b.y, b.w, b.h], "mask_file": file}));
    }
    image.save(&dir.join(format!("{stem}.png"))).unwrap();
    let doc = json!({"objects": objects, "scores": {
        "distorted": [{"class": "zebra", "confidence": 0.6, "bbox": objects[0]["bbox"]}],
        "pipeline": [{"class": "zebra", "confidence": 0.8, "bbox": objects[0]["bbox"]}],
        "direct": [{"class": "zebra", "confidence": 0.7, "bbox": objects[0]["bbox"]}],
    }});
    std::fs::write(dir.join(format!("{stem}.fixtures.json")), doc.to_string()).unwrap();
    dir.join(format!("{stem}.png"))
}

/// Fixture-backed config file pointing at `fixtures`.
pub fn write_config(path: &Path, fixtures: &Path) {
    let f = fixtures.display().to_string();
    let doc = json!({
        "isolation_path": "PATH2",
        "backends": {"segmenter": {"fixture": f}, "inpainter": {"fixture": f}},
        "eval": {"scorer": {"fixture": f}},
    });
    std::fs::write(path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
}
