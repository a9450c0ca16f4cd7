//! Layered scene edits and the z-ordered renderer.
//!
//! Higher `z_layer` means nearer the camera: objects are drawn in
//! ascending `(z_layer, id)` order over the background, so nearer layers
//! occlude farther ones. With a depth scale factor other than 1.0 each
//! object is additionally scaled by `factor^(-z_layer)` about its center.

use serde::{Deserialize, Serialize};

use crate::backends::Inpainter;
use crate::error::{invalid, Error, Result};
use crate::geometry::ImageBuffer;
use crate::isolate::{Scene, SceneObject};
use crate::restore::{tune_object, RestoreParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneEdit {
    Move { object_id: u32, dx: i64, dy: i64, dz: i32 },
    Remove { object_id: u32 },
    SetVisibility { object_id: u32, visible: bool },
    SetScale { object_id: u32, scale: f64 },
    Tune { object_id: u32, prompt: String },
}

impl SceneEdit {
    pub fn object_id(&self) -> u32 {
        match self {
            SceneEdit::Move { object_id, .. }
            | SceneEdit::Remove { object_id }
            | SceneEdit::SetVisibility { object_id, .. }
            | SceneEdit::SetScale { object_id, .. }
            | SceneEdit::Tune { object_id, .. } => *object_id,
        }
    }
}

/// Parse an edit script: a JSON list of edits.
pub fn parse_edit_script(text: &str) -> Result<Vec<SceneEdit>> {
    serde_json::from_str(text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => Error::Validation(e.to_string()),
        _ => Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        },
    })
}

/// The inpainter and parameters a `tune` edit needs.
#[derive(Clone, Copy)]
pub struct Tuner<'a> {
    pub inpainter: &'a dyn Inpainter,
    pub params: &'a RestoreParams,
}

/// Apply one edit, returning a new scene; `scene` itself is untouched.
pub fn apply_edit(scene: &Scene, edit: &SceneEdit, tuner: Option<Tuner<'_>>) -> Result<Scene> {
    let idx = scene.object_index(edit.object_id())?;
    let mut out = scene.clone();
    match edit {
        SceneEdit::Move { dx, dy, dz, .. } => {
            let o = &mut out.objects[idx];
            o.origin = (
                o.origin.0.checked_add(*dx).ok_or_else(|| invalid("x overflow"))?,
                o.origin.1.checked_add(*dy).ok_or_else(|| invalid("y overflow"))?,
            );
            o.z_layer = o.z_layer.checked_add(*dz).ok_or_else(|| invalid("z overflow"))?;
        }
        SceneEdit::Remove { .. } => {
            out.objects.remove(idx);
        }
        SceneEdit::SetVisibility { visible, .. } => out.objects[idx].visible = *visible,
        SceneEdit::SetScale { scale, .. } => {
            if !(scale.is_finite() && *scale > 0.0) {
                return Err(invalid(format!("scale must be > 0, got {scale}")));
            }
            out.objects[idx].scale = *scale;
        }
        SceneEdit::Tune { prompt, .. } => {
            let t = tuner.ok_or_else(|| invalid("tune edit needs an inpainter"))?;
            out.objects[idx] = tune_object(&scene.objects[idx], prompt, t.inpainter, t.params)?;
        }
    }
    Ok(out)
}

pub fn apply_edits(scene: &Scene, edits: &[SceneEdit], tuner: Option<Tuner<'_>>) -> Result<Scene> {
    edits
        .iter()
        .try_fold(scene.clone(), |s, e| apply_edit(&s, e, tuner))
}

/// Effective draw scale of an object.
pub fn effective_scale(obj: &SceneObject, depth_scale_factor: f64) -> f64 {
    if depth_scale_factor == 1.0 {
        obj.scale
    } else {
        obj.scale * depth_scale_factor.powi(-obj.z_layer)
    }
}

/// Render the scene over its background.
pub fn render(scene: &Scene, depth_scale_factor: f64) -> ImageBuffer {
    let mut canvas = scene.background.clone();
    let mut order: Vec<&SceneObject> = scene.objects.iter().filter(|o| o.visible).collect();
    order.sort_by_key(|o| (o.z_layer, o.id));
    for o in order {
        let s = effective_scale(o, depth_scale_factor);
        if s == 1.0 {
            blit(&mut canvas, o);
        } else {
            blit_scaled(&mut canvas, o, s);
        }
    }
    canvas
}

/// Source-over of one RGBA sample with alpha `sa` onto `dst`.
fn over(dst: &mut [u8], src: [u8; 4], sa: u8) {
    match sa {
        0 => {}
        255 => {
            dst[..3].copy_from_slice(&src[..3]);
            dst[3] = 255;
        }
        _ => {
            let a_s = sa as f64 / 255.0;
            let a_d = dst[3] as f64 / 255.0;
            let a_o = a_s + a_d * (1.0 - a_s);
            for c in 0..3 {
                let v = (src[c] as f64 * a_s + dst[c] as f64 * a_d * (1.0 - a_s)) / a_o;
                dst[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            dst[3] = (a_o * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
}

fn blit(canvas: &mut ImageBuffer, o: &SceneObject) {
    let (cw, ch) = (canvas.width() as i64, canvas.height() as i64);
    let (w, h) = o.size();
    let width = cw as usize;
    let px = canvas.pixels_mut();
    for y in 0..h {
        let ty = o.origin.1 + y as i64;
        if ty < 0 || ty >= ch {
            continue;
        }
        for x in 0..w {
            let tx = o.origin.0 + x as i64;
            if tx < 0 || tx >= cw || !o.mask.get(x, y) {
                continue;
            }
            let src = o.crop.pixel(x, y);
            let off = (ty as usize * width + tx as usize) * 4;
            over(&mut px[off..off + 4], src, src[3]);
        }
    }
}

/// Bilinear resampling about the crop center. The mask is resampled the
/// same way and re-thresholded at 128.
fn blit_scaled(canvas: &mut ImageBuffer, o: &SceneObject, s: f64) {
    let (cw, ch) = (canvas.width() as i64, canvas.height() as i64);
    let (w, h) = o.size();
    let (wf, hf) = (w as f64, h as f64);
    let cx = o.origin.0 as f64 + wf / 2.0;
    let cy = o.origin.1 as f64 + hf / 2.0;
    let x0 = ((cx - s * wf / 2.0).floor() as i64).max(0);
    let x1 = ((cx + s * wf / 2.0).ceil() as i64).min(cw);
    let y0 = ((cy - s * hf / 2.0).floor() as i64).max(0);
    let y1 = ((cy + s * hf / 2.0).ceil() as i64).min(ch);
    let width = cw as usize;

    let sample = |u: f64, v: f64| -> ([f64; 4], f64) {
        let (fx0, fy0) = (u.floor(), v.floor());
        let (tx, ty) = (u - fx0, v - fy0);
        let clamp_x = |x: f64| (x.max(0.0) as u32).min(w - 1);
        let clamp_y = |y: f64| (y.max(0.0) as u32).min(h - 1);
        let (xa, xb) = (clamp_x(fx0), clamp_x(fx0 + 1.0));
        let (ya, yb) = (clamp_y(fy0), clamp_y(fy0 + 1.0));
        let mut rgba = [0f64; 4];
        let mut m = 0f64;
        for (sx, sy, wgt) in [
            (xa, ya, (1.0 - tx) * (1.0 - ty)),
            (xb, ya, tx * (1.0 - ty)),
            (xa, yb, (1.0 - tx) * ty),
            (xb, yb, tx * ty),
        ] {
            let p = o.crop.pixel(sx, sy);
            for c in 0..4 {
                rgba[c] += p[c] as f64 * wgt;
            }
            if o.mask.get(sx, sy) {
                m += 255.0 * wgt;
            }
        }
        (rgba, m)
    };

    let px = canvas.pixels_mut();
    for ty in y0..y1 {
        let v = (ty as f64 + 0.5 - cy) / s + hf / 2.0 - 0.5;
        if v < -0.5 || v >= hf - 0.5 {
            continue;
        }
        for tx in x0..x1 {
            let u = (tx as f64 + 0.5 - cx) / s + wf / 2.0 - 0.5;
            if u < -0.5 || u >= wf - 0.5 {
                continue;
            }
            let (rgba, m) = sample(u, v);
            if m < 128.0 {
                continue;
            }
            let src = rgba.map(|c| c.round().clamp(0.0, 255.0) as u8);
            let off = (ty as usize * width + tx as usize) * 4;
            over(&mut px[off..off + 4], src, src[3]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::FixtureInpainter;
    use crate::geometry::{BBox, BinaryMask};

    fn solid(id: u32, rgba: [u8; 4], w: u32, h: u32, origin: (i64, i64)) -> SceneObject {
        SceneObject::new(
            id,
            "thing",
            0.9,
            ImageBuffer::filled(w, h, rgba).unwrap(),
            BinaryMask::full(w, h).unwrap(),
            origin,
        )
        .unwrap()
    }

    fn bg() -> ImageBuffer {
        ImageBuffer::filled(16, 16, [20, 20, 20, 255]).unwrap()
    }

    #[test]
    fn background_only_is_identity() {
        let scene = Scene::new(bg(), vec![]).unwrap();
        assert_eq!(render(&scene, 1.0), bg());
        assert_eq!(render(&scene, 0.5), bg());
    }

    #[test]
    fn full_cover_overwrites() {
        let o = solid(0, [1, 2, 3, 255], 16, 16, (0, 0));
        let crop = o.crop.clone();
        let scene = Scene::new(bg(), vec![o]).unwrap();
        assert_eq!(render(&scene, 1.0), crop);
    }

    #[test]
    fn higher_z_on_top() {
        let mut red = solid(0, [255, 0, 0, 255], 6, 6, (2, 2));
        red.z_layer = 1;
        let mut blue = solid(1, [0, 0, 255, 255], 6, 6, (4, 4));
        blue.z_layer = 2;
        let out = render(&Scene::new(bg(), vec![blue.clone(), red.clone()]).unwrap(), 1.0);
        assert_eq!(out.pixel(5, 5), [0, 0, 255, 255]);
        assert_eq!(out.pixel(2, 2), [255, 0, 0, 255]);

        red.z_layer = 3;
        let out = render(&Scene::new(bg(), vec![blue, red]).unwrap(), 1.0);
        assert_eq!(out.pixel(5, 5), [255, 0, 0, 255]);
    }

    #[test]
    fn equal_z_ties_broken_by_id() {
        let a = solid(0, [255, 0, 0, 255], 6, 6, (2, 2));
        let b = solid(1, [0, 255, 0, 255], 6, 6, (4, 4));
        let out = render(&Scene::new(bg(), vec![b, a]).unwrap(), 1.0);
        assert_eq!(out.pixel(5, 5), [0, 255, 0, 255]);
    }

    #[test]
    fn mask_limits_drawing_and_offcanvas_clips() {
        let mut o = solid(0, [200, 100, 0, 255], 4, 4, (-2, 14));
        o.mask = BinaryMask::from_bbox(4, 4, BBox::new(2, 0, 2, 2).unwrap()).unwrap();
        let out = render(&Scene::new(bg(), vec![o]).unwrap(), 1.0);
        let changed: Vec<_> = (0..16)
            .flat_map(|y| (0..16).map(move |x| (x, y)))
            .filter(|&(x, y)| out.pixel(x, y) != [20, 20, 20, 255])
            .collect();
        assert_eq!(changed, [(0, 14), (1, 14), (0, 15), (1, 15)]);
    }

    #[test]
    fn partial_alpha_blends() {
        let o = solid(0, [255, 255, 255, 128], 1, 1, (0, 0));
        let out = render(&Scene::new(bg(), vec![o]).unwrap(), 1.0);
        // 255*0.50196 + 20*0.49804 = 137.96
        assert_eq!(out.pixel(0, 0), [138, 138, 138, 255]);
    }

    #[test]
    fn depth_scaling_shrinks_far_layers() {
        let mut o = solid(0, [255, 0, 0, 255], 8, 8, (4, 4));
        o.z_layer = -1;
        let scene = Scene::new(bg(), vec![o]).unwrap();
        // factor 0.5, z -1 -> scale 0.5: the 8x8 square becomes 4x4 about (8, 8)
        let out = render(&scene, 0.5);
        let red: Vec<_> = (0..16)
            .flat_map(|y| (0..16).map(move |x| (x, y)))
            .filter(|&(x, y)| out.pixel(x, y) == [255, 0, 0, 255])
            .collect();
        assert_eq!(red.len(), 16);
        assert!(red.iter().all(|&(x, y)| (6..10).contains(&x) && (6..10).contains(&y)));
        // doubling
        let mut big = scene.clone();
        big.objects[0].scale = 4.0;
        let out = render(&big, 0.5);
        assert!((0..16).all(|x| out.pixel(x, 0) == [255, 0, 0, 255]));
    }

    #[test]
    fn edits() {
        let scene = Scene::new(bg(), vec![solid(0, [1, 1, 1, 255], 2, 2, (3, 3)), solid(1, [2, 2, 2, 255], 2, 2, (5, 5))]).unwrap();
        let same = apply_edit(&scene, &SceneEdit::Move { object_id: 0, dx: 0, dy: 0, dz: 0 }, None).unwrap();
        assert_eq!(same, scene);

        let moved = apply_edit(&scene, &SceneEdit::Move { object_id: 0, dx: 10, dy: 0, dz: 1 }, None).unwrap();
        assert_eq!(moved.objects[0].origin, (13, 3));
        assert_eq!(moved.objects[0].z_layer, 1);
        assert_eq!(moved.objects[1], scene.objects[1]);
        assert_eq!(scene.objects[0].origin, (3, 3));

        assert!(matches!(
            apply_edit(&scene, &SceneEdit::Remove { object_id: 7 }, None),
            Err(Error::NotFound(_))
        ));
        let removed = apply_edit(&scene, &SceneEdit::Remove { object_id: 0 }, None).unwrap();
        assert_eq!(removed.objects.len(), 1);
        assert_eq!(removed.objects[0].id, 1);

        assert!(matches!(
            apply_edit(&scene, &SceneEdit::SetScale { object_id: 1, scale: 0.0 }, None),
            Err(Error::InvalidArgument(_))
        ));
        let hidden = apply_edit(&scene, &SceneEdit::SetVisibility { object_id: 1, visible: false }, None).unwrap();
        assert!(!hidden.objects[1].visible);

        let tune = SceneEdit::Tune { object_id: 0, prompt: "a red cube".into() };
        assert!(apply_edit(&scene, &tune, None).is_err());
        let fx = FixtureInpainter::new("fx");
        let params = RestoreParams {
            prompt_template: "{class}".into(),
            seed: 0,
            steps: 1,
            guidance: 0.0,
            region_dilation: 0,
        };
        let tuned = apply_edit(&scene, &tune, Some(Tuner { inpainter: &fx, params: &params })).unwrap();
        assert_eq!(tuned.objects[0].prompt.as_deref(), Some("a red cube"));
    }

    #[test]
    fn edit_script_parsing() {
        let edits = parse_edit_script(
            r#"[{"op": "move", "object_id": 0, "dx": 10, "dy": 0, "dz": 1},
                {"op": "set_visibility", "object_id": 1, "visible": false},
                {"op": "remove", "object_id": 2},
                {"op": "set_scale", "object_id": 0, "scale": 1.5},
                {"op": "tune", "object_id": 0, "prompt": "a zebra"}]"#,
        )
        .unwrap();
        assert_eq!(edits.len(), 5);
        assert_eq!(edits[0], SceneEdit::Move { object_id: 0, dx: 10, dy: 0, dz: 1 });
        assert!(parse_edit_script(r#"[{"op": "remove", "object_id": 2, "dx": 1}]"#).is_err());
        assert!(parse_edit_script(r#"[{"op": "move", "object_id": 2}]"#).is_err());
        assert!(matches!(parse_edit_script("[{"), Err(Error::Parse { .. })));
    }
}
