//! Raster types shared by every stage: RGBA images, binary masks, boxes,
//! and the mask morphology used to refine restoration regions.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Row-major RGBA image, 8 bits per channel.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("image dimensions must be >= 1, got {width}x{height}")));
        }
        let expected = width as usize * height as usize * 4;
        if pixels.len() != expected {
            return Err(invalid(format!(
                "pixel payload has {} bytes, expected {expected} for {width}x{height} RGBA",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgba: [u8; 4]) -> Result<Self> {
        let n = width as usize * height as usize;
        Self::new(width, height, rgba.repeat(n))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 4
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 4] {
        let o = self.offset(x, y);
        [
            self.pixels[o],
            self.pixels[o + 1],
            self.pixels[o + 2],
            self.pixels[o + 3],
        ]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgba: [u8; 4]) {
        let o = self.offset(x, y);
        self.pixels[o..o + 4].copy_from_slice(&rgba);
    }

    /// Copy out the region covered by `bbox`, which must lie inside the image.
    pub fn crop(&self, bbox: BBox) -> Result<ImageBuffer> {
        bbox.check_within(self.width, self.height)?;
        let mut out = Vec::with_capacity(bbox.w as usize * bbox.h as usize * 4);
        for y in bbox.y..bbox.y + bbox.h {
            let start = self.offset(bbox.x, y);
            out.extend_from_slice(&self.pixels[start..start + bbox.w as usize * 4]);
        }
        ImageBuffer::new(bbox.w, bbox.h, out)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img = RgbaImage::from_raw(self.width, self.height, self.pixels.clone())
            .ok_or_else(|| Error::Codec("pixel buffer does not match dimensions".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Codec(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Decode any PNG (gray, RGB, RGBA, 16-bit) into 8-bit RGBA.
    pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| Error::Codec(e.to_string()))?
            .to_rgba8();
        let (w, h) = img.dimensions();
        ImageBuffer::new(w, h, img.into_raw())
    }

    pub fn load(path: &Path) -> Result<ImageBuffer> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))
    }
}

/// Row-major single-channel selection mask; every sample is 0 or 255.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    values: Vec<u8>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("set", &self.count_set())
            .finish()
    }
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("mask dimensions must be >= 1, got {width}x{height}")));
        }
        if values.len() != width as usize * height as usize {
            return Err(invalid(format!(
                "mask payload has {} samples, expected {}",
                values.len(),
                width as usize * height as usize
            )));
        }
        if let Some(bad) = values.iter().find(|&&v| v != 0 && v != 255) {
            return Err(invalid(format!("mask sample {bad} is not 0 or 255")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// Build a mask from grayscale samples, thresholding at 128.
    pub fn from_gray(width: u32, height: u32, gray: &[u8]) -> Result<Self> {
        let values = gray.iter().map(|&v| if v >= 128 { 255 } else { 0 }).collect();
        Self::new(width, height, values)
    }

    pub fn empty(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, vec![0; width as usize * height as usize])
    }

    pub fn full(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, vec![255; width as usize * height as usize])
    }

    /// Mask with `bbox` (clipped to the mask) set.
    pub fn from_bbox(width: u32, height: u32, bbox: BBox) -> Result<Self> {
        let mut m = Self::empty(width, height)?;
        for y in bbox.y..(bbox.y + bbox.h).min(height) {
            for x in bbox.x..(bbox.x + bbox.w).min(width) {
                m.set(x, y, true);
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.values[y as usize * self.width as usize + x as usize] != 0
    }

    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        let w = self.width as usize;
        self.values[y as usize * w + x as usize] = if on { 255 } else { 0 };
    }

    pub fn count_set(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn crop(&self, bbox: BBox) -> Result<BinaryMask> {
        bbox.check_within(self.width, self.height)?;
        let w = self.width as usize;
        let mut out = Vec::with_capacity(bbox.w as usize * bbox.h as usize);
        for y in bbox.y..bbox.y + bbox.h {
            let start = y as usize * w + bbox.x as usize;
            out.extend_from_slice(&self.values[start..start + bbox.w as usize]);
        }
        BinaryMask::new(bbox.w, bbox.h, out)
    }

    /// Smallest box containing every set sample, or `None` for an empty mask.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != u32::MAX).then(|| BBox {
            x: x0,
            y: y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
        })
    }

    fn check_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.dimensions() != other.dimensions() {
            return Err(invalid(format!(
                "mask dimensions differ: {:?} vs {:?}",
                self.dimensions(),
                other.dimensions()
            )));
        }
        Ok(())
    }

    pub fn intersect(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_dims(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a & b)
            .collect();
        BinaryMask::new(self.width, self.height, values)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_dims(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a | b)
            .collect();
        BinaryMask::new(self.width, self.height, values)
    }

    /// OR `other` into this mask with its top-left corner at `origin`,
    /// clipping whatever falls outside.
    pub fn paste_union(&mut self, other: &BinaryMask, origin: (i64, i64)) {
        for y in 0..other.height {
            let ty = origin.1 + y as i64;
            if ty < 0 || ty >= self.height as i64 {
                continue;
            }
            for x in 0..other.width {
                let tx = origin.0 + x as i64;
                if tx < 0 || tx >= self.width as i64 {
                    continue;
                }
                if other.get(x, y) {
                    self.set(tx as u32, ty as u32, true);
                }
            }
        }
    }

    /// True when every set sample of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dimensions() == other.dimensions()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(&a, &b)| a == 0 || b != 0)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img = GrayImage::from_raw(self.width, self.height, self.values.clone())
            .ok_or_else(|| Error::Codec("mask buffer does not match dimensions".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Codec(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Decode a PNG as luminance and threshold it at 128.
    pub fn decode_png(bytes: &[u8]) -> Result<BinaryMask> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| Error::Codec(e.to_string()))?
            .to_luma8();
        let (w, h) = img.dimensions();
        BinaryMask::from_gray(w, h, img.as_raw())
    }

    pub fn load(path: &Path) -> Result<BinaryMask> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))
    }
}

/// Axis-aligned pixel box. Serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = String;

    fn try_from([x, y, w, h]: [u32; 4]) -> std::result::Result<Self, String> {
        if w == 0 || h == 0 {
            return Err(format!("bbox width and height must be >= 1, got {w}x{h}"));
        }
        Ok(BBox { x, y, w, h })
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self> {
        BBox::try_from([x, y, w, h]).map_err(Error::InvalidArgument)
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn is_within(&self, width: u32, height: u32) -> bool {
        self.x as u64 + self.w as u64 <= width as u64 && self.y as u64 + self.h as u64 <= height as u64
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<()> {
        if self.is_within(width, height) {
            Ok(())
        } else {
            Err(invalid(format!(
                "box {:?} exceeds {width}x{height} canvas",
                <[u32; 4]>::from(*self)
            )))
        }
    }
}

/// Grow `bbox` by `pad` on every side, clamped to the canvas.
pub fn pad_bbox(bbox: BBox, pad: u32, canvas: (u32, u32)) -> BBox {
    let (cw, ch) = canvas;
    let x0 = bbox.x.saturating_sub(pad);
    let y0 = bbox.y.saturating_sub(pad);
    let x1 = (bbox.right() as u64 + pad as u64).min(cw as u64) as u32;
    let y1 = (bbox.bottom() as u64 + pad as u64).min(ch as u64) as u32;
    BBox {
        x: x0,
        y: y0,
        w: x1.saturating_sub(x0).max(1),
        h: y1.saturating_sub(y0).max(1),
    }
}

pub fn iou(a: BBox, b: BBox) -> f64 {
    let ix = a.right().min(b.right()).saturating_sub(a.x.max(b.x)) as u64;
    let iy = a.bottom().min(b.bottom()).saturating_sub(a.y.max(b.y)) as u64;
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphKind {
    Dilate,
    Erode,
    Open,
    Close,
}

impl MorphKind {
    pub const ALL: [MorphKind; 4] = [
        MorphKind::Dilate,
        MorphKind::Erode,
        MorphKind::Open,
        MorphKind::Close,
    ];
}

/// Binary morphology with a `(2r+1)²` square structuring element.
/// Samples outside the mask count as unset.
pub fn morph(mask: &BinaryMask, kind: MorphKind, radius: u32) -> Result<BinaryMask> {
    if radius == 0 {
        return Err(invalid("morphology radius must be >= 1"));
    }
    Ok(match kind {
        MorphKind::Dilate => square_filter(mask, radius, true),
        MorphKind::Erode => square_filter(mask, radius, false),
        MorphKind::Open => square_filter(&square_filter(mask, radius, false), radius, true),
        MorphKind::Close => square_filter(&square_filter(mask, radius, true), radius, false),
    })
}

/// Separable square max (`dilate`) or min filter with zero padding.
fn square_filter(mask: &BinaryMask, radius: u32, dilate: bool) -> BinaryMask {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let r = radius as usize;
    let horizontal = sweep(&mask.values, w, h, r, dilate, 1, w);
    let values = sweep(&horizontal, h, w, r, dilate, w, 1);
    BinaryMask {
        width: mask.width,
        height: mask.height,
        values,
    }
}

/// One 1-D pass over `lines` lines of `len` samples each. `step` is the
/// stride between consecutive samples on a line, `line_stride` between lines.
fn sweep(src: &[u8], len: usize, lines: usize, r: usize, dilate: bool, step: usize, line_stride: usize) -> Vec<u8> {
    let mut out = vec![0u8; src.len()];
    let mut prefix = vec![0usize; len + 1];
    for line in 0..lines {
        let base = line * line_stride;
        for i in 0..len {
            prefix[i + 1] = prefix[i] + usize::from(src[base + i * step] != 0);
        }
        for i in 0..len {
            let set = if dilate {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(len);
                prefix[hi] - prefix[lo] > 0
            } else if i < r || i + r >= len {
                false
            } else {
                prefix[i + r + 1] - prefix[i - r] == 2 * r + 1
            };
            out[base + i * step] = if set { 255 } else { 0 };
        }
    }
    out
}

/// The part of an instance that actually gets re-synthesized: the damaged
/// part of the instance when a damage mask is known, else the whole
/// instance, grown by `dilation_radius`.
pub fn restoration_region(
    instance_mask: &BinaryMask,
    damage_mask: Option<&BinaryMask>,
    dilation_radius: u32,
) -> Result<BinaryMask> {
    let base = match damage_mask {
        Some(damage) => instance_mask.intersect(damage)?,
        None => instance_mask.clone(),
    };
    if dilation_radius == 0 {
        Ok(base)
    } else {
        morph(&base, MorphKind::Dilate, dilation_radius)
    }
}

/// Replace the alpha channel of `crop` with the mask.
pub fn mask_to_alpha(crop: &ImageBuffer, mask: &BinaryMask) -> Result<ImageBuffer> {
    if crop.dimensions() != mask.dimensions() {
        return Err(invalid(format!(
            "crop is {:?} but mask is {:?}",
            crop.dimensions(),
            mask.dimensions()
        )));
    }
    let mut out = crop.clone();
    for (px, &m) in out.pixels.chunks_exact_mut(4).zip(&mask.values) {
        px[3] = m;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x: u32, y: u32, w: u32, h: u32) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    /// Direct double loop over the square neighborhood.
    fn naive(mask: &BinaryMask, kind: MorphKind, r: u32) -> BinaryMask {
        fn pass(m: &BinaryMask, r: i64, dilate: bool) -> BinaryMask {
            let (w, h) = (m.width() as i64, m.height() as i64);
            let mut out = BinaryMask::empty(m.width(), m.height()).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let mut any = false;
                    let mut all = true;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (nx, ny) = (x + dx, y + dy);
                            let v = nx >= 0 && ny >= 0 && nx < w && ny < h && m.get(nx as u32, ny as u32);
                            any |= v;
                            all &= v;
                        }
                    }
                    out.set(x as u32, y as u32, if dilate { any } else { all });
                }
            }
            out
        }
        let r = r as i64;
        match kind {
            MorphKind::Dilate => pass(mask, r, true),
            MorphKind::Erode => pass(mask, r, false),
            MorphKind::Open => pass(&pass(mask, r, false), r, true),
            MorphKind::Close => pass(&pass(mask, r, true), r, false),
        }
    }

    #[test]
    fn pad_bbox_examples() {
        assert_eq!(pad_bbox(bb(10, 10, 20, 20), 4, (100, 100)), bb(6, 6, 28, 28));
        assert_eq!(pad_bbox(bb(0, 0, 20, 20), 4, (100, 100)), bb(0, 0, 24, 24));
        assert_eq!(pad_bbox(bb(90, 90, 8, 8), 4, (100, 100)), bb(86, 86, 14, 14));
    }

    #[test]
    fn iou_examples() {
        let a = bb(0, 0, 10, 10);
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, bb(20, 20, 5, 5)), 0.0);
        assert_eq!(iou(a, bb(10, 0, 10, 10)), 0.0);
        assert!((iou(a, bb(5, 0, 10, 10)) - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn dilate_then_erode_single_pixel() {
        let mut m = BinaryMask::empty(11, 11).unwrap();
        m.set(5, 5, true);
        let d = morph(&m, MorphKind::Dilate, 1).unwrap();
        assert_eq!(d, BinaryMask::from_bbox(11, 11, bb(4, 4, 3, 3)).unwrap());
        assert_eq!(d, naive(&m, MorphKind::Dilate, 1));
        let e = morph(&d, MorphKind::Erode, 1).unwrap();
        assert_eq!(e, m);
    }

    #[test]
    fn empty_mask_is_fixed_point() {
        let m = BinaryMask::empty(9, 7).unwrap();
        for kind in MorphKind::ALL {
            for r in 1..4 {
                assert_eq!(morph(&m, kind, r).unwrap(), m);
            }
        }
    }

    #[test]
    fn zero_radius_rejected() {
        let m = BinaryMask::empty(3, 3).unwrap();
        assert!(matches!(morph(&m, MorphKind::Dilate, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn erosion_clears_border_pixels() {
        let m = BinaryMask::full(5, 5).unwrap();
        let e = morph(&m, MorphKind::Erode, 1).unwrap();
        assert_eq!(e, BinaryMask::from_bbox(5, 5, bb(1, 1, 3, 3)).unwrap());
    }

    #[test]
    fn restoration_region_examples() {
        let full = BinaryMask::full(6, 6).unwrap();
        assert_eq!(restoration_region(&full, None, 0).unwrap(), full);

        let m = BinaryMask::from_bbox(10, 10, bb(0, 0, 4, 4)).unwrap();
        let d = BinaryMask::from_bbox(10, 10, bb(6, 6, 3, 3)).unwrap();
        assert!(restoration_region(&m, Some(&d), 0).unwrap().is_empty());

        let inst = BinaryMask::from_bbox(20, 20, bb(5, 5, 10, 10)).unwrap();
        let dmg = BinaryMask::from_bbox(20, 20, bb(9, 9, 2, 2)).unwrap();
        let region = restoration_region(&inst, Some(&dmg), 1).unwrap();
        assert_eq!(region, BinaryMask::from_bbox(20, 20, bb(8, 8, 4, 4)).unwrap());

        let other = BinaryMask::empty(3, 3).unwrap();
        assert!(matches!(
            restoration_region(&inst, Some(&other), 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn mask_to_alpha_examples() {
        let crop = ImageBuffer::new(2, 1, vec![10, 20, 30, 40, 50, 60, 70, 80]).unwrap();
        let m = BinaryMask::new(2, 1, vec![255, 0]).unwrap();
        let out = mask_to_alpha(&crop, &m).unwrap();
        assert_eq!(out.pixels(), &[10, 20, 30, 255, 50, 60, 70, 0]);

        let opaque = mask_to_alpha(&crop, &BinaryMask::full(2, 1).unwrap()).unwrap();
        assert!(opaque.pixels().chunks(4).all(|p| p[3] == 255));
        let clear = mask_to_alpha(&crop, &BinaryMask::empty(2, 1).unwrap()).unwrap();
        assert!(clear.pixels().chunks(4).all(|p| p[3] == 0));

        assert!(mask_to_alpha(&crop, &BinaryMask::empty(1, 1).unwrap()).is_err());
    }

    #[test]
    fn invariants_enforced_on_construction() {
        assert!(ImageBuffer::new(0, 3, vec![]).is_err());
        assert!(ImageBuffer::new(2, 2, vec![0; 15]).is_err());
        assert!(BinaryMask::new(2, 1, vec![255, 7]).is_err());
        assert!(BBox::new(1, 1, 0, 3).is_err());
        assert!(serde_json::from_str::<BBox>("[1,2,0,4]").is_err());
        assert_eq!(serde_json::from_str::<BBox>("[1,2,3,4]").unwrap(), bb(1, 2, 3, 4));
    }

    #[test]
    fn png_round_trip() {
        let img = ImageBuffer::new(2, 2, (0..16).collect()).unwrap();
        assert_eq!(ImageBuffer::decode_png(&img.encode_png().unwrap()).unwrap(), img);
        let m = BinaryMask::new(3, 1, vec![0, 255, 255]).unwrap();
        assert_eq!(BinaryMask::decode_png(&m.encode_png().unwrap()).unwrap(), m);
    }

    #[test]
    fn tight_bbox_of_square() {
        let m = BinaryMask::from_bbox(64, 64, bb(20, 30, 10, 10)).unwrap();
        assert_eq!(m.tight_bbox(), Some(bb(20, 30, 10, 10)));
        assert_eq!(BinaryMask::empty(4, 4).unwrap().tight_bbox(), None);
    }

    fn arb_mask(max: u32) -> impl Strategy<Value = BinaryMask> {
        (1..=max, 1..=max).prop_flat_map(|(w, h)| {
            proptest::collection::vec(prop_oneof![Just(0u8), Just(255u8)], (w * h) as usize)
                .prop_map(move |v| BinaryMask::new(w, h, v).unwrap())
        })
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0u32..50, 0u32..50, 1u32..30, 1u32..30).prop_map(|(x, y, w, h)| BBox { x, y, w, h })
    }

    proptest! {
        #[test]
        fn morph_matches_naive(m in arb_mask(24), r in 1u32..4) {
            for kind in MorphKind::ALL {
                prop_assert_eq!(morph(&m, kind, r).unwrap(), naive(&m, kind, r));
            }
        }

        #[test]
        fn dilate_extensive_erode_antiextensive(m in arb_mask(24), r in 1u32..4) {
            prop_assert!(m.is_subset_of(&morph(&m, MorphKind::Dilate, r).unwrap()));
            prop_assert!(morph(&m, MorphKind::Erode, r).unwrap().is_subset_of(&m));
        }

        #[test]
        fn open_close_idempotent(m in arb_mask(24), r in 1u32..4) {
            for kind in [MorphKind::Open, MorphKind::Close] {
                let once = morph(&m, kind, r).unwrap();
                prop_assert_eq!(morph(&once, kind, r).unwrap(), once);
            }
        }

        #[test]
        fn pad_stays_in_canvas(b in arb_box(), pad in 0u32..20) {
            let canvas = (b.right() + 5, b.bottom() + 5);
            let p = pad_bbox(b, pad, canvas);
            prop_assert!(p.is_within(canvas.0, canvas.1));
            prop_assert_eq!(pad_bbox(b, 0, canvas), b);
        }

        #[test]
        fn iou_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(a, b), iou(b, a));
            prop_assert_eq!(iou(a, a), 1.0);
            let v = iou(a, b);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn mask_to_alpha_keeps_rgb(m in arb_mask(8), seed in any::<u8>()) {
            let (w, h) = m.dimensions();
            let px: Vec<u8> = (0..w * h * 4).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let img = ImageBuffer::new(w, h, px).unwrap();
            let out = mask_to_alpha(&img, &m).unwrap();
            for (a, b) in img.pixels().chunks(4).zip(out.pixels().chunks(4)) {
                prop_assert_eq!(&a[..3], &b[..3]);
            }
        }
    }
}
