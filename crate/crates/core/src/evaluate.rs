//! Confidence-score evaluation: distort images, score them with a reference
//! detector, and aggregate how much each restoration method recovers.
//!
//! All aggregates are in absolute percentage points of confidence
//! (confidence × 100), not relative change. "Mean variation" is the mean
//! absolute deviation of a method's restored confidence from the
//! ground-truth confidence.
//!
//! Confidences are stored quantized to 1e-6 and aggregated as exact integer
//! micro-units, so every aggregate is a single correctly rounded division:
//! permutation-invariant, and reproducible from the 6-decimal scatter CSV.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{CallContext, Detector};
use crate::config::DistortionKind;
use crate::error::{invalid, Error, Result};
use crate::geometry::{iou, BBox, ImageBuffer};

pub const UNIT_LABEL: &str = "percentage points (absolute, confidence x 100)";

const MICROS: f64 = 1e6;

/// Round a confidence to 6 decimal places.
pub fn quantize(confidence: f64) -> f64 {
    micros(confidence) as f64 / MICROS
}

fn micros(confidence: f64) -> i64 {
    (confidence * MICROS).round() as i64
}

/// Percentage points from a micro-unit sum over `n` records.
fn mean_pp(sum_micros: i64, n: usize) -> f64 {
    sum_micros as f64 / (n as f64 * 1e4)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image_id: String,
    true_class: String,
    g: f64,
    d: f64,
    r: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord")]
pub struct ScoreRecord {
    pub image_id: String,
    pub true_class: String,
    /// Ground-truth confidence on the original image.
    pub g: f64,
    /// Confidence on the distorted image.
    pub d: f64,
    /// Confidence after each restoration method.
    pub r: BTreeMap<String, f64>,
}

impl TryFrom<RawRecord> for ScoreRecord {
    type Error = Error;

    fn try_from(raw: RawRecord) -> Result<Self> {
        ScoreRecord::new(raw.image_id, raw.true_class, raw.g, raw.d, raw.r)
    }
}

impl ScoreRecord {
    pub fn new(
        image_id: impl Into<String>,
        true_class: impl Into<String>,
        g: f64,
        d: f64,
        r: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        let check = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(quantize(v))
            } else {
                Err(invalid(format!("{image_id}: {name} = {v} outside [0,1]")))
            }
        };
        let g = check("g", g)?;
        let d = check("d", d)?;
        let r = r
            .into_iter()
            .map(|(m, v)| Ok((m.clone(), check(&m, v)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            image_id,
            true_class: true_class.into(),
            g,
            d,
            r,
        })
    }
}

fn select<'a>(records: &'a [ScoreRecord], class_filter: Option<&str>) -> Vec<&'a ScoreRecord> {
    records
        .iter()
        .filter(|r| class_filter.is_none_or(|c| r.true_class == c))
        .collect()
}

fn method_values(sel: &[&ScoreRecord], method: &str) -> Result<Vec<i64>> {
    sel.iter()
        .map(|r| {
            r.r.get(method)
                .map(|&v| micros(v))
                .ok_or_else(|| invalid(format!("method `{method}` missing for {}", r.image_id)))
        })
        .collect()
}

/// Mean of `(g - d) × 100` over all records.
pub fn average_drop(records: &[ScoreRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(invalid("average_drop needs at least one record"));
    }
    let sum: i64 = records.iter().map(|r| micros(r.g) - micros(r.d)).sum();
    Ok(mean_pp(sum, records.len()))
}

/// Mean of `(r[method] - d) × 100` over the records of `class_filter`
/// (all records when `None`). Negative when restoration hurts.
pub fn average_gain(records: &[ScoreRecord], method: &str, class_filter: Option<&str>) -> Result<f64> {
    let sel = select(records, class_filter);
    if sel.is_empty() {
        return Err(invalid(format!("no records for class {class_filter:?}")));
    }
    let restored = method_values(&sel, method)?;
    let sum: i64 = sel.iter().zip(&restored).map(|(r, &v)| v - micros(r.d)).sum();
    Ok(mean_pp(sum, sel.len()))
}

/// Mean of `|r[method] - g| × 100` over the selection.
pub fn mean_variation(records: &[ScoreRecord], method: &str, class_filter: Option<&str>) -> Result<f64> {
    let sel = select(records, class_filter);
    if sel.is_empty() {
        return Err(invalid(format!("no records for class {class_filter:?}")));
    }
    let restored = method_values(&sel, method)?;
    let sum: i64 = sel.iter().zip(&restored).map(|(r, &v)| (v - micros(r.g)).abs()).sum();
    Ok(mean_pp(sum, sel.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub count: usize,
    pub average_drop: f64,
    pub average_gain: BTreeMap<String, f64>,
    pub mean_variation: BTreeMap<String, f64>,
}

impl MetricSet {
    fn compute(records: &[ScoreRecord], methods: &[String], class_filter: Option<&str>) -> Result<Self> {
        let sel: Vec<ScoreRecord> = select(records, class_filter).into_iter().cloned().collect();
        let mut average_gain = BTreeMap::new();
        let mut mean_variation = BTreeMap::new();
        for m in methods {
            average_gain.insert(m.clone(), average_gain_of(&sel, m)?);
            mean_variation.insert(m.clone(), mean_variation_of(&sel, m)?);
        }
        Ok(Self {
            count: sel.len(),
            average_drop: average_drop(&sel)?,
            average_gain,
            mean_variation,
        })
    }
}

fn average_gain_of(sel: &[ScoreRecord], m: &str) -> Result<f64> {
    average_gain(sel, m, None)
}

fn mean_variation_of(sel: &[ScoreRecord], m: &str) -> Result<f64> {
    mean_variation(sel, m, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub unit: String,
    pub methods: Vec<String>,
    pub record_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub overall: MetricSet,
    pub per_class: BTreeMap<String, MetricSet>,
}

impl EvalReport {
    /// Human-readable table; values carry their unit.
    pub fn summary_text(&self) -> String {
        let mut out = format!("confidence metrics in {}\n", self.unit);
        let mut line = |label: &str, m: &MetricSet| {
            out.push_str(&format!("{label:<12} n={:<4} drop {:>7.2} pp", m.count, m.average_drop));
            for method in &self.methods {
                out.push_str(&format!(
                    " | {method}: gain {:>7.2} pp, variation {:>6.2} pp",
                    m.average_gain[method], m.mean_variation[method]
                ));
            }
            out.push('\n');
        };
        line("overall", &self.overall);
        for (class, m) in &self.per_class {
            line(class, m);
        }
        out
    }
}

fn sorted(records: &[ScoreRecord]) -> Vec<ScoreRecord> {
    let mut v = records.to_vec();
    v.sort_by(|a, b| (&a.image_id, &a.true_class).cmp(&(&b.image_id, &b.true_class)));
    v
}

/// Aggregate report plus the scatter CSV
/// (`image_id,class,g,d,<method>...`, 6 decimals, sorted by image id).
pub fn export_report(
    records: &[ScoreRecord],
    methods: &[String],
    config_digest: Option<String>,
) -> Result<(EvalReport, String)> {
    if records.is_empty() {
        return Err(invalid("cannot report on zero records"));
    }
    let unique: BTreeSet<&String> = methods.iter().collect();
    if unique.len() != methods.len() {
        return Err(invalid("method names must be unique"));
    }
    let records = sorted(records);
    let classes: BTreeSet<&str> = records.iter().map(|r| r.true_class.as_str()).collect();
    let per_class = classes
        .into_iter()
        .map(|c| Ok((c.to_string(), MetricSet::compute(&records, methods, Some(c))?)))
        .collect::<Result<_>>()?;
    let report = EvalReport {
        unit: UNIT_LABEL.to_string(),
        methods: methods.to_vec(),
        record_count: records.len(),
        config_digest,
        overall: MetricSet::compute(&records, methods, None)?,
        per_class,
    };

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["image_id".to_string(), "class".into(), "g".into(), "d".into()];
    header.extend(methods.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for r in &records {
        let mut row = vec![r.image_id.clone(), r.true_class.clone(), format!("{:.6}", r.g), format!("{:.6}", r.d)];
        for m in methods {
            row.push(format!("{:.6}", r.r[m]));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    Ok((report, String::from_utf8(bytes).expect("csv is utf-8")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Protocol(format!("scatter csv: {e}"))
}

/// Parse a scatter CSV back into methods and records.
pub fn parse_scatter_csv(text: &str) -> Result<(Vec<String>, Vec<ScoreRecord>)> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.len() < 4 || &header[0] != "image_id" || &header[1] != "class" || &header[2] != "g" || &header[3] != "d" {
        return Err(Error::Protocol("scatter csv header must start with image_id,class,g,d".into()));
    }
    let methods: Vec<String> = header.iter().skip(4).map(str::to_string).collect();
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Protocol(format!("bad number `{s}`"))) };
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let r = methods
            .iter()
            .enumerate()
            .map(|(i, m)| Ok((m.clone(), num(&row[4 + i])?)))
            .collect::<Result<_>>()?;
        records.push(ScoreRecord::new(&row[0], &row[1], num(&row[2])?, num(&row[3])?, r)?);
    }
    Ok((methods, records))
}

/// Damage `region` of `image`. Only pixels inside the region change.
pub fn distort(image: &ImageBuffer, region: BBox, kind: DistortionKind, seed: u64, strength: f64) -> Result<ImageBuffer> {
    region.check_within(image.width(), image.height())?;
    if !(strength.is_finite() && strength >= 0.0) {
        return Err(invalid(format!("distortion strength must be >= 0, got {strength}")));
    }
    let mut out = image.clone();
    match kind {
        DistortionKind::Blackout => {
            for y in region.y..region.bottom() {
                for x in region.x..region.right() {
                    out.set_pixel(x, y, [0, 0, 0, 255]);
                }
            }
        }
        DistortionKind::Noise => {
            if strength == 0.0 {
                return Ok(out);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for y in region.y..region.bottom() {
                for x in region.x..region.right() {
                    let mut p = out.pixel(x, y);
                    for c in &mut p[..3] {
                        let delta: f64 = rng.random_range(-strength..=strength);
                        *c = (*c as f64 + delta).round().clamp(0.0, 255.0) as u8;
                    }
                    out.set_pixel(x, y, p);
                }
            }
        }
        DistortionKind::GaussianBlur => {
            let radius = strength.round() as i64;
            if radius <= 0 {
                return Ok(out);
            }
            blur_region(&mut out, region, radius, strength / 2.0);
        }
    }
    Ok(out)
}

/// Separable gaussian blur of the RGB channels inside `region`, sampling
/// clamped to the region's edges.
fn blur_region(img: &mut ImageBuffer, region: BBox, radius: i64, sigma: f64) {
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (w, h) = (region.w as i64, region.h as i64);
    let at = |x: i64, y: i64| ((y * w + x) * 3) as usize;
    let mut buf = vec![0f64; (w * h * 3) as usize];
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(region.x + x as u32, region.y + y as u32);
            buf[at(x, y)..at(x, y) + 3].copy_from_slice(&[p[0] as f64, p[1] as f64, p[2] as f64]);
        }
    }
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0f64; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0f64; 3];
                for (i, kw) in kernel.iter().enumerate() {
                    let k = i as i64 - radius;
                    let (sx, sy) = if horizontal {
                        ((x + k).clamp(0, w - 1), y)
                    } else {
                        (x, (y + k).clamp(0, h - 1))
                    };
                    for c in 0..3 {
                        acc[c] += src[at(sx, sy) + c] * kw;
                    }
                }
                for c in 0..3 {
                    dst[at(x, y) + c] = acc[c] / norm;
                }
            }
        }
        dst
    };
    let blurred = pass(&pass(&buf, true), false);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (region.x + x as u32, region.y + y as u32);
            let mut p = img.pixel(px, py);
            for c in 0..3 {
                p[c] = blurred[at(x, y) + c].round().clamp(0.0, 255.0) as u8;
            }
            img.set_pixel(px, py, p);
        }
    }
}

/// Highest confidence among detections of `true_class`; 0.0 when there
/// are none. With `gate = Some((box, t))` only detections overlapping
/// `box` with IoU >= `t` count.
pub fn measure(
    image: &ImageBuffer,
    detector: &dyn Detector,
    true_class: &str,
    ctx: &CallContext,
    gate: Option<(BBox, f64)>,
) -> Result<f64> {
    let best = detector
        .detect(image, 0.0, ctx)?
        .into_iter()
        .filter(|o| o.class_label == true_class)
        .filter(|o| gate.is_none_or(|(b, t)| iou(o.bbox, b) >= t))
        .map(|o| o.confidence)
        .fold(0.0f64, f64::max);
    Ok(best.clamp(0.0, 1.0))
}
