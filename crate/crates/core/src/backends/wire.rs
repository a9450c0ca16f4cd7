//! JSON bodies of the sidecar protocol. Images travel as base64 PNG.
//!
//! ```text
//! POST /v1/detect            {"image_png_b64", "min_confidence"} -> {"objects": [...]}
//! POST /v1/segment           same, objects carry "mask_png_b64"
//! POST /v1/remove_background {"image_png_b64"} -> {"mask_png_b64"}
//! POST /v1/inpaint           {"image_png_b64", "mask_png_b64", "prompt", "seed", "steps", "guidance"}
//!                            -> {"image_png_b64"}
//! errors: non-2xx with {"error"}
//! ```

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::DetectedObject;
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask, ImageBuffer};

pub const DETECT_PATH: &str = "/v1/detect";
pub const SEGMENT_PATH: &str = "/v1/segment";
pub const REMOVE_BACKGROUND_PATH: &str = "/v1/remove_background";
pub const INPAINT_PATH: &str = "/v1/inpaint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectRequest {
    pub image_png_b64: String,
    pub min_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireObject {
    #[serde(rename = "class")]
    pub class_label: String,
    pub confidence: f64,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_png_b64: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectsResponse {
    pub objects: Vec<WireObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoveBackgroundRequest {
    pub image_png_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskResponse {
    pub mask_png_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintRequestBody {
    pub image_png_b64: String,
    pub mask_png_b64: String,
    pub prompt: String,
    pub seed: u64,
    pub steps: u32,
    pub guidance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageResponse {
    pub image_png_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub fn encode_image(image: &ImageBuffer) -> Result<String> {
    Ok(STANDARD.encode(image.encode_png()?))
}

pub fn encode_mask(mask: &BinaryMask) -> Result<String> {
    Ok(STANDARD.encode(mask.encode_png()?))
}

fn decode_b64(field: &str, b64: &str) -> Result<Vec<u8>> {
    STANDARD
        .decode(b64)
        .map_err(|e| Error::Protocol(format!("{field}: invalid base64: {e}")))
}

pub fn decode_image(field: &str, b64: &str) -> Result<ImageBuffer> {
    ImageBuffer::decode_png(&decode_b64(field, b64)?)
        .map_err(|e| Error::Protocol(format!("{field}: {e}")))
}

pub fn decode_mask(field: &str, b64: &str) -> Result<BinaryMask> {
    BinaryMask::decode_png(&decode_b64(field, b64)?)
        .map_err(|e| Error::Protocol(format!("{field}: {e}")))
}

impl WireObject {
    pub fn from_detected(o: &DetectedObject) -> Result<Self> {
        Ok(Self {
            class_label: o.class_label.clone(),
            confidence: o.confidence,
            bbox: o.bbox,
            mask_png_b64: o.mask.as_ref().map(encode_mask).transpose()?,
        })
    }

    pub fn into_detected(self) -> Result<DetectedObject> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Protocol(format!(
                "confidence {} for `{}` outside [0,1]",
                self.confidence, self.class_label
            )));
        }
        let mask = self
            .mask_png_b64
            .as_deref()
            .map(|m| decode_mask("mask_png_b64", m))
            .transpose()?;
        Ok(DetectedObject {
            class_label: self.class_label,
            confidence: self.confidence,
            bbox: self.bbox,
            mask,
        })
    }
}

pub fn parse_body<T: for<'de> Deserialize<'de>>(endpoint: &str, body: &str) -> Result<T> {
    serde_json::from_str(body).map_err(|e| Error::Protocol(format!("{endpoint}: malformed response: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bodies_use_wire_field_names() {
        let obj = WireObject {
            class_label: "zebra".into(),
            confidence: 0.5,
            bbox: BBox::new(1, 2, 3, 4).unwrap(),
            mask_png_b64: None,
        };
        let json = serde_json::to_value(ObjectsResponse { objects: vec![obj] }).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"objects": [{"class": "zebra", "confidence": 0.5, "bbox": [1, 2, 3, 4]}]})
        );
    }

    #[test]
    fn bad_payloads_are_protocol_errors() {
        assert!(matches!(decode_image("x", "%%%"), Err(Error::Protocol(_))));
        assert!(matches!(decode_image("x", "aGVsbG8="), Err(Error::Protocol(_))));
        let o = WireObject {
            class_label: "z".into(),
            confidence: 1.3,
            bbox: BBox::new(0, 0, 1, 1).unwrap(),
            mask_png_b64: None,
        };
        assert!(matches!(o.into_detected(), Err(Error::Protocol(_))));
        assert!(matches!(
            parse_body::<ObjectsResponse>("detect", r#"{"objs": []}"#),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn image_round_trip() {
        let img = ImageBuffer::new(1, 2, vec![1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert_eq!(decode_image("f", &encode_image(&img).unwrap()).unwrap(), img);
    }
}
