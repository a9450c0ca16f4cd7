use std::time::Duration;

use serde::Serialize;
use ureq::Agent;

use super::wire::{self, ErrorBody, ImageResponse, MaskResponse, ObjectsResponse};
use super::{BackgroundRemover, CallContext, DetectedObject, Detector, InpaintRequest, Inpainter, Segmenter};
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, ImageBuffer};

const MAX_BODY_BYTES: u64 = 512 * 1024 * 1024;

/// Client for the inference sidecar. One instance serves every role; the
/// underlying agent pools connections and is safe to share across threads.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base_url: String,
    backend_id: String,
    agent: Agent,
}

impl HttpBackend {
    pub fn new(base_url: &str, backend_id: impl Into<String>, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .max_idle_connections_per_host(8)
            .build()
            .into();
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            backend_id: backend_id.into(),
            agent,
        }
    }

    fn post(&self, path: &str, body: &impl Serialize) -> Result<String> {
        let url = format!("{}{path}", self.base_url);
        let payload = serde_json::to_string(body).expect("request serializes");
        let mut resp = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json")
            .send(payload.as_str())
            .map_err(|e| map_transport(&url, e))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .with_config()
            .limit(MAX_BODY_BYTES)
            .read_to_string()
            .map_err(|e| map_transport(&url, e))?;
        if !status.is_success() {
            let detail = serde_json::from_str::<ErrorBody>(&text)
                .map(|b| b.error)
                .unwrap_or(text);
            return Err(Error::Backend(format!("{url} returned {}: {detail}", status.as_u16())));
        }
        Ok(text)
    }

    fn objects(&self, path: &str, image: &ImageBuffer, min_confidence: f64) -> Result<Vec<DetectedObject>> {
        let body = wire::DetectRequest {
            image_png_b64: wire::encode_image(image)?,
            min_confidence,
        };
        let resp: ObjectsResponse = wire::parse_body(path, &self.post(path, &body)?)?;
        resp.objects.into_iter().map(wire::WireObject::into_detected).collect()
    }
}

fn map_transport(url: &str, e: ureq::Error) -> Error {
    match e {
        ureq::Error::Timeout(_) => Error::Timeout(url.to_string()),
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => Error::Timeout(url.to_string()),
        other => Error::Backend(format!("{url}: {other}")),
    }
}

impl Detector for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn detect_raw(&self, image: &ImageBuffer, min_confidence: f64, _: &CallContext) -> Result<Vec<DetectedObject>> {
        self.objects(wire::DETECT_PATH, image, min_confidence)
    }
}

impl Segmenter for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn segment_raw(&self, image: &ImageBuffer, min_confidence: f64, _: &CallContext) -> Result<Vec<DetectedObject>> {
        self.objects(wire::SEGMENT_PATH, image, min_confidence)
    }
}

impl BackgroundRemover for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn remove_background_raw(&self, crop: &ImageBuffer, _: &CallContext) -> Result<BinaryMask> {
        let body = wire::RemoveBackgroundRequest {
            image_png_b64: wire::encode_image(crop)?,
        };
        let path = wire::REMOVE_BACKGROUND_PATH;
        let resp: MaskResponse = wire::parse_body(path, &self.post(path, &body)?)?;
        wire::decode_mask("mask_png_b64", &resp.mask_png_b64)
    }
}

impl Inpainter for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn inpaint_raw(&self, image: &ImageBuffer, mask: &BinaryMask, request: &InpaintRequest) -> Result<ImageBuffer> {
        let body = wire::InpaintRequestBody {
            image_png_b64: wire::encode_image(image)?,
            mask_png_b64: wire::encode_mask(mask)?,
            prompt: request.prompt.clone(),
            seed: request.seed,
            steps: request.steps,
            guidance: request.guidance,
        };
        let path = wire::INPAINT_PATH;
        let resp: ImageResponse = wire::parse_body(path, &self.post(path, &body)?)?;
        wire::decode_image("image_png_b64", &resp.image_png_b64)
    }
}
