//! Blocking JSON-over-HTTP client for an external inference sidecar.
//!
//! Routes: `POST /detect`, `POST /embed_image`, `POST /embed_text`,
//! `POST /mask`. Images travel as base64 of their encoded bytes.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::rle::{self, Rle};
use super::{
    check_seed, check_threshold, crop_region, sort_detections, Detection, Detector, Embedder, Embedding, ImageHandle,
    MaskGenerator, MaskSeed, ProviderError,
};
use crate::geometry::BBox;
use crate::postprocess::BinaryMask;

/// Request and response bodies of the sidecar protocol.
pub mod wire {
    use serde::{Deserialize, Serialize};

    use super::Rle;

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct DetectRequest {
        pub image: String,
        pub classes: Vec<String>,
        pub threshold: f64,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct WireDetection {
        #[serde(rename = "box")]
        pub bbox: [f64; 4],
        pub label: String,
        pub score: f64,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct DetectResponse {
        pub detections: Vec<WireDetection>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct EmbedImageRequest {
        pub image: String,
        #[serde(rename = "box")]
        pub bbox: [f64; 4],
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct EmbedImageResponse {
        pub vector: Vec<f64>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct EmbedTextRequest {
        pub labels: Vec<String>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct EmbedTextResponse {
        pub vectors: Vec<Vec<f64>>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    #[serde(rename_all = "snake_case")]
    pub enum WireSeed {
        #[serde(rename = "box")]
        Box([f64; 4]),
        Point([f64; 2]),
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct MaskRequest {
        pub image: String,
        pub seed: WireSeed,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct MaskResponse {
        pub mask_rle: Rle,
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct SidecarClient {
    endpoint: String,
    model_id: String,
    agent: ureq::Agent,
    gate: Semaphore,
}

impl std::fmt::Debug for SidecarClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SidecarClient").field("endpoint", &self.endpoint).field("model_id", &self.model_id).finish()
    }
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn to_wire(b: &BBox<f64>) -> [f64; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

impl SidecarClient {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>, max_in_flight: usize) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(120))).build();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            model_id: model_id.into(),
            agent: ureq::Agent::new_with_config(config),
            gate: Semaphore::new(max_in_flight.max(1)),
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, route: &str, body: &Req) -> Result<Resp, ProviderError> {
        let _permit = self.gate.acquire();
        let url = format!("{}{route}", self.endpoint);
        let mut resp = self.agent.post(&url).send_json(body).map_err(|e| match e {
            ureq::Error::StatusCode(code) if (400..500).contains(&code) => {
                ProviderError::Input(format!("sidecar rejected {route} with status {code}"))
            }
            other => ProviderError::Transport(format!("{url}: {other}")),
        })?;
        resp.body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_json::<Resp>()
            .map_err(|e| ProviderError::Protocol(format!("{route}: {e}")))
    }
}

impl Detector for SidecarClient {
    fn detect(&self, image: &ImageHandle, class_names: &[String], threshold: f64) -> Result<Vec<Detection>, ProviderError> {
        check_threshold(threshold)?;
        let req = wire::DetectRequest { image: b64(image.encoded()), classes: class_names.to_vec(), threshold };
        let resp: wire::DetectResponse = self.post("/detect", &req)?;
        let (w, h) = (image.width() as f64, image.height() as f64);
        let mut out = Vec::with_capacity(resp.detections.len());
        for d in resp.detections {
            let [x1, y1, x2, y2] = d.bbox;
            let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| ProviderError::Protocol(format!("detection box: {e}")))?;
            let det = Detection::new(bbox.clip(w, h), d.label, d.score)
                .map_err(|e| ProviderError::Protocol(e.to_string()))?;
            if det.score >= threshold {
                out.push(det);
            }
        }
        sort_detections(&mut out);
        Ok(out)
    }
}

impl Embedder for SidecarClient {
    fn embed_image_crop(&self, image: &ImageHandle, bbox: &BBox<f64>) -> Result<Embedding, ProviderError> {
        let region = crop_region(image, bbox)?;
        let req = wire::EmbedImageRequest { image: b64(image.encoded()), bbox: to_wire(&region) };
        let resp: wire::EmbedImageResponse = self.post("/embed_image", &req)?;
        Embedding::from_unit(resp.vector)
    }

    fn embed_texts(&self, labels: &[String]) -> Result<Vec<Embedding>, ProviderError> {
        if labels.is_empty() || labels.iter().any(|l| l.trim().is_empty()) {
            return Err(ProviderError::Input("embed_texts needs nonempty labels".into()));
        }
        let resp: wire::EmbedTextResponse = self.post("/embed_text", &wire::EmbedTextRequest { labels: labels.to_vec() })?;
        if resp.vectors.len() != labels.len() {
            return Err(ProviderError::Protocol(format!(
                "expected {} text vectors, got {}",
                labels.len(),
                resp.vectors.len()
            )));
        }
        resp.vectors.into_iter().map(Embedding::from_unit).collect()
    }
}

impl MaskGenerator for SidecarClient {
    fn generate_mask(&self, image: &ImageHandle, seed: &MaskSeed) -> Result<BinaryMask, ProviderError> {
        check_seed(image, seed)?;
        let seed = match seed {
            MaskSeed::Box(b) => wire::WireSeed::Box(to_wire(b)),
            MaskSeed::Point(p) => wire::WireSeed::Point([p.x, p.y]),
        };
        let resp: wire::MaskResponse = self.post("/mask", &wire::MaskRequest { image: b64(image.encoded()), seed })?;
        let mask = rle::decode(&resp.mask_rle)?;
        if (mask.width(), mask.height()) != (image.width() as usize, image.height() as usize) {
            return Err(ProviderError::Protocol(format!(
                "mask is {}x{}, image is {}x{}",
                mask.width(),
                mask.height(),
                image.width(),
                image.height()
            )));
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unreachable_sidecar_is_transport_error() {
        // port 9 (discard) is closed in the test sandbox
        let client = SidecarClient::new("http://127.0.0.1:9", "tiny", 2);
        let img = ImageHandle::from_rgb(image::RgbImage::new(8, 8));
        let err = client.detect(&img, &["cat".into()], 0.2).unwrap_err();
        assert!(err.is_transport(), "{err:?}");
    }

    #[test]
    fn seed_wire_shape() {
        let s = serde_json::to_value(wire::WireSeed::Box([1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(s, serde_json::json!({"box": [1.0, 2.0, 3.0, 4.0]}));
        let p = serde_json::to_value(wire::WireSeed::Point([1.0, 2.0])).unwrap();
        assert_eq!(p, serde_json::json!({"point": [1.0, 2.0]}));
    }
}
