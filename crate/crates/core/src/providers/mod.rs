//! Inference abstractions: detection, text/image embedding and mask
//! generation, with deterministic mock implementations and a client for an
//! external inference sidecar.

use std::io::Cursor;
use std::sync::{Arc, OnceLock};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{BBox, Point};
use crate::postprocess::BinaryMask;

pub mod mock;
pub mod rle;
pub mod sidecar;

pub use mock::{DetectorNoise, MockDetector, MockEmbedder, MockMasker, MockWorld};
pub use sidecar::SidecarClient;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    Protocol(String),
}

impl ProviderError {
    pub fn is_transport(&self) -> bool {
        matches!(self, ProviderError::Transport(_))
    }
}

/// Lowercase, trim, collapse inner whitespace and strip trailing
/// punctuation.
pub fn normalize_label(raw: &str) -> String {
    let joined = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    joined.trim_end_matches(|c: char| c.is_ascii_punctuation()).trim_end().to_string()
}

/// Decoded image plus a content key used to seed per-image randomness.
#[derive(Clone)]
pub struct ImageHandle {
    key: String,
    pixels: Arc<RgbImage>,
    encoded: Arc<OnceLock<Vec<u8>>>,
}

impl std::fmt::Debug for ImageHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageHandle")
            .field("key", &self.key)
            .field("width", &self.width())
            .field("height", &self.height())
            .finish()
    }
}

impl ImageHandle {
    pub fn decode(bytes: &[u8]) -> Result<Self, ProviderError> {
        let img = image::load_from_memory(bytes).map_err(|e| ProviderError::Input(format!("undecodable image: {e}")))?;
        let handle = Self::from_rgb(img.to_rgb8());
        let _ = handle.encoded.set(bytes.to_vec());
        Ok(handle)
    }

    pub fn from_rgb(pixels: RgbImage) -> Self {
        let mut h = Sha256::new();
        h.update(pixels.width().to_le_bytes());
        h.update(pixels.height().to_le_bytes());
        h.update(pixels.as_raw());
        let key = hex(&h.finalize()[..16]);
        Self { key, pixels: Arc::new(pixels), encoded: Arc::new(OnceLock::new()) }
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn frame(&self) -> BBox<f64> {
        BBox { x1: 0.0, y1: 0.0, x2: self.width() as f64, y2: self.height() as f64 }
    }

    /// Encoded bytes: the original upload when decoded from bytes,
    /// otherwise a PNG encoding.
    pub fn encoded(&self) -> &[u8] {
        self.encoded.get_or_init(|| {
            let mut buf = Cursor::new(Vec::new());
            self.pixels.write_to(&mut buf, ImageFormat::Png).expect("PNG encoding of an in-memory image");
            buf.into_inner()
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Raw detector output before verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox<f64>,
    pub label_text: String,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox<f64>, label_text: impl Into<String>, score: f64) -> Result<Self, ProviderError> {
        let label_text = label_text.into();
        if !(0.0..=1.0).contains(&score) {
            return Err(ProviderError::Input(format!("score {score} outside [0, 1]")));
        }
        if label_text.trim().is_empty() {
            return Err(ProviderError::Input("empty detection label".into()));
        }
        Ok(Self { bbox, label_text, score })
    }
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

pub const EMBEDDING_NORM_TOLERANCE: f64 = 1e-6;

impl Embedding {
    /// Scales `values` to unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self, ProviderError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(ProviderError::Protocol("embedding has zero or non-finite norm".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Accepts a vector that is already unit-norm within tolerance.
    pub fn from_unit(values: Vec<f64>) -> Result<Self, ProviderError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > EMBEDDING_NORM_TOLERANCE {
            return Err(ProviderError::Protocol(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity of two unit vectors.
    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSeed {
    Box(BBox<f64>),
    Point(Point<f64>),
}

pub trait Detector: Send + Sync {
    /// Detections with `score >= threshold`, clipped to the image and sorted
    /// by descending score.
    fn detect(&self, image: &ImageHandle, class_names: &[String], threshold: f64)
        -> Result<Vec<Detection>, ProviderError>;
}

pub trait Embedder: Send + Sync {
    fn embed_image_crop(&self, image: &ImageHandle, bbox: &BBox<f64>) -> Result<Embedding, ProviderError>;
    fn embed_texts(&self, labels: &[String]) -> Result<Vec<Embedding>, ProviderError>;
}

pub trait MaskGenerator: Send + Sync {
    fn generate_mask(&self, image: &ImageHandle, seed: &MaskSeed) -> Result<BinaryMask, ProviderError>;
}

/// Shared preconditions for detector implementations.
pub fn check_threshold(threshold: f64) -> Result<(), ProviderError> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(ProviderError::Input(format!("threshold {threshold} outside [0, 1]")))
    }
}

/// Box clipped to the image; fails when the overlap is under 1 px^2.
pub fn crop_region(image: &ImageHandle, bbox: &BBox<f64>) -> Result<BBox<f64>, ProviderError> {
    let clipped = bbox.clip(image.width() as f64, image.height() as f64);
    if clipped.area() < 1.0 {
        return Err(ProviderError::Input(format!("crop {bbox:?} has less than 1 px^2 inside the image")));
    }
    Ok(clipped)
}

pub fn check_seed(image: &ImageHandle, seed: &MaskSeed) -> Result<(), ProviderError> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let ok = match seed {
        MaskSeed::Box(b) => b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= w && b.y2 <= h,
        MaskSeed::Point(p) => p.x >= 0.0 && p.y >= 0.0 && p.x < w && p.y < h,
    };
    if ok {
        Ok(())
    } else {
        Err(ProviderError::Input(format!("mask seed {seed:?} outside the {w}x{h} image")))
    }
}

/// Sorts by descending score; equal scores keep a stable geometric order.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
            .then(a.bbox.y1.total_cmp(&b.bbox.y1))
            .then(a.bbox.x2.total_cmp(&b.bbox.x2))
            .then(a.bbox.y2.total_cmp(&b.bbox.y2))
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Mock,
    Sidecar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub model_id: String,
    pub detection_threshold: f64,
    /// Seed for every mock-provider random draw.
    pub seed: u64,
    pub noise: DetectorNoise,
    /// Standard deviation of the Gaussian noise added to mock crop
    /// embeddings before re-normalization.
    pub embedding_noise: f64,
    /// Upper bound on concurrent sidecar requests.
    pub max_in_flight: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            endpoint: None,
            model_id: "mock".into(),
            detection_threshold: 0.2,
            seed: 0,
            noise: DetectorNoise::default(),
            embedding_noise: 0.0,
            max_in_flight: 4,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        check_threshold(self.detection_threshold)?;
        if self.kind == ProviderKind::Sidecar && self.endpoint.as_deref().map_or(true, str::is_empty) {
            return Err(ProviderError::Input("sidecar provider requires an endpoint".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ProviderError::Input("max_in_flight must be at least 1".into()));
        }
        self.noise.validate()
    }
}

/// The three provider roles the pipeline consumes.
#[derive(Clone)]
pub struct Providers {
    pub detector: Arc<dyn Detector>,
    pub embedder: Arc<dyn Embedder>,
    pub masker: Arc<dyn MaskGenerator>,
}

impl Providers {
    /// Builds providers for a project vocabulary. The mock world's classes
    /// are the vocabulary itself.
    pub fn from_config(config: &ProviderConfig, vocabulary: &[String]) -> Result<Self, ProviderError> {
        config.validate()?;
        Ok(match config.kind {
            ProviderKind::Mock => {
                let world = MockWorld::new(vocabulary.to_vec());
                Self {
                    detector: Arc::new(MockDetector::new(world.clone(), config.noise.clone(), config.seed)),
                    embedder: Arc::new(MockEmbedder::new(world, config.embedding_noise, config.seed)),
                    masker: Arc::new(MockMasker::default()),
                }
            }
            ProviderKind::Sidecar => {
                let client = Arc::new(SidecarClient::new(
                    config.endpoint.clone().unwrap_or_default(),
                    config.model_id.clone(),
                    config.max_in_flight,
                ));
                Self { detector: client.clone(), embedder: client.clone(), masker: client }
            }
        })
    }
}
