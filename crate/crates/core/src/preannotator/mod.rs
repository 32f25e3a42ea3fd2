//! Pre-annotation pipeline: low-threshold detection, embedding
//! verification of every crop, IoU-graph clustering and per-cluster
//! conflict resolution.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, union_box, BBox};
use crate::model::{AnnotationSource, AnnotationState, ClassId, LabelClass, NewAnnotation, ProjectMode};
use crate::postprocess::mask_to_shape;
use crate::providers::{normalize_label, Detection, Embedding, ImageHandle, MaskSeed, ProviderError, Providers};
use crate::scalar::Scalar;
use crate::Shape;

pub mod batch;

pub use batch::{preannotate_batch, BatchReport, ImageReport, ImageRunStatus, ProgressEvent, ProgressSink};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("invalid pipeline input: {0}")]
    Input(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Review policy for machine-generated annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceMode {
    /// Stored as pending until accepted in review.
    LiveFilter,
    /// Stored as accepted immediately.
    BlindTrust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSettings {
    pub detection_threshold: f64,
    pub cluster_iou_threshold: f64,
    pub temperature: f64,
    pub acceptance_mode: AcceptanceMode,
    pub min_confidence_filter: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            detection_threshold: 0.2,
            cluster_iou_threshold: 0.9,
            temperature: 1.0,
            acceptance_mode: AcceptanceMode::LiveFilter,
            min_confidence_filter: 0.0,
        }
    }
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Input(m.to_string()));
        if !(0.0..=1.0).contains(&self.detection_threshold) {
            return bad("detection_threshold must be in [0, 1]");
        }
        if !(self.cluster_iou_threshold > 0.0 && self.cluster_iou_threshold <= 1.0) {
            return bad("cluster_iou_threshold must be in (0, 1]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_confidence_filter) {
            return bad("min_confidence_filter must be in [0, 1]");
        }
        Ok(())
    }
}

/// Softmax of `scores / tau`, shifted by the maximum for stability.
pub fn softmax<T: Scalar>(scores: &[T], tau: T) -> Vec<T> {
    let max = scores.iter().fold(T::neg_infinity(), |m, &s| m.max(s));
    let exps: Vec<T> = scores.iter().map(|&s| ((s - max) / tau).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &e| a + e);
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification<T> {
    pub similarities: Vec<T>,
    pub probs: Vec<T>,
    pub best: usize,
}

impl<T: Scalar> Verification<T> {
    pub fn best_prob(&self) -> T {
        self.probs[self.best]
    }
}

/// Softmax verification over precomputed similarities. The winner is taken
/// on the similarities themselves: with `tau > 0` the softmax is strictly
/// monotone, so this is the argmax of the probabilities without exposure to
/// rounding ties.
pub fn verify_scores<T: Scalar>(similarities: Vec<T>, tau: T) -> Result<Verification<T>, PipelineError> {
    if similarities.is_empty() {
        return Err(PipelineError::Input("verification needs at least one label".into()));
    }
    if !(tau > T::zero()) {
        return Err(PipelineError::Input("temperature must be positive".into()));
    }
    let probs = softmax(&similarities, tau);
    let best = argmax(&similarities).expect("nonempty");
    Ok(Verification { similarities, probs, best })
}

/// Cosine similarity of the crop against each label, softmax with
/// temperature `tau`, and the winning label index.
pub fn verify_label(crop: &Embedding, labels: &[Embedding], tau: f64) -> Result<Verification<f64>, PipelineError> {
    verify_scores(labels.iter().map(|l| crop.dot(l)).collect(), tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedDetection {
    pub detection: Detection,
    /// Index into the vocabulary.
    pub class_index: usize,
    /// `None` when the crop was under 1 px^2 and the detector label was kept.
    pub verification: Option<Verification<f64>>,
}

impl VerifiedDetection {
    /// Verification probability of the assigned label, or the raw detector
    /// score for unverified detections.
    pub fn confidence(&self) -> f64 {
        self.verification.as_ref().map_or(self.detection.score, |v| v.best_prob())
    }
}

/// Detections as nodes, an edge wherever IoU exceeds the threshold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterGraph {
    pub nodes: usize,
    /// `(i, j)` with `i < j`; symmetric by convention.
    pub edges: Vec<(usize, usize)>,
    /// Connected components, each sorted ascending, ordered by first member.
    pub components: Vec<Vec<usize>>,
}

impl ClusterGraph {
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        let key = (i.min(j), i.max(j));
        self.edges.binary_search(&key).is_ok()
    }
}

pub fn build_cluster_graph<T: Scalar>(boxes: &[BBox<T>], iou_threshold: T) -> ClusterGraph {
    let n = boxes.len();
    let mut edges = Vec::new();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if iou(&boxes[i], &boxes[j]) > iou_threshold {
                edges.push((i, j));
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    let mut seen = vec![false; n];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(v) = queue.pop_front() {
            comp.push(v);
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    ClusterGraph { nodes: n, edges, components }
}

/// What a cluster resolved to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub bbox: BBox<f64>,
    pub class_index: usize,
    pub detector_score: f64,
    pub verified_score: Option<f64>,
    /// Index of the retained member, `None` for the union-box fallback.
    pub member: Option<usize>,
}

/// Best member among `candidates`: highest confidence, then larger area,
/// then lowest index.
fn pick_member(dets: &[VerifiedDetection], candidates: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in candidates {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (ci, cb) = (dets[i].confidence(), dets[b].confidence());
                let (ai, ab) = (dets[i].detection.bbox.area(), dets[b].detection.bbox.area());
                if ci > cb || (ci == cb && ai > ab) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Vocabulary, its text embeddings and the providers. Immutable once built.
pub struct Pipeline {
    settings: PipelineSettings,
    mode: ProjectMode,
    vocabulary: Vec<LabelClass>,
    names: Vec<String>,
    label_embeddings: Vec<Embedding>,
    providers: Providers,
}

/// Output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub annotations: Vec<NewAnnotation>,
    pub raw_detections: usize,
    pub clusters: usize,
    /// Nothing survived the detection threshold: manual or assisted work
    /// is needed.
    pub needs_manual: bool,
}

impl Pipeline {
    pub fn new(
        settings: PipelineSettings,
        mode: ProjectMode,
        vocabulary: Vec<LabelClass>,
        providers: Providers,
    ) -> Result<Self, PipelineError> {
        settings.validate()?;
        if vocabulary.is_empty() {
            return Err(PipelineError::Input("vocabulary is empty".into()));
        }
        let names: Vec<String> = vocabulary.iter().map(|c| c.name.clone()).collect();
        let label_embeddings = providers.embedder.embed_texts(&names)?;
        Ok(Self { settings, mode, vocabulary, names, label_embeddings, providers })
    }

    pub fn settings(&self) -> &PipelineSettings {
        &self.settings
    }

    pub fn vocabulary(&self) -> &[LabelClass] {
        &self.vocabulary
    }

    pub fn class_id(&self, index: usize) -> ClassId {
        self.vocabulary[index].id
    }

    fn vocabulary_index(&self, label: &str) -> Option<usize> {
        let norm = normalize_label(label);
        self.names.iter().position(|n| *n == norm)
    }

    /// Embedding check of one detection. Crops under 1 px^2 keep the
    /// detector label, and are dropped when that label is not in the
    /// vocabulary.
    pub fn verify(&self, image: &ImageHandle, det: Detection) -> Result<Option<VerifiedDetection>, PipelineError> {
        let clipped = det.bbox.clip(image.width() as f64, image.height() as f64);
        if clipped.area() < 1.0 {
            return Ok(self
                .vocabulary_index(&det.label_text)
                .map(|class_index| VerifiedDetection { detection: det, class_index, verification: None }));
        }
        let crop = self.providers.embedder.embed_image_crop(image, &clipped)?;
        let v = verify_label(&crop, &self.label_embeddings, self.settings.temperature)?;
        Ok(Some(VerifiedDetection { detection: det, class_index: v.best, verification: Some(v) }))
    }

    /// Collapses one connected component to a single result. Consistent
    /// labels keep the most confident member; conflicting labels are
    /// re-verified on the union box and the best member carrying the
    /// winning label is kept (or the union box itself if none does).
    pub fn resolve_cluster(
        &self,
        image: &ImageHandle,
        dets: &[VerifiedDetection],
        component: &[usize],
    ) -> Result<Resolved, PipelineError> {
        let first = *component.first().ok_or_else(|| PipelineError::Input("empty cluster".into()))?;
        let consistent = component.iter().all(|&i| dets[i].class_index == dets[first].class_index);
        let from_member = |i: usize| Resolved {
            bbox: dets[i].detection.bbox,
            class_index: dets[i].class_index,
            detector_score: dets[i].detection.score,
            verified_score: dets[i].verification.as_ref().map(|v| v.best_prob()),
            member: Some(i),
        };
        if consistent {
            let best = pick_member(dets, component.iter().copied()).expect("nonempty");
            return Ok(from_member(best));
        }

        let boxes: Vec<BBox<f64>> = component.iter().map(|&i| dets[i].detection.bbox).collect();
        let union = union_box(&boxes).expect("nonempty");
        let crop = self.providers.embedder.embed_image_crop(image, &union)?;
        let v = verify_label(&crop, &self.label_embeddings, self.settings.temperature)?;
        let matching = component.iter().copied().filter(|&i| dets[i].class_index == v.best);
        Ok(match pick_member(dets, matching) {
            Some(i) => from_member(i),
            None => Resolved {
                bbox: union,
                class_index: v.best,
                detector_score: component.iter().map(|&i| dets[i].detection.score).fold(0.0, f64::max),
                verified_score: Some(v.best_prob()),
                member: None,
            },
        })
    }

    fn shape_for(&self, image: &ImageHandle, bbox: &BBox<f64>) -> Result<Shape, PipelineError> {
        if self.mode == ProjectMode::Detection {
            return Ok(Shape::Bbox(*bbox));
        }
        let mask = self.providers.masker.generate_mask(image, &MaskSeed::Box(*bbox))?;
        Ok(mask_to_shape(&mask, self.mode).unwrap_or(Shape::Bbox(*bbox)))
    }

    /// Runs every stage on one image.
    pub fn preannotate_image(&self, image: &ImageHandle) -> Result<ImageOutcome, PipelineError> {
        let raw = self.providers.detector.detect(image, &self.names, self.settings.detection_threshold)?;
        let raw_detections = raw.len();
        if raw.is_empty() {
            return Ok(ImageOutcome { annotations: Vec::new(), raw_detections, clusters: 0, needs_manual: true });
        }
        let mut verified = Vec::with_capacity(raw.len());
        for det in raw {
            if let Some(v) = self.verify(image, det)? {
                verified.push(v);
            }
        }
        let boxes: Vec<BBox<f64>> = verified.iter().map(|v| v.detection.bbox).collect();
        let graph = build_cluster_graph(&boxes, self.settings.cluster_iou_threshold);
        let mut resolved = Vec::with_capacity(graph.components.len());
        for comp in &graph.components {
            resolved.push(self.resolve_cluster(image, &verified, comp)?);
        }
        let resolved = self.drop_fallback_overlaps(resolved);

        let (state, min_conf) = match self.settings.acceptance_mode {
            AcceptanceMode::BlindTrust => (AnnotationState::Accepted, 0.0),
            AcceptanceMode::LiveFilter => (AnnotationState::Pending, self.settings.min_confidence_filter),
        };
        let mut annotations = Vec::with_capacity(resolved.len());
        for r in resolved {
            let confidence = r.verified_score.unwrap_or(r.detector_score);
            if confidence < min_conf {
                continue;
            }
            annotations.push(NewAnnotation {
                class_id: self.class_id(r.class_index),
                geometry: self.shape_for(image, &r.bbox)?,
                detector_score: Some(r.detector_score),
                verified_score: r.verified_score,
                source: AnnotationSource::Auto,
                state,
            });
        }
        Ok(ImageOutcome { annotations, raw_detections, clusters: graph.components.len(), needs_manual: false })
    }

    /// A union-box fallback can overlap another cluster's result; keep the
    /// more confident of any same-label pair above the cluster threshold.
    fn drop_fallback_overlaps(&self, resolved: Vec<Resolved>) -> Vec<Resolved> {
        if resolved.iter().all(|r| r.member.is_some()) {
            return resolved;
        }
        let conf = |r: &Resolved| r.verified_score.unwrap_or(r.detector_score);
        let mut keep = vec![true; resolved.len()];
        for i in 0..resolved.len() {
            for j in i + 1..resolved.len() {
                let (a, b) = (&resolved[i], &resolved[j]);
                if keep[i]
                    && keep[j]
                    && a.class_index == b.class_index
                    && iou(&a.bbox, &b.bbox) > self.settings.cluster_iou_threshold
                {
                    if conf(b) > conf(a) {
                        keep[i] = false;
                    } else {
                        keep[j] = false;
                    }
                }
            }
        }
        resolved.into_iter().zip(keep).filter_map(|(r, k)| k.then_some(r)).collect()
    }
}
