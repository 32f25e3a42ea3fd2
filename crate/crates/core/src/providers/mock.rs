//! Deterministic mock providers over synthetic images.
//!
//! Objects are solid rectangles painted in a per-class color (see
//! [`class_color`]) over a flat [`BACKGROUND`]. The mock detector recovers
//! them by color segmentation and then injects configurable noise
//! (duplicates, jitter, mislabels, false positives). The mock embedding space
//! gives each world class an orthonormal basis vector; a crop embeds as the
//! pixel-fraction mix of the class vectors it covers, plus optional Gaussian
//! noise, re-normalized.

use std::collections::HashMap;

use image::Rgb;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_seed, check_threshold, crop_region, normalize_label, sort_detections, Detection, Detector, Embedder, Embedding,
    ImageHandle, MaskGenerator, MaskSeed, ProviderError,
};
use crate::geometry::{iou, BBox};
use crate::postprocess::BinaryMask;

pub const BACKGROUND: Rgb<u8> = Rgb([40, 40, 40]);

/// Extra embedding dimensions reserved for labels outside the world.
const FOREIGN_DIMS: usize = 16;

/// Stable color for a class name, derived from its normalized form.
pub fn class_color(name: &str) -> Rgb<u8> {
    let digest = Sha256::digest(normalize_label(name).as_bytes());
    let mut c = [digest[0], digest[1], digest[2]];
    if Rgb(c) == BACKGROUND {
        c[0] ^= 0x80;
    }
    Rgb(c)
}

fn seed_for(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Class list shared by the mock detector and embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct MockWorld {
    classes: Vec<String>,
    index: HashMap<String, usize>,
    colors: HashMap<Rgb<u8>, usize>,
}

impl MockWorld {
    pub fn new(classes: Vec<String>) -> Self {
        let classes: Vec<String> = classes.iter().map(|c| normalize_label(c)).collect();
        let index = classes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        let colors = classes.iter().enumerate().map(|(i, c)| (class_color(c), i)).collect();
        Self { classes, index, colors }
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    fn dim(&self) -> usize {
        self.classes.len() + 1 + FOREIGN_DIMS
    }

    fn background_dim(&self) -> usize {
        self.classes.len()
    }

    /// Connected regions (4-connectivity) painted in `color`, as pixel-edge
    /// bounding boxes.
    fn regions(&self, image: &ImageHandle, color: Rgb<u8>) -> Vec<BBox<f64>> {
        let px = image.pixels();
        let (w, h) = (px.width() as usize, px.height() as usize);
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        for start in 0..w * h {
            if seen[start] || *px.get_pixel((start % w) as u32, (start / w) as u32) != color {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
                let mut push = |j: usize| {
                    if !seen[j] && *px.get_pixel((j % w) as u32, (j / w) as u32) == color {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
            out.push(BBox { x1: x1 as f64, y1: y1 as f64, x2: x2 as f64, y2: y2 as f64 });
        }
        out
    }
}

/// Noise injected by the mock detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorNoise {
    /// Inclusive range of detections emitted per planted object.
    pub duplicates: (usize, usize),
    /// Per-edge jitter as a fraction of the object's side length.
    pub jitter: f64,
    /// Probability that a detection carries a wrong class name.
    pub mislabel_prob: f64,
    /// Random background boxes per image.
    pub false_positives: usize,
    /// Score range for true detections.
    pub score_range: (f64, f64),
    /// Score range for false positives.
    pub false_positive_scores: (f64, f64),
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            duplicates: (1, 1),
            jitter: 0.0,
            mislabel_prob: 0.0,
            false_positives: 0,
            score_range: (0.3, 0.95),
            false_positive_scores: (0.05, 0.3),
        }
    }
}

impl DetectorNoise {
    pub fn validate(&self) -> Result<(), ProviderError> {
        let unit = |r: (f64, f64)| 0.0 <= r.0 && r.0 <= r.1 && r.1 < 1.0;
        if self.duplicates.0 == 0 || self.duplicates.0 > self.duplicates.1 {
            return Err(ProviderError::Input("duplicates range must satisfy 1 <= min <= max".into()));
        }
        if !(0.0..0.25).contains(&self.jitter) || !(0.0..=1.0).contains(&self.mislabel_prob) {
            return Err(ProviderError::Input("jitter must be in [0, 0.25) and mislabel_prob in [0, 1]".into()));
        }
        if !unit(self.score_range) || !unit(self.false_positive_scores) {
            return Err(ProviderError::Input("score ranges must be ordered subranges of [0, 1)".into()));
        }
        Ok(())
    }
}

/// Minimum pairwise IoU among duplicates of one planted object.
pub const DUPLICATE_MIN_IOU: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct MockDetector {
    world: MockWorld,
    noise: DetectorNoise,
    seed: u64,
}

impl MockDetector {
    pub fn new(world: MockWorld, noise: DetectorNoise, seed: u64) -> Self {
        Self { world, noise, seed }
    }

    fn jittered(&self, rng: &mut ChaCha8Rng, obj: &BBox<f64>, others: &[BBox<f64>]) -> BBox<f64> {
        if self.noise.jitter == 0.0 {
            return *obj;
        }
        let (w, h) = (obj.width(), obj.height());
        for _ in 0..64 {
            let j = self.noise.jitter;
            let mut d = || rng.random_range(-j..=j);
            let cand = BBox {
                x1: obj.x1 + d() * w,
                y1: obj.y1 + d() * h,
                x2: obj.x2 + d() * w,
                y2: obj.y2 + d() * h,
            };
            if cand.x1 < cand.x2 && cand.y1 < cand.y2 && others.iter().all(|o| iou(o, &cand) > DUPLICATE_MIN_IOU) {
                return cand;
            }
        }
        others.first().copied().unwrap_or(*obj)
    }
}

impl Detector for MockDetector {
    fn detect(&self, image: &ImageHandle, class_names: &[String], threshold: f64) -> Result<Vec<Detection>, ProviderError> {
        check_threshold(threshold)?;
        let names: Vec<String> = class_names.iter().map(|c| normalize_label(c)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(&[&self.seed.to_le_bytes(), image.key().as_bytes(), b"detect"]));
        let (iw, ih) = (image.width() as f64, image.height() as f64);
        let mut dets = Vec::new();
        for (ci, name) in names.iter().enumerate() {
            for obj in self.world.regions(image, class_color(name)) {
                let (lo, hi) = self.noise.duplicates;
                let copies = rng.random_range(lo..=hi);
                let mut emitted: Vec<BBox<f64>> = Vec::with_capacity(copies);
                for _ in 0..copies {
                    let b = self.jittered(&mut rng, &obj, &emitted);
                    emitted.push(b);
                    let label = if names.len() > 1 && rng.random_bool(self.noise.mislabel_prob) {
                        let k = rng.random_range(0..names.len() - 1);
                        names[if k >= ci { k + 1 } else { k }].clone()
                    } else {
                        name.clone()
                    };
                    let (s0, s1) = self.noise.score_range;
                    let score = rng.random_range(s0..=s1);
                    dets.push(Detection { bbox: b.clip(iw, ih), label_text: label, score });
                }
            }
        }
        if !names.is_empty() {
            for _ in 0..self.noise.false_positives {
                let w = rng.random_range(0.05..0.3) * iw;
                let h = rng.random_range(0.05..0.3) * ih;
                let x = rng.random_range(0.0..(iw - w));
                let y = rng.random_range(0.0..(ih - h));
                let label = names[rng.random_range(0..names.len())].clone();
                let (s0, s1) = self.noise.false_positive_scores;
                let score = rng.random_range(s0..=s1);
                dets.push(Detection { bbox: BBox { x1: x, y1: y, x2: x + w, y2: y + h }, label_text: label, score });
            }
        }
        dets.retain(|d| d.score >= threshold && d.bbox.area() > 0.0);
        sort_detections(&mut dets);
        Ok(dets)
    }
}

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    world: MockWorld,
    noise: f64,
    seed: u64,
}

impl MockEmbedder {
    pub fn new(world: MockWorld, noise: f64, seed: u64) -> Self {
        Self { world, noise, seed }
    }

    fn text_vector(&self, label: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.world.dim()];
        let name = normalize_label(label);
        match self.world.index.get(&name) {
            Some(&i) => v[i] = 1.0,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed_for(&[name.as_bytes(), b"text"]));
                let off = self.world.background_dim() + 1;
                for x in &mut v[off..] {
                    *x = rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        v
    }
}

impl Embedder for MockEmbedder {
    fn embed_image_crop(&self, image: &ImageHandle, bbox: &BBox<f64>) -> Result<Embedding, ProviderError> {
        let region = crop_region(image, bbox)?;
        let px = image.pixels();
        let (x0, y0) = (region.x1.floor() as u32, region.y1.floor() as u32);
        let (x1, y1) = ((region.x2.ceil() as u32).min(px.width()), (region.y2.ceil() as u32).min(px.height()));
        let mut v = vec![0.0; self.world.dim()];
        for y in y0..y1 {
            for x in x0..x1 {
                let slot = self.world.colors.get(px.get_pixel(x, y)).copied().unwrap_or(self.world.background_dim());
                v[slot] += 1.0;
            }
        }
        if self.noise > 0.0 {
            let total: f64 = v.iter().sum();
            let bits: Vec<u8> = [bbox.x1, bbox.y1, bbox.x2, bbox.y2].iter().flat_map(|f| f.to_le_bytes()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed_for(&[&self.seed.to_le_bytes(), image.key().as_bytes(), &bits]));
            for x in &mut v {
                *x = *x / total + self.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Embedding::normalized(v)
    }

    fn embed_texts(&self, labels: &[String]) -> Result<Vec<Embedding>, ProviderError> {
        if labels.is_empty() {
            return Err(ProviderError::Input("embed_texts needs at least one label".into()));
        }
        labels
            .iter()
            .map(|l| {
                if normalize_label(l).is_empty() {
                    return Err(ProviderError::Input("empty label".into()));
                }
                Embedding::normalized(self.text_vector(l))
            })
            .collect()
    }
}

/// Box seeds select the non-background pixels inside the box (or the whole
/// box when there are none); point seeds draw a disk of `click_radius`.
#[derive(Debug, Clone)]
pub struct MockMasker {
    pub click_radius: f64,
}

impl Default for MockMasker {
    fn default() -> Self {
        Self { click_radius: 12.0 }
    }
}

impl MaskGenerator for MockMasker {
    fn generate_mask(&self, image: &ImageHandle, seed: &MaskSeed) -> Result<BinaryMask, ProviderError> {
        check_seed(image, seed)?;
        let (w, h) = (image.width() as usize, image.height() as usize);
        let mut mask = BinaryMask::empty(w, h).map_err(|e| ProviderError::Input(e.to_string()))?;
        match seed {
            MaskSeed::Box(b) => {
                // keep the painted pixels under the box; an all-background
                // box falls back to the box itself
                mask.fill_box(b);
                let px = image.pixels();
                let mut object = mask.clone();
                for y in 0..h {
                    for x in 0..w {
                        if object.get(x as i64, y as i64) && *px.get_pixel(x as u32, y as u32) == BACKGROUND {
                            object.set(x, y, false);
                        }
                    }
                }
                if object.count() > 0 {
                    mask = object;
                }
            }
            MaskSeed::Point(p) => {
                let r2 = self.click_radius * self.click_radius;
                for y in 0..h {
                    for x in 0..w {
                        let (dx, dy) = (x as f64 - p.x, y as f64 - p.y);
                        if dx * dx + dy * dy <= r2 {
                            mask.set(x, y, true);
                        }
                    }
                }
            }
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use image::RgbImage;

    fn scene(objects: &[(&str, [u32; 4])]) -> ImageHandle {
        let mut img = RgbImage::from_pixel(100, 100, BACKGROUND);
        for (name, [x1, y1, x2, y2]) in objects {
            for y in *y1..*y2 {
                for x in *x1..*x2 {
                    img.put_pixel(x, y, class_color(name));
                }
            }
        }
        ImageHandle::from_rgb(img)
    }

    fn world() -> MockWorld {
        MockWorld::new(vec!["cat".into(), "dog".into()])
    }

    fn names() -> Vec<String> {
        vec!["cat".into(), "dog".into()]
    }

    #[test]
    fn detects_planted_object() {
        let img = scene(&[("cat", [10, 10, 50, 50])]);
        let det = MockDetector::new(world(), DetectorNoise::default(), 1);
        let out = det.detect(&img, &names(), 0.0).unwrap();
        let planted = BBox::new(10.0, 10.0, 50.0, 50.0).unwrap();
        assert!(out.iter().any(|d| d.label_text == "cat" && iou(&d.bbox, &planted) >= 0.5));
    }

    #[test]
    fn threshold_filters() {
        let img = scene(&[("cat", [10, 10, 50, 50]), ("dog", [60, 60, 90, 90])]);
        let noise = DetectorNoise { duplicates: (2, 4), jitter: 0.02, false_positives: 3, ..Default::default() };
        let det = MockDetector::new(world(), noise, 3);
        assert!(det.detect(&img, &names(), 1.0).unwrap().is_empty());
        let out = det.detect(&img, &names(), 0.2).unwrap();
        assert!(!out.is_empty());
        assert!(out.iter().all(|d| d.score >= 0.2));
        assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(det.detect(&img, &names(), 1.5).is_err());
    }

    #[test]
    fn duplicates_overlap_strongly() {
        let img = scene(&[("cat", [10, 10, 50, 50])]);
        let noise = DetectorNoise { duplicates: (5, 5), jitter: 0.03, ..Default::default() };
        let out = MockDetector::new(world(), noise, 9).detect(&img, &names(), 0.0).unwrap();
        assert_eq!(out.len(), 5);
        for a in &out {
            for b in &out {
                assert!(iou(&a.bbox, &b.bbox) > DUPLICATE_MIN_IOU);
            }
        }
    }

    #[test]
    fn detection_is_deterministic() {
        let img = scene(&[("cat", [10, 10, 50, 50]), ("dog", [60, 10, 90, 40])]);
        let noise = DetectorNoise { duplicates: (1, 5), jitter: 0.02, mislabel_prob: 0.5, ..Default::default() };
        let det = MockDetector::new(world(), noise.clone(), 42);
        assert_eq!(det.detect(&img, &names(), 0.0).unwrap(), det.detect(&img, &names(), 0.0).unwrap());
        let other = MockDetector::new(world(), noise, 43);
        assert_ne!(det.detect(&img, &names(), 0.0).unwrap(), other.detect(&img, &names(), 0.0).unwrap());
    }

    #[test]
    fn crop_embedding_aligns_with_class() {
        let img = scene(&[("cat", [10, 10, 50, 50])]);
        let emb = MockEmbedder::new(world(), 0.0, 0);
        let crop = emb.embed_image_crop(&img, &BBox::new(8.0, 8.0, 52.0, 52.0).unwrap()).unwrap();
        assert!((crop.norm() - 1.0).abs() < 1e-6);
        let t = emb.embed_texts(&names()).unwrap();
        assert!(crop.dot(&t[0]) > crop.dot(&t[1]));
        let again = emb.embed_image_crop(&img, &BBox::new(8.0, 8.0, 52.0, 52.0).unwrap()).unwrap();
        assert_eq!(crop, again);
    }

    #[test]
    fn noisy_crop_embedding_still_unit_and_deterministic() {
        let img = scene(&[("cat", [10, 10, 50, 50])]);
        let emb = MockEmbedder::new(world(), 0.3, 5);
        let b = BBox::new(10.0, 10.0, 50.0, 50.0).unwrap();
        let a = emb.embed_image_crop(&img, &b).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert_eq!(a, emb.embed_image_crop(&img, &b).unwrap());
    }

    #[test]
    fn empty_crop_is_input_error() {
        let img = scene(&[]);
        let emb = MockEmbedder::new(world(), 0.0, 0);
        let outside = BBox::new(200.0, 200.0, 210.0, 210.0).unwrap();
        assert!(matches!(emb.embed_image_crop(&img, &outside), Err(ProviderError::Input(_))));
    }

    #[test]
    fn text_embeddings() {
        let emb = MockEmbedder::new(world(), 0.0, 0);
        let one = emb.embed_texts(&["cat".into()]).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0].norm() - 1.0).abs() < 1e-12);
        let twin = emb.embed_texts(&["cat".into(), "cat".into()]).unwrap();
        assert_eq!(twin[0], twin[1]);
        let cd = emb.embed_texts(&names()).unwrap();
        assert_eq!(cd[0].dot(&cd[1]), 0.0);
        let foreign = emb.embed_texts(&["zebra crossing".into()]).unwrap();
        assert!((foreign[0].norm() - 1.0).abs() < 1e-12);
        assert_eq!(foreign[0].dot(&cd[0]), 0.0);
        assert!(emb.embed_texts(&[]).is_err());
        assert!(emb.embed_texts(&[" ".into()]).is_err());
    }

    #[test]
    fn mask_from_box_seed() {
        let img = ImageHandle::from_rgb(RgbImage::new(64, 64));
        let b = BBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        let m = MockMasker::default().generate_mask(&img, &MaskSeed::Box(b)).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(m.get(x, y), (10..20).contains(&x) && (10..20).contains(&y));
            }
        }
    }

    #[test]
    fn box_seed_keeps_only_painted_pixels() {
        let img = scene(&[("cat", [20, 20, 30, 40])]);
        let b = BBox::new(10.0, 10.0, 50.0, 50.0).unwrap();
        let m = MockMasker::default().generate_mask(&img, &MaskSeed::Box(b)).unwrap();
        assert_eq!(m.count(), 10 * 20);
        assert!(m.get(20, 20) && m.get(29, 39) && !m.get(30, 20) && !m.get(15, 15));
        // nothing painted under the box: the box itself
        let m = MockMasker::default().generate_mask(&img, &MaskSeed::Box(BBox::new(60.0, 60.0, 70.0, 65.0).unwrap())).unwrap();
        assert_eq!(m.count(), 50);
    }

    #[test]
    fn mask_from_click_counts_lattice_points() {
        let img = ImageHandle::from_rgb(RgbImage::new(64, 64));
        let masker = MockMasker { click_radius: 3.0 };
        let m = masker.generate_mask(&img, &MaskSeed::Point(Point::new(5.0, 5.0))).unwrap();
        // lattice points with x^2 + y^2 <= 9, counted independently
        let expected = (-3i32..=3).flat_map(|x| (-3i32..=3).map(move |y| (x, y))).filter(|(x, y)| x * x + y * y <= 9).count();
        assert_eq!(expected, 29);
        assert_eq!(m.count(), expected);
    }

    #[test]
    fn mask_seed_outside_is_input_error() {
        let img = ImageHandle::from_rgb(RgbImage::new(64, 64));
        let masker = MockMasker::default();
        assert!(masker.generate_mask(&img, &MaskSeed::Point(Point::new(70.0, 5.0))).is_err());
        let b = BBox::new(50.0, 50.0, 70.0, 60.0).unwrap();
        assert!(masker.generate_mask(&img, &MaskSeed::Box(b)).is_err());
    }

    #[test]
    fn class_colors_distinct_from_background() {
        for name in ["cat", "dog", "person", "vase", "motorcycle"] {
            assert_ne!(class_color(name), BACKGROUND);
        }
        assert_eq!(class_color("Cat "), class_color("cat"));
    }
}
