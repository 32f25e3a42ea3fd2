//! Seeded synthetic scenes with planted ground truth, for demos and for
//! measuring the pipeline against the mock providers.
//!
//! Each object is painted in its class color on the mock background, with a
//! gap between objects so same-colored neighbors never merge.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox, OrientedBox, Point, Polygon};
use crate::model::{AnnotationSource, AnnotationState, NewAnnotation, Project, ProjectMode};
use crate::providers::mock::{class_color, BACKGROUND};
use crate::store::{Store, StoreError};
use crate::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Rect,
    Ellipse,
    Rotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub classes: Vec<String>,
    /// Inclusive range of objects per scene.
    pub objects: (usize, usize),
    /// Inclusive range of object side lengths in pixels.
    pub size: (u32, u32),
    pub shapes: Vec<ObjectShape>,
    /// Minimum background gap between objects.
    pub margin: u32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            classes: vec!["cat".into(), "dog".into(), "bird".into()],
            objects: (1, 4),
            size: (14, 40),
            shapes: vec![ObjectShape::Rect],
            margin: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub class: String,
    pub shape: ObjectShape,
    /// Tight box around the painted pixels (pixel-edge coordinates).
    pub bbox: BBox<f64>,
    /// The rotated rectangle for [`ObjectShape::Rotated`].
    pub obb: Option<OrientedBox<f64>>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RgbImage,
    pub objects: Vec<PlantedObject>,
}

/// Ground truth of a folder written by [`write_folder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub classes: Vec<String>,
    pub images: Vec<GroundTruthImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthImage {
    pub file_name: String,
    pub objects: Vec<PlantedObject>,
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

fn paint(img: &mut RgbImage, class: &str, shape: ObjectShape, rng: &mut ChaCha8Rng, slot: &BBox<f64>) -> PlantedObject {
    let color = class_color(class);
    let (cx, cy) = (slot.center().x, slot.center().y);
    let (hw, hh) = (slot.width() / 2.0, slot.height() / 2.0);
    let obb = match shape {
        ObjectShape::Rotated => {
            // fit a rotated rectangle inside the slot's inscribed circle
            let r = hw.min(hh);
            let theta = rng.random_range(-0.7..0.7f64);
            let long = r * rng.random_range(1.2..1.9f64);
            let short = r * rng.random_range(0.5..0.9f64);
            let scale = r / (long.hypot(short) / 2.0).max(r);
            OrientedBox::new(cx, cy, long * scale, short * scale, theta).ok()
        }
        _ => None,
    };
    let inside = |x: f64, y: f64| -> bool {
        match shape {
            ObjectShape::Rect => slot.contains_point(Point::new(x, y)) && x < slot.x2 && y < slot.y2,
            ObjectShape::Ellipse => {
                let (dx, dy) = ((x - cx) / hw, (y - cy) / hh);
                dx * dx + dy * dy <= 1.0
            }
            ObjectShape::Rotated => {
                let o = obb.expect("rotated box");
                let (c, s) = (o.theta.cos(), o.theta.sin());
                let (dx, dy) = (x - o.cx, y - o.cy);
                (dx * c + dy * s).abs() <= o.w / 2.0 && (-dx * s + dy * c).abs() <= o.h / 2.0
            }
        }
    };
    let (mut x1, mut y1, mut x2, mut y2) = (u32::MAX, u32::MAX, 0, 0);
    for y in slot.y1 as u32..(slot.y2.ceil() as u32).min(img.height()) {
        for x in slot.x1 as u32..(slot.x2.ceil() as u32).min(img.width()) {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                img.put_pixel(x, y, color);
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    PlantedObject {
        class: class.to_string(),
        shape,
        bbox: BBox { x1: x1 as f64, y1: y1 as f64, x2: x2 as f64, y2: y2 as f64 },
        obb,
    }
}

/// One scene. Placement uses rejection sampling, so crowded specs may plant
/// fewer objects than requested (never zero when one fits).
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Scene {
    assert!(!spec.classes.is_empty() && !spec.shapes.is_empty(), "scene spec needs classes and shapes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::from_pixel(spec.width, spec.height, BACKGROUND);
    let want = rng.random_range(spec.objects.0..=spec.objects.1);
    let mut slots: Vec<BBox<f64>> = Vec::new();
    let mut objects = Vec::new();
    let gap = spec.margin as f64;
    for _ in 0..want {
        for _attempt in 0..200 {
            let w = rng.random_range(spec.size.0..=spec.size.1).min(spec.width) as f64;
            let h = rng.random_range(spec.size.0..=spec.size.1).min(spec.height) as f64;
            let x = rng.random_range(0..=(spec.width - w as u32)) as f64;
            let y = rng.random_range(0..=(spec.height - h as u32)) as f64;
            let slot = BBox { x1: x, y1: y, x2: x + w, y2: y + h };
            let grown = BBox { x1: x - gap, y1: y - gap, x2: x + w + gap, y2: y + h + gap };
            if slots.iter().any(|s| grown.intersection(s).is_some_and(|i| i.area() > 0.0 || gap > 0.0)) {
                continue;
            }
            let class = spec.classes[rng.random_range(0..spec.classes.len())].clone();
            let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
            objects.push(paint(&mut img, &class, shape, &mut rng, &slot));
            slots.push(slot);
            break;
        }
    }
    Scene { image: img, objects }
}

/// Writes `count` PNG scenes plus [`GROUND_TRUTH_FILE`] into `dir`.
/// Scene `i` uses seed `seed + i`.
pub fn write_folder(dir: &Path, spec: &SceneSpec, count: usize, seed: u64) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_scene(spec, seed.wrapping_add(i as u64));
        let file_name = format!("scene_{i:04}.png");
        let path = dir.join(&file_name);
        scene.image.save(&path).map_err(std::io::Error::other)?;
        paths.push(path);
        images.push(GroundTruthImage { file_name, objects: scene.objects });
    }
    let truth = GroundTruth { seed, classes: spec.classes.clone(), images };
    std::fs::write(dir.join(GROUND_TRUTH_FILE), serde_json::to_vec_pretty(&truth).map_err(std::io::Error::other)?)?;
    Ok(paths)
}

const CLASS_POOL: [&str; 8] = ["cat", "dog", "bird", "car", "person", "traffic light", "boat", "horse"];

/// Limits for [`random_project`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomProjectSpec {
    pub max_images: usize,
    pub max_annotations: usize,
    pub max_classes: usize,
}

impl Default for RandomProjectSpec {
    fn default() -> Self {
        Self { max_images: 20, max_annotations: 200, max_classes: 5 }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, mode: ProjectMode, w: f64, h: f64) -> Shape {
    let bbox = |rng: &mut ChaCha8Rng| {
        let bw = rng.random_range(1.0..=w);
        let bh = rng.random_range(1.0..=h);
        let x = rng.random_range(0.0..=w - bw);
        let y = rng.random_range(0.0..=h - bh);
        Shape::Bbox(BBox { x1: x, y1: y, x2: x + bw, y2: y + bh })
    };
    let plain_box = rng.random_bool(0.3);
    match mode {
        ProjectMode::Detection => bbox(rng),
        _ if plain_box => bbox(rng),
        ProjectMode::Obb => loop {
            let o = OrientedBox::new(
                rng.random_range(0.0..w),
                rng.random_range(0.0..h),
                rng.random_range(2.0..=w.max(2.0)),
                rng.random_range(2.0..=h.max(2.0)),
                rng.random_range(-3.2..3.2),
            )
            .expect("finite, nonnegative sides");
            let s = Shape::Obb(o);
            if s.within(w, h) {
                break s;
            }
        },
        ProjectMode::Segmentation => {
            // star-shaped ring: sorted angles, radii within the frame
            let n = rng.random_range(3..=12);
            let (cx, cy) = (rng.random_range(w * 0.25..=w * 0.75), rng.random_range(h * 0.25..=h * 0.75));
            let rmax = cx.min(w - cx).min(cy).min(h - cy);
            let mut angles: Vec<f64> = (0..n).map(|i| (i as f64 + rng.random_range(0.1..0.9)) * std::f64::consts::TAU / n as f64).collect();
            angles.sort_by(f64::total_cmp);
            let pts = angles
                .iter()
                .map(|a| {
                    let r = rng.random_range(0.3..=1.0) * rmax;
                    Point::new(cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            Shape::Polygon { points: Polygon::new(pts).expect("distinct vertices") }
        }
    }
}

/// Creates a seeded project with up to `spec` images, classes and accepted
/// annotations. Image files are written to `image_dir` as small placeholders
/// (the store only needs them to exist); their registered sizes vary.
pub fn random_project(
    store: &Store,
    name: &str,
    mode: ProjectMode,
    image_dir: &Path,
    spec: RandomProjectSpec,
    seed: u64,
) -> Result<Project, StoreError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = rng.random_range(1..=spec.max_classes.clamp(1, CLASS_POOL.len()));
    let mut pool: Vec<&str> = CLASS_POOL.to_vec();
    let mut classes = Vec::new();
    for _ in 0..n_classes {
        classes.push(pool.remove(rng.random_range(0..pool.len())).to_string());
    }
    let project = store.create_project(name, mode, &classes, Default::default())?;
    let class_ids: Vec<i64> = store.classes(project.id)?.iter().map(|c| c.id).collect();
    std::fs::create_dir_all(image_dir)?;
    let n_images = rng.random_range(0..=spec.max_images);
    let mut budget = spec.max_annotations;
    for i in 0..n_images {
        let (w, h) = (rng.random_range(32..=640u32), rng.random_range(32..=480u32));
        let path = image_dir.join(format!("img_{i:03}.png"));
        std::fs::write(&path, b"placeholder")?;
        let img = store.add_image(project.id, &path, w, h)?;
        let k = rng.random_range(0..=budget.min(20));
        budget -= k;
        let items: Vec<NewAnnotation> = (0..k)
            .map(|_| NewAnnotation {
                class_id: class_ids[rng.random_range(0..class_ids.len())],
                geometry: random_shape(&mut rng, mode, w as f64, h as f64),
                detector_score: rng.random_bool(0.5).then(|| rng.random_range(0.0..=1.0)),
                verified_score: rng.random_bool(0.5).then(|| rng.random_range(0.0..=1.0)),
                source: AnnotationSource::ALL[rng.random_range(0..AnnotationSource::ALL.len())],
                state: AnnotationState::Accepted,
            })
            .collect();
        let report = store.upsert_annotations(img.id, &items, &[])?;
        debug_assert!(report.rejected.is_empty(), "{:?}", report.rejected);
    }
    Ok(project)
}

/// Detection-quality counts from greedy one-to-one matching.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl MatchCounts {
    pub fn precision(&self) -> f64 {
        let d = self.true_positives + self.false_positives;
        if d == 0 {
            1.0
        } else {
            self.true_positives as f64 / d as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let d = self.true_positives + self.false_negatives;
        if d == 0 {
            1.0
        } else {
            self.true_positives as f64 / d as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let d = 2 * self.true_positives + self.false_positives + self.false_negatives;
        if d == 0 {
            1.0
        } else {
            2.0 * self.true_positives as f64 / d as f64
        }
    }
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        self.true_positives += o.true_positives;
        self.false_positives += o.false_positives;
        self.false_negatives += o.false_negatives;
    }
}

/// Each prediction (in the given order) claims the unmatched truth of the
/// same label with the highest IoU, if that IoU reaches `iou_threshold`.
pub fn match_detections(truth: &[(String, BBox<f64>)], predicted: &[(String, BBox<f64>)], iou_threshold: f64) -> MatchCounts {
    let mut used = vec![false; truth.len()];
    let mut counts = MatchCounts::default();
    for (label, b) in predicted {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(i, (l, _))| !used[*i] && l == label)
            .map(|(i, (_, t))| (i, iou(t, b)))
            .filter(|&(_, v)| v >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((i, _)) => {
                used[i] = true;
                counts.true_positives += 1;
            }
            None => counts.false_positives += 1,
        }
    }
    counts.false_negatives = used.iter().filter(|u| !**u).count();
    counts
}
