//! Dataset interchange: COCO JSON, YOLO TXT + YAML, Pascal VOC XML and CSV.
//!
//! Exports are in-memory bundles (relative path to bytes); packaging them as
//! an archive is left to the caller. Imports merge into an existing project,
//! matching images by case-insensitive file stem.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{min_area_obb, BBox, OrientedBox, Point, Polygon};
use crate::model::{Annotation, AnnotationSource, AnnotationState, ImageId, ImageRecord, NewAnnotation, ProjectId, ProjectMode};
use crate::store::{Store, StoreError};
use crate::Shape;

mod coco;
mod csv;
mod voc;
mod xml;
mod yolo;

pub use self::csv::CSV_HEADER;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Coco,
    Yolo,
    Voc,
    Csv,
}

impl Format {
    pub const ALL: [Format; 4] = [Format::Coco, Format::Yolo, Format::Voc, Format::Csv];

    pub fn as_str(self) -> &'static str {
        match self {
            Format::Coco => "coco",
            Format::Yolo => "yolo",
            Format::Voc => "voc",
            Format::Csv => "csv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.as_str().eq_ignore_ascii_case(s.trim()))
    }

    /// Whether geometry of a project in `mode` can be written as stored.
    pub fn supports(self, mode: ProjectMode) -> bool {
        match mode {
            ProjectMode::Detection => true,
            ProjectMode::Obb => matches!(self, Format::Yolo | Format::Csv),
            ProjectMode::Segmentation => matches!(self, Format::Coco | Format::Yolo | Format::Csv),
        }
    }
}

impl std::fmt::Display for Format {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryPolicy {
    #[default]
    AsStored,
    /// Every shape is replaced by its axis-aligned bounding box.
    BoxesOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportOptions {
    pub policy: GeometryPolicy,
    /// Also export annotations still waiting for review.
    pub include_pending: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportBundle {
    pub format: Format,
    pub files: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("format {format} cannot hold {mode} geometry as stored (use boxes_only)")]
    Unsupported { mode: ProjectMode, format: Format },
    #[error("{file}{}: {message}", location.as_ref().map(|l| format!(" ({l})")).unwrap_or_default())]
    Parse { file: String, location: Option<String>, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl FormatError {
    pub(crate) fn parse(file: &str, location: Option<String>, message: impl Into<String>) -> Self {
        FormatError::Parse { file: file.to_string(), location, message: message.into() }
    }
}

/// A problem found by [`validate_bundle`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub file: String,
    pub location: Option<String>,
    pub message: String,
}

impl Diagnostic {
    pub(crate) fn new(file: &str, location: Option<String>, message: impl Into<String>) -> Self {
        Self { file: file.to_string(), location, message: message.into() }
    }
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.location {
            Some(l) => write!(f, "{} ({l}): {}", self.file, self.message),
            None => write!(f, "{}: {}", self.file, self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub file: String,
    pub location: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    /// Distinct project images that received at least one item.
    pub matched_images: usize,
    pub annotations_added: usize,
    pub created_classes: Vec<String>,
    pub skipped: Vec<SkippedItem>,
    /// Items identical (class and geometry) to an annotation already present.
    /// They are still added; merges are additive.
    pub duplicates: usize,
    /// Items whose geometry kind was converted to one the project allows.
    pub converted: usize,
    pub warnings: Vec<String>,
}

// ---- shared intermediate forms ----

/// Geometry as read from a file, before it is fitted to the project mode.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum RawGeometry {
    Box(BBox<f64>),
    Obb(OrientedBox<f64>),
    Polygon(Vec<Point<f64>>),
    /// Four corners from an 8-number YOLO line: an OBB in OBB projects, a
    /// polygon elsewhere.
    Corners(Vec<Point<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParsedItem {
    pub file: String,
    pub location: Option<String>,
    /// File name (or stem) the item belongs to.
    pub image: String,
    pub class: String,
    pub geometry: RawGeometry,
    /// YOLO coordinates are relative to the image size.
    pub normalized: bool,
    pub detector_score: Option<f64>,
    pub verified_score: Option<f64>,
    pub source: Option<AnnotationSource>,
}

#[derive(Debug, Default)]
pub(crate) struct Parsed {
    pub items: Vec<ParsedItem>,
    /// Classes named by the file's mapping, in file order.
    pub declared_classes: Vec<String>,
    pub skipped: Vec<SkippedItem>,
}

pub(crate) struct ExportImage {
    pub record: ImageRecord,
    /// `(class name, annotation)` in annotation-id order.
    pub annotations: Vec<(String, Annotation)>,
}

pub(crate) struct ExportData {
    /// Mode the geometry now conforms to (detection after `boxes_only`).
    pub mode: ProjectMode,
    /// Sorted by name.
    pub class_names: Vec<String>,
    pub images: Vec<ExportImage>,
}

pub(crate) fn stem(file_name: &str) -> String {
    let base = file_name.rsplit(['/', '\\']).next().unwrap_or(file_name);
    let s = match base.rfind('.') {
        Some(i) if i > 0 => &base[..i],
        _ => base,
    };
    s.to_lowercase()
}

/// Fixed-point text with trailing zeros trimmed down to `min_decimals`.
pub(crate) fn fmt_num(v: f64, decimals: usize, min_decimals: usize) -> String {
    let mut s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s.remove(0);
    }
    if let Some(dot) = s.find('.') {
        let keep = dot + 1 + min_decimals;
        while s.len() > keep && s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

fn boxes_only(shape: &Shape) -> Shape {
    Shape::Bbox(shape.bounding_box())
}

fn gather(store: &Store, project: ProjectId, format: Format, options: ExportOptions) -> Result<ExportData, FormatError> {
    let proj = store.project(project)?;
    let mode = match options.policy {
        GeometryPolicy::AsStored => proj.mode,
        GeometryPolicy::BoxesOnly => ProjectMode::Detection,
    };
    if !format.supports(mode) {
        return Err(FormatError::Unsupported { mode, format });
    }
    let classes = store.classes(project)?;
    let names: HashMap<i64, String> = classes.iter().map(|c| (c.id, c.name.clone())).collect();
    let mut class_names: Vec<String> = classes.into_iter().map(|c| c.name).collect();
    class_names.sort();

    let mut by_image: BTreeMap<ImageId, Vec<(String, Annotation)>> = BTreeMap::new();
    for mut a in store.project_annotations(project)? {
        if a.state == AnnotationState::Pending && !options.include_pending {
            continue;
        }
        if options.policy == GeometryPolicy::BoxesOnly {
            a.geometry = boxes_only(&a.geometry);
        }
        let name = names.get(&a.class_id).cloned().unwrap_or_default();
        by_image.entry(a.image_id).or_default().push((name, a));
    }
    let images = store
        .images(project)?
        .into_iter()
        .map(|record| {
            let annotations = by_image.remove(&record.id).unwrap_or_default();
            ExportImage { record, annotations }
        })
        .collect();
    Ok(ExportData { mode, class_names, images })
}

pub fn export_project(
    store: &Store,
    project: ProjectId,
    format: Format,
    options: ExportOptions,
) -> Result<ExportBundle, FormatError> {
    let data = gather(store, project, format, options)?;
    let files = match format {
        Format::Coco => coco::export(&data),
        Format::Yolo => yolo::export(&data),
        Format::Voc => voc::export(&data),
        Format::Csv => self::csv::export(&data),
    };
    Ok(ExportBundle { format, files })
}

/// Structural and semantic checks on a bundle. Never touches a project.
pub fn validate_bundle(format: Format, files: &BTreeMap<String, Vec<u8>>) -> Vec<Diagnostic> {
    match format {
        Format::Coco => coco::validate(files),
        Format::Yolo => yolo::validate(files),
        Format::Voc => voc::validate(files),
        Format::Csv => self::csv::validate(files),
    }
}

fn clamp_point(p: Point<f64>, w: f64, h: f64) -> Point<f64> {
    Point::new(p.x.clamp(0.0, w), p.y.clamp(0.0, h))
}

/// Overshoot tolerated (and clamped away) at the image frame, in pixels.
const FRAME_SNAP: f64 = 0.5;

fn snap_box(b: BBox<f64>, w: f64, h: f64) -> BBox<f64> {
    let near = b.x1 >= -FRAME_SNAP && b.y1 >= -FRAME_SNAP && b.x2 <= w + FRAME_SNAP && b.y2 <= h + FRAME_SNAP;
    if near {
        BBox { x1: b.x1.clamp(0.0, w), y1: b.y1.clamp(0.0, h), x2: b.x2.clamp(0.0, w), y2: b.y2.clamp(0.0, h) }
    } else {
        b
    }
}

fn snap_points(pts: Vec<Point<f64>>, w: f64, h: f64) -> Vec<Point<f64>> {
    let near = pts.iter().all(|p| p.x >= -FRAME_SNAP && p.y >= -FRAME_SNAP && p.x <= w + FRAME_SNAP && p.y <= h + FRAME_SNAP);
    if near {
        pts.into_iter().map(|p| clamp_point(p, w, h)).collect()
    } else {
        pts
    }
}

/// Turns raw geometry into a shape the project mode allows. The flag is set
/// when the geometry kind had to change.
fn fit_to_mode(raw: RawGeometry, mode: ProjectMode, w: f64, h: f64) -> Result<(Shape, bool), String> {
    let bad = |e: crate::geometry::GeometryError| format!("invalid geometry: {e}");
    let polygon = |pts: Vec<Point<f64>>| Polygon::new(snap_points(pts, w, h)).map_err(bad);
    Ok(match (raw, mode) {
        (RawGeometry::Box(b), _) => (Shape::Bbox(snap_box(BBox::new(b.x1, b.y1, b.x2, b.y2).map_err(bad)?, w, h)), false),
        (RawGeometry::Obb(o), ProjectMode::Obb) => (Shape::Obb(o), false),
        (RawGeometry::Obb(o), ProjectMode::Detection) => (Shape::Bbox(snap_box(o.bounding_box(), w, h)), true),
        (RawGeometry::Obb(o), ProjectMode::Segmentation) => (Shape::Polygon { points: polygon(o.corners().to_vec())? }, true),
        (RawGeometry::Corners(pts), ProjectMode::Obb) => {
            let arr: [Point<f64>; 4] = pts.try_into().map_err(|_| "expected four corners".to_string())?;
            (Shape::Obb(OrientedBox::from_corners(&arr).map_err(bad)?), false)
        }
        (RawGeometry::Polygon(pts), ProjectMode::Obb) => (Shape::Obb(min_area_obb(&pts).map_err(bad)?), true),
        (RawGeometry::Polygon(pts) | RawGeometry::Corners(pts), ProjectMode::Segmentation) => {
            (Shape::Polygon { points: polygon(pts)? }, false)
        }
        (RawGeometry::Polygon(pts) | RawGeometry::Corners(pts), ProjectMode::Detection) => {
            (Shape::Bbox(snap_box(BBox::enclosing(&pts).map_err(bad)?, w, h)), true)
        }
    })
}

fn denormalize(raw: RawGeometry, w: f64, h: f64) -> RawGeometry {
    let p = |q: &Point<f64>| Point::new(q.x * w, q.y * h);
    match raw {
        RawGeometry::Box(b) => RawGeometry::Box(BBox { x1: b.x1 * w, y1: b.y1 * h, x2: b.x2 * w, y2: b.y2 * h }),
        RawGeometry::Polygon(pts) => RawGeometry::Polygon(pts.iter().map(p).collect()),
        RawGeometry::Corners(pts) => RawGeometry::Corners(pts.iter().map(p).collect()),
        RawGeometry::Obb(o) => RawGeometry::Obb(o),
    }
}

/// Merges annotations from `files` into the project. Imported items are
/// accepted; their source is `manual` unless the file records one (CSV).
/// Existing annotations are never removed.
pub fn import_annotations(
    store: &Store,
    project: ProjectId,
    format: Format,
    files: &BTreeMap<String, Vec<u8>>,
) -> Result<ImportReport, FormatError> {
    let proj = store.project(project)?;
    let parsed = match format {
        Format::Coco => coco::parse(files)?,
        Format::Yolo => yolo::parse(files)?,
        Format::Voc => voc::parse(files)?,
        Format::Csv => self::csv::parse(files)?,
    };

    let mut report = ImportReport { skipped: parsed.skipped, ..Default::default() };
    let images = store.images(project)?;
    let mut by_stem: HashMap<String, &ImageRecord> = HashMap::new();
    for img in &images {
        if by_stem.insert(stem(&img.file_name), img).is_some() {
            report.warnings.push(format!("several images share the stem of {:?}; the last one receives imports", img.file_name));
        }
    }

    let mut classes: HashMap<String, i64> = store.classes(project)?.into_iter().map(|c| (c.name, c.id)).collect();
    let mut class_id = |name: &str, report: &mut ImportReport| -> Result<i64, FormatError> {
        let n = crate::providers::normalize_label(name);
        if let Some(&id) = classes.get(&n) {
            return Ok(id);
        }
        let (class, created) = store.ensure_class(project, &n)?;
        if created {
            report.created_classes.push(class.name.clone());
        }
        classes.insert(class.name.clone(), class.id);
        Ok(class.id)
    };
    for name in &parsed.declared_classes {
        if !crate::providers::normalize_label(name).is_empty() {
            class_id(name, &mut report)?;
        }
    }

    // (image, new annotations, source item positions for rejection mapping)
    let mut batches: BTreeMap<ImageId, (Vec<NewAnnotation>, Vec<(String, Option<String>)>)> = BTreeMap::new();
    for item in parsed.items {
        let skip = |reason: String| SkippedItem { file: item.file.clone(), location: item.location.clone(), reason };
        let Some(img) = by_stem.get(&stem(&item.image)) else {
            report.skipped.push(skip(format!("image {:?} not found in project", item.image)));
            continue;
        };
        if crate::providers::normalize_label(&item.class).is_empty() {
            report.skipped.push(skip("empty class name".into()));
            continue;
        }
        let (w, h) = (img.width as f64, img.height as f64);
        let raw = if item.normalized { denormalize(item.geometry.clone(), w, h) } else { item.geometry.clone() };
        let (geometry, converted) = match fit_to_mode(raw, proj.mode, w, h) {
            Ok(g) => g,
            Err(reason) => {
                report.skipped.push(skip(reason));
                continue;
            }
        };
        if converted {
            report.converted += 1;
        }
        let class_id = class_id(&item.class, &mut report)?;
        let entry = batches.entry(img.id).or_default();
        entry.0.push(NewAnnotation {
            class_id,
            geometry,
            detector_score: item.detector_score,
            verified_score: item.verified_score,
            source: item.source.unwrap_or(AnnotationSource::Manual),
            state: AnnotationState::Accepted,
        });
        entry.1.push((item.file, item.location));
    }

    // exact-duplicate warnings against what is already stored
    for (image, (items, _)) in &batches {
        let mut seen: HashSet<String> = store
            .annotations(*image)?
            .iter()
            .map(|a| format!("{}|{}", a.class_id, serde_json::to_string(&a.geometry).unwrap_or_default()))
            .collect();
        for it in items {
            let key = format!("{}|{}", it.class_id, serde_json::to_string(&it.geometry).unwrap_or_default());
            if !seen.insert(key) {
                report.duplicates += 1;
            }
        }
    }
    if report.duplicates > 0 {
        report.warnings.push(format!("{} imported items duplicate existing annotations", report.duplicates));
    }

    let batch: Vec<(ImageId, Vec<NewAnnotation>)> = batches.iter().map(|(id, (items, _))| (*id, items.clone())).collect();
    let results = store.upsert_many(project, &batch, &[])?;
    for ((_, (_, origins)), result) in batches.iter().zip(&results) {
        report.annotations_added += result.inserted;
        if result.inserted > 0 {
            report.matched_images += 1;
        }
        for (idx, reason) in &result.rejected {
            let (file, location) = origins[*idx].clone();
            report.skipped.push(SkippedItem { file, location, reason: reason.clone() });
        }
    }
    Ok(report)
}

impl Format {
    /// Coordinate tolerance for round-trip comparisons: half a pixel for
    /// pixel-space formats, 1e-6 for YOLO's normalized values, none for CSV.
    pub fn roundtrip_tolerance(self) -> f64 {
        match self {
            Format::Coco | Format::Voc => 0.5,
            Format::Yolo => 1e-6,
            Format::Csv => 0.0,
        }
    }
}

/// One annotation as a bundle file states it, for bundle-to-bundle
/// comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    /// Lowercase file stem of the image.
    pub image: String,
    pub class: String,
    pub kind: String,
    /// Box: x1, y1, x2, y2. Otherwise the vertex list flattened (oriented
    /// boxes as their corners).
    pub coords: Vec<f64>,
}

impl BundleEntry {
    fn from_item(item: ParsedItem) -> Self {
        let flat = |pts: &[Point<f64>]| pts.iter().flat_map(|p| [p.x, p.y]).collect::<Vec<_>>();
        let (kind, coords) = match &item.geometry {
            RawGeometry::Box(b) => ("bbox", vec![b.x1, b.y1, b.x2, b.y2]),
            RawGeometry::Obb(o) => ("ring", flat(&o.corners())),
            RawGeometry::Polygon(p) | RawGeometry::Corners(p) => ("ring", flat(p)),
        };
        Self { image: stem(&item.image), class: item.class, kind: kind.into(), coords }
    }
}

/// Entries and declared classes of a bundle, in file order.
pub fn read_bundle(format: Format, files: &BTreeMap<String, Vec<u8>>) -> Result<(Vec<BundleEntry>, Vec<String>), FormatError> {
    let parsed = match format {
        Format::Coco => coco::parse(files)?,
        Format::Yolo => yolo::parse(files)?,
        Format::Voc => voc::parse(files)?,
        Format::Csv => self::csv::parse(files)?,
    };
    Ok((parsed.items.into_iter().map(BundleEntry::from_item).collect(), parsed.declared_classes))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol + 1e-9)
}

/// Rings match up to starting vertex and winding.
fn rings_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    if a.len() != b.len() || a.len() % 2 != 0 {
        return false;
    }
    let n = a.len() / 2;
    let pt = |v: &[f64], i: usize| [v[2 * (i % n)], v[2 * (i % n) + 1]];
    (0..n).any(|shift| {
        let fwd = (0..n).all(|i| close(&pt(a, i), &pt(b, i + shift), tol));
        let rev = (0..n).all(|i| close(&pt(a, i), &pt(b, shift + n - i), tol));
        fwd || rev
    })
}

/// Differences between two bundles of the same format: file set, class
/// mapping, and every entry (labels exact, coordinates within `tolerance`).
/// Empty when equivalent.
pub fn bundle_differences(a: &ExportBundle, b: &ExportBundle, tolerance: f64) -> Result<Vec<String>, FormatError> {
    let mut diffs = Vec::new();
    if a.format != b.format {
        diffs.push(format!("formats differ: {} vs {}", a.format, b.format));
        return Ok(diffs);
    }
    let (ka, kb): (Vec<_>, Vec<_>) = (a.files.keys().collect(), b.files.keys().collect());
    if ka != kb {
        diffs.push(format!("file sets differ: {ka:?} vs {kb:?}"));
    }
    let (ea, ca) = read_bundle(a.format, &a.files)?;
    let (eb, cb) = read_bundle(b.format, &b.files)?;
    if ca != cb {
        diffs.push(format!("class mappings differ: {ca:?} vs {cb:?}"));
    }
    if ea.len() != eb.len() {
        diffs.push(format!("{} entries vs {}", ea.len(), eb.len()));
    }
    for (i, (x, y)) in ea.iter().zip(&eb).enumerate() {
        let same_geometry = x.kind == y.kind
            && if x.kind == "ring" { rings_close(&x.coords, &y.coords, tolerance) } else { close(&x.coords, &y.coords, tolerance) };
        if x.image != y.image || x.class != y.class || !same_geometry {
            diffs.push(format!("entry {i}: {x:?} vs {y:?}"));
        }
    }
    Ok(diffs)
}
