//! COCO detection JSON: `images`, `annotations`, `categories`; boxes are
//! `[x, y, width, height]`, polygons go in `segmentation` as flat rings.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Diagnostic, ExportData, FormatError, Parsed, ParsedItem, RawGeometry, SkippedItem};
use crate::geometry::Point;
use crate::Shape;

pub const FILE: &str = "annotations.json";

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    info: Option<Value>,
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: i64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: i64,
    image_id: i64,
    category_id: i64,
    bbox: Vec<f64>,
    #[serde(default)]
    segmentation: Value,
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: i64,
    name: String,
    #[serde(default)]
    supercategory: String,
}

pub(super) fn export(data: &ExportData) -> BTreeMap<String, Vec<u8>> {
    let categories: Vec<CocoCategory> = data
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| CocoCategory { id: i as i64 + 1, name: n.clone(), supercategory: String::new() })
        .collect();
    let cat_id: HashMap<&str, i64> = categories.iter().map(|c| (c.name.as_str(), c.id)).collect();
    let mut images = Vec::with_capacity(data.images.len());
    let mut annotations = Vec::new();
    for (i, img) in data.images.iter().enumerate() {
        let image_id = i as i64 + 1;
        images.push(CocoImage {
            id: image_id,
            file_name: img.record.file_name.clone(),
            width: img.record.width,
            height: img.record.height,
        });
        for (class, a) in &img.annotations {
            let bb = a.geometry.bounding_box();
            let (segmentation, area) = match &a.geometry {
                Shape::Polygon { points } => {
                    let ring: Vec<f64> = points.points().iter().flat_map(|p| [p.x, p.y]).collect();
                    (serde_json::json!([ring]), points.area())
                }
                _ => (serde_json::json!([]), bb.area()),
            };
            annotations.push(CocoAnnotation {
                id: annotations.len() as i64 + 1,
                image_id,
                category_id: cat_id[class.as_str()],
                bbox: vec![bb.x1, bb.y1, bb.width(), bb.height()],
                segmentation,
                area,
                iscrowd: 0,
            });
        }
    }
    let file = CocoFile { info: None, images, annotations, categories };
    let mut out = BTreeMap::new();
    out.insert(FILE.to_string(), serde_json::to_vec_pretty(&file).expect("coco serialize"));
    out
}

fn read(name: &str, bytes: &[u8]) -> Result<CocoFile, FormatError> {
    serde_json::from_slice(bytes)
        .map_err(|e| FormatError::parse(name, Some(format!("line {}, column {}", e.line(), e.column())), e.to_string()))
}

fn json_files(files: &BTreeMap<String, Vec<u8>>) -> impl Iterator<Item = (&String, &Vec<u8>)> {
    files.iter().filter(|(n, _)| n.to_lowercase().ends_with(".json"))
}

/// First polygon ring, if the segmentation holds one.
fn first_ring(seg: &Value) -> Result<Option<Vec<Point<f64>>>, String> {
    let Some(rings) = seg.as_array() else {
        return Ok(None); // RLE object or absent
    };
    let Some(ring) = rings.first() else {
        return Ok(None);
    };
    let nums: Vec<f64> = ring
        .as_array()
        .ok_or("segmentation ring is not an array")?
        .iter()
        .map(|v| v.as_f64().ok_or("segmentation value is not a number"))
        .collect::<Result<_, _>>()?;
    if nums.len() % 2 != 0 || nums.len() < 6 {
        return Err(format!("segmentation ring has {} numbers; need an even count of at least 6", nums.len()));
    }
    Ok(Some(nums.chunks(2).map(|c| Point::new(c[0], c[1])).collect()))
}

pub(super) fn parse(files: &BTreeMap<String, Vec<u8>>) -> Result<Parsed, FormatError> {
    let mut parsed = Parsed::default();
    let mut any = false;
    for (name, bytes) in json_files(files) {
        any = true;
        let coco = read(name, bytes)?;
        let images: HashMap<i64, &str> = coco.images.iter().map(|i| (i.id, i.file_name.as_str())).collect();
        let cats: HashMap<i64, &str> = coco.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
        parsed.declared_classes.extend(coco.categories.iter().map(|c| c.name.clone()));
        for (k, a) in coco.annotations.iter().enumerate() {
            let location = Some(format!("annotations[{k}] id {}", a.id));
            let skip = |reason: String| SkippedItem { file: name.clone(), location: location.clone(), reason };
            let Some(&image) = images.get(&a.image_id) else {
                parsed.skipped.push(skip(format!("unknown image id {}", a.image_id)));
                continue;
            };
            let Some(&class) = cats.get(&a.category_id) else {
                parsed.skipped.push(skip(format!("unknown category id {}", a.category_id)));
                continue;
            };
            let geometry = match first_ring(&a.segmentation) {
                Err(e) => {
                    parsed.skipped.push(skip(e));
                    continue;
                }
                Ok(Some(ring)) => RawGeometry::Polygon(ring),
                Ok(None) => {
                    let [x, y, w, h] = a.bbox[..] else {
                        parsed.skipped.push(skip(format!("bbox has {} values, expected 4", a.bbox.len())));
                        continue;
                    };
                    if !(w > 0.0 && h > 0.0) {
                        parsed.skipped.push(skip("degenerate box".into()));
                        continue;
                    }
                    RawGeometry::Box(crate::geometry::BBox { x1: x, y1: y, x2: x + w, y2: y + h })
                }
            };
            parsed.items.push(ParsedItem {
                file: name.clone(),
                location,
                image: image.to_string(),
                class: class.to_string(),
                geometry,
                normalized: false,
                detector_score: None,
                verified_score: None,
                source: None,
            });
        }
    }
    if !any {
        return Err(FormatError::parse("(bundle)", None, "no COCO JSON file found"));
    }
    Ok(parsed)
}

pub(super) fn validate(files: &BTreeMap<String, Vec<u8>>) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut any = false;
    for (name, bytes) in json_files(files) {
        any = true;
        let coco = match read(name, bytes) {
            Ok(c) => c,
            Err(FormatError::Parse { location, message, .. }) => {
                out.push(Diagnostic::new(name, location, message));
                continue;
            }
            Err(e) => {
                out.push(Diagnostic::new(name, None, e.to_string()));
                continue;
            }
        };
        let mut images = HashMap::new();
        for (k, img) in coco.images.iter().enumerate() {
            let loc = Some(format!("images[{k}]"));
            if images.insert(img.id, img).is_some() {
                out.push(Diagnostic::new(name, loc.clone(), format!("duplicate image id {}", img.id)));
            }
            if img.width == 0 || img.height == 0 {
                out.push(Diagnostic::new(name, loc, "image size must be at least 1x1"));
            }
        }
        let cats: HashMap<i64, &str> = coco.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
        if cats.len() != coco.categories.len() {
            out.push(Diagnostic::new(name, Some("categories".into()), "duplicate category id"));
        }
        for (k, a) in coco.annotations.iter().enumerate() {
            let loc = Some(format!("annotations[{k}]"));
            let img = images.get(&a.image_id);
            if img.is_none() {
                out.push(Diagnostic::new(name, loc.clone(), format!("unknown image id {}", a.image_id)));
            }
            if !cats.contains_key(&a.category_id) {
                out.push(Diagnostic::new(name, loc.clone(), format!("unknown category id {}", a.category_id)));
            }
            if let Err(e) = first_ring(&a.segmentation) {
                out.push(Diagnostic::new(name, loc.clone(), e));
            }
            let [x, y, w, h] = a.bbox[..] else {
                out.push(Diagnostic::new(name, loc, format!("bbox has {} values, expected 4", a.bbox.len())));
                continue;
            };
            if x < 0.0 || y < 0.0 {
                out.push(Diagnostic::new(name, loc.clone(), "negative coordinate"));
            }
            if !(w > 0.0 && h > 0.0) {
                out.push(Diagnostic::new(name, loc.clone(), "degenerate box"));
            }
            if let Some(img) = img {
                if x + w > img.width as f64 + 1e-6 || y + h > img.height as f64 + 1e-6 {
                    out.push(Diagnostic::new(name, loc, "box exceeds image bounds"));
                }
            }
        }
    }
    if !any {
        out.push(Diagnostic::new("(bundle)", None, "no COCO JSON file found"));
    }
    out
}
