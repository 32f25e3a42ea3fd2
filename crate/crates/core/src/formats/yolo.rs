//! YOLO text labels: `labels/<stem>.txt` per image plus `data.yaml` with the
//! class-index mapping (contiguous from 0, sorted by class name).
//!
//! Line shapes, all coordinates normalized to `[0, 1]`:
//! - box: `class cx cy w h`
//! - oriented box: `class x1 y1 x2 y2 x3 y3 x4 y4`
//! - polygon: `class x1 y1 ... xn yn` (n >= 3)
//!
//! Eight numbers are read as an oriented box in OBB projects and as a
//! four-point polygon otherwise.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{fmt_num, Diagnostic, ExportData, FormatError, Parsed, ParsedItem, RawGeometry, SkippedItem};
use crate::geometry::{BBox, Point};
use crate::model::ProjectMode;
use crate::Shape;

pub const DATA_FILE: &str = "data.yaml";

#[derive(Serialize)]
struct DataYaml<'a> {
    path: &'a str,
    train: &'a str,
    val: &'a str,
    task: &'a str,
    nc: usize,
    names: BTreeMap<usize, &'a str>,
}

fn n(v: f64) -> String {
    fmt_num(v, 8, 2)
}

fn corner_line(pts: &[Point<f64>], w: f64, h: f64) -> String {
    pts.iter().map(|p| format!("{} {}", n(p.x / w), n(p.y / h))).collect::<Vec<_>>().join(" ")
}

pub(super) fn export(data: &ExportData) -> BTreeMap<String, Vec<u8>> {
    let index: BTreeMap<&str, usize> = data.class_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut files = BTreeMap::new();
    for img in &data.images {
        let (w, h) = (img.record.width as f64, img.record.height as f64);
        let mut text = String::new();
        for (class, a) in &img.annotations {
            let coords = match (&a.geometry, data.mode) {
                (Shape::Bbox(b), ProjectMode::Obb) => corner_line(&b.corners(), w, h),
                (Shape::Bbox(b), _) => {
                    let c = b.center();
                    format!("{} {} {} {}", n(c.x / w), n(c.y / h), n(b.width() / w), n(b.height() / h))
                }
                (Shape::Obb(o), _) => corner_line(&o.corners(), w, h),
                (Shape::Polygon { points }, _) => corner_line(points.points(), w, h),
            };
            text.push_str(&format!("{} {coords}\n", index[class.as_str()]));
        }
        files.insert(format!("labels/{}.txt", super::stem(&img.record.file_name)), text.into_bytes());
    }
    let yaml = DataYaml {
        path: ".",
        train: "images",
        val: "images",
        task: match data.mode {
            ProjectMode::Detection => "detect",
            ProjectMode::Obb => "obb",
            ProjectMode::Segmentation => "segment",
        },
        nc: data.class_names.len(),
        names: data.class_names.iter().enumerate().map(|(i, c)| (i, c.as_str())).collect(),
    };
    files.insert(DATA_FILE.to_string(), serde_yaml::to_string(&yaml).expect("yaml serialize").into_bytes());
    files
}

fn is_yaml(name: &str) -> bool {
    let l = name.to_lowercase();
    l.ends_with(".yaml") || l.ends_with(".yml")
}

/// Class names by index, from a `names` map or list.
fn read_names(file: &str, bytes: &[u8]) -> Result<BTreeMap<usize, String>, FormatError> {
    let doc: serde_yaml::Value = serde_yaml::from_slice(bytes).map_err(|e| {
        FormatError::parse(file, e.location().map(|l| format!("line {}, column {}", l.line(), l.column())), e.to_string())
    })?;
    let names = doc.get("names").ok_or_else(|| FormatError::parse(file, None, "missing `names` mapping"))?;
    let mut out = BTreeMap::new();
    match names {
        serde_yaml::Value::Sequence(list) => {
            for (i, v) in list.iter().enumerate() {
                let s = v.as_str().ok_or_else(|| FormatError::parse(file, Some(format!("names[{i}]")), "class name is not a string"))?;
                out.insert(i, s.to_string());
            }
        }
        serde_yaml::Value::Mapping(map) => {
            for (k, v) in map {
                let i = k
                    .as_u64()
                    .ok_or_else(|| FormatError::parse(file, Some("names".into()), "class index is not a non-negative integer"))?;
                let s = v.as_str().ok_or_else(|| FormatError::parse(file, Some(format!("names.{i}")), "class name is not a string"))?;
                out.insert(i as usize, s.to_string());
            }
        }
        _ => return Err(FormatError::parse(file, Some("names".into()), "`names` must be a list or a mapping")),
    }
    Ok(out)
}

enum Line {
    Item { class: usize, geometry: RawGeometry, values: Vec<f64> },
    Blank,
}

fn parse_line(text: &str) -> Result<Line, String> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.is_empty() {
        return Ok(Line::Blank);
    }
    let class: usize = tokens[0].parse().map_err(|_| format!("class index {:?} is not a non-negative integer", tokens[0]))?;
    let values: Vec<f64> = tokens[1..]
        .iter()
        .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| format!("{t:?} is not a number")))
        .collect::<Result<_, _>>()?;
    let pts = || values.chunks(2).map(|c| Point::new(c[0], c[1])).collect::<Vec<_>>();
    let geometry = match values.len() {
        4 => {
            let (cx, cy, w, h) = (values[0], values[1], values[2], values[3]);
            RawGeometry::Box(BBox { x1: cx - w / 2.0, y1: cy - h / 2.0, x2: cx + w / 2.0, y2: cy + h / 2.0 })
        }
        8 => RawGeometry::Corners(pts()),
        k if k >= 6 && k % 2 == 0 => RawGeometry::Polygon(pts()),
        k => return Err(format!("{k} coordinates; expected 4, 8 or an even count of at least 6")),
    };
    Ok(Line::Item { class, geometry, values })
}

fn degenerate(line: &Line) -> bool {
    matches!(line, Line::Item { geometry: RawGeometry::Box(b), .. } if !(b.x2 > b.x1 && b.y2 > b.y1))
}

/// First value outside `[0, 1]`.
fn out_of_unit(values: &[f64]) -> Option<f64> {
    values.iter().copied().find(|v| !(-1e-9..=1.0 + 1e-9).contains(v))
}

fn label_files(files: &BTreeMap<String, Vec<u8>>) -> impl Iterator<Item = (&String, &Vec<u8>)> {
    files.iter().filter(|(n, _)| n.to_lowercase().ends_with(".txt"))
}

pub(super) fn parse(files: &BTreeMap<String, Vec<u8>>) -> Result<Parsed, FormatError> {
    let (yaml_name, yaml) = files
        .iter()
        .find(|(n, _)| is_yaml(n))
        .ok_or_else(|| FormatError::parse("(bundle)", None, "missing data YAML with the class mapping"))?;
    let names = read_names(yaml_name, yaml)?;
    let mut parsed = Parsed { declared_classes: names.values().cloned().collect(), ..Default::default() };
    for (file, bytes) in label_files(files) {
        let text = std::str::from_utf8(bytes).map_err(|e| FormatError::parse(file, None, format!("not UTF-8: {e}")))?;
        for (i, raw) in text.lines().enumerate() {
            let location = Some(format!("line {}", i + 1));
            let line = parse_line(raw).map_err(|m| FormatError::parse(file, location.clone(), m))?;
            let skip = |reason: &str| SkippedItem { file: file.clone(), location: location.clone(), reason: reason.into() };
            if degenerate(&line) {
                parsed.skipped.push(skip("degenerate box"));
                continue;
            }
            let Line::Item { class, geometry, values } = line else { continue };
            let Some(class_name) = names.get(&class) else {
                parsed.skipped.push(skip("unknown class index"));
                continue;
            };
            if let Some(v) = out_of_unit(&values) {
                parsed.skipped.push(skip(&format!("value {v} out of [0,1]")));
                continue;
            }
            parsed.items.push(ParsedItem {
                file: file.clone(),
                location,
                image: super::stem(file),
                class: class_name.clone(),
                geometry,
                normalized: true,
                detector_score: None,
                verified_score: None,
                source: None,
            });
        }
    }
    Ok(parsed)
}

pub(super) fn validate(files: &BTreeMap<String, Vec<u8>>) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let names = match files.iter().find(|(n, _)| is_yaml(n)) {
        None => {
            out.push(Diagnostic::new("(bundle)", None, "missing data YAML with the class mapping"));
            None
        }
        Some((file, bytes)) => match read_names(file, bytes) {
            Ok(n) => {
                let contiguous = n.keys().copied().eq(0..n.len());
                if !contiguous {
                    out.push(Diagnostic::new(file, Some("names".into()), "class indices are not contiguous from 0"));
                }
                Some(n)
            }
            Err(e) => {
                out.push(Diagnostic::new(file, None, e.to_string()));
                None
            }
        },
    };
    for (file, bytes) in label_files(files) {
        let Ok(text) = std::str::from_utf8(bytes) else {
            out.push(Diagnostic::new(file, None, "not UTF-8"));
            continue;
        };
        for (i, raw) in text.lines().enumerate() {
            let loc = Some(format!("line {}", i + 1));
            let line = match parse_line(raw) {
                Ok(l) => l,
                Err(m) => {
                    out.push(Diagnostic::new(file, loc, m));
                    continue;
                }
            };
            if degenerate(&line) {
                out.push(Diagnostic::new(file, loc.clone(), "degenerate box"));
            }
            if let Line::Item { class, values, .. } = &line {
                if let Some(v) = out_of_unit(values) {
                    out.push(Diagnostic::new(file, loc.clone(), format!("value {v} out of [0,1]")));
                }
                if names.as_ref().is_some_and(|n| !n.contains_key(class)) {
                    out.push(Diagnostic::new(file, loc, "unknown class index"));
                }
            }
        }
    }
    out
}
