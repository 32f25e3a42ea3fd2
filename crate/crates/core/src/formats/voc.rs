//! Pascal VOC XML, one `Annotations/<stem>.xml` per image. Boxes only;
//! coordinates are written 0-based with up to two decimals.

use std::collections::BTreeMap;

use super::xml::{self, Element};
use super::{fmt_num, Diagnostic, ExportData, FormatError, Parsed, ParsedItem, RawGeometry, SkippedItem};
use crate::geometry::BBox;

fn n(v: f64) -> String {
    fmt_num(v, 2, 0)
}

pub(super) fn export(data: &ExportData) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for img in &data.images {
        let r = &img.record;
        let mut s = String::from("<annotation>\n");
        s += "  <folder>images</folder>\n";
        s += &format!("  <filename>{}</filename>\n", xml::escape(&r.file_name));
        s += &format!("  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>\n", r.width, r.height);
        s += "  <segmented>0</segmented>\n";
        for (class, a) in &img.annotations {
            let b = a.geometry.bounding_box();
            s += "  <object>\n";
            s += &format!("    <name>{}</name>\n", xml::escape(class));
            s += "    <pose>Unspecified</pose>\n    <truncated>0</truncated>\n    <difficult>0</difficult>\n";
            s += &format!(
                "    <bndbox>\n      <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    </bndbox>\n",
                n(b.x1),
                n(b.y1),
                n(b.x2),
                n(b.y2)
            );
            s += "  </object>\n";
        }
        s += "</annotation>\n";
        files.insert(format!("Annotations/{}.xml", super::stem(&r.file_name)), s.into_bytes());
    }
    files
}

fn xml_files(files: &BTreeMap<String, Vec<u8>>) -> impl Iterator<Item = (&String, &Vec<u8>)> {
    files.iter().filter(|(n, _)| n.to_lowercase().ends_with(".xml"))
}

fn number(el: &Element, name: &str) -> Result<f64, String> {
    let t = el.child_text(name).ok_or_else(|| format!("missing <{name}>"))?;
    t.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| format!("<{name}> value {t:?} is not a number"))
}

fn read_box(obj: &Element) -> Result<BBox<f64>, String> {
    let bb = obj.child("bndbox").ok_or("missing <bndbox>")?;
    Ok(BBox { x1: number(bb, "xmin")?, y1: number(bb, "ymin")?, x2: number(bb, "xmax")?, y2: number(bb, "ymax")? })
}

fn root(file: &str, bytes: &[u8]) -> Result<Element, FormatError> {
    let root = xml::parse(bytes).map_err(|m| FormatError::parse(file, None, m))?;
    if root.name != "annotation" {
        return Err(FormatError::parse(file, Some(format!("<{}>", root.name)), "root element must be <annotation>"));
    }
    Ok(root)
}

pub(super) fn parse(files: &BTreeMap<String, Vec<u8>>) -> Result<Parsed, FormatError> {
    let mut parsed = Parsed::default();
    for (file, bytes) in xml_files(files) {
        let root = root(file, bytes)?;
        let image = root
            .child_text("filename")
            .map(str::to_string)
            .unwrap_or_else(|| super::stem(file));
        for (k, obj) in root.children_named("object").enumerate() {
            let location = Some(format!("<object> #{}", k + 1));
            let class = obj
                .child_text("name")
                .ok_or_else(|| FormatError::parse(file, location.clone(), "missing <name>"))?
                .to_string();
            let b = read_box(obj).map_err(|m| FormatError::parse(file, location.clone(), m))?;
            if !(b.x2 > b.x1 && b.y2 > b.y1) {
                parsed.skipped.push(SkippedItem { file: file.clone(), location, reason: "degenerate box".into() });
                continue;
            }
            parsed.items.push(ParsedItem {
                file: file.clone(),
                location,
                image: image.clone(),
                class,
                geometry: RawGeometry::Box(b),
                normalized: false,
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
    for (file, bytes) in xml_files(files) {
        let root = match root(file, bytes) {
            Ok(r) => r,
            Err(FormatError::Parse { location, message, .. }) => {
                out.push(Diagnostic::new(file, location, message));
                continue;
            }
            Err(e) => {
                out.push(Diagnostic::new(file, None, e.to_string()));
                continue;
            }
        };
        if root.child("filename").is_none() {
            out.push(Diagnostic::new(file, Some("<annotation>".into()), "missing <filename>"));
        }
        let size = match root.child("size") {
            None => {
                out.push(Diagnostic::new(file, Some("<annotation>".into()), "missing <size>"));
                None
            }
            Some(s) => match (number(s, "width"), number(s, "height")) {
                (Ok(w), Ok(h)) if w >= 1.0 && h >= 1.0 => Some((w, h)),
                (Err(m), _) | (_, Err(m)) => {
                    out.push(Diagnostic::new(file, Some("<size>".into()), m));
                    None
                }
                _ => {
                    out.push(Diagnostic::new(file, Some("<size>".into()), "image size must be at least 1x1"));
                    None
                }
            },
        };
        for (k, obj) in root.children_named("object").enumerate() {
            let loc = Some(format!("<object> #{}", k + 1));
            if obj.child_text("name").map_or(true, str::is_empty) {
                out.push(Diagnostic::new(file, loc.clone(), "missing <name>"));
            }
            match read_box(obj) {
                Err(m) => out.push(Diagnostic::new(file, loc, m)),
                Ok(b) => {
                    if b.x1 < 0.0 || b.y1 < 0.0 {
                        out.push(Diagnostic::new(file, loc.clone(), "negative coordinate"));
                    }
                    if !(b.x2 > b.x1 && b.y2 > b.y1) {
                        out.push(Diagnostic::new(file, loc.clone(), "degenerate box"));
                    }
                    if let Some((w, h)) = size {
                        if b.x2 > w + 1e-6 || b.y2 > h + 1e-6 {
                            out.push(Diagnostic::new(file, loc, "box exceeds image bounds"));
                        }
                    }
                }
            }
        }
    }
    out
}
