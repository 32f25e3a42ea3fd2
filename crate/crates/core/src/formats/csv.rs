//! Full-fidelity CSV, one row per annotation in `annotations.csv`:
//!
//! `image,width,height,class,kind,coords,detector_score,verified_score,source`
//!
//! `coords` is a `;`-separated list whose meaning depends on `kind`:
//! `bbox` = x1;y1;x2;y2, `obb` = cx;cy;w;h;theta, `polygon` = x1;y1;...;xn;yn.
//! Numbers use the shortest text that parses back to the same `f64`, so the
//! format is lossless.

use std::collections::BTreeMap;

use super::{Diagnostic, ExportData, FormatError, Parsed, ParsedItem, RawGeometry, SkippedItem};
use crate::geometry::{BBox, OrientedBox, Point, ShapeKind};
use crate::model::AnnotationSource;
use crate::Shape;

pub const FILE: &str = "annotations.csv";
pub const CSV_HEADER: [&str; 9] =
    ["image", "width", "height", "class", "kind", "coords", "detector_score", "verified_score", "source"];

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub(super) fn export(data: &ExportData) -> BTreeMap<String, Vec<u8>> {
    let mut w = ::csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("write to memory");
    for img in &data.images {
        let r = &img.record;
        for (class, a) in &img.annotations {
            let coords = match &a.geometry {
                Shape::Bbox(b) => join(&[b.x1, b.y1, b.x2, b.y2]),
                Shape::Obb(o) => join(&[o.cx, o.cy, o.w, o.h, o.theta]),
                Shape::Polygon { points } => {
                    join(&points.points().iter().flat_map(|p| [p.x, p.y]).collect::<Vec<_>>())
                }
            };
            w.write_record([
                r.file_name.as_str(),
                &r.width.to_string(),
                &r.height.to_string(),
                class,
                a.geometry.kind().as_str(),
                &coords,
                &opt(a.detector_score),
                &opt(a.verified_score),
                a.source.as_str(),
            ])
            .expect("write to memory");
        }
    }
    let mut files = BTreeMap::new();
    files.insert(FILE.to_string(), w.into_inner().expect("flush to memory"));
    files
}

struct Row {
    image: String,
    class: String,
    geometry: RawGeometry,
    detector_score: Option<f64>,
    verified_score: Option<f64>,
    source: Option<AnnotationSource>,
    dims: (u32, u32),
}

fn score(text: &str, name: &str) -> Result<Option<f64>, String> {
    if text.trim().is_empty() {
        return Ok(None);
    }
    let v: f64 = text.trim().parse().map_err(|_| format!("{name} {text:?} is not a number"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("{name} {v} outside [0, 1]"));
    }
    Ok(Some(v))
}

fn read_row(rec: &::csv::StringRecord) -> Result<Row, String> {
    if rec.len() != CSV_HEADER.len() {
        return Err(format!("{} fields, expected {}", rec.len(), CSV_HEADER.len()));
    }
    let dim = |i: usize| rec[i].trim().parse::<u32>().map_err(|_| format!("{} {:?} is not an integer", CSV_HEADER[i], &rec[i]));
    let dims = (dim(1)?, dim(2)?);
    let kind = ShapeKind::parse(rec[4].trim()).ok_or_else(|| format!("unknown kind {:?}", &rec[4]))?;
    let nums: Vec<f64> = rec[5]
        .split(';')
        .map(|t| t.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| format!("coordinate {t:?} is not a number")))
        .collect::<Result<_, _>>()?;
    let geometry = match (kind, nums.len()) {
        (ShapeKind::Bbox, 4) => RawGeometry::Box(BBox { x1: nums[0], y1: nums[1], x2: nums[2], y2: nums[3] }),
        (ShapeKind::Obb, 5) => RawGeometry::Obb(
            OrientedBox::new(nums[0], nums[1], nums[2], nums[3], nums[4]).map_err(|e| format!("invalid obb: {e}"))?,
        ),
        (ShapeKind::Polygon, k) if k >= 6 && k % 2 == 0 => {
            RawGeometry::Polygon(nums.chunks(2).map(|c| Point::new(c[0], c[1])).collect())
        }
        (k, c) => return Err(format!("{c} coordinates do not fit kind {}", k.as_str())),
    };
    let source = match rec[8].trim() {
        "" => None,
        s => Some(AnnotationSource::parse(s).ok_or_else(|| format!("unknown source {s:?}"))?),
    };
    Ok(Row {
        image: rec[0].to_string(),
        class: rec[3].to_string(),
        geometry,
        detector_score: score(&rec[6], "detector_score")?,
        verified_score: score(&rec[7], "verified_score")?,
        source,
        dims,
    })
}

fn csv_files(files: &BTreeMap<String, Vec<u8>>) -> impl Iterator<Item = (&String, &Vec<u8>)> {
    files.iter().filter(|(n, _)| n.to_lowercase().ends_with(".csv"))
}

fn check_header(file: &str, r: &mut ::csv::Reader<&[u8]>) -> Result<(), FormatError> {
    let header = r.headers().map_err(|e| FormatError::parse(file, Some("line 1".into()), e.to_string()))?;
    if !header.iter().map(str::trim).eq(CSV_HEADER) {
        return Err(FormatError::parse(file, Some("line 1".into()), format!("header must be {}", CSV_HEADER.join(","))));
    }
    Ok(())
}

fn line_of(rec: &::csv::StringRecord) -> Option<String> {
    rec.position().map(|p| format!("line {}", p.line()))
}

pub(super) fn parse(files: &BTreeMap<String, Vec<u8>>) -> Result<Parsed, FormatError> {
    let mut parsed = Parsed::default();
    for (file, bytes) in csv_files(files) {
        let mut r = ::csv::ReaderBuilder::new().flexible(true).from_reader(bytes.as_slice());
        check_header(file, &mut r)?;
        for rec in r.records() {
            let rec = rec.map_err(|e| {
                FormatError::parse(file, e.position().map(|p| format!("line {}", p.line())), e.to_string())
            })?;
            let location = line_of(&rec);
            let row = read_row(&rec).map_err(|m| FormatError::parse(file, location.clone(), m))?;
            if let RawGeometry::Box(b) = &row.geometry {
                if !(b.x2 > b.x1 && b.y2 > b.y1) {
                    parsed.skipped.push(SkippedItem { file: file.clone(), location, reason: "degenerate box".into() });
                    continue;
                }
            }
            parsed.items.push(ParsedItem {
                file: file.clone(),
                location,
                image: row.image,
                class: row.class,
                geometry: row.geometry,
                normalized: false,
                detector_score: row.detector_score,
                verified_score: row.verified_score,
                source: row.source,
            });
        }
    }
    Ok(parsed)
}

pub(super) fn validate(files: &BTreeMap<String, Vec<u8>>) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut any = false;
    for (file, bytes) in csv_files(files) {
        any = true;
        let mut r = ::csv::ReaderBuilder::new().flexible(true).from_reader(bytes.as_slice());
        if let Err(FormatError::Parse { location, message, .. }) = check_header(file, &mut r) {
            out.push(Diagnostic::new(file, location, message));
            continue;
        }
        for rec in r.records() {
            let rec = match rec {
                Ok(r) => r,
                Err(e) => {
                    out.push(Diagnostic::new(file, e.position().map(|p| format!("line {}", p.line())), e.to_string()));
                    continue;
                }
            };
            let loc = line_of(&rec);
            let row = match read_row(&rec) {
                Ok(r) => r,
                Err(m) => {
                    out.push(Diagnostic::new(file, loc, m));
                    continue;
                }
            };
            if row.class.trim().is_empty() {
                out.push(Diagnostic::new(file, loc.clone(), "empty class"));
            }
            if row.dims.0 == 0 || row.dims.1 == 0 {
                out.push(Diagnostic::new(file, loc.clone(), "image size must be at least 1x1"));
            }
            let bb = match &row.geometry {
                RawGeometry::Box(b) => {
                    if !(b.x2 > b.x1 && b.y2 > b.y1) {
                        out.push(Diagnostic::new(file, loc.clone(), "degenerate box"));
                    }
                    Some(*b)
                }
                RawGeometry::Obb(o) => Some(o.bounding_box()),
                RawGeometry::Polygon(p) | RawGeometry::Corners(p) => BBox::enclosing(p).ok(),
            };
            if let Some(b) = bb {
                if b.x1 < -1e-6 || b.y1 < -1e-6 {
                    out.push(Diagnostic::new(file, loc.clone(), "negative coordinate"));
                }
                if b.x2 > row.dims.0 as f64 + 1e-6 || b.y2 > row.dims.1 as f64 + 1e-6 {
                    out.push(Diagnostic::new(file, loc, "geometry exceeds image bounds"));
                }
            }
        }
    }
    if !any {
        out.push(Diagnostic::new("(bundle)", None, format!("no CSV file found (expected {FILE})")));
    }
    out
}
