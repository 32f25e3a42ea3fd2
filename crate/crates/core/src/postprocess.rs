//! Segmentation mask post-processing: iterative closing, outer-contour
//! extraction, simplification, and encapsulation into boxes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{min_area_obb, polygon_perimeter, rdp_simplify, BBox, Point, Polygon, Shape};
use crate::model::ProjectMode;
use crate::scalar::Scalar;

/// Largest number of closing passes; kernel sides run 3, 5, ..., 21.
pub const MAX_CLOSING_ITERATIONS: usize = 10;

/// RDP tolerance as a fraction of the contour perimeter.
pub const RDP_PERIMETER_FRACTION: f64 = 0.002;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("mask dimensions must be at least 1x1, got {0}x{1}")]
    Empty(usize, usize),
    #[error("bit buffer has {got} entries, expected {expected}")]
    Length { got: usize, expected: usize },
}

/// Row-major boolean grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::Empty(width, height));
        }
        if bits.len() != width * height {
            return Err(MaskError::Length { got: bits.len(), expected: width * height });
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self, MaskError> {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Out-of-range coordinates read as background.
    pub fn get(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return false;
        }
        self.bits[y as usize * self.width + x as usize]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        let w = self.width;
        self.bits[y * w + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fills the pixels whose centers fall inside `[x1, x2) x [y1, y2)`.
    pub fn fill_box<T: Scalar>(&mut self, b: &BBox<T>) {
        let (x1, y1, x2, y2) = (b.x1.to_f64_lossy(), b.y1.to_f64_lossy(), b.x2.to_f64_lossy(), b.y2.to_f64_lossy());
        for y in 0..self.height {
            let cy = y as f64 + 0.5;
            if cy < y1 || cy >= y2 {
                continue;
            }
            for x in 0..self.width {
                let cx = x as f64 + 0.5;
                if cx >= x1 && cx < x2 {
                    self.set(x, y, true);
                }
            }
        }
    }

    /// Whether every foreground pixel of `other` is also set here.
    pub fn contains(&self, other: &BinaryMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }

    /// Number of background regions (4-connected) that do not reach the
    /// image border.
    pub fn hole_count(&self) -> usize {
        let (w, h) = (self.width, self.height);
        let mut seen = vec![false; w * h];
        let mut holes = 0;
        let mut queue = VecDeque::new();
        for start in 0..w * h {
            if self.bits[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let mut touches_border = false;
            while let Some(i) = queue.pop_front() {
                let (x, y) = (i % w, i / w);
                if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                    touches_border = true;
                }
                let mut visit = |j: usize| {
                    if !self.bits[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
            if !touches_border {
                holes += 1;
            }
        }
        holes
    }

    /// 8-connected foreground components as pixel index lists, ordered by
    /// their first pixel in raster order.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut label = vec![false; self.bits.len()];
        let mut out = Vec::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || label[start] {
                continue;
            }
            label[start] = true;
            let mut members = vec![start];
            let mut head = 0;
            while head < members.len() {
                let i = members[head];
                head += 1;
                let (x, y) = ((i % self.width) as i64, (i / self.width) as i64);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let j = (ny * w + nx) as usize;
                        if self.bits[j] && !label[j] {
                            label[j] = true;
                            members.push(j);
                        }
                    }
                }
            }
            out.push(members);
        }
        out
    }

    pub fn component_count(&self) -> usize {
        self.components().len()
    }
}

/// Morphological closing with a `side x side` square, computed as if the
/// mask sat on an unbounded background plane. The result always contains
/// the input.
pub fn close_once(mask: &BinaryMask, side: usize) -> BinaryMask {
    let r = side / 2;
    let (pw, ph) = (mask.width + 2 * r, mask.height + 2 * r);
    let mut padded = vec![false; pw * ph];
    for y in 0..mask.height {
        for x in 0..mask.width {
            padded[(y + r) * pw + x + r] = mask.bits[y * mask.width + x];
        }
    }
    let dilated = square_filter(&padded, pw, ph, r, true);
    let closed = square_filter(&dilated, pw, ph, r, false);
    let mut bits = vec![false; mask.bits.len()];
    for y in 0..mask.height {
        for x in 0..mask.width {
            bits[y * mask.width + x] = closed[(y + r) * pw + x + r];
        }
    }
    BinaryMask { width: mask.width, height: mask.height, bits }
}

/// Separable square dilation (`any`) or erosion (`all`) with radius `r`.
/// Cells outside the buffer count as background.
fn square_filter(src: &[bool], w: usize, h: usize, r: usize, dilate: bool) -> Vec<bool> {
    let pass = |src: &[bool], len: usize, lines: usize, at: &dyn Fn(usize, usize) -> usize| -> Vec<bool> {
        let mut out = vec![false; src.len()];
        let mut prefix = vec![0usize; len + 1];
        for line in 0..lines {
            for k in 0..len {
                prefix[k + 1] = prefix[k] + src[at(line, k)] as usize;
            }
            for k in 0..len {
                let lo = k.saturating_sub(r);
                let hi = (k + r + 1).min(len);
                let ones = prefix[hi] - prefix[lo];
                out[at(line, k)] = if dilate { ones > 0 } else { ones == 2 * r + 1 && hi - lo == 2 * r + 1 };
            }
        }
        out
    };
    let rows = pass(src, w, h, &|line, k| line * w + k);
    pass(&rows, h, w, &|line, k| k * w + line)
}

/// Adaptive hole filling: closing with growing square kernels (3, 5, 7, ...)
/// for at most [`MAX_CLOSING_ITERATIONS`] passes, stopping once no holes
/// remain. A pass that would create more holes than it fills is discarded.
pub fn close_mask(mask: &BinaryMask) -> BinaryMask {
    close_mask_traced(mask).0
}

/// [`close_mask`] plus the hole count after each pass.
pub fn close_mask_traced(mask: &BinaryMask) -> (BinaryMask, Vec<usize>) {
    let mut current = mask.clone();
    let mut holes = current.hole_count();
    let mut trace = Vec::new();
    for i in 0..MAX_CLOSING_ITERATIONS {
        let next = close_once(&current, 2 * i + 3);
        let next_holes = next.hole_count();
        if next_holes <= holes {
            current = next;
            holes = next_holes;
        }
        trace.push(holes);
        if holes == 0 {
            break;
        }
    }
    (current, trace)
}

type Dir = (i64, i64);

fn turn_left((dx, dy): Dir) -> Dir {
    (dy, -dx)
}

fn turn_right((dx, dy): Dir) -> Dir {
    (-dy, dx)
}

/// Pixel on the left or right of the unit edge leaving vertex `v` along `d`.
fn side_cell(v: (i64, i64), d: Dir, side: Dir) -> (i64, i64) {
    let cx = 2 * v.0 + d.0 + side.0;
    let cy = 2 * v.1 + d.1 + side.1;
    ((cx - 1).div_euclid(2), (cy - 1).div_euclid(2))
}

/// Outer boundary of the component whose first raster pixel is `(x0, y0)`,
/// as lattice corner points in clockwise screen order.
fn trace_outer(mask: &BinaryMask, x0: i64, y0: i64) -> Vec<(i64, i64)> {
    let start = (x0, y0);
    let mut v = start;
    let mut dir: Dir = (1, 0);
    let mut corners = vec![start];
    loop {
        v = (v.0 + dir.0, v.1 + dir.1);
        if v == start {
            break;
        }
        let (lx, ly) = side_cell(v, dir, turn_left(dir));
        let (rx, ry) = side_cell(v, dir, turn_right(dir));
        let next = if mask.get(lx, ly) {
            turn_left(dir)
        } else if mask.get(rx, ry) {
            dir
        } else {
            turn_right(dir)
        };
        if next != dir {
            corners.push(v);
            dir = next;
        }
    }
    corners
}

/// One simplified outer-contour polygon per 8-connected component.
/// Vertices lie on pixel corners, so a solid rectangle of pixels maps to its
/// exact outline.
pub fn mask_to_polygons<T: Scalar>(mask: &BinaryMask, min_points: usize) -> Vec<Polygon<T>> {
    mask.components()
        .into_iter()
        .filter_map(|members| {
            let first = members[0];
            let (x0, y0) = ((first % mask.width) as i64, (first / mask.width) as i64);
            let ring: Vec<Point<T>> = trace_outer(mask, x0, y0)
                .into_iter()
                .map(|(x, y)| Point::new(T::lit(x as f64), T::lit(y as f64)))
                .collect();
            let poly = dedup_ring(ring)?;
            let eps = polygon_perimeter(&poly) * T::lit(RDP_PERIMETER_FRACTION);
            let simplified = rdp_simplify(&poly, eps);
            (simplified.len() >= min_points.max(3)).then_some(simplified)
        })
        .collect()
}

fn dedup_ring<T: Scalar>(mut ring: Vec<Point<T>>) -> Option<Polygon<T>> {
    ring.dedup();
    while ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    Polygon::new(ring).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encapsulation {
    AxisAligned,
    Oriented,
}

/// Tight axis-aligned box or minimum-area rectangle over polygon vertices.
pub fn encapsulate<T: Scalar>(poly: &Polygon<T>, mode: Encapsulation) -> Shape<T> {
    match mode {
        Encapsulation::AxisAligned => Shape::Bbox(poly.bounding_box()),
        Encapsulation::Oriented => Shape::Obb(min_area_obb(poly.points()).expect("validated polygon")),
    }
}

/// Keeps the polygon with the largest area.
pub fn largest_polygon<T: Scalar>(polys: Vec<Polygon<T>>) -> Option<Polygon<T>> {
    polys.into_iter().fold(None, |best: Option<Polygon<T>>, p| match best {
        Some(b) if b.area() >= p.area() => Some(b),
        _ => Some(p),
    })
}

/// Full post-process of a raw mask into the geometry a project mode stores:
/// close, trace, keep the largest region, then polygon, rotated rectangle or
/// box. `None` when the mask holds no region.
pub fn mask_to_shape<T: Scalar>(mask: &BinaryMask, mode: ProjectMode) -> Option<Shape<T>> {
    let poly = largest_polygon(mask_to_polygons::<T>(&close_mask(mask), 3))?;
    Some(match mode {
        ProjectMode::Segmentation => Shape::Polygon { points: poly },
        ProjectMode::Obb => encapsulate(&poly, Encapsulation::Oriented),
        ProjectMode::Detection => encapsulate(&poly, Encapsulation::AxisAligned),
    })
}
