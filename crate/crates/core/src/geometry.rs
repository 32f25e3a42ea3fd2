//! Geometry kernel: axis-aligned boxes, oriented boxes, polygons, IoU,
//! union envelopes, minimum-area rectangles and polyline simplification.
//!
//! Coordinates are real-valued pixels with the origin at the image's
//! top-left corner and `y` growing downward. Every operation here is a pure
//! function over immutable values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("inverted box: x1 <= x2 and y1 <= y2 required")]
    Inverted,
    #[error("negative side length")]
    NegativeSide,
    #[error("polygon needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("polygon has identical consecutive points at index {0}")]
    RepeatedPoint(usize),
    #[error("{0} requires a nonempty input")]
    Empty(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Axis-aligned box `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x1 > x2 || y1 > y2 {
            return Err(GeometryError::Inverted);
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from two arbitrary corners.
    pub fn from_corners(a: Point<T>, b: Point<T>) -> Result<Self, GeometryError> {
        Self::new(a.x.min(b.x), a.y.min(b.y), a.x.max(b.x), a.y.max(b.y))
    }

    /// Tight box around a nonempty point set.
    pub fn enclosing(points: &[Point<T>]) -> Result<Self, GeometryError> {
        let first = points.first().ok_or(GeometryError::Empty("enclosing box"))?;
        let mut b = Self { x1: first.x, y1: first.y, x2: first.x, y2: first.y };
        for p in &points[1..] {
            b.x1 = b.x1.min(p.x);
            b.y1 = b.y1.min(p.y);
            b.x2 = b.x2.max(p.x);
            b.y2 = b.y2.max(p.y);
        }
        Self::new(b.x1, b.y1, b.x2, b.y2)
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point<T> {
        Point::new((self.x1 + self.x2) / T::two(), (self.y1 + self.y2) / T::two())
    }

    pub fn intersection(&self, other: &Self) -> Option<Self> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 <= x2 && y1 <= y2).then_some(Self { x1, y1, x2, y2 })
    }

    pub fn contains(&self, other: &Self) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn contains_point(&self, p: Point<T>) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    /// Clamps the box to `[0, width] x [0, height]`.
    pub fn clip(&self, width: T, height: T) -> Self {
        let z = T::zero();
        let x1 = self.x1.max(z).min(width);
        let y1 = self.y1.max(z).min(height);
        Self {
            x1,
            y1,
            x2: self.x2.max(z).min(width).max(x1),
            y2: self.y2.max(z).min(height).max(y1),
        }
    }

    pub fn corners(&self) -> [Point<T>; 4] {
        [
            Point::new(self.x1, self.y1),
            Point::new(self.x2, self.y1),
            Point::new(self.x2, self.y2),
            Point::new(self.x1, self.y2),
        ]
    }
}

/// Intersection over union of two boxes. Zero-area unions yield 0.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersection(b).map(|r| r.area()).unwrap_or_else(T::zero);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}

/// Component-wise envelope `[min x1, min y1, max x2, max y2]`.
pub fn union_box<T: Scalar>(boxes: &[BBox<T>]) -> Result<BBox<T>, GeometryError> {
    let (first, rest) = boxes.split_first().ok_or(GeometryError::Empty("union_box"))?;
    Ok(rest.iter().fold(*first, |acc, b| BBox {
        x1: acc.x1.min(b.x1),
        y1: acc.y1.min(b.y1),
        x2: acc.x2.max(b.x2),
        y2: acc.y2.max(b.y2),
    }))
}

/// Rotated rectangle. `theta` is the direction of the `w` side, in radians,
/// normalized to `[-pi/2, pi/2)` with `w >= h`; squares use the
/// representative closest to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
    pub theta: T,
}

impl<T: Scalar> OrientedBox<T> {
    /// Builds a canonical oriented box from any `(w, h, theta)` triple.
    pub fn new(cx: T, cy: T, w: T, h: T, theta: T) -> Result<Self, GeometryError> {
        if ![cx, cy, w, h, theta].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if w < T::zero() || h < T::zero() {
            return Err(GeometryError::NegativeSide);
        }
        let (w, h, theta) = canonical_orientation(w, h, theta);
        Ok(Self { cx, cy, w, h, theta })
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    pub fn center(&self) -> Point<T> {
        Point::new(self.cx, self.cy)
    }

    /// The four corners, clockwise on screen (y down), starting from the
    /// corner at `-w/2, -h/2` in the box frame.
    pub fn corners(&self) -> [Point<T>; 4] {
        let (s, c) = self.theta.sin_cos();
        let hw = self.w / T::two();
        let hh = self.h / T::two();
        let at = |a: T, b: T| Point::new(self.cx + a * c - b * s, self.cy + a * s + b * c);
        [at(-hw, -hh), at(hw, -hh), at(hw, hh), at(-hw, hh)]
    }

    /// Recovers a box from four corners in the order produced by
    /// [`OrientedBox::corners`] (any starting corner, either winding).
    pub fn from_corners(pts: &[Point<T>; 4]) -> Result<Self, GeometryError> {
        let four = T::lit(4.0);
        let cx = pts.iter().fold(T::zero(), |a, p| a + p.x) / four;
        let cy = pts.iter().fold(T::zero(), |a, p| a + p.y) / four;
        let w = pts[0].dist(pts[1]);
        let h = pts[1].dist(pts[2]);
        let theta = (pts[1].y - pts[0].y).atan2(pts[1].x - pts[0].x);
        Self::new(cx, cy, w, h, theta)
    }

    pub fn bounding_box(&self) -> BBox<T> {
        BBox::enclosing(&self.corners()).expect("four finite corners")
    }
}

fn canonical_orientation<T: Scalar>(w: T, h: T, theta: T) -> (T, T, T) {
    let (mut w, mut h, mut theta) = (w, h, theta);
    if w < h {
        std::mem::swap(&mut w, &mut h);
        theta = theta + T::FRAC_PI_2();
    }
    let tie_tol = T::epsilon().sqrt() * w.max(T::one());
    if (w - h).abs() <= tie_tol {
        // Square: theta is only defined modulo pi/2.
        theta = wrap(theta, T::FRAC_PI_2());
        if w.is_zero() {
            theta = T::zero();
        }
    } else {
        theta = wrap(theta, T::PI());
    }
    (w, h, theta)
}

/// Wraps `theta` into `[-period/2, period/2)`.
fn wrap<T: Scalar>(theta: T, period: T) -> T {
    let half = period / T::two();
    let mut t = (theta + half) % period;
    if t < T::zero() {
        t = t + period;
    }
    let t = t - half;
    // Guard the open upper end against rounding.
    if t >= half {
        t - period
    } else {
        t
    }
}

/// Closed ring of at least three points; the closing edge is implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point<T>>", into = "Vec<Point<T>>", bound = "T: Scalar + Serialize + for<'a> Deserialize<'a>")]
pub struct Polygon<T> {
    points: Vec<Point<T>>,
}

impl<T: Scalar> Polygon<T> {
    /// Validates a ring. A trailing point equal to the first one is treated
    /// as an explicit closing point and dropped.
    pub fn new(mut points: Vec<Point<T>>) -> Result<Self, GeometryError> {
        if points.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if points.len() > 1 && points.first() == points.last() {
            points.pop();
        }
        if points.len() < 3 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        if let Some(i) = (0..points.len()).find(|&i| points[i] == points[(i + 1) % points.len()]) {
            return Err(GeometryError::RepeatedPoint(i));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point<T>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point<T>> {
        self.points
    }

    pub fn bounding_box(&self) -> BBox<T> {
        BBox::enclosing(&self.points).expect("validated polygon")
    }

    /// Shoelace area (absolute value).
    pub fn area(&self) -> T {
        let n = self.points.len();
        let twice = (0..n).fold(T::zero(), |acc, i| {
            let (a, b) = (self.points[i], self.points[(i + 1) % n]);
            acc + (a.x * b.y - b.x * a.y)
        });
        twice.abs() / T::two()
    }

    fn edges(&self) -> impl Iterator<Item = (Point<T>, Point<T>)> + '_ {
        let n = self.points.len();
        (0..n).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }
}

impl<T: Scalar> TryFrom<Vec<Point<T>>> for Polygon<T> {
    type Error = GeometryError;

    fn try_from(points: Vec<Point<T>>) -> Result<Self, Self::Error> {
        Self::new(points)
    }
}

impl<T> From<Polygon<T>> for Vec<Point<T>> {
    fn from(p: Polygon<T>) -> Self {
        p.points
    }
}

/// Sum of edge lengths including the closing edge.
pub fn polygon_perimeter<T: Scalar>(poly: &Polygon<T>) -> T {
    poly.edges().fold(T::zero(), |acc, (a, b)| acc + a.dist(b))
}

fn cross<T: Scalar>(o: Point<T>, a: Point<T>, b: Point<T>) -> T {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Convex hull by monotone chain. Collinear points are dropped; fewer than
/// three distinct non-collinear inputs give a hull of one or two points.
pub fn convex_hull<T: Scalar>(points: &[Point<T>]) -> Vec<Point<T>> {
    let mut pts: Vec<Point<T>> = points.to_vec();
    pts.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap().then(a.y.partial_cmp(&b.y).unwrap()));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point<T>> = Vec::with_capacity(pts.len());
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= T::zero() {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point<T>> = Vec::with_capacity(pts.len());
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= T::zero() {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Minimum-area rectangle enclosing `points`.
///
/// One side of the optimal rectangle is collinear with a hull edge, so every
/// hull edge direction is tried as a caliper orientation. Collinear inputs
/// give a zero-height box aligned with the segment.
pub fn min_area_obb<T: Scalar>(points: &[Point<T>]) -> Result<OrientedBox<T>, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::Empty("min_area_obb"));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let hull = convex_hull(points);
    match hull.len() {
        1 => return OrientedBox::new(hull[0].x, hull[0].y, T::zero(), T::zero(), T::zero()),
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let mid = Point::new((a.x + b.x) / T::two(), (a.y + b.y) / T::two());
            let theta = (b.y - a.y).atan2(b.x - a.x);
            return OrientedBox::new(mid.x, mid.y, a.dist(b), T::zero(), theta);
        }
        _ => {}
    }

    let origin = hull[0];
    let n = hull.len();
    let mut best: Option<(T, T, T, T, T, T, T)> = None;
    for i in 0..n {
        let (a, b) = (hull[i], hull[(i + 1) % n]);
        let len = a.dist(b);
        if len.is_zero() {
            continue;
        }
        let (ux, uy) = ((b.x - a.x) / len, (b.y - a.y) / len);
        let (mut amin, mut amax) = (T::infinity(), T::neg_infinity());
        let (mut bmin, mut bmax) = (T::infinity(), T::neg_infinity());
        for p in &hull {
            let (dx, dy) = (p.x - origin.x, p.y - origin.y);
            let s = dx * ux + dy * uy;
            let t = -dx * uy + dy * ux;
            amin = amin.min(s);
            amax = amax.max(s);
            bmin = bmin.min(t);
            bmax = bmax.max(t);
        }
        let area = (amax - amin) * (bmax - bmin);
        if best.map_or(true, |bst| area < bst.0) {
            best = Some((area, ux, uy, amin, amax, bmin, bmax));
        }
    }
    let (_, ux, uy, amin, amax, bmin, bmax) = best.expect("hull with three or more vertices has an edge");
    let sa = (amin + amax) / T::two();
    let sb = (bmin + bmax) / T::two();
    let cx = origin.x + sa * ux - sb * uy;
    let cy = origin.y + sa * uy + sb * ux;
    OrientedBox::new(cx, cy, amax - amin, bmax - bmin, uy.atan2(ux))
}

/// Distance from `p` to the closed segment `ab`.
pub fn point_segment_distance<T: Scalar>(p: Point<T>, a: Point<T>, b: Point<T>) -> T {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2.is_zero() {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).max(T::zero()).min(T::one());
    p.dist(Point::new(a.x + t * dx, a.y + t * dy))
}

/// Ramer-Douglas-Peucker over a closed ring.
///
/// The ring is split at two anchors, the lexicographically smallest point
/// and the point farthest from it, and each half is simplified as an open
/// chain. A point is removed when its deviation is `<= epsilon`, so exactly
/// collinear points always go. The result never has fewer than three points:
/// if only the anchors survive, the input point farthest from the anchor
/// segment is added back.
pub fn rdp_simplify<T: Scalar>(poly: &Polygon<T>, epsilon: T) -> Polygon<T> {
    let pts = poly.points();
    let n = pts.len();
    if n <= 3 {
        return poly.clone();
    }
    let epsilon = epsilon.max(T::zero());

    let a = (0..n)
        .min_by(|&i, &j| {
            let (p, q) = (pts[i], pts[j]);
            p.x.partial_cmp(&q.x).unwrap().then(p.y.partial_cmp(&q.y).unwrap())
        })
        .expect("nonempty");
    // Farthest point from the anchor; ties go to the first in ring order.
    let mut b = a;
    let mut far = T::neg_infinity();
    for k in 1..n {
        let i = (a + k) % n;
        let d = pts[a].dist(pts[i]);
        if d > far {
            far = d;
            b = i;
        }
    }

    let ring: Vec<usize> = (0..=n).map(|k| (a + k) % n).collect();
    let split = (b + n - a) % n;
    let mut keep = vec![false; n];
    keep[a] = true;
    keep[b] = true;
    simplify_chain(pts, &ring[..=split], epsilon, &mut keep);
    simplify_chain(pts, &ring[split..], epsilon, &mut keep);

    let mut out: Vec<Point<T>> = ring[..n].iter().filter(|&&i| keep[i]).map(|&i| pts[i]).collect();
    out.dedup();
    while out.len() > 1 && out.first() == out.last() {
        out.pop();
    }
    if out.len() < 3 {
        let third = (0..n)
            .filter(|&i| i != a && i != b)
            .max_by(|&i, &j| {
                let di = point_segment_distance(pts[i], pts[a], pts[b]);
                let dj = point_segment_distance(pts[j], pts[a], pts[b]);
                di.partial_cmp(&dj).unwrap().then(j.cmp(&i))
            })
            .expect("ring with more than three points");
        let mut idx = [a, b, third];
        idx.sort_by_key(|&i| (i + n - a) % n);
        out = idx.iter().map(|&i| pts[i]).collect();
        out.dedup();
        if out.len() < 3 {
            return poly.clone();
        }
    }
    Polygon::new(out).unwrap_or_else(|_| poly.clone())
}

fn simplify_chain<T: Scalar>(pts: &[Point<T>], chain: &[usize], epsilon: T, keep: &mut [bool]) {
    if chain.len() < 3 {
        return;
    }
    let (first, last) = (pts[chain[0]], pts[chain[chain.len() - 1]]);
    let mut worst = 0;
    let mut worst_d = T::neg_infinity();
    for (k, &i) in chain.iter().enumerate().take(chain.len() - 1).skip(1) {
        let d = point_segment_distance(pts[i], first, last);
        if d > worst_d {
            worst_d = d;
            worst = k;
        }
    }
    if worst_d > epsilon {
        keep[chain[worst]] = true;
        simplify_chain(pts, &chain[..=worst], epsilon, keep);
        simplify_chain(pts, &chain[worst..], epsilon, keep);
    }
}

/// A stored annotation geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[serde(bound = "T: Scalar + Serialize + for<'a> Deserialize<'a>")]
pub enum Shape<T> {
    Bbox(BBox<T>),
    Obb(OrientedBox<T>),
    Polygon { points: Polygon<T> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Bbox,
    Obb,
    Polygon,
}

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Bbox => "bbox",
            ShapeKind::Obb => "obb",
            ShapeKind::Polygon => "polygon",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bbox" => Some(ShapeKind::Bbox),
            "obb" => Some(ShapeKind::Obb),
            "polygon" => Some(ShapeKind::Polygon),
            _ => None,
        }
    }
}

impl<T: Scalar> Shape<T> {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Bbox(_) => ShapeKind::Bbox,
            Shape::Obb(_) => ShapeKind::Obb,
            Shape::Polygon { .. } => ShapeKind::Polygon,
        }
    }

    pub fn bounding_box(&self) -> BBox<T> {
        match self {
            Shape::Bbox(b) => *b,
            Shape::Obb(o) => o.bounding_box(),
            Shape::Polygon { points } => points.bounding_box(),
        }
    }

    /// Re-runs the constructor checks on a shape built from untrusted
    /// fields (for example deserialized JSON). OBBs come back canonical.
    pub fn validated(self) -> Result<Self, GeometryError> {
        Ok(match self {
            Shape::Bbox(b) => Shape::Bbox(BBox::new(b.x1, b.y1, b.x2, b.y2)?),
            Shape::Obb(o) => Shape::Obb(OrientedBox::new(o.cx, o.cy, o.w, o.h, o.theta)?),
            Shape::Polygon { points } => Shape::Polygon { points: Polygon::new(points.into_points())? },
        })
    }

    /// Whether every vertex lies in `[0, width] x [0, height]`.
    pub fn within(&self, width: T, height: T) -> bool {
        let frame = BBox { x1: T::zero(), y1: T::zero(), x2: width, y2: height };
        let bb = self.bounding_box();
        // OBB corners come from trig; allow rounding at the frame edge.
        let slack = T::lit(1e-6) * width.max(height).max(T::one());
        let grown = BBox { x1: -slack, y1: -slack, x2: frame.x2 + slack, y2: frame.y2 + slack };
        match self {
            Shape::Obb(_) => grown.contains(&bb),
            _ => frame.contains(&bb),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn poly(pts: &[(f64, f64)]) -> Polygon<f64> {
        Polygon::new(pts.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap()
    }

    fn rotate(pts: &[(f64, f64)], deg: f64, about: (f64, f64)) -> Vec<Point<f64>> {
        let (s, c) = deg.to_radians().sin_cos();
        pts.iter()
            .map(|&(x, y)| {
                let (dx, dy) = (x - about.0, y - about.1);
                Point::new(about.0 + dx * c - dy * s, about.1 + dx * s + dy * c)
            })
            .collect()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bb(0., 0., 10., 10.), &bb(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&bb(0., 0., 10., 10.), &bb(20., 20., 30., 30.)), 0.0);
        assert_relative_eq!(iou(&bb(0., 0., 10., 10.), &bb(5., 0., 15., 10.)), 1.0 / 3.0, epsilon = 1e-12);
        // both degenerate
        assert_eq!(iou(&bb(1., 1., 1., 1.), &bb(1., 1., 1., 1.)), 0.0);
    }

    #[test]
    fn iou_generic_f32() {
        let a = BBox::<f32>::new(0., 0., 10., 10.).unwrap();
        let b = BBox::<f32>::new(5., 0., 15., 10.).unwrap();
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn bbox_rejects_inverted_and_nan() {
        assert_eq!(BBox::new(2.0, 0.0, 1.0, 1.0), Err(GeometryError::Inverted));
        assert_eq!(BBox::new(f64::NAN, 0.0, 1.0, 1.0), Err(GeometryError::NonFinite));
    }

    #[test]
    fn union_box_examples() {
        assert_eq!(union_box(&[bb(0., 0., 10., 10.)]).unwrap(), bb(0., 0., 10., 10.));
        assert_eq!(union_box(&[bb(0., 0., 10., 10.), bb(5., 5., 20., 12.)]).unwrap(), bb(0., 0., 20., 12.));
        assert_eq!(
            union_box(&[bb(2., 3., 4., 5.), bb(1., 6., 3., 9.), bb(0., 0., 1., 1.)]).unwrap(),
            bb(0., 0., 4., 9.)
        );
        assert!(union_box::<f64>(&[]).is_err());
    }

    #[test]
    fn obb_axis_aligned_square() {
        let pts: Vec<_> = [(0., 0.), (10., 0.), (10., 10.), (0., 10.)].iter().map(|&(x, y)| Point::new(x, y)).collect();
        let o = min_area_obb(&pts).unwrap();
        assert_relative_eq!(o.cx, 5.0, epsilon = 1e-9);
        assert_relative_eq!(o.cy, 5.0, epsilon = 1e-9);
        assert_relative_eq!(o.w, 10.0, epsilon = 1e-9);
        assert_relative_eq!(o.h, 10.0, epsilon = 1e-9);
        assert_relative_eq!(o.theta, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn obb_rotated_square_30deg() {
        let pts = rotate(&[(0., 0.), (10., 0.), (10., 10.), (0., 10.)], 30.0, (5., 5.));
        let o = min_area_obb(&pts).unwrap();
        assert_relative_eq!(o.w, 10.0, epsilon = 1e-9);
        assert_relative_eq!(o.h, 10.0, epsilon = 1e-9);
        assert_relative_eq!(o.area(), 100.0, epsilon = 1e-9);
        assert_relative_eq!(o.theta, 30f64.to_radians(), epsilon = 1e-9);
    }

    #[test]
    fn obb_rectangle_prefers_long_side() {
        let pts = rotate(&[(0., 0.), (4., 0.), (4., 20.), (0., 20.)], 10.0, (0., 0.));
        let o = min_area_obb(&pts).unwrap();
        assert_relative_eq!(o.w, 20.0, epsilon = 1e-9);
        assert_relative_eq!(o.h, 4.0, epsilon = 1e-9);
        // long side direction is 100deg, canonical form -80deg
        assert_relative_eq!(o.theta, (-80f64).to_radians(), epsilon = 1e-9);
    }

    #[test]
    fn obb_collinear_is_degenerate() {
        let pts: Vec<_> = (0..5).map(|i| Point::new(i as f64, 2.0 * i as f64)).collect();
        let o = min_area_obb(&pts).unwrap();
        assert_eq!(o.h, 0.0);
        assert_relative_eq!(o.w, 20f64.sqrt() * 2.0, epsilon = 1e-9);
        assert_relative_eq!(o.theta, 2f64.atan(), epsilon = 1e-12);
    }

    #[test]
    fn obb_corner_roundtrip() {
        let o = OrientedBox::new(12.0, 7.0, 9.0, 3.0, 0.4).unwrap();
        let back = OrientedBox::from_corners(&o.corners()).unwrap();
        assert_relative_eq!(back.cx, o.cx, epsilon = 1e-12);
        assert_relative_eq!(back.w, o.w, epsilon = 1e-12);
        assert_relative_eq!(back.h, o.h, epsilon = 1e-12);
        assert_relative_eq!(back.theta, o.theta, epsilon = 1e-12);
    }

    #[test]
    fn theta_normalization_range() {
        let o = OrientedBox::new(0.0, 0.0, 5.0, 2.0, std::f64::consts::FRAC_PI_2).unwrap();
        assert_relative_eq!(o.theta, -std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        let o = OrientedBox::new(0.0, 0.0, 2.0, 5.0, 0.0).unwrap();
        assert_eq!((o.w, o.h), (5.0, 2.0));
        assert_relative_eq!(o.theta, -std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        let sq = OrientedBox::new(0.0, 0.0, 3.0, 3.0, 1.2).unwrap();
        assert_relative_eq!(sq.theta, 1.2 - std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn perimeter_examples() {
        assert_eq!(polygon_perimeter(&poly(&[(0., 0.), (1., 0.), (1., 1.), (0., 1.)])), 4.0);
        assert_eq!(polygon_perimeter(&poly(&[(0., 0.), (3., 0.), (0., 4.)])), 12.0);
        let hex: Vec<_> = (0..6)
            .map(|k| {
                let a = std::f64::consts::PI / 3.0 * k as f64;
                Point::new(a.cos(), a.sin())
            })
            .collect();
        assert_relative_eq!(polygon_perimeter(&Polygon::new(hex).unwrap()), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn polygon_validation() {
        assert_eq!(Polygon::<f64>::new(vec![Point::new(0., 0.), Point::new(1., 0.)]), Err(GeometryError::TooFewPoints(2)));
        let dup = vec![Point::new(0., 0.), Point::new(1., 0.), Point::new(1., 0.), Point::new(0., 1.)];
        assert_eq!(Polygon::new(dup), Err(GeometryError::RepeatedPoint(1)));
        // explicit closing point is dropped
        let closed = poly(&[(0., 0.), (1., 0.), (1., 1.), (0., 0.)]);
        assert_eq!(closed.len(), 3);
    }

    #[test]
    fn rdp_square_with_midpoints() {
        let p = poly(&[(0., 0.), (5., 0.), (10., 0.), (10., 5.), (10., 10.), (5., 10.), (0., 10.), (0., 5.)]);
        let eps = 0.002 * polygon_perimeter(&p);
        let s = rdp_simplify(&p, eps);
        assert_eq!(s.points(), poly(&[(0., 0.), (10., 0.), (10., 10.), (0., 10.)]).points());
    }

    #[test]
    fn rdp_square_starting_at_midpoint() {
        let p = poly(&[(5., 0.), (10., 0.), (10., 5.), (10., 10.), (5., 10.), (0., 10.), (0., 5.), (0., 0.)]);
        let s = rdp_simplify(&p, 0.002 * polygon_perimeter(&p));
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn rdp_triangle_unchanged() {
        let t = poly(&[(0., 0.), (3., 0.), (0., 4.)]);
        assert_eq!(rdp_simplify(&t, 1e6), t);
    }

    #[test]
    fn rdp_zero_epsilon_drops_exact_collinear_only() {
        // (2,0) is exactly collinear; (4,0.001) is not.
        let p = poly(&[(0., 0.), (2., 0.), (4., 0.), (4., 3.), (0., 3.)]);
        let s = rdp_simplify(&p, 0.0);
        assert_eq!(s.points(), poly(&[(0., 0.), (4., 0.), (4., 3.), (0., 3.)]).points());
        let q = poly(&[(0., 0.), (2., 0.001), (4., 0.), (4., 3.), (0., 3.)]);
        assert_eq!(rdp_simplify(&q, 0.0), q);
    }

    #[test]
    fn rdp_floor_of_three_points() {
        let p = poly(&[(0., 0.), (10., 0.2), (20., 0.), (10., -0.1)]);
        let s = rdp_simplify(&p, 5.0);
        assert_eq!(s.len(), 3);
        assert!(s.points().contains(&Point::new(0., 0.)));
        assert!(s.points().contains(&Point::new(20., 0.)));
        assert!(s.points().contains(&Point::new(10., 0.2)));
    }

    #[test]
    fn shape_serde_tagged() {
        let s: Shape<f64> = Shape::Bbox(bb(1., 2., 3., 4.));
        let j = serde_json::to_value(&s).unwrap();
        assert_eq!(j["type"], "bbox");
        let p: Shape<f64> = serde_json::from_str(r#"{"type":"polygon","points":[{"x":0,"y":0},{"x":1,"y":0},{"x":0,"y":1}]}"#).unwrap();
        assert_eq!(p.kind(), ShapeKind::Polygon);
        let bad = serde_json::from_str::<Shape<f64>>(r#"{"type":"polygon","points":[{"x":0,"y":0},{"x":1,"y":0}]}"#);
        assert!(bad.is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox<f64>> {
        (0.0..100.0f64, 0.0..100.0f64, 0.0..50.0f64, 0.0..50.0f64).prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h))
    }

    fn arb_ring() -> impl Strategy<Value = Polygon<f64>> {
        // star-shaped ring from sorted angles and random radii
        prop::collection::vec((0.0..std::f64::consts::TAU, 1.0..50.0f64), 3..40).prop_filter_map("valid ring", |mut v| {
            v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let pts: Vec<_> = v.iter().map(|&(a, r)| Point::new(60.0 + r * a.cos(), 60.0 + r * a.sin())).collect();
            Polygon::new(pts).ok()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assume!(a.area() > 0.0);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn union_contains_inputs(boxes in prop::collection::vec(arb_box(), 1..10)) {
            let u = union_box(&boxes).unwrap();
            for b in &boxes {
                prop_assert!(u.contains(b));
            }
        }

        #[test]
        fn obb_area_rotation_invariant(
            pts in prop::collection::vec((0.0..100.0f64, 0.0..100.0f64), 3..30),
            deg in 0.0..360.0f64,
        ) {
            let base: Vec<_> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
            prop_assume!(convex_hull(&base).len() >= 3);
            let rotated = rotate(&pts, deg, (50.0, 50.0));
            let a0 = min_area_obb(&base).unwrap().area();
            let a1 = min_area_obb(&rotated).unwrap().area();
            prop_assert!((a0 - a1).abs() <= 1e-6 * a0.max(1e-9), "{} vs {}", a0, a1);
            prop_assert!(a0 <= BBox::enclosing(&base).unwrap().area() * (1.0 + 1e-12));
        }

        #[test]
        fn obb_encloses_points(pts in prop::collection::vec((0.0..100.0f64, 0.0..100.0f64), 3..30)) {
            let base: Vec<_> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
            let o = min_area_obb(&base).unwrap();
            prop_assert!(o.theta >= -std::f64::consts::FRAC_PI_2 && o.theta < std::f64::consts::FRAC_PI_2);
            prop_assert!(o.w >= o.h);
            let (s, c) = o.theta.sin_cos();
            for p in &base {
                let (dx, dy) = (p.x - o.cx, p.y - o.cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                prop_assert!(u.abs() <= o.w / 2.0 + 1e-7 && v.abs() <= o.h / 2.0 + 1e-7);
            }
        }

        #[test]
        fn rdp_contracts(p in arb_ring(), frac in 0.0..0.05f64) {
            let eps = frac * polygon_perimeter(&p);
            let s = rdp_simplify(&p, eps);
            prop_assert!(s.len() >= 3);
            prop_assert!(s.len() <= p.len());
            // subset
            for q in s.points() {
                prop_assert!(p.points().contains(q));
            }
            // removed points within eps of the simplified ring (brute force)
            for q in p.points() {
                if s.points().contains(q) { continue; }
                let d = s.edges().map(|(a, b)| point_segment_distance(*q, a, b)).fold(f64::INFINITY, f64::min);
                prop_assert!(d <= eps + 1e-9, "deviation {} > {}", d, eps);
            }
            // idempotent
            prop_assert_eq!(rdp_simplify(&s, eps), s);
        }
    }

    #[test]
    fn exhaustive_angle_sweep_matches_calipers() {
        // seeded point cloud checked against a 0.1 degree rotation sweep
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let pts: Vec<Point<f64>> =
                (0..25).map(|_| Point::new(rng.random_range(0.0..80.0), rng.random_range(0.0..40.0))).collect();
            let best = min_area_obb(&pts).unwrap().area();
            let mut sweep = f64::INFINITY;
            for k in 0..1800 {
                let (s, c) = (k as f64 * 0.1).to_radians().sin_cos();
                let proj: Vec<(f64, f64)> = pts.iter().map(|p| (p.x * c + p.y * s, -p.x * s + p.y * c)).collect();
                let w = proj.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) - proj.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
                let h = proj.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) - proj.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
                sweep = sweep.min(w * h);
            }
            assert!(best <= sweep + 1e-9, "calipers {best} > sweep {sweep}");
            assert!(best >= sweep * 0.97, "sweep should come close: {best} vs {sweep}");
            assert!(best <= BBox::enclosing(&pts).unwrap().area() + 1e-9);
        }
    }
}
