//! Pre-annotation engine for image datasets.
//!
//! Geometry and mask routines are generic over the float type
//! ([`scalar::Scalar`], implemented for `f32` and `f64`). The pipeline, the
//! store and the formats work in `f64`; the aliases below name those
//! concrete types.

pub mod formats;
pub mod geometry;
pub mod model;
pub mod postprocess;
pub mod preannotator;
pub mod providers;
pub mod scalar;
pub mod store;
pub mod synth;

pub type Point = geometry::Point<f64>;
pub type BBox = geometry::BBox<f64>;
pub type OrientedBox = geometry::OrientedBox<f64>;
pub type Polygon = geometry::Polygon<f64>;
pub type Shape = geometry::Shape<f64>;

pub type Point32 = geometry::Point<f32>;
pub type BBox32 = geometry::BBox<f32>;
pub type OrientedBox32 = geometry::OrientedBox<f32>;
pub type Polygon32 = geometry::Polygon<f32>;
pub type Shape32 = geometry::Shape<f32>;
