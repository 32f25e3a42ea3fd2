//! Domain records shared by the pipeline, the store and the format layer.

use serde::{Deserialize, Serialize};

use crate::geometry::ShapeKind;
use crate::preannotator::PipelineSettings;
use crate::Shape;

macro_rules! string_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s {
                    $($text => Some($name::$variant),)+
                    _ => None,
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum!(
    /// Fixed at project creation; decides which geometry kinds are allowed.
    ProjectMode {
        Detection => "detection",
        Obb => "obb",
        Segmentation => "segmentation",
    }
);

string_enum!(ImageStatus {
    Unannotated => "unannotated",
    PendingReview => "pending_review",
    Annotated => "annotated",
    Failed => "failed",
});

string_enum!(AnnotationSource {
    Auto => "auto",
    AutoVerified => "auto_verified",
    Assisted => "assisted",
    Manual => "manual",
});

string_enum!(AnnotationState {
    Pending => "pending",
    Accepted => "accepted",
});

impl ProjectMode {
    pub fn allows(self, kind: ShapeKind) -> bool {
        match self {
            ProjectMode::Detection => kind == ShapeKind::Bbox,
            ProjectMode::Obb => matches!(kind, ShapeKind::Obb | ShapeKind::Bbox),
            ProjectMode::Segmentation => matches!(kind, ShapeKind::Polygon | ShapeKind::Bbox),
        }
    }
}

pub type ProjectId = i64;
pub type ClassId = i64;
pub type AnnotationId = i64;

/// Image ids are unique across projects: the project id sits in the high
/// 32 bits, the per-project row id in the low 32 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub i64);

impl ImageId {
    pub fn new(project: ProjectId, local: i64) -> Self {
        Self((project << 32) | (local & 0xffff_ffff))
    }

    pub fn project(self) -> ProjectId {
        self.0 >> 32
    }

    pub fn local(self) -> i64 {
        self.0 & 0xffff_ffff
    }
}

impl std::fmt::Display for ImageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub id: ProjectId,
    pub name: String,
    pub mode: ProjectMode,
    pub settings: PipelineSettings,
    pub created_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelClass {
    pub id: ClassId,
    pub project_id: ProjectId,
    pub name: String,
    pub display_color: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub project_id: ProjectId,
    pub file_name: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub status: ImageStatus,
    /// Set when pre-annotation found nothing and the image needs manual or
    /// assisted labelling.
    pub needs_manual: bool,
    pub preannotated: bool,
    pub revision: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: AnnotationId,
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub geometry: Shape,
    pub detector_score: Option<f64>,
    pub verified_score: Option<f64>,
    pub source: AnnotationSource,
    pub state: AnnotationState,
}

/// An annotation that has not been stored yet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewAnnotation {
    pub class_id: ClassId,
    pub geometry: Shape,
    #[serde(default)]
    pub detector_score: Option<f64>,
    #[serde(default)]
    pub verified_score: Option<f64>,
    pub source: AnnotationSource,
    pub state: AnnotationState,
}

impl From<&Annotation> for NewAnnotation {
    fn from(a: &Annotation) -> Self {
        Self {
            class_id: a.class_id,
            geometry: a.geometry.clone(),
            detector_score: a.detector_score,
            verified_score: a.verified_score,
            source: a.source,
            state: a.state,
        }
    }
}

/// Display color for a class, stable per name.
pub fn display_color(name: &str) -> String {
    let c = crate::providers::mock::class_color(name);
    format!("#{:02x}{:02x}{:02x}", c.0[0], c.0[1], c.0[2])
}
