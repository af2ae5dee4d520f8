//! Messages of the subprocess transport: one JSON object per line over the
//! child's stdin/stdout.
//!
//! ```text
//! -> {"type":"hello","protocol":1,"kind":"detector","crop":"tomato","classes":[0,1,2,...]}
//! <- {"type":"ready","kind":"detector","concurrency":"serial"}
//! -> {"type":"detect","id":"7","image_path":"/tmp/.../img_3.png","width":1472,"height":1472}
//! <- {"type":"detections","id":"7","boxes":[{"x_min":..,"y_min":..,"x_max":..,"y_max":..,"confidence":..}]}
//! -> {"type":"classify","id":"8","image_path":"/tmp/.../img_3.roi0.png","width":512,"height":512}
//! <- {"type":"distribution","id":"8","probs":[..]}
//! <- {"type":"error","id":"8","message":"..."}
//! ```
//!
//! Hand-off files are named `<image_ref>.png`, so a fixture-driven child can
//! recover the image reference from the file stem.

use serde::{Deserialize, Serialize};

use super::{BackendKind, Concurrency};
use crate::imaging::RoiBox;
use crate::taxonomy::{ClassId, Crop};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Request {
    Hello { protocol: u32, kind: BackendKind, crop: Crop, classes: Vec<ClassId> },
    Detect { id: String, image_path: String, width: u32, height: u32 },
    Classify { id: String, image_path: String, width: u32, height: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Reply {
    Ready {
        kind: BackendKind,
        concurrency: Concurrency,
    },
    Detections {
        id: String,
        boxes: Vec<RoiBox>,
    },
    Distribution {
        id: String,
        probs: Vec<f64>,
    },
    Error {
        #[serde(default)]
        id: Option<String>,
        message: String,
    },
}

impl Reply {
    pub fn id(&self) -> Option<&str> {
        match self {
            Reply::Ready { .. } => None,
            Reply::Detections { id, .. } | Reply::Distribution { id, .. } => Some(id),
            Reply::Error { id, .. } => id.as_deref(),
        }
    }
}

/// Keeps `[A-Za-z0-9._-]` and replaces everything else, so a reference can
/// serve as a file stem.
pub fn file_stem_for(image_ref: &str) -> String {
    image_ref.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' }).collect()
}
