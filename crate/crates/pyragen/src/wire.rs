//! JSON shapes shared by the HTTP service and the CLI's provenance files.

use pyragen_core::apps::Provenance;
use pyragen_core::image::Rect;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SAMPLES: usize = 4;
pub const MAX_SAMPLES: usize = 64;

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceJson {
    pub operation: String,
    pub seed: u64,
    pub level: String,
    pub label: usize,
    pub mask_hash: String,
}

impl From<&Provenance> for ProvenanceJson {
    fn from(p: &Provenance) -> Self {
        ProvenanceJson {
            operation: p.operation.clone(),
            seed: p.seed,
            level: p.level.clone(),
            label: p.label,
            mask_hash: p.mask_hash.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Meta {
    pub levels: Vec<String>,
    pub classes: Vec<String>,
    pub image_size: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertRequest {
    /// Base64 PNG.
    pub image: String,
    pub level: String,
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    pub seed: Option<u64>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepaintRequest {
    pub image: String,
    /// Base64 single-channel PNG; values above 127 mark pixels to regenerate.
    pub region: String,
    pub level: String,
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    pub seed: Option<u64>,
    pub label: Option<usize>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placement {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl From<Placement> for Rect {
    fn from(p: Placement) -> Rect {
        Rect::new(p.x, p.y, p.width, p.height)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeRequest {
    pub base: String,
    pub patch: String,
    pub placement: Placement,
    pub level: String,
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    pub seed: Option<u64>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelabelRequest {
    pub image: String,
    pub label: usize,
    #[serde(default = "default_samples")]
    pub num_samples: usize,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    /// Base64 PNGs.
    pub samples: Vec<String>,
    pub seed_used: u64,
    pub label_used: usize,
    pub provenance: ProvenanceJson,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    /// Offending request field, for schema errors.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub path: Option<String>,
    /// Correlation id of an internal failure, also present in the server log.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub id: Option<String>,
}
