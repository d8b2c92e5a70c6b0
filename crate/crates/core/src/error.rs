use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(
        "layout saturation: could not place object {placed_index} after {attempts} attempts \
         (canvas_size={canvas_size}, num_objects={num_objects}, categories={categories})"
    )]
    LayoutSaturation {
        canvas_size: usize,
        num_objects: usize,
        categories: usize,
        placed_index: usize,
        attempts: usize,
    },

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt dataset at {path}: {detail}")]
    CorruptDataset { path: PathBuf, detail: String },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("degenerate instance: scene {scene_id}, index {index} has an empty mask crop")]
    DegenerateInstance { scene_id: String, index: usize },

    #[error("empty category: no instances for category ids {0:?}")]
    EmptyCategory(Vec<u32>),

    #[error("pool miss: no pool entries for category {0}")]
    PoolMiss(u32),

    #[error("schedule exhausted: iteration {n} of {total}")]
    ScheduleExhausted { n: u64, total: u64 },

    #[error("box outside image")]
    BoxOutsideImage,

    #[error("undefined distance for empty edge set")]
    EmptyEdgeSet,

    #[error("internal invariant failure: {0}")]
    Internal(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
