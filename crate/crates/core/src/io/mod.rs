//! On-disk formats: scene bundles, PLY point clouds and TUM trajectories.

mod bundle;
mod ply;
mod trajectory;

pub use bundle::{
    list_files, read_bundle, write_bundle, Bundle, CameraRecord, GroupTruthRecord, Provenance,
    SimilarityRecord, MANIFEST, SCHEMA_VERSION,
};
pub use ply::{export_ply, frame_color, read_ply, reconstruction_vertices, write_ply, PlyVertex};
pub use trajectory::{export_trajectory, format_trajectory, parse_trajectory, read_trajectory};

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: malformed JSON: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: blob is missing", path.display())]
    MissingBlob { path: PathBuf },
    #[error("{}: expected {expected} bytes, found {got}", path.display())]
    LengthMismatch {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("{}: unsupported schema version {version}", path.display())]
    UnsupportedVersion { path: PathBuf, version: String },
    #[error("{0}")]
    Invalid(String),
}
