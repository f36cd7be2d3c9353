//! Configuration, manifests and batch commands of the `cgmmsep` binary.

mod commands;
mod config;
mod manifest;

pub use commands::*;
pub use config::{
    Config, EmSection, GeometrySection, PathsSection, RoomSection, SimulateSection, TrainSection,
};
pub use manifest::{read_manifest, write_manifest, ManifestEntry, MANIFEST_HEADER};
