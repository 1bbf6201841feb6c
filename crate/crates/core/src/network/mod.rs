//! Segmentation backbone with an extendable head, snapshots for
//! teacher/student roles, and scene-level embedders for retrieval.

mod embed;
pub mod layers;
mod model;
mod probmap;
mod snapshot;

pub use embed::{ExternalEmbedder, GridEmbedder, SceneEmbedder};
pub use model::{ArchConfig, ForwardTrace, Logits, ModelGrad, SegmentationModel};
pub use probmap::ProbMap;
pub use snapshot::{restore, snapshot, ModelSnapshot, SNAPSHOT_VERSION};
