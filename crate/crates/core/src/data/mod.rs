//! Scene files, the synthetic generator, and batching.

pub mod batch;
pub mod generator;
pub mod geometry;
pub mod io;

pub use batch::{batches, epoch_order, SceneBatch};
pub use generator::{generate_mixed, generate_scene, PresetKind, ScenarioPreset};
pub use io::{load_dir, load_scene, save_scene, SceneFile};
