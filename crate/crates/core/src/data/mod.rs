//! Dataset ingestion and synthetic task generation.

pub mod loader;
pub mod synth;

pub use loader::{load_task, write_task_dir, DatasetManifest, IdDictionaries, LoadedTask};
pub use synth::{generate_synthetic, SynthSpec, SyntheticTask};
