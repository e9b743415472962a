//! The full network, its configuration and checkpoint I/O.

mod checkpoint;
mod config;
mod smaat;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Checkpoint, Entry};
pub(crate) use checkpoint::write_atomic;
pub use config::{Architecture, ModelConfig, Preset, SPATIAL_MULTIPLE};
pub use smaat::SmaAtUNet;
