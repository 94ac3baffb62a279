//! Bit-exact file formats: volumes (`.dwv.json` header + `.dwv.raw` f32le
//! payload), FSL-style gradient tables (`.bval`/`.bvec`), and model
//! parameter files (`.model.json` manifest + `.model.raw` blobs).
//!
//! All payloads are little-endian regardless of host, and read-after-write
//! reproduces the input bytes exactly.

mod gradients;
mod model;
mod volume;

pub use gradients::{read_gradients, write_gradients, GradientError, GradientScheme};
pub use model::{read_model, write_model, ModelIoError};
pub use volume::{read_volume, write_volume, Volume4D, VolumeError, VolumeKind};
