//! Multi-exposure image fusion through learned, editable-size 3D color
//! lookup tables.
//!
//! A teacher–student pair of small networks is trained to emit a 3D LUT for
//! each exposure stack; the student conditions an implicit generator on a
//! latent code, so the grid resolution is a free inference-time choice. The
//! LUT is then applied to a weighted per-pixel fusion of the full-resolution
//! inputs, which keeps the heavy work independent of image size.

pub mod checkpoint;
pub mod error;
pub mod image;
pub mod lut;
pub mod tensor;

pub use error::{Error, Result};

/// Entry point for the `lutfuse` binary. Returns the process exit code.
pub fn run_cli() -> i32 {
    // replaced by the full CLI once the pipeline modules land
    eprintln!("lutfuse: no subcommands available yet");
    2
}
