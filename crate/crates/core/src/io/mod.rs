//! File formats and run configuration.
//!
//! - [`nlfm`]: little-endian float maps with a small header
//! - [`png16`]: 16-bit PNG depth, `pixel / 256` meters, 0 for invalid
//! - [`config`]: TOML run configuration

pub mod config;
pub mod nlfm;
pub mod png16;

use std::path::Path;

use crate::error::{Error, Result};

pub use config::RunConfig;
pub use nlfm::{read_map, write_map, FloatMap};
pub use png16::{read_depth_png16, write_depth_png16, PNG_DEPTH_SCALE};

/// Formats `v` with 9 significant digits for CSV output, `.` as decimal
/// separator. Non-finite values print as `nan`, `inf` and `-inf`.
pub fn fmt_sig(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    // round to 9 significant digits, then print the shortest exact form
    format!("{v:.8e}").parse::<f64>().map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
