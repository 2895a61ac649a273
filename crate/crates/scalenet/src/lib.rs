//! Dataset readers, synthetic drive export, training and evaluation
//! drivers, and the pieces behind the `scalenet` command-line tool.

use std::path::Path;

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod export;
pub mod images;
pub mod kitti;
pub mod manifest;
pub mod plots;
pub mod run;
pub mod synth;

pub use error::{Error, Result};

/// Writes `value` as pretty JSON with a trailing newline, creating parent
/// directories as needed.
pub fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(Error::io(path))
}
