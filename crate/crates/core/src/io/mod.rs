//! File formats: Middlebury `.flo`, binary PGM/PPM, flow color-wheel images
//! and the `RFW1` tensor container used for checkpoints and dataset caches.

mod checkpoint;
mod colorwheel;
mod flo;
mod pnm;
mod weights;

use std::io::Write;
use std::path::Path;

pub use checkpoint::{Checkpoint, Tensor, CHECKPOINT_MAGIC};
pub use colorwheel::{flow_to_rgb, magnitude_percentile, COLORWHEEL_PERCENTILE};
pub use flo::{flo_bytes, parse_flo, read_flo, write_flo, FLO_MAGIC};
pub use pnm::{parse_pnm, read_pnm, write_pnm, Image};
pub use weights::{
    load_conv, load_count, load_flow_params, load_layer, store_conv, store_flow_params, store_layer,
};

use serde::Serialize;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Headered CSV of serializable rows.
pub fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}
