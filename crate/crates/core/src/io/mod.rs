//! On-disk formats: the tensor container, checkpoints, latent files and CSV.

mod checkpoint;
mod container;
mod table;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use container::{decode, encode, file_hash, Tensor, TensorData, CONTAINER_VERSION};
pub use table::{read_latents, write_csv, write_latents, LatentFile};

use crate::error::Result;

/// Writes through a temporary file in the destination directory and renames
/// it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
