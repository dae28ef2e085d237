//! On-disk formats: MVLT binary tensors and binary PPM images.

mod mvlt;
mod ppm;

pub use mvlt::{decode_mvlt, encode_mvlt, load_mvlt, save_mvlt, DynTensor, MVLT_MAGIC, MVLT_VERSION};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
