//! On-disk formats: PGM/PPM images, raw maps, manifests, checkpoints,
//! network spec files and the synthetic detection data set.

mod checkpoint;
mod image;
mod manifest;
mod specfile;
mod synth;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use image::{
    decode_pnm, encode_pnm, read_image, read_map, read_raw_map, write_image, write_map, write_raw_map, ClampStatus,
};
pub use manifest::{load_dataset, Annotation, Manifest, Record};
pub use specfile::{format_spec, parse_spec, read_spec_file};
pub use synth::{synth_dataset, SynthConfig};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
