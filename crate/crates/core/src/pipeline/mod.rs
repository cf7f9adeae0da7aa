//! Datasets, latent stores, augmentation and batching.

mod augment;
mod batch;
mod dataset;
pub mod fixture;
mod store;

pub use augment::{
    augment, augment_with, spatial_map_op, AugmentParams, Interpolation, SpatialMap, CENTER_OFFSET, MAX_OFFSET,
    RESIZE_TO,
};
pub use batch::{batches, epoch_rng, Batch, Batches};
pub use dataset::{ingest, minc_manifest, path_key, DatasetEntry, DatasetIndex, IngestOptions, Split, SplitFractions};
pub use store::{LatentRecord, LatentStore, STORE_MAGIC, STORE_VERSION};

use std::path::PathBuf;

use latentvision_nn::par;

use crate::codec::{Codec, ImageTensor, HYPER_STRIDE};
use crate::Result;

/// Load an image and reflect-pad it to a multiple of 64. Returns the padded
/// image and the pixel count before padding.
pub fn load_padded(path: &std::path::Path) -> Result<(ImageTensor, usize)> {
    let img = ImageTensor::load(path)?;
    let pixels = img.height() * img.width();
    Ok((img.reflect_pad(HYPER_STRIDE), pixels))
}

#[derive(Clone, Debug, Default)]
pub struct PrecomputeReport {
    pub written: usize,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Compress every image of `split` and keep its `(ŷ, σ̂)`. Images that fail
/// to load or code are skipped with a warning. Records follow index order,
/// so the store is reproducible byte for byte.
pub fn precompute_latents(
    index: &DatasetIndex,
    split: Split,
    codec: &Codec,
) -> Result<(LatentStore, PrecomputeReport)> {
    let entries: Vec<&DatasetEntry> = index.split(split).collect();
    let results = par::map_slice(&entries, |e| -> Result<LatentRecord> {
        let (img, pixels) = load_padded(&index.full_path(e))?;
        let (code, _, stream) = codec.compress(&img)?;
        LatentRecord::from_code(&code, e.class_id, path_key(&e.path), stream.len_bytes(), pixels)
    });
    let mut store = LatentStore::new(codec.quality_index(), index.classes.clone());
    let mut report = PrecomputeReport::default();
    for (e, r) in entries.iter().zip(results) {
        match r.and_then(|rec| store.push(rec)) {
            Ok(()) => report.written += 1,
            Err(err) => {
                log::warn!("skipping {}: {err}", e.path.display());
                report.skipped.push((e.path.clone(), err.to_string()));
            }
        }
    }
    Ok((store, report))
}
