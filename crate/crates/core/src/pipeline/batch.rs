use latentvision_nn::{par, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{AugmentParams, Interpolation, SpatialMap};
use super::store::LatentStore;
use crate::{Error, Result};

/// The generator for one epoch: the run seed selects the key, the epoch
/// the stream, so epochs are independent and reproducible.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, C, 28, 28]`.
    pub y: Tensor,
    pub sigma: Tensor,
    pub labels: Vec<usize>,
    /// Record positions in the store.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Iterates a store in batches. Training shuffles the order with `rng` and
/// then draws each record's crop and flip from it in iteration order;
/// evaluation keeps store order and center-crops. The last batch may be
/// short.
pub struct Batches<'a> {
    store: &'a LatentStore,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    train: bool,
}

pub fn batches(store: &LatentStore, batch_size: usize, mut rng: ChaCha8Rng, train: bool) -> Result<Batches<'_>> {
    if store.is_empty() {
        return Err(Error::Dataset("latent store is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..store.len()).collect();
    if train {
        order.shuffle(&mut rng);
    }
    Ok(Batches {
        store,
        order,
        pos: 0,
        batch_size,
        rng,
        train,
    })
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let jobs: Vec<(usize, AugmentParams)> = indices
            .iter()
            .map(|&i| (i, AugmentParams::draw(&mut self.rng, self.train)))
            .collect();
        let store = self.store;
        let pairs = par::map_slice(&jobs, |&(i, p)| {
            let r = &store.records[i];
            let map = SpatialMap::new(r.shape[1], r.shape[2], p, Interpolation::Bilinear);
            let y = map.apply(&r.y_tensor()).expect("record shape checked on insert");
            let s = map.apply(&r.sigma_tensor()).expect("record shape checked on insert");
            (y, s)
        });
        let ys: Vec<&Tensor> = pairs.iter().map(|p| &p.0).collect();
        let ss: Vec<&Tensor> = pairs.iter().map(|p| &p.1).collect();
        Some(Batch {
            y: Tensor::stack(&ys),
            sigma: Tensor::stack(&ss),
            labels: indices.iter().map(|&i| store.records[i].class_id).collect(),
            indices,
        })
    }
}
