//! Training loops: codec pretraining, classifier training on frozen
//! latents, and joint encoder + classifier fine-tuning.

mod classifier;
mod codec;
mod metrics;

pub use classifier::{
    evaluate, evaluate_images, load_split_images, train_frozen, train_joint, EvalReport, LabeledImages,
};
pub use codec::{codec_val_metrics, pretrain_codec, CodecEval};
pub use metrics::{EpochMetrics, RunMetrics};

use std::path::Path;

use latentvision_nn::{Graph, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::standard_rd_weight;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Codec,
    Frozen,
    Joint,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Codec => "codec",
            Mode::Frozen => "frozen",
            Mode::Joint => "joint",
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            Mode::Frozen => 1e-3,
            Mode::Codec | Mode::Joint => 1e-4,
        }
    }
}

/// Weights of `task + rate + distortion` in the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub task: f64,
    pub rate: f64,
    pub dist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            task: 1.0,
            rate: 0.0,
            dist: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub quality_index: u8,
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to 1e-3 for frozen training and 1e-4 otherwise.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    pub seed: u64,
    /// Codec mode only; defaults to the standard weight of the quality.
    #[serde(default)]
    pub rd_weight: Option<f64>,
    #[serde(default)]
    pub loss_weights: LossWeights,
    /// Cap on the global gradient norm; `0` turns clipping off. Defaults
    /// to 1 for codec training and off otherwise.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn new(mode: Mode, quality_index: u8, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            mode,
            quality_index,
            epochs,
            batch_size,
            learning_rate: None,
            seed,
            rd_weight: None,
            loss_weights: LossWeights::default(),
            grad_clip: None,
        }
    }

    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(self.mode.default_learning_rate())
    }

    pub fn clip(&self) -> Option<f64> {
        let c = self.grad_clip.unwrap_or(match self.mode {
            Mode::Codec => 1.0,
            Mode::Frozen | Mode::Joint => 0.0,
        });
        (c > 0.0).then_some(c)
    }

    pub fn rd(&self) -> f64 {
        self.rd_weight
            .or_else(|| standard_rd_weight(self.quality_index))
            .unwrap_or(f64::NAN)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be at least 1".to_string());
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            bad.push(format!("learning_rate must be positive, got {}", self.lr()));
        }
        if standard_rd_weight(self.quality_index).is_none() {
            bad.push(format!("quality_index {} is not one of 1, 4, 8", self.quality_index));
        }
        if self.mode == Mode::Codec && !(self.rd() > 0.0 && self.rd().is_finite()) {
            bad.push(format!("rd_weight must be positive, got {}", self.rd()));
        }
        if self.grad_clip.is_some_and(|c| !(c >= 0.0 && c.is_finite())) {
            bad.push(format!("grad_clip must be nonnegative, got {:?}", self.grad_clip));
        }
        let w = self.loss_weights;
        if [w.task, w.rate, w.dist].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            bad.push(format!("loss weights must be nonnegative, got {w:?}"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `λ_task·task + λ_rate·rate + λ_dist·distortion`.
pub fn loss_combined(task_loss: f64, rate_bpp: f64, distortion_mse: f64, weights: LossWeights) -> f64 {
    weights.task * task_loss + weights.rate * rate_bpp + weights.dist * distortion_mse
}

/// Graph form of [`loss_combined`]. Terms that are absent or carry a zero
/// weight are left out of the graph entirely.
pub fn loss_combined_graph(
    g: &mut Graph,
    task: Var,
    rate: Option<Var>,
    distortion: Option<Var>,
    weights: LossWeights,
) -> Var {
    let mut terms = vec![(task, weights.task)];
    if let Some(r) = rate.filter(|_| weights.rate != 0.0) {
        terms.push((r, weights.rate));
    }
    if let Some(d) = distortion.filter(|_| weights.dist != 0.0) {
        terms.push((d, weights.dist));
    }
    g.weighted_sum(&terms)
}

/// A generator for a named purpose within a run, independent of the
/// per-epoch data streams.
pub(crate) fn aux_rng(seed: u64, purpose: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(epoch as u64);
    rng
}

pub(crate) fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!(
            "loss became {loss} at epoch {epoch}, step {step}"
        )))
    }
}

/// Copy `snapshot` back into `store` (same layout).
pub(crate) fn restore(store: &mut ParamStore, snapshot: &ParamStore) {
    store
        .copy_values_from(snapshot, "")
        .expect("snapshot shares the store layout");
}

pub(crate) fn ensure_dir(dir: Option<&Path>) -> Result<()> {
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    Ok(())
}
