use std::path::Path;
use std::time::Instant;

use latentvision_nn::{clip_grad_norm, Adam, Graph, Tensor, Var};
use rand::seq::SliceRandom;

use super::{aux_rng, check_finite, ensure_dir, restore, EpochMetrics, Mode, RunMetrics, TrainConfig};
use crate::codec::{parts, uniform_noise, Codec, ImageTensor};
use crate::pipeline::epoch_rng;
use crate::{Error, Result};

const NOISE_STREAM: u64 = 1;

fn stack_images(images: &[&ImageTensor]) -> Result<Tensor> {
    let first = images[0].tensor().shape();
    if let Some(bad) = images.iter().find(|i| i.tensor().shape() != first) {
        return Err(Error::Config(format!(
            "batched images must share a size: {:?} vs {:?}",
            first,
            bad.tensor().shape()
        )));
    }
    let ts: Vec<&Tensor> = images.iter().map(|i| i.tensor()).collect();
    Ok(Tensor::stack(&ts))
}

/// Rate in bits per pixel and mean squared error of one batch, as graph
/// values. `noise` selects training-time noise over rounding.
fn rd_terms(codec: &Codec, g: &mut Graph, x: Var, noise: Option<&mut dyn rand::RngCore>) -> (Var, Var) {
    let (b, _, h, w) = g.value(x).dims4();
    let y = codec.analysis(g, x);
    let z = codec.hyper_analysis(g, y);
    let (y_q, z_q) = match noise {
        Some(rng) => {
            let (sy, sz) = (g.shape(y).to_vec(), g.shape(z).to_vec());
            let ny = g.constant(uniform_noise(&sy, rng));
            let nz = g.constant(uniform_noise(&sz, rng));
            (g.add(y, ny), g.add(z, nz))
        }
        None => (g.round_ste(y), g.round_ste(z)),
    };
    let sigma = codec.hyper_synthesis(g, z_q);
    let x_hat = codec.synthesis(g, y_q);
    let y_bits = crate::codec::gaussian_bits_op(g, y_q, sigma);
    let z_bits = codec.prior_bits(g, z_q);
    let yb = g.sum(y_bits);
    let zb = g.sum(z_bits);
    let bits = g.add(yb, zb);
    let bpp = g.mul_scalar(bits, 1.0 / (b * h * w) as f64);
    let mse = g.mse(x_hat, x);
    (bpp, mse)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecEval {
    /// `λ·MSE + bpp` with rounding.
    pub loss: f64,
    /// Estimated bits per pixel.
    pub bpp: f64,
    pub mse: f64,
}

/// Rounded (deterministic) rate–distortion figures averaged over images.
pub fn codec_val_metrics(
    codec: &Codec,
    images: &[ImageTensor],
    rd_weight: f64,
    batch_size: usize,
) -> Result<CodecEval> {
    if images.is_empty() {
        return Err(Error::Dataset("no validation images".into()));
    }
    let (mut bpp, mut mse) = (0.0, 0.0);
    for chunk in images.chunks(batch_size.max(1)) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let mut g = Graph::new();
        let x = g.constant(stack_images(&refs)?);
        let (r, d) = rd_terms(codec, &mut g, x, None);
        let n = chunk.len() as f64;
        bpp += g.value(r).item() * n;
        mse += g.value(d).item() * n;
    }
    let n = images.len() as f64;
    let (bpp, mse) = (bpp / n, mse / n);
    Ok(CodecEval {
        loss: rd_weight * mse + bpp,
        bpp,
        mse,
    })
}

/// Minimize `λ·MSE + bpp` with noise quantization. All codec parts train.
/// The codec ends with its best-validation weights; `ckpt_dir` receives
/// `last.codec` every epoch and `best.codec`.
pub fn pretrain_codec(
    cfg: &TrainConfig,
    codec: &mut Codec,
    train: &[ImageTensor],
    val: &[ImageTensor],
    ckpt_dir: Option<&Path>,
) -> Result<RunMetrics> {
    cfg.validate()?;
    if cfg.mode != Mode::Codec {
        return Err(Error::Config(format!(
            "pretrain_codec needs mode codec, got {}",
            cfg.mode.as_str()
        )));
    }
    if cfg.quality_index != codec.quality_index() {
        return Err(Error::Config(format!(
            "config is for quality {} but the codec is quality {}",
            cfg.quality_index,
            codec.quality_index()
        )));
    }
    if train.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    ensure_dir(ckpt_dir)?;
    let start = Instant::now();
    let rd = cfg.rd();
    let mut metrics = RunMetrics::new(Mode::Codec, cfg.quality_index, cfg.seed, cfg.hash());
    for part in [
        parts::ANALYSIS,
        parts::SYNTHESIS,
        parts::HYPER_ANALYSIS,
        parts::HYPER_SYNTHESIS,
        parts::PRIOR,
    ] {
        codec.store_mut().set_trainable(part, true);
    }
    let mut adam = Adam::new(cfg.lr());
    let mut last_good = codec.store().clone();
    let mut best = codec.store().clone();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut noise = aux_rng(cfg.seed, NOISE_STREAM, epoch);
        let mut total = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&ImageTensor> = idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::training();
            let x = g.constant(stack_images(&refs)?);
            let (bpp, mse) = rd_terms(codec, &mut g, x, Some(&mut noise));
            let loss = g.weighted_sum(&[(mse, rd), (bpp, 1.0)]);
            let lv = g.value(loss).item();
            if let Err(e) = check_finite(lv, epoch, step) {
                restore(codec.store_mut(), &last_good);
                return Err(e);
            }
            total += lv * idx.len() as f64;
            let grads = g.backward(loss);
            let mut grads = grads.for_store(codec.store());
            if let Some(c) = cfg.clip() {
                clip_grad_norm(&mut grads, c);
            }
            adam.step(codec.store_mut(), &grads);
        }
        let ev = if val.is_empty() {
            codec_val_metrics(codec, train, rd, cfg.batch_size)?
        } else {
            codec_val_metrics(codec, val, rd, cfg.batch_size)?
        };
        if !ev.loss.is_finite() {
            restore(codec.store_mut(), &last_good);
            return Err(Error::Diverged(format!(
                "validation loss became {} at epoch {epoch}",
                ev.loss
            )));
        }
        log::info!(
            "codec q{} epoch {epoch}: train {:.4} val {:.4} bpp {:.4} mse {:.5}",
            cfg.quality_index,
            total / train.len() as f64,
            ev.loss,
            ev.bpp,
            ev.mse
        );
        let improved = metrics.push(EpochMetrics {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss: ev.loss,
            val_top1: None,
            val_top5: None,
            mean_bpp: ev.bpp,
            val_mse: Some(ev.mse),
        });
        last_good = codec.store().clone();
        if let Some(d) = ckpt_dir {
            codec.save(&d.join("last.codec"))?;
        }
        if improved {
            best = codec.store().clone();
            if let Some(d) = ckpt_dir {
                codec.save(&d.join("best.codec"))?;
            }
        }
    }
    restore(codec.store_mut(), &best);
    metrics.wall_time_s = start.elapsed().as_secs_f64();
    Ok(metrics)
}
