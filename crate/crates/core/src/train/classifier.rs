use std::path::Path;
use std::time::Instant;

use latentvision_nn::{clip_grad_norm, par, Adam, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;

use super::{check_finite, ensure_dir, loss_combined_graph, restore, EpochMetrics, Mode, RunMetrics, TrainConfig};
use crate::classifier::{softmax, top_k_accuracy, Classifier};
use crate::codec::{gaussian_bits_op, parts, Codec, ImageTensor};
use crate::pipeline::{
    batches, epoch_rng, load_padded, precompute_latents, spatial_map_op, AugmentParams, DatasetIndex, Interpolation,
    LatentStore, SpatialMap, Split,
};
use crate::{Error, Result};

/// Evaluation batch size; it only affects memory, never the numbers.
const EVAL_BATCH: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    /// Mean cross-entropy.
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub mean_bpp: f64,
    pub per_class_accuracy: Vec<f64>,
}

fn cross_entropy_sum(logits: &Tensor, labels: &[usize]) -> f64 {
    let p = softmax(logits);
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -p.data()[r * k + y].max(f64::MIN_POSITIVE).ln())
        .sum()
}

fn check_store(model: &Classifier, store: &LatentStore) -> Result<()> {
    if store.is_empty() {
        return Err(Error::Dataset("split is empty".into()));
    }
    let m = model.config().latent_channels;
    if store.latent_channels() != Some(m) {
        return Err(Error::Config(format!(
            "store latents have {:?} channels but the classifier expects {m}",
            store.latent_channels()
        )));
    }
    if store.num_classes() != model.config().num_classes {
        return Err(Error::Config(format!(
            "store has {} classes but the classifier has {}",
            store.num_classes(),
            model.config().num_classes
        )));
    }
    Ok(())
}

/// Eval-mode metrics over a whole store: center crop, no flip, running
/// batch-norm statistics.
pub fn evaluate(model: &Classifier, store: &LatentStore) -> Result<EvalReport> {
    check_store(model, store)?;
    let nc = model.config().num_classes;
    let mut logits = Vec::with_capacity(store.len() * nc);
    let mut labels = Vec::with_capacity(store.len());
    for batch in batches(store, EVAL_BATCH, epoch_rng(0, 0), false)? {
        logits.extend_from_slice(model.forward(&batch.y, &batch.sigma)?.data());
        labels.extend_from_slice(&batch.labels);
    }
    let logits = Tensor::from_vec(&[labels.len(), nc], logits);
    let mut hits = vec![0usize; nc];
    let mut totals = vec![0usize; nc];
    for (r, &y) in labels.iter().enumerate() {
        totals[y] += 1;
        let row = Tensor::from_vec(&[1, nc], logits.data()[r * nc..(r + 1) * nc].to_vec());
        if top_k_accuracy(&row, &[y], 1) > 0.0 {
            hits[y] += 1;
        }
    }
    Ok(EvalReport {
        count: labels.len(),
        loss: cross_entropy_sum(&logits, &labels) / labels.len() as f64,
        top1: top_k_accuracy(&logits, &labels, 1),
        top5: top_k_accuracy(&logits, &labels, 5.min(nc)),
        mean_bpp: store.mean_bpp(),
        per_class_accuracy: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { 100.0 * h as f64 / t as f64 })
            .collect(),
    })
}

/// Compress a split with `codec` and evaluate on the resulting latents.
pub fn evaluate_images(model: &Classifier, codec: &Codec, index: &DatasetIndex, split: Split) -> Result<EvalReport> {
    let (store, _) = precompute_latents(index, split, codec)?;
    evaluate(model, &store)
}

fn frozen_step(
    model: &mut Classifier,
    adam: &mut Adam,
    clip: Option<f64>,
    y: Tensor,
    sigma: Tensor,
    labels: &[usize],
) -> f64 {
    let mut g = Graph::training();
    let yv = g.constant(y);
    let sv = g.constant(sigma);
    let logits = model.forward_graph(&mut g, yv, sv);
    let loss = g.softmax_cross_entropy(logits, labels);
    let lv = g.value(loss).item();
    if lv.is_finite() {
        let mut grads = g.backward(loss).for_store(model.store());
        if let Some(c) = clip {
            clip_grad_norm(&mut grads, c);
        }
        let updates = g.take_buffer_updates();
        adam.step(model.store_mut(), &grads);
        model.store_mut().apply_buffer_updates(&updates);
    }
    lv
}

struct Checkpoints<'a> {
    dir: Option<&'a Path>,
}

impl Checkpoints<'_> {
    fn save(&self, name: &str, model: &Classifier, codec: Option<&Codec>) -> Result<()> {
        if let Some(d) = self.dir {
            model.save(&d.join(format!("{name}.classifier")))?;
            if let Some(c) = codec {
                c.save(&d.join(format!("{name}.codec")))?;
            }
        }
        Ok(())
    }
}

fn encoder_hash(codec: &Codec) -> String {
    let mut h = String::new();
    for p in [parts::ANALYSIS, parts::HYPER_ANALYSIS, parts::HYPER_SYNTHESIS] {
        h.push_str(&codec.weights_hash(p));
    }
    h
}

/// Train the classifier on fixed latents. Only classifier parameters get
/// gradients; the codec is borrowed immutably and its encoder hash is
/// recorded before and after. The model ends with its best-val weights;
/// `ckpt_dir` receives `last.classifier` every epoch and
/// `best.classifier`.
pub fn train_frozen(
    cfg: &TrainConfig,
    codec: &Codec,
    model: &mut Classifier,
    train: &LatentStore,
    val: &LatentStore,
    ckpt_dir: Option<&Path>,
) -> Result<RunMetrics> {
    cfg.validate()?;
    if cfg.mode != Mode::Frozen {
        return Err(Error::Config(format!(
            "train_frozen needs mode frozen, got {}",
            cfg.mode.as_str()
        )));
    }
    for (what, q) in [
        ("codec", codec.quality_index()),
        ("train store", train.quality_index),
        ("val store", val.quality_index),
    ] {
        if q != cfg.quality_index {
            return Err(Error::Config(format!(
                "{what} is quality {q} but the config asks for {}",
                cfg.quality_index
            )));
        }
    }
    check_store(model, train)?;
    check_store(model, val)?;
    ensure_dir(ckpt_dir)?;
    let ckpt = Checkpoints { dir: ckpt_dir };
    let start = Instant::now();
    let mut metrics = RunMetrics::new(Mode::Frozen, cfg.quality_index, cfg.seed, cfg.hash());
    metrics.encoder_hash_before = Some(encoder_hash(codec));
    model.store_mut().set_trainable("", true);
    let mut adam = Adam::new(cfg.lr());
    let mut last_good = model.store().clone();
    let mut best = model.store().clone();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for (step, b) in batches(train, cfg.batch_size, epoch_rng(cfg.seed, epoch), true)?.enumerate() {
            let n = b.len() as f64;
            let lv = frozen_step(model, &mut adam, cfg.clip(), b.y, b.sigma, &b.labels);
            if let Err(e) = check_finite(lv, epoch, step) {
                restore(model.store_mut(), &last_good);
                return Err(e);
            }
            total += lv * n;
        }
        let ev = evaluate(model, val)?;
        let train_loss = total / train.len() as f64;
        log::info!(
            "frozen q{} epoch {epoch}: train {train_loss:.4} val {:.4} top1 {:.2} top5 {:.2}",
            cfg.quality_index,
            ev.loss,
            ev.top1,
            ev.top5
        );
        let improved = metrics.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss: ev.loss,
            val_top1: Some(ev.top1),
            val_top5: Some(ev.top5),
            mean_bpp: ev.mean_bpp,
            val_mse: None,
        });
        last_good = model.store().clone();
        ckpt.save("last", model, None)?;
        if improved {
            best = model.store().clone();
            ckpt.save("best", model, None)?;
        }
    }
    restore(model.store_mut(), &best);
    metrics.encoder_hash_after = Some(encoder_hash(codec));
    metrics.wall_time_s = start.elapsed().as_secs_f64();
    Ok(metrics)
}

/// Images of one split with their labels, loaded and padded.
#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    /// Pixels before padding, per image.
    pub pixels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Load every readable image of a split; failures are skipped with a
/// warning.
pub fn load_split_images(index: &DatasetIndex, split: Split) -> Result<LabeledImages> {
    let entries: Vec<_> = index.split(split).collect();
    let loaded = par::map_slice(&entries, |e| load_padded(&index.full_path(e)));
    let mut out = LabeledImages {
        images: Vec::new(),
        labels: Vec::new(),
        pixels: Vec::new(),
    };
    for (e, r) in entries.iter().zip(loaded) {
        match r {
            Ok((img, px)) => {
                out.images.push(img);
                out.labels.push(e.class_id);
                out.pixels.push(px);
            }
            Err(err) => log::warn!("skipping {}: {err}", e.path.display()),
        }
    }
    Ok(out)
}

fn grad_norm(grads: &[(latentvision_nn::ParamId, Tensor)], store: &ParamStore, prefixes: &[&str]) -> f64 {
    grads
        .iter()
        .filter(|(id, _)| prefixes.iter().any(|p| store.entry(*id).name.starts_with(p)))
        .flat_map(|(_, t)| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Fine-tune the analysis transform, hyper transforms and classifier
/// together on cross-entropy (plus optional rate and distortion terms),
/// with straight-through rounding. Latents are recomputed from the images
/// at every step; validation recompresses the val split each epoch. The
/// synthesis transform and the entropy-model prior stay fixed. Codec and
/// model end with their best-val weights.
pub fn train_joint(
    cfg: &TrainConfig,
    codec: &mut Codec,
    model: &mut Classifier,
    index: &DatasetIndex,
    ckpt_dir: Option<&Path>,
) -> Result<RunMetrics> {
    cfg.validate()?;
    if cfg.mode != Mode::Joint {
        return Err(Error::Config(format!(
            "train_joint needs mode joint, got {}",
            cfg.mode.as_str()
        )));
    }
    if codec.quality_index() != cfg.quality_index {
        return Err(Error::Config(format!(
            "codec is quality {} but the config asks for {}",
            codec.quality_index(),
            cfg.quality_index
        )));
    }
    if codec.config().latent_channels != model.config().latent_channels {
        return Err(Error::Config(format!(
            "codec produces {} latent channels but the classifier expects {}",
            codec.config().latent_channels,
            model.config().latent_channels
        )));
    }
    if index.num_classes() != model.config().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the classifier has {}",
            index.num_classes(),
            model.config().num_classes
        )));
    }
    let train = load_split_images(index, Split::Train)?;
    if train.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    ensure_dir(ckpt_dir)?;
    let ckpt = Checkpoints { dir: ckpt_dir };
    let start = Instant::now();
    let mut metrics = RunMetrics::new(Mode::Joint, cfg.quality_index, cfg.seed, cfg.hash());
    metrics.encoder_hash_before = Some(encoder_hash(codec));

    let encoder = [parts::ANALYSIS, parts::HYPER_ANALYSIS, parts::HYPER_SYNTHESIS];
    {
        let s = codec.store_mut();
        s.freeze_all();
        for p in encoder {
            s.set_trainable(p, true);
        }
    }
    model.store_mut().set_trainable("", true);
    let mut adam_codec = Adam::new(cfg.lr());
    let mut adam_model = Adam::new(cfg.lr());
    let mut last_good = (codec.store().clone(), model.store().clone());
    let mut best = last_good.clone();
    let mut grad_max: f64 = 0.0;
    let weights = cfg.loss_weights;
    let result = (|| -> Result<()> {
        for epoch in 1..=cfg.epochs {
            let mut rng = epoch_rng(cfg.seed, epoch);
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
                let imgs: Vec<&Tensor> = idx.iter().map(|&i| train.images[i].tensor()).collect();
                if imgs.iter().any(|t| t.shape() != imgs[0].shape()) {
                    return Err(Error::Config(
                        "joint training needs images of one size after padding".into(),
                    ));
                }
                let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
                let params: Vec<AugmentParams> = idx.iter().map(|_| AugmentParams::sample(&mut rng)).collect();

                let mut g = Graph::training();
                let x = g.constant(Tensor::stack(&imgs));
                let y = codec.analysis(&mut g, x);
                let z = codec.hyper_analysis(&mut g, y);
                let z_hat = g.round_ste(z);
                let sigma = codec.hyper_synthesis(&mut g, z_hat);
                let y_hat = g.round_ste(y);
                let (_, _, lh, lw) = g.value(y_hat).dims4();
                let maps: Vec<SpatialMap> = params
                    .iter()
                    .map(|&p| SpatialMap::new(lh, lw, p, Interpolation::Bilinear))
                    .collect();
                let ya = spatial_map_op(&mut g, y_hat, &maps);
                let sa = spatial_map_op(&mut g, sigma, &maps);
                let logits = model.forward_graph(&mut g, ya, sa);
                let ce = g.softmax_cross_entropy(logits, &labels);
                let (b, _, h, w) = g.value(x).dims4();
                let rate = (weights.rate != 0.0).then(|| {
                    let yb = gaussian_bits_op(&mut g, y_hat, sigma);
                    let zb = codec.prior_bits(&mut g, z_hat);
                    let ys = g.sum(yb);
                    let zs = g.sum(zb);
                    let bits = g.add(ys, zs);
                    g.mul_scalar(bits, 1.0 / (b * h * w) as f64)
                });
                let dist = (weights.dist != 0.0).then(|| {
                    let x_hat = codec.synthesis(&mut g, y_hat);
                    g.mse(x_hat, x)
                });
                let loss = loss_combined_graph(&mut g, ce, rate, dist, weights);
                let lv = g.value(loss).item();
                check_finite(lv, epoch, step)?;
                total += lv * idx.len() as f64;
                let grads = g.backward(loss);
                let updates = g.take_buffer_updates();
                let mut cg = grads.for_store(codec.store());
                grad_max = grad_max.max(grad_norm(&cg, codec.store(), &encoder));
                let mut mg = grads.for_store(model.store());
                if let Some(c) = cfg.clip() {
                    clip_grad_norm(&mut cg, c);
                    clip_grad_norm(&mut mg, c);
                }
                adam_codec.step(codec.store_mut(), &cg);
                adam_model.step(model.store_mut(), &mg);
                model.store_mut().apply_buffer_updates(&updates);
            }
            let (val, _) = precompute_latents(index, Split::Val, codec)?;
            let ev = evaluate(model, &val)?;
            let train_loss = total / train.len() as f64;
            log::info!(
                "joint q{} epoch {epoch}: train {train_loss:.4} val {:.4} top1 {:.2} top5 {:.2} bpp {:.4}",
                cfg.quality_index,
                ev.loss,
                ev.top1,
                ev.top5,
                ev.mean_bpp
            );
            let improved = metrics.push(EpochMetrics {
                epoch,
                train_loss,
                val_loss: ev.loss,
                val_top1: Some(ev.top1),
                val_top5: Some(ev.top5),
                mean_bpp: ev.mean_bpp,
                val_mse: None,
            });
            last_good = (codec.store().clone(), model.store().clone());
            ckpt.save("last", model, Some(codec))?;
            if improved {
                best = last_good.clone();
                ckpt.save("best", model, Some(codec))?;
            }
        }
        Ok(())
    })();
    let keep = if result.is_ok() { &best } else { &last_good };
    restore(codec.store_mut(), &keep.0);
    restore(model.store_mut(), &keep.1);
    for p in [
        parts::ANALYSIS,
        parts::SYNTHESIS,
        parts::HYPER_ANALYSIS,
        parts::HYPER_SYNTHESIS,
        parts::PRIOR,
    ] {
        codec.store_mut().set_trainable(p, true);
    }
    result?;
    metrics.encoder_grad_norm_max = Some(grad_max);
    metrics.encoder_hash_after = Some(encoder_hash(codec));
    metrics.wall_time_s = start.elapsed().as_secs_f64();
    Ok(metrics)
}
