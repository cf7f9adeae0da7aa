//! End-to-end acceptance checks, one line per criterion.
//!
//! `cargo test -p latentvision --test acceptance` runs all nine;
//! `cargo test -p latentvision --test acceptance -- 3 6` runs a subset.
//! Criterion 7 trains three codecs and eighteen classifiers on the
//! texture fixture and dominates the runtime.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use latentvision::classifier::{Classifier, ClassifierConfig};
use latentvision::codec::{parts, standard_latent_channels, Codec, ImageTensor, QualityConfig, SIGMA_MIN};
use latentvision::entropy::{decode_gaussian, encode_gaussian, gaussian_half_width, gaussian_pmf, partial_decode};
use latentvision::nn::{gradcheck, Graph, ParamId, ParamRole, ParamStore, Tensor};
use latentvision::pipeline::{
    fixture, ingest, precompute_latents, spatial_map_op, AugmentParams, DatasetIndex, IngestOptions, Interpolation,
    SpatialMap, Split,
};
use latentvision::report::{cmd_train, median, RunSpec, METRICS_NAME};
use latentvision::train::{
    load_split_images, loss_combined_graph, pretrain_codec, train_frozen, train_joint, LossWeights, Mode, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn write_fixture(dir: &Path, train: usize, val: usize, seed: u64) -> DatasetIndex {
    let spec = fixture::FixtureSpec {
        train_per_class: train,
        val_per_class: val,
        test_per_class: 0,
        size: 64,
        seed,
    };
    let m = fixture::write_fixture(dir, &spec).unwrap();
    ingest(dir, Some(&m), &IngestOptions::default()).unwrap()
}

/// A reduced quality-4 codec trained long enough that its latents carry
/// information and stay inside the coder support.
fn brief_codec(dir: &Path) -> Codec {
    let index = write_fixture(dir, 48, 4, 21);
    let train = load_split_images(&index, Split::Train).unwrap();
    let val = load_split_images(&index, Split::Val).unwrap();
    let mut codec = Codec::new(QualityConfig::scaled(4, 8).unwrap(), 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: Some(3e-3),
        ..TrainConfig::new(Mode::Codec, 4, 10, 8, 0)
    };
    pretrain_codec(&cfg, &mut codec, &train.images, &val.images, None).unwrap();
    codec
}

/// Fixture textures of random class and a random size from {64, 128}.
fn random_images(n: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let class = rng.random_range(0..fixture::TEXTURE_CLASSES.len());
            let size = 64 * rng.random_range(1..=2);
            ImageTensor::from_rgb8(&fixture::texture_image(class, size, &mut rng))
        })
        .collect()
}

fn c1_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ok = 0;
    let mut symbols_total = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=4096);
        // log-uniform over the scales a trained codec emits, the floor included
        let sigma: Vec<f64> = (0..n)
            .map(|_| (SIGMA_MIN * 256f64.powf(rng.random_range(-0.1..1.0))).max(SIGMA_MIN))
            .collect();
        let y: Vec<i32> = sigma
            .iter()
            .map(|&s| {
                let k = gaussian_half_width(s);
                let v = Normal::new(0.0, s).unwrap().sample(&mut rng).round() as i32;
                v.clamp(-k, k)
            })
            .collect();
        let bytes = encode_gaussian(&y, &sigma).map_err(|e| e.to_string())?;
        if decode_gaussian(&bytes, &sigma).map_err(|e| e.to_string())? == y {
            ok += 1;
        }
        symbols_total += n;
    }
    ensure(ok == 1000, || format!("{ok}/1000 tensors round-tripped"))?;
    Ok(format!("1000/1000 tensors ({symbols_total} symbols) decoded exactly"))
}

fn c2_efficiency() -> Outcome {
    let sigma = 3.0;
    let table = gaussian_pmf(sigma).map_err(|e| e.to_string())?;
    let total: u64 = table.freqs().iter().map(|&f| f as u64).sum();
    let probs: Vec<f64> = table.freqs().iter().map(|&f| f as f64 / total as f64).collect();
    // inverse-cdf sampling from the table's own pmf
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let y: Vec<i32> = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return table.support_min() + k as i32;
                }
            }
            table.support_max()
        })
        .collect();
    let ce_bits: f64 = y
        .iter()
        .map(|&s| -probs[(s - table.support_min()) as usize].log2())
        .sum();
    let bytes = encode_gaussian(&y, &vec![sigma; n]).map_err(|e| e.to_string())?;
    let bound = ce_bits / 8.0 * 1.01 + 8.0;
    ensure(bytes.len() as f64 <= bound, || {
        format!(
            "{} bytes > bound {bound:.1} (cross-entropy {:.1} bytes)",
            bytes.len(),
            ce_bits / 8.0
        )
    })?;
    Ok(format!(
        "{} bytes vs cross-entropy {:.1} bytes (+{:.3}%), bound {bound:.1}",
        bytes.len(),
        ce_bits / 8.0,
        100.0 * (bytes.len() as f64 * 8.0 / ce_bits - 1.0)
    ))
}

fn c3_partial_decode() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let codec = brief_codec(tmp.path());
    let images = random_images(100, 3);
    let (mut ok, mut nonzero) = (0, 0usize);
    let calls = codec.synthesis_calls();
    for (i, img) in images.iter().enumerate() {
        let (code, _, stream) = codec.compress(img).map_err(|e| format!("image {i}: {e}"))?;
        let got = partial_decode(&stream.serialize(), &codec).map_err(|e| format!("image {i}: {e}"))?;
        let same_sigma = got.sigma_hat.len() == code.sigma_hat.len()
            && got
                .sigma_hat
                .iter()
                .zip(&code.sigma_hat)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if got.shape == code.shape && got.y_hat == code.y_hat && same_sigma {
            ok += 1;
        }
        nonzero += code.y_hat.iter().filter(|&&v| v != 0).count();
    }
    let extra = codec.synthesis_calls() - calls;
    ensure(ok == 100 && extra == 0, || {
        format!("{ok}/100 bit-identical, {extra} synthesis calls")
    })?;
    ensure(nonzero > 0, || "all latents are zero; the check is vacuous".into())?;
    Ok(format!(
        "100/100 bit-identical, 0 synthesis calls, {nonzero} nonzero symbols"
    ))
}

fn c4_rate_estimate() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let codec = brief_codec(tmp.path());
    let images = random_images(100, 4);
    let mut worst: f64 = 0.0;
    let mut fails = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let (code, z, stream) = codec.compress(img).map_err(|e| format!("image {i}: {e}"))?;
        let est = codec
            .rate_estimate(&code.y_tensor(), &code.sigma_tensor(), &z.tensor())
            .map_err(|e| e.to_string())?;
        let actual = 8.0 * stream.payload_bytes() as f64;
        let gap = (est - actual).abs();
        let allowed = 0.03 * actual + 64.0;
        worst = worst.max(gap / allowed);
        if gap > allowed {
            fails.push((i, est, actual));
        }
    }
    ensure(fails.is_empty(), || {
        format!("{} inputs out of tolerance, first {:?}", fails.len(), fails[0])
    })?;
    Ok(format!(
        "100/100 within 3% + 64 bits; worst gap {:.0}% of the allowance",
        worst * 100.0
    ))
}

fn c5_config() -> Outcome {
    let want = [(1u8, 192usize), (4, 192), (8, 320)];
    for (q, m) in want {
        ensure(standard_latent_channels(q) == Some(m), || {
            format!("quality {q} maps to {:?}", standard_latent_channels(q))
        })?;
        let codec = Codec::new(QualityConfig::standard(q).unwrap(), 0).unwrap();
        let img = ImageTensor::new(Tensor::full(&[3, 64, 64], 0.5)).unwrap();
        let (code, _) = codec.latents(&img).map_err(|e| e.to_string())?;
        ensure(code.shape == [m, 4, 4], || {
            format!("quality {q} latents {:?}", code.shape)
        })?;
    }
    for q in [0u8, 2, 3, 5, 9] {
        ensure(QualityConfig::standard(q).is_err(), || format!("quality {q} accepted"))?;
    }
    for classes in [23usize, 7, 45] {
        let model = Classifier::new(ClassifierConfig::new(classes, 192), 0).unwrap();
        ensure(model.head_width() == classes, || {
            format!("head width {} for {classes}", model.head_width())
        })?;
        let y = Tensor::zeros(&[2, 192, 28, 28]);
        let s = Tensor::full(&[2, 192, 28, 28], 1.0);
        let logits = model.forward(&y, &s).map_err(|e| e.to_string())?;
        ensure(logits.shape() == [2, classes], || {
            format!("logits {:?}", logits.shape())
        })?;
    }
    Ok("latent channels {1:192, 4:192, 8:320}; heads 23/7/45 wide".into())
}

/// Noise-quantized codec followed by the classifier; every codec part and
/// the classifier enter the loss.
struct FdModel {
    codec: Codec,
    model: Classifier,
    x: Tensor,
    noise_y: Tensor,
    noise_z: Tensor,
    labels: Vec<usize>,
}

impl FdModel {
    fn loss(&self, g: &mut Graph) -> latentvision::nn::Var {
        let x = g.constant(self.x.clone());
        let y = self.codec.analysis(g, x);
        let ny = g.constant(self.noise_y.clone());
        let y_t = g.add(y, ny);
        let z = self.codec.hyper_analysis(g, y);
        let nz = g.constant(self.noise_z.clone());
        let z_t = g.add(z, nz);
        let sigma = self.codec.hyper_synthesis(g, z_t);
        let (_, _, h, w) = g.value(y_t).dims4();
        let maps: Vec<SpatialMap> = self
            .labels
            .iter()
            .map(|_| SpatialMap::new(h, w, AugmentParams::EVAL, Interpolation::Bilinear))
            .collect();
        let ya = spatial_map_op(g, y_t, &maps);
        let sa = spatial_map_op(g, sigma, &maps);
        let logits = self.model.forward_graph(g, ya, sa);
        let ce = g.softmax_cross_entropy(logits, &self.labels);
        let (b, _, ih, iw) = self.x.dims4();
        let yb = latentvision::codec::gaussian_bits_op(g, y_t, sigma);
        let zb = self.codec.prior_bits(g, z_t);
        let ys = g.sum(yb);
        let zs = g.sum(zb);
        let bits = g.add(ys, zs);
        let rate = g.mul_scalar(bits, 1.0 / (b * ih * iw) as f64);
        let x_hat = self.codec.synthesis(g, y_t);
        let dist = g.mse(x_hat, x);
        let weights = LossWeights {
            task: 1.0,
            rate: 0.05,
            dist: 2.0,
        };
        loss_combined_graph(g, ce, Some(rate), Some(dist), weights)
    }

    fn value(&self) -> f64 {
        let mut g = Graph::training();
        let l = self.loss(&mut g);
        g.value(l).item()
    }

    fn store_mut(&mut self, which: usize) -> &mut ParamStore {
        if which == 0 {
            self.codec.store_mut()
        } else {
            self.model.store_mut()
        }
    }
}

fn c6_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tmp = tempfile::tempdir().unwrap();
    let codec = brief_codec(tmp.path());
    let m = codec.config().latent_channels;
    let mut model = Classifier::new(ClassifierConfig::reduced(4, m, 16), 3).unwrap();
    // Residual branches start with a zero BN gain, which puts every
    // post-addition ReLU whose skip input is 0 exactly on its kink. Move
    // the affine BN parameters off the initialization first.
    let bn: Vec<ParamId> = model
        .store()
        .iter()
        .filter(|(_, e)| e.role == ParamRole::Trainable && (e.name.ends_with(".gamma") || e.name.ends_with(".beta")))
        .map(|(id, _)| id)
        .collect();
    for id in bn {
        let gain = model.store().entry(id).name.ends_with(".gamma");
        for v in model.store_mut().value_mut(id).data_mut() {
            *v = if gain {
                rng.random_range(0.5..1.5)
            } else {
                rng.random_range(-0.1..0.1)
            };
        }
    }
    let x = Tensor::from_fn(&[2, 3, 64, 64], |_| rng.random_range(0.0..1.0));
    let (y_shape, z_shape) = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = codec.analysis(&mut g, xv);
        let z = codec.hyper_analysis(&mut g, y);
        (g.shape(y).to_vec(), g.shape(z).to_vec())
    };
    let noise_y = Tensor::from_fn(&y_shape, |_| rng.random_range(-0.5..0.5));
    let noise_z = Tensor::from_fn(&z_shape, |_| rng.random_range(-0.5..0.5));
    let mut fd = FdModel {
        codec,
        model,
        x,
        noise_y,
        noise_z,
        labels: vec![1, 3],
    };
    // σ̂ = max(raw, σ_min) is not differentiable at the floor, and training
    // deliberately uses a surrogate gradient there; lift every raw scale
    // clear of it so the check compares true derivatives.
    let bias = fd.codec.store().id("h_s.conv2.bias").unwrap();
    for _ in 0..40 {
        let sigma = {
            let mut g = Graph::training();
            let x = g.constant(fd.x.clone());
            let y = fd.codec.analysis(&mut g, x);
            let z = fd.codec.hyper_analysis(&mut g, y);
            let nz = g.constant(fd.noise_z.clone());
            let z_t = g.add(z, nz);
            let sigma = fd.codec.hyper_synthesis(&mut g, z_t);
            g.value(sigma).clone()
        };
        let (b, c, h, w) = sigma.dims4();
        let low: Vec<usize> = (0..c)
            .filter(|&ch| {
                (0..b).any(|bi| {
                    let off = (bi * c + ch) * h * w;
                    sigma.data()[off..off + h * w].iter().any(|&s| s < SIGMA_MIN + 0.05)
                })
            })
            .collect();
        if low.is_empty() {
            break;
        }
        let v = fd.codec.store_mut().value_mut(bias).data_mut();
        for ch in low {
            v[ch] += 0.05;
        }
    }

    let mut g = Graph::training();
    let loss = fd.loss(&mut g);
    let grads = g.backward(loss);
    let analytic = [grads.for_store(fd.codec.store()), grads.for_store(fd.model.store())];
    drop(g);

    // The classifier is piecewise smooth: a ReLU kink can sit within a few
    // 1e-6 of any point. Entries whose one-sided differences disagree
    // straddle one; they are skipped and counted instead of compared.
    // Gradients under 1e-4 are held to an absolute 1e-7.
    let (h, floor) = (1e-6, 1e-4);
    let base = fd.value();
    let mut worst: (f64, String) = (0.0, String::new());
    let (mut checked, mut kinks) = (0, 0);
    let mut parts_seen = std::collections::BTreeSet::new();
    for (which, grads) in analytic.iter().enumerate() {
        for (id, grad) in grads {
            let id: ParamId = *id;
            let (name, role) = {
                let e = if which == 0 {
                    fd.codec.store().entry(id)
                } else {
                    fd.model.store().entry(id)
                };
                (e.name.clone(), e.role)
            };
            if role != ParamRole::Trainable {
                continue;
            }
            parts_seen.insert(if which == 0 {
                name.split('.').next().unwrap().to_string()
            } else {
                "classifier".into()
            });
            let n = grad.numel();
            for _ in 0..3.min(n) {
                let i = rng.random_range(0..n);
                let orig = fd.store_mut(which).value(id).data()[i];
                fd.store_mut(which).value_mut(id).data_mut()[i] = orig + h;
                let up = fd.value();
                fd.store_mut(which).value_mut(id).data_mut()[i] = orig - h;
                let down = fd.value();
                fd.store_mut(which).value_mut(id).data_mut()[i] = orig;
                let (right, left) = ((up - base) / h, (base - down) / h);
                if gradcheck::rel_error(right, left, floor) > 1e-3 {
                    kinks += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * h);
                let err = gradcheck::rel_error(grad.data()[i], numeric, floor);
                checked += 1;
                if err > worst.0 {
                    worst = (
                        err,
                        format!("{name}[{i}] analytic {:.6e} numeric {numeric:.6e}", grad.data()[i]),
                    );
                }
            }
        }
    }
    ensure(parts_seen.len() == 6, || {
        format!("gradients reached only {parts_seen:?}")
    })?;
    ensure(kinks * 10 <= checked, || {
        format!("{kinks} entries straddle a kink, only {checked} compared")
    })?;
    ensure(worst.0 <= 1e-3, || {
        format!("max rel error {:.2e} at {}", worst.0, worst.1)
    })?;
    Ok(format!(
        "{checked} entries over {} parts ({kinks} at kinks skipped), max rel error {:.2e}",
        parts_seen.len(),
        worst.0
    ))
}

// ---- criterion 7 ----

struct DeskSettings {
    codec_divisor: usize,
    codec_epochs: usize,
    codec_lr: f64,
    model_divisor: usize,
    frozen_epochs: usize,
    frozen_batch: usize,
    frozen_lr: f64,
    joint_epochs: usize,
    joint_batch: usize,
    joint_lr: f64,
}

const DESK: DeskSettings = DeskSettings {
    codec_divisor: 8,
    codec_epochs: 15,
    codec_lr: 3e-3,
    model_divisor: 8,
    frozen_epochs: 8,
    frozen_batch: 32,
    frozen_lr: 1e-3,
    joint_epochs: 4,
    joint_batch: 32,
    joint_lr: 1e-4,
};

fn c7_desk_scale() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let index = write_fixture(tmp.path(), 200, 50, 0);
    let train_images = load_split_images(&index, Split::Train).unwrap();
    let val_images = load_split_images(&index, Split::Val).unwrap();
    let seeds = [0u64, 1, 2];
    let mut frozen_medians = Vec::new();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for q in [1u8, 4, 8] {
        let t = Instant::now();
        let mut codec = Codec::new(QualityConfig::scaled(q, DESK.codec_divisor).unwrap(), 0).unwrap();
        let cfg = TrainConfig {
            learning_rate: Some(DESK.codec_lr),
            ..TrainConfig::new(Mode::Codec, q, DESK.codec_epochs, 8, 0)
        };
        pretrain_codec(&cfg, &mut codec, &train_images.images, &val_images.images, None).map_err(|e| e.to_string())?;
        let (train, rep) = precompute_latents(&index, Split::Train, &codec).map_err(|e| e.to_string())?;
        let (val, _) = precompute_latents(&index, Split::Val, &codec).map_err(|e| e.to_string())?;
        eprintln!(
            "  q{q}: codec {:.0}s, val {:.3} bpp, {} images skipped",
            t.elapsed().as_secs_f64(),
            val.mean_bpp(),
            rep.skipped.len()
        );
        let (mut frozen, mut joint) = (Vec::new(), Vec::new());
        for &seed in &seeds {
            let mut model = Classifier::new(
                ClassifierConfig::reduced(4, codec.config().latent_channels, DESK.model_divisor),
                seed,
            )
            .unwrap();
            let fc = TrainConfig {
                learning_rate: Some(DESK.frozen_lr),
                ..TrainConfig::new(Mode::Frozen, q, DESK.frozen_epochs, DESK.frozen_batch, seed)
            };
            let fm = train_frozen(&fc, &codec, &mut model, &train, &val, None).map_err(|e| e.to_string())?;
            let mut c = codec.clone();
            let jc = TrainConfig {
                learning_rate: Some(DESK.joint_lr),
                ..TrainConfig::new(Mode::Joint, q, DESK.joint_epochs, DESK.joint_batch, seed)
            };
            let jm = train_joint(&jc, &mut c, &mut model, &index, None).map_err(|e| e.to_string())?;
            let (f, j) = (fm.best_top1.unwrap(), jm.best_top1.unwrap());
            eprintln!("  q{q} seed {seed}: frozen {f:.1} joint {j:.1}");
            frozen.push(f);
            joint.push(j);
        }
        let fmed = median(&frozen);
        let wins = frozen.iter().zip(&joint).filter(|(f, j)| j >= f).count();
        if fmed < 60.0 {
            failures.push(format!("(a) q{q} frozen median {fmed:.1} < 60"));
        }
        if wins < 2 {
            failures.push(format!("(b) q{q} joint ≥ frozen on only {wins}/3 seeds"));
        }
        lines.push(format!("q{q} frozen {fmed:.1} joint {:.1} ({wins}/3)", median(&joint)));
        frozen_medians.push(fmed);
    }
    if !frozen_medians.windows(2).all(|w| w[0] <= w[1]) {
        failures.push(format!("(c) frozen medians not non-decreasing: {frozen_medians:?}"));
    }
    let summary = lines.join("; ");
    ensure(failures.is_empty(), || format!("{}; {summary}", failures.join("; ")))?;
    Ok(summary)
}

fn c8_contracts() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let index = write_fixture(tmp.path(), 4, 2, 8);
    let codec = brief_codec(&tmp.path().join("codec_fixture"));
    let bytes = |c: &Codec| {
        let mut v = Vec::new();
        c.write_to(&mut v).unwrap();
        v
    };
    let m = codec.config().latent_channels;
    let (train, _) = precompute_latents(&index, Split::Train, &codec).map_err(|e| e.to_string())?;
    let (val, _) = precompute_latents(&index, Split::Val, &codec).map_err(|e| e.to_string())?;
    let before = bytes(&codec);
    let mut model = Classifier::new(ClassifierConfig::reduced(4, m, 8), 0).unwrap();
    train_frozen(
        &TrainConfig::new(Mode::Frozen, 4, 2, 4, 0),
        &codec,
        &mut model,
        &train,
        &val,
        None,
    )
    .map_err(|e| e.to_string())?;
    ensure(bytes(&codec) == before, || {
        "frozen training changed the codec bytes".into()
    })?;

    let mut joint = codec.clone();
    let enc = [parts::ANALYSIS, parts::HYPER_ANALYSIS, parts::HYPER_SYNTHESIS].map(|p| joint.weights_hash(p));
    // 16 training images in one batch: exactly one step
    let cfg = TrainConfig {
        learning_rate: Some(1e-3),
        ..TrainConfig::new(Mode::Joint, 4, 1, 16, 0)
    };
    train_joint(&cfg, &mut joint, &mut model, &index, None).map_err(|e| e.to_string())?;
    let changed: Vec<&str> = [parts::ANALYSIS, parts::HYPER_ANALYSIS, parts::HYPER_SYNTHESIS]
        .iter()
        .zip(&enc)
        .filter(|(p, h)| joint.weights_hash(p) != **h)
        .map(|(p, _)| *p)
        .collect();
    ensure(!changed.is_empty(), || {
        "no encoder parameter changed after one joint step".into()
    })?;
    ensure(
        joint.weights_hash(parts::SYNTHESIS) == codec.weights_hash(parts::SYNTHESIS),
        || "joint step touched the synthesis transform".into(),
    )?;
    Ok(format!(
        "frozen codec bytes identical; one joint step moved {}",
        changed.join(" ")
    ))
}

fn c9_reproducible() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("fx");
    write_fixture(&root, 6, 2, 9);
    let codec = brief_codec(&tmp.path().join("codec_fixture"));
    let weights = tmp.path().join("q4.codec");
    codec.save(&weights).unwrap();
    let mut notes = Vec::new();
    for mode in ["frozen", "joint"] {
        let text = format!(
            "output_dir = {out:?}\nseed = 5\n[data]\nroot = {root:?}\n\
             [codec]\nquality_index = 4\nwidth_divisor = 8\nweights = {weights:?}\n\
             [classifier]\nwidth_divisor = 8\n\
             [train]\nmode = \"{mode}\"\nepochs = 2\nbatch_size = 8\n",
            out = tmp.path().join(mode).display().to_string(),
            root = root.display().to_string(),
            weights = weights.display().to_string(),
        );
        let spec = RunSpec::parse(&text, &[]).map_err(|e| e.to_string())?;
        let csv_path: PathBuf = tmp.path().join(mode).join(METRICS_NAME);
        cmd_train(&spec).map_err(|e| e.to_string())?;
        let first = std::fs::read(&csv_path).unwrap();
        cmd_train(&spec).map_err(|e| e.to_string())?;
        let second = std::fs::read(&csv_path).unwrap();
        ensure(first == second, || format!("{mode} metrics.csv differs between runs"))?;
        notes.push(format!("{mode} {} bytes", first.len()));
    }
    Ok(format!("metrics.csv identical across reruns ({})", notes.join(", ")))
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 9] = [
    (1, "entropy round-trip", c1_round_trip),
    (2, "coding efficiency", c2_efficiency),
    (3, "partial-decode contract", c3_partial_decode),
    (4, "rate-estimate consistency", c4_rate_estimate),
    (5, "config conformance", c5_config),
    (6, "gradient fidelity", c6_gradients),
    (7, "desk-scale end-to-end", c7_desk_scale),
    (8, "frozen/joint contracts", c8_contracts),
    (9, "reproducibility", c9_reproducible),
];

/// Wall-clock budgets; exceeding one fails the criterion.
fn budget(n: u32) -> Option<Duration> {
    match n {
        1 | 2 => Some(Duration::from_secs(60)),
        6 => Some(Duration::from_secs(300)),
        7 => Some(Duration::from_secs(3 * 3600)),
        _ => None,
    }
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = t.elapsed();
        let outcome = match (outcome, budget(n)) {
            (Ok(_), Some(b)) if elapsed > b => {
                Err(format!("took {:.1}s, budget {}s", elapsed.as_secs_f64(), b.as_secs()))
            }
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {n} {name}: {detail} ({:.1}s)", elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail} ({:.1}s)", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
