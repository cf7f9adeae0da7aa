use std::path::Path;

use latentvision::classifier::{Classifier, ClassifierConfig};
use latentvision::codec::{parts, Codec, QualityConfig};
use latentvision::pipeline::{fixture, ingest, DatasetIndex, IngestOptions, LatentRecord, LatentStore, Split};
use latentvision::report::median;
use latentvision::train::{
    codec_val_metrics, evaluate, load_split_images, pretrain_codec, train_frozen, train_joint, Mode, TrainConfig,
};
use latentvision::Error;

fn fixture_index(dir: &Path, train: usize, val: usize, seed: u64) -> DatasetIndex {
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

fn codec_bytes(c: &Codec) -> Vec<u8> {
    let mut v = Vec::new();
    c.write_to(&mut v).unwrap();
    v
}

#[test]
fn codec_rate_follows_quality_and_loss_falls() {
    let tmp = tempfile::tempdir().unwrap();
    let index = fixture_index(tmp.path(), 6, 2, 1);
    let train = load_split_images(&index, Split::Train).unwrap();
    let val = load_split_images(&index, Split::Val).unwrap();
    let (mut gaps, mut drops) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let mut bpp = Vec::new();
        for q in [1u8, 8] {
            let mut codec = Codec::new(QualityConfig::scaled(q, 16).unwrap(), seed).unwrap();
            let cfg = TrainConfig {
                learning_rate: Some(3e-3),
                ..TrainConfig::new(Mode::Codec, q, 6, 8, seed)
            };
            let m = pretrain_codec(&cfg, &mut codec, &train.images, &val.images, None).unwrap();
            drops.push(m.epochs[0].train_loss - m.epochs.last().unwrap().train_loss);
            bpp.push(codec_val_metrics(&codec, &val.images, cfg.rd(), 8).unwrap().bpp);
        }
        gaps.push(bpp[1] - bpp[0]);
    }
    assert!(median(&gaps) > 0.0, "q8 - q1 val bpp per seed: {gaps:?}");
    assert!(median(&drops) >= 0.0, "first - last train loss: {drops:?}");
}

#[test]
fn frozen_training_leaves_the_codec_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let index = fixture_index(tmp.path(), 3, 1, 2);
    let codec = Codec::new(QualityConfig::scaled(4, 8).unwrap(), 0).unwrap();
    let (train, _) = latentvision::pipeline::precompute_latents(&index, Split::Train, &codec).unwrap();
    let (val, _) = latentvision::pipeline::precompute_latents(&index, Split::Val, &codec).unwrap();
    let before = codec_bytes(&codec);
    let m = codec.config().latent_channels;
    let mut model = Classifier::new(ClassifierConfig::reduced(4, m, 16), 0).unwrap();
    let cfg = TrainConfig::new(Mode::Frozen, 4, 2, 4, 0);
    let run = train_frozen(&cfg, &codec, &mut model, &train, &val, Some(&tmp.path().join("ck"))).unwrap();
    assert_eq!(codec_bytes(&codec), before);
    assert_eq!(run.encoder_hash_before, run.encoder_hash_after);
    assert!(tmp.path().join("ck/best.classifier").is_file());
    assert!(tmp.path().join("ck/last.classifier").is_file());
    let max = run.epochs.iter().filter_map(|e| e.val_top1).fold(f64::MIN, f64::max);
    assert_eq!(run.best_top1, Some(max));

    // same config and seed, same numbers
    let mut again = Classifier::new(ClassifierConfig::reduced(4, m, 16), 0).unwrap();
    let rerun = train_frozen(&cfg, &codec, &mut again, &train, &val, None).unwrap();
    assert_eq!(rerun.epochs, run.epochs);

    // a classifier for other latents is refused
    let mut wrong = Classifier::new(ClassifierConfig::reduced(4, m + 8, 16), 0).unwrap();
    assert!(matches!(
        train_frozen(&cfg, &codec, &mut wrong, &train, &val, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn one_joint_step_moves_the_encoder_only() {
    let tmp = tempfile::tempdir().unwrap();
    let index = fixture_index(tmp.path(), 2, 1, 3);
    let mut codec = Codec::new(QualityConfig::scaled(4, 8).unwrap(), 0).unwrap();
    let m = codec.config().latent_channels;
    let mut model = Classifier::new(ClassifierConfig::reduced(4, m, 16), 0).unwrap();
    let encoder_before = codec.weights_hash(parts::ANALYSIS);
    let synthesis_before = codec.weights_hash(parts::SYNTHESIS);
    let prior_before = codec.weights_hash(parts::PRIOR);
    // 8 training images in one batch: exactly one step
    let cfg = TrainConfig {
        learning_rate: Some(1e-3),
        ..TrainConfig::new(Mode::Joint, 4, 1, 8, 0)
    };
    let run = train_joint(&cfg, &mut codec, &mut model, &index, None).unwrap();
    assert!(run.encoder_grad_norm_max.unwrap() > 0.0);
    assert_ne!(run.encoder_hash_before, run.encoder_hash_after);
    assert_ne!(codec.weights_hash(parts::ANALYSIS), encoder_before);
    assert_eq!(codec.weights_hash(parts::SYNTHESIS), synthesis_before);
    assert_eq!(codec.weights_hash(parts::PRIOR), prior_before);
}

#[test]
fn memorized_toy_split_scores_100_repeatably() {
    let codec = Codec::new(QualityConfig::scaled(4, 8).unwrap(), 0).unwrap();
    let m = codec.config().latent_channels;
    let mut store = LatentStore::new(4, (0..4).map(|i| format!("c{i}")).collect());
    for c in 0..4 {
        store
            .push(LatentRecord {
                class_id: c,
                source_id: format!("r{c}"),
                shape: [m, 4, 4],
                y_hat: (0..m * 16).map(|k| if k / 16 == c { 5 } else { 0 }).collect(),
                sigma_hat: vec![1.0; m * 16],
                stream_bytes: 16,
                pixels: 4096,
            })
            .unwrap();
    }
    let mut model = Classifier::new(ClassifierConfig::reduced(4, m, 16), 1).unwrap();
    let cfg = TrainConfig {
        learning_rate: Some(1e-2),
        ..TrainConfig::new(Mode::Frozen, 4, 30, 4, 1)
    };
    let run = train_frozen(&cfg, &codec, &mut model, &store, &store, None).unwrap();
    assert_eq!(run.best_top1, Some(100.0));
    let a = evaluate(&model, &store).unwrap();
    let b = evaluate(&model, &store).unwrap();
    assert_eq!(a.top1, 100.0);
    assert_eq!(a.per_class_accuracy, vec![100.0; 4]);
    assert_eq!(a, b);
    assert_eq!(a.mean_bpp, 16.0 * 8.0 / 4096.0);
    assert!(evaluate(&model, &LatentStore::new(4, store.classes.clone())).is_err());
}
