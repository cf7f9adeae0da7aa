use latentvision::codec::{Codec, ImageTensor, QualityConfig};
use latentvision::entropy::{encode_gaussian, gaussian_half_width, partial_decode, Bitstream};
use latentvision::nn::Tensor;
use latentvision::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0))).unwrap()
}

/// A stream whose `ŷ` segment holds random in-support symbols under the
/// scales the codec predicts from its own `ẑ`.
fn random_stream(codec: &Codec, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<i32>) {
    let img = noise_image(rng, 64, 128);
    let (code, _, stream) = codec.compress(&img).unwrap();
    let y: Vec<i32> = code
        .sigma_hat
        .iter()
        .map(|&s| {
            let k = gaussian_half_width(s);
            rng.random_range(-k.min(3)..=k.min(3))
        })
        .collect();
    let y_bytes = encode_gaussian(&y, &code.sigma_hat).unwrap();
    let s = Bitstream::new(
        stream.quality_index,
        stream.image_h,
        stream.image_w,
        stream.z_bytes.clone(),
        y_bytes,
    );
    (s.serialize(), y)
}

#[test]
fn stream_files_decode_to_the_encoder_latents() {
    let dir = tempfile::tempdir().unwrap();
    let codec = Codec::new(QualityConfig::scaled(8, 8).unwrap(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (bytes, y) = random_stream(&codec, &mut rng);
    let path = dir.path().join("a.lvc");
    std::fs::write(&path, &bytes).unwrap();

    let calls = codec.synthesis_calls();
    let got = partial_decode(&std::fs::read(&path).unwrap(), &codec).unwrap();
    assert_eq!(got.y_hat, y);
    assert_eq!(got.shape, [codec.config().latent_channels, 4, 8]);
    assert_eq!(codec.synthesis_calls(), calls);

    let reloaded = {
        let p = dir.path().join("w.codec");
        codec.save(&p).unwrap();
        Codec::load(&p).unwrap()
    };
    assert_eq!(partial_decode(&bytes, &reloaded).unwrap(), got);
}

#[test]
fn single_byte_corruptions_are_detected() {
    let codec = Codec::new(QualityConfig::scaled(4, 8).unwrap(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut detected, mut silent) = (0, Vec::new());
    for trial in 0..100 {
        let (mut bytes, y) = random_stream(&codec, &mut rng);
        let i = rng.random_range(0..bytes.len());
        bytes[i] ^= rng.random_range(1..=255u8);
        match partial_decode(&bytes, &codec) {
            Err(Error::Stream(_) | Error::Config(_)) => detected += 1,
            Err(e) => panic!("unexpected error kind: {e}"),
            Ok(code) => silent.push((trial, i, code.y_hat == y)),
        }
    }
    println!("detected {detected}/100; undetected (trial, byte, same symbols): {silent:?}");
    assert!(detected >= 95);
}

#[test]
fn header_damage_is_named() {
    let codec = Codec::new(QualityConfig::scaled(1, 8).unwrap(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (bytes, _) = random_stream(&codec, &mut rng);
    let mut b = bytes.clone();
    b[0] = b'X';
    assert!(partial_decode(&b, &codec)
        .unwrap_err()
        .to_string()
        .contains("not a latentvision stream"));
    let mut b = bytes.clone();
    b[4] = 9;
    assert!(partial_decode(&b, &codec)
        .unwrap_err()
        .to_string()
        .contains("unsupported version"));
    let b = &bytes[..bytes.len() - 1];
    assert!(partial_decode(b, &codec)
        .unwrap_err()
        .to_string()
        .contains("truncated stream"));
    let other = Codec::new(QualityConfig::scaled(8, 8).unwrap(), 0).unwrap();
    assert!(matches!(partial_decode(&bytes, &other), Err(Error::Config(_))));
}
