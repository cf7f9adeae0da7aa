use std::collections::hash_map::Entry;
use std::collections::HashMap;

use super::pmf::{gaussian_pmf, PmfTable};
use super::range::{RangeDecoder, RangeEncoder};
use super::stream::Bitstream;
use super::StreamError;
use crate::codec::{Codec, HyperLatent, LatentCode, HYPER_STRIDE};
use crate::{Error, Result};

/// Gaussian tables keyed by the exact bits of their scale. Many scales
/// repeat (every floored one does), so this saves most table builds.
#[derive(Default)]
struct ScaleTables(HashMap<u64, PmfTable>);

impl ScaleTables {
    fn get(&mut self, scale: f64) -> Result<&PmfTable, StreamError> {
        Ok(match self.0.entry(scale.to_bits()) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(gaussian_pmf(scale)?),
        })
    }
}

/// Code `y_hat[i]` under the Gaussian pmf of `sigma[i]`.
pub fn encode_gaussian(y_hat: &[i32], sigma: &[f64]) -> Result<Vec<u8>, StreamError> {
    assert_eq!(y_hat.len(), sigma.len(), "one scale per symbol");
    let mut tables = ScaleTables::default();
    let mut enc = RangeEncoder::new();
    for (&y, &s) in y_hat.iter().zip(sigma) {
        enc.encode(tables.get(s)?, y)?;
    }
    Ok(enc.finish())
}

pub fn decode_gaussian(bytes: &[u8], sigma: &[f64]) -> Result<Vec<i32>, StreamError> {
    let mut tables = ScaleTables::default();
    let mut dec = RangeDecoder::new(bytes)?;
    let out = sigma
        .iter()
        .map(|&s| dec.decode(tables.get(s)?))
        .collect::<Result<Vec<_>, _>>()?;
    dec.finish()?;
    Ok(out)
}

/// Code `ẑ` channel by channel with one table per channel.
pub fn encode_factorized(z_hat: &HyperLatent, tables: &[PmfTable]) -> Result<Vec<u8>> {
    let [c, h, w] = z_hat.shape;
    check_channels(c, tables)?;
    let plane = h * w;
    let mut enc = RangeEncoder::new();
    for (i, &z) in z_hat.z_hat.iter().enumerate() {
        enc.encode(&tables[i / plane], z)?;
    }
    Ok(enc.finish())
}

pub fn decode_factorized(bytes: &[u8], tables: &[PmfTable], shape: [usize; 3]) -> Result<HyperLatent> {
    let [c, h, w] = shape;
    check_channels(c, tables)?;
    let mut dec = RangeDecoder::new(bytes)?;
    let mut z_hat = Vec::with_capacity(c * h * w);
    for table in tables {
        for _ in 0..h * w {
            z_hat.push(dec.decode(table)?);
        }
    }
    dec.finish()?;
    Ok(HyperLatent { shape, z_hat })
}

fn check_channels(c: usize, tables: &[PmfTable]) -> Result<()> {
    if c != tables.len() {
        return Err(Error::Config(format!(
            "hyper-latent has {c} channels but the prior has {}",
            tables.len()
        )));
    }
    Ok(())
}

/// Recover `(ŷ, σ̂)` from a stream: decode `ẑ`, run the hyper-synthesis,
/// then decode `ŷ`. The synthesis transform is never run.
pub fn partial_decode(bytes: &[u8], codec: &Codec) -> Result<LatentCode> {
    let stream = Bitstream::parse(bytes)?;
    let cfg = codec.config();
    if stream.quality_index != cfg.quality_index {
        return Err(Error::Config(format!(
            "stream was coded at quality {} but the weights are for quality {}",
            stream.quality_index, cfg.quality_index
        )));
    }
    let (h, w) = (stream.image_h as usize, stream.image_w as usize);
    if h == 0 || w == 0 || h % HYPER_STRIDE != 0 || w % HYPER_STRIDE != 0 {
        return Err(StreamError::Corrupt("image size is not a multiple of 64").into());
    }
    let z_shape = [cfg.hyper_channels, h / HYPER_STRIDE, w / HYPER_STRIDE];
    let z_hat = decode_factorized(&stream.z_bytes, codec.prior_tables()?, z_shape)?;
    let sigma = codec.hyper_synthesis_transform(&z_hat)?;
    let shape = [sigma.shape()[0], sigma.shape()[1], sigma.shape()[2]];
    let sigma_hat = sigma.into_data();
    let y_hat = decode_gaussian(&stream.y_bytes, &sigma_hat)?;
    Ok(LatentCode {
        shape,
        y_hat,
        sigma_hat,
        quality_index: cfg.quality_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{ImageTensor, QualityConfig};
    use latentvision_nn::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn codec() -> Codec {
        Codec::new(QualityConfig::scaled(4, 16).unwrap(), 11).unwrap()
    }

    fn random_image(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Tensor::from_fn(&[3, 64, 128], |_| rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn partial_decode_recovers_latents_without_synthesis() {
        let c = codec();
        for seed in 0..3 {
            let (code, _, stream) = c.compress(&random_image(seed)).unwrap();
            let before = c.synthesis_calls();
            let back = partial_decode(&stream.serialize(), &c).unwrap();
            assert_eq!(c.synthesis_calls(), before);
            assert_eq!(back, code);
        }
    }

    #[test]
    fn quality_mismatch_is_a_config_error() {
        let c = codec();
        let (_, _, stream) = c.compress(&random_image(0)).unwrap();
        let other = Codec::new(QualityConfig::scaled(8, 16).unwrap(), 0).unwrap();
        assert!(matches!(
            partial_decode(&stream.serialize(), &other),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn compress_is_deterministic() {
        let c = codec();
        let img = random_image(4);
        assert_eq!(c.compress(&img).unwrap().2, c.clone().compress(&img).unwrap().2);
    }

    #[test]
    fn factorized_round_trip_and_zero_is_cheap() {
        let c = codec();
        let tables = c.prior_tables().unwrap();
        let n = c.config().hyper_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let random = HyperLatent {
            shape: [n, 2, 3],
            z_hat: (0..n * 6)
                .map(|i| {
                    let t = &tables[i / 6];
                    rng.random_range(t.support_min()..=t.support_max())
                })
                .collect(),
        };
        let bytes = encode_factorized(&random, tables).unwrap();
        assert_eq!(decode_factorized(&bytes, tables, random.shape).unwrap(), random);
        let zeros = HyperLatent {
            shape: [n, 2, 3],
            z_hat: vec![0; n * 6],
        };
        let zb = encode_factorized(&zeros, tables).unwrap();
        assert!(zb.len() <= bytes.len());
        assert_eq!(decode_factorized(&zb, tables, zeros.shape).unwrap(), zeros);
    }
}
