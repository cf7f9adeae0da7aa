//! Scale-hyperprior codec: analysis/synthesis transforms with GDN, hyper
//! transforms predicting per-element scales, a learned factorized prior for
//! the hyper-latent, quantization and rate estimation.

pub mod gaussian;
mod gdn;
pub mod prior;

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use latentvision_nn::ops::round_half_away;
use latentvision_nn::{Conv2d, ConvTranspose2d, Graph, Init, ParamStore, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::{self, Bitstream, PmfTable};
use crate::{Error, Result};
pub use gaussian::{gaussian_bits_op, P_MIN, SIGMA_MIN};
pub use gdn::Gdn;
pub use prior::FactorizedPrior;

/// Quality indices with trained weight sets.
pub const QUALITY_LEVELS: [u8; 3] = [1, 4, 8];
/// Spatial downsampling of the analysis transform.
pub const LATENT_STRIDE: usize = 16;
/// Spatial downsampling from image to hyper-latent; inputs must be
/// multiples of this.
pub const HYPER_STRIDE: usize = 64;

/// Latent width `M` of the standard weight set for `quality`.
pub fn standard_latent_channels(quality: u8) -> Option<usize> {
    match quality {
        1 | 4 => Some(192),
        8 => Some(320),
        _ => None,
    }
}

/// Hyper width `N` of the standard weight set for `quality`.
pub fn standard_hyper_channels(quality: u8) -> Option<usize> {
    match quality {
        1 | 4 => Some(128),
        8 => Some(192),
        _ => None,
    }
}

/// Rate–distortion weight `λ` of `λ·MSE + bpp`, with MSE on a `[0, 1]`
/// pixel scale.
pub fn standard_rd_weight(quality: u8) -> Option<f64> {
    let lambda_255 = match quality {
        1 => 0.0018,
        4 => 0.0130,
        8 => 0.18,
        _ => return None,
    };
    Some(lambda_255 * 255.0 * 255.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityConfig {
    pub quality_index: u8,
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub rd_weight: f64,
    pub weights_id: String,
}

impl QualityConfig {
    /// The full-width configuration of a quality index.
    pub fn standard(quality: u8) -> Result<Self> {
        Self::scaled(quality, 1)
    }

    /// Widths divided by `divisor` (rounded up), for small-scale runs.
    pub fn scaled(quality: u8, divisor: usize) -> Result<Self> {
        let (Some(m), Some(n), Some(rd_weight)) = (
            standard_latent_channels(quality),
            standard_hyper_channels(quality),
            standard_rd_weight(quality),
        ) else {
            return Err(Error::Config(format!("quality index {quality} is not one of 1, 4, 8")));
        };
        if divisor == 0 {
            return Err(Error::Config("width divisor must be positive".into()));
        }
        let weights_id = if divisor == 1 {
            format!("hyperprior-mse-q{quality}")
        } else {
            format!("hyperprior-mse-q{quality}-w{divisor}")
        };
        let cfg = QualityConfig {
            quality_index: quality,
            latent_channels: m.div_ceil(divisor),
            hyper_channels: n.div_ceil(divisor),
            rd_weight,
            weights_id,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Explicit widths, e.g. for gradient checks.
    pub fn with_widths(quality: u8, latent_channels: usize, hyper_channels: usize) -> Result<Self> {
        let mut cfg = Self::standard(quality)?;
        cfg.latent_channels = latent_channels;
        cfg.hyper_channels = hyper_channels;
        cfg.weights_id = format!("hyperprior-mse-q{quality}-m{latent_channels}n{hyper_channels}");
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !QUALITY_LEVELS.contains(&self.quality_index) {
            return Err(Error::Config(format!(
                "quality index {} is not one of 1, 4, 8",
                self.quality_index
            )));
        }
        if self.latent_channels == 0 || self.hyper_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !(self.rd_weight > 0.0) || !self.rd_weight.is_finite() {
            return Err(Error::Config(format!(
                "rd_weight must be positive, got {}",
                self.rd_weight
            )));
        }
        Ok(())
    }

    /// Whether the widths are the standard ones for this quality.
    pub fn is_standard(&self) -> bool {
        Some(self.latent_channels) == standard_latent_channels(self.quality_index)
            && Some(self.hyper_channels) == standard_hyper_channels(self.quality_index)
    }
}

/// An RGB image `[3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 || t.shape()[0] != 3 {
            return Err(Error::Shape(format!("image must be [3, H, W], got {:?}", t.shape())));
        }
        if !t.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Shape("image values must be finite and within [0, 1]".into()));
        }
        Ok(ImageTensor(t))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = p[c] as f64 / 255.0;
            }
        }
        ImageTensor(Tensor::from_vec(&[3, h, w], data))
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        let d = self.0.data();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let at = |c: usize| (d[c * h * w + y as usize * w + x as usize] * 255.0).round() as u8;
            image::Rgb([at(0), at(1), at(2)])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_rgb8(&image::open(path)?.to_rgb8()))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Reflect-pad bottom and right edges up to multiples of `multiple`.
    pub fn reflect_pad(&self, multiple: usize) -> ImageTensor {
        let (h, w) = (self.height(), self.width());
        let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
        if (ph, pw) == (h, w) {
            return self.clone();
        }
        let src = self.0.data();
        let mut out = Vec::with_capacity(3 * ph * pw);
        for c in 0..3 {
            for y in 0..ph {
                let sy = reflect_index(y, h);
                for x in 0..pw {
                    out.push(src[c * h * w + sy * w + reflect_index(x, w)]);
                }
            }
        }
        ImageTensor(Tensor::from_vec(&[3, ph, pw], out))
    }
}

/// Mirror `i` into `0..n` without repeating the edge sample.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Quantized latent `ŷ` with its scales `σ̂`, both `[M, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub shape: [usize; 3],
    pub y_hat: Vec<i32>,
    pub sigma_hat: Vec<f64>,
    pub quality_index: u8,
}

impl LatentCode {
    pub fn y_tensor(&self) -> Tensor {
        Tensor::from_vec(&self.shape, self.y_hat.iter().map(|&v| v as f64).collect())
    }

    pub fn sigma_tensor(&self) -> Tensor {
        Tensor::from_vec(&self.shape, self.sigma_hat.clone())
    }
}

/// Quantized hyper-latent `ẑ`, `[N, h/4, w/4]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HyperLatent {
    pub shape: [usize; 3],
    pub z_hat: Vec<i32>,
}

impl HyperLatent {
    pub fn tensor(&self) -> Tensor {
        Tensor::from_vec(&self.shape, self.z_hat.iter().map(|&v| v as f64).collect())
    }
}

pub enum Quantization<'a> {
    /// Round half away from zero.
    Round,
    /// Additive `U(−½, ½)` noise, the training-time proxy.
    Noise(&'a mut dyn RngCore),
}

pub fn quantize(t: &Tensor, mode: Quantization<'_>) -> Tensor {
    match mode {
        Quantization::Round => t.map(round_half_away),
        Quantization::Noise(rng) => {
            let mut out = t.clone();
            for v in out.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
            out
        }
    }
}

/// A `U(−½, ½)` tensor of the given shape.
pub fn uniform_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-0.5..0.5))
}

fn to_symbols(t: &Tensor) -> Result<Vec<i32>> {
    t.data()
        .iter()
        .map(|&v| {
            let r = round_half_away(v);
            if r.is_finite() && r.abs() < i32::MAX as f64 {
                Ok(r as i32)
            } else {
                Err(Error::Shape(format!("latent value {v} cannot be quantized")))
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Analysis {
    convs: Vec<Conv2d>,
    gdn: Vec<Gdn>,
}

#[derive(Clone, Debug)]
struct Synthesis {
    deconvs: Vec<ConvTranspose2d>,
    igdn: Vec<Gdn>,
}

#[derive(Clone, Debug)]
struct HyperAnalysis {
    convs: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
struct HyperSynthesis {
    deconvs: Vec<ConvTranspose2d>,
    out: Conv2d,
}

const PRIOR_INIT_SCALE: f64 = 10.0;

/// Codec weights for one [`QualityConfig`].
pub struct Codec {
    config: QualityConfig,
    store: ParamStore,
    g_a: Analysis,
    g_s: Synthesis,
    h_a: HyperAnalysis,
    h_s: HyperSynthesis,
    prior: FactorizedPrior,
    tables: OnceLock<std::result::Result<Vec<PmfTable>, entropy::StreamError>>,
    synthesis_calls: AtomicUsize,
}

impl Clone for Codec {
    fn clone(&self) -> Self {
        let mut c = Codec::build(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0));
        c.store = self.store.clone();
        c
    }
}

impl std::fmt::Debug for Codec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Codec")
            .field("config", &self.config)
            .field("parameters", &self.store.num_learnable())
            .finish()
    }
}

/// Parameter-name prefixes of the parts of a codec.
pub mod parts {
    pub const ANALYSIS: &str = "g_a.";
    pub const SYNTHESIS: &str = "g_s.";
    pub const HYPER_ANALYSIS: &str = "h_a.";
    pub const HYPER_SYNTHESIS: &str = "h_s.";
    pub const PRIOR: &str = "prior.";
}

impl Codec {
    /// Freshly initialized weights.
    pub fn new(config: QualityConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    fn build(config: QualityConfig, rng: &mut ChaCha8Rng) -> Self {
        let (m, n) = (config.latent_channels, config.hyper_channels);
        let mut s = ParamStore::new();
        let init = Init::UniformFanIn;

        let widths = [3, n, n, n, m];
        let g_a = Analysis {
            convs: (0..4)
                .map(|i| {
                    Conv2d::new(
                        &mut s,
                        &format!("g_a.conv{i}"),
                        widths[i],
                        widths[i + 1],
                        5,
                        2,
                        true,
                        init,
                        rng,
                    )
                })
                .collect(),
            gdn: (0..3)
                .map(|i| Gdn::new(&mut s, &format!("g_a.gdn{i}"), n, false))
                .collect(),
        };
        let widths = [m, n, n, n, 3];
        let g_s = Synthesis {
            deconvs: (0..4)
                .map(|i| {
                    ConvTranspose2d::new(
                        &mut s,
                        &format!("g_s.deconv{i}"),
                        widths[i],
                        widths[i + 1],
                        5,
                        2,
                        init,
                        rng,
                    )
                })
                .collect(),
            igdn: (0..3)
                .map(|i| Gdn::new(&mut s, &format!("g_s.igdn{i}"), n, true))
                .collect(),
        };
        let h_a = HyperAnalysis {
            convs: vec![
                Conv2d::new(&mut s, "h_a.conv0", m, n, 3, 1, true, init, rng),
                Conv2d::new(&mut s, "h_a.conv1", n, n, 5, 2, true, init, rng),
                Conv2d::new(&mut s, "h_a.conv2", n, n, 5, 2, true, init, rng),
            ],
        };
        let h_s = HyperSynthesis {
            deconvs: vec![
                ConvTranspose2d::new(&mut s, "h_s.deconv0", n, n, 5, 2, init, rng),
                ConvTranspose2d::new(&mut s, "h_s.deconv1", n, n, 5, 2, init, rng),
            ],
            out: Conv2d::new(&mut s, "h_s.conv2", n, m, 3, 1, true, init, rng),
        };
        let prior = FactorizedPrior::new(&mut s, "prior", n, PRIOR_INIT_SCALE, rng);
        Codec {
            config,
            store: s,
            g_a,
            g_s,
            h_a,
            h_s,
            prior,
            tables: OnceLock::new(),
            synthesis_calls: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &QualityConfig {
        &self.config
    }

    pub fn quality_index(&self) -> u8 {
        self.config.quality_index
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable weights; drops the cached prior tables.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.tables = OnceLock::new();
        &mut self.store
    }

    pub fn prior(&self) -> &FactorizedPrior {
        &self.prior
    }

    /// SHA-256 of the weights whose names start with `prefix` (`""` = all).
    pub fn weights_hash(&self, prefix: &str) -> String {
        self.store.content_hash(prefix)
    }

    /// How many times the synthesis transform has run on this instance.
    pub fn synthesis_calls(&self) -> usize {
        self.synthesis_calls.load(Ordering::Relaxed)
    }

    // ---- graph-level transforms over batches `[B, C, H, W]` ----

    pub fn analysis(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (i, conv) in self.g_a.convs.iter().enumerate() {
            h = conv.forward(g, &self.store, h);
            if let Some(gdn) = self.g_a.gdn.get(i) {
                h = gdn.forward(g, &self.store, h);
            }
        }
        h
    }

    /// Unclamped reconstruction.
    pub fn synthesis(&self, g: &mut Graph, y: Var) -> Var {
        self.synthesis_calls.fetch_add(1, Ordering::Relaxed);
        let mut h = y;
        for (i, deconv) in self.g_s.deconvs.iter().enumerate() {
            h = deconv.forward(g, &self.store, h);
            if let Some(igdn) = self.g_s.igdn.get(i) {
                h = igdn.forward(g, &self.store, h);
            }
        }
        h
    }

    /// Takes `y` itself; the absolute value is applied here.
    pub fn hyper_analysis(&self, g: &mut Graph, y: Var) -> Var {
        let mut h = g.abs(y);
        let last = self.h_a.convs.len() - 1;
        for (i, conv) in self.h_a.convs.iter().enumerate() {
            h = conv.forward(g, &self.store, h);
            if i < last {
                h = g.relu(h);
            }
        }
        h
    }

    /// Scales `σ̂ ≥ σ_min`.
    pub fn hyper_synthesis(&self, g: &mut Graph, z: Var) -> Var {
        let mut h = z;
        for deconv in &self.h_s.deconvs {
            h = deconv.forward(g, &self.store, h);
            h = g.relu(h);
        }
        let raw = self.h_s.out.forward(g, &self.store, h);
        g.lower_bound(raw, SIGMA_MIN)
    }

    /// Per-sample bits of `z` under the factorized prior, shape `[B]`.
    pub fn prior_bits(&self, g: &mut Graph, z: Var) -> Var {
        self.prior.bits_op(g, &self.store, z)
    }

    // ---- single-image operations ----

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let (h, w) = (image.height(), image.width());
        if h == 0 || w == 0 || h % HYPER_STRIDE != 0 || w % HYPER_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "image {h}×{w} is not a multiple of {HYPER_STRIDE}; pad it first"
            )));
        }
        if h > u16::MAX as usize || w > u16::MAX as usize {
            return Err(Error::Shape(format!("image {h}×{w} is too large")));
        }
        Ok(())
    }

    fn check_latent(&self, t: &Tensor, channels: usize, what: &str) -> Result<()> {
        if t.rank() != 3 {
            return Err(Error::Shape(format!("{what} must be [C, h, w], got {:?}", t.shape())));
        }
        if t.shape()[0] != channels {
            return Err(Error::Config(format!(
                "{what} has {} channels but quality {} weights expect {channels}",
                t.shape()[0],
                self.config.quality_index
            )));
        }
        Ok(())
    }

    fn batched(t: &Tensor) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(&shape)
    }

    fn unbatched(t: &Tensor) -> Tensor {
        t.clone().reshape(&t.shape()[1..])
    }

    /// Continuous latent `y`, `[M, H/16, W/16]`.
    pub fn analysis_transform(&self, image: &ImageTensor) -> Result<Tensor> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let x = g.constant(Self::batched(image.tensor()));
        let y = self.analysis(&mut g, x);
        Ok(Self::unbatched(g.value(y)))
    }

    /// Reconstruction clamped to `[0, 1]`.
    pub fn synthesis_transform(&self, y_hat: &Tensor) -> Result<ImageTensor> {
        self.check_latent(y_hat, self.config.latent_channels, "latent")?;
        let mut g = Graph::new();
        let y = g.constant(Self::batched(y_hat));
        let x = self.synthesis(&mut g, y);
        let img = Self::unbatched(g.value(x)).map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        ImageTensor::new(img)
    }

    /// `[N, h/4, w/4]` from `y: [M, h, w]`.
    pub fn hyper_analysis_transform(&self, y: &Tensor) -> Result<Tensor> {
        self.check_latent(y, self.config.latent_channels, "latent")?;
        if !y.shape()[1].is_multiple_of(4) || !y.shape()[2].is_multiple_of(4) {
            return Err(Error::Shape(format!("latent {:?} is not a multiple of 4", y.shape())));
        }
        let mut g = Graph::new();
        let yv = g.constant(Self::batched(y));
        let z = self.hyper_analysis(&mut g, yv);
        Ok(Self::unbatched(g.value(z)))
    }

    /// Scales `σ̂: [M, 4h, 4w]` from `ẑ: [N, h, w]`.
    pub fn hyper_synthesis_transform(&self, z_hat: &HyperLatent) -> Result<Tensor> {
        let z = z_hat.tensor();
        self.check_latent(&z, self.config.hyper_channels, "hyper-latent")?;
        let mut g = Graph::new();
        let zv = g.constant(Self::batched(&z));
        let s = self.hyper_synthesis(&mut g, zv);
        Ok(Self::unbatched(g.value(s)))
    }

    /// `ŷ`, `σ̂` and `ẑ` of an image, without entropy coding.
    pub fn latents(&self, image: &ImageTensor) -> Result<(LatentCode, HyperLatent)> {
        let y = self.analysis_transform(image)?;
        let z = self.hyper_analysis_transform(&y)?;
        let z_hat = HyperLatent {
            shape: [z.shape()[0], z.shape()[1], z.shape()[2]],
            z_hat: to_symbols(&z)?,
        };
        let sigma = self.hyper_synthesis_transform(&z_hat)?;
        let code = LatentCode {
            shape: [y.shape()[0], y.shape()[1], y.shape()[2]],
            y_hat: to_symbols(&y)?,
            sigma_hat: sigma.into_data(),
            quality_index: self.config.quality_index,
        };
        Ok((code, z_hat))
    }

    /// Per-channel pmf tables of the factorized prior, built once per
    /// weight state.
    pub fn prior_tables(&self) -> Result<&[PmfTable]> {
        match self.tables.get_or_init(|| self.prior.tabulate(&self.store)) {
            Ok(t) => Ok(t),
            Err(e) => Err(e.clone().into()),
        }
    }

    /// Analysis, hyper path, rounding and entropy coding.
    pub fn compress(&self, image: &ImageTensor) -> Result<(LatentCode, HyperLatent, Bitstream)> {
        self.check_image(image)?;
        let (code, z_hat) = self.latents(image)?;
        let z_bytes = entropy::encode_factorized(&z_hat, self.prior_tables()?)?;
        let y_bytes = entropy::encode_gaussian(&code.y_hat, &code.sigma_hat)?;
        let stream = Bitstream::new(
            self.config.quality_index,
            image.height() as u16,
            image.width() as u16,
            z_bytes,
            y_bytes,
        );
        Ok((code, z_hat, stream))
    }

    /// Model bits of `(ŷ, ẑ)` given `σ̂`, each element's probability
    /// floored at [`P_MIN`].
    pub fn rate_estimate(&self, y_hat: &Tensor, sigma_hat: &Tensor, z_hat: &Tensor) -> Result<f64> {
        if y_hat.shape() != sigma_hat.shape() {
            return Err(Error::Shape(format!(
                "ŷ {:?} and σ̂ {:?} differ in shape",
                y_hat.shape(),
                sigma_hat.shape()
            )));
        }
        self.check_latent(y_hat, self.config.latent_channels, "latent")?;
        self.check_latent(z_hat, self.config.hyper_channels, "hyper-latent")?;
        let y_bits: f64 = y_hat
            .data()
            .iter()
            .zip(sigma_hat.data())
            .map(|(&y, &s)| gaussian::gaussian_bits(y, s))
            .sum();
        Ok(y_bits + self.prior.bits(&self.store, z_hat))
    }

    // ---- persistence ----

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let meta = serde_json::json!({ "kind": "codec", "config": self.config });
        Ok(self.store.write_to(w, meta)?)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (stored, meta) = ParamStore::read_from(r)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("codec") {
            return Err(Error::Config("checkpoint does not hold codec weights".into()));
        }
        let config: QualityConfig =
            serde_json::from_value(meta["config"].clone()).map_err(|e| Error::Format(format!("codec config: {e}")))?;
        let mut codec = Codec::new(config, 0)?;
        let copied = codec.store.copy_values_from(&stored, "")?;
        if copied != codec.store.len() || stored.len() != codec.store.len() {
            return Err(Error::Format("codec checkpoint does not match its config".into()));
        }
        Ok(codec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Config(format!("cannot open codec weights {}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn standard_widths() {
        let m: Vec<_> = QUALITY_LEVELS
            .iter()
            .map(|&q| QualityConfig::standard(q).unwrap().latent_channels)
            .collect();
        assert_eq!(m, vec![192, 192, 320]);
        assert!(QualityConfig::standard(2).is_err());
        assert!(QualityConfig::standard(8).unwrap().is_standard());
        assert!(!QualityConfig::scaled(8, 16).unwrap().is_standard());
        let mut c = QualityConfig::standard(1).unwrap();
        c.rd_weight = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_width_shapes() {
        let codec = Codec::new(QualityConfig::standard(8).unwrap(), 0).unwrap();
        let y = codec.analysis_transform(&image(256, 256, 1)).unwrap();
        assert_eq!(y.shape(), &[320, 16, 16]);
        let codec = Codec::new(QualityConfig::standard(4).unwrap(), 0).unwrap();
        let y = codec.analysis_transform(&image(64, 64, 1)).unwrap();
        assert_eq!(y.shape(), &[192, 4, 4]);
        let z = codec.hyper_analysis_transform(&y).unwrap();
        assert_eq!(z.shape(), &[128, 1, 1]);
        let x = codec.synthesis_transform(&Tensor::zeros(&[192, 4, 4])).unwrap();
        assert_eq!(x.tensor().shape(), &[3, 64, 64]);
        assert!(codec.synthesis_transform(&Tensor::zeros(&[320, 4, 4])).is_err());
    }

    #[test]
    fn rejects_unpadded_images() {
        let codec = Codec::new(QualityConfig::scaled(1, 16).unwrap(), 0).unwrap();
        assert!(matches!(
            codec.analysis_transform(&image(48, 64, 0)),
            Err(Error::Shape(_))
        ));
        let padded = image(48, 70, 0).reflect_pad(64);
        assert_eq!((padded.height(), padded.width()), (64, 128));
        assert!(codec.analysis_transform(&padded).is_ok());
    }

    #[test]
    fn reflect_pad_mirrors_without_repeating_edge() {
        let t = Tensor::from_fn(&[3, 1, 3], |i| (i % 3) as f64 / 4.0);
        let p = ImageTensor::new(t).unwrap().reflect_pad(8);
        assert_eq!(&p.tensor().data()[..8], &[0.0, 0.25, 0.5, 0.25, 0.0, 0.25, 0.5, 0.25]);
    }

    #[test]
    fn sigma_floor_with_adversarial_bias() {
        let mut codec = Codec::new(QualityConfig::scaled(4, 16).unwrap(), 3).unwrap();
        let b = codec.store.id("h_s.conv2.bias").unwrap();
        let n = codec.store.value(b).numel();
        codec.store_mut().set_value(b, Tensor::full(&[n], -1e9));
        let z = HyperLatent {
            shape: [codec.config.hyper_channels, 2, 2],
            z_hat: (0..codec.config.hyper_channels as i32 * 4).map(|i| i % 5 - 2).collect(),
        };
        let s = codec.hyper_synthesis_transform(&z).unwrap();
        assert!(s.data().iter().all(|&v| v == SIGMA_MIN));
    }

    #[test]
    fn hyper_synthesis_is_pure() {
        let codec = Codec::new(QualityConfig::scaled(8, 16).unwrap(), 4).unwrap();
        let z = HyperLatent {
            shape: [codec.config.hyper_channels, 1, 1],
            z_hat: vec![0; codec.config.hyper_channels],
        };
        let a = codec.hyper_synthesis_transform(&z).unwrap();
        let b = codec.hyper_synthesis_transform(&z).unwrap();
        assert_eq!(a, b);
        assert!(a.min() >= SIGMA_MIN);
    }

    #[test]
    fn quantize_rounding() {
        let t = Tensor::from_vec(&[6], vec![0.4, -0.4, 1.5, -1.5, 2.5, -0.5]);
        assert_eq!(
            quantize(&t, Quantization::Round).data(),
            &[0.0, 0.0, 2.0, -2.0, 3.0, -1.0]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let big = Tensor::from_fn(&[1000], |i| i as f64 * 0.37);
        let n = quantize(&big, Quantization::Noise(&mut rng));
        assert!(n.data().iter().zip(big.data()).all(|(a, b)| (a - b).abs() <= 0.5));
    }

    #[test]
    fn rate_estimate_closed_forms() {
        let codec = Codec::new(QualityConfig::with_widths(1, 4, 2).unwrap(), 0).unwrap();
        let y = Tensor::zeros(&[4, 2, 2]);
        let z = Tensor::zeros(&[2, 1, 1]);
        let z_bits = codec.prior.bits(&codec.store, &z);
        let at_floor = codec
            .rate_estimate(&y, &Tensor::full(&[4, 2, 2], SIGMA_MIN), &z)
            .unwrap()
            - z_bits;
        assert!(at_floor / 16.0 <= 0.01);
        let unit = codec.rate_estimate(&y, &Tensor::ones(&[4, 2, 2]), &z).unwrap() - z_bits;
        assert!((unit / 16.0 - 1.385).abs() < 1e-3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let codec = Codec::new(QualityConfig::scaled(4, 16).unwrap(), 9).unwrap();
        let mut buf = Vec::new();
        codec.write_to(&mut buf).unwrap();
        let back = Codec::read_from(&buf[..]).unwrap();
        assert_eq!(back.config(), codec.config());
        assert_eq!(back.weights_hash(""), codec.weights_hash(""));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn shape_algebra(hb in 1usize..3, wb in 1usize..3, q in prop::sample::select(vec![1u8, 4, 8])) {
            let codec = Codec::new(QualityConfig::scaled(q, 16).unwrap(), 0).unwrap();
            let img = image(64 * hb, 64 * wb, 5);
            let (code, z) = codec.latents(&img).unwrap();
            prop_assert_eq!(code.shape, [codec.config.latent_channels, 4 * hb, 4 * wb]);
            prop_assert_eq!(z.shape, [codec.config.hyper_channels, hb, wb]);
            prop_assert_eq!(code.sigma_hat.len(), code.y_hat.len());
            prop_assert!(code.sigma_hat.iter().all(|&s| s >= SIGMA_MIN));
        }

        #[test]
        fn rounding_is_idempotent(v in prop::collection::vec(-1e6f64..1e6, 1..64)) {
            let t = Tensor::from_vec(&[v.len()], v);
            let once = quantize(&t, Quantization::Round);
            prop_assert_eq!(quantize(&once, Quantization::Round), once);
        }
    }
}
