//! Latent-domain classifier: two bottleneck stems (one for `ŷ`, one for
//! `σ̂`) concatenated into a bottleneck-ResNet trunk, global average pool
//! and a linear head.

use std::io::{Read, Write};
use std::path::Path;

use latentvision_nn::ops::softmax_rows;
use latentvision_nn::{BatchNorm, Conv2d, Graph, Init, Linear, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Spatial size the classifier consumes.
pub const INPUT_SIZE: usize = 28;
/// Latent widths of the standard codecs.
pub const SUPPORTED_LATENT_CHANNELS: [usize; 2] = [192, 320];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaInput {
    /// Feed `σ̂` as is.
    Raw,
    /// Feed `ln σ̂`.
    Log,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// `[1×1 reduce, 3×3, 1×1 expand]` output widths.
    pub widths: [usize; 3],
    pub repeats: usize,
    /// Stride of the first block (on its 3×3 convolution).
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub latent_channels: usize,
    /// Widths of each stem block; the stems' outputs are concatenated.
    pub stem_widths: [usize; 3],
    pub trunk: Vec<StageSpec>,
    /// Every width above is divided by this (rounded up).
    pub width_divisor: usize,
    pub sigma_input: SigmaInput,
}

impl ClassifierConfig {
    /// Full-width architecture: stems `[32, 32, 128]`, trunk
    /// `[128,128,512]×4`, `[256,256,1024]×6`, `[512,512,2048]×3`.
    pub fn new(num_classes: usize, latent_channels: usize) -> Self {
        ClassifierConfig {
            num_classes,
            latent_channels,
            stem_widths: [32, 32, 128],
            trunk: vec![
                StageSpec {
                    widths: [128, 128, 512],
                    repeats: 4,
                    stride: 2,
                },
                StageSpec {
                    widths: [256, 256, 1024],
                    repeats: 6,
                    stride: 2,
                },
                StageSpec {
                    widths: [512, 512, 2048],
                    repeats: 3,
                    stride: 2,
                },
            ],
            width_divisor: 1,
            sigma_input: SigmaInput::Raw,
        }
    }

    /// Same depth with every width divided by `divisor`.
    pub fn reduced(num_classes: usize, latent_channels: usize, divisor: usize) -> Self {
        ClassifierConfig {
            width_divisor: divisor,
            ..Self::new(num_classes, latent_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be ≥ 2, got {}",
                self.num_classes
            )));
        }
        if self.width_divisor == 0 {
            return Err(Error::Config("width_divisor must be positive".into()));
        }
        if self.latent_channels == 0 {
            return Err(Error::Config("latent_channels must be positive".into()));
        }
        if self.width_divisor == 1 && !SUPPORTED_LATENT_CHANNELS.contains(&self.latent_channels) {
            return Err(Error::Config(format!(
                "latent_channels must be 192 or 320 for the full-width classifier, got {}",
                self.latent_channels
            )));
        }
        if self.trunk.is_empty() || self.trunk.iter().any(|s| s.repeats == 0 || s.stride == 0) {
            return Err(Error::Config(
                "every trunk stage needs ≥ 1 block and a positive stride".into(),
            ));
        }
        Ok(())
    }

    fn width(&self, w: usize) -> usize {
        w.div_ceil(self.width_divisor)
    }

    /// Channels entering the trunk (both stems together).
    pub fn stem_output_channels(&self) -> usize {
        2 * self.width(self.stem_widths[2])
    }

    /// First 16 hex digits of the SHA-256 of the JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    c1: Conv2d,
    b1: BatchNorm,
    c2: Conv2d,
    b2: BatchNorm,
    c3: Conv2d,
    b3: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        widths: [usize; 3],
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let he = Init::HeFanOut;
        let [w1, w2, w3] = widths;
        let shortcut = (c_in != w3 || stride != 1).then(|| {
            (
                Conv2d::new(store, &format!("{name}.proj"), c_in, w3, 1, stride, false, he, rng),
                BatchNorm::new(store, &format!("{name}.proj_bn"), w3, 1.0),
            )
        });
        Bottleneck {
            c1: Conv2d::new(store, &format!("{name}.conv1"), c_in, w1, 1, 1, false, he, rng),
            b1: BatchNorm::new(store, &format!("{name}.bn1"), w1, 1.0),
            c2: Conv2d::new(store, &format!("{name}.conv2"), w1, w2, 3, stride, false, he, rng),
            b2: BatchNorm::new(store, &format!("{name}.bn2"), w2, 1.0),
            c3: Conv2d::new(store, &format!("{name}.conv3"), w2, w3, 1, 1, false, he, rng),
            // residual branches start as identity maps
            b3: BatchNorm::new(store, &format!("{name}.bn3"), w3, 0.0),
            shortcut,
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let h = self.c1.forward(g, s, x);
        let h = self.b1.forward(g, s, h);
        let h = g.relu(h);
        let h = self.c2.forward(g, s, h);
        let h = self.b2.forward(g, s, h);
        let h = g.relu(h);
        let h = self.c3.forward(g, s, h);
        let h = self.b3.forward(g, s, h);
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let p = conv.forward(g, s, x);
                bn.forward(g, s, p)
            }
            None => x,
        };
        let sum = g.add(h, skip);
        g.relu(sum)
    }
}

pub struct Classifier {
    config: ClassifierConfig,
    store: ParamStore,
    stem_y: Bottleneck,
    stem_sigma: Bottleneck,
    trunk: Vec<Vec<Bottleneck>>,
    fc: Linear,
}

impl Clone for Classifier {
    fn clone(&self) -> Self {
        let mut c = Classifier::new(self.config.clone(), 0).expect("config was validated");
        c.store = self.store.clone();
        c
    }
}

impl std::fmt::Debug for Classifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Classifier")
            .field("config", &self.config)
            .field("parameters", &self.store.num_learnable())
            .finish()
    }
}

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = config.stem_widths.map(|w| config.width(w));
        let m = config.latent_channels;
        let stem_y = Bottleneck::new(&mut store, "stem_y", m, stem, 1, &mut rng);
        let stem_sigma = Bottleneck::new(&mut store, "stem_sigma", m, stem, 1, &mut rng);
        let mut c_in = config.stem_output_channels();
        let mut trunk = Vec::new();
        for (si, stage) in config.trunk.iter().enumerate() {
            let widths = stage.widths.map(|w| config.width(w));
            let blocks = (0..stage.repeats)
                .map(|bi| {
                    let stride = if bi == 0 { stage.stride } else { 1 };
                    let b = Bottleneck::new(
                        &mut store,
                        &format!("stage{si}.block{bi}"),
                        c_in,
                        widths,
                        stride,
                        &mut rng,
                    );
                    c_in = widths[2];
                    b
                })
                .collect();
            trunk.push(blocks);
        }
        let fc = Linear::new(&mut store, "fc", c_in, config.num_classes, &mut rng);
        Ok(Classifier {
            config,
            store,
            stem_y,
            stem_sigma,
            trunk,
            fc,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Width of the final linear layer.
    pub fn head_width(&self) -> usize {
        self.fc.out_features(&self.store)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.latent_channels;
        if shape.len() != 4 || shape[2] != INPUT_SIZE || shape[3] != INPUT_SIZE {
            return Err(Error::Shape(format!(
                "classifier input must be [B, C, {INPUT_SIZE}, {INPUT_SIZE}], got {shape:?}"
            )));
        }
        if shape[1] != m {
            return Err(Error::Config(format!(
                "classifier expects {m} latent channels, got {}",
                shape[1]
            )));
        }
        Ok(())
    }

    /// Logits `[B, num_classes]`; batch statistics in a training graph,
    /// running statistics otherwise.
    pub fn forward_graph(&self, g: &mut Graph, y: Var, sigma: Var) -> Var {
        self.forward_traced(g, y, sigma, &mut Vec::new())
    }

    fn forward_traced(&self, g: &mut Graph, y: Var, sigma: Var, trace: &mut Vec<Vec<usize>>) -> Var {
        let s = &self.store;
        let sigma = match self.config.sigma_input {
            SigmaInput::Raw => sigma,
            SigmaInput::Log => g.ln(sigma),
        };
        let a = self.stem_y.forward(g, s, y);
        let b = self.stem_sigma.forward(g, s, sigma);
        let mut h = g.concat_channels(a, b);
        trace.push(g.shape(h).to_vec());
        for stage in &self.trunk {
            for block in stage {
                h = block.forward(g, s, h);
            }
            trace.push(g.shape(h).to_vec());
        }
        let pooled = g.global_avg_pool(h);
        self.fc.forward(g, s, pooled)
    }

    /// Eval-mode logits for `[B, M, 28, 28]` inputs.
    pub fn forward(&self, y: &Tensor, sigma: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_trace(y, sigma)?.0)
    }

    /// Logits plus the activation shapes after the stems and after each
    /// trunk stage.
    pub fn forward_with_trace(&self, y: &Tensor, sigma: &Tensor) -> Result<(Tensor, Vec<Vec<usize>>)> {
        self.check_input(y.shape())?;
        if y.shape() != sigma.shape() {
            return Err(Error::Shape(format!(
                "ŷ {:?} and σ̂ {:?} differ in shape",
                y.shape(),
                sigma.shape()
            )));
        }
        let mut g = Graph::new();
        let yv = g.constant(y.clone());
        let sv = g.constant(sigma.clone());
        let mut trace = Vec::new();
        let out = self.forward_traced(&mut g, yv, sv, &mut trace);
        Ok((g.value(out).clone(), trace))
    }

    /// Copy same-named, same-shaped weights from another store (e.g. an
    /// imported backbone). Returns how many entries were copied.
    pub fn import_weights(&mut self, other: &ParamStore) -> Result<usize> {
        Ok(self.store.copy_values_from(other, "")?)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "classifier",
            "config": self.config,
            "config_hash": self.config.hash(),
        });
        Ok(self.store.write_to(w, meta)?)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (stored, meta) = ParamStore::read_from(r)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("classifier") {
            return Err(Error::Config("checkpoint does not hold a classifier".into()));
        }
        let config: ClassifierConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format(format!("classifier config: {e}")))?;
        let mut model = Classifier::new(config, 0)?;
        let copied = model.store.copy_values_from(&stored, "")?;
        if copied != model.store.len() || stored.len() != model.store.len() {
            return Err(Error::Format("classifier checkpoint does not match its config".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Row-wise softmax probabilities.
pub fn softmax(logits: &Tensor) -> Tensor {
    softmax_rows(logits)
}

/// Rank of `label` in a row: how many classes beat it, where equal logits
/// of lower class index count as beating it.
fn rank_of(row: &[f64], label: usize) -> usize {
    let target = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count()
}

/// Percentage of rows whose label is among the `k` largest logits.
pub fn top_k_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> f64 {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(b, labels.len(), "one label per row");
    if b == 0 {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| rank_of(&logits.data()[i * c..(i + 1) * c], l) < k)
        .count();
    100.0 * hits as f64 / b as f64
}
