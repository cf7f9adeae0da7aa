//! Synthetic texture dataset: four oriented-pattern classes with random
//! colors, period, phase, contrast and sensor noise.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::Split;
use crate::Result;

pub const TEXTURE_CLASSES: [&str; 4] = ["checker", "rings", "stripes_h", "stripes_v"];

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug)]
pub struct FixtureSpec {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            train_per_class: 200,
            val_per_class: 50,
            test_per_class: 0,
            size: 64,
            seed: 0,
        }
    }
}

/// Pattern value in `[-1, 1]` at pixel `(x, y)`.
fn pattern(class: usize, x: f64, y: f64, p: &TextureParams) -> f64 {
    let (s, c) = p.angle.sin_cos();
    let u = c * x + s * y;
    let v = -s * x + c * y;
    let w = 2.0 * PI / p.period;
    match TEXTURE_CLASSES[class] {
        "checker" => ((w * u + p.phase).sin() * (w * v + p.phase2).sin()).signum(),
        "rings" => {
            let r = ((x - p.cx).powi(2) + (y - p.cy).powi(2)).sqrt();
            (w * r + p.phase).sin()
        }
        "stripes_h" => (w * v + p.phase).sin(),
        "stripes_v" => (w * u + p.phase).sin(),
        _ => unreachable!(),
    }
}

struct TextureParams {
    angle: f64,
    period: f64,
    phase: f64,
    phase2: f64,
    cx: f64,
    cy: f64,
}

/// One `size×size` texture of class `class` (an index into
/// [`TEXTURE_CLASSES`]).
pub fn texture_image<R: Rng + ?Sized>(class: usize, size: usize, rng: &mut R) -> RgbImage {
    let n = size as f64;
    let p = TextureParams {
        angle: rng.random_range(-15.0f64..15.0).to_radians(),
        period: rng.random_range(12.0..32.0),
        phase: rng.random_range(0.0..2.0 * PI),
        phase2: rng.random_range(0.0..2.0 * PI),
        cx: rng.random_range(-0.5 * n..1.5 * n),
        cy: rng.random_range(-0.5 * n..1.5 * n),
    };
    let contrast = rng.random_range(0.3..0.8);
    let mid: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-6);
    let noise = Normal::new(0.0, 0.03).unwrap();
    let mut img = RgbImage::new(size as u32, size as u32);
    for yy in 0..size {
        for xx in 0..size {
            let t = pattern(class, xx as f64, yy as f64, &p);
            let px: [u8; 3] = std::array::from_fn(|ch| {
                let v = mid[ch] + 0.5 * contrast * t * dir[ch] / norm + noise.sample(rng);
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(xx as u32, yy as u32, Rgb(px));
        }
    }
    img
}

/// Write the fixture as `dir/<class>/<class>_NNNN.png` plus a manifest
/// assigning splits. Returns the manifest path.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<PathBuf> {
    let mut manifest = String::new();
    let per_class = spec.train_per_class + spec.val_per_class + spec.test_per_class;
    for (c, name) in TEXTURE_CLASSES.iter().enumerate() {
        std::fs::create_dir_all(dir.join(name))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(c as u64);
        for i in 0..per_class {
            let rel = format!("{name}/{name}_{i:04}.png");
            texture_image(c, spec.size, &mut rng).save(dir.join(&rel))?;
            let split = if i < spec.train_per_class {
                Split::Train
            } else if i < spec.train_per_class + spec.val_per_class {
                Split::Val
            } else {
                Split::Test
            };
            manifest.push_str(&format!("{rel}\t{name}\t{split}\n"));
        }
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, manifest)?;
    Ok(path)
}
