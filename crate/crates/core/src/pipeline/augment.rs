//! Latent-space augmentation: resize to 32×32, crop 28×28, optional
//! horizontal flip. Every step is linear in the input, so the whole
//! transform is one sparse map applied identically to `ŷ` and `σ̂`.

use latentvision_nn::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::INPUT_SIZE;
use crate::{Error, Result};

pub const RESIZE_TO: usize = 32;
pub const MAX_OFFSET: usize = RESIZE_TO - INPUT_SIZE;
pub const CENTER_OFFSET: usize = MAX_OFFSET / 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    /// Exists so tests can track single cells through the transform.
    Nearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub crop_y: usize,
    pub crop_x: usize,
    pub flip: bool,
}

impl AugmentParams {
    pub const EVAL: AugmentParams = AugmentParams {
        crop_y: CENTER_OFFSET,
        crop_x: CENTER_OFFSET,
        flip: false,
    };

    /// Draws crop row, crop column, then the flip, in that order.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let crop_y = rng.random_range(0..=MAX_OFFSET);
        let crop_x = rng.random_range(0..=MAX_OFFSET);
        let flip = rng.random_bool(0.5);
        AugmentParams { crop_y, crop_x, flip }
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R, train: bool) -> Self {
        if train {
            Self::sample(rng)
        } else {
            Self::EVAL
        }
    }
}

/// Source taps along one axis for a resize of `n_in` to `n_out` cells
/// (half-pixel centers, edges clamped).
fn axis_taps(n_in: usize, n_out: usize, interp: Interpolation) -> Vec<[(usize, f64); 2]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            match interp {
                Interpolation::Nearest => {
                    let i = (((o as f64 + 0.5) * scale).floor() as usize).min(n_in - 1);
                    [(i, 1.0), (i, 0.0)]
                }
                Interpolation::Bilinear => {
                    let src = src.max(0.0);
                    let i0 = (src.floor() as usize).min(n_in - 1);
                    let i1 = (i0 + 1).min(n_in - 1);
                    let t = src - i0 as f64;
                    [(i0, 1.0 - t), (i1, t)]
                }
            }
        })
        .collect()
}

/// The augmentation as a sparse linear map from an `h×w` plane to a
/// 28×28 plane.
#[derive(Clone, Debug)]
pub struct SpatialMap {
    in_h: usize,
    in_w: usize,
    /// Four taps per output cell, row-major over the output.
    taps: Vec<[(usize, f64); 4]>,
}

impl SpatialMap {
    pub fn new(in_h: usize, in_w: usize, params: AugmentParams, interp: Interpolation) -> Self {
        assert!(in_h > 0 && in_w > 0, "empty plane");
        assert!(
            params.crop_y <= MAX_OFFSET && params.crop_x <= MAX_OFFSET,
            "crop offset out of range"
        );
        let ty = axis_taps(in_h, RESIZE_TO, interp);
        let tx = axis_taps(in_w, RESIZE_TO, interp);
        let mut taps = Vec::with_capacity(INPUT_SIZE * INPUT_SIZE);
        for oy in 0..INPUT_SIZE {
            let ry = &ty[oy + params.crop_y];
            for ox in 0..INPUT_SIZE {
                let cx = if params.flip { INPUT_SIZE - 1 - ox } else { ox };
                let rx = &tx[cx + params.crop_x];
                let mut cell = [(0, 0.0); 4];
                for (a, &(iy, wy)) in ry.iter().enumerate() {
                    for (b, &(ix, wx)) in rx.iter().enumerate() {
                        cell[a * 2 + b] = (iy * in_w + ix, wy * wx);
                    }
                }
                taps.push(cell);
            }
        }
        SpatialMap { in_h, in_w, taps }
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    /// Map `planes` consecutive input planes into `out`.
    fn forward_into(&self, input: &[f64], out: &mut [f64]) {
        let (pin, pout) = (self.in_h * self.in_w, INPUT_SIZE * INPUT_SIZE);
        for (src, dst) in input.chunks_exact(pin).zip(out.chunks_exact_mut(pout)) {
            for (o, cell) in dst.iter_mut().zip(&self.taps) {
                *o = cell.iter().map(|&(i, w)| w * src[i]).sum();
            }
        }
    }

    /// Transpose of [`forward_into`](Self::forward_into), accumulating.
    fn backward_into(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let (pin, pout) = (self.in_h * self.in_w, INPUT_SIZE * INPUT_SIZE);
        for (gout, gin) in grad_out.chunks_exact(pout).zip(grad_in.chunks_exact_mut(pin)) {
            for (&go, cell) in gout.iter().zip(&self.taps) {
                for &(i, w) in cell {
                    gin[i] += w * go;
                }
            }
        }
    }

    /// `[C, h, w]` → `[C, 28, 28]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.in_h || s[2] != self.in_w {
            return Err(Error::Shape(format!(
                "augment expects [C, {}, {}], got {s:?}",
                self.in_h, self.in_w
            )));
        }
        let mut out = vec![0.0; s[0] * INPUT_SIZE * INPUT_SIZE];
        self.forward_into(x.data(), &mut out);
        Ok(Tensor::from_vec(&[s[0], INPUT_SIZE, INPUT_SIZE], out))
    }
}

/// Apply `maps[b]` to sample `b` of a `[B, C, h, w]` graph value.
pub fn spatial_map_op(g: &mut Graph, x: Var, maps: &[SpatialMap]) -> Var {
    let (b, c, h, w) = g.value(x).dims4();
    assert_eq!(maps.len(), b, "one map per sample");
    for m in maps {
        assert_eq!(m.input_size(), (h, w), "map built for another plane size");
    }
    let (pin, pout) = (c * h * w, c * INPUT_SIZE * INPUT_SIZE);
    let mut out = vec![0.0; b * pout];
    for ((src, dst), m) in g
        .value(x)
        .data()
        .chunks_exact(pin)
        .zip(out.chunks_exact_mut(pout))
        .zip(maps)
    {
        m.forward_into(src, dst);
    }
    let value = Tensor::from_vec(&[b, c, INPUT_SIZE, INPUT_SIZE], out);
    let maps = maps.to_vec();
    g.apply(
        &[x],
        value,
        Box::new(move |ctx| {
            let mut gin = vec![0.0; b * pin];
            for ((go, gi), m) in ctx
                .grad
                .data()
                .chunks_exact(pout)
                .zip(gin.chunks_exact_mut(pin))
                .zip(&maps)
            {
                m.backward_into(go, gi);
            }
            vec![Some(Tensor::from_vec(&[b, c, h, w], gin))]
        }),
    )
}

/// Resize both tensors to 32×32 and apply the same crop and flip to each.
/// Training draws a random crop and flip from `rng`; evaluation takes the
/// center crop and does not touch `rng`.
pub fn augment<R: Rng + ?Sized>(
    y_hat: &Tensor,
    sigma_hat: &Tensor,
    rng: &mut R,
    train: bool,
) -> Result<(Tensor, Tensor)> {
    augment_with(
        y_hat,
        sigma_hat,
        AugmentParams::draw(rng, train),
        Interpolation::Bilinear,
    )
}

pub fn augment_with(
    y_hat: &Tensor,
    sigma_hat: &Tensor,
    params: AugmentParams,
    interp: Interpolation,
) -> Result<(Tensor, Tensor)> {
    if y_hat.shape() != sigma_hat.shape() || y_hat.rank() != 3 {
        return Err(Error::Shape(format!(
            "ŷ {:?} and σ̂ {:?} must share a [C, h, w] shape",
            y_hat.shape(),
            sigma_hat.shape()
        )));
    }
    let map = SpatialMap::new(y_hat.shape()[1], y_hat.shape()[2], params, interp);
    Ok((map.apply(y_hat)?, map.apply(sigma_hat)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bilinear_matches_half_pixel_reference() {
        // 2 → 4 with half-pixel centers: sources -0.25, 0.25, 0.75, 1.25.
        let taps = axis_taps(2, 4, Interpolation::Bilinear);
        let x = [1.0, 3.0];
        let got: Vec<f64> = taps.iter().map(|t| t.iter().map(|&(i, w)| w * x[i]).sum()).collect();
        assert_eq!(got, vec![1.0, 1.5, 2.5, 3.0]);
        // Identity size is the identity.
        for (o, t) in axis_taps(5, 5, Interpolation::Bilinear).iter().enumerate() {
            assert_eq!(t[0], (o, 1.0));
        }
    }

    #[test]
    fn output_is_28_by_28_and_constants_survive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (h, w) in [(4, 4), (2, 7), (40, 33)] {
            let y = Tensor::full(&[3, h, w], 2.5);
            let (a, b) = augment(&y, &y, &mut rng, true).unwrap();
            assert_eq!(a.shape(), &[3, 28, 28]);
            assert!(a.data().iter().chain(b.data()).all(|&v| (v - 2.5).abs() < 1e-12));
        }
        let bad = Tensor::zeros(&[3, 4, 5]);
        assert!(augment(&Tensor::zeros(&[3, 4, 4]), &bad, &mut rng, false).is_err());
    }

    #[test]
    fn markers_stay_co_located() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (i, j) = (rng.random_range(0..8), rng.random_range(0..8));
            let mut y = Tensor::zeros(&[2, 8, 8]);
            let mut s = Tensor::full(&[2, 8, 8], 0.11);
            y.data_mut()[i * 8 + j] = 7.0;
            s.data_mut()[i * 8 + j] = 9.0;
            let p = AugmentParams::sample(&mut rng);
            let (ya, sa) = augment_with(&y, &s, p, Interpolation::Nearest).unwrap();
            let ym: Vec<usize> = (0..784).filter(|&k| ya.data()[k] == 7.0).collect();
            let sm: Vec<usize> = (0..784).filter(|&k| sa.data()[k] == 9.0).collect();
            assert_eq!(ym, sm);
        }
    }

    #[test]
    fn eval_mode_is_fixed_and_flip_mirrors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Tensor::from_fn(&[1, 6, 6], |i| i as f64);
        let (a, _) = augment(&y, &y, &mut rng, false).unwrap();
        let (b, _) = augment(&y, &y, &mut ChaCha8Rng::seed_from_u64(99), false).unwrap();
        assert_eq!(a, b);
        let p = AugmentParams {
            flip: true,
            ..AugmentParams::EVAL
        };
        let (f, _) = augment_with(&y, &y, p, Interpolation::Bilinear).unwrap();
        for r in 0..28 {
            for c in 0..28 {
                assert_eq!(f.data()[r * 28 + c], a.data()[r * 28 + 27 - c]);
            }
        }
    }

    #[test]
    fn flip_rate_is_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flips = (0..10_000).filter(|_| AugmentParams::sample(&mut rng).flip).count();
        assert!((flips as f64 / 1e4 - 0.5).abs() <= 0.02, "{flips}");
    }

    #[test]
    fn graph_op_matches_apply_and_backward_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[2, 3, 5, 4], |_| rng.random_range(-1.0..1.0));
        let maps: Vec<SpatialMap> = (0..2)
            .map(|_| SpatialMap::new(5, 4, AugmentParams::sample(&mut rng), Interpolation::Bilinear))
            .collect();
        let r = Tensor::from_fn(&[2, 3, 28, 28], |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let y = spatial_map_op(&mut g, xv, &maps);
        for b in 0..2 {
            let xb = Tensor::from_vec(&[3, 5, 4], x.sample(b).to_vec());
            assert_eq!(maps[b].apply(&xb).unwrap().data(), g.value(y).sample(b));
        }
        let rv = g.constant(r.clone());
        let prod = g.mul(y, rv);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        // <A x, r> = <x, Aᵀ r> for the linear map.
        let lhs: f64 = g.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = grads
            .get(xv)
            .unwrap()
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
