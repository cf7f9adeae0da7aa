//! Parameterized layers backed by a [`ParamStore`].

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::Tensor;

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)` for weights and biases.
    UniformFanIn,
    /// `N(0, 2/fan_out)` for weights, zero biases.
    HeFanOut,
    /// Every weight set to the given constant.
    Constant(f64),
}

fn init_tensor<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::UniformFanIn => {
            let b = 1.0 / (fan_in as f64).sqrt();
            let d = Uniform::new_inclusive(-b, b).unwrap();
            Tensor::from_fn(shape, |_| d.sample(rng))
        }
        Init::HeFanOut => {
            let d = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).unwrap();
            Tensor::from_fn(shape, |_| d.sample(rng))
        }
        Init::Constant(c) => Tensor::full(shape, c),
    }
}

fn init_bias<R: Rng + ?Sized>(n: usize, fan_in: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::UniformFanIn => {
            let b = 1.0 / (fan_in as f64).sqrt();
            let d = Uniform::new_inclusive(-b, b).unwrap();
            Tensor::from_fn(&[n], |_| d.sample(rng))
        }
        _ => Tensor::zeros(&[n]),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * k * k;
        let fan_out = c_out * k * k;
        let w = init_tensor(&[c_out, c_in, k, k], fan_in, fan_out, init, rng);
        let weight = store.add(format!("{name}.weight"), w, ParamRole::Trainable);
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                init_bias(c_out, fan_in, init, rng),
                ParamRole::Trainable,
            )
        });
        Conv2d {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed convolution producing exactly `stride ×` the input size.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        // the forward pass reads c_out·k·k values per input channel
        let fan_in = c_out * k * k;
        let w = init_tensor(&[c_in, c_out, k, k], fan_in, c_in * k * k, init, rng);
        let weight = store.add(format!("{name}.weight"), w, ParamRole::Trainable);
        let bias = store.add(
            format!("{name}.bias"),
            init_bias(c_out, fan_in, init, rng),
            ParamRole::Trainable,
        );
        let pad = k / 2;
        ConvTranspose2d {
            weight,
            bias,
            stride,
            pad,
            out_pad: stride + 2 * pad - k,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad, self.out_pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, gamma_init: f64) -> Self {
        BatchNorm {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(&[channels], gamma_init),
                ParamRole::Trainable,
            ),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamRole::Trainable),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamRole::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                ParamRole::Buffer,
            ),
            momentum: 0.1,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let rm = store.value(self.running_mean);
        let rv = store.value(self.running_var);
        let (y, stats) = g.batch_norm(x, gamma, beta, rm, rv);
        if let Some(stats) = stats {
            let m = self.momentum;
            let mean = rm.zip_map(&stats.mean, |r, b| (1.0 - m) * r + m * b);
            let var = rv.zip_map(&stats.var_unbiased, |r, b| (1.0 - m) * r + m * b);
            g.record_buffer_update(store.uid(), self.running_mean, mean);
            g.record_buffer_update(store.uid(), self.running_var, var);
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                init_tensor(&[d_out, d_in], d_in, d_out, Init::UniformFanIn, rng),
                ParamRole::Trainable,
            ),
            bias: store.add(
                format!("{name}.bias"),
                init_bias(d_out, d_in, Init::UniformFanIn, rng),
                ParamRole::Trainable,
            ),
        }
    }

    pub fn out_features(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batchnorm_train_normalizes_and_records_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, 1.0);
        let mut g = Graph::training();
        let x = g.constant(Tensor::from_fn(&[4, 2, 3, 3], |i| (i % 7) as f64));
        let y = bn.forward(&mut g, &store, x);
        let yv = g.value(y);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| yv.sample(b)[ch * 9..(ch + 1) * 9].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
        }
        let ups = g.take_buffer_updates();
        assert_eq!(ups.len(), 2);
        store.apply_buffer_updates(&ups);
        assert!(store.value(bn.running_mean).data()[0] > 0.0);
    }

    #[test]
    fn transpose_layer_doubles_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let l = ConvTranspose2d::new(&mut store, "up", 3, 2, 5, 2, Init::UniformFanIn, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 5]));
        let y = l.forward(&mut g, &store, x);
        assert_eq!(g.shape(y), &[1, 2, 8, 10]);
        let l3 = ConvTranspose2d::new(&mut store, "up3", 3, 2, 3, 1, Init::UniformFanIn, &mut rng);
        let y3 = l3.forward(&mut g, &store, x);
        assert_eq!(g.shape(y3), &[1, 2, 4, 5]);
    }
}
