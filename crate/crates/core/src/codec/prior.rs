//! Learned factorized density for the hyper-latent `z`.
//!
//! Each channel owns a small monotone network `x ↦ logit F(x)` built from
//! softplus-positive matrices and `tanh` gates; the probability of the
//! unit bin around `x` is `F(x+½) − F(x−½)`.

use std::f64::consts::LN_2;

use latentvision_nn::{par, Graph, ParamId, ParamRole, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::gaussian::P_MIN;
use crate::entropy::{PmfTable, StreamError};

/// Widths of the hidden layers of every per-channel density network.
pub const PRIOR_FILTERS: [usize; 3] = [3, 3, 3];
const DIMS: [usize; 5] = [1, 3, 3, 3, 1];
const LAYERS: usize = 4;

/// Tail mass left outside a tabulated support on each side.
const TAIL_MASS: f64 = 1e-9;
/// Largest half-width searched when tabulating.
const MAX_HALF_SUPPORT: i32 = 4096;

#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub channels: usize,
    matrices: [ParamId; LAYERS],
    biases: [ParamId; LAYERS],
    factors: [ParamId; LAYERS - 1],
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Density network of one channel with its reparameterizations applied.
struct ChannelNet {
    /// softplus(H_i), row-major `[out][in]`
    s: [[f64; 9]; LAYERS],
    /// sigmoid(H_i), the derivative of softplus
    ds: [[f64; 9]; LAYERS],
    b: [[f64; 3]; LAYERS],
    /// tanh(a_i)
    t: [[f64; 3]; LAYERS - 1],
}

#[derive(Default, Clone, Copy)]
struct Trace {
    v: [[f64; 3]; LAYERS],
    u: [[f64; 3]; LAYERS],
}

/// Gradients of one channel with respect to the raw parameters.
#[derive(Default, Clone)]
struct ChannelGrads {
    h: [[f64; 9]; LAYERS],
    b: [[f64; 3]; LAYERS],
    a: [[f64; 3]; LAYERS - 1],
}

impl ChannelNet {
    fn new(params: &[&Tensor], c: usize) -> Self {
        let mut net = ChannelNet {
            s: [[0.0; 9]; LAYERS],
            ds: [[0.0; 9]; LAYERS],
            b: [[0.0; 3]; LAYERS],
            t: [[0.0; 3]; LAYERS - 1],
        };
        for i in 0..LAYERS {
            let (o, n) = (DIMS[i + 1], DIMS[i]);
            let h = &params[i].data()[c * o * n..(c + 1) * o * n];
            for (j, &hv) in h.iter().enumerate() {
                net.s[i][j] = softplus(hv);
                net.ds[i][j] = sigmoid(hv);
            }
            net.b[i][..o].copy_from_slice(&params[LAYERS + i].data()[c * o..(c + 1) * o]);
            if i < LAYERS - 1 {
                let a = &params[2 * LAYERS + i].data()[c * o..(c + 1) * o];
                for (j, &av) in a.iter().enumerate() {
                    net.t[i][j] = av.tanh();
                }
            }
        }
        net
    }

    fn logit(&self, x: f64, tr: &mut Trace) -> f64 {
        let mut v = [x, 0.0, 0.0];
        for i in 0..LAYERS {
            let (o, n) = (DIMS[i + 1], DIMS[i]);
            tr.v[i] = v;
            let mut u = [0.0; 3];
            for r in 0..o {
                let mut acc = self.b[i][r];
                for k in 0..n {
                    acc += self.s[i][r * n + k] * v[k];
                }
                u[r] = acc;
            }
            tr.u[i] = u;
            if i < LAYERS - 1 {
                for r in 0..o {
                    v[r] = u[r] + self.t[i][r] * u[r].tanh();
                }
            } else {
                v = u;
            }
        }
        v[0]
    }

    /// Back-propagate `gout = ∂L/∂logit`; returns `∂L/∂x`.
    fn backprop(&self, tr: &Trace, gout: f64, g: &mut ChannelGrads) -> f64 {
        let mut gv = [gout, 0.0, 0.0];
        for i in (0..LAYERS).rev() {
            let (o, n) = (DIMS[i + 1], DIMS[i]);
            let mut gu = [0.0; 3];
            for r in 0..o {
                if i < LAYERS - 1 {
                    let th = tr.u[i][r].tanh();
                    gu[r] = gv[r] * (1.0 + self.t[i][r] * (1.0 - th * th));
                    let t = self.t[i][r];
                    g.a[i][r] += gv[r] * th * (1.0 - t * t);
                } else {
                    gu[r] = gv[r];
                }
                g.b[i][r] += gu[r];
            }
            let mut gin = [0.0; 3];
            for r in 0..o {
                for k in 0..n {
                    let j = r * n + k;
                    g.h[i][j] += gu[r] * tr.v[i][k] * self.ds[i][j];
                    gin[k] += self.s[i][j] * gu[r];
                }
            }
            gv = gin;
        }
        gv[0]
    }

    /// Unfloored probability of the unit bin centred on `x`, with the
    /// pieces needed for its gradient.
    fn bin(&self, x: f64) -> Bin {
        let mut lo = Trace::default();
        let mut hi = Trace::default();
        let l = self.logit(x - 0.5, &mut lo);
        let u = self.logit(x + 0.5, &mut hi);
        // evaluate on whichever side keeps the sigmoids away from 1
        let s = if l + u > 0.0 { -1.0 } else { 1.0 };
        let (su, sl) = (sigmoid(s * u), sigmoid(s * l));
        Bin {
            p: (su - sl).abs(),
            s,
            su,
            sl,
            lo,
            hi,
        }
    }

    fn mass(&self, x: f64) -> f64 {
        self.bin(x).p
    }

    fn cdf_logit(&self, x: f64) -> f64 {
        self.logit(x, &mut Trace::default())
    }

    /// Bits of the bin at `x`; accumulates parameter gradients scaled by
    /// `gbits` and returns `∂bits/∂x · gbits`.
    fn bits_backward(&self, x: f64, gbits: f64, g: &mut ChannelGrads) -> f64 {
        let bin = self.bin(x);
        // Flat below the floor, but let descent raise the mass back up.
        if bin.p < P_MIN && gbits <= 0.0 {
            return 0.0;
        }
        let dbits_dp = -1.0 / (bin.p.max(P_MIN) * LN_2);
        let sg = if bin.su >= bin.sl { 1.0 } else { -1.0 };
        let gu = gbits * dbits_dp * sg * bin.s * bin.su * (1.0 - bin.su);
        let gl = -gbits * dbits_dp * sg * bin.s * bin.sl * (1.0 - bin.sl);
        self.backprop(&bin.hi, gu, g) + self.backprop(&bin.lo, gl, g)
    }
}

struct Bin {
    p: f64,
    s: f64,
    su: f64,
    sl: f64,
    lo: Trace,
    hi: Trace,
}

fn floored_bits(p: f64) -> f64 {
    -p.max(P_MIN).log2()
}

impl FactorizedPrior {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let scale = init_scale.powf(1.0 / LAYERS as f64);
        let bias_dist = Uniform::new(-0.5, 0.5).unwrap();
        let matrices = std::array::from_fn(|i| {
            let init = (1.0 / scale / DIMS[i + 1] as f64).exp_m1().ln();
            store.add(
                format!("{name}.matrix{i}"),
                Tensor::full(&[channels, DIMS[i + 1], DIMS[i]], init),
                ParamRole::Trainable,
            )
        });
        let biases = std::array::from_fn(|i| {
            store.add(
                format!("{name}.bias{i}"),
                Tensor::from_fn(&[channels, DIMS[i + 1]], |_| bias_dist.sample(rng)),
                ParamRole::Trainable,
            )
        });
        let factors = std::array::from_fn(|i| {
            store.add(
                format!("{name}.factor{i}"),
                Tensor::zeros(&[channels, DIMS[i + 1]]),
                ParamRole::Trainable,
            )
        });
        FactorizedPrior {
            channels,
            matrices,
            biases,
            factors,
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.matrices
            .iter()
            .chain(&self.biases)
            .chain(&self.factors)
            .copied()
            .collect()
    }

    fn nets(&self, store: &ParamStore) -> Vec<ChannelNet> {
        let params: Vec<&Tensor> = self.param_ids().into_iter().map(|id| store.value(id)).collect();
        (0..self.channels).map(|c| ChannelNet::new(&params, c)).collect()
    }

    /// Unfloored probability of the integer bin at `x` in channel `c`.
    pub fn mass(&self, store: &ParamStore, c: usize, x: f64) -> f64 {
        let params: Vec<&Tensor> = self.param_ids().into_iter().map(|id| store.value(id)).collect();
        ChannelNet::new(&params, c).mass(x)
    }

    /// Total floored bits of a `[C, h, w]` (or `[B, C, h, w]`) tensor.
    pub fn bits(&self, store: &ParamStore, z: &Tensor) -> f64 {
        let nets = self.nets(store);
        let c = self.channels;
        let plane = z.numel() / c / batch_of(z.shape(), c);
        z.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| floored_bits(nets[(i / plane) % c].mass(v)))
            .sum()
    }

    /// Per-sample bits of `z: [B, C, h, w]`, differentiable in `z` and the
    /// density parameters. Output shape `[B]`.
    pub fn bits_op(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Var {
        let shape = g.shape(z).to_vec();
        assert_eq!(shape.len(), 4, "prior expects [B, C, h, w]");
        let (b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        assert_eq!(c, self.channels, "prior channel count");
        let mut inputs = vec![z];
        inputs.extend(self.param_ids().into_iter().map(|id| g.param(store, id)));

        let nets = self.nets(store);
        let zv = g.value(z);
        let bits = par::map_range(b, |i| {
            let zs = zv.sample(i);
            (0..c)
                .map(|ch| {
                    zs[ch * plane..(ch + 1) * plane]
                        .iter()
                        .map(|&v| floored_bits(nets[ch].mass(v)))
                        .sum::<f64>()
                })
                .sum()
        });

        g.apply(
            &inputs,
            Tensor::from_vec(&[b], bits),
            Box::new(move |ctx| {
                let zv = ctx.inputs[0];
                let params = &ctx.inputs[1..];
                let go = ctx.grad.data();
                // one task per channel: parameter gradients are per channel,
                // and the element loop inside a task runs in a fixed order
                let per_channel: Vec<(ChannelGrads, Vec<f64>)> = par::map_range(c, |ch| {
                    let net = ChannelNet::new(params, ch);
                    let mut grads = ChannelGrads::default();
                    let mut dz = Vec::with_capacity(b * plane);
                    for i in 0..b {
                        let zs = &zv.sample(i)[ch * plane..(ch + 1) * plane];
                        for &v in zs {
                            dz.push(net.bits_backward(v, go[i], &mut grads));
                        }
                    }
                    (grads, dz)
                });
                let mut out: Vec<Option<Tensor>> = Vec::with_capacity(ctx.inputs.len());
                out.push(ctx.needs[0].then(|| {
                    let mut dz = vec![0.0; zv.numel()];
                    for (ch, (_, g)) in per_channel.iter().enumerate() {
                        for i in 0..b {
                            let dst = i * c * plane + ch * plane;
                            dz[dst..dst + plane].copy_from_slice(&g[i * plane..(i + 1) * plane]);
                        }
                    }
                    Tensor::from_vec(zv.shape(), dz)
                }));
                for (k, p) in params.iter().enumerate() {
                    if !ctx.needs[k + 1] {
                        out.push(None);
                        continue;
                    }
                    let per = p.numel() / c;
                    let mut d = Vec::with_capacity(p.numel());
                    for (grads, _) in &per_channel {
                        let src: &[f64] = if k < LAYERS {
                            &grads.h[k][..per]
                        } else if k < 2 * LAYERS {
                            &grads.b[k - LAYERS][..per]
                        } else {
                            &grads.a[k - 2 * LAYERS][..per]
                        };
                        d.extend_from_slice(src);
                    }
                    out.push(Some(Tensor::from_vec(p.shape(), d)));
                }
                out
            }),
        )
    }

    /// One quantized pmf per channel over the integer support carrying all
    /// but `TAIL_MASS` of the density on either side.
    pub fn tabulate(&self, store: &ParamStore) -> Result<Vec<PmfTable>, StreamError> {
        let nets = self.nets(store);
        par::map_slice(&nets, |net| {
            let mut lo = 0i32;
            while lo > -MAX_HALF_SUPPORT && sigmoid(net.cdf_logit(lo as f64 - 0.5)) > TAIL_MASS {
                lo -= 1;
            }
            let mut hi = 0i32;
            while hi < MAX_HALF_SUPPORT && sigmoid(-net.cdf_logit(hi as f64 + 0.5)) > TAIL_MASS {
                hi += 1;
            }
            let probs: Vec<f64> = (lo..=hi).map(|k| net.mass(k as f64)).collect();
            PmfTable::from_probabilities(lo, &probs)
        })
        .into_iter()
        .collect()
    }
}

fn batch_of(shape: &[usize], channels: usize) -> usize {
    if shape.len() == 4 {
        shape[0]
    } else {
        debug_assert_eq!(shape[0], channels);
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use latentvision_nn::gradcheck::max_rel_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prior(channels: usize, seed: u64) -> (ParamStore, FactorizedPrior) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = FactorizedPrior::new(&mut store, "prior", channels, 10.0, &mut rng);
        (store, p)
    }

    #[test]
    fn cdf_is_monotone_and_masses_sum_to_one() {
        let (mut store, p) = prior(2, 1);
        // non-trivial gates
        let f0 = store.id("prior.factor0").unwrap();
        store.set_value(f0, Tensor::from_fn(&[2, 3], |i| i as f64 * 0.4 - 1.0));
        let nets = p.nets(&store);
        for net in &nets {
            let mut prev = f64::NEG_INFINITY;
            for k in -200..200 {
                let l = net.cdf_logit(k as f64 * 0.25);
                assert!(l > prev);
                prev = l;
            }
            let total: f64 = (-400..=400).map(|k| net.mass(k as f64)).sum();
            assert!((total - 1.0).abs() < 1e-9, "{total}");
        }
    }

    #[test]
    fn bits_op_gradients_match_finite_differences() {
        let (store, p) = prior(2, 2);
        let z = Tensor::from_fn(&[2, 2, 2, 2], |i| (i as f64 * 0.73).sin() * 3.0);
        let ids = p.param_ids();
        let eval = |z: &Tensor, store: &ParamStore| {
            let mut g = Graph::new();
            let zv = g.variable(z.clone());
            let bits = p.bits_op(&mut g, store, zv);
            let w = g.constant(Tensor::from_vec(&[2], vec![0.7, 1.3]));
            let prod = g.mul(bits, w);
            let loss = g.sum(prod);
            let grads = g.backward(loss);
            let gz = grads.get(zv).unwrap().clone();
            let gp = grads.for_store(store);
            (g.value(loss).item(), gz, gp)
        };
        let (_, gz, gp) = eval(&z, &store);
        let idx: Vec<usize> = (0..z.numel()).collect();
        let err = max_rel_error(&z, &gz, &idx, 1e-6, 1e-6, |zp| eval(zp, &store).0);
        assert!(err < 1e-5, "dz error {err}");
        for (id, grad) in gp {
            assert!(ids.contains(&id));
            let x = store.value(id).clone();
            let idx: Vec<usize> = (0..x.numel()).collect();
            let err = max_rel_error(&x, &grad, &idx, 1e-6, 1e-6, |xp| {
                let mut s = store.clone();
                s.set_value(id, xp.clone());
                eval(&z, &s).0
            });
            assert!(err < 1e-5, "{}: {err}", store.entry(id).name);
        }
    }

    #[test]
    fn tables_cover_the_bulk_and_regenerate_identically() {
        let (store, p) = prior(3, 3);
        let a = p.tabulate(&store).unwrap();
        let b = p.tabulate(&store).unwrap();
        assert_eq!(a, b);
        for t in &a {
            assert!(t.support_min() < 0 && t.support_max() > 0);
        }
    }
}
