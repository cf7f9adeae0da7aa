use crate::graph::{Graph, Var};
use crate::par;
use crate::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics of a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    /// Unbiased variance, as used for running estimates.
    pub var_unbiased: Tensor,
}

/// `(batch, channels, spatial)` view of a rank-2 or rank-4 tensor.
fn bcs(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [b, c] => (b, c, 1),
        [b, c, h, w] => (b, c, h * w),
        _ => panic!("batch_norm expects rank 2 or 4, got {shape:?}"),
    }
}

fn per_channel<F>(x: &Tensor, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut dyn Iterator<Item = (usize, f64)>) -> f64 + Sync + Send,
{
    let (b, c, s) = bcs(x.shape());
    let data = x.data();
    par::map_range(c, |ch| {
        let mut it = (0..b).flat_map(move |bi| {
            let off = (bi * c + ch) * s;
            (off..off + s).map(move |i| (i, data[i]))
        });
        f(ch, &mut it)
    })
}

impl Graph {
    /// Batch normalization over all axes except the channel axis.
    ///
    /// In training graphs the batch statistics normalize the input and are
    /// returned for the caller to fold into its running estimates; otherwise
    /// `running_mean`/`running_var` are used and `None` is returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> (Var, Option<BatchStats>) {
        let xv = self.value(x);
        let (b, c, s) = bcs(xv.shape());
        let n = (b * s) as f64;
        let (mean, var, stats) = if self.is_training() {
            let mean = per_channel(xv, |_, it| it.map(|(_, v)| v).sum::<f64>() / n);
            let var = per_channel(xv, |ch, it| it.map(|(_, v)| (v - mean[ch]).powi(2)).sum::<f64>() / n);
            let unbiased = var
                .iter()
                .map(|v| if n > 1.0 { v * n / (n - 1.0) } else { *v })
                .collect();
            let stats = BatchStats {
                mean: Tensor::from_vec(&[c], mean.clone()),
                var_unbiased: Tensor::from_vec(&[c], unbiased),
            };
            (mean, var, Some(stats))
        } else {
            (running_mean.data().to_vec(), running_var.data().to_vec(), None)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut out = xv.clone();
        {
            let od = out.data_mut();
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * s;
                    let (m, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                    for v in &mut od[off..off + s] {
                        *v = gg * (*v - m) * is + bb;
                    }
                }
            }
        }
        let batch_mode = stats.is_some();
        let var_node = self.apply(
            &[x, gamma, beta],
            out,
            Box::new(move |ctx| {
                let (x, gamma) = (ctx.inputs[0], ctx.inputs[1]);
                let grad = ctx.grad.data();
                let xd = x.data();
                let (b, c, s) = bcs(x.shape());
                let n = (b * s) as f64;
                // per-channel Σ dy and Σ dy·x̂
                let sums: Vec<(f64, f64)> = par::map_range(c, |ch| {
                    let (mut sd, mut sdx) = (0.0, 0.0);
                    for bi in 0..b {
                        let off = (bi * c + ch) * s;
                        for i in off..off + s {
                            let xh = (xd[i] - mean[ch]) * inv_std[ch];
                            sd += grad[i];
                            sdx += grad[i] * xh;
                        }
                    }
                    (sd, sdx)
                });
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![0.0; xd.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * s;
                            let gg = gamma.data()[ch];
                            let is = inv_std[ch];
                            let (sd, sdx) = sums[ch];
                            for i in off..off + s {
                                dx[i] = if batch_mode {
                                    let xh = (xd[i] - mean[ch]) * is;
                                    gg * is / n * (n * grad[i] - sd - xh * sdx)
                                } else {
                                    gg * is * grad[i]
                                };
                            }
                        }
                    }
                    Tensor::from_vec(x.shape(), dx)
                });
                let dgamma = ctx.needs[1].then(|| Tensor::from_vec(&[c], sums.iter().map(|s| s.1).collect()));
                let dbeta = ctx.needs[2].then(|| Tensor::from_vec(&[c], sums.iter().map(|s| s.0).collect()));
                vec![dx, dgamma, dbeta]
            }),
        );
        (var_node, stats)
    }
}
