//! Zero-mean Gaussian conditional: probability of a rounded value and the
//! differentiable bit count used as the rate of `ŷ`.

use std::f64::consts::{LN_2, SQRT_2};

use latentvision_nn::{par, Graph, Tensor, Var};

/// Smallest scale the hyper-synthesis can emit.
pub const SIGMA_MIN: f64 = 0.11;
/// Floor applied to every per-element probability of the rate model.
pub const P_MIN: f64 = 1.0 / 65536.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `Φ((k+½)/σ) − Φ((k−½)/σ)`, evaluated through `|k|` on the lower tail so
/// that it is exactly even in `k` and keeps relative precision far out.
pub fn gaussian_mass(k: f64, sigma: f64) -> f64 {
    let a = k.abs();
    std_normal_cdf((0.5 - a) / sigma) - std_normal_cdf((-0.5 - a) / sigma)
}

/// `−log2 max(P(k | σ), p_min)`.
pub fn gaussian_bits(k: f64, sigma: f64) -> f64 {
    -gaussian_mass(k, sigma).max(P_MIN).log2()
}

/// `ln Φ(x)`, accurate far into the lower tail.
pub fn log_std_normal_cdf(x: f64) -> f64 {
    if x > -30.0 {
        return std_normal_cdf(x).ln();
    }
    // Asymptotic expansion of the Mills ratio.
    let r = 1.0 / (x * x);
    -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + (1.0 - r + 3.0 * r * r - 15.0 * r * r * r).ln()
}

fn log_std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI.ln() - 0.5 * x * x
}

/// `ln P(k | σ)` without a floor.
pub fn gaussian_log_mass(k: f64, sigma: f64) -> f64 {
    let a = k.abs();
    if a <= 0.5 {
        return gaussian_mass(k, sigma).ln();
    }
    let (lu, ll) = (
        log_std_normal_cdf((0.5 - a) / sigma),
        log_std_normal_cdf((-0.5 - a) / sigma),
    );
    lu + (-(ll - lu).exp()).ln_1p()
}

/// Unfloored bits and their partial derivatives with respect to `y` and
/// `σ`. The cost keeps growing (and keeps a gradient) far into the tails,
/// which is what pushes outliers back inside the coder's support.
fn bits_and_grad(y: f64, sigma: f64) -> (f64, f64, f64) {
    let a = y.abs();
    let u = (0.5 - a) / sigma;
    let l = (-0.5 - a) / sigma;
    let lp = gaussian_log_mass(y, sigma);
    // φ(u)/p and φ(l)/p, formed in log space.
    let eu = (log_std_normal_pdf(u) - lp).exp();
    let el = (log_std_normal_pdf(l) - lp).exp();
    let sign = if y > 0.0 {
        1.0
    } else if y < 0.0 {
        -1.0
    } else {
        0.0
    };
    let k = 1.0 / (sigma * LN_2);
    (-lp / LN_2, k * (eu - el) * sign, k * (u * eu - l * el))
}

/// Unfloored training-time bits of one element.
pub fn gaussian_bits_unfloored(y: f64, sigma: f64) -> f64 {
    -gaussian_log_mass(y, sigma) / LN_2
}

/// Per-sample total bits of `y` under `N(0, σ²)` discretized to unit bins,
/// without the probability floor (the training rate). `y` and `sigma`
/// share a `[B, …]` shape; the result has shape `[B]`.
pub fn gaussian_bits_op(g: &mut Graph, y: Var, sigma: Var) -> Var {
    let shape = g.shape(y).to_vec();
    assert_eq!(shape, g.shape(sigma), "y and sigma shapes differ");
    let b = shape[0];
    let per = g.value(y).numel() / b.max(1);
    let (yv, sv) = (g.value(y), g.value(sigma));
    let bits = par::map_range(b, |i| {
        let ys = &yv.data()[i * per..(i + 1) * per];
        let ss = &sv.data()[i * per..(i + 1) * per];
        ys.iter()
            .zip(ss)
            .map(|(&y, &s)| gaussian_bits_unfloored(y, s))
            .sum::<f64>()
    });
    g.apply(
        &[y, sigma],
        Tensor::from_vec(&[b], bits),
        Box::new(move |ctx| {
            let (yv, sv) = (ctx.inputs[0], ctx.inputs[1]);
            let go = ctx.grad.data();
            let grads: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(b, |i| {
                let range = i * per..(i + 1) * per;
                yv.data()[range.clone()]
                    .iter()
                    .zip(&sv.data()[range])
                    .map(|(&y, &s)| {
                        let (_, gy, gs) = bits_and_grad(y, s);
                        (go[i] * gy, go[i] * gs)
                    })
                    .unzip()
            });
            let (mut dy, mut ds) = (Vec::with_capacity(b * per), Vec::with_capacity(b * per));
            for (gy, gs) in grads {
                dy.extend(gy);
                ds.extend(gs);
            }
            vec![
                ctx.needs[0].then(|| Tensor::from_vec(yv.shape(), dy)),
                ctx.needs[1].then(|| Tensor::from_vec(sv.shape(), ds)),
            ]
        }),
    )
}
