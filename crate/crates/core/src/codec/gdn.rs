//! Generalized divisive normalization, `x / sqrt(β + γ·x²)` per pixel, and
//! its inverse `x · sqrt(β + γ·x²)`.

use latentvision_nn::{Graph, ParamId, ParamRole, ParamStore, Tensor, Var};

/// Lower bound added to `β`.
const BETA_MIN: f64 = 1e-6;
/// Keeps `γ` entries that start at zero off the flat spot of `γ = γ_p²`.
const GAMMA_PEDESTAL: f64 = 1.0 / (1u64 << 36) as f64;

#[derive(Clone, Debug)]
pub struct Gdn {
    pub beta: ParamId,
    pub gamma: ParamId,
    pub inverse: bool,
}

impl Gdn {
    /// `β = 1`, `γ = 0.1·I`.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, inverse: bool) -> Self {
        let beta = store.add(
            format!("{name}.beta"),
            Tensor::full(&[channels], (1.0 - BETA_MIN).sqrt()),
            ParamRole::Trainable,
        );
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::from_fn(&[channels, channels, 1, 1], |i| {
                let diag = if i / channels == i % channels { 0.1 } else { 0.0 };
                (diag + GAMMA_PEDESTAL).sqrt()
            }),
            ParamRole::Trainable,
        );
        Gdn { beta, gamma, inverse }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let bp = g.param(store, self.beta);
        let b2 = g.square(bp);
        let beta = g.add_scalar(b2, BETA_MIN);
        let gp = g.param(store, self.gamma);
        let gamma = g.square(gp);
        let x2 = g.square(x);
        let norm = g.conv2d(x2, gamma, Some(beta), 1, 0);
        let scale = g.sqrt(norm);
        if self.inverse {
            g.mul(x, scale)
        } else {
            g.div(x, scale)
        }
    }
}
