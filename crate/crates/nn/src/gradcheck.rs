//! Central finite differences for checking analytic gradients.

use crate::Tensor;

/// Relative error used by the checks: `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` at element `idx` of `x` with step `h`.
pub fn central_difference(x: &Tensor, idx: usize, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    let mut xp = x.clone();
    xp.data_mut()[idx] += h;
    let mut xm = x.clone();
    xm.data_mut()[idx] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Worst relative error over the given indices of `x`.
pub fn max_rel_error(
    x: &Tensor,
    analytic: &Tensor,
    indices: &[usize],
    h: f64,
    floor: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> f64 {
    indices
        .iter()
        .map(|&i| rel_error(analytic.data()[i], central_difference(x, i, h, &mut f), floor))
        .fold(0.0, f64::max)
}
