use super::StreamError;
use crate::codec::gaussian::{std_normal_cdf, SIGMA_MIN};

/// Bits of probability precision used by the range coder.
pub const PROB_BITS: u32 = 16;
/// Sum of the frequencies of every table.
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

/// Frequencies of a contiguous integer support, summing to [`PROB_TOTAL`],
/// each at least 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PmfTable {
    support_min: i32,
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl PmfTable {
    /// Quantize nonnegative weights `probs[k]` for symbols
    /// `support_min + k`.
    ///
    /// Every entry first receives 1, the remaining `2^16 − n` counts are
    /// split proportionally with floor rounding, and the leftover counts go
    /// to the largest fractional parts (lower index first on ties).
    pub fn from_probabilities(support_min: i32, probs: &[f64]) -> Result<Self, StreamError> {
        let n = probs.len();
        if n == 0 || n > PROB_TOTAL as usize {
            return Err(StreamError::BadTable(format!("{n} symbols")));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(StreamError::BadTable("non-finite or negative weight".into()));
        }
        let sum: f64 = probs.iter().sum();
        let spare = (PROB_TOTAL as usize - n) as f64;
        let mut freqs = Vec::with_capacity(n);
        let mut fracs = Vec::with_capacity(n);
        for (k, &p) in probs.iter().enumerate() {
            let share = if sum > 0.0 { p / sum * spare } else { spare / n as f64 };
            let fl = share.floor();
            freqs.push(1 + fl as u32);
            fracs.push((share - fl, k));
        }
        let assigned: u32 = freqs.iter().sum();
        let left = (PROB_TOTAL - assigned) as usize;
        if left > 0 {
            // only the set of the `left` largest matters, not its order
            let by_share = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if left < n {
                fracs.select_nth_unstable_by(left - 1, by_share);
            }
            for &(_, k) in fracs.iter().take(left) {
                freqs[k] += 1;
            }
        }
        Ok(Self::from_freqs(support_min, freqs))
    }

    fn from_freqs(support_min: i32, freqs: Vec<u32>) -> Self {
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in &freqs {
            acc += f;
            cum.push(acc);
        }
        debug_assert_eq!(acc, PROB_TOTAL);
        PmfTable {
            support_min,
            freqs,
            cum,
        }
    }

    pub fn support_min(&self) -> i32 {
        self.support_min
    }

    pub fn support_max(&self) -> i32 {
        self.support_min + self.freqs.len() as i32 - 1
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    /// `(cumulative, frequency)` of `symbol`, or an error if outside the support.
    pub fn interval(&self, symbol: i32) -> Result<(u32, u32), StreamError> {
        let k = symbol as i64 - self.support_min as i64;
        if k < 0 || k >= self.freqs.len() as i64 {
            return Err(StreamError::OutOfSupport {
                symbol,
                min: self.support_min,
                max: self.support_max(),
            });
        }
        let k = k as usize;
        Ok((self.cum[k], self.freqs[k]))
    }

    /// Symbol whose interval contains `target < 2^16`, with its interval.
    pub fn lookup(&self, target: u32) -> (i32, u32, u32) {
        let k = self.cum.partition_point(|&c| c <= target) - 1;
        (self.support_min + k as i32, self.cum[k], self.freqs[k])
    }

    /// Code length of `symbol` under the quantized table, in bits.
    pub fn bits(&self, symbol: i32) -> Result<f64, StreamError> {
        let (_, f) = self.interval(symbol)?;
        Ok(PROB_BITS as f64 - (f as f64).log2())
    }
}

/// Half-width `⌈12σ⌉` of the Gaussian support.
pub fn gaussian_half_width(scale: f64) -> i32 {
    (12.0 * scale).ceil() as i32
}

/// Unquantized bin probabilities of `N(0, σ²)` on `[−s, s]`, `s = ⌈12σ⌉`.
pub fn gaussian_probabilities(scale: f64) -> Result<(i32, Vec<f64>), StreamError> {
    if !(scale >= SIGMA_MIN) || !scale.is_finite() {
        return Err(StreamError::BadScale(scale));
    }
    let s = gaussian_half_width(scale);
    if (2 * s as i64 + 1) > PROB_TOTAL as i64 {
        return Err(StreamError::BadScale(scale));
    }
    // Φ at the bin edges ½ − a for a = 0..=s+1; bin ±a has mass
    // edge[a] − edge[a+1], the same arithmetic as `gaussian_mass`.
    let edge: Vec<f64> = (0..=s + 1).map(|a| std_normal_cdf((0.5 - a as f64) / scale)).collect();
    let mass = |k: i32| {
        let a = k.unsigned_abs() as usize;
        edge[a] - edge[a + 1]
    };
    Ok((-s, (-s..=s).map(mass).collect()))
}

/// Quantized pmf of the zero-mean Gaussian with standard deviation `scale`.
pub fn gaussian_pmf(scale: f64) -> Result<PmfTable, StreamError> {
    let (min, probs) = gaussian_probabilities(scale)?;
    PmfTable::from_probabilities(min, &probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_and_floor() {
        for s in [0.11, 0.5, 1.0, 7.3, 100.0] {
            let t = gaussian_pmf(s).unwrap();
            assert_eq!(t.freqs().iter().sum::<u32>(), PROB_TOTAL);
            assert!(t.freqs().iter().all(|&f| f >= 1));
            assert_eq!(t.support_max(), gaussian_half_width(s));
            assert_eq!(t.support_min(), -gaussian_half_width(s));
        }
    }

    #[test]
    fn unit_scale_center_before_quantization() {
        let (min, p) = gaussian_probabilities(1.0).unwrap();
        assert_eq!(min, -12);
        assert!((p[12] - 0.3829).abs() < 1e-4);
        for k in 0..12 {
            assert!((p[k] - p[24 - k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn shared_edges_match_the_rate_model() {
        for s in [0.11, 0.37, 2.0, 41.5] {
            let (min, p) = gaussian_probabilities(s).unwrap();
            for (i, &v) in p.iter().enumerate() {
                let k = (min + i as i32) as f64;
                assert_eq!(v.to_bits(), crate::codec::gaussian::gaussian_mass(k, s).to_bits());
            }
        }
    }

    #[test]
    fn rejects_small_scale() {
        assert!(gaussian_pmf(0.1).is_err());
        assert!(gaussian_pmf(f64::NAN).is_err());
    }

    #[test]
    fn remainder_goes_to_largest_fractions() {
        // 3 symbols, spare = 65533; shares 65533/3 = 21844.33…
        let t = PmfTable::from_probabilities(0, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.freqs(), &[21846, 21845, 21845]);
        let t = PmfTable::from_probabilities(5, &[0.0, 1.0]).unwrap();
        assert_eq!(t.freqs(), &[1, 65535]);
        assert_eq!(t.lookup(0), (5, 0, 1));
        assert_eq!(t.lookup(1), (6, 1, 65535));
        assert!(t.interval(7).is_err());
    }
}
