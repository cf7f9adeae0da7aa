//! Entropy coding of quantized latents and the latent-only decode path.

mod latent;
mod pmf;
mod range;
mod stream;

pub use latent::{decode_factorized, decode_gaussian, encode_factorized, encode_gaussian, partial_decode};
pub use pmf::{gaussian_half_width, gaussian_pmf, gaussian_probabilities, PmfTable, PROB_BITS, PROB_TOTAL};
pub use range::{range_decode, range_encode, RangeDecoder, RangeEncoder};
pub use stream::{Bitstream, MAGIC, STREAM_VERSION};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StreamError {
    #[error("not a latentvision stream")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated stream")]
    Truncated,
    #[error("corrupt stream: {0}")]
    Corrupt(&'static str),
    #[error("symbol {symbol} outside support [{min}, {max}]")]
    OutOfSupport { symbol: i32, min: i32, max: i32 },
    #[error("scale {0} cannot be coded")]
    BadScale(f64),
    #[error("invalid pmf table: {0}")]
    BadTable(String),
}
