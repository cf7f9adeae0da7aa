//! Carry-less byte-oriented range coder with 32-bit state.

use super::pmf::{PmfTable, PROB_BITS, PROB_TOTAL};
use super::StreamError;

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &PmfTable, symbol: i32) -> Result<(), StreamError> {
        let (cum, freq) = table.interval(symbol)?;
        let r = self.range >> PROB_BITS;
        self.low += cum * r;
        self.range = freq * r;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
                // top byte settled
            } else if self.range < BOT {
                // shrink the range so that the top byte settles
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    /// Flush the state (4 bytes) and return the stream.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

/// Decoder mirroring [`RangeEncoder`]; it tracks the encoder's `low` so that
/// [`RangeDecoder::finish`] can verify the final state.
pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self, StreamError> {
        if input.len() < 4 {
            return Err(StreamError::Truncated);
        }
        let code = u32::from_be_bytes([input[0], input[1], input[2], input[3]]);
        Ok(RangeDecoder {
            low: 0,
            range: u32::MAX,
            code,
            input,
            pos: 4,
        })
    }

    pub fn decode(&mut self, table: &PmfTable) -> Result<i32, StreamError> {
        let r = self.range >> PROB_BITS;
        let target = self.code.wrapping_sub(self.low) / r;
        if target >= PROB_TOTAL {
            return Err(StreamError::Corrupt("code outside the coding range"));
        }
        let (symbol, cum, freq) = table.lookup(target);
        self.low += cum * r;
        self.range = freq * r;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
            } else if self.range < BOT {
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            let byte = *self.input.get(self.pos).ok_or(StreamError::Truncated)?;
            self.pos += 1;
            self.code = (self.code << 8) | byte as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(symbol)
    }

    /// Check that every byte was consumed and the flushed state matches.
    pub fn finish(self) -> Result<(), StreamError> {
        if self.pos != self.input.len() {
            return Err(StreamError::Corrupt("trailing bytes after the coded symbols"));
        }
        if self.code != self.low {
            return Err(StreamError::Corrupt("final coder state mismatch"));
        }
        Ok(())
    }
}

/// Encode `symbols[i]` under `pmfs[i]`.
pub fn range_encode(symbols: &[i32], pmfs: &[&PmfTable]) -> Result<Vec<u8>, StreamError> {
    assert_eq!(symbols.len(), pmfs.len(), "one pmf per symbol");
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(pmfs) {
        enc.encode(t, s)?;
    }
    Ok(enc.finish())
}

/// Decode `count` symbols, the i-th under `pmfs[i]`.
pub fn range_decode(bytes: &[u8], pmfs: &[&PmfTable], count: usize) -> Result<Vec<i32>, StreamError> {
    assert!(pmfs.len() >= count, "one pmf per symbol");
    let mut dec = RangeDecoder::new(bytes)?;
    let out = pmfs[..count]
        .iter()
        .map(|t| dec.decode(t))
        .collect::<Result<Vec<_>, _>>()?;
    dec.finish()?;
    Ok(out)
}
