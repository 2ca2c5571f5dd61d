//! Range coder over a static uniform distribution.
//!
//! 32-bit range with a 33-bit `low` register and carry propagation through
//! a cached byte, so no precision is lost to carry avoidance. Each symbol
//! narrows the range by exactly `⌊range / total⌋`, which keeps the output
//! within a few bytes of `count · log₂(total)` bits.

const TOP: u32 = 1 << 24;

#[derive(Debug, Clone)]
pub struct UniformRangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for UniformRangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl UniformRangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Encodes `symbol ∈ [0, total)`. `total` must be in `1..=2^16`.
    pub fn encode(&mut self, symbol: u32, total: u32) {
        debug_assert!(symbol < total && total <= 1 << 16);
        let r = self.range / total;
        self.low += symbol as u64 * r as u64;
        self.range = r;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug, Clone)]
pub struct UniformRangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

/// The stream ended early or encodes a symbol outside `[0, total)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeFault {
    Truncated { consumed: usize },
    Corrupt { consumed: usize },
}

impl<'a> UniformRangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, DecodeFault> {
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..5 {
            let b = d.next_byte()?;
            d.code = (d.code << 8) | b as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8, DecodeFault> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or(DecodeFault::Truncated { consumed: self.pos })?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, total: u32) -> Result<u32, DecodeFault> {
        let r = self.range / total;
        let symbol = self.code / r;
        if symbol >= total {
            return Err(DecodeFault::Corrupt { consumed: self.pos });
        }
        self.code -= symbol * r;
        self.range = r;
        while self.range < TOP {
            let b = self.next_byte()?;
            self.code = (self.code << 8) | b as u32;
            self.range <<= 8;
        }
        Ok(symbol)
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn size_tracks_entropy() {
        let total = 6u32;
        let count = 250_000usize;
        let mut enc = UniformRangeEncoder::new();
        let mut state = 12345u64;
        let mut symbols = Vec::with_capacity(count);
        for _ in 0..count {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let s = ((state >> 33) % total as u64) as u32;
            symbols.push(s);
            enc.encode(s, total);
        }
        let bytes = enc.finish();
        let ideal = count as f64 * (total as f64).log2();
        let bits = bytes.len() as f64 * 8.0;
        assert!(bits >= ideal, "{bits} < {ideal}");
        assert!(bits <= ideal + 64.0, "{bits} vs {ideal}");

        let mut dec = UniformRangeDecoder::new(&bytes).unwrap();
        for &s in &symbols {
            assert_eq!(dec.decode(total).unwrap(), s);
        }
        assert_eq!(dec.consumed(), bytes.len());
    }

    #[test]
    fn carries_propagate_through_ff_runs() {
        // the highest symbol repeatedly pushes low toward the top of the range
        let mut enc = UniformRangeEncoder::new();
        let symbols: Vec<u32> = (0..5000).map(|i| if i % 97 == 0 { 0 } else { 255 }).collect();
        for &s in &symbols {
            enc.encode(s, 256);
        }
        let bytes = enc.finish();
        let mut dec = UniformRangeDecoder::new(&bytes).unwrap();
        for &s in &symbols {
            assert_eq!(dec.decode(256).unwrap(), s);
        }
    }

    #[test]
    fn truncated_stream_is_detected() {
        let mut enc = UniformRangeEncoder::new();
        for i in 0..1000 {
            enc.encode(i % 6, 6);
        }
        let bytes = enc.finish();
        let cut = &bytes[..bytes.len() - 3];
        let mut dec = UniformRangeDecoder::new(cut).unwrap();
        let res: Result<Vec<u32>, _> = (0..1000).map(|_| dec.decode(6)).collect();
        assert!(matches!(res, Err(DecodeFault::Truncated { .. })));
        assert!(UniformRangeDecoder::new(&bytes[..4]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(symbols in proptest::collection::vec(0u32..70, 0..2000)) {
            let mut enc = UniformRangeEncoder::new();
            for &s in &symbols {
                enc.encode(s, 70);
            }
            let bytes = enc.finish();
            let mut dec = UniformRangeDecoder::new(&bytes).unwrap();
            for &s in &symbols {
                prop_assert_eq!(dec.decode(70).unwrap(), s);
            }
            prop_assert_eq!(dec.consumed(), bytes.len());
        }
    }
}
