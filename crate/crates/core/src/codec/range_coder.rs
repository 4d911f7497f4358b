//! Byte-oriented range coder over frequency tables with a power-of-two total.
//!
//! The encoder keeps a 33-bit `low` plus a pending byte (`cache`) and a count
//! of pending `0xFF` bytes, so carries propagate without revisiting output.
//! Renormalisation emits one byte whenever `range` drops below 2^24.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
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
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[start, start + size)` out of `2^total_bits`.
    pub fn encode(&mut self, start: u32, size: u32, total_bits: u32) {
        debug_assert!(size > 0 && start + size <= 1 << total_bits);
        let r = self.range >> total_bits;
        self.low += start as u64 * r as u64;
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Equiprobable bits, most significant first.
    pub fn encode_bits(&mut self, value: u32, nbits: u32) {
        for i in (0..nbits).rev() {
            self.encode((value >> i) & 1, 1, 1);
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
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

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        if input.len() < 5 {
            return Err(Error::Decode("range-coded payload shorter than 5 bytes".into()));
        }
        let mut dec = RangeDecoder {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..5 {
            let b = dec.next_byte()?;
            dec.code = (dec.code << 8) | b as u32;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::Decode("range-coded payload truncated".into()))?;
        self.pos += 1;
        Ok(b)
    }

    /// Returns the cumulative count the next symbol falls into. Must be
    /// followed by [`RangeDecoder::consume`] with that symbol's interval.
    pub fn peek(&mut self, total_bits: u32) -> Result<u32> {
        self.range >>= total_bits;
        let v = self.code / self.range;
        if v >= 1 << total_bits {
            return Err(Error::Decode("corrupt range-coded payload".into()));
        }
        Ok(v)
    }

    pub fn consume(&mut self, start: u32, size: u32) -> Result<()> {
        self.code -= start * self.range;
        self.range *= size;
        while self.range < TOP {
            let b = self.next_byte()?;
            self.code = (self.code << 8) | b as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_bits(&mut self, nbits: u32) -> Result<u32> {
        let mut v = 0;
        for _ in 0..nbits {
            let bit = self.peek(1)?;
            self.consume(bit, 1)?;
            v = (v << 1) | bit;
        }
        Ok(v)
    }

    /// Bytes read so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Cumulative table for `freqs`, which must sum to `2^bits`.
    fn cum(freqs: &[u32]) -> Vec<u32> {
        let mut c = vec![0];
        for f in freqs {
            c.push(c.last().unwrap() + f);
        }
        c
    }

    fn encode_all(symbols: &[usize], freqs: &[u32], bits: u32) -> Vec<u8> {
        let c = cum(freqs);
        let mut enc = RangeEncoder::new();
        for &s in symbols {
            enc.encode(c[s], freqs[s], bits);
        }
        enc.finish()
    }

    fn decode_all(bytes: &[u8], n: usize, freqs: &[u32], bits: u32) -> Result<Vec<usize>> {
        let c = cum(freqs);
        let mut dec = RangeDecoder::new(bytes)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let v = dec.peek(bits)?;
            let s = c.partition_point(|&x| x <= v) - 1;
            dec.consume(c[s], freqs[s])?;
            out.push(s);
        }
        Ok(out)
    }

    #[test]
    fn empty_message_is_five_bytes() {
        assert_eq!(RangeEncoder::new().finish().len(), 5);
    }

    #[test]
    fn skewed_source_compresses_near_entropy() {
        let freqs = [60000u32, 5000, 536];
        let total = 65536.0;
        let symbols: Vec<usize> = (0..20_000)
            .map(|i| {
                if i % 13 == 0 {
                    1
                } else if i % 97 == 0 {
                    2
                } else {
                    0
                }
            })
            .collect();
        let ideal: f64 = symbols.iter().map(|&s| -(freqs[s] as f64 / total).log2()).sum();
        let bytes = encode_all(&symbols, &freqs, 16);
        assert!((bytes.len() * 8) as f64 <= ideal * 1.01 + 64.0);
        assert_eq!(decode_all(&bytes, symbols.len(), &freqs, 16).unwrap(), symbols);
    }

    #[test]
    fn carry_propagation_round_trips() {
        // near-certain symbols keep low close to the top of the interval
        let freqs = [1u32, 65535];
        let symbols: Vec<usize> = (0..5000).map(|i| usize::from(i % 1000 != 0)).collect();
        let bytes = encode_all(&symbols, &freqs, 16);
        assert_eq!(decode_all(&bytes, symbols.len(), &freqs, 16).unwrap(), symbols);
    }

    #[test]
    fn truncation_is_a_decode_error() {
        let freqs = [16384u32; 4];
        let symbols: Vec<usize> = (0..400).map(|i| (i * 7) % 4).collect();
        let bytes = encode_all(&symbols, &freqs, 16);
        for cut in [0, 3, bytes.len() / 2] {
            assert!(matches!(
                decode_all(&bytes[..cut], symbols.len(), &freqs, 16),
                Err(Error::Decode(_))
            ));
        }
    }

    proptest! {
        #[test]
        fn random_tables_round_trip(
            raw in proptest::collection::vec(1u32..1000, 2..40),
            picks in proptest::collection::vec(0usize..1000, 0..500),
            extra in proptest::collection::vec(0u32..1 << 20, 0..20),
        ) {
            // rescale to a 2^16 total with every frequency ≥ 1
            let sum: u32 = raw.iter().sum();
            let mut freqs: Vec<u32> = raw.iter().map(|&f| (f as u64 * 60000 / sum as u64).max(1) as u32).collect();
            let s: u32 = freqs.iter().sum();
            freqs[0] += 65536 - s;
            let symbols: Vec<usize> = picks.iter().map(|p| p % freqs.len()).collect();
            let c = cum(&freqs);
            let mut enc = RangeEncoder::new();
            for &sym in &symbols {
                enc.encode(c[sym], freqs[sym], 16);
            }
            for &e in &extra {
                enc.encode_bits(e, 20);
            }
            let bytes = enc.finish();
            let mut dec = RangeDecoder::new(&bytes).unwrap();
            for &sym in &symbols {
                let v = dec.peek(16).unwrap();
                let got = c.partition_point(|&x| x <= v) - 1;
                prop_assert_eq!(got, sym);
                dec.consume(c[got], freqs[got]).unwrap();
            }
            for &e in &extra {
                prop_assert_eq!(dec.decode_bits(20).unwrap(), e);
            }
        }
    }
}
