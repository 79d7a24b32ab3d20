//! Multi-symbol range coder with a 64-bit range and byte-wise carry propagation.
//!
//! Frequency tables total at most [`MAX_TOTAL`], and the range is renormalised
//! whenever it drops below 2^56, so `range / total` never loses more than 2^-40
//! of the interval per symbol. Output is therefore within a couple of bytes of
//! the tables' cross-entropy.
//!
//! The encoder omits the leading byte (always zero) and stops after the byte that
//! pins the final interval; the decoder feeds zeros past the end. A fully decoded
//! stream always reads exactly [`TAIL_PADDING`] bytes past its end, which lets
//! [`RangeDecoder::finish`] reject streams that are truncated or too long.

use crate::error::{Error, Result};

pub const TOTAL_BITS: u32 = 16;
pub const MAX_TOTAL: u32 = 1 << TOTAL_BITS;

const TOP: u64 = 1 << 56;
const LOW_MASK: u64 = TOP - 1;
const TAIL_PADDING: usize = 7;

/// Static frequency table with cumulative lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl FrequencyTable {
    pub fn new(freqs: Vec<u32>) -> Result<Self> {
        if freqs.len() < 2 {
            return Err(Error::invalid("a frequency table needs at least two symbols"));
        }
        if freqs.contains(&0) {
            return Err(Error::invalid("zero frequency in table"));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for &f in &freqs {
            acc += f as u64;
            if acc > MAX_TOTAL as u64 {
                return Err(Error::invalid(format!(
                    "table total exceeds {MAX_TOTAL}"
                )));
            }
            cum.push(acc as u32);
        }
        Ok(FrequencyTable { freqs, cum })
    }

    /// Add-one smoothed histogram, rescaled so the total fits in [`MAX_TOTAL`].
    /// Tables that already fit keep the exact smoothed counts.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let n = counts.len() as u128;
        let total: u128 = counts.iter().map(|&c| c as u128 + 1).sum();
        let freqs = if total <= MAX_TOTAL as u128 {
            counts.iter().map(|&c| c as u32 + 1).collect()
        } else {
            // floor(c * target / total) + the max(1, ·) bumps stays within MAX_TOTAL
            let target = MAX_TOTAL as u128 - n;
            counts
                .iter()
                .map(|&c| (((c as u128 + 1) * target / total) as u32).max(1))
                .collect()
        };
        Self::new(freqs)
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1; n])
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn total(&self) -> u32 {
        *self.cum.last().unwrap()
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.freqs[index]
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    pub fn cum(&self, index: usize) -> u32 {
        self.cum[index]
    }

    pub fn probability(&self, index: usize) -> f64 {
        self.freqs[index] as f64 / self.total() as f64
    }

    /// Ideal code length of `index` in bits.
    pub fn cost_bits(&self, index: usize) -> f64 {
        (self.total() as f64 / self.freqs[index] as f64).log2()
    }

    /// Sum of ideal code lengths of a sequence of symbol indices.
    pub fn cross_entropy_bits(&self, indices: impl IntoIterator<Item = usize>) -> f64 {
        indices.into_iter().map(|i| self.cost_bits(i)).sum()
    }

    /// Symbol whose cumulative interval contains `value`.
    fn find(&self, value: u32) -> usize {
        self.cum.partition_point(|&c| c <= value) - 1
    }
}

pub struct RangeEncoder {
    low: u128,
    range: u64,
    cache: u8,
    pending: u64,
    skip_first: bool,
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
            range: u64::MAX,
            cache: 0,
            pending: 1,
            skip_first: true,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, table: &FrequencyTable, index: usize) {
        let r = self.range / table.total() as u64;
        self.low += (r * table.cum(index) as u64) as u128;
        self.range = r * table.freq(index) as u64;
        self.normalize();
    }

    /// Writes `bits` (≤ 32) raw bits of `value` with uniform probability.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= 32 && (bits == 32 || value >> bits == 0));
        let r = self.range >> bits;
        self.low += (r * value as u64) as u128;
        self.range = r;
        self.normalize();
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        let carry = (self.low >> 64) as u8;
        if (self.low as u64) < 0xFF00_0000_0000_0000 || carry != 0 {
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 56) as u8;
        }
        self.pending += 1;
        self.low = ((self.low as u64 & LOW_MASK) as u128) << 8;
    }

    fn emit(&mut self, byte: u8) {
        if self.skip_first {
            debug_assert_eq!(byte, 0);
            self.skip_first = false;
        } else {
            self.out.push(byte);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        // Any point of [low, low + range) identifies the stream; pick the one
        // whose bits below the top byte are all zero.
        self.low = (self.low + LOW_MASK as u128) & !(LOW_MASK as u128);
        self.shift_low();
        self.shift_low();
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
    step: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            data,
            pos: 0,
            code: 0,
            range: u64::MAX,
            step: 0,
        };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, table: &FrequencyTable) -> Result<usize> {
        self.step = self.range / table.total() as u64;
        let value = (self.code / self.step).min(table.total() as u64 - 1) as u32;
        let index = table.find(value);
        let lo = self.step * table.cum(index) as u64;
        let width = self.step * table.freq(index) as u64;
        if self.code < lo || self.code - lo >= width {
            return Err(Error::CorruptStream("code outside symbol interval".into()));
        }
        self.code -= lo;
        self.range = width;
        self.normalize()?;
        Ok(index)
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32> {
        let r = self.range >> bits;
        let value = self.code / r;
        if value >> bits != 0 {
            return Err(Error::CorruptStream("raw bits out of range".into()));
        }
        self.code -= r * value;
        self.range = r;
        self.normalize()?;
        Ok(value as u32)
    }

    fn normalize(&mut self) -> Result<()> {
        while self.range < TOP {
            if self.pos >= self.data.len() + TAIL_PADDING {
                return Err(Error::StreamExhausted);
            }
            self.code = (self.code << 8) | self.next_byte() as u64;
            self.range <<= 8;
        }
        Ok(())
    }

    /// Checks that the stream ended exactly where the encoder stopped.
    pub fn finish(self) -> Result<()> {
        let expected = self.data.len() + TAIL_PADDING;
        if self.pos == expected {
            Ok(())
        } else if self.pos > expected {
            Err(Error::StreamExhausted)
        } else {
            Err(Error::CorruptStream(format!(
                "{} unread bytes after the last symbol",
                expected - self.pos
            )))
        }
    }
}
