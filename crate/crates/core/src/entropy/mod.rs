//! Contextual arithmetic coding of quantized KV symbols.
//!
//! A [`SymbolModel`] holds one static frequency table per (kind, layer, channel):
//! anchor tables cover `[-127, 127]`, delta tables cover `[-S, S]` plus an
//! `ESCAPE` entry. An escaped delta is followed by its value as 16 raw bits.
//! Models are profiled offline and shared by every encoder and decoder that
//! agree on the model hash.

mod range_coder;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

pub use range_coder::{FrequencyTable, RangeDecoder, RangeEncoder, MAX_TOTAL, TOTAL_BITS};

use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::grouping::TensorGroup;
use crate::quant::ANCHOR_MAX;

pub const SYM_MAGIC: [u8; 4] = *b"CGSM";
pub const SYM_VERSION: u16 = 1;
pub const DEFAULT_DELTA_HALF_WIDTH: u16 = 255;
pub const ANCHOR_HALF_WIDTH: u16 = ANCHOR_MAX as u16;
const ESCAPE_LITERAL_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TableKind {
    Anchor,
    Delta,
}

/// Selects the table a symbol is coded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TableId {
    pub kind: TableKind,
    pub layer: usize,
    pub channel: usize,
}

impl TableId {
    pub fn anchor(layer: usize, channel: usize) -> Self {
        TableId {
            kind: TableKind::Anchor,
            layer,
            channel,
        }
    }

    pub fn delta(layer: usize, channel: usize) -> Self {
        TableId {
            kind: TableKind::Delta,
            layer,
            channel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolModel {
    n_layers: usize,
    n_channels: usize,
    delta_half_width: u16,
    anchor_tables: Vec<FrequencyTable>,
    delta_tables: Vec<FrequencyTable>,
    hash: u64,
}

impl SymbolModel {
    fn from_tables(
        n_layers: usize,
        n_channels: usize,
        delta_half_width: u16,
        anchor_tables: Vec<FrequencyTable>,
        delta_tables: Vec<FrequencyTable>,
    ) -> Self {
        let mut model = SymbolModel {
            n_layers,
            n_channels,
            delta_half_width,
            anchor_tables,
            delta_tables,
            hash: 0,
        };
        model.hash = model.content_hash();
        model
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn delta_half_width(&self) -> u16 {
        self.delta_half_width
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn table(&self, id: TableId) -> Result<&FrequencyTable> {
        if id.layer >= self.n_layers || id.channel >= self.n_channels {
            return Err(Error::ModelMismatch(format!(
                "table ({}, {}) outside model of {} layers × {} channels",
                id.layer, id.channel, self.n_layers, self.n_channels
            )));
        }
        let i = id.layer * self.n_channels + id.channel;
        Ok(match id.kind {
            TableKind::Anchor => &self.anchor_tables[i],
            TableKind::Delta => &self.delta_tables[i],
        })
    }

    /// Lower bound on the bits any single coded symbol can occupy.
    pub fn min_symbol_cost_bits(&self) -> f64 {
        self.anchor_tables
            .iter()
            .chain(&self.delta_tables)
            .map(|t| {
                let max = t.freqs().iter().copied().max().unwrap_or(1);
                -(max as f64 / t.total() as f64).log2()
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn escape_index(&self) -> usize {
        2 * self.delta_half_width as usize + 1
    }

    /// Table index of `symbol`, or `None` when it must be escaped.
    fn index_of(&self, kind: TableKind, symbol: i16) -> Result<Option<usize>> {
        let half = match kind {
            TableKind::Anchor => ANCHOR_HALF_WIDTH,
            TableKind::Delta => self.delta_half_width,
        } as i32;
        let s = symbol as i32;
        if (-half..=half).contains(&s) {
            Ok(Some((s + half) as usize))
        } else if kind == TableKind::Delta {
            Ok(None)
        } else {
            Err(Error::ModelMismatch(format!("anchor symbol {symbol} out of range")))
        }
    }

    fn symbol_of(&self, kind: TableKind, index: usize) -> i16 {
        let half = match kind {
            TableKind::Anchor => ANCHOR_HALF_WIDTH,
            TableKind::Delta => self.delta_half_width,
        } as i32;
        (index as i32 - half) as i16
    }

    /// Probability the model assigns to `symbol` (the escape probability for
    /// out-of-alphabet deltas).
    pub fn probability(&self, id: TableId, symbol: i16) -> Result<f64> {
        let table = self.table(id)?;
        let index = self.index_of(id.kind, symbol)?.unwrap_or(self.escape_index());
        Ok(table.probability(index))
    }

    fn cost_bits(&self, id: TableId, symbol: i16) -> Result<f64> {
        let table = self.table(id)?;
        Ok(match self.index_of(id.kind, symbol)? {
            Some(i) => table.cost_bits(i),
            None => table.cost_bits(self.escape_index()) + ESCAPE_LITERAL_BITS as f64,
        })
    }

    fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.header_fields());
        for t in self.anchor_tables.iter().chain(&self.delta_tables) {
            for &f in t.freqs() {
                h.update((f as u16).to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    fn header_fields(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12);
        out.extend_from_slice(&(self.n_layers as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_channels as u32).to_le_bytes());
        out.extend_from_slice(&self.delta_half_width.to_le_bytes());
        out.extend_from_slice(&ANCHOR_HALF_WIDTH.to_le_bytes());
        out
    }

    /// Serializes to the `.sym` layout: magic, version, layers, channels, delta
    /// half-width, anchor half-width, hash, then every table's `u16` frequencies
    /// in (kind, layer, channel, symbol) order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&SYM_MAGIC);
        out.extend_from_slice(&SYM_VERSION.to_le_bytes());
        out.extend_from_slice(&self.header_fields());
        out.extend_from_slice(&self.hash.to_le_bytes());
        for t in self.anchor_tables.iter().chain(&self.delta_tables) {
            for &f in t.freqs() {
                out.extend_from_slice(&(f as u16).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != SYM_MAGIC {
            return Err(Error::format("bad .sym magic"));
        }
        let version = r.u16()?;
        if version != SYM_VERSION {
            return Err(Error::format(format!("unsupported .sym version {version}")));
        }
        let n_layers = r.u32()? as usize;
        let n_channels = r.u32()? as usize;
        let delta_half_width = r.u16()?;
        let anchor_half_width = r.u16()?;
        if anchor_half_width != ANCHOR_HALF_WIDTH || delta_half_width == 0 {
            return Err(Error::format("unsupported alphabet in .sym header"));
        }
        if n_layers == 0 || n_channels == 0 {
            return Err(Error::format("empty model dimensions"));
        }
        let stored_hash = r.u64()?;
        let n_tables = n_layers
            .checked_mul(n_channels)
            .ok_or(Error::Overflow)?;
        let anchor_width = 2 * ANCHOR_HALF_WIDTH as usize + 1;
        let delta_width = 2 * delta_half_width as usize + 2;
        let table_bytes = n_tables
            .checked_mul(2 * (anchor_width + delta_width))
            .ok_or(Error::Overflow)?;
        if r.remaining() != table_bytes {
            return Err(Error::format(format!(
                ".sym tables need {table_bytes} bytes, found {}",
                r.remaining()
            )));
        }
        let mut read_tables = |width: usize| -> Result<Vec<FrequencyTable>> {
            (0..n_tables)
                .map(|_| {
                    let freqs = (0..width).map(|_| r.u16().map(u32::from)).collect::<Result<_>>()?;
                    FrequencyTable::new(freqs).map_err(|e| Error::format(e.to_string()))
                })
                .collect()
        };
        let anchor_tables = read_tables(anchor_width)?;
        let delta_tables = read_tables(delta_width)?;
        let model = Self::from_tables(
            n_layers,
            n_channels,
            delta_half_width,
            anchor_tables,
            delta_tables,
        );
        if model.hash != stored_hash {
            return Err(Error::HashMismatch {
                expected: stored_hash,
                found: model.hash,
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn encoder(&self) -> SymbolEncoder<'_> {
        SymbolEncoder {
            model: self,
            rc: RangeEncoder::new(),
        }
    }

    pub fn decoder<'a>(&'a self, bytes: &'a [u8]) -> SymbolDecoder<'a> {
        SymbolDecoder {
            model: self,
            rc: RangeDecoder::new(bytes),
        }
    }
}

/// Streams symbols into one arithmetic-coded buffer, switching tables per symbol.
pub struct SymbolEncoder<'m> {
    model: &'m SymbolModel,
    rc: RangeEncoder,
}

impl SymbolEncoder<'_> {
    pub fn put(&mut self, id: TableId, symbol: i16) -> Result<()> {
        let table = self.model.table(id)?;
        match self.model.index_of(id.kind, symbol)? {
            Some(i) => self.rc.encode(table, i),
            None => {
                self.rc.encode(table, self.model.escape_index());
                self.rc
                    .encode_bits(symbol as u16 as u32, ESCAPE_LITERAL_BITS);
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Vec<u8> {
        self.rc.finish()
    }
}

pub struct SymbolDecoder<'a> {
    model: &'a SymbolModel,
    rc: RangeDecoder<'a>,
}

impl SymbolDecoder<'_> {
    pub fn get(&mut self, id: TableId) -> Result<i16> {
        let table = self.model.table(id)?;
        let index = self.rc.decode(table)?;
        if id.kind == TableKind::Delta && index == self.model.escape_index() {
            let v = self.rc.decode_bits(ESCAPE_LITERAL_BITS)? as u16 as i16;
            if v.unsigned_abs() <= self.model.delta_half_width {
                return Err(Error::CorruptStream(format!("escaped in-range symbol {v}")));
            }
            Ok(v)
        } else {
            Ok(self.model.symbol_of(id.kind, index))
        }
    }

    pub fn finish(self) -> Result<()> {
        self.rc.finish()
    }
}

/// Accumulates symbol histograms per (kind, layer, channel).
#[derive(Debug, Clone)]
pub struct ModelProfiler {
    n_layers: usize,
    n_channels: usize,
    delta_half_width: u16,
    anchor_counts: Vec<Vec<u64>>,
    delta_counts: Vec<Vec<u64>>,
    observed: u64,
}

impl ModelProfiler {
    pub fn new(n_layers: usize, n_channels: usize) -> Self {
        Self::with_half_width(n_layers, n_channels, DEFAULT_DELTA_HALF_WIDTH)
    }

    pub fn with_half_width(n_layers: usize, n_channels: usize, delta_half_width: u16) -> Self {
        let n = n_layers * n_channels;
        ModelProfiler {
            n_layers,
            n_channels,
            delta_half_width,
            anchor_counts: vec![vec![0; 2 * ANCHOR_HALF_WIDTH as usize + 1]; n],
            delta_counts: vec![vec![0; 2 * delta_half_width as usize + 2]; n],
            observed: 0,
        }
    }

    pub fn observe(&mut self, id: TableId, symbol: i16) -> Result<()> {
        if id.layer >= self.n_layers || id.channel >= self.n_channels {
            return Err(Error::shape(format!(
                "sample at ({}, {}) outside {} layers × {} channels",
                id.layer, id.channel, self.n_layers, self.n_channels
            )));
        }
        let t = id.layer * self.n_channels + id.channel;
        let s = symbol as i32;
        match id.kind {
            TableKind::Anchor => {
                let half = ANCHOR_HALF_WIDTH as i32;
                if !(-half..=half).contains(&s) {
                    return Err(Error::invalid(format!("anchor symbol {s} out of range")));
                }
                self.anchor_counts[t][(s + half) as usize] += 1;
            }
            TableKind::Delta => {
                let half = self.delta_half_width as i32;
                let i = if (-half..=half).contains(&s) {
                    (s + half) as usize
                } else {
                    2 * half as usize + 1
                };
                self.delta_counts[t][i] += 1;
            }
        }
        self.observed += 1;
        Ok(())
    }

    /// Records every anchor and delta symbol of one tensor group.
    pub fn observe_group(&mut self, g: &TensorGroup) -> Result<()> {
        let c = self.n_channels;
        if g.anchor_symbols.len() != self.n_layers * c {
            return Err(Error::shape("group does not match profiler dimensions"));
        }
        for (i, &s) in g.anchor_symbols.iter().enumerate() {
            self.observe(TableId::anchor(i / c, i % c), s as i16)?;
        }
        for (i, &s) in g.delta_symbols.iter().enumerate() {
            let j = i % (self.n_layers * c);
            self.observe(TableId::delta(j / c, j % c), s)?;
        }
        Ok(())
    }

    pub fn observed(&self) -> u64 {
        self.observed
    }

    /// One add-one-smoothed table per (kind, layer, channel).
    pub fn finish(&self) -> Result<SymbolModel> {
        self.check_nonempty()?;
        let build = |counts: &Vec<Vec<u64>>| -> Result<Vec<FrequencyTable>> {
            counts.iter().map(|c| FrequencyTable::from_counts(c)).collect()
        };
        Ok(SymbolModel::from_tables(
            self.n_layers,
            self.n_channels,
            self.delta_half_width,
            build(&self.anchor_counts)?,
            build(&self.delta_counts)?,
        ))
    }

    /// Same file layout, but every (layer, channel) shares one pooled table per kind.
    pub fn finish_global(&self) -> Result<SymbolModel> {
        self.check_nonempty()?;
        let pooled = |counts: &Vec<Vec<u64>>| -> Result<Vec<FrequencyTable>> {
            let mut sum = vec![0u64; counts[0].len()];
            for c in counts {
                for (a, b) in sum.iter_mut().zip(c) {
                    *a += b;
                }
            }
            let table = FrequencyTable::from_counts(&sum)?;
            Ok(vec![table; counts.len()])
        };
        Ok(SymbolModel::from_tables(
            self.n_layers,
            self.n_channels,
            self.delta_half_width,
            pooled(&self.anchor_counts)?,
            pooled(&self.delta_counts)?,
        ))
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.observed == 0 || self.n_layers == 0 || self.n_channels == 0 {
            Err(Error::invalid("cannot profile a model from an empty corpus"))
        } else {
            Ok(())
        }
    }
}

/// Profiles a model from labelled symbols.
pub fn profile_model(
    n_layers: usize,
    n_channels: usize,
    corpus: impl IntoIterator<Item = (TableId, i16)>,
) -> Result<SymbolModel> {
    let mut p = ModelProfiler::new(n_layers, n_channels);
    for (id, s) in corpus {
        p.observe(id, s)?;
    }
    p.finish()
}

/// A finished arithmetic-coded buffer and the model it was coded with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub bytes: Vec<u8>,
    pub model_hash: u64,
}

impl Bitstream {
    pub fn bit_len(&self) -> usize {
        self.bytes.len() * 8
    }
}

pub fn ac_encode(model: &SymbolModel, selectors: &[TableId], symbols: &[i16]) -> Result<Bitstream> {
    if selectors.len() != symbols.len() {
        return Err(Error::ModelMismatch(format!(
            "{} selectors for {} symbols",
            selectors.len(),
            symbols.len()
        )));
    }
    let mut enc = model.encoder();
    for (&id, &s) in selectors.iter().zip(symbols) {
        enc.put(id, s)?;
    }
    Ok(Bitstream {
        bytes: enc.finish(),
        model_hash: model.hash(),
    })
}

/// Decodes one symbol per selector.
pub fn ac_decode(model: &SymbolModel, bits: &Bitstream, selectors: &[TableId]) -> Result<Vec<i16>> {
    if bits.model_hash != model.hash() {
        return Err(Error::HashMismatch {
            expected: bits.model_hash,
            found: model.hash(),
        });
    }
    let mut dec = model.decoder(&bits.bytes);
    let out = selectors.iter().map(|&id| dec.get(id)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}

/// Ideal coded length in bits, including 16 literal bits per escaped delta.
pub fn cross_entropy_bits(model: &SymbolModel, selectors: &[TableId], symbols: &[i16]) -> Result<f64> {
    if selectors.len() != symbols.len() {
        return Err(Error::ModelMismatch("selector and symbol counts differ".into()));
    }
    selectors
        .iter()
        .zip(symbols)
        .map(|(&id, &s)| model.cost_bits(id, s))
        .sum()
}

/// Empirical conditional entropy in bits per element when samples are grouped by
/// key: each group is coded with its own maximum-likelihood distribution.
pub fn grouped_entropy_bits<K, I>(samples: I) -> f64
where
    K: std::hash::Hash + Eq,
    I: IntoIterator<Item = (K, i32)>,
{
    let mut groups: HashMap<K, HashMap<i32, u64>> = HashMap::new();
    let mut n = 0u64;
    for (k, s) in samples {
        *groups.entry(k).or_default().entry(s).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    let bits: f64 = groups
        .values()
        .map(|hist| {
            let total: u64 = hist.values().sum();
            hist.values()
                .map(|&c| c as f64 * (total as f64 / c as f64).log2())
                .sum::<f64>()
        })
        .sum();
    bits / n as f64
}
