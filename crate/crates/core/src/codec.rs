//! Chunk bitstreams and multi-level chunk libraries.
//!
//! `.cgc` layout, all integers little-endian:
//!
//! ```text
//! magic "CGCC" | version u16 | chunk_id u32 | level u8
//! n_tokens u32 | n_layers u32 | n_channels u32 | group_size u32
//! per-layer bins: n_layers × f32 | model_hash u64
//! per group, in token order:
//!     K anchor scales: n_layers × f32 | V anchor scales: n_layers × f32
//!     K stream length u32 | K stream | V stream length u32 | V stream
//! ```
//!
//! Each stream codes the group's anchor symbols (layer-major, then channel)
//! followed by its delta symbols (layer, channel, token).
//!
//! A library lives on disk as `<root>/<context_id>/<chunk_id>/<level>.cgc` plus a
//! `<root>/<context_id>/manifest` text file; see [`Manifest`].

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::bytes::ByteReader;
use crate::entropy::{SymbolModel, TableId};
use crate::error::{Error, Result};
use crate::grouping::{self, GroupPayload, TensorGroup};
use crate::kvtensor::{KVCache, KVDims, Tensor};
use crate::quant::{AnchorScales, EncodingLevel, QuantConfig};

pub const CGC_MAGIC: [u8; 4] = *b"CGCC";
pub const CGC_VERSION: u16 = 1;
pub const DEFAULT_CHUNK_TOKENS: usize = 1500;
pub const MANIFEST_FILE: &str = "manifest";
const MANIFEST_HEADER: &str = "cachegen-manifest 1";

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGroup {
    pub scales_k: Vec<f32>,
    pub scales_v: Vec<f32>,
    pub stream_k: Vec<u8>,
    pub stream_v: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedChunk {
    pub chunk_id: u32,
    pub level: u8,
    pub dims: KVDims,
    pub group_size: usize,
    pub bins: Vec<f32>,
    pub model_hash: u64,
    pub groups: Vec<EncodedGroup>,
}

impl EncodedChunk {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let u32_of = |n: usize| u32::try_from(n).map_err(|_| Error::Overflow);
        let mut out = Vec::new();
        out.extend_from_slice(&CGC_MAGIC);
        out.extend_from_slice(&CGC_VERSION.to_le_bytes());
        out.extend_from_slice(&self.chunk_id.to_le_bytes());
        out.push(self.level);
        for n in [
            self.dims.n_tokens,
            self.dims.n_layers,
            self.dims.n_channels,
            self.group_size,
        ] {
            out.extend_from_slice(&u32_of(n)?.to_le_bytes());
        }
        for b in &self.bins {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out.extend_from_slice(&self.model_hash.to_le_bytes());
        for g in &self.groups {
            for s in g.scales_k.iter().chain(&g.scales_v) {
                out.extend_from_slice(&s.to_le_bytes());
            }
            for stream in [&g.stream_k, &g.stream_v] {
                out.extend_from_slice(&u32_of(stream.len())?.to_le_bytes());
                out.extend_from_slice(stream);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CGC_MAGIC {
            return Err(Error::format("bad .cgc magic"));
        }
        let version = r.u16()?;
        if version != CGC_VERSION {
            return Err(Error::format(format!("unsupported .cgc version {version}")));
        }
        let chunk_id = r.u32()?;
        let level = r.u8()?;
        let dims = KVDims::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let group_size = r.u32()? as usize;
        dims.validate()?;
        if dims.n_tokens == 0 || group_size == 0 {
            return Err(Error::format("chunk header has zero tokens or group size"));
        }
        // Bound every count by the bytes that could possibly back it before looping.
        if dims.n_layers > r.remaining() / 4 {
            return Err(Error::format("truncated chunk header"));
        }
        let bins = (0..dims.n_layers).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let model_hash = r.u64()?;
        let n_groups = dims.n_tokens.div_ceil(group_size);
        let min_group_bytes = 8 * dims.n_layers + 8;
        if n_groups > r.remaining() / min_group_bytes {
            return Err(Error::format(format!(
                "chunk payload too short for {n_groups} groups"
            )));
        }
        let mut groups = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            let scales_k = (0..dims.n_layers).map(|_| r.f32()).collect::<Result<_>>()?;
            let scales_v = (0..dims.n_layers).map(|_| r.f32()).collect::<Result<_>>()?;
            let mut stream = || -> Result<Vec<u8>> {
                let len = r.u32()? as usize;
                Ok(r.take(len)?.to_vec())
            };
            let stream_k = stream()?;
            let stream_v = stream()?;
            groups.push(EncodedGroup {
                scales_k,
                scales_v,
                stream_k,
                stream_v,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::format(format!(
                "{} trailing bytes after the last group",
                r.remaining()
            )));
        }
        Ok(EncodedChunk {
            chunk_id,
            level,
            dims,
            group_size,
            bins,
            model_hash,
            groups,
        })
    }

    pub fn byte_len(&self) -> usize {
        let header = 4 + 2 + 4 + 1 + 16 + 4 * self.bins.len() + 8;
        header
            + self
                .groups
                .iter()
                .map(|g| 4 * (g.scales_k.len() + g.scales_v.len()) + 8 + g.stream_k.len() + g.stream_v.len())
                .sum::<usize>()
    }

    pub fn quant_config(&self) -> Result<QuantConfig> {
        QuantConfig::from_per_layer(self.bins.clone()).map_err(|e| Error::format(e.to_string()))
    }

    /// Reconstructs the chunk's tokens. Groups are decoded in parallel.
    pub fn decode(&self, model: &SymbolModel) -> Result<KVCache> {
        if self.model_hash != model.hash() {
            return Err(Error::HashMismatch {
                expected: self.model_hash,
                found: model.hash(),
            });
        }
        check_model_dims(self.dims, model)?;
        let qc = self.quant_config()?;
        let spans = grouping::split_groups(self.dims.n_tokens, self.group_size);
        if spans.len() != self.groups.len() {
            return Err(Error::format("group count does not match header"));
        }
        let parts: Vec<KVCache> = spans
            .into_par_iter()
            .zip(self.groups.par_iter())
            .map(|(span, g)| {
                let payload = decode_group_streams(g, span, self.dims, model)?;
                grouping::decode_group(&payload, &qc, self.dims)
            })
            .collect::<Result<_>>()?;
        KVCache::concat_tokens(&parts)
    }
}

fn check_model_dims(dims: KVDims, model: &SymbolModel) -> Result<()> {
    if dims.n_layers != model.n_layers() || dims.n_channels != model.n_channels() {
        return Err(Error::ModelMismatch(format!(
            "chunk has {} layers × {} channels, model has {} × {}",
            dims.n_layers,
            dims.n_channels,
            model.n_layers(),
            model.n_channels()
        )));
    }
    Ok(())
}

fn encode_stream(model: &SymbolModel, g: &TensorGroup, dims: KVDims) -> Result<Vec<u8>> {
    let (l_n, c_n) = (dims.n_layers, dims.n_channels);
    let deltas = g.delta_symbols.len() / (l_n * c_n);
    let mut enc = model.encoder();
    for l in 0..l_n {
        for c in 0..c_n {
            enc.put(TableId::anchor(l, c), g.anchor_symbols[l * c_n + c] as i16)?;
        }
    }
    for l in 0..l_n {
        for c in 0..c_n {
            let id = TableId::delta(l, c);
            for j in 0..deltas {
                enc.put(id, g.delta_symbols[(j * l_n + l) * c_n + c])?;
            }
        }
    }
    Ok(enc.finish())
}

fn decode_stream(
    model: &SymbolModel,
    bytes: &[u8],
    scales: &[f32],
    span: usize,
    dims: KVDims,
) -> Result<TensorGroup> {
    let (l_n, c_n) = (dims.n_layers, dims.n_channels);
    let stride = l_n * c_n;
    // Every symbol costs a minimum number of bits, so a stream of this length
    // cannot hold more than this many; reject impossible headers early.
    let max_symbols = ((bytes.len() as f64 + 8.0) * 8.0 / model.min_symbol_cost_bits()).ceil();
    if (span * stride) as f64 > max_symbols {
        return Err(Error::CorruptStream(format!(
            "{} symbols cannot fit in {} bytes",
            span * stride,
            bytes.len()
        )));
    }
    let mut dec = model.decoder(bytes);
    let mut anchor_symbols = vec![0i8; stride];
    for l in 0..l_n {
        for c in 0..c_n {
            anchor_symbols[l * c_n + c] = dec.get(TableId::anchor(l, c))? as i8;
        }
    }
    let deltas = span - 1;
    let mut delta_symbols = vec![0i16; deltas * stride];
    for l in 0..l_n {
        for c in 0..c_n {
            let id = TableId::delta(l, c);
            for j in 0..deltas {
                delta_symbols[(j * l_n + l) * c_n + c] = dec.get(id)?;
            }
        }
    }
    dec.finish()?;
    Ok(TensorGroup {
        anchor_scales: AnchorScales(scales.to_vec()),
        anchor_symbols,
        delta_symbols,
    })
}

fn decode_group_streams(
    g: &EncodedGroup,
    span: Range<usize>,
    dims: KVDims,
    model: &SymbolModel,
) -> Result<GroupPayload> {
    let n = span.len();
    Ok(GroupPayload {
        k: decode_stream(model, &g.stream_k, &g.scales_k, n, dims)?,
        v: decode_stream(model, &g.stream_v, &g.scales_v, n, dims)?,
        token_span: span,
        clipped: 0,
    })
}

/// Encodes one chunk, also returning how many delta symbols saturated `i16`.
pub fn encode_chunk_counting_clips(
    kv: &KVCache,
    chunk_id: u32,
    level: &EncodingLevel,
    model: &SymbolModel,
    group_size: usize,
) -> Result<(EncodedChunk, usize)> {
    let dims = kv.dims();
    if dims.n_tokens == 0 {
        return Err(Error::invalid("cannot encode an empty chunk"));
    }
    if group_size == 0 {
        return Err(Error::invalid("group_size must be positive"));
    }
    check_model_dims(dims, model)?;
    let qc = QuantConfig::for_level(dims.n_layers, level)?;
    let payloads = grouping::encode_groups(kv, &qc, group_size)?;
    let clipped = payloads.iter().map(|p| p.clipped).sum();
    let groups = payloads
        .par_iter()
        .map(|p| {
            Ok(EncodedGroup {
                scales_k: p.k.anchor_scales.0.clone(),
                scales_v: p.v.anchor_scales.0.clone(),
                stream_k: encode_stream(model, &p.k, dims)?,
                stream_v: encode_stream(model, &p.v, dims)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        EncodedChunk {
            chunk_id,
            level: level.id,
            dims,
            group_size,
            bins: qc.per_layer_bin,
            model_hash: model.hash(),
            groups,
        },
        clipped,
    ))
}

pub fn encode_chunk(
    kv: &KVCache,
    chunk_id: u32,
    level: &EncodingLevel,
    model: &SymbolModel,
    group_size: usize,
) -> Result<EncodedChunk> {
    encode_chunk_counting_clips(kv, chunk_id, level, model, group_size).map(|(c, _)| c)
}

pub fn decode_chunk(bytes: &[u8], model: &SymbolModel) -> Result<KVCache> {
    EncodedChunk::from_bytes(bytes)?.decode(model)
}

/// Feeds every symbol the codec would emit for `kv` at `levels` into `profiler`.
pub fn profile_cache(
    profiler: &mut crate::entropy::ModelProfiler,
    kv: &KVCache,
    levels: &[EncodingLevel],
    group_size: usize,
) -> Result<()> {
    for level in levels {
        let qc = QuantConfig::for_level(kv.dims().n_layers, level)?;
        for p in grouping::encode_groups(kv, &qc, group_size)? {
            profiler.observe_group(&p.k)?;
            profiler.observe_group(&p.v)?;
        }
    }
    Ok(())
}

/// One chunk's token range and per-level encoded sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkEntry {
    pub chunk_id: u32,
    pub range: Range<usize>,
    /// Encoded bytes per level, in the manifest's level order.
    pub sizes: Vec<u64>,
}

impl ChunkEntry {
    pub fn tokens(&self) -> usize {
        self.range.len()
    }
}

/// Library metadata: everything the streaming side needs without the payloads.
///
/// Text layout, one record per line:
///
/// ```text
/// cachegen-manifest 1
/// context_id <id>
/// model_hash <16 hex digits>
/// dims <tokens> <layers> <channels>
/// group_size <n>
/// levels <name>:<bin multiplier> ...
/// chunk <id> <start> <end> <bytes at each level> ...
/// ```
///
/// Lines starting with `#` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub context_id: String,
    pub model_hash: u64,
    pub dims: KVDims,
    pub group_size: usize,
    pub levels: Vec<EncodingLevel>,
    pub chunks: Vec<ChunkEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let d = self.dims;
        let mut s = String::new();
        writeln!(s, "{MANIFEST_HEADER}").unwrap();
        writeln!(s, "context_id {}", self.context_id).unwrap();
        writeln!(s, "model_hash {:016x}", self.model_hash).unwrap();
        writeln!(s, "dims {} {} {}", d.n_tokens, d.n_layers, d.n_channels).unwrap();
        writeln!(s, "group_size {}", self.group_size).unwrap();
        let levels: Vec<String> = self
            .levels
            .iter()
            .map(|l| format!("{}:{}", l.name(), l.bin_multiplier))
            .collect();
        writeln!(s, "levels {}", levels.join(" ")).unwrap();
        writeln!(s, "# chunk <id> <start> <end> <bytes per level>").unwrap();
        for c in &self.chunks {
            let sizes: Vec<String> = c.sizes.iter().map(u64::to_string).collect();
            writeln!(
                s,
                "chunk {} {} {} {}",
                c.chunk_id,
                c.range.start,
                c.range.end,
                sizes.join(" ")
            )
            .unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::format(format!("manifest line {}: {msg}", line + 1));
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, MANIFEST_HEADER)) => {}
            _ => return Err(Error::format("missing manifest header")),
        }
        let mut context_id = None;
        let mut model_hash = None;
        let mut dims = None;
        let mut group_size = None;
        let mut levels = None;
        let mut chunks = Vec::new();
        for (i, line) in lines {
            let mut fields = line.split_whitespace();
            let key = fields.next().unwrap();
            let rest: Vec<&str> = fields.collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(i, "expected an integer"));
            match key {
                "context_id" if rest.len() == 1 => context_id = Some(rest[0].to_string()),
                "model_hash" if rest.len() == 1 => {
                    model_hash = Some(
                        u64::from_str_radix(rest[0], 16).map_err(|_| bad(i, "bad model hash"))?,
                    )
                }
                "dims" if rest.len() == 3 => {
                    dims = Some(KVDims::new(num(rest[0])?, num(rest[1])?, num(rest[2])?))
                }
                "group_size" if rest.len() == 1 => group_size = Some(num(rest[0])?),
                "levels" => {
                    let parsed = rest
                        .iter()
                        .map(|tok| parse_level(tok).ok_or_else(|| bad(i, "bad level")))
                        .collect::<Result<Vec<_>>>()?;
                    levels = Some(parsed);
                }
                "chunk" if rest.len() >= 3 => {
                    let sizes = rest[3..]
                        .iter()
                        .map(|s| s.parse::<u64>().map_err(|_| bad(i, "bad size")))
                        .collect::<Result<Vec<_>>>()?;
                    chunks.push(ChunkEntry {
                        chunk_id: rest[0].parse().map_err(|_| bad(i, "bad chunk id"))?,
                        range: num(rest[1])?..num(rest[2])?,
                        sizes,
                    });
                }
                _ => return Err(bad(i, &format!("unrecognised record `{line}`"))),
            }
        }
        let m = Manifest {
            context_id: context_id.ok_or_else(|| Error::format("manifest lacks context_id"))?,
            model_hash: model_hash.ok_or_else(|| Error::format("manifest lacks model_hash"))?,
            dims: dims.ok_or_else(|| Error::format("manifest lacks dims"))?,
            group_size: group_size.ok_or_else(|| Error::format("manifest lacks group_size"))?,
            levels: levels.ok_or_else(|| Error::format("manifest lacks levels"))?,
            chunks,
        };
        m.validate()?;
        Ok(m)
    }

    /// Chunks must tile `[0, n_tokens)` in order, with one size per level.
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::format("manifest lists no levels"));
        }
        let mut next = 0;
        for c in &self.chunks {
            if c.range.start != next || c.range.end <= c.range.start {
                return Err(Error::format(format!(
                    "chunk {} range {:?} does not continue at token {next}",
                    c.chunk_id, c.range
                )));
            }
            if c.sizes.len() != self.levels.len() {
                return Err(Error::format(format!(
                    "chunk {} has {} sizes for {} levels",
                    c.chunk_id,
                    c.sizes.len(),
                    self.levels.len()
                )));
            }
            next = c.range.end;
        }
        if next != self.dims.n_tokens {
            return Err(Error::format(format!(
                "chunks cover {next} of {} tokens",
                self.dims.n_tokens
            )));
        }
        Ok(())
    }

    pub fn level_index(&self, level_id: u8) -> Option<usize> {
        self.levels.iter().position(|l| l.id == level_id)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn parse_level(tok: &str) -> Option<EncodingLevel> {
    let (name, mult) = tok.split_once(':')?;
    Some(EncodingLevel {
        id: parse_level_name(name)?,
        bin_multiplier: mult.parse().ok()?,
    })
}

/// Parses `L<n>`.
pub fn parse_level_name(name: &str) -> Option<u8> {
    name.strip_prefix('L')?.parse().ok()
}

/// A context's chunks encoded at every level.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkLibrary {
    pub manifest: Manifest,
    /// `encoded[chunk][level index]`
    pub encoded: Vec<Vec<Vec<u8>>>,
}

pub fn build_library(
    kv: &KVCache,
    context_id: &str,
    chunk_tokens: usize,
    levels: &[EncodingLevel],
    model: &SymbolModel,
    group_size: usize,
) -> Result<ChunkLibrary> {
    validate_context_id(context_id)?;
    if levels.is_empty() {
        return Err(Error::invalid("at least one level is required"));
    }
    if group_size == 0 || chunk_tokens < group_size {
        return Err(Error::invalid(format!(
            "chunk_tokens ({chunk_tokens}) must be at least group_size ({group_size})"
        )));
    }
    let dims = kv.dims();
    check_model_dims(dims, model)?;
    let chunk_tokens = chunk_tokens / group_size * group_size;
    let ranges = grouping::split_groups(dims.n_tokens, chunk_tokens);
    let jobs: Vec<(usize, usize)> = (0..ranges.len())
        .flat_map(|c| (0..levels.len()).map(move |l| (c, l)))
        .collect();
    let bytes: Vec<Vec<u8>> = jobs
        .par_iter()
        .map(|&(c, l)| {
            let part = kv.slice_tokens(ranges[c].clone())?;
            encode_chunk(&part, c as u32, &levels[l], model, group_size)?.to_bytes()
        })
        .collect::<Result<_>>()?;
    let mut bytes = bytes.into_iter();
    let encoded: Vec<Vec<Vec<u8>>> = ranges
        .iter()
        .map(|_| bytes.by_ref().take(levels.len()).collect())
        .collect();
    let chunks = ranges
        .into_iter()
        .zip(&encoded)
        .enumerate()
        .map(|(i, (range, per_level))| ChunkEntry {
            chunk_id: i as u32,
            range,
            sizes: per_level.iter().map(|b| b.len() as u64).collect(),
        })
        .collect();
    Ok(ChunkLibrary {
        manifest: Manifest {
            context_id: context_id.to_string(),
            model_hash: model.hash(),
            dims,
            group_size,
            levels: levels.to_vec(),
            chunks,
        },
        encoded,
    })
}

pub fn validate_context_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains('/') || id == "." || id == ".." || id.chars().any(char::is_whitespace) {
        return Err(Error::invalid(format!("invalid context id `{id}`")));
    }
    Ok(())
}

impl ChunkLibrary {
    pub fn context_dir(root: &Path, context_id: &str) -> PathBuf {
        root.join(context_id)
    }

    pub fn chunk_path(root: &Path, context_id: &str, chunk_id: u32, level: &str) -> PathBuf {
        root.join(context_id)
            .join(chunk_id.to_string())
            .join(format!("{level}.cgc"))
    }

    pub fn bytes(&self, chunk: usize, level_id: u8) -> Result<&[u8]> {
        let l = self
            .manifest
            .level_index(level_id)
            .ok_or_else(|| Error::invalid(format!("level L{level_id} not in library")))?;
        self.encoded
            .get(chunk)
            .map(|c| c[l].as_slice())
            .ok_or_else(|| Error::invalid(format!("chunk {chunk} not in library")))
    }

    /// Writes the chunk files and manifest under `root/<context_id>/`.
    pub fn write_to(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        let m = &self.manifest;
        for (c, per_level) in m.chunks.iter().zip(&self.encoded) {
            fs::create_dir_all(root.join(&m.context_id).join(c.chunk_id.to_string()))?;
            for (level, bytes) in m.levels.iter().zip(per_level) {
                fs::write(
                    Self::chunk_path(root, &m.context_id, c.chunk_id, &level.name()),
                    bytes,
                )?;
            }
        }
        m.write(Self::context_dir(root, &m.context_id).join(MANIFEST_FILE))
    }

    /// Loads a library from its context directory (the one holding `manifest`).
    pub fn load(context_dir: impl AsRef<Path>) -> Result<Self> {
        let dir = context_dir.as_ref();
        let manifest = Manifest::read(dir.join(MANIFEST_FILE))?;
        let encoded = manifest
            .chunks
            .iter()
            .map(|c| {
                manifest
                    .levels
                    .iter()
                    .zip(&c.sizes)
                    .map(|(level, &size)| {
                        let path = dir.join(c.chunk_id.to_string()).join(format!("{}.cgc", level.name()));
                        let bytes = fs::read(&path)?;
                        if bytes.len() as u64 != size {
                            return Err(Error::format(format!(
                                "{} has {} bytes, manifest says {size}",
                                path.display(),
                                bytes.len()
                            )));
                        }
                        Ok(bytes)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(ChunkLibrary { manifest, encoded })
    }

    /// Decodes every chunk at the level chosen for it and reassembles the cache.
    pub fn decode_with_levels(&self, model: &SymbolModel, level_ids: &[u8]) -> Result<KVCache> {
        if level_ids.len() != self.manifest.chunks.len() {
            return Err(Error::invalid(format!(
                "{} levels for {} chunks",
                level_ids.len(),
                self.manifest.chunks.len()
            )));
        }
        let parts = self
            .manifest
            .chunks
            .par_iter()
            .enumerate()
            .map(|(i, c)| Ok((c.range.clone(), decode_chunk(self.bytes(i, level_ids[i])?, model)?)))
            .collect::<Result<Vec<_>>>()?;
        reassemble(parts)
    }
}

/// Concatenates independently decoded chunks. The ranges, in any order, must
/// tile `[0, N)` exactly.
pub fn reassemble(mut parts: Vec<(Range<usize>, KVCache)>) -> Result<KVCache> {
    parts.sort_by_key(|(r, _)| r.start);
    let mut next = 0;
    for (r, kv) in &parts {
        if r.start != next {
            return Err(Error::shape(format!(
                "chunk coverage has a {} at token {next}",
                if r.start > next { "gap" } else { "overlap" }
            )));
        }
        if kv.dims().n_tokens != r.len() {
            return Err(Error::shape(format!(
                "chunk for {r:?} holds {} tokens",
                kv.dims().n_tokens
            )));
        }
        next = r.end;
    }
    KVCache::concat_tokens(parts.iter().map(|(_, kv)| kv))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionStats {
    pub max_abs_error: f64,
    pub mse: f64,
    pub per_layer_mse: Vec<f64>,
}

pub fn reconstruction_stats(original: &KVCache, decoded: &KVCache) -> Result<ReconstructionStats> {
    let dims = original.dims();
    if decoded.dims() != dims {
        return Err(Error::shape(format!(
            "{:?} vs {:?}",
            dims,
            decoded.dims()
        )));
    }
    let mut max_abs_error = 0.0f64;
    let mut layer_sq = vec![0.0f64; dims.n_layers];
    for t in Tensor::BOTH {
        for (i, (a, b)) in original.tensor(t).iter().zip(decoded.tensor(t)).enumerate() {
            let e = (*a as f64 - *b as f64).abs();
            max_abs_error = max_abs_error.max(e);
            layer_sq[(i / dims.n_channels) % dims.n_layers] += e * e;
        }
    }
    let per_layer_count = (2 * dims.n_tokens * dims.n_channels).max(1) as f64;
    let mse = layer_sq.iter().sum::<f64>() / (per_layer_count * dims.n_layers as f64);
    Ok(ReconstructionStats {
        max_abs_error,
        mse,
        per_layer_mse: layer_sq.iter().map(|s| s / per_layer_count).collect(),
    })
}
