//! KV tensor container, `.kvt` files and the synthetic AR(1) generator.
//!
//! Both tensors are stored token-major: element `(t, l, c)` lives at
//! `(t * n_layers + l) * n_channels + c`. A contiguous token range is therefore
//! a contiguous slice, which is what chunking and grouping rely on.

use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use half::f16;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const KVT_MAGIC: [u8; 4] = *b"CGKT";
pub const KVT_VERSION: u16 = 1;
const KVT_HEADER_LEN: usize = 4 + 2 + 3 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KVDims {
    pub n_tokens: usize,
    pub n_layers: usize,
    pub n_channels: usize,
}

impl KVDims {
    pub const fn new(n_tokens: usize, n_layers: usize, n_channels: usize) -> Self {
        KVDims {
            n_tokens,
            n_layers,
            n_channels,
        }
    }

    /// Layers and channels must be positive; zero tokens is the empty cache.
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_channels == 0 {
            return Err(Error::shape(format!(
                "layers and channels must be positive, got {self:?}"
            )));
        }
        self.elements().map(|_| ())
    }

    /// Elements in one token (`layers × channels`).
    pub fn token_stride(&self) -> usize {
        self.n_layers * self.n_channels
    }

    /// Elements per tensor.
    pub fn elements(&self) -> Result<usize> {
        self.n_tokens
            .checked_mul(self.n_layers)
            .and_then(|x| x.checked_mul(self.n_channels))
            .ok_or(Error::Overflow)
    }

    pub fn with_tokens(&self, n_tokens: usize) -> Self {
        KVDims { n_tokens, ..*self }
    }
}

/// Selects the K or V tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tensor {
    Key,
    Value,
}

impl Tensor {
    pub const BOTH: [Tensor; 2] = [Tensor::Key, Tensor::Value];
}

#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    dims: KVDims,
    k: Vec<f32>,
    v: Vec<f32>,
}

impl KVCache {
    pub fn new_zeros(dims: KVDims) -> Result<Self> {
        dims.validate()?;
        let n = dims.elements()?;
        Ok(KVCache {
            dims,
            k: vec![0.0; n],
            v: vec![0.0; n],
        })
    }

    /// Builds a cache from raw token-major tensors, rejecting length mismatches and
    /// non-finite values.
    pub fn from_parts(dims: KVDims, k: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        let n = dims.elements()?;
        for (name, t) in [("K", &k), ("V", &v)] {
            if t.len() != n {
                return Err(Error::shape(format!(
                    "{name} tensor has {} elements, dims {dims:?} need {n}",
                    t.len()
                )));
            }
        }
        check_finite(&k)?;
        check_finite(&v)?;
        Ok(KVCache { dims, k, v })
    }

    /// Widens half-precision tensors.
    pub fn from_f16(dims: KVDims, k: &[f16], v: &[f16]) -> Result<Self> {
        Self::from_parts(
            dims,
            k.iter().map(|x| x.to_f32()).collect(),
            v.iter().map(|x| x.to_f32()).collect(),
        )
    }

    pub fn dims(&self) -> KVDims {
        self.dims
    }

    pub fn k(&self) -> &[f32] {
        &self.k
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn tensor(&self, which: Tensor) -> &[f32] {
        match which {
            Tensor::Key => &self.k,
            Tensor::Value => &self.v,
        }
    }

    pub fn index(&self, token: usize, layer: usize, channel: usize) -> usize {
        (token * self.dims.n_layers + layer) * self.dims.n_channels + channel
    }

    /// Copies out a token range as its own cache.
    pub fn slice_tokens(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.dims.n_tokens {
            return Err(Error::shape(format!(
                "token range {range:?} outside 0..{}",
                self.dims.n_tokens
            )));
        }
        let stride = self.dims.token_stride();
        let span = range.start * stride..range.end * stride;
        Ok(KVCache {
            dims: self.dims.with_tokens(range.len()),
            k: self.k[span.clone()].to_vec(),
            v: self.v[span].to_vec(),
        })
    }

    /// Concatenates caches along the token axis. Layer and channel counts must agree.
    pub fn concat_tokens<'a>(parts: impl IntoIterator<Item = &'a KVCache>) -> Result<Self> {
        let mut parts = parts.into_iter().peekable();
        let first = parts
            .peek()
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?
            .dims;
        let mut k = Vec::new();
        let mut v = Vec::new();
        let mut n_tokens = 0usize;
        for p in parts {
            if p.dims.n_layers != first.n_layers || p.dims.n_channels != first.n_channels {
                return Err(Error::shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    p.dims, first
                )));
            }
            n_tokens += p.dims.n_tokens;
            k.extend_from_slice(&p.k);
            v.extend_from_slice(&p.v);
        }
        Ok(KVCache {
            dims: first.with_tokens(n_tokens),
            k,
            v,
        })
    }

    pub fn write_kvt(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_kvt_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_kvt(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kvt_bytes(&fs::read(path)?)
    }

    pub fn to_kvt_bytes(&self) -> Result<Vec<u8>> {
        let d = self.dims;
        let mut out = Vec::with_capacity(KVT_HEADER_LEN + 8 * self.k.len());
        out.extend_from_slice(&KVT_MAGIC);
        out.extend_from_slice(&KVT_VERSION.to_le_bytes());
        for n in [d.n_tokens, d.n_layers, d.n_channels] {
            let n = u32::try_from(n).map_err(|_| Error::Overflow)?;
            out.extend_from_slice(&n.to_le_bytes());
        }
        for x in self.k.iter().chain(&self.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_kvt_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < KVT_HEADER_LEN {
            return Err(Error::format("truncated .kvt header"));
        }
        if bytes[..4] != KVT_MAGIC {
            return Err(Error::format("bad .kvt magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != KVT_VERSION {
            return Err(Error::format(format!("unsupported .kvt version {version}")));
        }
        let field = |i: usize| {
            let o = 6 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        };
        let dims = KVDims::new(field(0), field(1), field(2));
        dims.validate()?;
        let n = dims.elements()?;
        let payload = &bytes[KVT_HEADER_LEN..];
        let expected = n.checked_mul(8).ok_or(Error::Overflow)?;
        if payload.len() < expected {
            return Err(Error::format(format!(
                "truncated .kvt payload: {} bytes, dims {dims:?} need {expected}",
                payload.len()
            )));
        }
        if payload.len() > expected {
            return Err(Error::format(format!(
                ".kvt payload has {} trailing bytes beyond dims {dims:?}",
                payload.len() - expected
            )));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let (k, v) = floats.split_at(n);
        Self::from_parts(dims, k.to_vec(), v.to_vec())
    }
}

fn check_finite(xs: &[f32]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// Bytes of one tensor at `bytes_per_element` precision.
pub fn kv_size_bytes(dims: KVDims, bytes_per_element: u64) -> Result<u64> {
    if !matches!(bytes_per_element, 1 | 2 | 4) {
        return Err(Error::invalid(format!(
            "bytes_per_element must be 1, 2 or 4, got {bytes_per_element}"
        )));
    }
    [dims.n_tokens, dims.n_layers, dims.n_channels]
        .into_iter()
        .try_fold(bytes_per_element, |acc, n| acc.checked_mul(n as u64))
        .ok_or(Error::Overflow)
}

/// Parameters for [`synth_ar1`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dims: KVDims,
    /// Lag-one correlation along the token axis, in `[0, 1)`.
    pub rho: f64,
    /// Stationary standard deviation of every (layer, channel) series.
    pub sigma: f64,
    /// Scale of the per-(layer, channel) mean offsets.
    pub channel_offset_scale: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho must be in [0, 1), got {}", self.rho)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.channel_offset_scale >= 0.0 && self.channel_offset_scale.is_finite()) {
            return Err(Error::invalid("channel_offset_scale must be nonnegative"));
        }
        Ok(())
    }
}

/// Generates a cache whose every (layer, channel) series is a stationary AR(1)
/// process along the token axis.
///
/// The mean of series `(l, c)` is `channel_offset_scale * (u_l + w_c) / sqrt(2)`
/// with `u_l`, `w_c` standard normal draws, so values differ in distribution by
/// both layer and channel while each series keeps variance `sigma²`.
pub fn synth_ar1(spec: &SynthSpec) -> Result<KVCache> {
    spec.validate()?;
    let d = spec.dims;
    let mut cache = KVCache::new_zeros(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let innovation = (1.0 - spec.rho * spec.rho).sqrt() * spec.sigma;

    for tensor in [&mut cache.k, &mut cache.v] {
        let layer_offsets: Vec<f64> = (0..d.n_layers).map(|_| normal(&mut rng)).collect();
        let channel_offsets: Vec<f64> = (0..d.n_channels).map(|_| normal(&mut rng)).collect();
        for (l, ul) in layer_offsets.iter().enumerate() {
            for (c, wc) in channel_offsets.iter().enumerate() {
                let mu = spec.channel_offset_scale * (ul + wc) * std::f64::consts::FRAC_1_SQRT_2;
                let mut x = mu + spec.sigma * normal(&mut rng);
                for t in 0..d.n_tokens {
                    if t > 0 {
                        x = spec.rho * x + innovation * normal(&mut rng) + (1.0 - spec.rho) * mu;
                    }
                    tensor[(t * d.n_layers + l) * d.n_channels + c] = x as f32;
                }
            }
        }
    }
    Ok(cache)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
