//! Anchor/delta encoding over groups of contiguous tokens.
//!
//! The first token of every group (the anchor) is quantized on its own at 8 bits.
//! Every other token is stored as its difference from the *reconstructed* anchor,
//! quantized with the bin of its layer. Encoder and decoder therefore share one
//! reference, and a non-anchor element's total error is at most half its bin.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kvtensor::{KVCache, KVDims, Tensor};
use crate::quant::{self, AnchorScales, QuantConfig};

pub const DEFAULT_GROUP_SIZE: usize = 10;

/// Quantized symbols of one tensor (K or V) within one group.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGroup {
    pub anchor_scales: AnchorScales,
    /// `[layers, channels]`
    pub anchor_symbols: Vec<i8>,
    /// `[span - 1, layers, channels]`, token-major.
    pub delta_symbols: Vec<i16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupPayload {
    pub token_span: Range<usize>,
    pub k: TensorGroup,
    pub v: TensorGroup,
    /// Delta symbols that saturated the `i16` range.
    pub clipped: usize,
}

impl GroupPayload {
    pub fn tensor(&self, which: Tensor) -> &TensorGroup {
        match which {
            Tensor::Key => &self.k,
            Tensor::Value => &self.v,
        }
    }

    pub fn len(&self) -> usize {
        self.token_span.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_span.is_empty()
    }
}

/// Tiles `0..n_tokens` with ranges of `group_size`; only the last may be shorter.
pub fn split_groups(n_tokens: usize, group_size: usize) -> Vec<Range<usize>> {
    assert!(group_size >= 1, "group_size must be at least 1");
    (0..n_tokens)
        .step_by(group_size)
        .map(|start| start..(start + group_size).min(n_tokens))
        .collect()
}

pub fn encode_group(kv: &KVCache, span: Range<usize>, qc: &QuantConfig) -> Result<GroupPayload> {
    let dims = kv.dims();
    check_config(dims, qc)?;
    if span.is_empty() || span.end > dims.n_tokens {
        return Err(Error::shape(format!(
            "group span {span:?} invalid for {} tokens",
            dims.n_tokens
        )));
    }
    let stride = dims.token_stride();
    let elems = span.start * stride..span.end * stride;
    let (k, k_clipped) = encode_tensor(&kv.k()[elems.clone()], dims, qc)?;
    let (v, v_clipped) = encode_tensor(&kv.v()[elems], dims, qc)?;
    Ok(GroupPayload {
        token_span: span,
        k,
        v,
        clipped: k_clipped + v_clipped,
    })
}

fn encode_tensor(data: &[f32], dims: KVDims, qc: &QuantConfig) -> Result<(TensorGroup, usize)> {
    let stride = dims.token_stride();
    let (anchor, rest) = data.split_at(stride);
    let (anchor_scales, anchor_symbols) = quant::quantize_anchor(anchor, dims.n_channels)?;
    let reference = reference_values(&anchor_scales, &anchor_symbols, dims.n_channels);

    let mut clipped = 0;
    let mut delta_symbols = Vec::with_capacity(rest.len());
    for (i, token) in rest.chunks_exact(stride).enumerate() {
        for (j, (&x, &r)) in token.iter().zip(&reference).enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite(stride * (i + 1) + j));
            }
            let bin = qc.per_layer_bin[j / dims.n_channels] as f64;
            let (s, clip) = quant::quantize_value(x as f64 - r, bin);
            clipped += clip as usize;
            delta_symbols.push(s);
        }
    }
    Ok((
        TensorGroup {
            anchor_scales,
            anchor_symbols,
            delta_symbols,
        },
        clipped,
    ))
}

fn reference_values(scales: &AnchorScales, symbols: &[i8], n_channels: usize) -> Vec<f64> {
    symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| quant::anchor_value(s, scales.scale(i / n_channels)))
        .collect()
}

/// Reconstructs the group's tokens as a standalone cache of `payload.len()` tokens.
pub fn decode_group(payload: &GroupPayload, qc: &QuantConfig, dims: KVDims) -> Result<KVCache> {
    check_config(dims, qc)?;
    let span = payload.len();
    let out_dims = dims.with_tokens(span);
    let k = decode_tensor(&payload.k, span, out_dims, qc)?;
    let v = decode_tensor(&payload.v, span, out_dims, qc)?;
    KVCache::from_parts(out_dims, k, v)
}

fn decode_tensor(g: &TensorGroup, span: usize, dims: KVDims, qc: &QuantConfig) -> Result<Vec<f32>> {
    let stride = dims.token_stride();
    if span == 0
        || g.anchor_scales.0.len() != dims.n_layers
        || g.anchor_symbols.len() != stride
        || g.delta_symbols.len() != (span - 1) * stride
    {
        return Err(Error::shape(format!(
            "group payload inconsistent with {span} tokens of {dims:?}"
        )));
    }
    let reference = reference_values(&g.anchor_scales, &g.anchor_symbols, dims.n_channels);
    let mut out = Vec::with_capacity(span * stride);
    out.extend(reference.iter().map(|&r| r as f32));
    for token in g.delta_symbols.chunks_exact(stride) {
        out.extend(token.iter().zip(&reference).enumerate().map(|(j, (&s, &r))| {
            let bin = qc.per_layer_bin[j / dims.n_channels] as f64;
            (r + s as f64 * bin) as f32
        }));
    }
    Ok(out)
}

/// Encodes every group of `kv` in parallel. Output order follows token order.
pub fn encode_groups(kv: &KVCache, qc: &QuantConfig, group_size: usize) -> Result<Vec<GroupPayload>> {
    split_groups(kv.dims().n_tokens, group_size)
        .into_par_iter()
        .map(|span| encode_group(kv, span, qc))
        .collect()
}

/// Decodes groups in parallel and concatenates them in the given order.
pub fn decode_groups(payloads: &[GroupPayload], qc: &QuantConfig, dims: KVDims) -> Result<KVCache> {
    if payloads.is_empty() {
        return KVCache::new_zeros(dims.with_tokens(0));
    }
    let parts: Vec<KVCache> = payloads
        .par_iter()
        .map(|p| decode_group(p, qc, dims))
        .collect::<Result<_>>()?;
    KVCache::concat_tokens(&parts)
}

fn check_config(dims: KVDims, qc: &QuantConfig) -> Result<()> {
    if qc.n_layers() != dims.n_layers {
        return Err(Error::shape(format!(
            "quant config has {} layers, cache has {}",
            qc.n_layers(),
            dims.n_layers
        )));
    }
    Ok(())
}
