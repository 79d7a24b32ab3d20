//! Uniform delta quantization with layer-grouped bins, and 8-bit vectorwise
//! quantization for anchor tokens.

use crate::error::{Error, Result};

/// Base delta bins for the shallow, middle and deep thirds of the layers.
pub const BASE_BINS: [f32; 3] = [0.5, 1.0, 1.5];

pub const ANCHOR_BITS: u8 = 8;
pub const ANCHOR_MAX: i8 = 127;
pub const ANCHOR_EPS: f32 = 1e-8;

/// A bin-size preset. Lower ids keep more precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingLevel {
    pub id: u8,
    pub bin_multiplier: f32,
}

impl EncodingLevel {
    pub fn name(&self) -> String {
        format!("L{}", self.id)
    }
}

/// The four-level ladder L0..L3. L1 uses [`BASE_BINS`] unscaled.
pub fn default_levels() -> Vec<EncodingLevel> {
    [0.5, 1.0, 2.0, 4.0]
        .into_iter()
        .enumerate()
        .map(|(id, bin_multiplier)| EncodingLevel {
            id: id as u8,
            bin_multiplier,
        })
        .collect()
}

/// Medium level used when nothing is known about the network yet.
pub const DEFAULT_LEVEL: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantConfig {
    pub per_layer_bin: Vec<f32>,
    pub anchor_bits: u8,
}

impl QuantConfig {
    pub fn for_level(n_layers: usize, level: &EncodingLevel) -> Result<Self> {
        Self::from_group_bins(n_layers, BASE_BINS.map(|b| b * level.bin_multiplier))
    }

    /// Layers `[0, ⌊l/3⌋)` get `bins[0]`, `[⌊l/3⌋, ⌊2l/3⌋)` get `bins[1]`, the rest `bins[2]`.
    pub fn from_group_bins(n_layers: usize, bins: [f32; 3]) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::invalid("n_layers must be positive"));
        }
        if bins.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::invalid(format!("bins must be positive, got {bins:?}")));
        }
        if !(bins[0] <= bins[1] && bins[1] <= bins[2]) {
            return Err(Error::invalid(format!("bins must be nondecreasing, got {bins:?}")));
        }
        let (first, second) = (n_layers / 3, 2 * n_layers / 3);
        let per_layer_bin = (0..n_layers)
            .map(|l| {
                if l < first {
                    bins[0]
                } else if l < second {
                    bins[1]
                } else {
                    bins[2]
                }
            })
            .collect();
        Ok(QuantConfig {
            per_layer_bin,
            anchor_bits: ANCHOR_BITS,
        })
    }

    /// Accepts an explicit per-layer bin array, e.g. one read from a chunk header.
    pub fn from_per_layer(per_layer_bin: Vec<f32>) -> Result<Self> {
        if per_layer_bin.is_empty() || per_layer_bin.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::invalid("per-layer bins must be positive and finite"));
        }
        Ok(QuantConfig {
            per_layer_bin,
            anchor_bits: ANCHOR_BITS,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer_bin.len()
    }
}

/// Quantizes one value, returning the symbol and whether it was clipped to `i16`.
pub fn quantize_value(x: f64, bin: f64) -> (i16, bool) {
    let q = (x / bin).round();
    if q > i16::MAX as f64 {
        (i16::MAX, true)
    } else if q < i16::MIN as f64 {
        (i16::MIN, true)
    } else {
        (q as i16, false)
    }
}

/// `round_half_away_from_zero(x / bin)`, clipped to the `i16` range.
pub fn quantize_uniform(values: &[f32], bin: f32) -> Result<Vec<i16>> {
    check_bin(bin)?;
    values
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if !x.is_finite() {
                return Err(Error::NonFinite(i));
            }
            Ok(quantize_value(x as f64, bin as f64).0)
        })
        .collect()
}

pub fn dequantize_uniform(symbols: &[i16], bin: f32) -> Vec<f32> {
    symbols.iter().map(|&s| (s as f64 * bin as f64) as f32).collect()
}

fn check_bin(bin: f32) -> Result<()> {
    if bin > 0.0 && bin.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("bin must be positive, got {bin}")))
    }
}

/// Per-layer rescaling factors of one anchor token's tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorScales(pub Vec<f32>);

impl AnchorScales {
    pub fn scale(&self, layer: usize) -> f32 {
        self.0[layer]
    }
}

/// Vectorwise 8-bit quantization of an `[n_layers, n_channels]` anchor slice: each
/// layer row is scaled so its max magnitude maps to 127.
pub fn quantize_anchor(anchor: &[f32], n_channels: usize) -> Result<(AnchorScales, Vec<i8>)> {
    if n_channels == 0 || anchor.len() % n_channels != 0 {
        return Err(Error::shape(format!(
            "anchor of {} values is not a whole number of {n_channels}-channel rows",
            anchor.len()
        )));
    }
    let mut scales = Vec::with_capacity(anchor.len() / n_channels);
    let mut symbols = Vec::with_capacity(anchor.len());
    for (row_idx, row) in anchor.chunks_exact(n_channels).enumerate() {
        if let Some(i) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(row_idx * n_channels + i));
        }
        let max_abs = row.iter().fold(0.0f32, |m, x| m.max(x.abs()));
        let scale = ANCHOR_MAX as f32 / max_abs.max(ANCHOR_EPS);
        scales.push(scale);
        symbols.extend(row.iter().map(|&x| {
            let q = (x as f64 * scale as f64).round();
            q.clamp(-(ANCHOR_MAX as f64), ANCHOR_MAX as f64) as i8
        }));
    }
    Ok((AnchorScales(scales), symbols))
}

/// Reconstructed anchor value in double precision. Deltas are taken against this.
pub fn anchor_value(symbol: i8, scale: f32) -> f64 {
    symbol as f64 / scale as f64
}

pub fn dequantize_anchor(scales: &AnchorScales, symbols: &[i8], n_channels: usize) -> Result<Vec<f32>> {
    if symbols.len() != scales.0.len() * n_channels {
        return Err(Error::shape(format!(
            "{} anchor symbols for {} layers × {n_channels} channels",
            symbols.len(),
            scales.0.len()
        )));
    }
    Ok(symbols
        .chunks_exact(n_channels)
        .zip(&scales.0)
        .flat_map(|(row, &scale)| row.iter().map(move |&s| anchor_value(s, scale) as f32))
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn ladder() {
        let levels = default_levels();
        assert_eq!(levels.len(), 4);
        assert!(levels.windows(2).all(|w| w[0].bin_multiplier < w[1].bin_multiplier));
        assert_eq!(levels[1].bin_multiplier, 1.0);

        let l0 = QuantConfig::for_level(3, &levels[0]).unwrap();
        assert_eq!(l0.per_layer_bin, vec![0.25, 0.5, 0.75]);
        let l3 = QuantConfig::for_level(3, &levels[3]).unwrap();
        assert_eq!(l3.per_layer_bin, vec![2.0, 4.0, 6.0]);
        assert_eq!(l3.anchor_bits, 8);
    }

    #[test]
    fn default_level_32_layers() {
        let qc = QuantConfig::for_level(32, &default_levels()[1]).unwrap();
        // boundaries at floor(32/3) = 10 and floor(64/3) = 21
        assert!(qc.per_layer_bin[..10].iter().all(|&b| b == 0.5));
        assert!(qc.per_layer_bin[10..21].iter().all(|&b| b == 1.0));
        assert!(qc.per_layer_bin[21..].iter().all(|&b| b == 1.5));
    }

    #[test]
    fn layer_groups_are_nondecreasing() {
        for l in 1..40 {
            for level in default_levels() {
                let qc = QuantConfig::for_level(l, &level).unwrap();
                assert!(qc.per_layer_bin.windows(2).all(|w| w[0] <= w[1]), "l={l}");
            }
        }
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(quantize_uniform(&[0.74], 0.5).unwrap(), vec![1]);
        assert_eq!(quantize_uniform(&[-1.5], 1.0).unwrap(), vec![-2]);
        assert_eq!(quantize_uniform(&[0.0], 0.3).unwrap(), vec![0]);
        assert_eq!(quantize_uniform(&[1e9], 1.0).unwrap(), vec![i16::MAX]);
        assert_eq!(dequantize_uniform(&[1], 0.5), vec![0.5]);
        assert_eq!(dequantize_uniform(&[0], 0.7), vec![0.0]);
        assert!(quantize_uniform(&[f32::INFINITY], 1.0).is_err());
        assert!(quantize_uniform(&[1.0], 0.0).is_err());
    }

    #[test]
    fn uniform_round_trip_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f32> = (0..100_000).map(|_| rng.random_range(-10.0f32..10.0)).collect();
        let back = dequantize_uniform(&quantize_uniform(&xs, 1.5).unwrap(), 1.5);
        let max_err = xs
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 0.75, "{max_err}");
    }

    #[test]
    fn anchor_examples() {
        let (scales, syms) = quantize_anchor(&[0.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(scales.0, vec![127.0 / 1e-8]);
        assert_eq!(syms, vec![0, 0, 0]);
        assert_eq!(dequantize_anchor(&scales, &syms, 3).unwrap(), vec![0.0; 3]);

        let (scales, syms) = quantize_anchor(&[1.0, -1.0], 2).unwrap();
        assert_eq!(scales.0, vec![127.0]);
        assert_eq!(syms, vec![127, -127]);
        assert_eq!(
            dequantize_anchor(&AnchorScales(vec![127.0]), &[127], 1).unwrap(),
            vec![1.0]
        );
        assert!(quantize_anchor(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn anchor_error_bound_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let span = rng.random_range(0.01f32..100.0);
            let row: Vec<f32> = (0..16).map(|_| rng.random_range(-span..span)).collect();
            let (scales, syms) = quantize_anchor(&row, 16).unwrap();
            let back = dequantize_anchor(&scales, &syms, 16).unwrap();
            let m = row.iter().fold(0.0f32, |a, x| a.max(x.abs()));
            for (x, y) in row.iter().zip(&back) {
                // half a step is m/254; allow f32 output rounding
                assert!((x - y).abs() <= m / 254.0 * 1.0001, "{x} {y} {m}");
                assert!((x - y).abs() <= m / 127.0);
            }
        }
    }

    proptest! {
        #[test]
        fn uniform_error_bound(u in -1.0f32..1.0, bin in 0.01f32..8.0) {
            // stay inside the i16 clip range
            let x = u * bin * 32_000.0;
            let q = quantize_uniform(&[x], bin).unwrap();
            let y = dequantize_uniform(&q, bin)[0];
            let slack = f32::EPSILON * (x.abs() + bin);
            prop_assert!((x - y).abs() <= bin / 2.0 + slack);
        }

        #[test]
        fn anchor_bound_is_level_independent(row in proptest::collection::vec(-50.0f32..50.0, 1..32)) {
            let n = row.len();
            let (scales, syms) = quantize_anchor(&row, n).unwrap();
            let back = dequantize_anchor(&scales, &syms, n).unwrap();
            let m = row.iter().fold(0.0f32, |a, x| a.max(x.abs())).max(ANCHOR_EPS);
            for (x, y) in row.iter().zip(&back) {
                prop_assert!((x - y).abs() <= m / 127.0);
            }
        }
    }
}
