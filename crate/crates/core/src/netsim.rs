//! Piecewise-constant bandwidth traces.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const TRACE_CSV_HEADER: [&str; 2] = ["time_s", "bandwidth_bps"];

/// Bandwidth as a step function of time. Segment `i` runs from `start_s[i]` to
/// `start_s[i + 1]`; the last segment lasts forever.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthTrace {
    segments: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomTraceSpec {
    pub min_bps: f64,
    pub max_bps: f64,
    pub segment_s: f64,
    pub n_segments: usize,
    pub seed: u64,
}

impl BandwidthTrace {
    /// `segments` holds `(start_s, bits_per_second)` pairs. The first start must
    /// be zero and starts must strictly increase.
    pub fn new(segments: Vec<(f64, f64)>) -> Result<Self> {
        let Some(&(first, _)) = segments.first() else {
            return Err(Error::invalid("trace has no segments"));
        };
        if first != 0.0 {
            return Err(Error::invalid(format!("trace starts at {first}, not 0")));
        }
        for (i, &(t, bps)) in segments.iter().enumerate() {
            if !t.is_finite() || !bps.is_finite() || bps <= 0.0 {
                return Err(Error::invalid(format!(
                    "segment {i}: time {t}, bandwidth {bps}"
                )));
            }
            if i > 0 && t <= segments[i - 1].0 {
                return Err(Error::invalid(format!(
                    "segment {i} start {t} is not after {}",
                    segments[i - 1].0
                )));
            }
        }
        Ok(BandwidthTrace { segments })
    }

    pub fn constant(bps: f64) -> Result<Self> {
        Self::new(vec![(0.0, bps)])
    }

    /// Uniform random rates in `[min_bps, max_bps]`, one per `segment_s` slot.
    pub fn random(spec: &RandomTraceSpec) -> Result<Self> {
        if !(spec.min_bps > 0.0 && spec.min_bps <= spec.max_bps && spec.max_bps.is_finite()) {
            return Err(Error::invalid(format!(
                "bad bandwidth range [{}, {}]",
                spec.min_bps, spec.max_bps
            )));
        }
        if !(spec.segment_s > 0.0 && spec.segment_s.is_finite()) || spec.n_segments == 0 {
            return Err(Error::invalid("random trace needs positive segments"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let segments = (0..spec.n_segments)
            .map(|i| {
                let bps = if spec.min_bps == spec.max_bps {
                    spec.min_bps
                } else {
                    rng.random_range(spec.min_bps..=spec.max_bps)
                };
                (i as f64 * spec.segment_s, bps)
            })
            .collect();
        Self::new(segments)
    }

    pub fn segments(&self) -> &[(f64, f64)] {
        &self.segments
    }

    pub fn bandwidth_at(&self, t: f64) -> f64 {
        let i = self.segments.partition_point(|&(s, _)| s <= t);
        self.segments[i.saturating_sub(1)].1
    }

    /// Bits deliverable in `[t0, t1]`.
    pub fn bits_between(&self, t0: f64, t1: f64) -> f64 {
        if t1 <= t0 {
            return 0.0;
        }
        let mut bits = 0.0;
        for (i, &(start, bps)) in self.segments.iter().enumerate() {
            let end = self.segments.get(i + 1).map_or(f64::INFINITY, |s| s.0);
            let lo = start.max(t0);
            let hi = end.min(t1);
            if hi > lo {
                bits += bps * (hi - lo);
            }
        }
        bits
    }

    /// Seconds needed to deliver `bits` starting at `t0`, integrating the
    /// trace exactly.
    pub fn transfer_time(&self, bits: f64, t0: f64) -> f64 {
        if bits <= 0.0 {
            return 0.0;
        }
        let mut left = bits;
        let first = self.segments.partition_point(|&(s, _)| s <= t0).saturating_sub(1);
        let mut t = t0;
        for i in first..self.segments.len() {
            let bps = self.segments[i].1;
            let end = self.segments.get(i + 1).map_or(f64::INFINITY, |s| s.0);
            let span = end - t;
            if bps * span >= left {
                return t + left / bps - t0;
            }
            left -= bps * span;
            t = end;
        }
        unreachable!("the last segment is unbounded")
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(csv::Reader::from_path(path)?)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        Self::from_csv_reader(csv::Reader::from_reader(text.as_bytes()))
    }

    fn from_csv_reader<R: std::io::Read>(mut rdr: csv::Reader<R>) -> Result<Self> {
        let headers = rdr.headers()?.clone();
        if headers.iter().map(str::trim).ne(TRACE_CSV_HEADER) {
            return Err(Error::format(format!(
                "trace header must be `{}`",
                TRACE_CSV_HEADER.join(",")
            )));
        }
        let mut segments = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::format(format!("trace row {}: bad field {i}", line + 1)))
            };
            segments.push((field(0)?, field(1)?));
        }
        Self::new(segments)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TRACE_CSV_HEADER)?;
        for &(t, bps) in &self.segments {
            w.write_record([t.to_string(), bps.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }
}
