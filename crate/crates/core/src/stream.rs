//! SLO-driven chunk streaming: the per-chunk configuration adapter, the TTFT
//! estimator and a deterministic two-stage (transfer, process) simulator.
//!
//! Each chunk is sent either as raw text tokens, which the receiver then
//! recomputes, or as a KV bitstream at one encoding level, which it decodes.
//! Transfers run back to back after one round trip. Processing of chunk `i`
//! starts once its transfer has finished and chunk `i - 1` has been processed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::codec::{parse_level_name, Manifest};
use crate::error::{Error, Result};
use crate::netsim::BandwidthTrace;
use crate::quant::DEFAULT_LEVEL;

pub const TEXT_BYTES_PER_TOKEN: u64 = 4;
pub const SESSION_CSV_HEADER: [&str; 7] = [
    "chunk_id",
    "config",
    "start_s",
    "end_s",
    "bytes",
    "throughput_bps",
    "cumulative_s",
];
pub const REPORT_CSV_HEADER: [&str; 9] = [
    "trace",
    "slo_s",
    "violation_rate",
    "mean_finish_s",
    "quality_text",
    "quality_L0",
    "quality_L1",
    "quality_L2",
    "quality_L3",
];
const REPORTED_LEVELS: u8 = 4;
/// Relative slack on deadline comparisons so exact ties are not lost to rounding.
const DEADLINE_EPS: f64 = 1e-9;

/// How one chunk is delivered. Quality order: `Text`, then `Level(0)`,
/// `Level(1)`, and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StreamingConfig {
    Text,
    Level(u8),
}

impl StreamingConfig {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "text" | "Text" => Some(StreamingConfig::Text),
            _ => parse_level_name(s).map(StreamingConfig::Level),
        }
    }

    pub fn is_text(&self) -> bool {
        matches!(self, StreamingConfig::Text)
    }
}

impl fmt::Display for StreamingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamingConfig::Text => f.write_str("text"),
            StreamingConfig::Level(id) => write!(f, "L{id}"),
        }
    }
}

/// Compute-side delays.
///
/// Prefilling `r` new tokens on top of `h` resident ones costs
/// `a·r² + b·r·h + c·r` seconds; decoding a KV bitstream costs `d` seconds per
/// byte. Both are multiplied by `slowdown` (GPU contention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub rtt: f64,
    pub slowdown: f64,
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel::zero()
    }
}

impl DelayModel {
    pub fn zero() -> Self {
        DelayModel {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
            rtt: 0.0,
            slowdown: 1.0,
        }
    }

    pub fn new(a: f64, b: f64, c: f64, d: f64, rtt: f64) -> Result<Self> {
        let dm = DelayModel {
            a,
            b,
            c,
            d,
            rtt,
            slowdown: 1.0,
        };
        dm.validate()?;
        Ok(dm)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("d", self.d),
            ("rtt", self.rtt),
            ("slowdown", self.slowdown),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("delay model {name} = {v}")));
            }
        }
        Ok(())
    }
}

pub fn text_recompute_time(dm: &DelayModel, tokens_remaining: usize, tokens_resident: usize) -> f64 {
    let r = tokens_remaining as f64;
    let h = tokens_resident as f64;
    dm.slowdown * (dm.a * r * r + dm.b * r * h + dm.c * r)
}

pub fn decode_time(dm: &DelayModel, bytes: u64) -> f64 {
    dm.slowdown * dm.d * bytes as f64
}

/// `8·S/B + rtt + d·S` plus prefilling the prompt on top of the context.
pub fn estimate_ttft(
    size_bytes: u64,
    bandwidth_bps: f64,
    dm: &DelayModel,
    context_tokens: usize,
    prompt_tokens: usize,
) -> Result<f64> {
    if !(bandwidth_bps > 0.0 && bandwidth_bps.is_finite()) {
        return Err(Error::invalid(format!("bandwidth {bandwidth_bps}")));
    }
    Ok(8.0 * size_bytes as f64 / bandwidth_bps
        + dm.rtt
        + decode_time(dm, size_bytes)
        + text_recompute_time(dm, prompt_tokens, context_tokens))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub tokens: usize,
    /// Encoded bytes per level, in the plan's level order.
    pub sizes: Vec<u64>,
}

/// Sizes-only view of a chunk library: what the adapter and simulator need.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamPlan {
    levels: Vec<u8>,
    chunks: Vec<ChunkPlan>,
}

impl StreamPlan {
    /// `levels` must be strictly increasing (best quality first).
    pub fn new(levels: Vec<u8>, chunks: Vec<ChunkPlan>) -> Result<Self> {
        if levels.is_empty() || chunks.is_empty() {
            return Err(Error::invalid("plan needs at least one level and one chunk"));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("levels {levels:?} not strictly increasing")));
        }
        for (i, c) in chunks.iter().enumerate() {
            if c.sizes.len() != levels.len() || c.tokens == 0 {
                return Err(Error::invalid(format!(
                    "chunk {i}: {} tokens, {} sizes for {} levels",
                    c.tokens,
                    c.sizes.len(),
                    levels.len()
                )));
            }
        }
        Ok(StreamPlan { levels, chunks })
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let mut order: Vec<usize> = (0..m.levels.len()).collect();
        order.sort_by_key(|&i| m.levels[i].id);
        Self::new(
            order.iter().map(|&i| m.levels[i].id).collect(),
            m.chunks
                .iter()
                .map(|c| ChunkPlan {
                    tokens: c.tokens(),
                    sizes: order.iter().map(|&i| c.sizes[i]).collect(),
                })
                .collect(),
        )
    }

    /// Multiplies every encoded size by `factor`, rounding to whole bytes.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::invalid(format!("scale factor {factor}")));
        }
        let chunks = self
            .chunks
            .iter()
            .map(|c| ChunkPlan {
                tokens: c.tokens,
                sizes: c.sizes.iter().map(|&s| (s as f64 * factor).round() as u64).collect(),
            })
            .collect();
        Self::new(self.levels.clone(), chunks)
    }

    pub fn levels(&self) -> &[u8] {
        &self.levels
    }

    pub fn chunks(&self) -> &[ChunkPlan] {
        &self.chunks
    }

    pub fn total_tokens(&self) -> usize {
        self.chunks.iter().map(|c| c.tokens).sum()
    }

    /// Every configuration, best quality first.
    pub fn configs(&self) -> Vec<StreamingConfig> {
        std::iter::once(StreamingConfig::Text)
            .chain(self.levels.iter().map(|&l| StreamingConfig::Level(l)))
            .collect()
    }

    pub fn bytes(&self, chunk: usize, config: StreamingConfig) -> Result<u64> {
        let c = &self.chunks[chunk];
        match config {
            StreamingConfig::Text => Ok(c.tokens as u64 * TEXT_BYTES_PER_TOKEN),
            StreamingConfig::Level(id) => {
                let i = self
                    .levels
                    .iter()
                    .position(|&l| l == id)
                    .ok_or_else(|| Error::invalid(format!("level L{id} not in plan")))?;
                Ok(c.sizes[i])
            }
        }
    }

    fn tokens_before(&self, chunk: usize) -> usize {
        self.chunks[..chunk].iter().map(|c| c.tokens).sum()
    }

    fn process_time(&self, chunk: usize, config: StreamingConfig, dm: &DelayModel) -> Result<f64> {
        Ok(match config {
            StreamingConfig::Text => {
                text_recompute_time(dm, self.chunks[chunk].tokens, self.tokens_before(chunk))
            }
            StreamingConfig::Level(_) => decode_time(dm, self.bytes(chunk, config)?),
        })
    }
}

/// What the adapter knows when choosing the configuration for `next_chunk`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterState {
    pub next_chunk: usize,
    /// Session time at which the next transfer can begin.
    pub elapsed_s: f64,
    /// Session time at which the receiver finishes processing earlier chunks.
    pub busy_until_s: f64,
    /// Throughput of the previous transfer, or a prior estimate.
    pub throughput_bps: Option<f64>,
}

/// Finish time if every remaining chunk used `config` and the throughput held.
pub fn predict_finish(
    plan: &StreamPlan,
    state: &AdapterState,
    config: StreamingConfig,
    throughput_bps: f64,
    dm: &DelayModel,
) -> Result<f64> {
    let mut t = state.elapsed_s;
    let mut busy = state.busy_until_s;
    for i in state.next_chunk..plan.chunks.len() {
        t += 8.0 * plan.bytes(i, config)? as f64 / throughput_bps;
        busy = t.max(busy) + plan.process_time(i, config, dm)?;
    }
    Ok(busy.max(t))
}

fn meets(finish: f64, slo: f64) -> bool {
    finish <= slo + DEADLINE_EPS * slo.abs().max(1.0)
}

/// Chooses the configuration for the next chunk.
///
/// Without a throughput estimate this is the default medium level. Otherwise it
/// is the best configuration (text first, then levels by quality) whose use for
/// all remaining chunks is predicted to finish within the SLO, or the smallest
/// level if none is.
pub fn adapt_next_config(
    plan: &StreamPlan,
    state: &AdapterState,
    slo_s: f64,
    dm: &DelayModel,
) -> Result<StreamingConfig> {
    if state.next_chunk >= plan.chunks.len() {
        return Err(Error::invalid("no chunks remain"));
    }
    let Some(thr) = state.throughput_bps.filter(|t| *t > 0.0) else {
        let level = if plan.levels.contains(&DEFAULT_LEVEL) {
            DEFAULT_LEVEL
        } else {
            plan.levels[plan.levels.len() / 2]
        };
        return Ok(StreamingConfig::Level(level));
    };
    for config in plan.configs() {
        if meets(predict_finish(plan, state, config, thr, dm)?, slo_s) {
            return Ok(config);
        }
    }
    let remaining = |l: u8| -> Result<u64> {
        (state.next_chunk..plan.chunks.len())
            .map(|i| plan.bytes(i, StreamingConfig::Level(l)))
            .sum()
    };
    let mut best = plan.levels[0];
    for &l in &plan.levels[1..] {
        if remaining(l)? <= remaining(best)? {
            best = l;
        }
    }
    Ok(StreamingConfig::Level(best))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Adaptive { prior_bps: Option<f64> },
    Fixed(StreamingConfig),
    Scripted(Vec<StreamingConfig>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionParams {
    pub slo_s: f64,
    pub dm: DelayModel,
    pub prompt_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkRecord {
    pub chunk_id: usize,
    pub config: StreamingConfig,
    pub start_s: f64,
    pub end_s: f64,
    pub bytes: u64,
    pub throughput_bps: f64,
    /// Session time at which this chunk's KV is resident.
    pub cumulative_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSession {
    pub slo_s: f64,
    pub records: Vec<ChunkRecord>,
    /// All KV resident.
    pub finish_s: f64,
    /// `finish_s` plus prompt prefill.
    pub ttft_s: f64,
    pub violated: bool,
    /// Fraction of context tokens delivered per configuration.
    pub quality: BTreeMap<StreamingConfig, f64>,
}

pub fn stream_context(
    plan: &StreamPlan,
    trace: &BandwidthTrace,
    params: &SessionParams,
    policy: &Policy,
) -> Result<StreamSession> {
    params.dm.validate()?;
    if !(params.slo_s.is_finite() && params.slo_s >= 0.0) {
        return Err(Error::invalid(format!("slo {}", params.slo_s)));
    }
    if let Policy::Scripted(seq) = policy {
        if seq.len() != plan.chunks.len() {
            return Err(Error::invalid(format!(
                "script has {} configs for {} chunks",
                seq.len(),
                plan.chunks.len()
            )));
        }
    }
    let dm = &params.dm;
    let mut t = dm.rtt;
    let mut busy = 0.0f64;
    let mut thr = match policy {
        Policy::Adaptive { prior_bps } => *prior_bps,
        _ => None,
    };
    let mut records = Vec::with_capacity(plan.chunks.len());
    let mut tokens_by_config: BTreeMap<StreamingConfig, usize> = BTreeMap::new();
    for i in 0..plan.chunks.len() {
        let config = match policy {
            Policy::Adaptive { .. } => adapt_next_config(
                plan,
                &AdapterState {
                    next_chunk: i,
                    elapsed_s: t,
                    busy_until_s: busy,
                    throughput_bps: thr,
                },
                params.slo_s,
                dm,
            )?,
            Policy::Fixed(c) => *c,
            Policy::Scripted(seq) => seq[i],
        };
        let bytes = plan.bytes(i, config)?;
        let dt = trace.transfer_time(8.0 * bytes as f64, t);
        let end = t + dt;
        let measured = if dt > 0.0 {
            8.0 * bytes as f64 / dt
        } else {
            trace.bandwidth_at(t)
        };
        busy = end.max(busy) + plan.process_time(i, config, dm)?;
        records.push(ChunkRecord {
            chunk_id: i,
            config,
            start_s: t,
            end_s: end,
            bytes,
            throughput_bps: measured,
            cumulative_s: busy,
        });
        *tokens_by_config.entry(config).or_default() += plan.chunks[i].tokens;
        t = end;
        thr = Some(measured);
    }
    let total = plan.total_tokens() as f64;
    let finish_s = busy.max(t);
    Ok(StreamSession {
        slo_s: params.slo_s,
        records,
        finish_s,
        ttft_s: finish_s + text_recompute_time(dm, params.prompt_tokens, plan.total_tokens()),
        violated: !meets(finish_s, params.slo_s),
        quality: tokens_by_config
            .into_iter()
            .map(|(c, n)| (c, n as f64 / total))
            .collect(),
    })
}

/// Exhaustively searches all per-chunk configuration sequences for one that
/// meets the SLO. Exponential in the chunk count.
pub fn oracle_feasible_sequence(
    plan: &StreamPlan,
    trace: &BandwidthTrace,
    params: &SessionParams,
) -> Result<Option<Vec<StreamingConfig>>> {
    let configs = plan.configs();
    let n = plan.chunks.len();
    let mut digits = vec![0usize; n];
    loop {
        let seq: Vec<_> = digits.iter().map(|&d| configs[d]).collect();
        let s = stream_context(plan, trace, params, &Policy::Scripted(seq.clone()))?;
        if !s.violated {
            return Ok(Some(seq));
        }
        let mut i = 0;
        loop {
            if i == n {
                return Ok(None);
            }
            digits[i] += 1;
            if digits[i] < configs.len() {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
    }
}

fn check_label(name: &str) -> Result<()> {
    if name.contains([',', '=', '\n', '\r', '"']) {
        return Err(Error::invalid(format!("trace name `{name}` has reserved characters")));
    }
    Ok(())
}

/// The per-session figures that `report` aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSummary {
    pub trace: String,
    pub slo_s: f64,
    pub violated: bool,
    pub finish_s: f64,
    pub ttft_s: f64,
    pub quality_text: f64,
    pub quality_levels: [f64; REPORTED_LEVELS as usize],
}

impl StreamSession {
    pub fn summary(&self, trace: &str) -> SessionSummary {
        let q = |c| self.quality.get(&c).copied().unwrap_or(0.0);
        SessionSummary {
            trace: trace.to_string(),
            slo_s: self.slo_s,
            violated: self.violated,
            finish_s: self.finish_s,
            ttft_s: self.ttft_s,
            quality_text: q(StreamingConfig::Text),
            quality_levels: std::array::from_fn(|l| q(StreamingConfig::Level(l as u8))),
        }
    }

    /// Per-chunk rows under [`SESSION_CSV_HEADER`], then one `#`-prefixed
    /// summary line of `key=value` pairs.
    pub fn to_csv(&self, trace: &str) -> Result<String> {
        check_label(trace)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SESSION_CSV_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.chunk_id.to_string(),
                r.config.to_string(),
                r.start_s.to_string(),
                r.end_s.to_string(),
                r.bytes.to_string(),
                r.throughput_bps.to_string(),
                r.cumulative_s.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        let mut out = String::from_utf8(bytes).expect("csv output is utf-8");
        out.push_str(&self.summary(trace).to_line());
        out.push('\n');
        Ok(out)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, trace: &str) -> Result<()> {
        std::fs::write(path, self.to_csv(trace)?)?;
        Ok(())
    }
}

impl SessionSummary {
    fn to_line(&self) -> String {
        let mut fields = vec![
            format!("violated={}", u8::from(self.violated)),
            format!("finish_s={}", self.finish_s),
            format!("ttft_s={}", self.ttft_s),
            format!("slo_s={}", self.slo_s),
        ];
        for (l, q) in self.quality_levels.iter().enumerate() {
            fields.push(format!("quality_L{l}={q}"));
        }
        fields.push(format!("quality_text={}", self.quality_text));
        fields.push(format!("trace={}", self.trace));
        format!("#{}", fields.join(","))
    }

    /// Reads the summary line of a session CSV.
    pub fn from_session_csv(text: &str) -> Result<Self> {
        let line = text
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix('#'))
            .ok_or_else(|| Error::format("session csv has no summary line"))?;
        let mut kv = BTreeMap::new();
        for field in line.split(',') {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad summary field `{field}`")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::format(format!("summary lacks `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("summary `{k}` is not a number")))
        };
        let violated = match get("violated")? {
            "0" => false,
            "1" => true,
            v => return Err(Error::format(format!("violated={v}"))),
        };
        let mut quality_levels = [0.0; REPORTED_LEVELS as usize];
        for (l, q) in quality_levels.iter_mut().enumerate() {
            *q = num(&format!("quality_L{l}"))?;
        }
        Ok(SessionSummary {
            trace: get("trace")?.to_string(),
            slo_s: num("slo_s")?,
            violated,
            finish_s: num("finish_s")?,
            ttft_s: num("ttft_s")?,
            quality_text: num("quality_text")?,
            quality_levels,
        })
    }
}

/// One row of the aggregate report: sessions sharing a trace and SLO.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub trace: String,
    pub slo_s: f64,
    pub violation_rate: f64,
    pub mean_finish_s: f64,
    pub quality_text: f64,
    pub quality_levels: [f64; REPORTED_LEVELS as usize],
}

/// Groups sessions by (trace, SLO), averaging the verdicts and quality mix.
pub fn aggregate_sessions(sessions: &[SessionSummary]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, u64), Vec<&SessionSummary>> = BTreeMap::new();
    for s in sessions {
        groups
            .entry((s.trace.clone(), s.slo_s.to_bits()))
            .or_default()
            .push(s);
    }
    groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            let mean = |f: &dyn Fn(&SessionSummary) -> f64| g.iter().map(|s| f(s)).sum::<f64>() / n;
            ReportRow {
                trace: g[0].trace.clone(),
                slo_s: g[0].slo_s,
                violation_rate: mean(&|s| f64::from(u8::from(s.violated))),
                mean_finish_s: mean(&|s| s.finish_s),
                quality_text: mean(&|s| s.quality_text),
                quality_levels: std::array::from_fn(|l| mean(&|s| s.quality_levels[l])),
            }
        })
        .collect()
}

pub fn report_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_CSV_HEADER)?;
    for r in rows {
        check_label(&r.trace)?;
        let mut rec = vec![
            r.trace.clone(),
            r.slo_s.to_string(),
            r.violation_rate.to_string(),
            r.mean_finish_s.to_string(),
            r.quality_text.to_string(),
        ];
        rec.extend(r.quality_levels.iter().map(f64::to_string));
        w.write_record(rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn report_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    if rdr.headers()?.iter().ne(REPORT_CSV_HEADER) {
        return Err(Error::format(format!(
            "report header must be `{}`",
            REPORT_CSV_HEADER.join(",")
        )));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format(format!("report field {i} is not a number")))
            };
            Ok(ReportRow {
                trace: rec.get(0).unwrap_or_default().to_string(),
                slo_s: num(1)?,
                violation_rate: num(2)?,
                mean_finish_s: num(3)?,
                quality_text: num(4)?,
                quality_levels: [num(5)?, num(6)?, num(7)?, num(8)?],
            })
        })
        .collect()
}
