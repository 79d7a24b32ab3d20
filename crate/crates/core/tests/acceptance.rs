//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` are expected to fail on the synthetic
//! corpus; the process exits non-zero only when an outcome differs from
//! expectation.

mod common;

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;
use std::time::Instant;

use cachegen::codec::{
    build_library, decode_chunk, encode_chunk, encode_chunk_counting_clips, profile_cache,
    reconstruction_stats, ChunkLibrary,
};
use cachegen::entropy::{
    ac_decode, ac_encode, grouped_entropy_bits, FrequencyTable, ModelProfiler, SymbolModel, TableId,
};
use cachegen::grouping::encode_groups;
use cachegen::kvstore::{ChunkKey, KeyLevel, KvClient, KvServer, ServerConfig};
use cachegen::kvtensor::{synth_ar1, KVCache, KVDims, SynthSpec, Tensor};
use cachegen::netsim::{BandwidthTrace, RandomTraceSpec};
use cachegen::quant::{
    default_levels, dequantize_anchor, quantize_anchor, quantize_value, QuantConfig,
};
use cachegen::stream::{
    estimate_ttft, oracle_feasible_sequence, stream_context, ChunkPlan, DelayModel, Policy,
    SessionParams, StreamPlan, StreamingConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const KNOWN_FAILURES: &[u32] = &[4, 8, 9];
const GROUP_SIZE: usize = common::GROUP_SIZE;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// The shared corpus: 12000 tokens × 8 layers × 64 channels, offsets at 2σ.
struct Corpus {
    kv: KVCache,
    model: SymbolModel,
    library: ChunkLibrary,
}

fn corpus_spec(n_tokens: usize) -> SynthSpec {
    SynthSpec {
        dims: KVDims::new(n_tokens, 8, 64),
        rho: 0.98,
        sigma: 1.0,
        channel_offset_scale: 2.0,
        seed: 5,
    }
}

fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let kv = synth_ar1(&corpus_spec(12_000)).unwrap();
        let mut p = ModelProfiler::new(8, 64);
        profile_cache(&mut p, &kv, &default_levels(), GROUP_SIZE).unwrap();
        let model = p.finish().unwrap();
        let library = build_library(&kv, "acceptance", 1500, &default_levels(), &model, GROUP_SIZE).unwrap();
        Corpus { kv, model, library }
    })
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn random_model(rng: &mut ChaCha8Rng) -> SymbolModel {
    let (l, c) = (rng.random_range(1..=4), rng.random_range(1..=8));
    let mut p = ModelProfiler::new(l, c);
    for layer in 0..l {
        for ch in 0..c {
            let spread = rng.random_range(1..=60);
            for _ in 0..rng.random_range(1..200) {
                p.observe(TableId::anchor(layer, ch), rng.random_range(-spread..=spread)).unwrap();
                let s = if rng.random_bool(0.02) {
                    rng.random::<i16>()
                } else {
                    rng.random_range(-spread..=spread) / 4
                };
                p.observe(TableId::delta(layer, ch), s).unwrap();
            }
        }
    }
    p.finish().unwrap()
}

fn c1_lossless() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let models: Vec<SymbolModel> = (0..20).map(|_| random_model(&mut rng)).collect();
    let (mut failures, mut escapes, mut symbols) = (0usize, 0usize, 0usize);
    for i in 0..10_000 {
        let m = &models[i % models.len()];
        let n = rng.random_range(0..=400);
        let mut sel = Vec::with_capacity(n);
        let mut sym = Vec::with_capacity(n);
        for _ in 0..n {
            let (layer, ch) = (rng.random_range(0..m.n_layers()), rng.random_range(0..m.n_channels()));
            if rng.random_bool(0.3) {
                sel.push(TableId::anchor(layer, ch));
                sym.push(rng.random_range(-127..=127));
            } else {
                sel.push(TableId::delta(layer, ch));
                let s: i16 = match rng.random_range(0..20) {
                    0 => rng.random(),
                    1 => [i16::MIN, i16::MAX, 256, -256][rng.random_range(0..4)],
                    2 => rng.random_range(-255..=255),
                    _ => rng.random_range(-6..=6),
                };
                if s.unsigned_abs() > m.delta_half_width() {
                    escapes += 1;
                }
                sym.push(s);
            }
        }
        symbols += n;
        let ok = ac_encode(m, &sel, &sym)
            .and_then(|bits| ac_decode(m, &bits, &sel))
            .is_ok_and(|back| back == sym);
        failures += usize::from(!ok);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && escapes > 0 && secs < 60.0,
        format!("10000 tensors, {symbols} symbols, {escapes} escapes, {failures} mismatches, {secs:.1} s"),
    )
}

/// Elements whose reconstruction error exceeds the anchor or delta bound.
fn bound_violations(original: &KVCache, decoded: &KVCache, qc: &QuantConfig) -> usize {
    let d = original.dims();
    let mut bad = 0;
    for t in Tensor::BOTH {
        let (x, y) = (original.tensor(t), decoded.tensor(t));
        for tok in 0..d.n_tokens {
            for l in 0..d.n_layers {
                let row = original.index(tok, l, 0)..original.index(tok, l, 0) + d.n_channels;
                let bound = if tok % GROUP_SIZE == 0 {
                    x[row.clone()].iter().fold(0f32, |m, v| m.max(v.abs())).max(1e-8) / 127.0
                } else {
                    qc.per_layer_bin[l] / 2.0
                };
                for i in row {
                    let slack = f32::EPSILON * (x[i].abs() + 2.0 * bound);
                    bad += usize::from((x[i] - y[i]).abs() > bound + slack);
                }
            }
        }
    }
    bad
}

fn c2_error_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut violations, mut clips, mut elements) = (0usize, 0usize, 0usize);
    for level in default_levels() {
        for _ in 0..100 {
            let spec = SynthSpec {
                dims: KVDims::new(rng.random_range(1..=64), rng.random_range(1..=6), rng.random_range(1..=16)),
                rho: rng.random_range(0.0..0.99),
                sigma: rng.random_range(0.1..5.0),
                channel_offset_scale: rng.random_range(0.0..4.0),
                seed: rng.random(),
            };
            let kv = synth_ar1(&spec).unwrap();
            let d = kv.dims();
            let mut p = ModelProfiler::new(d.n_layers, d.n_channels);
            profile_cache(&mut p, &kv, &[level], GROUP_SIZE).unwrap();
            let model = p.finish().unwrap();
            let (chunk, clipped) = encode_chunk_counting_clips(&kv, 0, &level, &model, GROUP_SIZE).unwrap();
            let decoded = decode_chunk(&chunk.to_bytes().unwrap(), &model).unwrap();
            let qc = QuantConfig::for_level(d.n_layers, &level).unwrap();
            violations += bound_violations(&kv, &decoded, &qc);
            clips += clipped;
            elements += 2 * d.elements().unwrap();
        }
    }
    outcome(
        violations == 0 && clips == 0,
        format!("400 chunks, {elements} elements, {violations} bound violations, {clips} clips"),
    )
}

fn c3_delta_shrinkage() -> Outcome {
    let rho = 0.98;
    let kv = synth_ar1(&SynthSpec {
        dims: KVDims::new(20_000, 4, 32),
        rho,
        sigma: 1.0,
        channel_offset_scale: 2.0,
        seed: 3,
    })
    .unwrap();
    let d = kv.dims();
    let row = d.n_layers * d.n_channels;
    let mut raw_var = 0.0;
    let mut delta_sum = [0.0f64; GROUP_SIZE];
    let mut delta_sq = [0.0f64; GROUP_SIZE];
    let mut delta_n = [0usize; GROUP_SIZE];
    for t in Tensor::BOTH {
        let x = kv.tensor(t);
        for j in 0..row {
            let series = x[j..].iter().step_by(row).map(|&v| v as f64);
            let n = d.n_tokens as f64;
            let mean = series.clone().sum::<f64>() / n;
            raw_var += series.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        }
        for g in (0..d.n_tokens).step_by(GROUP_SIZE) {
            let anchor = &x[g * row..(g + 1) * row];
            let (scales, symbols) = quantize_anchor(anchor, d.n_channels).unwrap();
            let reference = dequantize_anchor(&scales, &symbols, d.n_channels).unwrap();
            for lag in 1..GROUP_SIZE.min(d.n_tokens - g) {
                let tok = &x[(g + lag) * row..(g + lag + 1) * row];
                for (a, b) in tok.iter().zip(&reference) {
                    let e = (*a - *b) as f64;
                    delta_sum[lag] += e;
                    delta_sq[lag] += e * e;
                    delta_n[lag] += 1;
                }
            }
        }
    }
    raw_var /= 2.0 * row as f64;
    let lags = 1..GROUP_SIZE;
    let measured = lags
        .clone()
        .map(|lag| {
            let n = delta_n[lag] as f64;
            let mean = delta_sum[lag] / n;
            (delta_sq[lag] / n - mean * mean) / raw_var
        })
        .sum::<f64>()
        / 9.0;
    let oracle = lags.map(|lag| 2.0 * (1.0 - rho.powi(lag as i32))).sum::<f64>() / 9.0;
    let rel = (measured - oracle).abs() / oracle;
    outcome(
        measured <= 0.5 && rel <= 0.15,
        format!("mean Var(delta)/Var(raw) = {measured:.4}, oracle 2(1-rho^d) = {oracle:.4}, off by {:.1}%", 100.0 * rel),
    )
}

/// Table index of an L1-quantized raw value, clamped to ±255.
fn raw_symbol(x: f32, bin: f32) -> usize {
    (quantize_value(x as f64, bin as f64).0.clamp(-255, 255) + 255) as usize
}

fn c4_contextual_gain() -> Outcome {
    let c = corpus();
    let half = c.kv.dims().n_tokens / 2;
    let train = c.kv.slice_tokens(0..half).unwrap();
    let test = c.kv.slice_tokens(half..c.kv.dims().n_tokens).unwrap();
    let mut p = ModelProfiler::new(8, 64);
    profile_cache(&mut p, &train, &default_levels(), GROUP_SIZE).unwrap();
    let contextual = p.finish().unwrap();
    let global = p.finish_global().unwrap();
    let coded = |model: &SymbolModel| -> usize {
        let mut total = 0;
        for start in (0..test.dims().n_tokens).step_by(1500) {
            let part = test.slice_tokens(start..start + 1500).unwrap();
            for level in default_levels() {
                total += encode_chunk(&part, 0, &level, model, GROUP_SIZE).unwrap().byte_len();
            }
        }
        total
    };
    let (ctx_bytes, global_bytes) = (coded(&contextual), coded(&global));
    let gain = 1.0 - ctx_bytes as f64 / global_bytes as f64;

    // Same comparison on quantized raw values, without anchor/delta coding.
    let qc = QuantConfig::for_level(8, &default_levels()[1]).unwrap();
    let d = c.kv.dims();
    let mut counts = vec![vec![0u64; 511]; 8 * 64];
    for t in Tensor::BOTH {
        for tok in 0..half {
            for j in 0..8 * 64 {
                counts[j][raw_symbol(c.kv.tensor(t)[tok * 512 + j], qc.per_layer_bin[j / 64])] += 1;
            }
        }
    }
    let pooled: Vec<u64> = (0..511).map(|s| counts.iter().map(|c| c[s]).sum()).collect();
    let pooled = FrequencyTable::from_counts(&pooled).unwrap();
    let tables: Vec<FrequencyTable> = counts.iter().map(|c| FrequencyTable::from_counts(c).unwrap()).collect();
    let (mut raw_ctx, mut raw_global) = (0.0, 0.0);
    for t in Tensor::BOTH {
        for tok in half..d.n_tokens {
            for j in 0..8 * 64 {
                let s = raw_symbol(c.kv.tensor(t)[tok * 512 + j], qc.per_layer_bin[j / 64]);
                raw_ctx += tables[j].cost_bits(s);
                raw_global += pooled.cost_bits(s);
            }
        }
    }
    outcome(
        gain >= 0.20,
        format!(
            "codec bytes {ctx_bytes} per-(layer,channel) vs {global_bytes} global: {:.1}% smaller (target 20%); \
             quantized raw values: {:.1}% smaller",
            100.0 * gain,
            100.0 * (1.0 - raw_ctx / raw_global)
        ),
    )
}

fn c5_entropy_ordering() -> Outcome {
    let c = corpus();
    let d = c.kv.dims();
    let qc = QuantConfig::for_level(d.n_layers, &default_levels()[1]).unwrap();
    let symbols: Vec<Vec<i32>> = Tensor::BOTH
        .iter()
        .map(|&t| {
            let x = c.kv.tensor(t);
            (0..x.len())
                .map(|i| quantize_value(x[i] as f64, qc.per_layer_bin[(i / 64) % 8] as f64).0 as i32)
                .collect()
        })
        .collect();
    let samples = || {
        symbols.iter().enumerate().flat_map(|(t, x)| {
            x.iter().enumerate().map(move |(i, &s)| (t, i / 512, (i / 64) % 8, i % 64, s))
        })
    };
    let by_layer = grouped_entropy_bits(samples().map(|(t, _, l, _, s)| ((t, l), s)));
    let by_token = grouped_entropy_bits(samples().map(|(t, tok, _, _, s)| ((t, tok), s)));
    let by_channel = grouped_entropy_bits(samples().map(|(t, _, _, ch, s)| ((t, ch), s)));
    let pooled = grouped_entropy_bits(samples().map(|(t, _, _, _, s)| (t, s)));
    outcome(
        by_layer < by_token,
        format!(
            "bits/element by layer {by_layer:.3} < by token {by_token:.3} (by channel {by_channel:.3}, ungrouped {pooled:.3})"
        ),
    )
}

fn c6_level_ladder() -> Outcome {
    let c = corpus();
    let m = &c.library.manifest;
    let mut bad = Vec::new();
    for (i, chunk) in m.chunks.iter().enumerate() {
        let original = c.kv.slice_tokens(chunk.range.clone()).unwrap();
        let mse: Vec<f64> = (0..m.levels.len())
            .map(|l| {
                let decoded = decode_chunk(&c.library.encoded[i][l], &c.model).unwrap();
                reconstruction_stats(&original, &decoded).unwrap().mse
            })
            .collect();
        if chunk.sizes.windows(2).any(|w| w[0] <= w[1]) || mse.windows(2).any(|w| w[0] >= w[1]) {
            bad.push(i);
        }
    }
    let clips: usize = default_levels()
        .iter()
        .map(|l| {
            let qc = QuantConfig::for_level(8, l).unwrap();
            encode_groups(&c.kv, &qc, GROUP_SIZE).unwrap().iter().map(|p| p.clipped).sum::<usize>()
        })
        .sum();
    let sizes: Vec<u64> = (0..m.levels.len()).map(|l| m.chunks.iter().map(|c| c.sizes[l]).sum()).collect();
    outcome(
        bad.is_empty() && clips == 0,
        format!(
            "{} chunks, total bytes L0..L3 {sizes:?}, {} chunks out of order, {clips} clips",
            m.chunks.len(),
            bad.len()
        ),
    )
}

fn gigabyte_plan() -> StreamPlan {
    let chunk = ChunkPlan {
        tokens: 1500,
        sizes: vec![250_000_000, 125_000_000, 62_500_000, 31_250_000],
    };
    StreamPlan::new(vec![0, 1, 2, 3], vec![chunk; 8]).unwrap()
}

fn c7_adaptation_case() -> Outcome {
    let plan = gigabyte_plan();
    let drop = BandwidthTrace::new(vec![(0.0, 2e9), (2.0, 2e8), (4.0, 1e9)]).unwrap();
    let fixed = Policy::Fixed(StreamingConfig::Level(1));
    let zero = SessionParams {
        slo_s: 4.0,
        dm: DelayModel::zero(),
        prompt_tokens: 0,
    };
    let steady = stream_context(&plan, &BandwidthTrace::constant(2e9).unwrap(), &zero, &fixed).unwrap();
    let dropped = stream_context(&plan, &drop, &zero, &fixed).unwrap();
    // b = 2a: recomputing the second half of the 12000 tokens takes 1.5 s.
    let a = 1.5 / (3.0 * 6000.0 * 6000.0);
    let recompute = SessionParams {
        dm: DelayModel::new(a, 2.0 * a, 0.0, 0.0, 0.0).unwrap(),
        ..zero
    };
    let adaptive = stream_context(&plan, &drop, &recompute, &Policy::Adaptive { prior_bps: None }).unwrap();
    let configs: Vec<String> = adaptive.records.iter().map(|r| r.config.to_string()).collect();
    outcome(
        (steady.finish_s - 4.0).abs() <= 0.01
            && !steady.violated
            && (dropped.finish_s - 7.6).abs() <= 0.01
            && dropped.violated
            && adaptive.finish_s <= 4.0
            && !adaptive.violated,
        format!(
            "steady {:.3} s, drop fixed L1 {:.3} s, drop adaptive {:.3} s via {}",
            steady.finish_s,
            dropped.finish_s,
            adaptive.finish_s,
            configs.join(" ")
        ),
    )
}

fn random_instance(rng: &mut ChaCha8Rng) -> (StreamPlan, BandwidthTrace, SessionParams) {
    let n = rng.random_range(1..=5);
    let chunks = (0..n)
        .map(|_| {
            let mut size = log_uniform(rng, 1e6, 2e8);
            let sizes = (0..4)
                .map(|_| {
                    let s = size as u64;
                    size *= rng.random_range(0.4..0.9);
                    s
                })
                .collect();
            ChunkPlan {
                tokens: rng.random_range(200..=2000),
                sizes,
            }
        })
        .collect();
    let plan = StreamPlan::new(vec![0, 1, 2, 3], chunks).unwrap();
    let bw = log_uniform(rng, 1e8, 1e10);
    let a = log_uniform(rng, 1e-9, 1e-6);
    let dm = DelayModel::new(
        a,
        a * rng.random_range(0.0..3.0),
        rng.random_range(0.0..1e-4),
        log_uniform(rng, 1e-11, 1e-9),
        rng.random_range(0.0..0.05),
    )
    .unwrap();
    let trace = BandwidthTrace::constant(bw).unwrap();
    let probe = SessionParams {
        slo_s: 0.0,
        dm,
        prompt_tokens: 0,
    };
    let uniform: Vec<f64> = plan
        .configs()
        .into_iter()
        .map(|c| stream_context(&plan, &trace, &probe, &Policy::Fixed(c)).unwrap().finish_s)
        .collect();
    let lo = uniform.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = uniform.iter().cloned().fold(0.0, f64::max);
    let slo_s = rng.random_range(0.7 * lo..1.1 * hi);
    (plan, trace, SessionParams { slo_s, ..probe })
}

fn c8_greedy_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut disagree, mut uniform_disagree, mut first_pick, mut feasible) = (0, 0, 0, 0);
    for _ in 0..200 {
        let (plan, trace, params) = random_instance(&mut rng);
        let bw = trace.bandwidth_at(0.0);
        let greedy = stream_context(&plan, &trace, &params, &Policy::Adaptive { prior_bps: Some(bw) }).unwrap();
        let oracle = oracle_feasible_sequence(&plan, &trace, &params).unwrap().is_some();
        let best_uniform = plan
            .configs()
            .into_iter()
            .find(|&c| !stream_context(&plan, &trace, &params, &Policy::Fixed(c)).unwrap().violated);
        let uniform = best_uniform.is_some();
        first_pick += usize::from(best_uniform.is_some_and(|c| greedy.records[0].config != c));
        feasible += usize::from(oracle);
        disagree += usize::from(greedy.violated == oracle);
        uniform_disagree += usize::from(greedy.violated == uniform);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        disagree == 0 && secs < 30.0,
        format!(
            "{disagree} disagreements with exhaustive search over 200 instances ({feasible} feasible), \
             {uniform_disagree} against uniform-sequence feasibility, \
             {first_pick} first picks below the best feasible uniform config, {secs:.1} s"
        ),
    )
}

fn c9_violation_rates() -> Outcome {
    let c = corpus();
    let plan = StreamPlan::from_manifest(&c.library.manifest).unwrap();
    let l1: u64 = plan.chunks().iter().map(|ch| ch.sizes[1]).sum();
    let plan = plan.scaled(1e9 / l1 as f64).unwrap();
    let a = 6.0 / 1.44e8;
    let dm = DelayModel::new(a, 2.0 * a, 0.0, 1e-10, 0.01).unwrap();
    let mut rows = Vec::new();
    let mut ordered = true;
    for slo_s in [1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.5] {
        let params = SessionParams {
            slo_s,
            dm,
            prompt_tokens: 0,
        };
        let (mut fixed, mut adaptive) = (0, 0);
        for seed in 0..20 {
            let trace = BandwidthTrace::random(&RandomTraceSpec {
                min_bps: 1e8,
                max_bps: 1e10,
                segment_s: 0.5,
                n_segments: 100,
                seed,
            })
            .unwrap();
            let run = |p: &Policy| stream_context(&plan, &trace, &params, p).unwrap().violated;
            fixed += usize::from(run(&Policy::Fixed(StreamingConfig::Level(1))));
            adaptive += usize::from(run(&Policy::Adaptive { prior_bps: None }));
        }
        if fixed > 4 && adaptive >= fixed {
            ordered = false;
        }
        rows.push(format!("slo {slo_s}: {fixed}/20 vs {adaptive}/20"));
    }
    outcome(ordered, format!("fixed L1 vs adaptive violations, 1 GB at L1: {}", rows.join(", ")))
}

fn c10_golden() -> Outcome {
    let dir = common::fixture_dir();
    let bad = common::fixture_mismatches(&dir);
    let kv = KVCache::read_kvt(dir.join("fixture.kvt")).unwrap();
    let model = SymbolModel::load(dir.join("fixture.sym")).unwrap();
    let repeat = common::encode_fixture(&kv, &model) == common::encode_fixture(&kv, &model)
        && common::fixture_session_csv(&kv, &model) == common::fixture_session_csv(&kv, &model);
    outcome(
        bad.is_empty() && repeat,
        format!("4 .cgc files and 1 session CSV; mismatched fixtures {bad:?}; repeat runs identical: {repeat}"),
    )
}

fn c11_store() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let server = KvServer::bind("127.0.0.1:0", ServerConfig::new(dir.path())).unwrap().spawn().unwrap();
    let addr = server.addr();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut client = KvClient::connect(addr).unwrap();
    let mut mismatches = 0;
    for i in 0..1000u32 {
        let key = ChunkKey::new("trips", i, KeyLevel::Level((i % 4) as u8)).unwrap();
        let mut value = vec![0u8; rng.random_range(0..20_000)];
        rng.fill(&mut value[..]);
        client.store(&key, &value).unwrap();
        let back = client.get(&key).unwrap().unwrap_or_default();
        mismatches += usize::from(Sha256::digest(&back) != Sha256::digest(&value));
    }
    let missing = ChunkKey::new("trips", 5000, KeyLevel::Text).unwrap();
    let not_found = client.get(&missing).unwrap().is_none();

    let version = |key: u32, writer: u32| -> Vec<u8> {
        let mut v = format!("key {key} writer {writer} ").into_bytes();
        v.resize(1000 + (key * 37 + writer * 11) as usize % 3000, writer as u8);
        v
    };
    let shared = |k: u32| ChunkKey::new("shared", k, KeyLevel::Level(0)).unwrap();
    for k in 0..8 {
        client.store(&shared(k), &version(k, 64)).unwrap();
    }
    let allowed: HashMap<u32, HashSet<Vec<u8>>> =
        (0..8).map(|k| (k, (0..=64).map(|w| version(k, w)).collect())).collect();
    let inconsistent: usize = std::thread::scope(|s| {
        let handles: Vec<_> = (0..64u32)
            .map(|w| {
                let allowed = &allowed;
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(100 + w as u64);
                    let mut c = KvClient::connect(addr).unwrap();
                    let own = ChunkKey::new(format!("client{w}"), 0, KeyLevel::Level(1)).unwrap();
                    let mut bad = 0;
                    for i in 0..25u32 {
                        let k = rng.random_range(0..8);
                        if rng.random_bool(0.5) {
                            c.store(&shared(k), &version(k, w)).unwrap();
                        }
                        let got = c.get(&shared(k)).unwrap();
                        bad += usize::from(!got.is_some_and(|v| allowed[&k].contains(&v)));
                        let mine = version(100 + w, i);
                        c.store(&own, &mine).unwrap();
                        bad += usize::from(c.get(&own).unwrap().as_ref() != Some(&mine));
                    }
                    bad
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).sum()
    });
    server.shutdown();
    outcome(
        mismatches == 0 && not_found && inconsistent == 0,
        format!(
            "1000 round trips, {mismatches} hash mismatches; missing key not found: {not_found}; \
             64 clients, {inconsistent} inconsistent reads"
        ),
    )
}

fn c12_ttft_estimate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let size = log_uniform(&mut rng, 1e5, 1e10) as u64;
        let bw = log_uniform(&mut rng, 1e8, 1e10);
        let a = log_uniform(&mut rng, 1e-10, 1e-7);
        let dm = DelayModel::new(
            a,
            a * rng.random_range(0.0..3.0),
            rng.random_range(0.0..1e-4),
            log_uniform(&mut rng, 1e-11, 1e-8),
            rng.random_range(0.0..0.1),
        )
        .unwrap();
        let tokens = rng.random_range(100..20_000);
        let prompt_tokens = rng.random_range(0..500);
        let plan = StreamPlan::new(vec![1], vec![ChunkPlan { tokens, sizes: vec![size] }]).unwrap();
        let params = SessionParams {
            slo_s: f64::MAX,
            dm,
            prompt_tokens,
        };
        let session = stream_context(
            &plan,
            &BandwidthTrace::constant(bw).unwrap(),
            &params,
            &Policy::Fixed(StreamingConfig::Level(1)),
        )
        .unwrap();
        let estimate = estimate_ttft(size, bw, &dm, tokens, prompt_tokens).unwrap();
        worst = worst.max((estimate - session.ttft_s).abs() / session.ttft_s);
    }
    outcome(worst <= 0.01, format!("50 triples, worst relative gap {:.2e}", worst))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 12] = [
        (1, "lossless coding", c1_lossless),
        (2, "error bounds", c2_error_bounds),
        (3, "delta shrinkage", c3_delta_shrinkage),
        (4, "contextual coding gain", c4_contextual_gain),
        (5, "entropy ordering", c5_entropy_ordering),
        (6, "level ladder", c6_level_ladder),
        (7, "bandwidth-drop scenario", c7_adaptation_case),
        (8, "greedy vs exhaustive search", c8_greedy_oracle),
        (9, "violation-rate ordering", c9_violation_rates),
        (10, "golden files", c10_golden),
        (11, "store fidelity", c11_store),
        (12, "ttft estimator", c12_ttft_estimate),
    ];
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        let start = Instant::now();
        let o = run();
        let known = KNOWN_FAILURES.contains(&id);
        let note = match (o.pass, known) {
            (false, true) => " [known failure]",
            (true, true) => " [unexpected pass]",
            (false, false) => " [unexpected failure]",
            (true, false) => "",
        };
        if o.pass == known {
            unexpected.push(id);
        }
        println!(
            "{} {id:>2} {name}: {} ({:.1} s){note}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if !unexpected.is_empty() {
        println!("unexpected outcomes: {unexpected:?}");
        std::process::exit(1);
    }
}
