#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cachegen::codec::{build_library, encode_chunk, profile_cache};
use cachegen::entropy::{ModelProfiler, SymbolModel};
use cachegen::kvtensor::{synth_ar1, KVCache, KVDims, SynthSpec};
use cachegen::netsim::BandwidthTrace;
use cachegen::quant::default_levels;
use cachegen::stream::{stream_context, DelayModel, Policy, SessionParams, StreamPlan};

pub const GROUP_SIZE: usize = 10;
pub const FIXTURE_TRACE: &str = "time_s,bandwidth_bps\n0,20000\n0.2,4000\n0.6,20000\n";

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture_cache() -> KVCache {
    synth_ar1(&SynthSpec {
        dims: KVDims::new(45, 3, 8),
        rho: 0.95,
        sigma: 1.0,
        channel_offset_scale: 2.0,
        seed: 21,
    })
    .unwrap()
}

pub fn fixture_model(kv: &KVCache) -> SymbolModel {
    let d = kv.dims();
    let mut p = ModelProfiler::new(d.n_layers, d.n_channels);
    profile_cache(&mut p, kv, &default_levels(), GROUP_SIZE).unwrap();
    p.finish().unwrap()
}

/// The fixture cache encoded as one chunk, per level.
pub fn encode_fixture(kv: &KVCache, model: &SymbolModel) -> Vec<(String, Vec<u8>)> {
    default_levels()
        .iter()
        .map(|l| {
            let bytes = encode_chunk(kv, 0, l, model, GROUP_SIZE).unwrap().to_bytes().unwrap();
            (l.name(), bytes)
        })
        .collect()
}

/// Adaptive session over the fixture library split into 20-token chunks.
pub fn fixture_session_csv(kv: &KVCache, model: &SymbolModel) -> String {
    let lib = build_library(kv, "fixture", 20, &default_levels(), model, GROUP_SIZE).unwrap();
    let plan = StreamPlan::from_manifest(&lib.manifest).unwrap();
    let trace = BandwidthTrace::from_csv_str(FIXTURE_TRACE).unwrap();
    let params = SessionParams {
        slo_s: 0.6,
        dm: DelayModel::new(1e-3, 2e-3, 0.0, 1e-5, 0.01).unwrap(),
        prompt_tokens: 5,
    };
    stream_context(&plan, &trace, &params, &Policy::Adaptive { prior_bps: None })
        .unwrap()
        .to_csv("fixture")
        .unwrap()
}

pub fn write_fixtures(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let kv = fixture_cache();
    let model = fixture_model(&kv);
    kv.write_kvt(dir.join("fixture.kvt")).unwrap();
    model.save(dir.join("fixture.sym")).unwrap();
    std::fs::write(dir.join("trace.csv"), FIXTURE_TRACE).unwrap();
    for (name, bytes) in encode_fixture(&kv, &model) {
        std::fs::write(dir.join(format!("fixture_{name}.cgc")), bytes).unwrap();
    }
    std::fs::write(dir.join("session.csv"), fixture_session_csv(&kv, &model)).unwrap();
}

/// Mismatches between freshly computed outputs and the committed fixtures.
pub fn fixture_mismatches(dir: &Path) -> Vec<String> {
    let kv = KVCache::read_kvt(dir.join("fixture.kvt")).unwrap();
    let model = SymbolModel::load(dir.join("fixture.sym")).unwrap();
    let mut bad = Vec::new();
    for (name, bytes) in encode_fixture(&kv, &model) {
        let file = format!("fixture_{name}.cgc");
        if std::fs::read(dir.join(&file)).ok().as_deref() != Some(&bytes[..]) {
            bad.push(file);
        }
    }
    let csv = fixture_session_csv(&kv, &model);
    if std::fs::read_to_string(dir.join("session.csv")).ok().as_deref() != Some(csv.as_str()) {
        bad.push("session.csv".into());
    }
    bad
}
