//! Shared fixtures for the benchmarks.

use cachegen::codec::profile_cache;
use cachegen::entropy::ModelProfiler;
use cachegen::kvtensor::{synth_ar1, KVCache, KVDims, SynthSpec};
use cachegen::quant::default_levels;
use cachegen::SymbolModel;

pub const GROUP_SIZE: usize = 10;

pub fn synth(n_tokens: usize, n_layers: usize, n_channels: usize, seed: u64) -> KVCache {
    synth_ar1(&SynthSpec {
        dims: KVDims::new(n_tokens, n_layers, n_channels),
        rho: 0.98,
        sigma: 1.0,
        channel_offset_scale: 2.0,
        seed,
    })
    .expect("valid synth spec")
}

pub fn trained_model(like: &KVCache) -> SymbolModel {
    let d = like.dims();
    let corpus = synth(1000, d.n_layers, d.n_channels, 1234);
    let mut p = ModelProfiler::new(d.n_layers, d.n_channels);
    profile_cache(&mut p, &corpus, &default_levels(), GROUP_SIZE).expect("profiling");
    p.finish().expect("model")
}
