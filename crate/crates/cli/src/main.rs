use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use cachegen::codec::{self, build_library, reconstruction_stats, ChunkLibrary, Manifest, MANIFEST_FILE};
use cachegen::entropy::ModelProfiler;
use cachegen::kvstore::{ChunkKey, KvClient, KvServer, ServerConfig, MAX_VALUE_BYTES};
use cachegen::kvtensor::{synth_ar1, KVCache, KVDims, SynthSpec};
use cachegen::netsim::{BandwidthTrace, RandomTraceSpec};
use cachegen::quant::{default_levels, EncodingLevel};
use cachegen::stream::{
    aggregate_sessions, report_to_csv, stream_context, DelayModel, Policy, SessionParams,
    SessionSummary, StreamPlan, StreamingConfig,
};
use cachegen::SymbolModel;

#[derive(Parser, Debug)]
#[command(name = "cachegen", version, about = "KV-cache codec, streaming simulator and chunk store")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic AR(1) KV cache (.kvt).
    Synth(SynthArgs),
    /// Profile per-(layer, channel) symbol tables from .kvt corpora.
    Profile(ProfileArgs),
    /// Encode a .kvt cache into a multi-level chunk library.
    Encode(EncodeArgs),
    /// Decode a chunk library back into a .kvt cache.
    Decode(DecodeArgs),
    /// Simulate streaming a library over a bandwidth trace.
    Simulate(SimulateArgs),
    /// Serve chunks over the store protocol.
    Serve(ServeArgs),
    /// Fetch a chunk or list keys from a store server.
    Fetch(FetchArgs),
    /// Aggregate session CSVs into SLO-violation rates and quality mix.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    tokens: usize,
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    channels: usize,
    #[arg(long, default_value_t = 0.98)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Per-(layer, channel) mean offsets, in units of sigma.
    #[arg(long, default_value_t = 2.0)]
    offset_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    /// Training caches; may be repeated.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    group_size: usize,
    /// Pool all (layer, channel) statistics into one shared table.
    #[arg(long)]
    global: bool,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Library root; chunks land in `<out>/<context-id>/`.
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the input file stem.
    #[arg(long)]
    context_id: Option<String>,
    #[arg(long, default_value_t = codec::DEFAULT_CHUNK_TOKENS)]
    chunk_tokens: usize,
    #[arg(long, default_value_t = 10)]
    group_size: usize,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Context directory holding the manifest.
    #[arg(long)]
    library: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Level used for every chunk.
    #[arg(long, default_value = "L1")]
    level: String,
    #[arg(long)]
    out: PathBuf,
    /// Original cache; prints reconstruction error when given.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Context directory holding the manifest.
    #[arg(long, conflicts_with = "manifest")]
    library: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Multiply every encoded size, e.g. to emulate a larger model.
    #[arg(long, default_value_t = 1.0)]
    size_scale: f64,
    /// Bandwidth trace CSV (`time_s,bandwidth_bps`).
    #[arg(long, conflicts_with = "random_trace")]
    trace: Option<PathBuf>,
    /// Draw a random trace instead of reading one.
    #[arg(long)]
    random_trace: bool,
    #[arg(long, default_value_t = 1e8)]
    min_bps: f64,
    #[arg(long, default_value_t = 1e10)]
    max_bps: f64,
    #[arg(long, default_value_t = 1.0)]
    segment_s: f64,
    #[arg(long, default_value_t = 100)]
    segments: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the trace that was used.
    #[arg(long)]
    save_trace: Option<PathBuf>,
    #[arg(long)]
    slo: f64,
    #[arg(long, default_value_t = 0.0)]
    a: f64,
    #[arg(long, default_value_t = 0.0)]
    b: f64,
    #[arg(long, default_value_t = 0.0)]
    c: f64,
    #[arg(long, default_value_t = 0.0)]
    d: f64,
    #[arg(long, default_value_t = 0.0)]
    rtt: f64,
    #[arg(long, default_value_t = 1.0)]
    slowdown: f64,
    /// Send every chunk with `--level` instead of adapting.
    #[arg(long)]
    no_adapt: bool,
    #[arg(long, default_value = "L1")]
    level: String,
    /// Throughput estimate for the first chunk.
    #[arg(long)]
    prior_bps: Option<f64>,
    #[arg(long, default_value_t = 0)]
    prompt_tokens: usize,
    /// Session CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace_name: Option<String>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    addr: String,
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = MAX_VALUE_BYTES)]
    max_value_bytes: u64,
}

#[derive(Args, Debug)]
struct FetchArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    addr: String,
    /// `ctx/<context_id>/<chunk_id>/<level>`
    #[arg(long, conflicts_with = "list", required_unless_present = "list")]
    key: Option<String>,
    /// List keys with this prefix.
    #[arg(long)]
    list: Option<String>,
    #[arg(long, requires = "key")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long = "session", required = true)]
    sessions: Vec<PathBuf>,
    /// Aggregate CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Profile(a) => profile(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Simulate(a) => simulate(a),
        Command::Serve(a) => serve(a),
        Command::Fetch(a) => fetch(a),
        Command::Report(a) => report(a),
    }
}

fn read_kvt(path: &Path) -> anyhow::Result<KVCache> {
    KVCache::read_kvt(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<SymbolModel> {
    SymbolModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let kv = synth_ar1(&SynthSpec {
        dims: KVDims::new(a.tokens, a.layers, a.channels),
        rho: a.rho,
        sigma: a.sigma,
        channel_offset_scale: a.offset_scale,
        seed: a.seed,
    })?;
    kv.write_kvt(&a.out)?;
    println!("wrote {} ({} tokens × {} layers × {} channels)", a.out.display(), a.tokens, a.layers, a.channels);
    Ok(())
}

fn profile(a: ProfileArgs) -> anyhow::Result<()> {
    let first = read_kvt(&a.inputs[0])?;
    let dims = first.dims();
    let mut profiler = ModelProfiler::new(dims.n_layers, dims.n_channels);
    let levels = default_levels();
    codec::profile_cache(&mut profiler, &first, &levels, a.group_size)?;
    for path in &a.inputs[1..] {
        let kv = read_kvt(path)?;
        codec::profile_cache(&mut profiler, &kv, &levels, a.group_size)?;
    }
    let model = if a.global {
        profiler.finish_global()?
    } else {
        profiler.finish()?
    };
    model.save(&a.out)?;
    println!("wrote {} (hash {:016x}, {} symbols observed)", a.out.display(), model.hash(), profiler.observed());
    Ok(())
}

fn encode(a: EncodeArgs) -> anyhow::Result<()> {
    let kv = read_kvt(&a.input)?;
    let model = load_model(&a.model)?;
    let context_id = match a.context_id {
        Some(id) => id,
        None => a
            .input
            .file_stem()
            .and_then(|s| s.to_str())
            .context("cannot derive a context id from the input name; pass --context-id")?
            .to_string(),
    };
    let lib = build_library(&kv, &context_id, a.chunk_tokens, &default_levels(), &model, a.group_size)?;
    lib.write_to(&a.out)?;
    let raw = 2 * kv.k().len() * 4;
    for (level, bytes) in lib.manifest.levels.iter().zip(level_totals(&lib.manifest)) {
        println!(
            "{}: {bytes} bytes ({:.2}× smaller than f32)",
            level.name(),
            raw as f64 / bytes as f64
        );
    }
    println!(
        "wrote {} chunks to {}",
        lib.manifest.chunks.len(),
        ChunkLibrary::context_dir(&a.out, &context_id).display()
    );
    Ok(())
}

fn level_totals(m: &Manifest) -> Vec<u64> {
    (0..m.levels.len())
        .map(|l| m.chunks.iter().map(|c| c.sizes[l]).sum())
        .collect()
}

fn parse_level(name: &str, available: &[EncodingLevel]) -> anyhow::Result<u8> {
    let Some(id) = codec::parse_level_name(name) else {
        bail!("bad level `{name}`; expected L0, L1, ...");
    };
    if !available.iter().any(|l| l.id == id) {
        bail!("level {name} is not in the library");
    }
    Ok(id)
}

fn decode(a: DecodeArgs) -> anyhow::Result<()> {
    let lib = ChunkLibrary::load(&a.library)
        .with_context(|| format!("loading library {}", a.library.display()))?;
    let model = load_model(&a.model)?;
    let id = parse_level(&a.level, &lib.manifest.levels)?;
    let kv = lib.decode_with_levels(&model, &vec![id; lib.manifest.chunks.len()])?;
    kv.write_kvt(&a.out)?;
    println!("wrote {}", a.out.display());
    if let Some(reference) = a.reference {
        let stats = reconstruction_stats(&read_kvt(&reference)?, &kv)?;
        println!("max_abs_error={} mse={}", stats.max_abs_error, stats.mse);
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let manifest_path = match (&a.library, &a.manifest) {
        (Some(dir), None) => dir.join(MANIFEST_FILE),
        (None, Some(m)) => m.clone(),
        _ => bail!("pass --library or --manifest"),
    };
    let manifest = Manifest::read(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let plan = StreamPlan::from_manifest(&manifest)?.scaled(a.size_scale)?;
    let (trace, default_name) = if a.random_trace {
        let spec = RandomTraceSpec {
            min_bps: a.min_bps,
            max_bps: a.max_bps,
            segment_s: a.segment_s,
            n_segments: a.segments,
            seed: a.seed,
        };
        (BandwidthTrace::random(&spec)?, format!("random-{}", a.seed))
    } else {
        let path = a.trace.as_ref().context("pass --trace or --random-trace")?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace").to_string();
        (BandwidthTrace::read_csv(path).with_context(|| format!("reading {}", path.display()))?, name)
    };
    if let Some(p) = &a.save_trace {
        trace.write_csv(p)?;
    }
    let dm = DelayModel {
        a: a.a,
        b: a.b,
        c: a.c,
        d: a.d,
        rtt: a.rtt,
        slowdown: a.slowdown,
    };
    let policy = if a.no_adapt {
        let id = parse_level(&a.level, &manifest.levels)?;
        Policy::Fixed(StreamingConfig::Level(id))
    } else {
        Policy::Adaptive { prior_bps: a.prior_bps }
    };
    let params = SessionParams {
        slo_s: a.slo,
        dm,
        prompt_tokens: a.prompt_tokens,
    };
    let session = stream_context(&plan, &trace, &params, &policy)?;
    let csv = session.to_csv(a.trace_name.as_deref().unwrap_or(&default_name))?;
    write_or_print(a.out.as_deref(), &csv)?;
    if a.out.is_some() {
        println!(
            "violated={} finish_s={} ttft_s={}",
            u8::from(session.violated),
            session.finish_s,
            session.ttft_s
        );
    }
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let server = KvServer::bind(
        &a.addr,
        ServerConfig {
            root: a.root.clone(),
            max_value_bytes: a.max_value_bytes,
        },
    )
    .with_context(|| format!("binding {}", a.addr))?;
    eprintln!("serving {} on {}", a.root.display(), server.local_addr()?);
    server.serve()?;
    Ok(())
}

fn fetch(a: FetchArgs) -> anyhow::Result<()> {
    let mut client = KvClient::connect(&a.addr).with_context(|| format!("connecting to {}", a.addr))?;
    if let Some(prefix) = a.list {
        for key in client.list(&prefix)? {
            println!("{key}");
        }
        return Ok(());
    }
    let key: ChunkKey = a.key.as_deref().unwrap_or_default().parse()?;
    let Some(bytes) = client.get(&key)? else {
        bail!("{key} not found");
    };
    match a.out {
        Some(p) => {
            std::fs::write(&p, &bytes)?;
            println!("wrote {} bytes to {}", bytes.len(), p.display());
        }
        None => println!("{key}: {} bytes", bytes.len()),
    }
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let sessions = a
        .sessions
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SessionSummary::from_session_csv(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_or_print(a.out.as_deref(), &report_to_csv(&aggregate_sessions(&sessions))?)
}
