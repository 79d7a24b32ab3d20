//! KV-cache compression and SLO-aware streaming.
//!
//! The crate is organised bottom-up:
//!
//! - [`kvtensor`]: the `[tokens × layers × channels]` K/V container, `.kvt` files
//!   and an AR(1) synthetic generator.
//! - [`quant`]: uniform delta quantization with layer-grouped bins and 8-bit
//!   vectorwise anchor quantization.
//! - [`grouping`]: anchor/delta encoding over groups of contiguous tokens.
//! - [`entropy`]: a range coder driven by per-(layer, channel) frequency tables.
//! - [`codec`]: self-describing chunk bitstreams and multi-level chunk libraries.
//! - [`netsim`]: piecewise-constant bandwidth traces.
//! - [`stream`]: the per-chunk configuration adapter and the streaming simulator.
//! - [`kvstore`]: a small TCP store for encoded chunks.

mod bytes;
pub mod codec;
pub mod entropy;
pub mod error;
pub mod grouping;
pub mod kvstore;
pub mod kvtensor;
pub mod netsim;
pub mod quant;
pub mod stream;

pub use codec::{ChunkLibrary, EncodedChunk, Manifest, ReconstructionStats};
pub use entropy::{Bitstream, SymbolModel, TableId, TableKind};
pub use error::{Error, Result};
pub use kvstore::{ChunkKey, KvClient, KvServer};
pub use kvtensor::{KVCache, KVDims, SynthSpec};
pub use netsim::BandwidthTrace;
pub use quant::{EncodingLevel, QuantConfig};
pub use stream::{DelayModel, StreamPlan, StreamSession, StreamingConfig};

