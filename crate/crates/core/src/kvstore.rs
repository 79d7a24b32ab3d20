//! A small TCP store for encoded chunks.
//!
//! Wire protocol, integers little-endian, one request then one response per
//! round on a persistent connection:
//!
//! ```text
//! request:  opcode u8 | key length u32 | key | [STORE only: value length u32 | value]
//! response: status u8 | payload length u32 | payload
//! ```
//!
//! Opcodes: `0x01` STORE, `0x02` GET, `0x03` LIST (the key is a prefix; the
//! payload is the matching keys, sorted, newline-separated). Statuses: `0` OK,
//! `1` NOT_FOUND, `2` ERROR (payload is a message). After an ERROR caused by a
//! malformed request the server closes the connection.
//!
//! Keys look like `ctx/<context_id>/<chunk_id>/<level>` and are stored at
//! `<root>/<context_id>/<chunk_id>/<level>.cgc`, the chunk library layout.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use crate::codec::{parse_level_name, validate_context_id};
use crate::error::{Error, Result};

pub const OP_STORE: u8 = 0x01;
pub const OP_GET: u8 = 0x02;
pub const OP_LIST: u8 = 0x03;
pub const STATUS_OK: u8 = 0;
pub const STATUS_NOT_FOUND: u8 = 1;
pub const STATUS_ERROR: u8 = 2;
pub const MAX_VALUE_BYTES: u64 = (1 << 31) - 1;
pub const MAX_KEY_BYTES: u32 = 4096;
const KEY_PREFIX: &str = "ctx/";
const TEXT_LEVEL: &str = "text";
const CHUNK_EXT: &str = "cgc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyLevel {
    Level(u8),
    Text,
}

impl fmt::Display for KeyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyLevel::Level(id) => write!(f, "L{id}"),
            KeyLevel::Text => f.write_str(TEXT_LEVEL),
        }
    }
}

impl FromStr for KeyLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == TEXT_LEVEL {
            return Ok(KeyLevel::Text);
        }
        parse_level_name(s)
            .map(KeyLevel::Level)
            .ok_or_else(|| Error::invalid(format!("bad level `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkKey {
    pub context_id: String,
    pub chunk_id: u32,
    pub level: KeyLevel,
}

impl ChunkKey {
    pub fn new(context_id: impl Into<String>, chunk_id: u32, level: KeyLevel) -> Result<Self> {
        let context_id = context_id.into();
        validate_context_id(&context_id)?;
        Ok(ChunkKey {
            context_id,
            chunk_id,
            level,
        })
    }

    pub fn path(&self, root: &Path) -> PathBuf {
        root.join(&self.context_id)
            .join(self.chunk_id.to_string())
            .join(format!("{}.{CHUNK_EXT}", self.level))
    }
}

impl fmt::Display for ChunkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{KEY_PREFIX}{}/{}/{}", self.context_id, self.chunk_id, self.level)
    }
}

impl FromStr for ChunkKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad key `{s}`"));
        let rest = s.strip_prefix(KEY_PREFIX).ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split('/').collect();
        let [ctx, chunk, level] = parts[..] else {
            return Err(bad());
        };
        // Canonical decimal only, so each key has exactly one spelling.
        let chunk_id: u32 = chunk.parse().map_err(|_| bad())?;
        if chunk_id.to_string() != chunk {
            return Err(bad());
        }
        ChunkKey::new(ctx, chunk_id, level.parse()?)
    }
}

/// Filesystem backend. Writes go to a temporary file that is renamed into
/// place, so readers see either the old or the new value in full.
#[derive(Debug, Clone)]
pub struct FsStore {
    root: PathBuf,
    tmp_counter: Arc<AtomicU64>,
}

impl FsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(FsStore {
            root,
            tmp_counter: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn put(&self, key: &ChunkKey, value: &[u8]) -> Result<()> {
        let path = key.path(&self.root);
        let dir = path.parent().expect("key paths have a parent");
        fs::create_dir_all(dir)?;
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(".{}.{}.{n}.tmp", key.level, std::process::id()));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(value)?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, &path).inspect_err(|_| {
            let _ = fs::remove_file(&tmp);
        })?;
        Ok(())
    }

    pub fn get(&self, key: &ChunkKey) -> Result<Option<Vec<u8>>> {
        match fs::read(key.path(&self.root)) {
            Ok(v) => Ok(Some(v)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Keys starting with `prefix`, in lexicographic order.
    pub fn list(&self, prefix: &str) -> Result<Vec<String>> {
        let mut keys = BTreeSet::new();
        for ctx in read_dir_names(&self.root)? {
            if validate_context_id(&ctx).is_err() {
                continue;
            }
            for chunk in read_dir_names(&self.root.join(&ctx))? {
                let Some(chunk_id) = chunk.parse::<u32>().ok().filter(|id| id.to_string() == chunk) else {
                    continue;
                };
                for file in read_dir_names(&self.root.join(&ctx).join(&chunk))? {
                    let Some(level) = file.strip_suffix(&format!(".{CHUNK_EXT}")) else {
                        continue;
                    };
                    let Ok(level) = level.parse() else {
                        continue;
                    };
                    let key = ChunkKey {
                        context_id: ctx.clone(),
                        chunk_id,
                        level,
                    }
                    .to_string();
                    if key.starts_with(prefix) {
                        keys.insert(key);
                    }
                }
            }
        }
        Ok(keys.into_iter().collect())
    }
}

fn read_dir_names(dir: &Path) -> Result<Vec<String>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound || e.kind() == io::ErrorKind::NotADirectory => {
            return Ok(Vec::new())
        }
        Err(e) => return Err(e.into()),
    };
    let mut names = Vec::new();
    for e in entries {
        if let Ok(name) = e?.file_name().into_string() {
            names.push(name);
        }
    }
    Ok(names)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact_vec(r: &mut impl Read, len: usize) -> io::Result<Vec<u8>> {
    let mut v = Vec::new();
    let got = r.take(len as u64).read_to_end(&mut v)?;
    if got != len {
        return Err(io::ErrorKind::UnexpectedEof.into());
    }
    Ok(v)
}

fn write_frame(w: &mut impl Write, tag: u8, parts: &[&[u8]]) -> io::Result<()> {
    w.write_all(&[tag])?;
    for p in parts {
        let len = u32::try_from(p.len()).map_err(|_| io::Error::from(io::ErrorKind::InvalidInput))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(p)?;
    }
    w.flush()
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub root: PathBuf,
    pub max_value_bytes: u64,
}

impl ServerConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ServerConfig {
            root: root.into(),
            max_value_bytes: MAX_VALUE_BYTES,
        }
    }
}

/// A bound server; call [`KvServer::spawn`] or [`KvServer::serve`] to accept.
pub struct KvServer {
    listener: TcpListener,
    store: FsStore,
    max_value_bytes: u64,
    stop: Arc<AtomicBool>,
}

/// Handle to a server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

impl KvServer {
    pub fn bind(addr: impl ToSocketAddrs, config: ServerConfig) -> Result<Self> {
        Ok(KvServer {
            listener: TcpListener::bind(addr)?,
            store: FsStore::open(config.root)?,
            max_value_bytes: config.max_value_bytes.min(MAX_VALUE_BYTES),
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections until stopped, one thread per connection.
    pub fn serve(self) -> Result<()> {
        for conn in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let store = self.store.clone();
            let max = self.max_value_bytes;
            thread::spawn(move || {
                let _ = handle_connection(stream, &store, max);
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = self.stop.clone();
        let thread = thread::spawn(move || {
            let _ = self.serve();
        });
        Ok(ServerHandle {
            addr,
            stop,
            thread: Some(thread),
        })
    }
}

enum Reply {
    Ok(Vec<u8>),
    NotFound,
    /// Malformed request: reply, then drop the connection.
    Fatal(String),
    Error(String),
}

fn handle_connection(stream: TcpStream, store: &FsStore, max_value: u64) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let mut op = [0u8; 1];
        match reader.read_exact(&mut op) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        }
        let reply = handle_request(op[0], &mut reader, store, max_value)?;
        let fatal = matches!(reply, Reply::Fatal(_));
        match reply {
            Reply::Ok(p) => write_frame(&mut writer, STATUS_OK, &[&p])?,
            Reply::NotFound => write_frame(&mut writer, STATUS_NOT_FOUND, &[&[]])?,
            Reply::Fatal(m) | Reply::Error(m) => write_frame(&mut writer, STATUS_ERROR, &[m.as_bytes()])?,
        }
        if fatal {
            let _ = writer.get_ref().shutdown(Shutdown::Both);
            return Ok(());
        }
    }
}

fn handle_request(op: u8, r: &mut impl Read, store: &FsStore, max_value: u64) -> io::Result<Reply> {
    if !matches!(op, OP_STORE | OP_GET | OP_LIST) {
        return Ok(Reply::Fatal(format!("unknown opcode 0x{op:02x}")));
    }
    let key_len = read_u32(r)?;
    if key_len > MAX_KEY_BYTES {
        return Ok(Reply::Fatal(format!("key of {key_len} bytes exceeds {MAX_KEY_BYTES}")));
    }
    let key = match String::from_utf8(read_exact_vec(r, key_len as usize)?) {
        Ok(k) => k,
        Err(_) => return Ok(Reply::Fatal("key is not utf-8".into())),
    };
    if op == OP_LIST {
        return Ok(match store.list(&key) {
            Ok(keys) => Reply::Ok(keys.join("\n").into_bytes()),
            Err(e) => Reply::Error(e.to_string()),
        });
    }
    let value = if op == OP_STORE {
        let len = read_u32(r)? as u64;
        if len > max_value {
            return Ok(Reply::Fatal(format!("value of {len} bytes exceeds {max_value}")));
        }
        Some(read_exact_vec(r, len as usize)?)
    } else {
        None
    };
    let key: ChunkKey = match key.parse() {
        Ok(k) => k,
        Err(e) => return Ok(Reply::Error(e.to_string())),
    };
    Ok(match value {
        Some(v) => match store.put(&key, &v) {
            Ok(()) => Reply::Ok(Vec::new()),
            Err(e) => Reply::Error(e.to_string()),
        },
        None => match store.get(&key) {
            Ok(Some(v)) => Reply::Ok(v),
            Ok(None) => Reply::NotFound,
            Err(e) => Reply::Error(e.to_string()),
        },
    })
}

/// Blocking client holding one persistent connection.
pub struct KvClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl KvClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(KvClient {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    fn round(&mut self, op: u8, parts: &[&[u8]]) -> Result<(u8, Vec<u8>)> {
        write_frame(&mut self.writer, op, parts)?;
        let mut status = [0u8; 1];
        self.reader.read_exact(&mut status)?;
        let len = read_u32(&mut self.reader)?;
        let payload = read_exact_vec(&mut self.reader, len as usize)?;
        match status[0] {
            STATUS_OK | STATUS_NOT_FOUND => Ok((status[0], payload)),
            STATUS_ERROR => Err(Error::Protocol(format!(
                "server error: {}",
                String::from_utf8_lossy(&payload)
            ))),
            s => Err(Error::Protocol(format!("unknown status {s}"))),
        }
    }

    pub fn store(&mut self, key: &ChunkKey, value: &[u8]) -> Result<()> {
        if value.len() as u64 > MAX_VALUE_BYTES {
            return Err(Error::invalid(format!(
                "value of {} bytes exceeds {MAX_VALUE_BYTES}",
                value.len()
            )));
        }
        match self.round(OP_STORE, &[key.to_string().as_bytes(), value])? {
            (STATUS_OK, _) => Ok(()),
            (s, _) => Err(Error::Protocol(format!("STORE answered with status {s}"))),
        }
    }

    pub fn get(&mut self, key: &ChunkKey) -> Result<Option<Vec<u8>>> {
        match self.round(OP_GET, &[key.to_string().as_bytes()])? {
            (STATUS_OK, v) => Ok(Some(v)),
            _ => Ok(None),
        }
    }

    pub fn list(&mut self, prefix: &str) -> Result<Vec<String>> {
        let (_, payload) = self.round(OP_LIST, &[prefix.as_bytes()])?;
        let text = String::from_utf8(payload).map_err(|_| Error::Protocol("LIST payload is not utf-8".into()))?;
        Ok(text.lines().map(str::to_string).collect())
    }
}
