//! Stateful streaming inference over a framed TCP protocol.
//!
//! Wire format (little-endian): magic `OCTS`, message type u8, payload
//! length u32, payload bytes. One connection carries one session: each
//! `ascan` frame (d_c f32 values) yields exactly one `force` frame (one
//! f32, mN), in order, lock-step. `reset` zeroes the session state and is
//! acknowledged with a `reset` frame; `bye` is acknowledged and closes.
//! Malformed-but-framed requests get an `error` frame with a reason string
//! and leave the session state untouched; the connection survives.
//!
//! Hidden state lives server-side per connection, so each step transmits a
//! single A-scan rather than a whole window.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;

pub const FRAME_MAGIC: [u8; 4] = *b"OCTS";
pub const MSG_HELLO: u8 = 0;
pub const MSG_ASCAN: u8 = 1;
pub const MSG_FORCE: u8 = 2;
pub const MSG_RESET: u8 = 3;
pub const MSG_ERROR: u8 = 4;
pub const MSG_BYE: u8 = 5;

/// Scans are tiny; anything larger than this is a corrupt length field.
const MAX_PAYLOAD: u32 = 1 << 20;

pub const DEFAULT_CLIENT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: u8, payload: Vec<u8>) -> Self {
        Frame { msg_type, payload }
    }

    fn error(reason: impl Into<String>) -> Self {
        Frame { msg_type: MSG_ERROR, payload: reason.into().into_bytes() }
    }
}

/// `hello` payload advertised by the server.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Hello {
    pub d_c: usize,
    pub kind: String,
    pub version: u32,
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    w.write_all(&FRAME_MAGIC)?;
    w.write_all(&[frame.msg_type])?;
    w.write_all(&(frame.payload.len() as u32).to_le_bytes())?;
    w.write_all(&frame.payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Frame> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != FRAME_MAGIC {
        return Err(Error::Protocol(format!(
            "bad frame magic {magic:?}; stream is desynchronized"
        )));
    }
    let mut ty = [0u8; 1];
    r.read_exact(&mut ty)?;
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len);
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("payload length {len} exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(Frame { msg_type: ty[0], payload })
}

fn decode_scan(payload: &[u8]) -> Vec<f32> {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect()
}

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks on the accept loop until the process is killed.
    pub fn wait(mut self) {
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }

    /// Stops accepting connections and joins the accept loop. Live sessions
    /// end when their clients disconnect.
    pub fn shutdown(mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
    }
}

/// Binds and serves streaming inference for a shared model. Each connection
/// gets its own session state and thread; parameters are shared read-only.
/// Kinds without a streaming path are refused here, before binding work
/// starts.
pub fn serve(model: Arc<Model>, bind_addr: impl ToSocketAddrs) -> Result<ServerHandle> {
    if !model.kind().supports_streaming() {
        return Err(Error::Capability(format!(
            "{} does not support streaming inference",
            model.kind().name()
        )));
    }
    let listener = TcpListener::bind(bind_addr)?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&shutdown);
    let accept_thread = std::thread::spawn(move || {
        for stream in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let model = Arc::clone(&model);
            std::thread::spawn(move || {
                let _ = handle_connection(stream, model);
            });
        }
    });
    Ok(ServerHandle { addr, shutdown, accept_thread: Some(accept_thread) })
}

fn handle_connection(stream: TcpStream, model: Arc<Model>) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut state = model.stream_state()?;
    let d_c = model.spec.d_c;

    loop {
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            // Disconnect or desynchronized stream: nothing sane to reply to.
            Err(_) => return Ok(()),
        };
        match frame.msg_type {
            MSG_HELLO => {
                let hello = Hello { d_c, kind: model.kind().name().to_string(), version: 1 };
                let payload = serde_json::to_vec(&hello).expect("hello serializes");
                write_frame(&mut writer, &Frame::new(MSG_HELLO, payload))?;
            }
            MSG_ASCAN => {
                if frame.payload.len() != d_c * 4 {
                    write_frame(
                        &mut writer,
                        &Frame::error(format!(
                            "ascan payload must be {} bytes ({d_c} f32), got {}",
                            d_c * 4,
                            frame.payload.len()
                        )),
                    )?;
                    continue;
                }
                let scan = decode_scan(&frame.payload);
                match model.forward_stream(&mut state, &scan) {
                    Ok(force) => {
                        write_frame(
                            &mut writer,
                            &Frame::new(MSG_FORCE, force.to_le_bytes().to_vec()),
                        )?;
                    }
                    Err(e) => write_frame(&mut writer, &Frame::error(e.to_string()))?,
                }
            }
            MSG_RESET => {
                state.reset();
                write_frame(&mut writer, &Frame::new(MSG_RESET, Vec::new()))?;
            }
            MSG_BYE => {
                write_frame(&mut writer, &Frame::new(MSG_BYE, Vec::new()))?;
                return Ok(());
            }
            other => {
                write_frame(&mut writer, &Frame::error(format!("unknown message type {other}")))?;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

/// Streams scans to a server in lock-step and collects one force per scan.
/// Refuses before sending anything if the scan length does not match the
/// server's advertised crop size.
pub fn client_predict(
    addr: impl ToSocketAddrs,
    scans: &[Vec<f32>],
    timeout: Duration,
) -> Result<Vec<f32>> {
    let stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);

    write_frame(&mut writer, &Frame::new(MSG_HELLO, Vec::new()))?;
    let reply = read_frame(&mut reader)?;
    if reply.msg_type != MSG_HELLO {
        return Err(Error::Protocol(format!(
            "expected hello reply, got message type {}",
            reply.msg_type
        )));
    }
    let hello: Hello = serde_json::from_slice(&reply.payload)
        .map_err(|e| Error::Protocol(format!("bad hello payload: {e}")))?;
    if let Some(bad) = scans.iter().find(|s| s.len() != hello.d_c) {
        return Err(Error::dim(format!(
            "scan of {} px but the server expects d_c = {}",
            bad.len(),
            hello.d_c
        )));
    }

    let mut forces = Vec::with_capacity(scans.len());
    for scan in scans {
        let mut payload = Vec::with_capacity(scan.len() * 4);
        for v in scan {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        write_frame(&mut writer, &Frame::new(MSG_ASCAN, payload))?;
        let reply = read_frame(&mut reader)?;
        match reply.msg_type {
            MSG_FORCE if reply.payload.len() == 4 => {
                forces.push(f32::from_le_bytes(reply.payload[..4].try_into().expect("4 bytes")));
            }
            MSG_ERROR => {
                return Err(Error::Protocol(String::from_utf8_lossy(&reply.payload).into_owned()))
            }
            other => {
                return Err(Error::Protocol(format!(
                    "expected force reply, got message type {other}"
                )))
            }
        }
    }
    write_frame(&mut writer, &Frame::new(MSG_BYE, Vec::new()))?;
    let _ = read_frame(&mut reader); // bye ack; EOF tolerated
    Ok(forces)
}
