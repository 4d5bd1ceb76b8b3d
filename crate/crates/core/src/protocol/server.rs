//! Cloud-side request handling: decode an uploaded feature, reason about the
//! device's distribution, generate a head, reply.
//!
//! The whole handler is a pure function over (models, request bytes) →
//! response bytes. The TCP server and the in-process transport both call it,
//! so networked and local pipelines are identical by construction. Handlers
//! run under a [`NoTapeGuard`]: serving is forward-only everywhere, not just
//! on the device.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::codec::{
    self, AdaptResponse, ErrorFrame, Frame, ERR_INTERNAL, ERR_MALFORMED, ERR_OVERSIZE,
};
use super::ProtocolError;
use crate::adr::{self, AdrConfig, SampleMode, StyleSource};
use crate::fda::{self, FdaConfig};
use crate::numerics::{Context, Eval, NoTapeGuard, ParamBinder, ParamStore, SeedRng, Tensor};

/// Whether uploaded features pass through the distribution reasoner before
/// the hypernetwork, or feed it directly (the ablated cloud).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudPath {
    Reasoned,
    Direct,
}

/// Everything a handler needs, shared read-only across requests.
pub struct ServeModels {
    pub store: ParamStore,
    pub fda: FdaConfig,
    pub adr: AdrConfig,
    pub path: CloudPath,
    pub sample_mode: SampleMode,
    pub style_source: StyleSource,
    /// Base seed for per-request noise; mixed with the request content so
    /// identical requests always get identical responses.
    pub base_seed: u64,
}

// ── the handler ──────────────────────────────────────────────────────────

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn generate_head_params(models: &ServeModels, representation: &Tensor) -> crate::Result<Vec<f64>> {
    let mut ctx = Eval::new();
    let mut binder = ParamBinder::new(&mut ctx, &models.store);
    let params = fda::bind(&mut binder, false)?;
    let d = representation.numel();
    let rows = ctx.constant(Tensor::new(vec![1, d], representation.data().to_vec()).unwrap());
    let embedding = params.project_embedding(&mut ctx, rows)?;
    let theta = params.generate(&mut ctx, embedding)?;
    Ok(ctx.value(theta).data().to_vec())
}

fn handle_request(models: &ServeModels, req: &codec::AdaptRequest, raw: &[u8]) -> crate::Result<AdaptResponse> {
    if req.feature.len() != models.fda.d_model {
        return Err(ProtocolError::Malformed {
            detail: format!(
                "feature has {} values, this cloud serves d_model={}",
                req.feature.len(),
                models.fda.d_model
            ),
        }
        .into());
    }
    let feature =
        Tensor::new(vec![models.fda.d_model], req.feature.iter().map(|&v| v as f64).collect())
            .unwrap();

    let representation = match models.path {
        CloudPath::Direct => feature,
        CloudPath::Reasoned => {
            let mut rng = SeedRng::new(fnv1a(models.base_seed, raw));
            adr::reason_inference(
                &models.store,
                &feature,
                models.sample_mode,
                models.style_source,
                &mut rng,
            )?
        }
    };

    let theta = generate_head_params(models, &representation)?;
    Ok(AdaptResponse {
        device_id: req.device_id,
        in_dim: models.fda.head_in as u32,
        out_dim: models.fda.head_out as u32,
        params: theta.into_iter().map(|v| v as f32).collect(),
    })
}

fn error_reply(code: u8, detail: String) -> Vec<u8> {
    codec::encode_error(&ErrorFrame { code, detail })
        .expect("error frames are far below the frame cap")
}

fn error_code_for(err: &ProtocolError) -> u8 {
    match err {
        ProtocolError::Oversize { .. } => ERR_OVERSIZE,
        ProtocolError::MessageType { .. } => ERR_MALFORMED,
        _ => ERR_MALFORMED,
    }
}

/// One full request/response cycle over bytes. Never fails: every problem
/// becomes an error frame. Runs forward-only (guard enforced).
pub fn handle_request_bytes(models: &ServeModels, request: &[u8]) -> Vec<u8> {
    let _guard = NoTapeGuard::new();
    let req = match codec::decode_frame(request) {
        Ok(Frame::Request(r)) => r,
        Ok(_) => return error_reply(ERR_MALFORMED, "expected a request frame".into()),
        Err(e) => return error_reply(error_code_for(&e), e.to_string()),
    };
    match handle_request(models, &req, request) {
        Ok(resp) => match codec::encode_response(&resp) {
            Ok(bytes) => bytes,
            Err(e) => error_reply(ERR_INTERNAL, format!("encoding response: {e}")),
        },
        Err(e) => {
            let code = match &e {
                crate::Error::Protocol(p) => error_code_for(p),
                _ => ERR_INTERNAL,
            };
            error_reply(code, e.to_string())
        }
    }
}

// ── TCP server ───────────────────────────────────────────────────────────

struct Inflight {
    count: Mutex<usize>,
    done: Condvar,
}

impl Inflight {
    fn enter_when_below(&self, limit: usize) {
        let mut n = self.count.lock().unwrap();
        while *n >= limit {
            n = self.done.wait(n).unwrap();
        }
        *n += 1;
    }

    fn leave(&self) {
        let mut n = self.count.lock().unwrap();
        *n -= 1;
        self.done.notify_all();
    }

    fn wait_idle(&self) {
        let mut n = self.count.lock().unwrap();
        while *n > 0 {
            n = self.done.wait(n).unwrap();
        }
    }
}

/// A running server. Dropping without [`ServerHandle::shutdown`] also stops
/// it, but shutdown reports join errors; both drain in-flight requests.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop accepting, wait for every in-flight request to finish.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

fn handle_connection(models: &ServeModels, mut stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let reply = match codec::read_frame(&mut stream) {
        Ok(frame) => handle_request_bytes(models, &frame),
        // header-level rejection: tell the peer if it is still there
        Err(ProtocolError::Transport { .. }) => return, // peer went away mid-frame
        Err(e) => error_reply(error_code_for(&e), e.to_string()),
    };
    let _ = std::io::Write::write_all(&mut stream, &reply);
    let _ = std::io::Write::flush(&mut stream);
}

/// Bind `addr` (e.g. "127.0.0.1:0") and serve until shutdown. At most
/// `concurrency` requests run at once; each connection carries exactly one
/// request and is closed after the reply.
pub fn serve(models: Arc<ServeModels>, addr: &str, concurrency: usize) -> crate::Result<ServerHandle> {
    if concurrency == 0 {
        return Err(crate::harness::ConfigError::invalid("server concurrency must be at least 1").into());
    }
    let listener = TcpListener::bind(addr)
        .map_err(|e| crate::Error::io(format!("binding server to {addr}"), e))?;
    let local = listener
        .local_addr()
        .map_err(|e| crate::Error::io("reading bound server address", e))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| crate::Error::io("switching listener to polling mode", e))?;

    let stop = Arc::new(AtomicBool::new(false));
    let stop_in = Arc::clone(&stop);
    let inflight = Arc::new(Inflight { count: Mutex::new(0), done: Condvar::new() });

    let accept_thread = std::thread::spawn(move || {
        while !stop_in.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _peer)) => {
                    inflight.enter_when_below(concurrency);
                    let models = Arc::clone(&models);
                    let inflight = Arc::clone(&inflight);
                    std::thread::spawn(move || {
                        handle_connection(&models, stream);
                        inflight.leave();
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(_) => std::thread::sleep(Duration::from_millis(2)),
            }
        }
        // drain: a request accepted before the stop flag still completes
        inflight.wait_idle();
    });

    Ok(ServerHandle { addr: local, stop, accept_thread: Some(accept_thread) })
}

// ── tests ────────────────────────────────────────────────────────────────
