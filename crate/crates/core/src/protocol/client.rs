//! Device-side client: upload one fused feature, download one generated
//! head, and account for both simulated link delay and measured wall-clock.
//!
//! A request is one connection; a retry is a fresh connection. The transport
//! is pluggable so tests and the harness can swap TCP for a direct in-process
//! call without touching any other code.

use std::sync::Arc;
use std::time::{Duration, Instant};

use super::codec::{self, AdaptRequest};
use super::delay::{payload_bytes_down, payload_bytes_up, transfer_delay, NetworkScenario};
use super::server::{handle_request_bytes, ServeModels};
use super::ProtocolError;
use crate::fda::GeneratedHead;
use crate::numerics::Tensor;

/// One request/response exchange over some medium.
pub trait Transport: Send + Sync {
    fn round_trip(&self, request: &[u8]) -> Result<Vec<u8>, ProtocolError>;
    /// Short label for reports ("tcp", "in-process", …).
    fn label(&self) -> &str;
}

/// Calls the server handler directly. Bit-identical to TCP by construction:
/// both feed the same bytes to the same function.
pub struct InProcess(pub Arc<ServeModels>);

impl Transport for InProcess {
    fn round_trip(&self, request: &[u8]) -> Result<Vec<u8>, ProtocolError> {
        Ok(handle_request_bytes(&self.0, request))
    }

    fn label(&self) -> &str {
        "in-process"
    }
}

/// Connect–send–receive–close against a host:port endpoint.
pub struct TcpTransport {
    pub addr: String,
    pub timeout: Duration,
}

impl TcpTransport {
    pub fn new(addr: impl Into<String>) -> Self {
        TcpTransport { addr: addr.into(), timeout: Duration::from_secs(10) }
    }
}

impl Transport for TcpTransport {
    fn round_trip(&self, request: &[u8]) -> Result<Vec<u8>, ProtocolError> {
        let transport_err = |stage: &str, e: std::io::Error| ProtocolError::Transport {
            detail: format!("{stage} {}: {e}", self.addr),
        };
        let mut stream = std::net::TcpStream::connect(&self.addr)
            .map_err(|e| transport_err("connecting to", e))?;
        stream.set_nodelay(true).map_err(|e| transport_err("configuring", e))?;
        stream
            .set_read_timeout(Some(self.timeout))
            .map_err(|e| transport_err("configuring", e))?;
        std::io::Write::write_all(&mut stream, request)
            .map_err(|e| transport_err("uploading to", e))?;
        std::io::Write::flush(&mut stream).map_err(|e| transport_err("uploading to", e))?;
        codec::read_frame(&mut stream)
    }

    fn label(&self) -> &str {
        "tcp"
    }
}

// ── timing ───────────────────────────────────────────────────────────────

/// Byte and delay accounting for one adaptation exchange. Simulated fields
/// come from the delay model; `measured_wall_ms` is the only wall-clock
/// quantity and must never feed a deterministic report body.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRecord {
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub upload_delay_ms: f64,
    pub download_delay_ms: f64,
    pub rtt_ms: f64,
    pub simulated_total_ms: f64,
    pub measured_wall_ms: f64,
    pub attempts: u32,
}

/// Device-side endpoint of the adaptation exchange.
pub struct AdaptClient {
    transport: Box<dyn Transport>,
    /// When set, simulated delays are computed against this link.
    pub scenario: Option<NetworkScenario>,
    /// Optional fixed round-trip add-on (propagation floor), milliseconds.
    pub rtt_ms: f64,
    /// Extra attempts after a transport failure (fresh connection each).
    pub retries: u32,
}

impl AdaptClient {
    pub fn new(transport: Box<dyn Transport>) -> Self {
        AdaptClient { transport, scenario: None, rtt_ms: 0.0, retries: 2 }
    }

    pub fn with_scenario(mut self, scenario: NetworkScenario) -> Self {
        self.scenario = Some(scenario);
        self
    }

    pub fn transport_label(&self) -> &str {
        self.transport.label()
    }

    /// Upload `feature` (quantized to 32-bit on the wire), download a head.
    /// The caller applies the head locally with plain matrix math.
    pub fn request_adaptation(
        &self,
        device_id: u32,
        task_id: u8,
        feature: &Tensor,
    ) -> crate::Result<(GeneratedHead, TimingRecord)> {
        let req = AdaptRequest {
            device_id,
            task_id,
            feature: feature.data().iter().map(|&v| v as f32).collect(),
        };
        let request_bytes = codec::encode_request(&req)?;

        let started = Instant::now();
        let mut attempts = 0u32;
        let reply = loop {
            attempts += 1;
            match self.transport.round_trip(&request_bytes) {
                Ok(reply) => break reply,
                Err(e @ ProtocolError::Transport { .. }) => {
                    if attempts > self.retries {
                        return Err(e.into());
                    }
                }
                Err(e) => return Err(e.into()),
            }
        };
        let resp = codec::decode_response(&reply)?;
        let measured_wall_ms = started.elapsed().as_secs_f64() * 1000.0;

        if resp.device_id != device_id {
            return Err(ProtocolError::Malformed {
                detail: format!(
                    "response for device {} arrived at device {device_id}",
                    resp.device_id
                ),
            }
            .into());
        }
        let head = GeneratedHead::from_flat(
            &resp.params.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            resp.in_dim as usize,
            resp.out_dim as usize,
        )?;

        let upload_bytes = payload_bytes_up(req.feature.len());
        let download_bytes = payload_bytes_down(resp.in_dim as usize, resp.out_dim as usize);
        let (up, down) = match &self.scenario {
            Some(s) => (transfer_delay(upload_bytes, s), transfer_delay(download_bytes, s)),
            None => (0.0, 0.0),
        };
        let timing = TimingRecord {
            upload_bytes,
            download_bytes,
            upload_delay_ms: up,
            download_delay_ms: down,
            rtt_ms: self.rtt_ms,
            simulated_total_ms: up + down + self.rtt_ms,
            measured_wall_ms,
            attempts,
        };
        Ok((head, timing))
    }
}

// ── tests ────────────────────────────────────────────────────────────────
