//! Wire protocol between device and cloud: framed binary messages with CRC
//! trailers, a bandwidth-delay model for reporting, and TCP server/client
//! plus an in-process transport that shares the same codec path.

mod bytes;
pub mod codec;
mod crc;
pub mod delay;

pub mod client;
pub mod server;

pub use bytes::{ByteReader, ByteWriter};
pub use codec::{AdaptRequest, AdaptResponse, ErrorFrame, Frame, FRAME_CAP};
pub use crc::crc32;
pub use client::{AdaptClient, InProcess, TcpTransport, TimingRecord, Transport};
pub use delay::{
    default_scenarios, payload_bytes_down, payload_bytes_up, transfer_delay, NetworkScenario,
};
pub use server::{handle_request_bytes, serve, CloudPath, ServeModels, ServerHandle};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad magic {got:?}")]
    Magic { got: [u8; 4] },
    #[error("unsupported version {got}")]
    Version { got: u16 },
    #[error("unknown message type {got}")]
    MessageType { got: u8 },
    #[error("truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("frame of {len} bytes exceeds cap {cap}")]
    Oversize { len: usize, cap: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed frame: {detail}")]
    Malformed { detail: String },
    #[error("server error {code}: {detail}")]
    Remote { code: u8, detail: String },
    #[error("transport failed: {detail}")]
    Transport { detail: String },
}
