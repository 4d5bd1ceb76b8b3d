//! Wire messages and their binary codec.
//!
//! Every frame is little-endian: magic "CDCA" (4B) | version u16 | msg_type
//! u8 | type-specific fixed fields | variable payload | CRC32 over all prior
//! bytes. There is no length prefix — the fixed fields determine the payload
//! size, so a reader consumes the header, computes the remainder, and reads
//! exactly that. Decoding is total: any byte string yields a message or a
//! typed error, never a panic.

use super::crc::crc32;
use super::{ByteReader, ByteWriter, ProtocolError};

pub const MAGIC: [u8; 4] = *b"CDCA";
pub const VERSION: u16 = 1;

pub const MSG_REQUEST: u8 = 1;
pub const MSG_RESPONSE: u8 = 2;
pub const MSG_ERROR: u8 = 255;

/// Hard cap on any single frame; a header implying more is rejected before
/// any payload is read or allocated.
pub const FRAME_CAP: usize = 8 * 1024 * 1024;

// error-frame codes
pub const ERR_MALFORMED: u8 = 1;
pub const ERR_OVERSIZE: u8 = 2;
pub const ERR_UNSUPPORTED: u8 = 3;
pub const ERR_INTERNAL: u8 = 4;

// ── messages ─────────────────────────────────────────────────────────────

/// Device → cloud: the anchor-frame fused feature.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptRequest {
    pub device_id: u32,
    pub task_id: u8,
    /// Fused feature, quantized to 32-bit on the wire.
    pub feature: Vec<f32>,
}

/// Cloud → device: one generated head, weights row-major then bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptResponse {
    pub device_id: u32,
    pub in_dim: u32,
    pub out_dim: u32,
    /// Exactly in_dim·out_dim + out_dim floats.
    pub params: Vec<f32>,
}

/// Cloud → device on failure.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorFrame {
    pub code: u8,
    pub detail: String,
}

/// Any frame the codec can produce.
#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Request(AdaptRequest),
    Response(AdaptResponse),
    Error(ErrorFrame),
}

impl AdaptResponse {
    pub fn expected_params(&self) -> Option<usize> {
        let w = (self.in_dim as usize).checked_mul(self.out_dim as usize)?;
        w.checked_add(self.out_dim as usize)
    }
}

// ── encoding ─────────────────────────────────────────────────────────────

fn frame_header(msg_type: u8, capacity: usize) -> ByteWriter {
    let mut w = ByteWriter::with_capacity(capacity);
    w.put_bytes(&MAGIC);
    w.put_u16(VERSION);
    w.put_u8(msg_type);
    w
}

fn seal(mut w: ByteWriter) -> Result<Vec<u8>, ProtocolError> {
    let checksum = crc32(w.as_slice());
    w.put_u32(checksum);
    let out = w.into_vec();
    if out.len() > FRAME_CAP {
        return Err(ProtocolError::Oversize { len: out.len(), cap: FRAME_CAP });
    }
    Ok(out)
}

pub fn encode_request(req: &AdaptRequest) -> Result<Vec<u8>, ProtocolError> {
    if req.feature.iter().any(|v| !v.is_finite()) {
        return Err(ProtocolError::Malformed { detail: "non-finite feature value".into() });
    }
    if req.feature.len() > u32::MAX as usize {
        return Err(ProtocolError::Oversize { len: req.feature.len(), cap: FRAME_CAP });
    }
    let mut w = frame_header(MSG_REQUEST, 20 + 4 * req.feature.len());
    w.put_u32(req.device_id);
    w.put_u8(req.task_id);
    w.put_u32(req.feature.len() as u32);
    for &v in &req.feature {
        w.put_f32(v);
    }
    seal(w)
}

pub fn encode_response(resp: &AdaptResponse) -> Result<Vec<u8>, ProtocolError> {
    let expected = resp.expected_params().ok_or(ProtocolError::Oversize {
        len: usize::MAX,
        cap: FRAME_CAP,
    })?;
    if resp.params.len() != expected {
        return Err(ProtocolError::Malformed {
            detail: format!(
                "head slot ({}, {}) needs {} floats, got {}",
                resp.in_dim,
                resp.out_dim,
                expected,
                resp.params.len()
            ),
        });
    }
    if resp.params.iter().any(|v| !v.is_finite()) {
        return Err(ProtocolError::Malformed { detail: "non-finite parameter value".into() });
    }
    let mut w = frame_header(MSG_RESPONSE, 23 + 4 * resp.params.len());
    w.put_u32(resp.device_id);
    w.put_u32(resp.in_dim);
    w.put_u32(resp.out_dim);
    for &v in &resp.params {
        w.put_f32(v);
    }
    seal(w)
}

pub fn encode_error(err: &ErrorFrame) -> Result<Vec<u8>, ProtocolError> {
    let detail = err.detail.as_bytes();
    let detail = if detail.len() > u16::MAX as usize { &detail[..u16::MAX as usize] } else { detail };
    // never split a UTF-8 sequence when truncating
    let mut cut = detail.len();
    while cut > 0 && !err.detail.is_char_boundary(cut) {
        cut -= 1;
    }
    let detail = &detail[..cut];
    let mut w = frame_header(MSG_ERROR, 14 + detail.len());
    w.put_u8(err.code);
    w.put_u16(detail.len() as u16);
    w.put_bytes(detail);
    seal(w)
}

// ── decoding ─────────────────────────────────────────────────────────────

/// Parse the 7-byte prelude; returns the msg_type.
fn check_prelude(r: &mut ByteReader<'_>) -> Result<u8, ProtocolError> {
    let magic = r.take_bytes(4)?;
    if magic != MAGIC {
        let mut got = [0u8; 4];
        got.copy_from_slice(magic);
        return Err(ProtocolError::Magic { got });
    }
    let version = r.take_u16()?;
    if version != VERSION {
        return Err(ProtocolError::Version { got: version });
    }
    r.take_u8()
}

/// Verify the trailing CRC32 covers everything before it, and that nothing
/// follows it.
fn check_crc(bytes: &[u8], r: &mut ByteReader<'_>) -> Result<(), ProtocolError> {
    let body_len = r.pos();
    let stored = r.take_u32()?;
    if r.remaining() != 0 {
        return Err(ProtocolError::Malformed {
            detail: format!("{} trailing bytes after checksum", r.remaining()),
        });
    }
    let computed = crc32(&bytes[..body_len]);
    if stored != computed {
        return Err(ProtocolError::Checksum { stored, computed });
    }
    Ok(())
}

fn guard_payload(float_count: usize, fixed: usize) -> Result<(), ProtocolError> {
    let bytes = float_count
        .checked_mul(4)
        .and_then(|b| b.checked_add(fixed + 4))
        .ok_or(ProtocolError::Oversize { len: usize::MAX, cap: FRAME_CAP })?;
    if bytes > FRAME_CAP {
        return Err(ProtocolError::Oversize { len: bytes, cap: FRAME_CAP });
    }
    Ok(())
}

fn decode_request_body(bytes: &[u8], r: &mut ByteReader<'_>) -> Result<AdaptRequest, ProtocolError> {
    let device_id = r.take_u32()?;
    let task_id = r.take_u8()?;
    let dim = r.take_u32()? as usize;
    guard_payload(dim, 16)?;
    let feature = r.take_f32_vec(dim)?;
    check_crc(bytes, r)?;
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(ProtocolError::Malformed { detail: "non-finite feature value".into() });
    }
    Ok(AdaptRequest { device_id, task_id, feature })
}

fn decode_response_body(bytes: &[u8], r: &mut ByteReader<'_>) -> Result<AdaptResponse, ProtocolError> {
    let device_id = r.take_u32()?;
    let in_dim = r.take_u32()?;
    let out_dim = r.take_u32()?;
    let count = (in_dim as usize)
        .checked_mul(out_dim as usize)
        .and_then(|w| w.checked_add(out_dim as usize))
        .ok_or(ProtocolError::Oversize { len: usize::MAX, cap: FRAME_CAP })?;
    guard_payload(count, 19)?;
    let params = r.take_f32_vec(count)?;
    check_crc(bytes, r)?;
    if params.iter().any(|v| !v.is_finite()) {
        return Err(ProtocolError::Malformed { detail: "non-finite parameter value".into() });
    }
    Ok(AdaptResponse { device_id, in_dim, out_dim, params })
}

fn decode_error_body(bytes: &[u8], r: &mut ByteReader<'_>) -> Result<ErrorFrame, ProtocolError> {
    let code = r.take_u8()?;
    let len = r.take_u16()? as usize;
    let detail = r.take_bytes(len)?;
    let detail = std::str::from_utf8(detail)
        .map_err(|_| ProtocolError::Malformed { detail: "error detail is not UTF-8".into() })?
        .to_owned();
    check_crc(bytes, r)?;
    Ok(ErrorFrame { code, detail })
}

/// Decode any frame. Total over arbitrary input.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, ProtocolError> {
    let mut r = ByteReader::new(bytes);
    match check_prelude(&mut r)? {
        MSG_REQUEST => Ok(Frame::Request(decode_request_body(bytes, &mut r)?)),
        MSG_RESPONSE => Ok(Frame::Response(decode_response_body(bytes, &mut r)?)),
        MSG_ERROR => Ok(Frame::Error(decode_error_body(bytes, &mut r)?)),
        other => Err(ProtocolError::MessageType { got: other }),
    }
}

pub fn decode_request(bytes: &[u8]) -> Result<AdaptRequest, ProtocolError> {
    match decode_frame(bytes)? {
        Frame::Request(r) => Ok(r),
        Frame::Error(e) => Err(ProtocolError::Remote { code: e.code, detail: e.detail }),
        Frame::Response(_) => Err(ProtocolError::Malformed {
            detail: "expected a request frame, got a response".into(),
        }),
    }
}

/// Decode what a client expects back: a response, or the server's error
/// surfaced as `ProtocolError::Remote`.
pub fn decode_response(bytes: &[u8]) -> Result<AdaptResponse, ProtocolError> {
    match decode_frame(bytes)? {
        Frame::Response(r) => Ok(r),
        Frame::Error(e) => Err(ProtocolError::Remote { code: e.code, detail: e.detail }),
        Frame::Request(_) => Err(ProtocolError::Malformed {
            detail: "expected a response frame, got a request".into(),
        }),
    }
}

// ── stream framing ───────────────────────────────────────────────────────

fn read_exact_into(
    src: &mut impl std::io::Read,
    buf: &mut Vec<u8>,
    n: usize,
) -> Result<(), ProtocolError> {
    let start = buf.len();
    buf.resize(start + n, 0);
    src.read_exact(&mut buf[start..]).map_err(|e| ProtocolError::Transport {
        detail: format!("reading {n} frame bytes: {e}"),
    })
}

/// Read exactly one frame off a byte stream without a length prefix: the
/// prelude and fixed fields determine how much payload follows. Returns the
/// raw frame bytes for `decode_frame`; header-level violations (bad magic,
/// bad version, oversize) fail here before payload is read.
pub fn read_frame(src: &mut impl std::io::Read) -> Result<Vec<u8>, ProtocolError> {
    let mut buf = Vec::with_capacity(64);
    read_exact_into(src, &mut buf, 7)?;
    let msg_type = {
        let mut r = ByteReader::new(&buf);
        check_prelude(&mut r)?
    };
    let rest = match msg_type {
        MSG_REQUEST => {
            read_exact_into(src, &mut buf, 9)?;
            let dim = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
            guard_payload(dim, 16)?;
            4 * dim + 4
        }
        MSG_RESPONSE => {
            read_exact_into(src, &mut buf, 12)?;
            let in_dim = u32::from_le_bytes(buf[11..15].try_into().unwrap()) as usize;
            let out_dim = u32::from_le_bytes(buf[15..19].try_into().unwrap()) as usize;
            let count = in_dim
                .checked_mul(out_dim)
                .and_then(|w| w.checked_add(out_dim))
                .ok_or(ProtocolError::Oversize { len: usize::MAX, cap: FRAME_CAP })?;
            guard_payload(count, 19)?;
            4 * count + 4
        }
        MSG_ERROR => {
            read_exact_into(src, &mut buf, 3)?;
            let len = u16::from_le_bytes(buf[8..10].try_into().unwrap()) as usize;
            len + 4
        }
        other => return Err(ProtocolError::MessageType { got: other }),
    };
    read_exact_into(src, &mut buf, rest)?;
    Ok(buf)
}

// ── tests ────────────────────────────────────────────────────────────────
