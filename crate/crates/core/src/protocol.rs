//! HFLP/1 logit-serving protocol.
//!
//! Every frame is `u32 payload_len (LE) | u8 type | payload`, where
//! `payload_len` counts the payload only. Messages:
//!
//! | type | message         | payload                                                        |
//! |------|-----------------|----------------------------------------------------------------|
//! | 1    | LogitsRequest   | `u8 flags` (bit0: want hidden), `u32 n`, `n x u32` token ids   |
//! | 2    | LogitsResponse  | `u32 V`, `V x f32`, `u8 has_hidden`, [`u32 Lp1`, `u32 D`, `Lp1*D x f32`] |
//! | 3    | Error           | `u32 code`, UTF-8 message                                      |
//!
//! A client sends one request and waits for its response; pipelining is not
//! allowed.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};

use thiserror::Error;

use crate::injection::{HiddenStack, LogitProvider, ProviderError, ProviderOutput};

pub const MSG_LOGITS_REQUEST: u8 = 1;
pub const MSG_LOGITS_RESPONSE: u8 = 2;
pub const MSG_ERROR: u8 = 3;

pub const FLAG_WANT_HIDDEN: u8 = 0b1;

/// Frames above this size are rejected before any allocation.
pub const MAX_PAYLOAD_LEN: u32 = 1 << 28;

pub mod error_code {
    pub const EMPTY_CONTEXT: u32 = 1;
    pub const TOKEN_OUT_OF_RANGE: u32 = 2;
    pub const MALFORMED_REQUEST: u32 = 3;
    pub const UNEXPECTED_MESSAGE: u32 = 4;
    pub const INTERNAL: u32 = 5;
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("connection closed mid-frame")]
    UnexpectedEof,
    #[error("frame payload of {0} bytes exceeds the limit")]
    FrameTooLarge(u32),
    #[error("unknown message type {0}")]
    UnknownMessageType(u8),
    #[error("malformed {message} payload: {reason}")]
    Malformed {
        message: &'static str,
        reason: String,
    },
    #[error("unexpected message type {0}")]
    UnexpectedMessage(u8),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    LogitsRequest {
        want_hidden: bool,
        tokens: Vec<u32>,
    },
    LogitsResponse {
        logits: Vec<f32>,
        hidden: Option<HiddenStack>,
    },
    Error {
        code: u32,
        message: String,
    },
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Message::LogitsRequest { .. } => MSG_LOGITS_REQUEST,
            Message::LogitsResponse { .. } => MSG_LOGITS_RESPONSE,
            Message::Error { .. } => MSG_ERROR,
        }
    }

    fn encode_payload(&self) -> Vec<u8> {
        let mut p = Vec::new();
        let put_u32 = |p: &mut Vec<u8>, x: u32| p.extend_from_slice(&x.to_le_bytes());
        match self {
            Message::LogitsRequest {
                want_hidden,
                tokens,
            } => {
                p.push(if *want_hidden { FLAG_WANT_HIDDEN } else { 0 });
                put_u32(&mut p, tokens.len() as u32);
                for &t in tokens {
                    put_u32(&mut p, t);
                }
            }
            Message::LogitsResponse { logits, hidden } => {
                put_u32(&mut p, logits.len() as u32);
                for x in logits {
                    p.extend_from_slice(&x.to_le_bytes());
                }
                match hidden {
                    None => p.push(0),
                    Some(h) => {
                        p.push(1);
                        put_u32(&mut p, h.layer_count as u32);
                        put_u32(&mut p, h.hidden_dim as u32);
                        for x in &h.values {
                            p.extend_from_slice(&x.to_le_bytes());
                        }
                    }
                }
            }
            Message::Error { code, message } => {
                put_u32(&mut p, *code);
                p.extend_from_slice(message.as_bytes());
            }
        }
        p
    }

    /// Full frame bytes.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.encode_payload();
        let mut out = Vec::with_capacity(5 + payload.len());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.push(self.kind());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(kind: u8, payload: &[u8]) -> Result<Message> {
        let mut r = PayloadReader::new(payload, kind);
        let msg = match kind {
            MSG_LOGITS_REQUEST => {
                let flags = r.u8()?;
                if flags & !FLAG_WANT_HIDDEN != 0 {
                    return Err(r.malformed(format!("unknown flag bits {flags:#04x}")));
                }
                let n = r.u32()? as usize;
                let tokens = r.u32s(n)?;
                Message::LogitsRequest {
                    want_hidden: flags & FLAG_WANT_HIDDEN != 0,
                    tokens,
                }
            }
            MSG_LOGITS_RESPONSE => {
                let v = r.u32()? as usize;
                let logits = r.f32s(v)?;
                let hidden = match r.u8()? {
                    0 => None,
                    1 => {
                        let layer_count = r.u32()? as usize;
                        let hidden_dim = r.u32()? as usize;
                        let n = layer_count
                            .checked_mul(hidden_dim)
                            .ok_or_else(|| r.malformed("hidden shape overflows".into()))?;
                        Some(HiddenStack {
                            layer_count,
                            hidden_dim,
                            values: r.f32s(n)?,
                        })
                    }
                    other => return Err(r.malformed(format!("has_hidden byte {other}"))),
                };
                Message::LogitsResponse { logits, hidden }
            }
            MSG_ERROR => {
                let code = r.u32()?;
                let rest = r.rest();
                let message = String::from_utf8(rest.to_vec())
                    .map_err(|_| r.malformed("message is not UTF-8".into()))?;
                Message::Error { code, message }
            }
            other => return Err(ProtocolError::UnknownMessageType(other)),
        };
        r.finish()?;
        Ok(msg)
    }
}

struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
    message: &'static str,
}

impl<'a> PayloadReader<'a> {
    fn new(buf: &'a [u8], kind: u8) -> Self {
        let message = match kind {
            MSG_LOGITS_REQUEST => "LogitsRequest",
            MSG_LOGITS_RESPONSE => "LogitsResponse",
            _ => "Error",
        };
        PayloadReader {
            buf,
            pos: 0,
            message,
        }
    }

    fn malformed(&self, reason: String) -> ProtocolError {
        ProtocolError::Malformed {
            message: self.message,
            reason,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                self.malformed(format!(
                    "needs {n} bytes at offset {}, only {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.malformed("count overflows".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.malformed("count overflows".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.malformed(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream before the
/// first byte of a frame.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut head = [0u8; 5];
    let mut got = 0;
    while got < head.len() {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::UnexpectedEof),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes([head[0], head[1], head[2], head[3]]);
    if len > MAX_PAYLOAD_LEN {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    let kind = head[4];
    if !(MSG_LOGITS_REQUEST..=MSG_ERROR).contains(&kind) {
        return Err(ProtocolError::UnknownMessageType(kind));
    }
    // Grows with the bytes actually received, so a lying length prefix
    // cannot force a large allocation.
    let mut payload = Vec::new();
    r.take(u64::from(len)).read_to_end(&mut payload)?;
    if payload.len() < len as usize {
        return Err(ProtocolError::UnexpectedEof);
    }
    Message::decode(kind, &payload).map(Some)
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()?;
    Ok(())
}

fn error_frame(err: &ProviderError) -> Message {
    use error_code::*;
    let code = match err {
        ProviderError::EmptyContext => EMPTY_CONTEXT,
        ProviderError::TokenOutOfRange { .. } => TOKEN_OUT_OF_RANGE,
        ProviderError::Remote { code, .. } => *code,
        _ => INTERNAL,
    };
    Message::Error {
        code,
        message: err.to_string(),
    }
}

/// Serves requests on one connection until the peer closes it.
///
/// A malformed frame is answered with an Error frame and ends the session,
/// since frame boundaries can no longer be trusted.
pub fn serve_connection<S: Read + Write, P: LogitProvider + ?Sized>(
    stream: &mut S,
    provider: &mut P,
) -> Result<()> {
    loop {
        let msg = match read_message(stream) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(ProtocolError::Io(e)) => return Err(ProtocolError::Io(e)),
            Err(ProtocolError::UnexpectedEof) => return Err(ProtocolError::UnexpectedEof),
            Err(e) => {
                let reply = Message::Error {
                    code: error_code::MALFORMED_REQUEST,
                    message: e.to_string(),
                };
                // Best effort; the session is over either way.
                let _ = write_message(stream, &reply);
                return Err(e);
            }
        };
        let reply = match msg {
            Message::LogitsRequest {
                want_hidden,
                tokens,
            } => match provider.forward(&tokens, want_hidden) {
                Ok(out) => Message::LogitsResponse {
                    logits: out.logits,
                    hidden: out.hidden,
                },
                Err(e) => error_frame(&e),
            },
            other => Message::Error {
                code: error_code::UNEXPECTED_MESSAGE,
                message: format!(
                    "servers accept only LogitsRequest, got type {}",
                    other.kind()
                ),
            },
        };
        write_message(stream, &reply)?;
    }
}

/// HFLP/1 client acting as a [`LogitProvider`].
#[derive(Debug)]
pub struct RemoteModel<S> {
    stream: S,
}

impl RemoteModel<TcpStream> {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(RemoteModel { stream })
    }
}

impl<S: Read + Write> RemoteModel<S> {
    pub fn new(stream: S) -> Self {
        RemoteModel { stream }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }

    pub fn request(&mut self, tokens: &[u32], want_hidden: bool) -> Result<Message> {
        write_message(
            &mut self.stream,
            &Message::LogitsRequest {
                want_hidden,
                tokens: tokens.to_vec(),
            },
        )?;
        read_message(&mut self.stream)?.ok_or(ProtocolError::UnexpectedEof)
    }
}

impl<S: Read + Write> LogitProvider for RemoteModel<S> {
    fn forward(
        &mut self,
        context: &[u32],
        want_hidden: bool,
    ) -> std::result::Result<ProviderOutput, ProviderError> {
        match self.request(context, want_hidden)? {
            Message::LogitsResponse { logits, hidden } => Ok(ProviderOutput { logits, hidden }),
            Message::Error { code, message } => Err(ProviderError::Remote { code, message }),
            other => Err(ProtocolError::UnexpectedMessage(other.kind()).into()),
        }
    }
}
