//! HFT1 teacher-forced trace files.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic      4 bytes  "HFT1"
//! version    u32      1
//! vocab      u32      V
//! layers     u32      Lp1 (hidden stacks per position, embedding output included)
//! hidden_dim u32      D
//! positions  u32      T
//! flags      u8       bit0: hidden states for model A, bit1: for model B
//! tokens     T x u32
//! records    T x { logits_a: V x f32, logits_b: V x f32,
//!                  [hidden_a: Lp1 x D x f32], [hidden_b: Lp1 x D x f32] }
//! ```
//!
//! Logits at position `t` are the next-token scores after consuming
//! `tokens[0..=t]`.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"HFT1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 * 5 + 1;

pub const FLAG_HIDDEN_A: u8 = 0b01;
pub const FLAG_HIDDEN_B: u8 = 0b10;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic {0:02x?}, expected \"HFT1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("non-finite float in {section} at position {position}")]
    NonFiniteFloat {
        section: &'static str,
        position: usize,
    },
    #[error("token id {token} at position {position} is out of range for vocab {vocab}")]
    TokenIdOutOfRange {
        token: u32,
        position: usize,
        vocab: u32,
    },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TraceError>;

/// Which side of the model pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Model {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub vocab_size: u32,
    pub layer_count: u32,
    pub hidden_dim: u32,
    pub positions: u32,
    pub flags: u8,
}

impl TraceHeader {
    pub fn has_hidden(&self, model: Model) -> bool {
        let bit = match model {
            Model::A => FLAG_HIDDEN_A,
            Model::B => FLAG_HIDDEN_B,
        };
        self.flags & bit != 0
    }

    fn hidden_stacks(&self) -> usize {
        usize::from(self.has_hidden(Model::A)) + usize::from(self.has_hidden(Model::B))
    }

    /// Bytes per position record.
    pub fn record_len(&self) -> usize {
        let v = self.vocab_size as usize;
        let stack = self.layer_count as usize * self.hidden_dim as usize;
        4 * (2 * v + self.hidden_stacks() * stack)
    }

    /// Exact serialized size of a trace with this header.
    pub fn file_len(&self) -> usize {
        let t = self.positions as usize;
        HEADER_LEN + 4 * t + t * self.record_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(TraceError::InvalidHeader(format!(
                "vocab size {} < 2",
                self.vocab_size
            )));
        }
        if self.positions < 1 {
            return Err(TraceError::InvalidHeader("zero positions".into()));
        }
        if self.flags & !(FLAG_HIDDEN_A | FLAG_HIDDEN_B) != 0 {
            return Err(TraceError::InvalidHeader(format!(
                "unknown flag bits {:#04x}",
                self.flags
            )));
        }
        if self.hidden_stacks() > 0 && (self.layer_count < 1 || self.hidden_dim < 1) {
            return Err(TraceError::InvalidHeader(
                "hidden states flagged but layer count or hidden dim is zero".into(),
            ));
        }
        let stacks = self.hidden_stacks() as u128;
        let record = 4
            * (2 * u128::from(self.vocab_size)
                + stacks * u128::from(self.layer_count) * u128::from(self.hidden_dim));
        let t = u128::from(self.positions);
        if HEADER_LEN as u128 + 4 * t + t * record > usize::MAX as u128 {
            return Err(TraceError::InvalidHeader(
                "declared trace size does not fit in memory".into(),
            ));
        }
        Ok(())
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&MAGIC);
        let fields = [
            VERSION,
            self.vocab_size,
            self.layer_count,
            self.hidden_dim,
            self.positions,
        ];
        for (i, f) in fields.iter().enumerate() {
            out[4 + 4 * i..8 + 4 * i].copy_from_slice(&f.to_le_bytes());
        }
        out[HEADER_LEN - 1] = self.flags;
        out
    }
}

/// Hidden-state stacks for one model: `positions x layers x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub values: Vec<f32>,
}

/// Aligned per-position logits (and optional hidden stacks) of two models over
/// one token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForcedTrace {
    header: TraceHeader,
    tokens: Vec<u32>,
    logits_a: Vec<f32>,
    logits_b: Vec<f32>,
    hidden_a: Option<Vec<f32>>,
    hidden_b: Option<Vec<f32>>,
}

fn check_finite(values: &[f32], chunk: usize, section: &'static str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(TraceError::NonFiniteFloat {
            section,
            position: i / chunk.max(1),
        });
    }
    Ok(())
}

impl TeacherForcedTrace {
    /// Builds and validates a trace. `logits_*` are `T x V` row-major.
    pub fn new(
        vocab_size: usize,
        tokens: Vec<u32>,
        logits_a: Vec<f32>,
        logits_b: Vec<f32>,
        hidden_a: Option<HiddenStates>,
        hidden_b: Option<HiddenStates>,
    ) -> Result<Self> {
        let t = tokens.len();
        let (layer_count, hidden_dim) = match (&hidden_a, &hidden_b) {
            (Some(a), Some(b)) => {
                if (a.layer_count, a.hidden_dim) != (b.layer_count, b.hidden_dim) {
                    return Err(TraceError::ShapeMismatch(
                        "hidden stacks of A and B differ in shape".into(),
                    ));
                }
                (a.layer_count, a.hidden_dim)
            }
            (Some(h), None) | (None, Some(h)) => (h.layer_count, h.hidden_dim),
            (None, None) => (0, 0),
        };
        let to_u32 = |x: usize, what: &str| {
            u32::try_from(x).map_err(|_| TraceError::InvalidHeader(format!("{what} exceeds u32")))
        };
        let flags = (u8::from(hidden_a.is_some()) * FLAG_HIDDEN_A)
            | (u8::from(hidden_b.is_some()) * FLAG_HIDDEN_B);
        let header = TraceHeader {
            vocab_size: to_u32(vocab_size, "vocab size")?,
            layer_count: to_u32(layer_count, "layer count")?,
            hidden_dim: to_u32(hidden_dim, "hidden dim")?,
            positions: to_u32(t, "positions")?,
            flags,
        };
        header.validate()?;
        for (name, l) in [("logits_a", &logits_a), ("logits_b", &logits_b)] {
            if l.len() != t * vocab_size {
                return Err(TraceError::ShapeMismatch(format!(
                    "{name} has {} values, expected {} x {}",
                    l.len(),
                    t,
                    vocab_size
                )));
            }
        }
        let stack = layer_count * hidden_dim;
        for (name, h) in [("hidden_a", &hidden_a), ("hidden_b", &hidden_b)] {
            if let Some(h) = h {
                if h.values.len() != t * stack {
                    return Err(TraceError::ShapeMismatch(format!(
                        "{name} has {} values, expected {} x {}",
                        h.values.len(),
                        t,
                        stack
                    )));
                }
            }
        }
        let trace = TeacherForcedTrace {
            header,
            tokens,
            logits_a,
            logits_b,
            hidden_a: hidden_a.map(|h| h.values),
            hidden_b: hidden_b.map(|h| h.values),
        };
        trace.validate_payload()?;
        Ok(trace)
    }

    fn validate_payload(&self) -> Result<()> {
        let v = self.header.vocab_size;
        if let Some((position, &token)) = self.tokens.iter().enumerate().find(|(_, &x)| x >= v) {
            return Err(TraceError::TokenIdOutOfRange {
                token,
                position,
                vocab: v,
            });
        }
        let stack = self.stack_len();
        check_finite(&self.logits_a, v as usize, "logits_a")?;
        check_finite(&self.logits_b, v as usize, "logits_b")?;
        if let Some(h) = &self.hidden_a {
            check_finite(h, stack, "hidden_a")?;
        }
        if let Some(h) = &self.hidden_b {
            check_finite(h, stack, "hidden_b")?;
        }
        Ok(())
    }

    fn stack_len(&self) -> usize {
        self.header.layer_count as usize * self.header.hidden_dim as usize
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn vocab_size(&self) -> usize {
        self.header.vocab_size as usize
    }

    pub fn positions(&self) -> usize {
        self.tokens.len()
    }

    pub fn layer_count(&self) -> usize {
        self.header.layer_count as usize
    }

    pub fn hidden_dim(&self) -> usize {
        self.header.hidden_dim as usize
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn logits(&self, model: Model, t: usize) -> &[f32] {
        let v = self.vocab_size();
        let all = match model {
            Model::A => &self.logits_a,
            Model::B => &self.logits_b,
        };
        &all[t * v..(t + 1) * v]
    }

    pub fn logits_a(&self, t: usize) -> &[f32] {
        self.logits(Model::A, t)
    }

    pub fn logits_b(&self, t: usize) -> &[f32] {
        self.logits(Model::B, t)
    }

    pub fn has_hidden(&self, model: Model) -> bool {
        self.header.has_hidden(model)
    }

    /// Hidden vector of `model` at position `t`, layer `l`.
    pub fn hidden(&self, model: Model, t: usize, l: usize) -> Option<&[f32]> {
        let all = match model {
            Model::A => self.hidden_a.as_ref()?,
            Model::B => self.hidden_b.as_ref()?,
        };
        let d = self.hidden_dim();
        let start = t * self.stack_len() + l * d;
        all.get(start..start + d)
    }

    /// Full hidden stack (`Lp1 x D`) of `model` at position `t`.
    pub fn hidden_stack(&self, model: Model, t: usize) -> Option<&[f32]> {
        let all = match model {
            Model::A => self.hidden_a.as_ref()?,
            Model::B => self.hidden_b.as_ref()?,
        };
        let s = self.stack_len();
        all.get(t * s..(t + 1) * s)
    }

    /// Returns a copy with each logit row of `model` rewritten by `f(t, row)`.
    pub fn map_logits(&self, model: Model, mut f: impl FnMut(usize, &mut [f32])) -> Result<Self> {
        let mut out = self.clone();
        let v = self.vocab_size();
        let target = match model {
            Model::A => &mut out.logits_a,
            Model::B => &mut out.logits_b,
        };
        for (t, row) in target.chunks_exact_mut(v).enumerate() {
            f(t, row);
        }
        out.validate_payload()?;
        Ok(out)
    }

    /// Serialized size according to the header.
    pub fn byte_len(&self) -> usize {
        self.header.file_len()
    }
}

/// Writes `trace` to `sink` and returns the byte count.
pub fn write_trace<W: Write>(trace: &TeacherForcedTrace, sink: &mut W) -> Result<usize> {
    // Traces can only be built through validated constructors, but re-check
    // so nothing invalid ever reaches the sink.
    trace.header.validate()?;
    trace.validate_payload()?;

    let mut buf = Vec::with_capacity(trace.byte_len());
    buf.extend_from_slice(&trace.header.encode());
    for tok in &trace.tokens {
        buf.extend_from_slice(&tok.to_le_bytes());
    }
    let put = |buf: &mut Vec<u8>, xs: &[f32]| {
        for x in xs {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    for t in 0..trace.positions() {
        put(&mut buf, trace.logits_a(t));
        put(&mut buf, trace.logits_b(t));
        if let Some(h) = trace.hidden_stack(Model::A, t) {
            put(&mut buf, h);
        }
        if let Some(h) = trace.hidden_stack(Model::B, t) {
            put(&mut buf, h);
        }
    }
    debug_assert_eq!(buf.len(), trace.byte_len());
    sink.write_all(&buf)?;
    Ok(buf.len())
}

pub fn encode_trace(trace: &TeacherForcedTrace) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(trace.byte_len());
    write_trace(trace, &mut out)?;
    Ok(out)
}

fn read_exact_or_truncated<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TraceError::TruncatedPayload(format!("stream ended inside {what}"))
        } else {
            TraceError::Io(e)
        }
    })
}

fn read_chunk<R: Read>(source: &mut R, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    source.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() < len {
        return Err(TraceError::TruncatedPayload(format!(
            "stream ended inside {what}"
        )));
    }
    Ok(buf)
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn decode_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Reads and validates one trace. Trailing bytes after the last record are
/// left unread in `source`.
pub fn read_trace<R: Read>(source: &mut R) -> Result<TeacherForcedTrace> {
    let mut head = [0u8; HEADER_LEN];
    read_exact_or_truncated(source, &mut head[..4], "magic")?;
    let magic = [head[0], head[1], head[2], head[3]];
    if magic != MAGIC {
        return Err(TraceError::BadMagic(magic));
    }
    read_exact_or_truncated(source, &mut head[4..], "header")?;
    let version = le_u32(&head[4..8]);
    if version != VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }
    let header = TraceHeader {
        vocab_size: le_u32(&head[8..12]),
        layer_count: le_u32(&head[12..16]),
        hidden_dim: le_u32(&head[16..20]),
        positions: le_u32(&head[20..24]),
        flags: head[24],
    };
    header.validate()?;

    let t = header.positions as usize;
    let tok_bytes = read_chunk(source, 4 * t, "token ids")?;
    let tokens: Vec<u32> = tok_bytes.chunks_exact(4).map(le_u32).collect();

    let v = header.vocab_size as usize;
    let stack = header.layer_count as usize * header.hidden_dim as usize;
    let with_a = header.has_hidden(Model::A);
    let with_b = header.has_hidden(Model::B);

    // Buffers grow with the bytes actually read, so a lying header cannot
    // force a huge allocation.
    let record_len = header.record_len();
    let mut logits_a = Vec::new();
    let mut logits_b = Vec::new();
    let mut hidden_a = with_a.then(Vec::new);
    let mut hidden_b = with_b.then(Vec::new);
    for pos in 0..t {
        let record = read_chunk(source, record_len, "a record").map_err(|e| match e {
            TraceError::TruncatedPayload(_) => {
                TraceError::TruncatedPayload(format!("stream ended inside record {pos}"))
            }
            e => e,
        })?;
        let mut off = 0;
        let mut take = |n: usize| {
            let s = &record[off..off + 4 * n];
            off += 4 * n;
            decode_f32s(s)
        };
        logits_a.extend(take(v));
        logits_b.extend(take(v));
        if let Some(h) = hidden_a.as_mut() {
            h.extend(take(stack));
        }
        if let Some(h) = hidden_b.as_mut() {
            h.extend(take(stack));
        }
    }

    let trace = TeacherForcedTrace {
        header,
        tokens,
        logits_a,
        logits_b,
        hidden_a,
        hidden_b,
    };
    trace.validate_payload()?;
    Ok(trace)
}

pub fn decode_trace(bytes: &[u8]) -> Result<TeacherForcedTrace> {
    let mut cursor = bytes;
    read_trace(&mut cursor)
}
