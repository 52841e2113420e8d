//! Decoding traces and the `GKVT` binary file format.
//!
//! A trace records, for every sequence position and every layer, the
//! post-rotary query rows (`n_q_heads × head_dim`) and key rows
//! (`n_kv_heads × head_dim`) that attention actually consumed. Value states
//! are never stored: eviction removes K and V at the same positions, so the
//! positions alone are enough to reconstruct what a compressed cache held.
//!
//! Layout (all integers `u32`, all reals `f32`, little-endian):
//!
//! ```text
//! offset  field
//!      0  magic            "GKVT"
//!      4  version          1
//!      8  n_layers
//!     12  n_q_heads
//!     16  n_kv_heads
//!     20  head_dim
//!     24  n_prompt
//!     28  n_steps
//!     32  flags            bit 0: token ids, bit 1: token text table
//!     36  position_offset  absolute position of step 0
//!     40  [token ids]      n_steps × u32                   (flag bit 0)
//!         [text table]     u32 count, then count × (u32 len, utf-8 bytes)  (flag bit 1)
//!         payload          for each step, for each layer: Q rows, then K rows
//! ```
//!
//! The text table is a vocabulary: entry `i` is the surface form of token id `i`.

use std::io::{self, Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GKVT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

pub const FLAG_TOKEN_IDS: u32 = 1;
pub const FLAG_TOKEN_TEXT: u32 = 1 << 1;
const KNOWN_FLAGS: u32 = FLAG_TOKEN_IDS | FLAG_TOKEN_TEXT;

/// Model geometry shared by traces, the engine and the toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceDims {
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl TraceDims {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.head_dim == 0 || self.n_kv_heads == 0 {
            return Err(Error::Header(format!(
                "layers, kv heads and head_dim must be positive: {self:?}"
            )));
        }
        if self.n_q_heads == 0 || self.n_q_heads % self.n_kv_heads != 0 {
            return Err(Error::Header(format!(
                "n_q_heads ({}) must be a positive multiple of n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        Ok(())
    }

    /// Query heads sharing one key/value head.
    pub fn group(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn q_len(&self) -> usize {
        self.n_q_heads * self.head_dim
    }

    pub fn k_len(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// f32 values per step across all layers (Q and K).
    fn step_floats(&self) -> usize {
        self.n_layers * (self.q_len() + self.k_len())
    }
}

/// Decoded file header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    #[serde(flatten)]
    pub dims: TraceDims,
    pub n_prompt: usize,
    pub n_steps: usize,
    pub flags: u32,
    pub position_offset: usize,
}

impl TraceHeader {
    pub fn has_token_ids(&self) -> bool {
        self.flags & FLAG_TOKEN_IDS != 0
    }

    pub fn has_token_text(&self) -> bool {
        self.flags & FLAG_TOKEN_TEXT != 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        self.dims.validate()?;
        if self.n_prompt > self.n_steps {
            return Err(Error::Header(format!(
                "n_prompt {} exceeds n_steps {}",
                self.n_prompt, self.n_steps
            )));
        }
        if self.flags & !KNOWN_FLAGS != 0 {
            return Err(Error::Header(format!("unknown flag bits {:#x}", self.flags)));
        }
        for (name, v) in [
            ("n_layers", self.dims.n_layers),
            ("n_q_heads", self.dims.n_q_heads),
            ("n_kv_heads", self.dims.n_kv_heads),
            ("head_dim", self.dims.head_dim),
            ("n_steps", self.n_steps),
            ("position_offset", self.position_offset),
        ] {
            if u32::try_from(v).is_err() {
                return Err(Error::Header(format!("{name} {v} does not fit in u32")));
            }
        }
        Ok(())
    }

    /// Exact byte size of the Q/K payload that follows the optional tables.
    pub fn payload_bytes(&self) -> u64 {
        self.n_steps as u64 * self.dims.step_floats() as u64 * 4
    }

    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&MAGIC);
        let fields = [
            self.version,
            self.dims.n_layers as u32,
            self.dims.n_q_heads as u32,
            self.dims.n_kv_heads as u32,
            self.dims.head_dim as u32,
            self.n_prompt as u32,
            self.n_steps as u32,
            self.flags,
            self.position_offset as u32,
        ];
        for (i, f) in fields.iter().enumerate() {
            out[4 + 4 * i..8 + 4 * i].copy_from_slice(&f.to_le_bytes());
        }
        out
    }

    fn decode(buf: &[u8; HEADER_LEN]) -> Result<Self> {
        let magic: [u8; 4] = buf[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let field = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let header = TraceHeader {
            version: field(0),
            dims: TraceDims {
                n_layers: field(1) as usize,
                n_q_heads: field(2) as usize,
                n_kv_heads: field(3) as usize,
                head_dim: field(4) as usize,
            },
            n_prompt: field(5) as usize,
            n_steps: field(6) as usize,
            flags: field(7),
            position_offset: field(8) as usize,
        };
        header.validate()?;
        Ok(header)
    }
}

/// An immutable record of one decoding run.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    header: TraceHeader,
    token_ids: Option<Vec<u32>>,
    token_text: Option<Vec<String>>,
    q: Vec<f32>,
    k: Vec<f32>,
}

impl DecodeTrace {
    /// Builds a trace from flat `[step][layer][head][dim]` query and key buffers.
    pub fn new(dims: TraceDims, n_prompt: usize, q: Vec<f32>, k: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        let per_q = dims.n_layers * dims.q_len();
        let per_k = dims.n_layers * dims.k_len();
        if q.len() % per_q != 0 {
            return Err(Error::shape(format!(
                "query buffer length {} is not a multiple of {per_q}",
                q.len()
            )));
        }
        let n_steps = q.len() / per_q;
        if k.len() != n_steps * per_k {
            return Err(Error::shape(format!(
                "key buffer holds {} values, expected {} for {n_steps} steps",
                k.len(),
                n_steps * per_k
            )));
        }
        let trace = Self {
            header: TraceHeader {
                version: VERSION,
                dims,
                n_prompt,
                n_steps,
                flags: 0,
                position_offset: 0,
            },
            token_ids: None,
            token_text: None,
            q,
            k,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn with_token_ids(mut self, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != self.header.n_steps {
            return Err(Error::shape(format!(
                "{} token ids for {} steps",
                ids.len(),
                self.header.n_steps
            )));
        }
        self.token_ids = Some(ids);
        self.header.flags |= FLAG_TOKEN_IDS;
        self.validate()?;
        Ok(self)
    }

    pub fn with_token_text(mut self, vocab: Vec<String>) -> Result<Self> {
        self.token_text = Some(vocab);
        self.header.flags |= FLAG_TOKEN_TEXT;
        self.validate()?;
        Ok(self)
    }

    pub fn with_position_offset(mut self, offset: usize) -> Self {
        self.header.position_offset = offset;
        self
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn dims(&self) -> TraceDims {
        self.header.dims
    }

    pub fn n_steps(&self) -> usize {
        self.header.n_steps
    }

    pub fn n_prompt(&self) -> usize {
        self.header.n_prompt
    }

    pub fn token_ids(&self) -> Option<&[u32]> {
        self.token_ids.as_deref()
    }

    pub fn token_text(&self) -> Option<&[String]> {
        self.token_text.as_deref()
    }

    /// Surface form of the token at `step`, when ids and text are both present.
    pub fn token_str(&self, step: usize) -> Option<&str> {
        let id = *self.token_ids.as_ref()?.get(step)? as usize;
        self.token_text.as_ref()?.get(id).map(String::as_str)
    }

    /// All query rows of one layer at one step, `n_q_heads × head_dim`.
    pub fn q_at(&self, step: usize, layer: usize) -> &[f32] {
        let n = self.header.dims.q_len();
        let start = (step * self.header.dims.n_layers + layer) * n;
        &self.q[start..start + n]
    }

    /// All key rows of one layer at one step, `n_kv_heads × head_dim`.
    pub fn k_at(&self, step: usize, layer: usize) -> &[f32] {
        let n = self.header.dims.k_len();
        let start = (step * self.header.dims.n_layers + layer) * n;
        &self.k[start..start + n]
    }

    /// Queries of every layer at `step`, `n_layers × n_q_heads × head_dim`.
    pub fn q_step(&self, step: usize) -> &[f32] {
        let n = self.header.dims.n_layers * self.header.dims.q_len();
        &self.q[step * n..(step + 1) * n]
    }

    pub fn k_step(&self, step: usize) -> &[f32] {
        let n = self.header.dims.n_layers * self.header.dims.k_len();
        &self.k[step * n..(step + 1) * n]
    }

    pub fn k_row(&self, step: usize, layer: usize, head: usize) -> &[f32] {
        let d = self.header.dims.head_dim;
        &self.k_at(step, layer)[head * d..(head + 1) * d]
    }

    pub fn q_row(&self, step: usize, layer: usize, head: usize) -> &[f32] {
        let d = self.header.dims.head_dim;
        &self.q_at(step, layer)[head * d..(head + 1) * d]
    }

    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        if self.token_ids.is_some() != self.header.has_token_ids()
            || self.token_text.is_some() != self.header.has_token_text()
        {
            return Err(Error::Header("flags disagree with stored tables".into()));
        }
        if let (Some(ids), Some(vocab)) = (&self.token_ids, &self.token_text) {
            if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab.len()) {
                return Err(Error::Header(format!(
                    "token id {bad} outside text table of {} entries",
                    vocab.len()
                )));
            }
        }
        if let Some(vocab) = &self.token_text {
            if u32::try_from(vocab.len()).is_err() || vocab.iter().any(|s| u32::try_from(s.len()).is_err()) {
                return Err(Error::Header("text table too large".into()));
            }
        }
        let d = self.header.dims;
        let (per_q, per_k) = (d.n_layers * d.q_len(), d.n_layers * d.k_len());
        if self.q.len() != self.header.n_steps * per_q || self.k.len() != self.header.n_steps * per_k {
            return Err(Error::shape("state buffers disagree with header"));
        }
        for step in 0..self.header.n_steps {
            for layer in 0..d.n_layers {
                let finite = self.q_at(step, layer).iter().all(|v| v.is_finite())
                    && self.k_at(step, layer).iter().all(|v| v.is_finite());
                if !finite {
                    return Err(Error::NonFinite { step, layer });
                }
            }
        }
        Ok(())
    }

    /// Total size in bytes `write_trace` will produce.
    pub fn encoded_len(&self) -> u64 {
        let mut n = HEADER_LEN as u64;
        if let Some(ids) = &self.token_ids {
            n += 4 * ids.len() as u64;
        }
        if let Some(vocab) = &self.token_text {
            n += 4 + vocab.iter().map(|s| 4 + s.len() as u64).sum::<u64>();
        }
        n + self.header.payload_bytes()
    }
}

/// Writes `trace` in `GKVT` format and returns the number of bytes written.
///
/// The trace is validated before the first byte goes out.
pub fn write_trace<W: Write>(trace: &DecodeTrace, mut sink: W) -> Result<u64> {
    trace.validate()?;
    sink.write_all(&trace.header.encode())?;
    if let Some(ids) = &trace.token_ids {
        let buf: Vec<u8> = ids.iter().flat_map(|v| v.to_le_bytes()).collect();
        sink.write_all(&buf)?;
    }
    if let Some(vocab) = &trace.token_text {
        sink.write_all(&(vocab.len() as u32).to_le_bytes())?;
        for s in vocab {
            sink.write_all(&(s.len() as u32).to_le_bytes())?;
            sink.write_all(s.as_bytes())?;
        }
    }
    let dims = trace.header.dims;
    let mut buf = Vec::with_capacity(dims.step_floats() * 4);
    for step in 0..trace.header.n_steps {
        buf.clear();
        for layer in 0..dims.n_layers {
            for v in trace.q_at(step, layer).iter().chain(trace.k_at(step, layer)) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        sink.write_all(&buf)?;
    }
    sink.flush()?;
    Ok(trace.encoded_len())
}

fn read_exact_or<R: Read>(src: &mut R, buf: &mut [u8], section: &'static str, step: Option<usize>) -> Result<()> {
    src.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated { section, step },
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(src: &mut R, section: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(src, &mut b, section, None)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads only the fixed header.
pub fn read_header<R: Read>(mut source: R) -> Result<TraceHeader> {
    let mut buf = [0u8; HEADER_LEN];
    // A short file can still carry a recognisable (or wrong) magic.
    let mut filled = 0;
    while filled < HEADER_LEN {
        let n = source.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    if filled >= 4 && buf[..4] != MAGIC {
        return Err(Error::BadMagic(buf[..4].try_into().unwrap()));
    }
    if filled < HEADER_LEN {
        return Err(Error::Truncated { section: "header", step: None });
    }
    TraceHeader::decode(&buf)
}

/// Parses a complete `GKVT` stream. Trailing bytes are rejected.
pub fn read_trace<R: Read>(mut source: R) -> Result<DecodeTrace> {
    let header = read_header(&mut source)?;
    let n_steps = header.n_steps;

    let token_ids = if header.has_token_ids() {
        let mut raw = vec![0u8; n_steps * 4];
        read_exact_or(&mut source, &mut raw, "token ids", None)?;
        Some(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    } else {
        None
    };

    let token_text = if header.has_token_text() {
        let count = read_u32(&mut source, "text table")? as usize;
        let mut vocab = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = read_u32(&mut source, "text table")? as usize;
            let mut raw = vec![0u8; len];
            read_exact_or(&mut source, &mut raw, "text table", None)?;
            let s = String::from_utf8(raw).map_err(|e| Error::Format(format!("text table entry is not utf-8: {e}")))?;
            vocab.push(s);
        }
        Some(vocab)
    } else {
        None
    };

    let dims = header.dims;
    let (q_len, k_len) = (dims.q_len(), dims.k_len());
    let mut q = Vec::with_capacity(n_steps * dims.n_layers * q_len);
    let mut k = Vec::with_capacity(n_steps * dims.n_layers * k_len);
    let mut raw = vec![0u8; dims.step_floats() * 4];
    for step in 0..n_steps {
        read_exact_or(&mut source, &mut raw, "step payload", Some(step))?;
        let mut floats = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for layer in 0..dims.n_layers {
            let before = (q.len(), k.len());
            q.extend(floats.by_ref().take(q_len));
            k.extend(floats.by_ref().take(k_len));
            if !q[before.0..].iter().chain(&k[before.1..]).all(|v| v.is_finite()) {
                return Err(Error::NonFinite { step, layer });
            }
        }
    }

    let mut probe = [0u8; 1];
    if source.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }

    let trace = DecodeTrace {
        header,
        token_ids,
        token_text,
        q,
        k,
    };
    trace.validate()?;
    Ok(trace)
}

/// Copies the steps in `range` into a new trace.
///
/// Steps are re-indexed from zero; the absolute position of the first kept
/// step is stored in the header's `position_offset`.
pub fn slice_trace(trace: &DecodeTrace, range: Range<usize>) -> Result<DecodeTrace> {
    let n = trace.n_steps();
    if range.start > range.end || range.end > n {
        return Err(Error::OutOfRange(format!("step range {range:?} outside 0..{n}")));
    }
    let dims = trace.dims();
    let per_q = dims.n_layers * dims.q_len();
    let per_k = dims.n_layers * dims.k_len();
    let len = range.end - range.start;
    let mut header = trace.header.clone();
    header.n_steps = len;
    header.n_prompt = trace.n_prompt().saturating_sub(range.start).min(len);
    header.position_offset = trace.header.position_offset + range.start;
    Ok(DecodeTrace {
        header,
        token_ids: trace.token_ids.as_ref().map(|ids| ids[range.clone()].to_vec()),
        token_text: trace.token_text.clone(),
        q: trace.q[range.start * per_q..range.end * per_q].to_vec(),
        k: trace.k[range.start * per_k..range.end * per_k].to_vec(),
    })
}

/// Pretty JSON rendering of a header, for inspection.
pub fn header_json(header: &TraceHeader) -> Result<String> {
    Ok(serde_json::to_string_pretty(header)?)
}
