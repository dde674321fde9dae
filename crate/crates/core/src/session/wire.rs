//! Framed classical-channel messages. Byte layout in `docs/wire-format.md`.

use std::io::Read;

use crate::error::{Error, Result};
use crate::model::{Basis, Intensity};
use crate::photonic::DetectorId;

pub const MAGIC: [u8; 4] = *b"TBQK";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
/// Authentication tag placeholder appended to every frame. Always zero: the
/// channel is not authenticated.
pub const TAG_LEN: usize = 8;
/// Upper bound on a payload accepted from the wire.
pub const MAX_PAYLOAD: u32 = 1 << 28;

/// One detection as Bob discloses it. Z-detector clicks always carry slot 0
/// so the key bit stays private; X clicks carry their slot position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReportEntry {
    pub frame: u64,
    pub detector: DetectorId,
    pub slot: u8,
}

/// Alice's basis and intensity disclosure for one report entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiftEntry {
    pub basis: Basis,
    pub intensity: Intensity,
}

impl SiftEntry {
    fn code(self) -> u8 {
        (self.basis == Basis::X) as u8 | ((self.intensity == Intensity::Mu2) as u8) << 1
    }

    fn from_code(c: u8) -> Result<Self> {
        if c & !0b11 != 0 {
            return Err(Error::Wire(format!("bad sift code {c}")));
        }
        Ok(Self {
            basis: if c & 1 != 0 { Basis::X } else { Basis::Z },
            intensity: if c & 2 != 0 { Intensity::Mu2 } else { Intensity::Mu1 },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParityRange {
    pub pass: u8,
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireMessage {
    Hello { block: u64, frames: u64, config_hash: [u8; 8] },
    DetectionReport { last: bool, entries: Vec<ReportEntry> },
    SiftResponse { last: bool, entries: Vec<SiftEntry> },
    ShuffleSeeds { frame: u32, seeds: Vec<u64> },
    ParityRequest { ranges: Vec<ParityRange> },
    ParityResponse { bits: Vec<bool> },
    FrameDone { frame: u32, error_positions: Vec<u32> },
    ConfirmChallenge { seed: u64, hash: u64 },
    ConfirmResult { ok: bool },
    PaSeed { input_len: u64, output_len: u64, seed: Vec<bool> },
    Abort { reason: String },
}

impl WireMessage {
    pub fn type_code(&self) -> u8 {
        match self {
            WireMessage::Hello { .. } => 1,
            WireMessage::DetectionReport { .. } => 2,
            WireMessage::SiftResponse { .. } => 3,
            WireMessage::ShuffleSeeds { .. } => 4,
            WireMessage::ParityRequest { .. } => 5,
            WireMessage::ParityResponse { .. } => 6,
            WireMessage::FrameDone { .. } => 7,
            WireMessage::ConfirmChallenge { .. } => 8,
            WireMessage::ConfirmResult { .. } => 9,
            WireMessage::PaSeed { .. } => 10,
            WireMessage::Abort { .. } => 11,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WireMessage::Hello { .. } => "Hello",
            WireMessage::DetectionReport { .. } => "DetectionReport",
            WireMessage::SiftResponse { .. } => "SiftResponse",
            WireMessage::ShuffleSeeds { .. } => "ShuffleSeeds",
            WireMessage::ParityRequest { .. } => "ParityRequest",
            WireMessage::ParityResponse { .. } => "ParityResponse",
            WireMessage::FrameDone { .. } => "FrameDone",
            WireMessage::ConfirmChallenge { .. } => "ConfirmChallenge",
            WireMessage::ConfirmResult { .. } => "ConfirmResult",
            WireMessage::PaSeed { .. } => "PaSeed",
            WireMessage::Abort { .. } => "Abort",
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut p = Vec::new();
        match self {
            WireMessage::Hello { block, frames, config_hash } => {
                p.extend_from_slice(&block.to_le_bytes());
                p.extend_from_slice(&frames.to_le_bytes());
                p.extend_from_slice(config_hash);
            }
            WireMessage::DetectionReport { last, entries } => {
                p.push(*last as u8);
                p.extend_from_slice(&(entries.len() as u32).to_le_bytes());
                for e in entries {
                    p.extend_from_slice(&e.frame.to_le_bytes());
                    p.push(e.detector.code());
                    p.push(e.slot);
                }
            }
            WireMessage::SiftResponse { last, entries } => {
                p.push(*last as u8);
                p.extend_from_slice(&(entries.len() as u32).to_le_bytes());
                p.extend(entries.iter().map(|e| e.code()));
            }
            WireMessage::ShuffleSeeds { frame, seeds } => {
                p.extend_from_slice(&frame.to_le_bytes());
                p.push(seeds.len() as u8);
                for s in seeds {
                    p.extend_from_slice(&s.to_le_bytes());
                }
            }
            WireMessage::ParityRequest { ranges } => {
                p.extend_from_slice(&(ranges.len() as u32).to_le_bytes());
                for r in ranges {
                    p.push(r.pass);
                    p.extend_from_slice(&r.start.to_le_bytes());
                    p.extend_from_slice(&r.end.to_le_bytes());
                }
            }
            WireMessage::ParityResponse { bits } => {
                p.extend_from_slice(&(bits.len() as u32).to_le_bytes());
                p.extend(pack_bits(bits));
            }
            WireMessage::FrameDone { frame, error_positions } => {
                p.extend_from_slice(&frame.to_le_bytes());
                p.extend_from_slice(&(error_positions.len() as u32).to_le_bytes());
                for e in error_positions {
                    p.extend_from_slice(&e.to_le_bytes());
                }
            }
            WireMessage::ConfirmChallenge { seed, hash } => {
                p.extend_from_slice(&seed.to_le_bytes());
                p.extend_from_slice(&hash.to_le_bytes());
            }
            WireMessage::ConfirmResult { ok } => p.push(*ok as u8),
            WireMessage::PaSeed { input_len, output_len, seed } => {
                p.extend_from_slice(&input_len.to_le_bytes());
                p.extend_from_slice(&output_len.to_le_bytes());
                p.extend_from_slice(&(seed.len() as u64).to_le_bytes());
                p.extend(pack_bits(seed));
            }
            WireMessage::Abort { reason } => {
                p.extend_from_slice(&(reason.len() as u32).to_le_bytes());
                p.extend_from_slice(reason.as_bytes());
            }
        }
        p
    }

    /// Header, payload and the zero tag trailer.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + TAG_LEN);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.type_code());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&[0u8; TAG_LEN]);
        out
    }

    /// Decodes exactly one complete frame.
    pub fn decode(frame: &[u8]) -> Result<Self> {
        if frame.len() < HEADER_LEN + TAG_LEN {
            return Err(Error::Wire("frame shorter than header".into()));
        }
        let (ty, len) = parse_header(frame[..HEADER_LEN].try_into().expect("header length"))?;
        if frame.len() != HEADER_LEN + len as usize + TAG_LEN {
            return Err(Error::Wire(format!(
                "length field {len} does not match frame of {} bytes",
                frame.len()
            )));
        }
        decode_payload(ty, &frame[HEADER_LEN..HEADER_LEN + len as usize])
    }

    /// Reads one frame from a byte stream; returns the raw bytes too.
    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, Vec<u8>)> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header).map_err(map_eof)?;
        let (_, len) = parse_header(&header)?;
        let mut buf = header.to_vec();
        buf.resize(HEADER_LEN + len as usize + TAG_LEN, 0);
        r.read_exact(&mut buf[HEADER_LEN..]).map_err(map_eof)?;
        Ok((Self::decode(&buf)?, buf))
    }
}

fn map_eof(e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Closed,
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => Error::Timeout,
        _ => Error::Io(e),
    }
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(u8, u32)> {
    if h[..4] != MAGIC {
        return Err(Error::Wire("bad magic".into()));
    }
    if h[4] != VERSION {
        return Err(Error::Wire(format!("unsupported version {}", h[4])));
    }
    let ty = h[5];
    if !(1..=11).contains(&ty) {
        return Err(Error::Wire(format!("unknown message type {ty}")));
    }
    let len = u32::from_le_bytes(h[6..10].try_into().expect("4 bytes"));
    if len > MAX_PAYLOAD {
        return Err(Error::Wire(format!("payload of {len} bytes exceeds limit")));
    }
    Ok((ty, len))
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Wire("payload truncated".into()));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Wire(format!("bad flag byte {v}"))),
        }
    }
    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Wire("trailing payload bytes".into()));
        }
        Ok(())
    }
}

fn decode_payload(ty: u8, payload: &[u8]) -> Result<WireMessage> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let msg = match ty {
        1 => WireMessage::Hello {
            block: c.u64()?,
            frames: c.u64()?,
            config_hash: c.take(8)?.try_into().expect("8"),
        },
        2 => {
            let last = c.flag()?;
            let n = c.u32()? as usize;
            let mut entries = Vec::with_capacity(n.min(payload.len() / 10));
            for _ in 0..n {
                let frame = c.u64()?;
                let d = c.u8()?;
                let detector = DetectorId::from_code(d).ok_or_else(|| Error::Wire(format!("bad detector {d}")))?;
                let slot = c.u8()?;
                if (slot as usize) >= detector.slot_count() {
                    return Err(Error::Wire(format!("bad slot {slot}")));
                }
                entries.push(ReportEntry { frame, detector, slot });
            }
            WireMessage::DetectionReport { last, entries }
        }
        3 => {
            let last = c.flag()?;
            let n = c.u32()? as usize;
            let entries = c.take(n)?.iter().map(|&b| SiftEntry::from_code(b)).collect::<Result<_>>()?;
            WireMessage::SiftResponse { last, entries }
        }
        4 => {
            let frame = c.u32()?;
            let n = c.u8()? as usize;
            let seeds = (0..n).map(|_| c.u64()).collect::<Result<_>>()?;
            WireMessage::ShuffleSeeds { frame, seeds }
        }
        5 => {
            let n = c.u32()? as usize;
            let mut ranges = Vec::with_capacity(n.min(payload.len() / 9));
            for _ in 0..n {
                let r = ParityRange { pass: c.u8()?, start: c.u32()?, end: c.u32()? };
                if r.start >= r.end {
                    return Err(Error::Wire("empty parity range".into()));
                }
                ranges.push(r);
            }
            WireMessage::ParityRequest { ranges }
        }
        6 => {
            let n = c.u32()? as usize;
            let bytes = c.take(n.div_ceil(8))?;
            WireMessage::ParityResponse { bits: unpack_bits(bytes, n) }
        }
        7 => {
            let frame = c.u32()?;
            let n = c.u32()? as usize;
            let error_positions = (0..n).map(|_| c.u32()).collect::<Result<_>>()?;
            WireMessage::FrameDone { frame, error_positions }
        }
        8 => WireMessage::ConfirmChallenge { seed: c.u64()?, hash: c.u64()? },
        9 => WireMessage::ConfirmResult { ok: c.flag()? },
        10 => {
            let input_len = c.u64()?;
            let output_len = c.u64()?;
            let n = usize::try_from(c.u64()?).map_err(|_| Error::Wire("seed too long".into()))?;
            let bytes = c.take(n.div_ceil(8))?;
            WireMessage::PaSeed { input_len, output_len, seed: unpack_bits(bytes, n) }
        }
        11 => {
            let n = c.u32()? as usize;
            let reason = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| Error::Wire("abort reason is not UTF-8".into()))?;
            WireMessage::Abort { reason }
        }
        other => return Err(Error::Wire(format!("unknown message type {other}"))),
    };
    c.finish()?;
    Ok(msg)
}
