//! Emission and detection records of one block, the ground-truth audit,
//! and the binary record dump.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::detector::ClickOrigin;
use crate::error::{Error, Result};
use crate::model::{Basis, StateSymbol};
use crate::photonic::{DetectorId, Slot};

/// Alice's side of a block.
///
/// Only frames that matter to the protocol carry an explicit symbol: every
/// frame in which Bob registered something. The remaining frames are
/// summarised by `class_totals`, which counts all emitted frames per
/// prepared state (index as in [`StateSymbol::ALL`]).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmissionRecord {
    /// Number of clock frames in the block.
    pub frames: u64,
    /// `(frame, symbol)` sorted by frame.
    pub entries: Vec<(u64, StateSymbol)>,
    pub class_totals: [u64; 6],
}

impl EmissionRecord {
    pub fn symbol_at(&self, frame: u64) -> Option<StateSymbol> {
        self.entries
            .binary_search_by_key(&frame, |e| e.0)
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn emitted(&self, basis: Basis) -> u64 {
        StateSymbol::ALL
            .iter()
            .zip(&self.class_totals)
            .filter(|(s, _)| s.basis == basis)
            .map(|(_, n)| n)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    /// Frame index relative to the block start.
    pub frame: u64,
    pub detector: DetectorId,
    pub slot: Slot,
    /// Seconds since the block start.
    pub time: f64,
    pub origin: ClickOrigin,
}

/// Bob's side of a block, ordered by time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub events: Vec<DetectionEvent>,
}

impl DetectionRecord {
    pub fn count(&self, det: DetectorId) -> usize {
        self.events.iter().filter(|e| e.detector == det).count()
    }
}

/// Ground truth for frames listed in the emission record: photons Alice
/// actually emitted. Never reaches the protocol path.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Audit {
    /// Parallel to [`EmissionRecord::entries`].
    pub photons: Vec<u32>,
    /// Counts accumulated by the simulator while it generated the block.
    pub tally: AuditTally,
}

/// Per-intensity event classes split by emitted photon number
/// (`[vacuum, single, multi]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhotonSplit {
    pub by_photons: [[u64; 3]; 2],
}

impl PhotonSplit {
    pub fn add(&mut self, class: usize, photons: u32) {
        self.by_photons[class][(photons as usize).min(2)] += 1;
    }

    pub fn per_class(&self, class: usize) -> u64 {
        self.by_photons[class].iter().sum()
    }

    pub fn with_photons(&self, n: usize) -> u64 {
        self.by_photons[0][n] + self.by_photons[1][n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AuditTally {
    /// Alice sent Z and Bob's Z detector fired.
    pub sifted: PhotonSplit,
    /// Sifted frames with a wrong raw bit (before error correction).
    pub sifted_errors: PhotonSplit,
    /// Alice sent X, side slot fired.
    pub x_side: PhotonSplit,
    /// Alice sent X, central slot fired.
    pub x_central: PhotonSplit,
    /// Accepted clicks per detector and intensity.
    pub clicks: [[u64; 2]; 2],
}

/// Recomputes the audit tally from the records alone.
pub fn recount(emission: &EmissionRecord, detection: &DetectionRecord, audit: &Audit) -> AuditTally {
    let mut t = AuditTally::default();
    let mut i = 0;
    let events = &detection.events;
    let mut by_frame: Vec<&DetectionEvent> = events.iter().collect();
    by_frame.sort_by_key(|e| (e.frame, e.detector, e.slot));
    let mut j = 0;
    while i < emission.entries.len() {
        let (frame, sym) = emission.entries[i];
        let photons = audit.photons[i];
        let k = sym.intensity.index();
        while j < by_frame.len() && by_frame[j].frame < frame {
            j += 1;
        }
        let start = j;
        while j < by_frame.len() && by_frame[j].frame == frame {
            j += 1;
        }
        let fe = &by_frame[start..j];
        let z: Vec<Slot> = fe.iter().filter(|e| e.detector == DetectorId::Z).map(|e| e.slot).collect();
        let x: Vec<Slot> = fe.iter().filter(|e| e.detector == DetectorId::X).map(|e| e.slot).collect();
        for e in fe {
            t.clicks[e.detector.index()][k] += 1;
        }
        match sym.basis {
            Basis::Z if !z.is_empty() => {
                t.sifted.add(k, photons);
                let right = if sym.bit { Slot::Late } else { Slot::Early };
                if z.len() == 1 && z[0] != right {
                    t.sifted_errors.add(k, photons);
                }
            }
            Basis::X => {
                if x.iter().any(|s| matches!(s, Slot::T0 | Slot::T2)) {
                    t.x_side.add(k, photons);
                }
                if x.contains(&Slot::T1) {
                    t.x_central.add(k, photons);
                }
            }
            _ => {}
        }
        i += 1;
    }
    t
}

const DUMP_MAGIC: &[u8; 4] = b"TBQR";
const DUMP_VERSION: u8 = 1;

fn origin_code(o: ClickOrigin) -> u8 {
    match o {
        ClickOrigin::Signal => 0,
        ClickOrigin::Dark => 1,
        ClickOrigin::Afterpulse => 2,
    }
}

fn origin_from(c: u8) -> Result<ClickOrigin> {
    Ok(match c {
        0 => ClickOrigin::Signal,
        1 => ClickOrigin::Dark,
        2 => ClickOrigin::Afterpulse,
        _ => return Err(Error::Wire(format!("bad click origin {c}"))),
    })
}

/// Writes both records in the little-endian dump format described in
/// `docs/record-format.md`.
pub fn write_dump<W: Write>(
    w: &mut W,
    params_hash: [u8; 8],
    emission: &EmissionRecord,
    detection: &DetectionRecord,
) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&[DUMP_VERSION])?;
    w.write_all(&params_hash)?;
    w.write_all(&emission.frames.to_le_bytes())?;
    for n in emission.class_totals {
        w.write_all(&n.to_le_bytes())?;
    }
    w.write_all(&(emission.entries.len() as u64).to_le_bytes())?;
    w.write_all(&(detection.events.len() as u64).to_le_bytes())?;
    for (frame, sym) in &emission.entries {
        w.write_all(&frame.to_le_bytes())?;
        w.write_all(&[sym.code()])?;
    }
    for e in &detection.events {
        w.write_all(&e.frame.to_le_bytes())?;
        w.write_all(&[e.detector.code(), e.slot.code(), origin_code(e.origin)])?;
        w.write_all(&e.time.to_le_bytes())?;
    }
    Ok(())
}

pub struct Dump {
    pub params_hash: [u8; 8],
    pub emission: EmissionRecord,
    pub detection: DetectionRecord,
}

pub fn read_dump<R: Read>(r: &mut R) -> Result<Dump> {
    fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        r.read_exact(&mut b)?;
        Ok(b)
    }
    let u64_of = |b: [u8; 8]| u64::from_le_bytes(b);
    if &take::<4, _>(r)? != DUMP_MAGIC {
        return Err(Error::Wire("not a record dump".into()));
    }
    let [version] = take::<1, _>(r)?;
    if version != DUMP_VERSION {
        return Err(Error::Wire(format!("unsupported dump version {version}")));
    }
    let params_hash = take::<8, _>(r)?;
    let frames = u64_of(take(r)?);
    let mut class_totals = [0u64; 6];
    for t in &mut class_totals {
        *t = u64_of(take(r)?);
    }
    let n_entries = u64_of(take(r)?);
    let n_events = u64_of(take(r)?);
    let mut entries = Vec::new();
    for _ in 0..n_entries {
        let frame = u64_of(take(r)?);
        let [code] = take::<1, _>(r)?;
        let sym = StateSymbol::from_code(code).ok_or_else(|| Error::Wire(format!("bad symbol code {code}")))?;
        entries.push((frame, sym));
    }
    let mut events = Vec::new();
    for _ in 0..n_events {
        let frame = u64_of(take(r)?);
        let [d, s, o] = take::<3, _>(r)?;
        let time = f64::from_le_bytes(take(r)?);
        events.push(DetectionEvent {
            frame,
            detector: DetectorId::from_code(d).ok_or_else(|| Error::Wire(format!("bad detector {d}")))?,
            slot: Slot::from_code(s).ok_or_else(|| Error::Wire(format!("bad slot {s}")))?,
            time,
            origin: origin_from(o)?,
        });
    }
    Ok(Dump {
        params_hash,
        emission: EmissionRecord { frames, entries, class_totals },
        detection: DetectionRecord { events },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Intensity;

    #[test]
    fn dump_roundtrip() {
        let emission = EmissionRecord {
            frames: 1000,
            entries: vec![(3, StateSymbol::z(true, Intensity::Mu2)), (9, StateSymbol::plus(Intensity::Mu1))],
            class_totals: [100, 200, 300, 150, 150, 100],
        };
        let detection = DetectionRecord {
            events: vec![
                DetectionEvent { frame: 3, detector: DetectorId::Z, slot: Slot::Late, time: 1.2e-9, origin: ClickOrigin::Signal },
                DetectionEvent { frame: 9, detector: DetectorId::X, slot: Slot::T1, time: 3.6e-9, origin: ClickOrigin::Dark },
            ],
        };
        let mut buf = Vec::new();
        write_dump(&mut buf, [7; 8], &emission, &detection).unwrap();
        assert_eq!(buf.len(), 4 + 1 + 8 + 8 + 48 + 16 + 2 * 9 + 2 * 19);
        let d = read_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(d.params_hash, [7; 8]);
        assert_eq!(d.emission, emission);
        assert_eq!(d.detection, detection);
        assert_eq!(emission.symbol_at(9), Some(StateSymbol::plus(Intensity::Mu1)));
        assert_eq!(emission.symbol_at(4), None);
        assert_eq!(emission.emitted(Basis::X), 400);
    }

    #[test]
    fn corrupt_dump_rejected() {
        assert!(read_dump(&mut &b"XXXX"[..]).is_err());
    }
}
