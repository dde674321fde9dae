//! Basis sifting from Bob's detection report and Alice's disclosures.

use rand::Rng;

use super::tally::RawTallies;
use super::wire::{ReportEntry, SiftEntry};
use crate::error::{Error, Result};
use crate::linksim::records::{DetectionRecord, EmissionRecord};
use crate::model::{Basis, Intensity};
use crate::photonic::{DetectorId, Slot};

/// Bob's private view of his report: the raw bit of every Z entry, in report
/// order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BobView {
    pub z_bits: Vec<u8>,
    /// Z frames with both bins fired, resolved by a fair coin.
    pub double_clicks: u64,
}

/// Collapses a frame's Z clicks to one bit. Double clicks get a random bit.
pub fn resolve_double_clicks<R: Rng + ?Sized>(early: bool, late: bool, rng: &mut R) -> Option<(u8, bool)> {
    match (early, late) {
        (false, false) => None,
        (true, false) => Some((0, false)),
        (false, true) => Some((1, false)),
        (true, true) => Some((rng.random::<bool>() as u8, true)),
    }
}

/// Builds the public report and Bob's private bits. Z entries reveal only
/// that the frame clicked; X entries reveal their slot.
pub fn bob_report<R: Rng + ?Sized>(detection: &DetectionRecord, rng: &mut R) -> (Vec<ReportEntry>, BobView) {
    let mut events: Vec<_> = detection.events.iter().map(|e| (e.frame, e.slot)).collect();
    events.sort_by_key(|&(f, s)| (f, s.detector(), s.position()));
    events.dedup();
    let mut report = Vec::new();
    let mut view = BobView::default();
    let mut i = 0;
    while i < events.len() {
        let frame = events[i].0;
        let mut j = i;
        let (mut early, mut late) = (false, false);
        let mut x = Vec::new();
        while j < events.len() && events[j].0 == frame {
            match events[j].1 {
                Slot::Early => early = true,
                Slot::Late => late = true,
                s => x.push(s.position() as u8),
            }
            j += 1;
        }
        if let Some((bit, double)) = resolve_double_clicks(early, late, rng) {
            report.push(ReportEntry { frame, detector: DetectorId::Z, slot: 0 });
            view.z_bits.push(bit);
            view.double_clicks += double as u64;
        }
        for slot in x {
            report.push(ReportEntry { frame, detector: DetectorId::X, slot });
        }
        i = j;
    }
    (report, view)
}

/// Checks report ordering against the block and answers every entry.
pub fn alice_respond(emission: &EmissionRecord, report: &[ReportEntry]) -> Result<Vec<SiftEntry>> {
    let mut prev: Option<(u64, u8, u8)> = None;
    report
        .iter()
        .map(|e| {
            let key = (e.frame, e.detector.code(), e.slot);
            if prev.is_some_and(|p| p >= key) {
                return Err(Error::Protocol("detection report is not strictly ordered".into()));
            }
            prev = Some(key);
            if e.frame >= emission.frames {
                return Err(Error::Protocol(format!("report names frame {} beyond the block", e.frame)));
            }
            let sym = emission
                .symbol_at(e.frame)
                .ok_or_else(|| Error::Protocol(format!("no emission recorded for frame {}", e.frame)))?;
            Ok(SiftEntry { basis: sym.basis, intensity: sym.intensity })
        })
        .collect()
}

/// Outcome of sifting, identical on both sides except for the key bits.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Sifted {
    /// Report indices of the sifted (Z/Z) events.
    pub key_entries: Vec<usize>,
    /// Intensity class of each sifted bit.
    pub tags: Vec<Intensity>,
    /// `n_z`, `x_side` and `x_central`; `m_z` is filled after reconciliation.
    pub raw: RawTallies,
}

pub fn classify(report: &[ReportEntry], responses: &[SiftEntry]) -> Result<Sifted> {
    if report.len() != responses.len() {
        return Err(Error::Protocol(format!(
            "{} sift responses for {} report entries",
            responses.len(),
            report.len()
        )));
    }
    let mut s = Sifted::default();
    let mut side_frame = None;
    for (i, (e, r)) in report.iter().zip(responses).enumerate() {
        let k = r.intensity.index();
        match (e.detector, r.basis) {
            (DetectorId::Z, Basis::Z) => {
                s.key_entries.push(i);
                s.tags.push(r.intensity);
                s.raw.n_z[k] += 1;
            }
            (DetectorId::X, Basis::X) => {
                if e.slot == 1 {
                    s.raw.x_central[k] += 1;
                } else if side_frame != Some(e.frame) {
                    side_frame = Some(e.frame);
                    s.raw.x_side[k] += 1;
                }
            }
            _ => {}
        }
    }
    Ok(s)
}

pub fn alice_key(emission: &EmissionRecord, report: &[ReportEntry], sifted: &Sifted) -> Vec<u8> {
    sifted
        .key_entries
        .iter()
        .map(|&i| emission.symbol_at(report[i].frame).expect("checked by alice_respond").bit as u8)
        .collect()
}

pub fn bob_key(report: &[ReportEntry], view: &BobView, sifted: &Sifted) -> Vec<u8> {
    let mut z_index = Vec::with_capacity(report.len());
    let mut n = 0;
    for e in report {
        z_index.push(n);
        n += (e.detector == DetectorId::Z) as usize;
    }
    sifted.key_entries.iter().map(|&i| view.z_bits[z_index[i]]).collect()
}

/// Both sides of a sifted block, for tests and local analysis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiftedBlock {
    pub alice: Vec<u8>,
    pub bob: Vec<u8>,
    pub tags: Vec<Intensity>,
    pub raw: RawTallies,
}

pub fn sift<R: Rng + ?Sized>(emission: &EmissionRecord, detection: &DetectionRecord, rng: &mut R) -> Result<SiftedBlock> {
    let (report, view) = bob_report(detection, rng);
    let responses = alice_respond(emission, &report)?;
    let s = classify(&report, &responses)?;
    Ok(SiftedBlock {
        alice: alice_key(emission, &report, &s),
        bob: bob_key(&report, &view, &s),
        tags: s.tags,
        raw: s.raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ClickOrigin;
    use crate::linksim::records::DetectionEvent;
    use crate::model::StateSymbol;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ev(frame: u64, slot: Slot) -> DetectionEvent {
        DetectionEvent { frame, detector: slot.detector(), slot, time: frame as f64 * 4e-10, origin: ClickOrigin::Signal }
    }

    fn block() -> (EmissionRecord, DetectionRecord) {
        let emission = EmissionRecord {
            frames: 100,
            entries: vec![
                (1, StateSymbol::z(true, Intensity::Mu1)),
                (2, StateSymbol::z(false, Intensity::Mu2)),
                (3, StateSymbol::plus(Intensity::Mu1)),
                (4, StateSymbol::plus(Intensity::Mu2)),
                (5, StateSymbol::z(true, Intensity::Mu1)),
            ],
            class_totals: [20, 20, 20, 20, 10, 10],
        };
        let detection = DetectionRecord {
            events: vec![
                ev(1, Slot::Late),
                ev(2, Slot::Late),
                ev(2, Slot::T1),
                ev(3, Slot::T0),
                ev(3, Slot::T2),
                ev(3, Slot::T1),
                ev(4, Slot::Early),
                ev(5, Slot::Early),
                ev(5, Slot::Late),
            ],
        };
        (emission, detection)
    }

    #[test]
    fn report_hides_z_bits() {
        let (_, d) = block();
        let (report, view) = bob_report(&d, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(report.iter().filter(|e| e.detector == DetectorId::Z).all(|e| e.slot == 0));
        assert_eq!(view.z_bits.len(), 4);
        assert_eq!(view.double_clicks, 1);
        assert_eq!(report.len(), 8);
    }

    #[test]
    fn sift_counts_and_keys() {
        let (e, d) = block();
        let s = sift(&e, &d, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // Z/Z frames: 1, 2, 5. Frame 4 was X on Alice's side.
        assert_eq!(s.alice, vec![1, 0, 1]);
        assert_eq!(&s.bob[..2], &[1, 1]);
        assert_eq!(s.tags, vec![Intensity::Mu1, Intensity::Mu2, Intensity::Mu1]);
        assert_eq!(s.raw.n_z, [2, 1]);
        // Frame 3 counts once for the side slots even with t0 and t2.
        assert_eq!(s.raw.x_side, [1, 0]);
        assert_eq!(s.raw.x_central, [1, 0]);
    }

    #[test]
    fn double_clicks_are_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let ones: u32 = (0..n).map(|_| resolve_double_clicks(true, true, &mut rng).unwrap().0 as u32).sum();
        assert!((ones as f64 - n as f64 / 2.0).abs() < 5.0 * (n as f64 / 4.0).sqrt());
    }

    #[test]
    fn alice_rejects_bad_reports() {
        let (e, _) = block();
        let z = |frame| ReportEntry { frame, detector: DetectorId::Z, slot: 0 };
        assert!(matches!(alice_respond(&e, &[z(7)]), Err(Error::Protocol(_))));
        assert!(matches!(alice_respond(&e, &[z(200)]), Err(Error::Protocol(_))));
        assert!(matches!(alice_respond(&e, &[z(2), z(1)]), Err(Error::Protocol(_))));
        assert!(matches!(alice_respond(&e, &[z(1), z(1)]), Err(Error::Protocol(_))));
        assert!(classify(&[z(1)], &[]).is_err());
    }
}
