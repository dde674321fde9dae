//! Per-frame click processes: for each prepared symbol, the independent
//! Bernoulli sources (signal per slot plus one dark process per detector)
//! that can make Bob's detectors fire, and how jitter moves a signal click
//! into a neighbouring slot.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{encode_symbol, slot_intensities, SystemModel};
use crate::detector::{normal_tail, FWHM_PER_SIGMA};
use crate::error::Result;
use crate::model::StateSymbol;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectorId {
    Z,
    X,
}

impl DetectorId {
    pub const ALL: [DetectorId; 2] = [DetectorId::Z, DetectorId::X];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DetectorId::Z),
            1 => Some(DetectorId::X),
            _ => None,
        }
    }

    pub fn slot_count(self) -> usize {
        match self {
            DetectorId::Z => 2,
            DetectorId::X => 3,
        }
    }
}

/// Arrival slot within a frame. Z detector: early/late bins. Monitored X
/// output: t0 (early bin, short arm), t1 (interfering), t2 (late bin, long arm).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    Early,
    Late,
    T0,
    T1,
    T2,
}

impl Slot {
    pub fn detector(self) -> DetectorId {
        match self {
            Slot::Early | Slot::Late => DetectorId::Z,
            _ => DetectorId::X,
        }
    }

    /// Position of the slot on its detector's time axis, in bin separations.
    pub fn position(self) -> usize {
        match self {
            Slot::Early | Slot::T0 => 0,
            Slot::Late | Slot::T1 => 1,
            Slot::T2 => 2,
        }
    }

    pub fn from_position(det: DetectorId, pos: usize) -> Option<Self> {
        match (det, pos) {
            (DetectorId::Z, 0) => Some(Slot::Early),
            (DetectorId::Z, 1) => Some(Slot::Late),
            (DetectorId::X, 0) => Some(Slot::T0),
            (DetectorId::X, 1) => Some(Slot::T1),
            (DetectorId::X, 2) => Some(Slot::T2),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [Slot::Early, Slot::Late, Slot::T0, Slot::T1, Slot::T2].get(c as usize).copied()
    }

    pub fn nominal_offset(self, bin_separation: f64) -> f64 {
        self.position() as f64 * bin_separation
    }
}

/// Slowly varying link state seen by one control interval.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameConditions {
    /// Residual interferometer phase, 0 = destructive lock.
    pub phase: f64,
    /// Residual arrival offset relative to Bob's slot grid, seconds.
    pub delay_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClickSource {
    pub probability: f64,
    pub detector: DetectorId,
    /// Nominal slot for signal sources; darks pick their slot on firing.
    pub slot: Slot,
    /// Detected mean photon number (zero for dark sources).
    pub mean: f64,
    pub dark: bool,
}

pub const SOURCES: usize = 7;

/// Source indices in [`SymbolChannel::sources`].
pub mod source {
    pub const Z_EARLY: usize = 0;
    pub const Z_LATE: usize = 1;
    pub const Z_DARK: usize = 2;
    pub const X_T0: usize = 3;
    pub const X_T1: usize = 4;
    pub const X_T2: usize = 5;
    pub const X_DARK: usize = 6;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymbolChannel {
    pub symbol: StateSymbol,
    pub sources: [ClickSource; SOURCES],
    /// Probability that at least one source fires.
    pub p_any: f64,
    /// Mean photon number sent by Alice.
    pub mu: f64,
}

impl SymbolChannel {
    /// Sum of the detected means, i.e. the part of `mu` that reaches a
    /// detector slot.
    pub fn detected_mean(&self) -> f64 {
        self.sources.iter().map(|s| s.mean).sum()
    }

    pub fn p_any_on(&self, det: DetectorId) -> f64 {
        1.0 - self
            .sources
            .iter()
            .filter(|s| s.detector == det)
            .map(|s| 1.0 - s.probability)
            .product::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameModel {
    pub symbols: [SymbolChannel; 6],
    pub symbol_prob: [f64; 6],
    /// Probability that a frame produces at least one raw click.
    pub p_detect: f64,
    /// Combined pulse and jitter standard deviation per detector.
    pub sigma: [f64; 2],
    pub conditions: FrameConditions,
    pub bin_separation: f64,
}

impl FrameModel {
    pub fn new(system: &SystemModel, conditions: FrameConditions) -> Result<Self> {
        system.validate()?;
        let params = &system.params;
        let optics = system.optics();
        let v = system.visibility();
        let dets = [system.detectors.z, system.detectors.x];
        let dark = dets.map(|d| (d.dark_rate / params.rep_rate).min(1.0));
        let sigma = dets.map(|d| (d.jitter_fwhm.powi(2) + system.tx.pulse_fwhm.powi(2)).sqrt() / FWHM_PER_SIGMA);

        let symbols = StateSymbol::ALL.map(|symbol| {
            let bins = encode_symbol(symbol, params, &system.tx);
            let li = slot_intensities(bins, &optics, v, conditions.phase);
            let p = |l: f64| -(-l).exp_m1();
            let signal = |det, slot, mean: f64| ClickSource { probability: p(mean), detector: det, slot, mean, dark: false };
            let dark_src = |det: DetectorId, slot| ClickSource {
                probability: dark[det.index()],
                detector: det,
                slot,
                mean: 0.0,
                dark: true,
            };
            let sources = [
                signal(DetectorId::Z, Slot::Early, li.z[0]),
                signal(DetectorId::Z, Slot::Late, li.z[1]),
                dark_src(DetectorId::Z, Slot::Early),
                signal(DetectorId::X, Slot::T0, li.x[0]),
                signal(DetectorId::X, Slot::T1, li.x[1]),
                signal(DetectorId::X, Slot::T2, li.x[2]),
                dark_src(DetectorId::X, Slot::T1),
            ];
            let p_none: f64 = sources.iter().map(|s| 1.0 - s.probability).product();
            SymbolChannel { symbol, sources, p_any: 1.0 - p_none, mu: bins.total() }
        });
        let symbol_prob = StateSymbol::ALL.map(|s| params.symbol_probability(s));
        let p_detect = symbols.iter().zip(&symbol_prob).map(|(c, p)| p * c.p_any).sum();
        Ok(Self {
            symbols,
            symbol_prob,
            p_detect,
            sigma,
            conditions,
            bin_separation: system.tx.interferometer_delay,
        })
    }

    fn half(&self) -> f64 {
        0.5 * self.bin_separation
    }

    /// Probabilities that a signal click is pushed one slot later or earlier.
    pub fn shift_probabilities(&self, det: DetectorId) -> (f64, f64) {
        let s = self.sigma[det.index()];
        let dt = self.conditions.delay_offset;
        let h = self.half();
        if s == 0.0 {
            return (if dt >= h { 1.0 } else { 0.0 }, if dt < -h { 1.0 } else { 0.0 });
        }
        (normal_tail((h - dt) / s), normal_tail((h + dt) / s))
    }

    /// Distribution over slot positions of a fired source.
    pub fn landing(&self, src: &ClickSource) -> [f64; 3] {
        let mut out = [0.0; 3];
        let n = src.detector.slot_count();
        if src.dark {
            match src.detector {
                DetectorId::Z => {
                    out[0] = 0.5;
                    out[1] = 0.5;
                }
                DetectorId::X => {
                    out[0] = 0.25;
                    out[1] = 0.5;
                    out[2] = 0.25;
                }
            }
            return out;
        }
        let (up, down) = self.shift_probabilities(src.detector);
        let pos = src.slot.position();
        let later = (pos + 1).min(n - 1);
        let earlier = pos.saturating_sub(1);
        out[later] += up;
        out[earlier] += down;
        out[pos] += 1.0 - up - down;
        out
    }

    /// Arrival offset of a signal click relative to its nominal slot time.
    pub fn sample_offset<R: Rng + ?Sized>(&self, det: DetectorId, rng: &mut R) -> f64 {
        let s = self.sigma[det.index()];
        let dt = self.conditions.delay_offset;
        if s == 0.0 {
            return dt;
        }
        Normal::new(dt, s).expect("finite sigma").sample(rng)
    }

    /// Slot position a signal click with the given offset is assigned to.
    pub fn position_for_offset(&self, det: DetectorId, nominal: usize, offset: f64) -> usize {
        let h = self.half();
        let n = det.slot_count();
        if offset >= h {
            (nominal + 1).min(n - 1)
        } else if offset < -h {
            nominal.saturating_sub(1)
        } else {
            nominal
        }
    }

    pub fn sample_dark_position<R: Rng + ?Sized>(&self, det: DetectorId, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        match det {
            DetectorId::Z => (u >= 0.5) as usize,
            DetectorId::X => {
                if u < 0.25 {
                    0
                } else if u < 0.75 {
                    1
                } else {
                    2
                }
            }
        }
    }

    /// Symbol weights of frames with at least one click (unnormalised).
    pub fn detected_weights(&self) -> [f64; 6] {
        std::array::from_fn(|i| self.symbol_prob[i] * self.symbols[i].p_any)
    }

    /// Symbol weights of frames without any click (unnormalised).
    pub fn undetected_weights(&self) -> [f64; 6] {
        std::array::from_fn(|i| self.symbol_prob[i] * (1.0 - self.symbols[i].p_any))
    }

    /// Draws which sources fired in a frame of symbol `idx`, conditioned on
    /// at least one of them firing.
    pub fn sample_fired<R: Rng + ?Sized>(&self, idx: usize, rng: &mut R) -> [bool; SOURCES] {
        let src = &self.symbols[idx].sources;
        // none_from[i] = probability that sources i.. all stay silent
        let mut none_from = [1.0; SOURCES + 1];
        for i in (0..SOURCES).rev() {
            none_from[i] = none_from[i + 1] * (1.0 - src[i].probability);
        }
        let mut fired = [false; SOURCES];
        let mut any = false;
        for i in 0..SOURCES {
            let p = src[i].probability;
            let q = if any {
                p
            } else {
                let denom = 1.0 - none_from[i];
                if denom <= 0.0 {
                    0.0
                } else {
                    (p / denom).min(1.0)
                }
            };
            if q > 0.0 && rng.random::<f64>() < q {
                fired[i] = true;
                any = true;
            }
        }
        fired
    }
}

/// Draws an index from unnormalised weights.
pub fn sample_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::preset;
    use crate::photonic::{ChannelModel, ReceiverModel, TransmitterModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn system(att: f64) -> SystemModel {
        SystemModel {
            params: Default::default(),
            tx: TransmitterModel::default(),
            rx: ReceiverModel::default(),
            channel: ChannelModel { attenuation_db: att, ..Default::default() },
            detectors: preset("snspd").unwrap(),
            worst_case_polarization: true,
        }
    }

    #[test]
    fn slot_codes_roundtrip() {
        for c in 0..5 {
            let s = Slot::from_code(c).unwrap();
            assert_eq!(s.code(), c);
            assert_eq!(Slot::from_position(s.detector(), s.position()), Some(s));
        }
        assert!(Slot::from_code(5).is_none());
    }

    #[test]
    fn landing_sums_to_one() {
        let m = FrameModel::new(&system(10.0), FrameConditions { phase: 0.1, delay_offset: 30e-12 }).unwrap();
        for ch in &m.symbols {
            for s in &ch.sources {
                let l = m.landing(s);
                assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conditional_sampler_matches_marginals() {
        // Bright light so several sources are comparable.
        let mut sys = system(0.0);
        sys.params.mu1 = 0.9;
        sys.detectors.z.dark_rate = 2.5e8;
        sys.detectors.x.dark_rate = 5e8;
        let m = FrameModel::new(&sys, FrameConditions { phase: 0.7, delay_offset: 0.0 }).unwrap();
        let idx = 2;
        let ch = &m.symbols[idx];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200_000;
        let mut counts = [0u64; SOURCES];
        for _ in 0..n {
            let f = m.sample_fired(idx, &mut rng);
            assert!(f.iter().any(|&b| b));
            for i in 0..SOURCES {
                counts[i] += f[i] as u64;
            }
        }
        for i in 0..SOURCES {
            let want = ch.sources[i].probability / ch.p_any;
            let got = counts[i] as f64 / n as f64;
            let sd = (want * (1.0 - want) / n as f64).sqrt();
            assert!((got - want).abs() < 5.0 * sd + 1e-12, "source {i}: {got} vs {want}");
        }
    }
}
