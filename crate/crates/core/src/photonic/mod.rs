//! Optical model of the time-bin link: state preparation, interferometer
//! visibility, channel and receiver losses, and per-slot click
//! probabilities at Bob's two detectors.

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorPair, FWHM_PER_SIGMA};
use crate::error::{domain, Result};
use crate::model::{db_to_transmittance, Basis, ProtocolParams, StateSymbol};

pub mod analytic;
pub mod frame;

pub use analytic::{analytic_rates, AnalyticRates, ClassRates};
pub use frame::{ClickSource, DetectorId, FrameConditions, FrameModel, Slot, SymbolChannel};

/// Fiber loss used to convert a length into an attenuation.
pub const FIBER_LOSS_DB_PER_KM: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransmitterModel {
    /// Intensity-modulator extinction ratio in dB; `inf` means no leakage.
    pub extinction_ratio_db: f64,
    /// Optical pulse FWHM in seconds.
    pub pulse_fwhm: f64,
    pub visibility_alice: f64,
    /// Time-bin separation set by the unbalanced interferometer, seconds.
    pub interferometer_delay: f64,
}

impl Default for TransmitterModel {
    fn default() -> Self {
        Self {
            extinction_ratio_db: 40.0,
            pulse_fwhm: 31e-12,
            visibility_alice: 1.0,
            interferometer_delay: 200e-12,
        }
    }
}

impl TransmitterModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.extinction_ratio_db > 0.0) {
            return domain("extinction ratio must be positive");
        }
        if !(self.pulse_fwhm >= 0.0 && self.pulse_fwhm.is_finite()) {
            return domain("pulse FWHM must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.visibility_alice) {
            return domain("transmitter visibility must lie in [0, 1]");
        }
        if !(self.interferometer_delay > 0.0 && self.interferometer_delay.is_finite()) {
            return domain("interferometer delay must be positive");
        }
        Ok(())
    }

    /// Fraction of a Z pulse that stays in its intended bin.
    pub fn extinction_fraction(&self) -> f64 {
        1.0 / (1.0 + 10f64.powf(-self.extinction_ratio_db / 10.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReceiverModel {
    /// Fraction of the light sent to the Z detector.
    pub split_z: f64,
    pub excess_loss_z_db: f64,
    pub excess_loss_x_db: f64,
    pub visibility_min: f64,
    pub visibility_max: f64,
    /// Residual arm-delay mismatch between the two interferometers, seconds.
    pub delay_mismatch: f64,
}

impl Default for ReceiverModel {
    fn default() -> Self {
        Self {
            split_z: 0.94,
            excess_loss_z_db: 2.75,
            excess_loss_x_db: 3.50,
            visibility_min: 0.989,
            visibility_max: 0.997,
            delay_mismatch: 1.6e-12,
        }
    }
}

impl ReceiverModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.split_z) {
            return domain("split_z must lie in [0, 1]");
        }
        if !(self.excess_loss_z_db >= 0.0 && self.excess_loss_x_db >= 0.0) {
            return domain("excess losses must be >= 0 dB");
        }
        if !((0.0..=1.0).contains(&self.visibility_min) && (0.0..=1.0).contains(&self.visibility_max)) {
            return domain("receiver visibilities must lie in [0, 1]");
        }
        if self.visibility_min > self.visibility_max {
            return domain("visibility_min must not exceed visibility_max");
        }
        if !self.delay_mismatch.is_finite() {
            return domain("delay mismatch must be finite");
        }
        Ok(())
    }

    pub fn split_x(&self) -> f64 {
        1.0 - self.split_z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelModel {
    pub attenuation_db: f64,
    /// Random-walk variance rate of the interferometer phase, rad^2/s.
    pub phase_drift_rate: f64,
    /// Random-walk variance rate of the arrival delay, s^2/s.
    pub delay_drift_rate: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self { attenuation_db: 36.0, phase_drift_rate: 0.0, delay_drift_rate: 0.0 }
    }
}

/// Phase random-walk rate used when drift is switched on, rad^2/s.
pub const PLANNED_PHASE_DRIFT_RATE: f64 = 1e-4;
/// Delay random-walk rate used when drift is switched on: 5 ps rms per hour.
pub const PLANNED_DELAY_DRIFT_RATE: f64 = 5e-12 * 5e-12 / 3600.0;

impl ChannelModel {
    pub fn with_planned_drift(self) -> Self {
        Self { phase_drift_rate: PLANNED_PHASE_DRIFT_RATE, delay_drift_rate: PLANNED_DELAY_DRIFT_RATE, ..self }
    }

    pub fn from_length_km(km: f64) -> Self {
        Self { attenuation_db: km * FIBER_LOSS_DB_PER_KM, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.attenuation_db >= 0.0 && self.attenuation_db.is_finite()) {
            return domain("attenuation must be finite and >= 0 dB");
        }
        if !(self.phase_drift_rate >= 0.0 && self.delay_drift_rate >= 0.0) {
            return domain("drift rates must be >= 0");
        }
        Ok(())
    }

    pub fn transmittance(&self) -> f64 {
        db_to_transmittance(self.attenuation_db).expect("validated attenuation")
    }
}

/// Everything that determines Bob's detection statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub params: ProtocolParams<f64>,
    pub tx: TransmitterModel,
    pub rx: ReceiverModel,
    pub channel: ChannelModel,
    pub detectors: DetectorPair,
    /// Use the minimum receiver visibility (worst polarization state).
    pub worst_case_polarization: bool,
}

impl SystemModel {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.tx.validate()?;
        self.rx.validate()?;
        self.channel.validate()?;
        self.detectors.validate()?;
        if self.tx.interferometer_delay * 2.0 > 1.0 / self.params.rep_rate + 1e-18 {
            return domain("two time bins must fit in one clock period");
        }
        Ok(())
    }

    pub fn visibility(&self) -> f64 {
        system_visibility(&self.tx, &self.rx, self.worst_case_polarization)
    }

    pub fn optics(&self) -> LinkOptics {
        LinkOptics::new(&self.channel, &self.rx, &self.detectors)
    }
}

/// Mean photon numbers in the early and late bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinIntensities {
    pub early: f64,
    pub late: f64,
}

impl BinIntensities {
    pub fn total(&self) -> f64 {
        self.early + self.late
    }
}

pub fn encode_symbol(sym: StateSymbol, params: &ProtocolParams<f64>, tx: &TransmitterModel) -> BinIntensities {
    let mu = params.mu(sym.intensity);
    match sym.basis {
        Basis::X => BinIntensities { early: 0.5 * mu, late: 0.5 * mu },
        Basis::Z => {
            let r = tx.extinction_fraction();
            let (on, off) = (mu * r, mu * (1.0 - r));
            if sym.bit {
                BinIntensities { early: off, late: on }
            } else {
                BinIntensities { early: on, late: off }
            }
        }
    }
}

/// Interference visibility of the transmitter/receiver interferometer pair,
/// including the overlap penalty of a residual delay mismatch between
/// Gaussian pulses.
pub fn system_visibility(tx: &TransmitterModel, rx: &ReceiverModel, polarization_worst_case: bool) -> f64 {
    let v_bob = if polarization_worst_case { rx.visibility_min } else { rx.visibility_max };
    let sigma_p = tx.pulse_fwhm / FWHM_PER_SIGMA;
    let overlap = if sigma_p > 0.0 {
        (-(rx.delay_mismatch.powi(2)) / (2.0 * (2.0 * sigma_p).powi(2))).exp()
    } else if rx.delay_mismatch == 0.0 {
        1.0
    } else {
        0.0
    };
    tx.visibility_alice * v_bob * overlap
}

pub fn qber_x_from_visibility(v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        return domain(format!("visibility must lie in [0, 1], got {v}"));
    }
    Ok((1.0 - v) / 2.0)
}

/// Overall detection efficiency from channel input to each detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkOptics {
    pub eta_z: f64,
    pub eta_x: f64,
}

impl LinkOptics {
    pub fn new(channel: &ChannelModel, rx: &ReceiverModel, detectors: &DetectorPair) -> Self {
        let eta_ch = channel.transmittance();
        let ex = |db: f64| 10f64.powf(-db / 10.0);
        Self {
            eta_z: eta_ch * rx.split_z * ex(rx.excess_loss_z_db) * detectors.z.efficiency,
            eta_x: eta_ch * rx.split_x() * ex(rx.excess_loss_x_db) * detectors.x.efficiency,
        }
    }
}

/// Mean detected photon number per slot: Z detector (early, late) and the
/// monitored X output (t0, t1, t2).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlotIntensities {
    pub z: [f64; 2],
    pub x: [f64; 3],
}

impl SlotIntensities {
    pub fn total(&self) -> f64 {
        self.z.iter().chain(&self.x).sum()
    }

    pub fn click_probabilities(&self) -> SlotProbabilities {
        let p = |l: f64| -(-l).exp_m1();
        SlotProbabilities { z: self.z.map(p), x: self.x.map(p) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlotProbabilities {
    pub z: [f64; 2],
    pub x: [f64; 3],
}

/// Detected intensity per slot.
///
/// In the monitored output the early bin through Bob's short arm lands in
/// t0, the late bin through the long arm in t2, and the two cross terms
/// overlap in t1 where they interfere with visibility `v`. `phase = 0` is
/// the destructive lock point.
pub fn slot_intensities(bins: BinIntensities, optics: &LinkOptics, visibility: f64, phase: f64) -> SlotIntensities {
    let (e, l) = (bins.early, bins.late);
    let cross = 2.0 * visibility * (e * l).sqrt() * phase.cos();
    SlotIntensities {
        z: [e * optics.eta_z, l * optics.eta_z],
        x: [
            0.25 * e * optics.eta_x,
            (0.25 * (e + l - cross)).max(0.0) * optics.eta_x,
            0.25 * l * optics.eta_x,
        ],
    }
}

/// Signal click probabilities per slot, before dark counts.
pub fn slot_click_probabilities(
    bins: BinIntensities,
    optics: &LinkOptics,
    visibility: f64,
    phase: f64,
) -> SlotProbabilities {
    slot_intensities(bins, optics, visibility, phase).click_probabilities()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::preset;
    use crate::model::Intensity;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params() -> ProtocolParams<f64> {
        ProtocolParams::default()
    }

    #[test]
    fn encode_examples() {
        let p = params();
        let perfect = TransmitterModel { extinction_ratio_db: f64::INFINITY, ..Default::default() };
        let b = encode_symbol(StateSymbol::z(false, Intensity::Mu1), &p, &perfect);
        assert_eq!((b.early, b.late), (0.5, 0.0));
        let b = encode_symbol(StateSymbol::plus(Intensity::Mu1), &p, &TransmitterModel::default());
        assert_eq!((b.early, b.late), (0.25, 0.25));
        let b = encode_symbol(StateSymbol::z(true, Intensity::Mu1), &p, &TransmitterModel::default());
        assert_relative_eq!(b.early, 0.5e-4 / (1.0 + 1e-4), max_relative = 1e-14);
        assert_relative_eq!(b.late, 0.5 / (1.0 + 1e-4), max_relative = 1e-14);
    }

    #[test]
    fn visibility_examples() {
        let ideal_rx = ReceiverModel { visibility_min: 1.0, visibility_max: 1.0, delay_mismatch: 0.0, ..Default::default() };
        let tx = TransmitterModel::default();
        assert_eq!(system_visibility(&tx, &ideal_rx, true), 1.0);
        let rx = ReceiverModel { delay_mismatch: 0.0, ..Default::default() };
        assert_relative_eq!(system_visibility(&tx, &rx, true), 0.989, max_relative = 1e-15);
        let rx = ReceiverModel { visibility_min: 1.0, visibility_max: 1.0, ..Default::default() };
        // exp(-(1.6)^2 / (2 (2*31/2.355)^2))
        assert_relative_eq!(
            system_visibility(&tx, &rx, true),
            0.998_154_952_895_218_2,
            max_relative = 1e-12
        );
    }

    #[test]
    fn qber_x_examples() {
        assert_eq!(qber_x_from_visibility(1.0).unwrap(), 0.0);
        assert_eq!(qber_x_from_visibility(0.0).unwrap(), 0.5);
        assert_relative_eq!(qber_x_from_visibility(0.989).unwrap(), 0.0055, max_relative = 1e-12);
        assert!(qber_x_from_visibility(1.2).is_err());
    }

    fn optics() -> LinkOptics {
        LinkOptics::new(&ChannelModel::default(), &ReceiverModel::default(), &preset("snspd").unwrap())
    }

    #[test]
    fn zero_light_gives_zero_probabilities() {
        let p = slot_click_probabilities(BinIntensities { early: 0.0, late: 0.0 }, &optics(), 0.99, 0.3);
        assert_eq!(p, SlotProbabilities::default());
    }

    #[test]
    fn perfect_lock_is_dark() {
        let b = encode_symbol(StateSymbol::plus(Intensity::Mu1), &params(), &TransmitterModel::default());
        let p = slot_click_probabilities(b, &optics(), 1.0, 0.0);
        assert_eq!(p.x[1], 0.0);
        assert!(p.x[0] > 0.0 && p.x[2] > 0.0);
    }

    /// Field-amplitude propagation through both unbalanced interferometers.
    /// Partial visibility mixes the coherent pattern with the incoherent one.
    fn amplitude_oracle(early: f64, late: f64, v: f64, phase: f64, eta_x: f64) -> [f64; 3] {
        use num_complex_lite::C;
        let a_e = C::new(early.sqrt(), 0.0);
        let a_l = C::new(late.sqrt(), 0.0);
        let half = 0.5;
        // destructive output: short arm +1/2, long arm -1/2 with phase
        let long = C::from_polar(-half, phase);
        let short = C::new(half, 0.0);
        let t0 = short * a_e;
        let t1 = short * a_l + long * a_e;
        let t2 = long * a_l;
        let incoherent_t1 = (short * a_l).norm_sqr() + (long * a_e).norm_sqr();
        [
            t0.norm_sqr() * eta_x,
            (v * t1.norm_sqr() + (1.0 - v) * incoherent_t1) * eta_x,
            t2.norm_sqr() * eta_x,
        ]
    }

    mod num_complex_lite {
        #[derive(Clone, Copy)]
        pub struct C {
            re: f64,
            im: f64,
        }
        impl C {
            pub fn new(re: f64, im: f64) -> Self {
                Self { re, im }
            }
            pub fn from_polar(r: f64, t: f64) -> Self {
                Self { re: r * t.cos(), im: r * t.sin() }
            }
            pub fn norm_sqr(self) -> f64 {
                self.re * self.re + self.im * self.im
            }
        }
        impl std::ops::Mul for C {
            type Output = C;
            fn mul(self, o: C) -> C {
                C { re: self.re * o.re - self.im * o.im, im: self.re * o.im + self.im * o.re }
            }
        }
        impl std::ops::Add for C {
            type Output = C;
            fn add(self, o: C) -> C {
                C { re: self.re + o.re, im: self.im + o.im }
            }
        }
    }

    #[test]
    fn central_slot_matches_amplitude_oracle() {
        let o = optics();
        let b = encode_symbol(StateSymbol::plus(Intensity::Mu1), &params(), &TransmitterModel::default());
        let got = slot_intensities(b, &o, 0.989, std::f64::consts::PI);
        let want = amplitude_oracle(b.early, b.late, 0.989, std::f64::consts::PI, o.eta_x);
        assert_relative_eq!(got.x[1], 0.5 / 4.0 * 1.989 * o.eta_x, max_relative = 1e-12);
        for i in 0..3 {
            assert_relative_eq!(got.x[i], want[i], max_relative = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn amplitude_oracle_agrees_for_any_state(e in 0.0f64..1.0, l in 0.0f64..1.0, v in 0.0f64..=1.0, ph in -3.2f64..3.2) {
            let o = optics();
            let got = slot_intensities(BinIntensities { early: e, late: l }, &o, v, ph);
            let want = amplitude_oracle(e, l, v, ph, o.eta_x);
            for i in 0..3 {
                prop_assert!((got.x[i] - want[i]).abs() <= 1e-12 * want[i].abs().max(1e-30) + 1e-20);
            }
        }

        #[test]
        fn encoding_preserves_mean_photon_number(idx in 0usize..6, er in 1.0f64..80.0) {
            let tx = TransmitterModel { extinction_ratio_db: er, ..Default::default() };
            let sym = StateSymbol::ALL[idx];
            let b = encode_symbol(sym, &params(), &tx);
            let mu = params().mu(sym.intensity);
            prop_assert!((b.total() - mu).abs() <= 1e-15 * mu);
        }

        #[test]
        fn probabilities_monotone_in_mu_and_transmittance(
            mu in 0.0f64..1.0, dmu in 0.0f64..0.5, scale in 0.0f64..1.0, ph in -3.2f64..3.2, v in 0.0f64..=1.0
        ) {
            let o = optics();
            let o2 = LinkOptics { eta_z: o.eta_z * scale, eta_x: o.eta_x * scale };
            let b = |m: f64| BinIntensities { early: 0.5 * m, late: 0.5 * m };
            let lo = slot_click_probabilities(b(mu), &o, v, ph);
            let hi = slot_click_probabilities(b(mu + dmu), &o, v, ph);
            let dim = slot_click_probabilities(b(mu), &o2, v, ph);
            for i in 0..2 {
                prop_assert!(hi.z[i] >= lo.z[i] && dim.z[i] <= lo.z[i]);
            }
            for i in 0..3 {
                prop_assert!(hi.x[i] >= lo.x[i] && dim.x[i] <= lo.x[i]);
            }
        }

        #[test]
        fn qber_x_of_system_visibility_in_range(
            va in 0.0f64..=1.0, vmin in 0.0f64..=1.0, dv in 0.0f64..=1.0, dt in -50e-12f64..50e-12, worst: bool
        ) {
            let tx = TransmitterModel { visibility_alice: va, ..Default::default() };
            let rx = ReceiverModel { visibility_min: vmin, visibility_max: (vmin + dv).min(1.0), delay_mismatch: dt, ..Default::default() };
            let q = qber_x_from_visibility(system_visibility(&tx, &rx, worst)).unwrap();
            prop_assert!((0.0..=0.5).contains(&q));
        }
    }

    #[test]
    fn random_phase_average_equals_zero_visibility() {
        let o = optics();
        let b = BinIntensities { early: 0.25, late: 0.25 };
        let n = 4096;
        let avg = (0..n)
            .map(|i| slot_intensities(b, &o, 0.97, 2.0 * std::f64::consts::PI * i as f64 / n as f64).x[1])
            .sum::<f64>()
            / n as f64;
        assert_relative_eq!(avg, slot_intensities(b, &o, 0.0, 0.0).x[1], max_relative = 1e-12);
    }
}
