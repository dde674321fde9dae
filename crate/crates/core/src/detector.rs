//! Single-photon detector behaviour: efficiency, dark counts, Gaussian timing
//! jitter, non-paralyzable dead time and afterpulsing.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{domain, Error, Result};

/// Ratio between the full width at half maximum of a Gaussian and its
/// standard deviation, rounded the way the instrument data sheets quote it.
pub const FWHM_PER_SIGMA: f64 = 2.355;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorModel {
    pub efficiency: f64,
    /// Dark counts per second.
    pub dark_rate: f64,
    /// Timing jitter FWHM in seconds.
    pub jitter_fwhm: f64,
    /// Seconds.
    pub dead_time: f64,
    /// Probability that a detection triggers one afterpulse.
    pub afterpulse_prob: f64,
    /// Time constant of the exponential afterpulse release, seconds.
    pub afterpulse_decay: f64,
}

impl DetectorModel {
    pub const IDEAL: DetectorModel = DetectorModel {
        efficiency: 1.0,
        dark_rate: 0.0,
        jitter_fwhm: 0.0,
        dead_time: 0.0,
        afterpulse_prob: 0.0,
        afterpulse_decay: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("efficiency", self.efficiency),
            ("dark_rate", self.dark_rate),
            ("jitter_fwhm", self.jitter_fwhm),
            ("dead_time", self.dead_time),
            ("afterpulse_prob", self.afterpulse_prob),
            ("afterpulse_decay", self.afterpulse_decay),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return domain(format!("detector {name} must be finite and >= 0, got {v}"));
            }
        }
        if self.efficiency > 1.0 {
            return domain("detector efficiency must be <= 1");
        }
        if self.afterpulse_prob >= 1.0 {
            return domain("afterpulse probability must be < 1");
        }
        if self.afterpulse_prob > 0.0 && self.afterpulse_decay <= 0.0 {
            return domain("afterpulsing needs a positive release time constant");
        }
        Ok(())
    }

    pub fn jitter_sigma(&self) -> f64 {
        self.jitter_fwhm / FWHM_PER_SIGMA
    }
}

/// The Z-basis detector and the monitored X-basis detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorPair {
    pub z: DetectorModel,
    pub x: DetectorModel,
}

impl DetectorPair {
    pub fn validate(&self) -> Result<()> {
        self.z.validate()?;
        self.x.validate()
    }
}

const SNSPD_Z: DetectorModel = DetectorModel {
    efficiency: 0.80,
    dark_rate: 200.0,
    jitter_fwhm: 40e-12,
    dead_time: 0.0,
    afterpulse_prob: 0.0,
    afterpulse_decay: 0.0,
};

const SPAD_BASE: DetectorModel = DetectorModel {
    efficiency: 0.20,
    dark_rate: SPAD_DARK_RATE,
    jitter_fwhm: SPAD_JITTER_FWHM,
    dead_time: 20e-6,
    afterpulse_prob: 0.02,
    afterpulse_decay: 1e-6,
};

/// InGaAs SPAD timing jitter. A design value, not a detector datasheet figure;
/// chosen so that the jitter spill-over gives the few-percent Z error the
/// free-running InGaAs runs show.
pub const SPAD_JITTER_FWHM: f64 = 120e-12;
/// InGaAs SPAD dark count rate, same status as [`SPAD_JITTER_FWHM`].
pub const SPAD_DARK_RATE: f64 = 100.0;

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 7] =
    ["ideal", "snspd", "spad", "spad-30db", "spad-35db", "spad-40db", "spad-151km"];

/// Named detector configurations.
///
/// `spad-*` variants carry the per-row dead time of the InGaAs measurement
/// series; `spad` alone uses 20 us.
pub fn preset(name: &str) -> Result<DetectorPair> {
    let spad = |dead_time: f64| {
        let d = DetectorModel { dead_time, ..SPAD_BASE };
        DetectorPair { z: d, x: d }
    };
    Ok(match name {
        "ideal" => DetectorPair { z: DetectorModel::IDEAL, x: DetectorModel::IDEAL },
        "snspd" => DetectorPair { z: SNSPD_Z, x: DetectorModel { dark_rate: 100.0, ..SNSPD_Z } },
        "spad" | "spad-30db" | "spad-40db" => spad(20e-6),
        "spad-35db" => spad(32e-6),
        "spad-151km" => spad(40e-6),
        other => {
            return Err(Error::Config(format!(
                "unknown detector preset '{other}' (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    })
}

/// Upper tail of the standard normal distribution.
pub fn normal_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Probability that an arrival lands on the wrong side of the boundary
/// halfway between two time bins.
///
/// The spread combines detector jitter and optical pulse width in
/// quadrature; `offset` is a systematic arrival shift towards the boundary.
pub fn wrong_bin_probability(jitter_fwhm: f64, pulse_fwhm: f64, bin_separation: f64, offset: f64) -> f64 {
    let sigma = (jitter_fwhm.powi(2) + pulse_fwhm.powi(2)).sqrt() / FWHM_PER_SIGMA;
    let margin = 0.5 * bin_separation - offset;
    if sigma == 0.0 {
        return if margin > 0.0 { 0.0 } else { 1.0 };
    }
    normal_tail(margin / sigma)
}

/// Origin of a detector click.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClickOrigin {
    Signal,
    Dark,
    Afterpulse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub time: f64,
    pub origin: ClickOrigin,
}

/// Mutable per-detector history: the last accepted click and the queue of
/// scheduled afterpulse releases (kept sorted).
#[derive(Debug, Clone, Default)]
pub struct DetectorState {
    last_click: Option<f64>,
    pending_afterpulses: VecDeque<f64>,
    last_slot_time: Option<f64>,
}

impl DetectorState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_click(&self) -> Option<f64> {
        self.last_click
    }

    pub fn pending_afterpulses(&self) -> impl Iterator<Item = f64> + '_ {
        self.pending_afterpulses.iter().copied()
    }

    /// A detector cannot register two clicks at the same instant, so a
    /// click must also be strictly later than the previous one.
    pub fn is_live(&self, t: f64, model: &DetectorModel) -> bool {
        self.last_click.is_none_or(|last| t > last && t - last >= model.dead_time)
    }

    /// Earliest scheduled afterpulse release, if any.
    pub fn next_afterpulse(&self) -> Option<f64> {
        self.pending_afterpulses.front().copied()
    }

    pub fn pop_afterpulse(&mut self) -> Option<f64> {
        self.pending_afterpulses.pop_front()
    }

    pub fn discard_afterpulses_before(&mut self, t: f64) {
        while self.pending_afterpulses.front().is_some_and(|&r| r < t) {
            self.pending_afterpulses.pop_front();
        }
    }

    /// Offers a click at time `t`. Returns whether the detector was live and
    /// registered it; a registered click opens the dead-time window and may
    /// schedule an afterpulse.
    pub fn offer<R: Rng + ?Sized>(&mut self, t: f64, model: &DetectorModel, rng: &mut R) -> bool {
        if !self.is_live(t, model) {
            return false;
        }
        self.last_click = Some(t);
        if model.afterpulse_prob > 0.0 && rng.random::<f64>() < model.afterpulse_prob {
            let delay = Exp::new(1.0 / model.afterpulse_decay)
                .expect("positive afterpulse decay")
                .sample(rng);
            let release = t + delay;
            let at = self.pending_afterpulses.partition_point(|&r| r <= release);
            self.pending_afterpulses.insert(at, release);
        }
        true
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Slot-stepped detector update.
///
/// Releases any afterpulse falling before the end of the slot, then draws
/// the optical and dark-count click for the slot. At most one click is
/// reported per slot.
pub fn sample_click<R: Rng + ?Sized>(
    p_optical: f64,
    slot_time: f64,
    slot_width: f64,
    state: &mut DetectorState,
    model: &DetectorModel,
    rng: &mut R,
) -> Result<Option<Detection>> {
    if !(0.0..=1.0).contains(&p_optical) {
        return domain(format!("optical click probability must lie in [0, 1], got {p_optical}"));
    }
    if let Some(prev) = state.last_slot_time {
        if slot_time < prev {
            return Err(Error::Sequencing(format!(
                "slot time went backwards ({slot_time} < {prev})"
            )));
        }
    }
    state.last_slot_time = Some(slot_time);

    let slot_end = slot_time + slot_width;
    let mut result = None;
    while let Some(release) = state.next_afterpulse() {
        if release >= slot_end {
            break;
        }
        state.pop_afterpulse();
        if state.offer(release, model, rng) && result.is_none() {
            result = Some(Detection { time: release, origin: ClickOrigin::Afterpulse });
        }
    }
    if result.is_some() {
        return Ok(result);
    }

    let signal = p_optical > 0.0 && rng.random::<f64>() < p_optical;
    let p_dark = model.dark_rate * slot_width;
    let dark = !signal && p_dark > 0.0 && rng.random::<f64>() < p_dark;
    if !(signal || dark) {
        return Ok(None);
    }
    let (time, origin) = if signal {
        let sigma = model.jitter_sigma();
        let jitter = if sigma > 0.0 {
            Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
        } else {
            0.0
        };
        (slot_time + jitter, ClickOrigin::Signal)
    } else {
        (slot_time + rng.random::<f64>() * slot_width, ClickOrigin::Dark)
    };
    if state.offer(time, model, rng) {
        Ok(Some(Detection { time, origin }))
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn presets_carry_reference_values() {
        let s = preset("snspd").unwrap();
        assert_eq!(s.z.efficiency, 0.80);
        assert_eq!(s.z.jitter_fwhm, 40e-12);
        assert_eq!(s.z.dark_rate, 200.0);
        assert_eq!(s.x.dark_rate, 100.0);
        assert_eq!(s.z.dead_time, 0.0);
        assert_eq!(s.z.afterpulse_prob, 0.0);
        assert_eq!(preset("spad-151km").unwrap().z.dead_time, 40e-6);
        assert_eq!(preset("spad-35db").unwrap().x.dead_time, 32e-6);
        assert_eq!(preset("spad").unwrap().z.efficiency, 0.20);
        let ideal = preset("ideal").unwrap();
        assert_eq!(ideal.z, DetectorModel::IDEAL);
        assert!(matches!(preset("pmt"), Err(Error::Config(_))));
        for name in PRESET_NAMES {
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn wrong_bin_limits() {
        assert_eq!(wrong_bin_probability(0.0, 0.0, 200e-12, 0.0), 0.0);
        // combined sigma equal to the 100 ps half separation gives Phi(-1)
        let fwhm = 100e-12 * FWHM_PER_SIGMA;
        assert_relative_eq!(
            wrong_bin_probability(fwhm, 0.0, 200e-12, 0.0),
            0.158_655_253_931_457_05,
            max_relative = 1e-9
        );
    }

    #[test]
    fn wrong_bin_snspd_matches_quadrature() {
        // Trapezoid integration of the Gaussian density beyond the boundary.
        let sigma = ((40e-12f64).powi(2) + (31e-12f64).powi(2)).sqrt() / FWHM_PER_SIGMA;
        let b = 100e-12 / sigma;
        let steps = 200_000;
        let upper = b + 12.0;
        let h = (upper - b) / steps as f64;
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = 0.5 * (pdf(b) + pdf(upper));
        for i in 1..steps {
            acc += pdf(b + i as f64 * h);
        }
        let quad = acc * h;
        let got = wrong_bin_probability(40e-12, 31e-12, 200e-12, 0.0);
        assert_relative_eq!(got, quad, max_relative = 1e-6);
        assert!(got < 1e-5);
    }

    #[test]
    fn certain_click_without_impairments_is_on_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = DetectorState::new();
        let d = sample_click(1.0, 5e-9, 200e-12, &mut st, &DetectorModel::IDEAL, &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(d.time, 5e-9);
        assert_eq!(d.origin, ClickOrigin::Signal);
        assert!(sample_click(0.0, 6e-9, 200e-12, &mut st, &DetectorModel::IDEAL, &mut rng)
            .unwrap()
            .is_none());
    }

    #[test]
    fn decreasing_slot_time_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut st = DetectorState::new();
        sample_click(0.0, 2.0, 1.0, &mut st, &DetectorModel::IDEAL, &mut rng).unwrap();
        let err = sample_click(0.0, 1.0, 1.0, &mut st, &DetectorModel::IDEAL, &mut rng);
        assert!(matches!(err, Err(Error::Sequencing(_))));
    }

    #[test]
    fn dead_time_spacing_is_respected() {
        let model = DetectorModel {
            dead_time: 1e-6,
            afterpulse_prob: 0.3,
            afterpulse_decay: 2e-6,
            dark_rate: 1e4,
            ..DetectorModel::IDEAL
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = DetectorState::new();
        let mut last: Option<f64> = None;
        let mut clicks = 0;
        for i in 0..200_000u64 {
            let t = i as f64 * 50e-9;
            if let Some(d) = sample_click(0.02, t, 50e-9, &mut st, &model, &mut rng).unwrap() {
                if let Some(l) = last {
                    assert!(d.time - l >= model.dead_time - 1e-15);
                }
                last = Some(d.time);
                clicks += 1;
            }
        }
        assert!(clicks > 1000);
    }

    #[test]
    fn dark_rate_only() {
        let model = DetectorModel { dark_rate: 2e5, ..DetectorModel::IDEAL };
        let width = 400e-12;
        let slots = 2_000_000u64;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut st = DetectorState::new();
        let mut n = 0u64;
        for i in 0..slots {
            if sample_click(0.0, i as f64 * width, width, &mut st, &model, &mut rng).unwrap().is_some() {
                n += 1;
            }
        }
        let expected = model.dark_rate * width * slots as f64;
        assert!((n as f64 - expected).abs() < 3.0 * expected.sqrt(), "{n} vs {expected}");
    }

    #[test]
    fn jitter_histogram_is_gaussian_with_configured_width() {
        let model = DetectorModel { jitter_fwhm: 40e-12, ..DetectorModel::IDEAL };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut st = DetectorState::new();
        let n = 100_000;
        let mut xs = Vec::with_capacity(n);
        for i in 0..n {
            let t0 = i as f64 * 1e-9;
            let d = sample_click(1.0, t0, 1e-9, &mut st, &model, &mut rng).unwrap().unwrap();
            xs.push(d.time - t0);
        }
        let m = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        let skew = xs.iter().map(|x| ((x - m) / sd).powi(3)).sum::<f64>() / n as f64;
        let kurt = xs.iter().map(|x| ((x - m) / sd).powi(4)).sum::<f64>() / n as f64;
        // moment test: standard errors sqrt(6/n) and sqrt(24/n)
        assert!(skew.abs() < 4.0 * (6.0 / n as f64).sqrt());
        assert!((kurt - 3.0).abs() < 4.0 * (24.0 / n as f64).sqrt());
        let fwhm = sd * FWHM_PER_SIGMA;
        assert!((fwhm / 40e-12 - 1.0).abs() < 0.05);
    }
}
