//! Closed-form expected rates obtained by composing the per-frame click
//! sources, including the non-paralyzable dead-time throughput.

use serde::{Deserialize, Serialize};

use super::frame::{DetectorId, FrameConditions, FrameModel, SymbolChannel};
use super::SystemModel;
use crate::error::Result;
use crate::model::{Basis, Intensity};

/// Per-frame probabilities for one intensity class. Every field is a joint
/// probability over a random frame (class choice included).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassRates {
    pub emitted_z: f64,
    pub emitted_x: f64,
    /// Z sent and the Z detector fired.
    pub sifted: f64,
    /// Sifted frames whose key bit is wrong (double clicks count half).
    pub z_errors: f64,
    /// X sent and the monitored output fired in a side slot (t0 or t2).
    pub x_side: f64,
    /// X sent and the monitored output fired in the central slot.
    pub x_central: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticRates {
    pub per_class: [ClassRates; 2],
    /// Sifted bits per second.
    pub rkr: f64,
    pub qber_z: f64,
    pub qber_x: f64,
    /// Z-detector gain per intensity: P(Z click | Z sent at that intensity).
    pub gains: [f64; 2],
    /// Dead-time throughput factor per detector.
    pub throughput: [f64; 2],
    /// Incident click rate per detector before dead-time losses, 1/s.
    pub click_rate: [f64; 2],
    pub rep_rate: f64,
}

impl AnalyticRates {
    pub fn sifted_per_frame(&self) -> f64 {
        self.per_class.iter().map(|c| c.sifted).sum()
    }

    /// Expected acquisition time of a block holding `sifted_bits` key bits.
    pub fn block_time(&self, sifted_bits: f64) -> f64 {
        sifted_bits / self.rkr
    }
}

/// Probability that a source fires and lands in each slot position.
fn landing_probabilities(model: &FrameModel, ch: &SymbolChannel, det: DetectorId) -> Vec<[f64; 3]> {
    ch.sources
        .iter()
        .filter(|s| s.detector == det)
        .map(|s| model.landing(s).map(|l| l * s.probability))
        .collect()
}

/// Returns P(no click in position set) for the given per-source landings.
fn none_in(landings: &[[f64; 3]], positions: &[usize]) -> f64 {
    landings
        .iter()
        .map(|l| 1.0 - positions.iter().map(|&p| l[p]).sum::<f64>())
        .product()
}

struct SymbolOutcome {
    z_any: f64,
    z_error: f64,
    x_any: f64,
    x_side: f64,
    x_central: f64,
}

fn symbol_outcome(model: &FrameModel, ch: &SymbolChannel) -> SymbolOutcome {
    let lz = landing_probabilities(model, ch, DetectorId::Z);
    let lx = landing_probabilities(model, ch, DetectorId::X);
    let neither = none_in(&lz, &[0, 1]);
    let no_early = none_in(&lz, &[0]);
    let no_late = none_in(&lz, &[1]);
    let early_only = no_late - neither;
    let late_only = no_early - neither;
    let both = 1.0 - no_early - no_late + neither;
    let wrong_only = if ch.symbol.bit { early_only } else { late_only };
    SymbolOutcome {
        z_any: 1.0 - neither,
        z_error: wrong_only + 0.5 * both,
        x_any: ch.p_any_on(DetectorId::X),
        x_side: 1.0 - none_in(&lx, &[0, 2]),
        x_central: 1.0 - none_in(&lx, &[1]),
    }
}

/// Expected rates at the nominal lock point (zero residual phase and delay).
pub fn analytic_rates(system: &SystemModel) -> Result<AnalyticRates> {
    analytic_rates_at(system, FrameConditions::default())
}

pub fn analytic_rates_at(system: &SystemModel, conditions: FrameConditions) -> Result<AnalyticRates> {
    let model = FrameModel::new(system, conditions)?;
    let rep = system.params.rep_rate;
    let outcomes: Vec<SymbolOutcome> = model.symbols.iter().map(|ch| symbol_outcome(&model, ch)).collect();

    let click_rate = [
        rep * outcomes.iter().zip(&model.symbol_prob).map(|(o, p)| p * o.z_any).sum::<f64>(),
        rep * outcomes.iter().zip(&model.symbol_prob).map(|(o, p)| p * o.x_any).sum::<f64>(),
    ];
    let dead = [system.detectors.z.dead_time, system.detectors.x.dead_time];
    let throughput = [0, 1].map(|i| 1.0 / (1.0 + click_rate[i] * dead[i]));
    let (fz, fx) = (throughput[0], throughput[1]);

    let mut per_class = [ClassRates::default(); 2];
    let mut gains = [0.0; 2];
    for ((ch, o), &p) in model.symbols.iter().zip(&outcomes).zip(&model.symbol_prob) {
        let c = &mut per_class[ch.symbol.intensity.index()];
        match ch.symbol.basis {
            Basis::Z => {
                c.emitted_z += p;
                c.sifted += p * o.z_any * fz;
                c.z_errors += p * o.z_error * fz;
            }
            Basis::X => {
                c.emitted_x += p;
                c.x_side += p * o.x_side * fx;
                c.x_central += p * o.x_central * fx;
            }
        }
    }
    for k in Intensity::ALL {
        let c = &per_class[k.index()];
        gains[k.index()] = if c.emitted_z > 0.0 { c.sifted / c.emitted_z } else { 0.0 };
    }

    let sifted: f64 = per_class.iter().map(|c| c.sifted).sum();
    let errors: f64 = per_class.iter().map(|c| c.z_errors).sum();
    let x_err: f64 = per_class.iter().map(|c| c.x_central).sum();
    let x_total: f64 = per_class.iter().map(|c| (2.0 * c.x_side).max(c.x_central)).sum();
    Ok(AnalyticRates {
        per_class,
        rkr: rep * sifted,
        qber_z: if sifted > 0.0 { errors / sifted } else { 0.0 },
        qber_x: if x_total > 0.0 { (x_err / x_total).min(0.5) } else { 0.0 },
        gains,
        throughput,
        click_rate,
        rep_rate: rep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{preset, DetectorModel, DetectorPair};
    use crate::photonic::{ChannelModel, ReceiverModel, TransmitterModel};
    use approx::assert_relative_eq;

    fn snspd(att: f64) -> SystemModel {
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
    fn ideal_link_has_no_z_errors() {
        let mut s = snspd(0.0);
        s.tx.extinction_ratio_db = f64::INFINITY;
        s.tx.pulse_fwhm = 0.0;
        s.detectors = DetectorPair { z: DetectorModel::IDEAL, x: DetectorModel::IDEAL };
        let r = analytic_rates(&s).unwrap();
        assert_eq!(r.qber_z, 0.0);
        assert!(r.rkr > 0.0);
    }

    #[test]
    fn darks_only_give_half_error() {
        let mut s = snspd(20.0);
        s.detectors.z.efficiency = 0.0;
        s.detectors.x.efficiency = 0.0;
        let r = analytic_rates(&s).unwrap();
        assert_relative_eq!(r.qber_z, 0.5, max_relative = 1e-9);
        assert_relative_eq!(r.rkr, 2.5e9 * 0.67 * 200.0 / 2.5e9, max_relative = 1e-6);
    }

    #[test]
    fn rkr_scale_at_36_db() {
        let r = analytic_rates(&snspd(36.0)).unwrap();
        // mu-averaged: 0.67 * 2.5e9 * 0.375 * eta_z
        let eta_z = 10f64.powf(-3.6) * 0.94 * 10f64.powf(-0.275) * 0.8;
        let approx = 0.67 * 2.5e9 * 0.375 * eta_z;
        assert!((r.rkr / approx - 1.0).abs() < 0.01, "{} vs {}", r.rkr, approx);
        assert!(r.qber_z < 0.005);
    }

    #[test]
    fn dead_time_reduces_rate() {
        let mut s = snspd(30.0);
        let free = analytic_rates(&s).unwrap();
        s.detectors.z.dead_time = 20e-6;
        let dead = analytic_rates(&s).unwrap();
        let f = 1.0 / (1.0 + free.click_rate[0] * 20e-6);
        assert_relative_eq!(dead.rkr, free.rkr * f, max_relative = 1e-12);
    }

    #[test]
    fn qber_x_approaches_visibility_law_without_darks() {
        let mut s = snspd(10.0);
        s.detectors.z.dark_rate = 0.0;
        s.detectors.x.dark_rate = 0.0;
        s.rx.delay_mismatch = 0.0;
        let r = analytic_rates(&s).unwrap();
        assert_relative_eq!(r.qber_x, 0.0055, max_relative = 1e-3);
    }
}
