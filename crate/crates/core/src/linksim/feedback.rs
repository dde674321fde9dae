//! Slow link drift and the two stabilisation loops: interferometer phase
//! (minimising the monitored output) and arrival-time tracking.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Random-walk state of the link.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftState {
    /// Radians, wrapped to (-pi, pi].
    pub relative_phase: f64,
    /// Seconds.
    pub relative_delay: f64,
}

pub fn wrap_phase(x: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut y = x.rem_euclid(TAU);
    if y > PI {
        y -= TAU;
    }
    if y == -PI {
        y = PI;
    }
    y
}

impl DriftState {
    /// Advances both random walks by `dt` seconds.
    pub fn step<R: Rng + ?Sized>(&mut self, phase_rate: f64, delay_rate: f64, dt: f64, rng: &mut R) {
        if phase_rate > 0.0 {
            let d = Normal::new(0.0, (phase_rate * dt).sqrt()).expect("finite").sample(rng);
            self.relative_phase = wrap_phase(self.relative_phase + d);
        }
        if delay_rate > 0.0 {
            self.relative_delay += Normal::new(0.0, (delay_rate * dt).sqrt()).expect("finite").sample(rng);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackConfig {
    pub phase_enabled: bool,
    pub time_enabled: bool,
    /// Length of one control interval, seconds.
    pub interval: f64,
    /// Dither amplitude of the phase loop, radians.
    pub phase_dither: f64,
    /// Phase step per unit normalised count difference, radians.
    pub phase_gain: f64,
    pub phase_max_step: f64,
    /// Count-difference significance (in standard deviations) required to move.
    pub phase_threshold: f64,
    pub time_gain: f64,
    /// Seconds.
    pub time_max_step: f64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            phase_enabled: true,
            time_enabled: true,
            interval: 1.0,
            phase_dither: 0.05,
            phase_gain: 0.25,
            phase_max_step: 0.1,
            phase_threshold: 1.0,
            time_gain: 0.5,
            time_max_step: 5e-12,
        }
    }
}

/// Dither-and-descend phase controller.
///
/// Control intervals alternate between `+dither` and `-dither` around the
/// current actuator setting. After each pair the actuator moves towards the
/// side that produced fewer monitored clicks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseController {
    pub actuator: f64,
    dither: f64,
    gain: f64,
    max_step: f64,
    threshold: f64,
    /// Count collected at `+dither`, waiting for its partner.
    pending_plus: Option<u64>,
}

impl PhaseController {
    pub fn new(cfg: &FeedbackConfig) -> Self {
        Self {
            actuator: 0.0,
            dither: cfg.phase_dither,
            gain: cfg.phase_gain,
            max_step: cfg.phase_max_step,
            threshold: cfg.phase_threshold,
            pending_plus: None,
        }
    }

    /// Phase currently applied, including the dither offset.
    pub fn applied(&self) -> f64 {
        if self.pending_plus.is_none() {
            self.actuator + self.dither
        } else {
            self.actuator - self.dither
        }
    }

    /// Feeds the monitored-output click count of the interval that just ran
    /// at [`Self::applied`]; returns the actuator correction made.
    pub fn phase_feedback_step(&mut self, window_count: u64) -> f64 {
        let Some(plus) = self.pending_plus.take() else {
            self.pending_plus = Some(window_count);
            return 0.0;
        };
        let minus = window_count;
        let sum = (plus + minus) as f64;
        if sum == 0.0 {
            return 0.0;
        }
        let diff = minus as f64 - plus as f64;
        if diff.abs() <= self.threshold * sum.sqrt() {
            return 0.0;
        }
        let step = (self.gain * diff / sum).clamp(-self.max_step, self.max_step);
        self.actuator = wrap_phase(self.actuator + step);
        step
    }
}

/// Centroid tracker for the Z arrival times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeController {
    /// Slot-grid shift currently applied, seconds.
    pub correction: f64,
    gain: f64,
    max_step: f64,
}

impl TimeController {
    pub fn new(cfg: &FeedbackConfig) -> Self {
        Self { correction: 0.0, gain: cfg.time_gain, max_step: cfg.time_max_step }
    }

    /// Takes arrival offsets relative to the assigned slot centres and moves
    /// the grid towards their centroid. Returns `None` for an empty window.
    pub fn time_feedback_step(&mut self, offsets: &[f64]) -> Option<f64> {
        if offsets.is_empty() {
            return None;
        }
        let mean = offsets.iter().sum::<f64>() / offsets.len() as f64;
        let step = (self.gain * mean).clamp(-self.max_step, self.max_step);
        self.correction += step;
        Some(step)
    }
}
