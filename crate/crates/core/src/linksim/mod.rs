//! Block-level link simulation.
//!
//! Frames without any click are skipped geometrically; for a detected frame
//! the prepared symbol and the firing sources are drawn conditioned on at
//! least one click. Dead time and afterpulsing are then applied in time
//! order. Time is cut into control intervals: drift and feedback act at
//! interval boundaries, and every interval draws from its own PRNG
//! substreams so results do not depend on how intervals are scheduled.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Geometric, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{ClickOrigin, DetectorState};
use crate::error::{domain, Result};
use crate::model::{Basis, StateSymbol};
use crate::photonic::frame::{sample_weighted, SOURCES};
use crate::photonic::{DetectorId, FrameConditions, FrameModel, Slot, SystemModel};

pub mod feedback;
pub mod records;

pub use feedback::{DriftState, FeedbackConfig, PhaseController, TimeController};
pub use records::{Audit, AuditTally, DetectionEvent, DetectionRecord, EmissionRecord, PhotonSplit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub feedback: FeedbackConfig,
    /// Generate intervals on the rayon pool when nothing couples them.
    pub parallel: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { feedback: FeedbackConfig::default(), parallel: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockTarget {
    /// Stop at the frame that completes this many sifted Z events.
    SiftedBits(u64),
    Frames(u64),
    /// Seconds of link time.
    Duration(f64),
}

/// State of the link during one control interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalTrace {
    /// Seconds since the block start.
    pub start: f64,
    pub phase_residual: f64,
    pub delay_residual: f64,
    /// Central-slot clicks on `|+>` frames.
    pub monitored_clicks: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub emission: EmissionRecord,
    pub detection: DetectionRecord,
    pub audit: Audit,
    /// Block acquisition time, seconds.
    pub duration: f64,
    pub sifted: u64,
    pub trace: Vec<IntervalTrace>,
}

#[derive(Debug, Clone, Copy)]
struct RawClick {
    detector: DetectorId,
    pos: u8,
    /// Seconds after the nominal frame start.
    t_in: f64,
    origin: ClickOrigin,
}

#[derive(Debug, Clone)]
struct RawFrame {
    frame: u64,
    symbol: u8,
    photons: u32,
    clicks: Vec<RawClick>,
}

struct RawInterval {
    index: u64,
    first_frame: u64,
    frames: u64,
    model: FrameModel,
    detected: Vec<RawFrame>,
}

/// Photon number of a mode known to have produced at least one photon.
fn truncated_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u32 {
    if mean <= 0.0 {
        return 1;
    }
    let norm = -(-mean).exp_m1();
    let mut u = rng.random::<f64>() * norm;
    let mut k = 1u32;
    let mut pk = (-mean).exp() * mean;
    loop {
        if u < pk || k > 200 {
            return k;
        }
        u -= pk;
        k += 1;
        pk *= mean / f64::from(k);
    }
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u32
}

/// Draws the clicks of one detected frame.
fn resolve_frame<R: Rng + ?Sized>(model: &FrameModel, frame: u64, symbol: usize, rng: &mut R) -> RawFrame {
    let fired = model.sample_fired(symbol, rng);
    let ch = &model.symbols[symbol];
    let sep = model.bin_separation;
    let mut photons = 0u32;
    let mut clicks: Vec<RawClick> = Vec::with_capacity(2);
    for (i, src) in ch.sources.iter().enumerate().take(SOURCES) {
        if !fired[i] {
            continue;
        }
        let det = src.detector;
        let (pos, t_in, origin) = if src.dark {
            let pos = model.sample_dark_position(det, rng);
            (pos, pos as f64 * sep, ClickOrigin::Dark)
        } else {
            photons += truncated_poisson(src.mean, rng);
            let nominal = src.slot.position();
            let off = model.sample_offset(det, rng);
            (model.position_for_offset(det, nominal, off), nominal as f64 * sep + off, ClickOrigin::Signal)
        };
        match clicks.iter_mut().find(|c| c.detector == det && c.pos as usize == pos) {
            Some(c) if t_in < c.t_in => {
                c.t_in = t_in;
                c.origin = origin;
            }
            Some(_) => {}
            None => clicks.push(RawClick { detector: det, pos: pos as u8, t_in, origin }),
        }
    }
    photons += poisson(ch.mu - ch.detected_mean(), rng);
    clicks.sort_by(|a, b| a.t_in.total_cmp(&b.t_in));
    RawFrame { frame, symbol: symbol as u8, photons, clicks }
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

mod purpose {
    pub const FRAMES: u64 = 0;
    pub const TOTALS: u64 = 1;
    pub const SEQUENTIAL: u64 = 2;
    pub const DRIFT: u64 = 3;
}

fn stream_id(interval: u64, purpose: u64) -> u64 {
    interval * 4 + purpose
}

/// Geometric-skip sampler over `frames` frames starting at `first_frame`.
fn sample_detected_frames<R: Rng + ?Sized>(model: &FrameModel, first_frame: u64, frames: u64, rng: &mut R) -> Vec<RawFrame> {
    let mut out = Vec::new();
    if model.p_detect <= 0.0 {
        return out;
    }
    let weights = model.detected_weights();
    let end = first_frame + frames;
    let mut cur = first_frame;
    let geo = (model.p_detect < 1.0).then(|| Geometric::new(model.p_detect).expect("valid probability"));
    loop {
        let gap = geo.as_ref().map_or(0, |g| g.sample(rng));
        let Some(f) = cur.checked_add(gap).filter(|&f| f < end) else { break };
        let sym = sample_weighted(&weights, rng);
        out.push(resolve_frame(model, f, sym, rng));
        cur = f + 1;
    }
    out
}

/// Detected frames of `frames` consecutive frames, returned as
/// `(frame, symbol index, per-detector slot bitmask)`; exposed so the
/// sampler can be checked against a per-frame simulation.
pub fn sample_raw_detections(model: &FrameModel, frames: u64, seed: u64) -> Vec<(u64, usize, [u8; 2])> {
    let mut rng = substream(seed, 0);
    sample_detected_frames(model, 0, frames, &mut rng)
        .into_iter()
        .map(|f| {
            let mut mask = [0u8; 2];
            for c in &f.clicks {
                mask[c.detector.index()] |= 1 << c.pos;
            }
            (f.frame, f.symbol as usize, mask)
        })
        .collect()
}

fn generate_interval(model: FrameModel, seed: u64, index: u64, first_frame: u64, frames: u64) -> RawInterval {
    let mut rng = substream(seed, stream_id(index, purpose::FRAMES));
    let detected = sample_detected_frames(&model, first_frame, frames, &mut rng);
    RawInterval { index, first_frame, frames, model, detected }
}

/// Multinomial draw of `n` frames over unnormalised weights.
fn multinomial<R: Rng + ?Sized>(n: u64, weights: &[f64; 6], rng: &mut R) -> [u64; 6] {
    let mut out = [0u64; 6];
    let mut left = n;
    let mut rest: f64 = weights.iter().sum();
    for i in 0..6 {
        if left == 0 || rest <= 0.0 {
            break;
        }
        let p = (weights[i] / rest).clamp(0.0, 1.0);
        let k = if i == 5 || p >= 1.0 { left } else { Binomial::new(left, p).expect("valid").sample(rng) };
        out[i] = k;
        left -= k;
        rest -= weights[i];
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct FrameState {
    symbol: StateSymbol,
    photons: u32,
    masks: [u8; 2],
}

/// Accumulates one block.
struct BlockBuilder {
    start_frame: u64,
    frames: BTreeMap<u64, FrameState>,
    events: Vec<DetectionEvent>,
    sifted: u64,
    class_totals: [u64; 6],
    trace: Vec<IntervalTrace>,
}

/// Simulated link whose drift, feedback and detector states persist from
/// one block to the next.
pub struct LinkSimulator {
    system: SystemModel,
    cfg: SimConfig,
    seed: u64,
    drift: DriftState,
    phase: PhaseController,
    time: TimeController,
    detectors: [DetectorState; 2],
    next_frame: u64,
    next_interval: u64,
    frame_period: f64,
    frames_per_interval: u64,
}

impl LinkSimulator {
    pub fn new(system: SystemModel, cfg: SimConfig, seed: u64) -> Result<Self> {
        system.validate()?;
        if !(cfg.feedback.interval > 0.0) {
            return domain("control interval must be positive");
        }
        let frame_period = 1.0 / system.params.rep_rate;
        let frames_per_interval = ((cfg.feedback.interval / frame_period).round() as u64).max(1);
        Ok(Self {
            system,
            cfg,
            seed,
            drift: DriftState::default(),
            phase: PhaseController::new(&cfg.feedback),
            time: TimeController::new(&cfg.feedback),
            detectors: [DetectorState::new(), DetectorState::new()],
            next_frame: 0,
            next_interval: 0,
            frame_period,
            frames_per_interval,
        })
    }

    pub fn system(&self) -> &SystemModel {
        &self.system
    }

    pub fn drift(&self) -> DriftState {
        self.drift
    }

    fn coupled(&self) -> bool {
        let fb = &self.cfg.feedback;
        fb.phase_enabled
            || fb.time_enabled
            || self.system.channel.phase_drift_rate > 0.0
            || self.system.channel.delay_drift_rate > 0.0
    }

    fn conditions(&self) -> FrameConditions {
        let fb = &self.cfg.feedback;
        let phase = if fb.phase_enabled { self.drift.relative_phase - self.phase.applied() } else { self.drift.relative_phase };
        let delay = if fb.time_enabled { self.drift.relative_delay - self.time.correction } else { self.drift.relative_delay };
        FrameConditions { phase: feedback::wrap_phase(phase), delay_offset: delay }
    }

    /// Runs one block until `target` is met.
    pub fn next_block(&mut self, target: BlockTarget) -> Result<BlockOutput> {
        let frame_limit = match target {
            BlockTarget::SiftedBits(0) | BlockTarget::Frames(0) => return domain("block target must be positive"),
            BlockTarget::SiftedBits(_) => u64::MAX,
            BlockTarget::Frames(n) => n,
            BlockTarget::Duration(t) if t > 0.0 && t.is_finite() => (t / self.frame_period).ceil() as u64,
            BlockTarget::Duration(t) => return domain(format!("block duration must be positive, got {t}")),
        };
        let sift_target = match target {
            BlockTarget::SiftedBits(n) => n,
            _ => u64::MAX,
        };
        let mut b = BlockBuilder {
            start_frame: self.next_frame,
            frames: BTreeMap::new(),
            events: Vec::new(),
            sifted: 0,
            class_totals: [0; 6],
            trace: Vec::new(),
        };
        let start_time = self.next_frame as f64 * self.frame_period;
        for d in &mut self.detectors {
            d.discard_afterpulses_before(start_time);
        }
        let end_frame = self.next_frame.saturating_add(frame_limit);
        let parallel = self.cfg.parallel && !self.coupled();
        let batch = if parallel { rayon::current_num_threads().max(1) as u64 } else { 1 };
        let mut idle_intervals = 0u64;

        'outer: loop {
            let conditions = self.conditions();
            let model = FrameModel::new(&self.system, conditions)?;
            if model.p_detect <= 0.0 && sift_target != u64::MAX && self.pending_afterpulses() == 0 {
                return domain("sifted-bit target can never be reached: no clicks possible");
            }
            let mut plan = Vec::new();
            let mut f = self.next_frame;
            for k in 0..batch {
                if f >= end_frame {
                    break;
                }
                let n = self.frames_per_interval.min(end_frame - f);
                plan.push((self.next_interval + k, f, n));
                f += n;
            }
            if plan.is_empty() {
                break;
            }
            let seed = self.seed;
            let raws: Vec<RawInterval> = if parallel {
                plan.par_iter().map(|&(i, f0, n)| generate_interval(model.clone(), seed, i, f0, n)).collect()
            } else {
                plan.iter().map(|&(i, f0, n)| generate_interval(model.clone(), seed, i, f0, n)).collect()
            };
            for raw in raws {
                let before = b.sifted;
                let stopped = self.process_interval(raw, &mut b, sift_target)?;
                if stopped {
                    break 'outer;
                }
                if b.sifted == before {
                    idle_intervals += 1;
                    if sift_target != u64::MAX && idle_intervals > 1_000_000 {
                        return domain("sifted-bit target not reached after 10^6 idle intervals");
                    }
                } else {
                    idle_intervals = 0;
                }
                if self.next_frame >= end_frame {
                    break 'outer;
                }
            }
        }
        Ok(self.finish(b))
    }

    fn pending_afterpulses(&self) -> usize {
        self.detectors.iter().map(|d| d.pending_afterpulses().count()).sum()
    }

    /// Window `[frame*T - sep/2, frame*T + T - sep/2)` containing time `t`.
    fn locate(&self, t: f64, det: DetectorId, sep: f64) -> (u64, usize, f64) {
        let x = (t + 0.5 * sep) / self.frame_period;
        let frame = x.floor().max(0.0) as u64;
        let t_in = t - frame as f64 * self.frame_period;
        let pos = ((t_in / sep).round().max(0.0) as usize).min(det.slot_count() - 1);
        (frame, pos, t_in)
    }

    /// Applies dead time and afterpulsing to one interval's raw clicks.
    /// Returns true when the sifted target was reached.
    fn process_interval(&mut self, raw: RawInterval, b: &mut BlockBuilder, sift_target: u64) -> Result<bool> {
        let mut rng = substream(self.seed, stream_id(raw.index, purpose::SEQUENTIAL));
        let model = &raw.model;
        let sep = model.bin_separation;
        let period = self.frame_period;
        let interval_end_frame = raw.first_frame + raw.frames;
        let interval_end_time = interval_end_frame as f64 * period - 0.5 * sep;

        let mut order: Vec<(f64, usize, usize)> = Vec::new();
        for (fi, fr) in raw.detected.iter().enumerate() {
            for (ci, c) in fr.clicks.iter().enumerate() {
                order.push((fr.frame as f64 * period + c.t_in, fi, ci));
            }
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0));

        let undetected_w = model.undetected_weights();
        let mut touched_undetected = [0u64; 6];
        let mut stop_frame: Option<u64> = None;
        let mut monitored = 0u64;
        let mut z_offsets = Vec::new();
        let mut k = 0;
        loop {
            let next_raw = order.get(k).map(|o| o.0);
            let next_ap = DetectorId::ALL
                .iter()
                .filter_map(|&d| self.detectors[d.index()].next_afterpulse().map(|t| (t, d)))
                .filter(|&(t, _)| t < interval_end_time)
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let take_ap = match (next_raw, next_ap) {
                (None, None) => break,
                (Some(r), Some((a, _))) => a < r,
                (None, Some(_)) => true,
                (Some(_), None) => false,
            };
            let time = if take_ap { next_ap.expect("afterpulse").0 } else { next_raw.expect("raw") };
            if let Some(sf) = stop_frame {
                if time > (sf + 2) as f64 * period {
                    break;
                }
            }
            // (frame, det, pos, t_in, origin, symbol source)
            let (frame, det, pos, t_in, origin, raw_idx) = if take_ap {
                let (t, d) = next_ap.expect("afterpulse");
                self.detectors[d.index()].pop_afterpulse();
                let (frame, pos, t_in) = self.locate(t, d, sep);
                let frame = frame.max(raw.first_frame);
                (frame, d, pos, t_in, ClickOrigin::Afterpulse, None)
            } else {
                let (_, fi, ci) = order[k];
                k += 1;
                let fr = &raw.detected[fi];
                let c = fr.clicks[ci];
                (fr.frame, c.detector, c.pos as usize, c.t_in, c.origin, Some(fi))
            };
            if stop_frame.is_some_and(|sf| frame > sf) {
                continue;
            }
            let abs_time = frame as f64 * period + t_in;
            let dmodel = if det == DetectorId::Z { &self.system.detectors.z } else { &self.system.detectors.x };
            if !self.detectors[det.index()].offer(abs_time, dmodel, &mut rng) {
                continue;
            }
            let state = match b.frames.get(&frame) {
                Some(s) => *s,
                None => {
                    let (symbol, photons) = match raw_idx {
                        Some(fi) => (StateSymbol::ALL[raw.detected[fi].symbol as usize], raw.detected[fi].photons),
                        None => match raw.detected.binary_search_by_key(&frame, |f| f.frame) {
                            Ok(fi) => (StateSymbol::ALL[raw.detected[fi].symbol as usize], raw.detected[fi].photons),
                            Err(_) => {
                                let s = sample_weighted(&undetected_w, &mut rng);
                                touched_undetected[s] += 1;
                                let ch = &model.symbols[s];
                                (StateSymbol::ALL[s], poisson(ch.mu - ch.detected_mean(), &mut rng))
                            }
                        },
                    };
                    FrameState { symbol, photons, masks: [0; 2] }
                }
            };
            let mut state = state;
            let slot = Slot::from_position(det, pos).expect("valid position");
            let first_z = det == DetectorId::Z && state.masks[0] == 0;
            state.masks[det.index()] |= 1 << pos;
            b.frames.insert(frame, state);
            b.events.push(DetectionEvent {
                frame: frame - b.start_frame,
                detector: det,
                slot,
                time: (frame - b.start_frame) as f64 * period + t_in,
                origin,
            });
            match det {
                DetectorId::Z => z_offsets.push(t_in - pos as f64 * sep),
                DetectorId::X => {
                    if pos == 1 && state.symbol.basis == Basis::X {
                        monitored += 1;
                    }
                }
            }
            if first_z && state.symbol.basis == Basis::Z && stop_frame.is_none() {
                b.sifted += 1;
                if b.sifted >= sift_target {
                    stop_frame = Some(frame);
                }
            }
        }

        let last_frame = stop_frame.map_or(interval_end_frame, |f| f + 1);
        // Emitted totals for frames [first_frame, last_frame).
        let mut detected_in_range = [0u64; 6];
        let mut n_detected = 0u64;
        for fr in raw.detected.iter().take_while(|f| f.frame < last_frame) {
            detected_in_range[fr.symbol as usize] += 1;
            n_detected += 1;
        }
        let touched: u64 = touched_undetected.iter().sum();
        let undetected = (last_frame - raw.first_frame).saturating_sub(n_detected + touched);
        let mut trng = substream(self.seed, stream_id(raw.index, purpose::TOTALS));
        let rest = multinomial(undetected, &undetected_w, &mut trng);
        for i in 0..6 {
            b.class_totals[i] += detected_in_range[i] + touched_undetected[i] + rest[i];
        }

        let start_rel = (raw.first_frame - b.start_frame) as f64 * period;
        b.trace.push(IntervalTrace {
            start: start_rel,
            phase_residual: model.conditions.phase,
            delay_residual: model.conditions.delay_offset,
            monitored_clicks: monitored,
        });
        self.next_frame = last_frame;
        self.next_interval = raw.index + 1;
        if stop_frame.is_some() {
            return Ok(true);
        }

        // Interval complete: feedback and drift.
        let fb = self.cfg.feedback;
        if fb.phase_enabled {
            self.phase.phase_feedback_step(monitored);
        }
        if fb.time_enabled {
            self.time.time_feedback_step(&z_offsets);
        }
        let mut drng = substream(self.seed, stream_id(raw.index, purpose::DRIFT));
        let dt = raw.frames as f64 * period;
        let ch = self.system.channel;
        self.drift.step(ch.phase_drift_rate, ch.delay_drift_rate, dt, &mut drng);
        Ok(false)
    }

    fn finish(&mut self, b: BlockBuilder) -> BlockOutput {
        let frames = self.next_frame - b.start_frame;
        let mut entries = Vec::with_capacity(b.frames.len());
        let mut photons = Vec::with_capacity(b.frames.len());
        let mut tally = AuditTally::default();
        for (&frame, st) in &b.frames {
            entries.push((frame - b.start_frame, st.symbol));
            photons.push(st.photons);
            let k = st.symbol.intensity.index();
            let z = st.masks[0];
            let x = st.masks[1];
            match st.symbol.basis {
                Basis::Z if z != 0 => {
                    tally.sifted.add(k, st.photons);
                    let right = if st.symbol.bit { 0b10 } else { 0b01 };
                    if z != right && z != 0b11 {
                        tally.sifted_errors.add(k, st.photons);
                    }
                }
                Basis::X => {
                    if x & 0b101 != 0 {
                        tally.x_side.add(k, st.photons);
                    }
                    if x & 0b010 != 0 {
                        tally.x_central.add(k, st.photons);
                    }
                }
                _ => {}
            }
        }
        for e in &b.events {
            let k = entries
                .binary_search_by_key(&e.frame, |x| x.0)
                .map(|i| entries[i].1.intensity.index())
                .expect("event frame has a symbol");
            tally.clicks[e.detector.index()][k] += 1;
        }
        BlockOutput {
            emission: EmissionRecord { frames, entries, class_totals: b.class_totals },
            detection: DetectionRecord { events: b.events },
            audit: Audit { photons, tally },
            duration: frames as f64 * self.frame_period,
            sifted: b.sifted,
            trace: b.trace,
        }
    }
}

/// One block from a fresh link.
pub fn run_block(system: &SystemModel, cfg: &SimConfig, target: BlockTarget, seed: u64) -> Result<BlockOutput> {
    LinkSimulator::new(*system, *cfg, seed)?.next_block(target)
}
