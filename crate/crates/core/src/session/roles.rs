//! Alice and Bob as explicit message-driven state machines over a
//! [`Transport`]. One call to `run_block` handles one privacy-amplification
//! block: hello, sifting, Cascade per frame, confirmation, amplification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::confirm::{confirm_key_hash, confirm_seed, CONFIRM_BITS};
use super::sift::{alice_key, alice_respond, bob_key, bob_report, classify, Sifted};
use super::tally::{RawTallies, TallySet};
use super::transport::Transport;
use super::wire::{ReportEntry, SiftEntry, WireMessage};
use crate::error::{Error, Result};
use crate::linksim::records::{DetectionRecord, EmissionRecord};
use crate::model::{Intensity, ProtocolParams, SecretKeyResult};
use crate::postprocessing::cascade::{initial_block_size, pass_count, CascadeCorrector, CascadeResponder};
use crate::postprocessing::toeplitz::{seed_len, toeplitz_hash};
use crate::security::{evaluate, Bounds};

/// Entries per detection-report message.
pub const REPORT_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    pub params: ProtocolParams<f64>,
    /// Both sides must agree on this before any key material moves.
    pub config_hash: [u8; 8],
    /// Error rate assumed for the first Cascade frame.
    pub prior_qber: f64,
}

impl SessionConfig {
    pub fn new(params: ProtocolParams<f64>, config_hash: [u8; 8]) -> Self {
        Self { params, config_hash, prior_qber: 0.03 }
    }
}

/// What one side knows after a block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockKey {
    pub block: u64,
    pub frames: u64,
    /// Seconds.
    pub block_time: f64,
    pub sifted_bits: u64,
    /// Sifted bits entering reconciliation.
    pub key_bits: u64,
    pub errors: u64,
    pub qber_z: f64,
    /// Disclosed parities plus the confirmation charge.
    pub lambda: u64,
    pub tallies: TallySet<u64>,
    pub bounds: Bounds<f64>,
    pub secret_len: u64,
    #[serde(skip)]
    pub final_key: Vec<u8>,
    pub cascade_rounds: u64,
}

impl BlockKey {
    pub fn result(&self) -> SecretKeyResult<f64> {
        SecretKeyResult {
            block_time_t: self.block_time,
            raw_key_rate: self.sifted_bits as f64 / self.block_time,
            qber_z: self.qber_z,
            phi_z_upper: self.bounds.phi_z_upper,
            skr: self.secret_len as f64 / self.block_time,
            leakage_lambda: self.lambda as f64,
        }
    }
}

/// Running error-rate estimate shared by both sides.
#[derive(Debug, Clone, Copy)]
struct ErrorEstimate {
    errors: u64,
    bits: u64,
    prior: f64,
}

impl ErrorEstimate {
    fn q(&self) -> f64 {
        if self.bits == 0 {
            self.prior
        } else {
            (self.errors as f64 + 1.0) / (self.bits as f64 + 2.0)
        }
    }

    fn add(&mut self, errors: usize, bits: usize) {
        self.errors += errors as u64;
        self.bits += bits as u64;
    }
}

fn key_frames(len: usize, frame_bits: usize) -> Vec<(usize, usize)> {
    (0..len).step_by(frame_bits.max(1)).map(|s| (s, (s + frame_bits).min(len))).collect()
}

fn recv<T: Transport + ?Sized>(t: &mut T) -> Result<WireMessage> {
    match t.recv()? {
        WireMessage::Abort { reason } => Err(Error::Abort(format!("peer aborted: {reason}"))),
        m => Ok(m),
    }
}

fn unexpected(got: &WireMessage, want: &str) -> Error {
    Error::Protocol(format!("expected {want}, got {}", got.name()))
}

/// Tells the peer why we stop, then returns the error.
fn fail<T: Transport + ?Sized, R>(t: &mut T, e: Error) -> Result<R> {
    if !matches!(e, Error::Closed | Error::Timeout) && !matches!(&e, Error::Abort(r) if r.starts_with("peer aborted")) {
        let _ = t.send(&WireMessage::Abort { reason: e.to_string() });
    }
    Err(e)
}

/// Shared tail: tallies, bounds and secret length.
fn assess(
    cfg: &SessionConfig,
    sifted: &Sifted,
    key_len: usize,
    m_z: [u64; 2],
    lambda: u64,
) -> Result<(TallySet<u64>, Bounds<f64>)> {
    let mut raw = RawTallies { m_z, ..sifted.raw };
    raw.n_z = [0, 0];
    for tag in &sifted.tags[..key_len] {
        raw.n_z[tag.index()] += 1;
    }
    let tallies = raw.tally_set();
    tallies.validate()?;
    let bounds = evaluate(&tallies.to_real::<f64>(), lambda as f64, &cfg.params)?;
    Ok((tallies, bounds))
}

fn bin_errors(positions: &[u32], offset: usize, tags: &[Intensity], m_z: &mut [u64; 2]) {
    for &p in positions {
        m_z[tags[offset + p as usize].index()] += 1;
    }
}

fn check_positions(positions: &[u32], len: usize) -> Result<()> {
    if positions.windows(2).any(|w| w[0] >= w[1]) || positions.last().is_some_and(|&p| p as usize >= len) {
        return Err(Error::Protocol("error positions out of order or out of range".into()));
    }
    Ok(())
}

pub struct Alice {
    cfg: SessionConfig,
    rng: ChaCha8Rng,
    estimate: ErrorEstimate,
}

impl Alice {
    pub fn new(cfg: SessionConfig, seed: u64) -> Self {
        let estimate = ErrorEstimate { errors: 0, bits: 0, prior: cfg.prior_qber };
        Self { cfg, rng: ChaCha8Rng::seed_from_u64(seed), estimate }
    }

    pub fn run_block<T: Transport + ?Sized>(&mut self, t: &mut T, block: u64, emission: &EmissionRecord) -> Result<BlockKey> {
        match self.block_inner(t, block, emission) {
            Ok(k) => Ok(k),
            Err(e) => fail(t, e),
        }
    }

    fn block_inner<T: Transport + ?Sized>(&mut self, t: &mut T, block: u64, emission: &EmissionRecord) -> Result<BlockKey> {
        let p = self.cfg.params;
        t.send(&WireMessage::Hello { block, frames: emission.frames, config_hash: self.cfg.config_hash })?;
        match recv(t)? {
            WireMessage::Hello { block: b, frames, config_hash } => {
                if config_hash != self.cfg.config_hash {
                    return Err(Error::Protocol("peer runs a different configuration".into()));
                }
                if b != block || frames != emission.frames {
                    return Err(Error::Protocol(format!("peer is at block {b} with {frames} frames")));
                }
            }
            m => return Err(unexpected(&m, "Hello")),
        }

        let mut report: Vec<ReportEntry> = Vec::new();
        let mut chunks = Vec::new();
        loop {
            match recv(t)? {
                WireMessage::DetectionReport { last, entries } => {
                    chunks.push(entries.len());
                    report.extend(entries);
                    if last {
                        break;
                    }
                }
                m => return Err(unexpected(&m, "DetectionReport")),
            }
        }
        let responses = alice_respond(emission, &report)?;
        let mut at = 0;
        for (i, &n) in chunks.iter().enumerate() {
            let entries = responses[at..at + n].to_vec();
            at += n;
            t.send(&WireMessage::SiftResponse { last: i + 1 == chunks.len(), entries })?;
        }
        let sifted = classify(&report, &responses)?;
        let mut key = alice_key(emission, &report, &sifted);
        key.truncate(p.pa_block_bits());
        let key_len = key.len();

        let mut disclosed = 0u64;
        let mut m_z = [0u64; 2];
        let mut errors = 0u64;
        for (f, (s, e)) in key_frames(key_len, p.ec_frame_bits).into_iter().enumerate() {
            let k1 = initial_block_size(self.estimate.q(), e - s);
            let seeds: Vec<u64> = (1..pass_count(k1, e - s)).map(|_| self.rng.random()).collect();
            t.send(&WireMessage::ShuffleSeeds { frame: f as u32, seeds: seeds.clone() })?;
            let mut responder = CascadeResponder::new(&key[s..e], &seeds);
            let positions = loop {
                match recv(t)? {
                    WireMessage::ParityRequest { ranges } => {
                        let bits = responder.answer(&ranges)?;
                        t.send(&WireMessage::ParityResponse { bits })?;
                    }
                    WireMessage::FrameDone { frame, error_positions } if frame == f as u32 => break error_positions,
                    m => return Err(unexpected(&m, "ParityRequest or FrameDone")),
                }
            };
            check_positions(&positions, e - s)?;
            bin_errors(&positions, s, &sifted.tags, &mut m_z);
            errors += positions.len() as u64;
            disclosed += responder.disclosed;
            self.estimate.add(positions.len(), e - s);
        }

        let seed = confirm_seed(&mut self.rng);
        t.send(&WireMessage::ConfirmChallenge { seed, hash: confirm_key_hash(&key, seed) })?;
        match recv(t)? {
            WireMessage::ConfirmResult { ok: true } => {}
            WireMessage::ConfirmResult { ok: false } => return Err(Error::Abort("key confirmation failed".into())),
            m => return Err(unexpected(&m, "ConfirmResult")),
        }

        let lambda = disclosed + CONFIRM_BITS;
        let (tallies, bounds) = assess(&self.cfg, &sifted, key_len, m_z, lambda)?;
        let secret_len = (bounds.secret_len as u64).min(key_len as u64);
        let pa_seed: Vec<bool> = (0..seed_len(key_len, secret_len as usize)).map(|_| self.rng.random()).collect();
        t.send(&WireMessage::PaSeed { input_len: key_len as u64, output_len: secret_len, seed: pa_seed.clone() })?;
        let pa_seed: Vec<u8> = pa_seed.into_iter().map(u8::from).collect();
        let final_key = toeplitz_hash(&pa_seed, &key, secret_len as usize)?;

        Ok(BlockKey {
            block,
            frames: emission.frames,
            block_time: emission.frames as f64 / p.rep_rate,
            sifted_bits: sifted.key_entries.len() as u64,
            key_bits: key_len as u64,
            errors,
            qber_z: if key_len == 0 { 0.0 } else { errors as f64 / key_len as f64 },
            lambda,
            tallies,
            bounds,
            secret_len,
            final_key,
            cascade_rounds: 0,
        })
    }
}

pub struct Bob {
    cfg: SessionConfig,
    rng: ChaCha8Rng,
    estimate: ErrorEstimate,
}

impl Bob {
    pub fn new(cfg: SessionConfig, seed: u64) -> Self {
        let estimate = ErrorEstimate { errors: 0, bits: 0, prior: cfg.prior_qber };
        Self { cfg, rng: ChaCha8Rng::seed_from_u64(seed), estimate }
    }

    pub fn run_block<T: Transport + ?Sized>(
        &mut self,
        t: &mut T,
        block: u64,
        frames: u64,
        detection: &DetectionRecord,
    ) -> Result<BlockKey> {
        match self.block_inner(t, block, frames, detection) {
            Ok(k) => Ok(k),
            Err(e) => fail(t, e),
        }
    }

    fn block_inner<T: Transport + ?Sized>(
        &mut self,
        t: &mut T,
        block: u64,
        frames: u64,
        detection: &DetectionRecord,
    ) -> Result<BlockKey> {
        let p = self.cfg.params;
        match recv(t)? {
            WireMessage::Hello { config_hash, .. } if config_hash != self.cfg.config_hash => {
                t.send(&WireMessage::Hello { block, frames, config_hash: self.cfg.config_hash })?;
                return Err(Error::Protocol("peer runs a different configuration".into()));
            }
            WireMessage::Hello { block: b, frames: f, .. } => {
                t.send(&WireMessage::Hello { block, frames, config_hash: self.cfg.config_hash })?;
                if b != block || f != frames {
                    return Err(Error::Protocol(format!("peer is at block {b} with {f} frames")));
                }
            }
            m => return Err(unexpected(&m, "Hello")),
        }

        let (report, view) = bob_report(detection, &mut self.rng);
        let chunks: Vec<&[ReportEntry]> = if report.is_empty() { vec![&[]] } else { report.chunks(REPORT_CHUNK).collect() };
        for (i, c) in chunks.iter().enumerate() {
            t.send(&WireMessage::DetectionReport { last: i + 1 == chunks.len(), entries: c.to_vec() })?;
        }
        let mut responses: Vec<SiftEntry> = Vec::with_capacity(report.len());
        loop {
            match recv(t)? {
                WireMessage::SiftResponse { last, entries } => {
                    responses.extend(entries);
                    if last {
                        break;
                    }
                }
                m => return Err(unexpected(&m, "SiftResponse")),
            }
        }
        let sifted = classify(&report, &responses)?;
        let mut key = bob_key(&report, &view, &sifted);
        key.truncate(p.pa_block_bits());
        let key_len = key.len();

        let mut disclosed = 0u64;
        let mut rounds = 0u64;
        let mut m_z = [0u64; 2];
        let mut errors = 0u64;
        for (f, (s, e)) in key_frames(key_len, p.ec_frame_bits).into_iter().enumerate() {
            let k1 = initial_block_size(self.estimate.q(), e - s);
            let seeds = match recv(t)? {
                WireMessage::ShuffleSeeds { frame, seeds } if frame == f as u32 && seeds.len() + 1 == pass_count(k1, e - s) => seeds,
                m => return Err(unexpected(&m, &format!("ShuffleSeeds for frame {f}"))),
            };
            let mut cascade = CascadeCorrector::new(&key[s..e], &seeds, k1);
            while let Some(ranges) = cascade.next_request() {
                t.send(&WireMessage::ParityRequest { ranges })?;
                match recv(t)? {
                    WireMessage::ParityResponse { bits } => cascade.absorb(&bits)?,
                    m => return Err(unexpected(&m, "ParityResponse")),
                }
            }
            let positions = cascade.error_positions();
            key[s..e].copy_from_slice(cascade.corrected());
            bin_errors(&positions, s, &sifted.tags, &mut m_z);
            errors += positions.len() as u64;
            disclosed += cascade.disclosed;
            rounds += cascade.rounds;
            self.estimate.add(positions.len(), e - s);
            t.send(&WireMessage::FrameDone { frame: f as u32, error_positions: positions })?;
        }

        match recv(t)? {
            WireMessage::ConfirmChallenge { seed, hash } => {
                let ok = confirm_key_hash(&key, seed) == hash;
                t.send(&WireMessage::ConfirmResult { ok })?;
                if !ok {
                    return Err(Error::Abort("key confirmation failed".into()));
                }
            }
            m => return Err(unexpected(&m, "ConfirmChallenge")),
        }

        let lambda = disclosed + CONFIRM_BITS;
        let (tallies, bounds) = assess(&self.cfg, &sifted, key_len, m_z, lambda)?;
        let secret_len = (bounds.secret_len as u64).min(key_len as u64);
        let final_key = match recv(t)? {
            WireMessage::PaSeed { input_len, output_len, seed } => {
                if input_len != key_len as u64 || output_len != secret_len {
                    return Err(Error::Protocol(format!(
                        "amplification to {output_len} of {input_len} bits, expected {secret_len} of {key_len}"
                    )));
                }
                let seed: Vec<u8> = seed.into_iter().map(u8::from).collect();
                toeplitz_hash(&seed, &key, secret_len as usize)?
            }
            m => return Err(unexpected(&m, "PaSeed")),
        };

        Ok(BlockKey {
            block,
            frames,
            block_time: frames as f64 / p.rep_rate,
            sifted_bits: sifted.key_entries.len() as u64,
            key_bits: key_len as u64,
            errors,
            qber_z: if key_len == 0 { 0.0 } else { errors as f64 / key_len as f64 },
            lambda,
            tallies,
            bounds,
            secret_len,
            final_key,
            cascade_rounds: rounds,
        })
    }
}
