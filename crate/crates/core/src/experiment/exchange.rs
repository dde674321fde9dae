//! Full key exchanges: simulated link, both protocol roles, reporting rows.

use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, TransportKind};
use super::optimize::{optimize, predict, Prediction};
use crate::error::{Error, Result};
use crate::linksim::records::{write_dump, DetectionRecord};
use crate::linksim::{BlockOutput, BlockTarget, LinkSimulator};
use crate::photonic::SystemModel;
use crate::session::transport::{transcript_hash, Direction, RecordingTransport};
use crate::session::{Alice, BlockKey, Bob, MemoryTransport, TcpTransport, Transport};

/// One privacy-amplification block as reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRow {
    pub block: u64,
    /// Acquisition time, seconds.
    pub t: f64,
    pub rkr_kbps: f64,
    pub qber_z: f64,
    pub phi_z: f64,
    pub lambda: u64,
    pub skr_kbps: f64,
    pub secret_bits: u64,
    pub sifted_bits: u64,
    /// Sifted bits that entered reconciliation.
    pub key_bits: u64,
    pub errors: u64,
    pub s0_lower: f64,
    pub s1_lower: f64,
    /// RMS residual interferometer phase over the block, radians.
    pub phase_residual_rms: f64,
    /// SHA-256 of the final key, hex.
    pub key_digest: String,
}

impl BlockRow {
    pub fn new(k: &BlockKey, trace_rms: f64) -> Self {
        let r = k.result();
        Self {
            block: k.block,
            t: k.block_time,
            rkr_kbps: r.raw_key_rate / 1e3,
            qber_z: k.qber_z,
            phi_z: k.bounds.phi_z_upper,
            lambda: k.lambda,
            skr_kbps: r.skr / 1e3,
            secret_bits: k.secret_len,
            sifted_bits: k.sifted_bits,
            key_bits: k.key_bits,
            errors: k.errors,
            s0_lower: k.bounds.s0_lower,
            s1_lower: k.bounds.s1_lower,
            phase_residual_rms: trace_rms,
            key_digest: key_digest(&k.final_key),
        }
    }
}

pub fn key_digest(bits: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update((bits.len() as u64).to_le_bytes());
    h.update(bits);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub blocks: u64,
    pub t_total: f64,
    pub secret_bits: u64,
    pub sifted_bits: u64,
    /// Total secret bits over total time.
    pub skr_kbps: f64,
    pub rkr_kbps: f64,
    /// Error-weighted over all key bits.
    pub qber_z: f64,
    pub phi_z_mean: f64,
    pub lambda_mean: f64,
}

impl Aggregate {
    pub fn of(rows: &[BlockRow]) -> Self {
        if rows.is_empty() {
            return Self::default();
        }
        let n = rows.len() as f64;
        let t: f64 = rows.iter().map(|r| r.t).sum();
        let secret: u64 = rows.iter().map(|r| r.secret_bits).sum();
        let sifted: u64 = rows.iter().map(|r| r.sifted_bits).sum();
        let errors: u64 = rows.iter().map(|r| r.errors).sum();
        let key_bits: u64 = rows.iter().map(|r| r.key_bits).sum();
        Self {
            blocks: rows.len() as u64,
            t_total: t,
            secret_bits: secret,
            sifted_bits: sifted,
            skr_kbps: secret as f64 / t / 1e3,
            rkr_kbps: sifted as f64 / t / 1e3,
            qber_z: if key_bits > 0 { errors as f64 / key_bits as f64 } else { 0.0 },
            phi_z_mean: rows.iter().map(|r| r.phi_z).sum::<f64>() / n,
            lambda_mean: rows.iter().map(|r| r.lambda as f64).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub software_version: String,
    pub scenario: String,
    pub attenuation_db: f64,
    /// Resolved configuration, including optimizer-chosen parameters.
    pub config: ExperimentConfig,
    pub prediction: Prediction,
    pub rows: Vec<BlockRow>,
    pub aggregate: Aggregate,
    /// SHA-256 over Alice's and Bob's transcripts, hex.
    pub transcript_alice: String,
    pub transcript_bob: String,
}

/// Applies the optimizer when the configuration asks for it.
pub fn resolve(cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    if !cfg.optimize.is_empty() {
        let r = optimize(&cfg.system()?, &cfg.optimize)?;
        let p = r.system.params;
        out.params.mu1 = p.mu1;
        out.params.mu2 = p.mu2;
        out.params.p_mu1 = p.p_mu1;
        out.params.p_z_alice = p.p_z_alice;
        out.optimize.clear();
        log::info!(
            "optimizer: mu1={:.4} mu2={:.4} p_mu1={:.4} p_z={:.4} predicted SKR {:.3} kbps",
            p.mu1,
            p.mu2,
            p.p_mu1,
            p.p_z_alice,
            r.prediction.skr / 1e3
        );
    }
    out.validate()?;
    Ok(out)
}

fn target(system: &SystemModel) -> BlockTarget {
    BlockTarget::SiftedBits(system.params.pa_block_bits() as u64)
}

fn rms_phase(out: &BlockOutput) -> f64 {
    if out.trace.is_empty() {
        return 0.0;
    }
    (out.trace.iter().map(|t| t.phase_residual.powi(2)).sum::<f64>() / out.trace.len() as f64).sqrt()
}

fn with_block<E: std::fmt::Display>(block: u64) -> impl Fn(E) -> Error {
    move |e| Error::Abort(format!("block {block}: {e}"))
}

fn tag_block(block: u64, e: Error) -> Error {
    match e {
        Error::Abort(m) => Error::Abort(format!("block {block}: {m}")),
        Error::Protocol(m) => Error::Protocol(format!("block {block}: {m}")),
        other => other,
    }
}

/// Alice's loop. `next` supplies the block output for block `i`.
pub fn alice_loop<T: Transport>(
    cfg: &ExperimentConfig,
    t: &mut RecordingTransport<T>,
    mut next: impl FnMut(u64) -> Result<BlockOutput>,
) -> Result<Vec<BlockRow>> {
    let mut alice = Alice::new(cfg.session_config(), cfg.derived_seed("alice"));
    let mut rows = Vec::new();
    for i in 0..cfg.blocks {
        let out = next(i)?;
        let k = alice.run_block(t, i, &out.emission).map_err(|e| tag_block(i, e))?;
        let row = BlockRow::new(&k, rms_phase(&out));
        log::info!(
            "block {i}: t={:.2}s QBER_z={:.3}% phi_z={:.3}% SKR={:.3} kbps",
            row.t,
            100.0 * row.qber_z,
            100.0 * row.phi_z,
            row.skr_kbps
        );
        rows.push(row);
    }
    Ok(rows)
}

pub fn bob_loop<T: Transport>(
    cfg: &ExperimentConfig,
    t: &mut RecordingTransport<T>,
    mut next: impl FnMut(u64) -> Result<(u64, DetectionRecord)>,
) -> Result<Vec<BlockKey>> {
    let mut bob = Bob::new(cfg.session_config(), cfg.derived_seed("bob"));
    let mut keys = Vec::new();
    for i in 0..cfg.blocks {
        let (frames, det) = next(i)?;
        keys.push(bob.run_block(t, i, frames, &det).map_err(|e| tag_block(i, e))?);
    }
    Ok(keys)
}

fn simulator(cfg: &ExperimentConfig) -> Result<LinkSimulator> {
    LinkSimulator::new(cfg.system()?, cfg.sim_config(), cfg.derived_seed("link"))
}

fn report(cfg: &ExperimentConfig, rows: Vec<BlockRow>, ta: &[(Direction, Vec<u8>)], tb: &[(Direction, Vec<u8>)]) -> Result<RunReport> {
    let system = cfg.system()?;
    Ok(RunReport {
        software_version: env!("CARGO_PKG_VERSION").into(),
        scenario: cfg.scenario.clone(),
        attenuation_db: system.channel.attenuation_db,
        config: cfg.clone(),
        prediction: predict(&system)?,
        aggregate: Aggregate::of(&rows),
        rows,
        transcript_alice: hex::encode(transcript_hash(ta)),
        transcript_bob: hex::encode(transcript_hash(tb)),
    })
}

/// Single-process exchange over an in-memory channel. The simulator runs
/// on Alice's thread and hands Bob his half of every block.
pub fn run_exchange(cfg: &ExperimentConfig) -> Result<RunReport> {
    let cfg = resolve(cfg)?;
    let timeout = Duration::from_secs_f64(cfg.transport.timeout);
    let (ta, tb) = MemoryTransport::pair_with_timeout(timeout);
    let (dtx, drx) = mpsc::sync_channel::<(u64, DetectionRecord)>(1);
    let bob_cfg = cfg.clone();
    let bob = std::thread::spawn(move || {
        let mut tb = RecordingTransport::new(tb);
        let r = bob_loop(&bob_cfg, &mut tb, |i| drx.recv().map_err(with_block(i)));
        (r, tb.log)
    });
    let mut sim = simulator(&cfg)?;
    let tgt = target(sim.system());
    let mut ta = RecordingTransport::new(ta);
    let alice = alice_loop(&cfg, &mut ta, |_| {
        let out = sim.next_block(tgt)?;
        dtx.send((out.emission.frames, out.detection.clone())).map_err(|_| Error::Closed)?;
        Ok(out)
    });
    drop(dtx);
    let (bob_res, bob_log) = bob.join().map_err(|_| Error::Abort("Bob's thread panicked".into()))?;
    let rows = alice?;
    let keys = bob_res?;
    check_agreement(&rows, &keys)?;
    report(&cfg, rows, &ta.log, &bob_log)
}

/// Simulates the first block of `cfg` (the same block a run sees) and
/// writes it in the record dump format.
pub fn dump_first_block<W: std::io::Write>(cfg: &ExperimentConfig, w: &mut W) -> Result<BlockOutput> {
    let cfg = resolve(cfg)?;
    let mut sim = simulator(&cfg)?;
    let out = sim.next_block(target(sim.system()))?;
    write_dump(w, cfg.config_hash(), &out.emission, &out.detection)?;
    Ok(out)
}

fn check_agreement(rows: &[BlockRow], keys: &[BlockKey]) -> Result<()> {
    for (r, k) in rows.iter().zip(keys) {
        if r.key_digest != key_digest(&k.final_key) || r.lambda != k.lambda {
            return Err(Error::Abort(format!("block {}: final keys differ", r.block)));
        }
    }
    Ok(())
}

/// Which half of a two-process exchange this process plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Alice,
    Bob,
}

/// How a networked role reaches its peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Listen(String),
    Connect(String),
}

/// Outcome of one networked role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleReport {
    pub role: String,
    pub scenario: String,
    pub rows: Vec<BlockRow>,
    pub aggregate: Aggregate,
    pub transcript: String,
}

/// One side of a two-process exchange over TCP. Each process runs the same
/// seeded simulator and keeps only its own half of every block.
pub fn run_role(cfg: &ExperimentConfig, role: Role, endpoint: &Endpoint) -> Result<RoleReport> {
    let cfg = resolve(cfg)?;
    if cfg.transport.kind != TransportKind::Socket {
        log::debug!("networked role ignores transport.kind = memory");
    }
    let timeout = Duration::from_secs_f64(cfg.transport.timeout);
    let tcp = match endpoint {
        Endpoint::Listen(addr) => {
            let l = std::net::TcpListener::bind(addr)?;
            log::info!("listening on {}", l.local_addr()?);
            TcpTransport::listen(&l, timeout)?
        }
        Endpoint::Connect(addr) => TcpTransport::connect(addr.as_str(), timeout)?,
    };
    let mut t = RecordingTransport::new(tcp);
    let mut sim = simulator(&cfg)?;
    let tgt = target(sim.system());
    let rows = match role {
        Role::Alice => alice_loop(&cfg, &mut t, |_| sim.next_block(tgt))?,
        Role::Bob => {
            let mut traces = Vec::new();
            let keys = bob_loop(&cfg, &mut t, |_| {
                let out = sim.next_block(tgt)?;
                traces.push(rms_phase(&out));
                Ok((out.emission.frames, out.detection))
            })?;
            keys.iter().zip(traces).map(|(k, rms)| BlockRow::new(k, rms)).collect()
        }
    };
    Ok(RoleReport {
        role: match role {
            Role::Alice => "alice".into(),
            Role::Bob => "bob".into(),
        },
        scenario: cfg.scenario.clone(),
        aggregate: Aggregate::of(&rows),
        rows,
        transcript: hex::encode(t.transcript_hash()),
    })
}
