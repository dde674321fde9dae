//! Text tables, CSV and JSON renderings of run and sweep reports. Table
//! columns: attenuation, block time, RKR, QBER_z, phi_z, SKR.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::exchange::{Aggregate, RunReport};
use super::sweep::SweepReport;
use crate::detector::ClickOrigin;
use crate::error::{Error, Result};
use crate::linksim::records::Dump;
use crate::model::Basis;
use crate::photonic::frame::DetectorId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::Config(format!("unknown report format '{s}' (text, csv, json)"))),
        }
    }
}

/// Anything the `report` command can re-render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnyReport {
    Sweep(SweepReport),
    Run(Box<RunReport>),
}

const TABLE_HEAD: [&str; 6] = ["Attenuation [dB]", "Block time [s]", "RKR [kbps]", "QBER_z [%]", "phi_z [%]", "SKR [kbps]"];

fn table_cells(att: f64, a: &Aggregate) -> [String; 6] {
    let t = if a.blocks > 0 { a.t_total / a.blocks as f64 } else { 0.0 };
    [
        format!("{att:.1}"),
        format!("{t:.1}"),
        format!("{:.2}", a.rkr_kbps),
        format!("{:.2}", 100.0 * a.qber_z),
        format!("{:.2}", 100.0 * a.phi_z_mean),
        format!("{:.3}", a.skr_kbps),
    ]
}

fn aligned(head: &[&str], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..head.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([head[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect::<Vec<_>>().join(" | ")
    };
    let mut out = line(&head.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

pub fn sweep_table(r: &SweepReport) -> String {
    let mut rows = Vec::new();
    for e in &r.entries {
        match &e.report {
            Some(rep) => rows.push(table_cells(e.point.attenuation_db, &rep.aggregate).to_vec()),
            None => {
                let mut cells = vec![format!("{:.1}", e.point.attenuation_db)];
                cells.extend((0..5).map(|_| "failed".to_string()));
                rows.push(cells);
            }
        }
    }
    let mut out = format!("scenario: {}\n", r.scenario);
    out.push_str(&aligned(&TABLE_HEAD, &rows));
    for e in r.entries.iter().filter(|e| e.error.is_some()) {
        let _ = writeln!(out, "{} dB: {}", e.point.attenuation_db, e.error.as_deref().unwrap_or_default());
    }
    out
}

pub fn run_text(r: &RunReport) -> String {
    let p = &r.config.params;
    let mut out = String::new();
    let _ = writeln!(out, "scenario: {} (qkdsim {})", r.scenario, r.software_version);
    let _ = writeln!(
        out,
        "mu1 = {:.4}, mu2 = {:.4}, p_mu1 = {:.3}, p_z = {:.3}, PA block = {} bits",
        p.mu1,
        p.mu2,
        p.p_mu1,
        p.p_z_alice,
        r.config.resolved_params().pa_block_bits()
    );
    let _ = writeln!(
        out,
        "predicted: RKR {:.2} kbps, QBER_z {:.2} %, phi_z {:.2} %, SKR {:.3} kbps",
        r.prediction.rkr / 1e3,
        100.0 * r.prediction.qber_z,
        100.0 * r.prediction.phi_z,
        r.prediction.skr / 1e3
    );
    let head = ["Block", "t [s]", "RKR [kbps]", "QBER_z [%]", "phi_z [%]", "lambda", "SKR [kbps]"];
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|b| {
            vec![
                b.block.to_string(),
                format!("{:.2}", b.t),
                format!("{:.2}", b.rkr_kbps),
                format!("{:.3}", 100.0 * b.qber_z),
                format!("{:.3}", 100.0 * b.phi_z),
                b.lambda.to_string(),
                format!("{:.3}", b.skr_kbps),
            ]
        })
        .collect();
    out.push_str(&aligned(&head, &rows));
    out.push('\n');
    out.push_str(&aligned(&TABLE_HEAD, &[table_cells(r.attenuation_db, &r.aggregate).to_vec()]));
    out
}

/// Per-block time series.
pub fn run_csv(r: &RunReport) -> String {
    let mut out = String::from(
        "block,t_s,rkr_kbps,qber_z,phi_z,lambda,skr_kbps,secret_bits,sifted_bits,errors,s0_lower,s1_lower,phase_residual_rms,key_sha256\n",
    );
    for b in &r.rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.8},{:.8},{},{:.6},{},{},{},{:.3},{:.3},{:.6},{}",
            b.block,
            b.t,
            b.rkr_kbps,
            b.qber_z,
            b.phi_z,
            b.lambda,
            b.skr_kbps,
            b.secret_bits,
            b.sifted_bits,
            b.errors,
            b.s0_lower,
            b.s1_lower,
            b.phase_residual_rms,
            b.key_digest
        );
    }
    out
}

pub fn sweep_csv(r: &SweepReport) -> String {
    let mut out = String::from("attenuation_db,preset,blocks,block_time_s,rkr_kbps,qber_z,phi_z,skr_kbps,lambda_mean,error\n");
    for e in &r.entries {
        let preset = e.point.preset.clone().unwrap_or_default();
        match &e.report {
            Some(rep) => {
                let a = &rep.aggregate;
                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{:.6},{:.8},{:.8},{:.6},{:.1},",
                    e.point.attenuation_db,
                    preset,
                    a.blocks,
                    a.t_total / a.blocks.max(1) as f64,
                    a.rkr_kbps,
                    a.qber_z,
                    a.phi_z_mean,
                    a.skr_kbps,
                    a.lambda_mean
                );
            }
            None => {
                let msg = e.error.clone().unwrap_or_default().replace([',', '\n'], ";");
                let _ = writeln!(out, "{},{},0,,,,,,,{}", e.point.attenuation_db, preset, msg);
            }
        }
    }
    out
}

pub fn render(report: &AnyReport, format: Format) -> Result<String> {
    Ok(match (report, format) {
        (_, Format::Json) => serde_json::to_string_pretty(report).map_err(|e| Error::Config(e.to_string()))? + "\n",
        (AnyReport::Run(r), Format::Text) => run_text(r),
        (AnyReport::Run(r), Format::Csv) => run_csv(r),
        (AnyReport::Sweep(s), Format::Text) => sweep_table(s),
        (AnyReport::Sweep(s), Format::Csv) => sweep_csv(s),
    })
}

pub fn parse_report(json: &str) -> Result<AnyReport> {
    serde_json::from_str(json).map_err(|e| Error::Config(format!("not a run or sweep report: {e}")))
}

/// Human-readable summary of a record dump.
pub fn dump_summary(d: &Dump) -> String {
    let e = &d.emission;
    let mut out = String::new();
    let _ = writeln!(out, "params hash: {}", hex::encode(d.params_hash));
    let _ = writeln!(out, "frames: {}", e.frames);
    let _ = writeln!(out, "emitted: Z {} / X {} (non-empty frames {})", e.emitted(Basis::Z), e.emitted(Basis::X), e.entries.len());
    for det in DetectorId::ALL {
        let ev: Vec<_> = d.detection.events.iter().filter(|x| x.detector == det).collect();
        let by = |o: ClickOrigin| ev.iter().filter(|x| x.origin == o).count();
        let _ = writeln!(
            out,
            "detector {det:?}: {} clicks (signal {}, dark {}, afterpulse {})",
            ev.len(),
            by(ClickOrigin::Signal),
            by(ClickOrigin::Dark),
            by(ClickOrigin::Afterpulse)
        );
    }
    out
}
