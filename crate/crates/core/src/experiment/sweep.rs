//! Attenuation sweeps, one independent exchange per point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, ExperimentConfig};
use super::exchange::{run_exchange, RunReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub attenuation_db: f64,
    /// Detector preset for this point only.
    pub preset: Option<String>,
}

impl std::str::FromStr for SweepPoint {
    type Err = Error;

    /// `36` or `35@spad-35db`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, preset) = match s.split_once('@') {
            Some((a, p)) => (a, Some(p.trim().to_string())),
            None => (s, None),
        };
        let attenuation_db = a
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad sweep point '{s}'")))?;
        Ok(Self { attenuation_db, preset })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub point: SweepPoint,
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub software_version: String,
    pub scenario: String,
    pub entries: Vec<SweepEntry>,
}

pub fn point_config(base: &ExperimentConfig, index: usize, point: &SweepPoint) -> ExperimentConfig {
    let mut c = base.clone();
    c.channel.attenuation_db = point.attenuation_db;
    if let Some(p) = &point.preset {
        c.detectors.preset = p.clone();
    }
    c.seed = derive_seed(base.seed, &format!("point-{index}"));
    c.scenario = format!("{}@{}dB", base.scenario, point.attenuation_db);
    c.output = Default::default();
    c
}

/// Runs every point; failures are recorded and do not stop the sweep.
pub fn sweep(base: &ExperimentConfig, points: &[SweepPoint]) -> SweepReport {
    let entries = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let cfg = point_config(base, i, p);
            match run_exchange(&cfg) {
                Ok(r) => SweepEntry { point: p.clone(), report: Some(r), error: None },
                Err(e) => {
                    log::warn!("sweep point {} dB failed: {e}", p.attenuation_db);
                    SweepEntry { point: p.clone(), report: None, error: Some(e.to_string()) }
                }
            }
        })
        .collect();
    SweepReport { software_version: env!("CARGO_PKG_VERSION").into(), scenario: base.scenario.clone(), entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_points() {
        let p: SweepPoint = "35@spad-35db".parse().unwrap();
        assert_eq!(p.attenuation_db, 35.0);
        assert_eq!(p.preset.as_deref(), Some("spad-35db"));
        assert_eq!("40".parse::<SweepPoint>().unwrap().preset, None);
        assert!("x".parse::<SweepPoint>().is_err());
    }

    #[test]
    fn empty_sweep_is_empty() {
        let r = sweep(&ExperimentConfig::default(), &[]);
        assert!(r.entries.is_empty());
    }

    #[test]
    fn failures_are_recorded() {
        let mut base = ExperimentConfig::default();
        base.detectors.preset = "ideal".into();
        let pts = vec![SweepPoint { attenuation_db: -1.0, preset: None }];
        let r = sweep(&base, &pts);
        assert!(r.entries[0].report.is_none());
        assert!(r.entries[0].error.is_some());
    }

    #[test]
    fn points_get_distinct_seeds() {
        let base = ExperimentConfig::default();
        let p = SweepPoint { attenuation_db: 30.0, preset: None };
        assert_ne!(point_config(&base, 0, &p).seed, point_config(&base, 1, &p).seed);
    }
}
