//! Experiment configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{preset, DetectorModel, DetectorPair};
use crate::error::{Error, Result};
use crate::linksim::{FeedbackConfig, SimConfig};
use crate::model::ProtocolParams;
use crate::photonic::{ChannelModel, ReceiverModel, SystemModel, TransmitterModel};
use crate::session::SessionConfig;

/// Error-correction frames per amplification block at desk scale (2^20 bits).
pub const DESK_FRAMES_PER_PA: usize = 128;
pub const FULL_FRAMES_PER_PA: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
    /// Keep `params.ec_frames_per_pa` as written.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreeParam {
    Mu1,
    Mu2,
    PMu1,
    PZAlice,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            "custom" => Ok(Self::Custom),
            _ => Err(Error::Config(format!("unknown scale '{s}' (desk, full, custom)"))),
        }
    }
}

impl std::str::FromStr for FreeParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mu1" => Ok(Self::Mu1),
            "mu2" => Ok(Self::Mu2),
            "pmu1" => Ok(Self::PMu1),
            "pzalice" => Ok(Self::PZAlice),
            _ => Err(Error::Config(format!("unknown free parameter '{s}' (mu1, mu2, pmu1, pzalice)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Memory,
    Socket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportConfig {
    pub kind: TransportKind,
    pub address: String,
    /// Seconds a role waits for its peer.
    pub timeout: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self { kind: TransportKind::Memory, address: "127.0.0.1:7450".into(), timeout: 3600.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorsConfig {
    pub preset: String,
    /// Replaces the preset's Z detector entirely.
    pub z: Option<DetectorModel>,
    pub x: Option<DetectorModel>,
}

impl Default for DetectorsConfig {
    fn default() -> Self {
        Self { preset: "snspd".into(), z: None, x: None }
    }
}

impl DetectorsConfig {
    pub fn resolve(&self) -> Result<DetectorPair> {
        let mut pair = preset(&self.preset)?;
        if let Some(z) = self.z {
            pair.z = z;
        }
        if let Some(x) = self.x {
            pair.x = x;
        }
        Ok(pair)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub text: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub seed: u64,
    /// Privacy-amplification blocks to run.
    pub blocks: u64,
    /// Sets `params.ec_frames_per_pa` unless `custom`.
    pub scale: Scale,
    pub worst_case_polarization: bool,
    /// Switch on the planned phase and delay random walks for channel rates
    /// left at zero.
    pub drift: bool,
    /// Parameters the optimizer chooses before the run.
    pub optimize: Vec<FreeParam>,
    pub parallel: bool,
    pub params: ProtocolParams<f64>,
    pub transmitter: TransmitterModel,
    pub receiver: ReceiverModel,
    pub channel: ChannelModel,
    pub detectors: DetectorsConfig,
    pub feedback: FeedbackConfig,
    pub transport: TransportConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: "snspd-36db".into(),
            seed: 1,
            blocks: 1,
            scale: Scale::Desk,
            worst_case_polarization: true,
            drift: false,
            optimize: Vec::new(),
            parallel: true,
            params: ProtocolParams::default(),
            transmitter: TransmitterModel::default(),
            receiver: ReceiverModel::default(),
            channel: ChannelModel::default(),
            detectors: DetectorsConfig::default(),
            feedback: FeedbackConfig::default(),
            transport: TransportConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("blocks must be at least 1".into()));
        }
        if !(self.transport.timeout > 0.0) {
            return Err(Error::Config("transport timeout must be positive".into()));
        }
        self.system().map(|_| ())
    }

    /// Parameters after applying the block scale.
    pub fn resolved_params(&self) -> ProtocolParams<f64> {
        let mut p = self.params;
        match self.scale {
            Scale::Desk => p.ec_frames_per_pa = DESK_FRAMES_PER_PA,
            Scale::Full => p.ec_frames_per_pa = FULL_FRAMES_PER_PA,
            Scale::Custom => {}
        }
        p
    }

    pub fn system(&self) -> Result<SystemModel> {
        let mut channel = self.channel;
        if self.drift {
            let planned = channel.with_planned_drift();
            if channel.phase_drift_rate == 0.0 {
                channel.phase_drift_rate = planned.phase_drift_rate;
            }
            if channel.delay_drift_rate == 0.0 {
                channel.delay_drift_rate = planned.delay_drift_rate;
            }
        }
        let s = SystemModel {
            params: self.resolved_params(),
            tx: self.transmitter,
            rx: self.receiver,
            channel,
            detectors: self.detectors.resolve().map_err(|e| Error::Config(e.to_string()))?,
            worst_case_polarization: self.worst_case_polarization,
        };
        s.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(s)
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig { feedback: self.feedback, parallel: self.parallel }
    }

    /// First eight bytes of SHA-256 over the canonical TOML, leaving out
    /// output paths and transport settings that legitimately differ between
    /// the two roles.
    pub fn config_hash(&self) -> [u8; 8] {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        c.transport = TransportConfig::default();
        let d = Sha256::digest(c.to_toml().as_bytes());
        d[..8].try_into().expect("8 bytes")
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig::new(self.resolved_params(), self.config_hash())
    }

    /// Independent seed for one consumer of randomness.
    pub fn derived_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.resolved_params().pa_block_bits(), 1 << 20);
    }

    #[test]
    fn sections_override_fields() {
        let c = ExperimentConfig::from_toml(
            r#"
            scenario = "spad-30"
            seed = 9
            scale = "full"
            optimize = ["mu1", "mu2"]
            [params]
            mu1 = 0.4
            [channel]
            attenuation_db = 30.0
            [detectors]
            preset = "spad-35db"
            "#,
        )
        .unwrap();
        assert_eq!(c.params.mu1, 0.4);
        assert_eq!(c.params.mu2, 0.25);
        assert_eq!(c.resolved_params().ec_frames_per_pa, 1000);
        assert_eq!(c.optimize, vec![FreeParam::Mu1, FreeParam::Mu2]);
        assert_eq!(c.system().unwrap().detectors.z.dead_time, 32e-6);
    }

    #[test]
    fn unknown_keys_fail_closed() {
        for bad in ["sed = 1", "[params]\nmu3 = 0.1", "[channel]\nloss = 3", "[detectors]\npreset = \"pmt\"", "blocks = 0"] {
            assert!(matches!(ExperimentConfig::from_toml(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn roundtrip_and_hash() {
        let mut c = ExperimentConfig::default();
        c.drift = true;
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
        let mut other = c.clone();
        other.transport.kind = TransportKind::Socket;
        assert_eq!(other.config_hash(), c.config_hash());
        other.seed = 2;
        assert_ne!(other.config_hash(), c.config_hash());
        assert!(c.system().unwrap().channel.phase_drift_rate > 0.0);
    }
}
