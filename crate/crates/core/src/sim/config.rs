use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perf::DEFAULT_GATING_THRESHOLD;

pub const HW_CONFIG_VERSION: u32 = 1;

const EDGE_JSON: &str = include_str!("../../configs/energon-edge.json");
const SERVER_JSON: &str = include_str!("../../configs/energon-server.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoubleBufferMode {
    #[default]
    Auto,
    On,
    Off,
}

impl FromStr for DoubleBufferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "on" => Ok(Self::On),
            "off" => Ok(Self::Off),
            other => Err(Error::InvalidArgument(format!("double-buffer mode `{other}`"))),
        }
    }
}

impl fmt::Display for DoubleBufferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::On => "on",
            Self::Off => "off",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerConfig {
    pub core_w: f64,
    pub interface_w: f64,
    pub dram_w: f64,
    #[serde(default)]
    pub dram_j_per_byte: f64,
}

impl PowerConfig {
    pub fn static_w(&self) -> f64 {
        self.core_w + self.interface_w + self.dram_w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareConfig {
    pub version: u32,
    pub name: String,
    pub ipu_pes: usize,
    pub mac_units: usize,
    pub softmax_units: usize,
    pub exp_units_per_softmax: usize,
    pub probv_multipliers: usize,
    pub fu_kbuf_bytes: u64,
    pub au_kvbuf_bytes: u64,
    #[serde(default)]
    pub double_buffer: DoubleBufferMode,
    #[serde(default)]
    pub on_demand_fetch: bool,
    /// Bytes per cycle.
    pub dram_bandwidth: f64,
    #[serde(default = "default_latency")]
    pub dram_latency_cycles: u64,
    pub clock_hz: f64,
    pub selector_parallelism: usize,
    #[serde(default = "default_gating")]
    pub gating_threshold: f64,
    pub power: PowerConfig,
}

fn default_latency() -> u64 {
    100
}

fn default_gating() -> f64 {
    DEFAULT_GATING_THRESHOLD
}

impl HardwareConfig {
    pub fn edge() -> Self {
        Self::from_json(EDGE_JSON).expect("bundled edge config")
    }

    pub fn server() -> Self {
        Self::from_json(SERVER_JSON).expect("bundled server config")
    }

    /// Looks up a bundled config by name (`energon-edge`, `energon-server`, or
    /// the short forms `edge`, `server`).
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "edge" | "energon-edge" => Some(Self::edge()),
            "server" | "energon-server" => Some(Self::server()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("hardware config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != HW_CONFIG_VERSION {
            return Err(Error::InvalidArgument(format!(
                "hardware config version {} (expected {HW_CONFIG_VERSION})",
                self.version
            )));
        }
        let counts = [
            ("ipu_pes", self.ipu_pes),
            ("mac_units", self.mac_units),
            ("softmax_units", self.softmax_units),
            ("exp_units_per_softmax", self.exp_units_per_softmax),
            ("probv_multipliers", self.probv_multipliers),
            ("selector_parallelism", self.selector_parallelism),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        let positive = [
            ("dram_bandwidth", self.dram_bandwidth),
            ("clock_hz", self.clock_hz),
            ("gating_threshold", self.gating_threshold),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        let p = &self.power;
        for (name, v) in [
            ("core_w", p.core_w),
            ("interface_w", p.interface_w),
            ("dram_w", p.dram_w),
            ("dram_j_per_byte", p.dram_j_per_byte),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("power.{name} must be nonnegative")));
            }
        }
        Ok(())
    }
}
