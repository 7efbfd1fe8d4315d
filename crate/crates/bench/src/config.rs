//! Experiment description, read from TOML and overridable from the CLI.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rbbc::adversary::{AdversaryKind, AdversarySpec};
use rbbc::netsim::{LatencyMatrix, MatrixError};
use rbbc::types::{default_t, NodeId, Params, ProposerMode};
use rbbc::world::{Duration, Protocol, RequesterSpec, SyntheticLoad, WorldConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Toml { path: String, source: Box<toml::de::Error> },
    #[error("{field}: {msg}")]
    Invalid { field: &'static str, msg: String },
    #[error("latency_matrix: {0}")]
    Matrix(#[from] MatrixError),
}

fn invalid(field: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Proposers {
    #[serde(rename = "all")]
    All,
    #[serde(rename = "t+1")]
    TPlus1,
}

impl std::str::FromStr for Proposers {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" | "n" => Ok(Proposers::All),
            "t+1" => Ok(Proposers::TPlus1),
            _ => Err(format!("expected \"all\" or \"t+1\", got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    pub kind: AdversaryKind,
    /// Byzantine node count, the highest ids; defaults to t.
    pub count: Option<usize>,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig { kind: AdversaryKind::None, count: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// `"aws14"` for the bundled matrix, `"uniform:<ms>"`, or a CSV path.
    pub latency_matrix: String,
    /// Node regions by name, used round-robin; empty means all regions.
    pub regions: Vec<String>,
    pub intra_region_ms: f64,
    pub jitter_ms: f64,
    pub gst_ms: f64,
    /// Pre-GST extra delay cap, as a multiple of the link latency.
    pub gst_delay_factor: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            latency_matrix: "aws14".into(),
            regions: Vec::new(),
            intra_region_ms: 0.5,
            jitter_ms: 0.0,
            gst_ms: 0.0,
            gst_delay_factor: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequestersConfig {
    pub count: usize,
    pub regions: Vec<String>,
    pub per_host: usize,
    pub genesis_per_requester: u64,
    pub genesis_utxos_per_requester: usize,
}

impl Default for RequestersConfig {
    fn default() -> Self {
        RequestersConfig {
            count: 0,
            regions: Vec::new(),
            per_host: 10,
            genesis_per_requester: 100_000,
            genesis_utxos_per_requester: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub bad_sig_every: usize,
    pub conflict_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub nodes: usize,
    /// Tolerated faults; defaults to the largest t below n/3.
    pub faulty: Option<usize>,
    pub proposers: Proposers,
    pub proposal_size: usize,
    pub seed: u64,
    /// Consecutive seeds to run, starting at `seed`.
    pub seeds: u64,
    pub rounds: Option<u64>,
    pub duration_ms: Option<u64>,
    pub warmup_rounds: u64,
    pub verify_cost_us: u64,
    pub r_max: u32,
    pub leader: Option<u32>,
    pub backup_rounds: u64,
    pub time_limit_ms: u64,
    pub out_dir: PathBuf,
    pub adversary: AdversaryConfig,
    pub network: NetworkConfig,
    pub requesters: RequestersConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: Protocol::Rbbc,
            nodes: 4,
            faulty: None,
            proposers: Proposers::All,
            proposal_size: 100,
            seed: 1,
            seeds: 1,
            rounds: None,
            duration_ms: None,
            warmup_rounds: 0,
            verify_cost_us: 128,
            r_max: 20,
            leader: None,
            backup_rounds: 1,
            time_limit_ms: 3_600_000,
            out_dir: PathBuf::from("out"),
            adversary: AdversaryConfig::default(),
            network: NetworkConfig::default(),
            requesters: RequestersConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Toml { source, .. } => ConfigError::Toml { path: path.display().to_string(), source },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Toml { path: "<config>".into(), source: Box::new(e) })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn t(&self) -> usize {
        self.faulty.unwrap_or_else(|| default_t(self.nodes))
    }

    pub fn params(&self) -> Result<Params, ConfigError> {
        let mode = match self.proposers {
            Proposers::All => ProposerMode::AllN,
            Proposers::TPlus1 => ProposerMode::TPlus1,
        };
        Params::new(self.nodes, self.t(), self.proposal_size, mode).map_err(|e| invalid("nodes/faulty", e.to_string()))
    }

    pub fn duration(&self) -> Result<Duration, ConfigError> {
        match (self.rounds, self.duration_ms) {
            (Some(_), Some(_)) => Err(invalid("rounds", "set either rounds or duration_ms, not both")),
            (Some(0), _) => Err(invalid("rounds", "must be positive")),
            (Some(k), None) => Ok(Duration::Rounds(k)),
            (None, Some(0)) => Err(invalid("duration_ms", "must be positive")),
            (None, Some(ms)) => Ok(Duration::VirtualMs(ms)),
            (None, None) => Ok(Duration::Rounds(10)),
        }
    }

    pub fn matrix(&self) -> Result<LatencyMatrix, ConfigError> {
        let m = &self.network.latency_matrix;
        if m == "aws14" {
            return Ok(LatencyMatrix::aws14());
        }
        if let Some(ms) = m.strip_prefix("uniform:") {
            let ms: f64 = ms.parse().map_err(|_| invalid("latency_matrix", format!("bad uniform latency {ms:?}")))?;
            if !(ms >= 0.0) {
                return Err(invalid("latency_matrix", "uniform latency must be >= 0"));
            }
            return Ok(LatencyMatrix::uniform(1, ms));
        }
        let path = Path::new(m);
        if !path.exists() {
            return Err(invalid("latency_matrix", format!("file {m} does not exist")));
        }
        Ok(LatencyMatrix::load(path)?)
    }

    /// Checks every field and builds the world for `seed`.
    pub fn world(&self, seed: u64) -> Result<WorldConfig, ConfigError> {
        let params = self.params()?;
        if self.proposal_size == 0 {
            return Err(invalid("proposal_size", "must be positive"));
        }
        let duration = self.duration()?;
        if let Duration::Rounds(k) = duration {
            if self.warmup_rounds >= k {
                return Err(invalid("warmup_rounds", format!("must be below rounds ({k})")));
            }
        }
        if self.seeds == 0 {
            return Err(invalid("seeds", "must be positive"));
        }
        if self.r_max < 2 {
            return Err(invalid("r_max", "must be at least 2"));
        }
        let net = &self.network;
        for (field, v) in [("intra_region_ms", net.intra_region_ms), ("jitter_ms", net.jitter_ms), ("gst_ms", net.gst_ms), ("gst_delay_factor", net.gst_delay_factor)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(field, "must be a finite value >= 0"));
            }
        }
        let matrix = self.matrix()?;
        let node_regions = if net.regions.is_empty() {
            (0..matrix.len()).collect()
        } else {
            net.regions.iter().map(|r| matrix.region_index(r)).collect::<Result<Vec<_>, _>>()?
        };
        let count = self.adversary.count.unwrap_or(params.t);
        let adversary = AdversarySpec::highest(self.adversary.kind, params.n, count);
        adversary.validate(params.n, params.t).map_err(|e| invalid("adversary.count", e.to_string()))?;
        if self.protocol == Protocol::Cons1 && adversary.kind != AdversaryKind::None {
            return Err(invalid("adversary.kind", "attacks are only defined for rbbc"));
        }
        if let Some(l) = self.leader {
            if l as usize >= params.n {
                return Err(invalid("leader", format!("{l} is not below nodes ({})", params.n)));
            }
        }
        let r = &self.requesters;
        let requesters = if r.count > 0 {
            if r.per_host == 0 {
                return Err(invalid("requesters.per_host", "must be positive"));
            }
            if r.genesis_utxos_per_requester == 0 || r.genesis_per_requester == 0 {
                return Err(invalid("requesters.genesis_per_requester", "requesters need funds"));
            }
            let regions = if r.regions.is_empty() {
                node_regions.clone()
            } else {
                r.regions.iter().map(|x| matrix.region_index(x)).collect::<Result<Vec<_>, _>>()?
            };
            Some(RequesterSpec {
                count: r.count,
                regions,
                per_host: r.per_host,
                genesis_utxos: r.genesis_utxos_per_requester,
                genesis_amount: r.genesis_per_requester,
            })
        } else {
            None
        };
        let us = |ms: f64| (ms * 1000.0).round() as u64;
        Ok(WorldConfig {
            protocol: self.protocol,
            params,
            adversary,
            matrix: Arc::new(matrix),
            node_regions,
            requesters,
            synthetic: SyntheticLoad {
                bad_sig_every: self.synthetic.bad_sig_every,
                conflict_every: self.synthetic.conflict_every,
                slack_rounds: 2,
            },
            duration,
            seed,
            intra_region_us: us(net.intra_region_ms),
            jitter_us: us(net.jitter_ms),
            gst_us: us(net.gst_ms),
            gst_delay_factor: net.gst_delay_factor,
            verify_cost_us: self.verify_cost_us,
            bin_base_timeout_us: None,
            fetch_timeout_us: None,
            escalation_margin_us: None,
            r_max: self.r_max,
            allow_chained: true,
            backup_rounds: self.backup_rounds,
            leader: self.leader.map(NodeId),
            time_limit_us: self.time_limit_ms * 1000,
        })
    }
}
