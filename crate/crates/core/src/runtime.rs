//! Container runtime abstraction.
//!
//! [`DockerRuntime`] talks to a Docker-Engine-compatible daemon over its
//! HTTP API; [`SimRuntime`] is an in-process, deterministic stand-in with a
//! manually advanced clock and scripted faults.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Cpus, ImageRef};
use crate::volumes::Mount;

pub mod docker;
mod http;
pub mod sim;

pub use docker::DockerRuntime;
pub use sim::{ContainerPlan, SimEvent, SimEventKind, SimFile, SimRuntime, SimScript};

pub const LABEL_GAME: &str = "arena.game";
pub const LABEL_SLOT: &str = "arena.slot";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("container runtime unavailable: {0}")]
    Unavailable(String),
    #[error("container name already in use: {0}")]
    NameConflict(String),
    #[error("image not available: {0}")]
    ImageMissing(String),
    #[error("no such container: {0}")]
    NotFound(String),
    #[error("container already running: {0}")]
    AlreadyRunning(String),
    #[error("container still running: {0}")]
    StillRunning(String),
    #[error("invalid container config: {0}")]
    InvalidConfig(String),
    #[error("runtime API error {status}: {message}")]
    Api { status: u16, message: String },
}

/// Milliseconds since the clock's epoch: the Unix epoch for wall clocks,
/// simulation start for the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn from_duration(d: Duration) -> Self {
        Timestamp(d.as_millis() as u64)
    }

    pub fn as_millis(self) -> u64 {
        self.0
    }

    pub fn plus(self, d: Duration) -> Self {
        Timestamp(self.0.saturating_add(d.as_millis() as u64))
    }

    pub fn since(self, earlier: Timestamp) -> Duration {
        Duration::from_millis(self.0.saturating_sub(earlier.0))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}s", self.0 / 1000, self.0 % 1000)
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_duration(SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default())
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerConfig {
    pub name: String,
    pub image: ImageRef,
    /// `KEY=VALUE` entries in injection order.
    pub env: Vec<String>,
    pub mounts: Vec<Mount>,
    pub network: String,
    pub cpus: Cpus,
    pub memory_mib: u64,
    /// `(container_port, host_port)` TCP bindings.
    pub port_bindings: Vec<(u16, u16)>,
    pub labels: BTreeMap<String, String>,
}

impl ContainerConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.name.is_empty() {
            return Err(RuntimeError::InvalidConfig("empty container name".into()));
        }
        for key in [LABEL_GAME, LABEL_SLOT] {
            if !self.labels.contains_key(key) {
                return Err(RuntimeError::InvalidConfig(format!("{}: missing label {key}", self.name)));
            }
        }
        if self.cpus.nanos() == 0 || self.memory_mib == 0 {
            return Err(RuntimeError::InvalidConfig(format!("{}: empty resource limits", self.name)));
        }
        Ok(())
    }

    pub fn env_var(&self, key: &str) -> Option<&str> {
        self.env.iter().find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
    }

    pub fn memory_bytes(&self) -> u64 {
        self.memory_mib * 1024 * 1024
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContainerHandle {
    pub id: String,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContainerStatus {
    Created,
    Running { since: Timestamp },
    Exited { code: i64 },
    NotFound,
}

impl ContainerStatus {
    /// Position in Created → Running → Exited → NotFound.
    pub fn rank(&self) -> u8 {
        match self {
            ContainerStatus::Created => 0,
            ContainerStatus::Running { .. } => 1,
            ContainerStatus::Exited { .. } => 2,
            ContainerStatus::NotFound => 3,
        }
    }

    pub fn is_running(&self) -> bool {
        matches!(self, ContainerStatus::Running { .. })
    }
}

impl fmt::Display for ContainerStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContainerStatus::Created => f.write_str("created"),
            ContainerStatus::Running { since } => write!(f, "running (since {since})"),
            ContainerStatus::Exited { code } => write!(f, "exited ({code})"),
            ContainerStatus::NotFound => f.write_str("not found"),
        }
    }
}

/// What match lifecycles need from a container engine.
///
/// Implementations must tolerate concurrent calls from many lifecycles.
pub trait ContainerRuntime: Send + Sync {
    /// Creates the network if needed and returns its id.
    fn ensure_network(&self, name: &str) -> Result<String, RuntimeError>;
    /// Removes a network; missing networks are not an error.
    fn remove_network(&self, name: &str) -> Result<(), RuntimeError>;
    /// Names of networks starting with `prefix`.
    fn list_networks(&self, prefix: &str) -> Result<Vec<String>, RuntimeError>;
    fn create(&self, cfg: &ContainerConfig) -> Result<ContainerHandle, RuntimeError>;
    fn start(&self, h: &ContainerHandle) -> Result<(), RuntimeError>;
    /// Stops within `grace_s` seconds, killing afterwards. Idempotent.
    fn stop(&self, h: &ContainerHandle, grace_s: u64) -> Result<(), RuntimeError>;
    fn remove(&self, h: &ContainerHandle) -> Result<(), RuntimeError>;
    /// Current status; an unknown container is `NotFound`, not an error.
    fn inspect(&self, h: &ContainerHandle) -> Result<ContainerStatus, RuntimeError>;
    /// Containers carrying label `key` (with `value`, when given).
    fn list_by_label(&self, key: &str, value: Option<&str>) -> Result<Vec<ContainerHandle>, RuntimeError>;
    /// Clock the runtime's timestamps are measured with.
    fn clock(&self) -> Arc<dyn Clock>;
}
