//! Per-match state machine.
//!
//! ```text
//! Pending → Provisioning → HostStarting → Joining → Running → Finished
//!                                                          ↘ Crashed
//!                                                          ↘ TimedOut
//! any non-terminal state → Aborted
//! ```
//!
//! Slot 0 hosts the LAN game and is started first. Joiners are created only
//! once the host is ready: either it dropped `<game>_host_ready` into its
//! write directory, or it has been running for the fallback period.
//!
//! [`MatchHandle::step`] never blocks, so one thread can drive many matches
//! on a shared clock. [`launch_match`] and [`await_completion`] are the
//! blocking wrappers for a single match.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::net::TcpListener;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ImageCatalog, MatchSpec};
use crate::results::{aggregate, parse_result_file, result_file_name, GameResult, PlayerResult};
use crate::runtime::{
    Clock, ContainerConfig, ContainerHandle, ContainerRuntime, ContainerStatus, RuntimeError, Timestamp, LABEL_GAME,
    LABEL_SLOT,
};
use crate::volumes::{mounts_for_slot, prepare_layout, VolumeLayout, CONTAINER_BOTS, CONTAINER_MAPS};

pub const ENV_GAME_NAME: &str = "GAME_NAME";
pub const ENV_PLAYER_SLOT: &str = "PLAYER_SLOT";
pub const ENV_NUM_PLAYERS: &str = "NUM_PLAYERS";
pub const ENV_BOT_NAME: &str = "BOT_NAME";
pub const ENV_BOT_FILE: &str = "BOT_FILE";
pub const ENV_BOT_TYPE: &str = "BOT_TYPE";
pub const ENV_MAP: &str = "MAP";
pub const ENV_HEADFUL: &str = "HEADFUL";
pub const ENV_LAN_HOST: &str = "LAN_HOST";
pub const ENV_TIMEOUT_S: &str = "TIMEOUT_S";

pub const VNC_CONTAINER_PORT: u16 = 5900;
pub const VNC_BASE_PORT: u16 = 5900;
pub const STOP_GRACE_S: u64 = 10;

pub fn network_name(game_name: &str) -> String {
    format!("arena_{game_name}")
}

pub fn container_name(game_name: &str, slot: usize) -> String {
    format!("arena_{game_name}_{slot}")
}

pub fn host_ready_file_name(game_name: &str) -> String {
    format!("{game_name}_host_ready")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifecycleConfig {
    pub poll_interval: Duration,
    /// Host counts as ready after running this long without a marker.
    pub ready_fallback: Duration,
    pub host_ready_timeout: Duration,
    pub stop_grace_s: u64,
    pub images: ImageCatalog,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        LifecycleConfig {
            poll_interval: Duration::from_secs(1),
            ready_fallback: Duration::from_secs(5),
            host_ready_timeout: Duration::from_secs(60),
            stop_grace_s: STOP_GRACE_S,
            images: ImageCatalog::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PortError {
    #[error("no free host ports at or above {base} for {wanted} VNC bindings")]
    Exhausted { base: u16, wanted: usize },
    #[error("at least one port must be requested")]
    NothingRequested,
}

/// The `n` lowest ports `>= base` for which `is_free` holds, ascending.
pub fn allocate_vnc_ports(n: usize, base: u16, is_free: impl Fn(u16) -> bool) -> Result<Vec<u16>, PortError> {
    if n == 0 {
        return Err(PortError::NothingRequested);
    }
    let ports: Vec<u16> = (base..=u16::MAX).filter(|&p| is_free(p)).take(n).collect();
    if ports.len() < n {
        return Err(PortError::Exhausted { base, wanted: n });
    }
    Ok(ports)
}

fn host_port_free(port: u16) -> bool {
    TcpListener::bind(("0.0.0.0", port)).is_ok()
}

/// Hands out VNC host ports, remembering which ones live matches hold.
#[derive(Debug, Clone)]
pub struct PortAllocator {
    base: u16,
    probe_host: bool,
    taken: BTreeSet<u16>,
}

impl PortAllocator {
    /// Skips ports that cannot be bound on this host.
    pub fn new(base: u16) -> Self {
        PortAllocator {
            base,
            probe_host: true,
            taken: BTreeSet::new(),
        }
    }

    /// Only tracks its own reservations; never touches host sockets.
    pub fn in_memory(base: u16) -> Self {
        PortAllocator {
            base,
            probe_host: false,
            taken: BTreeSet::new(),
        }
    }

    pub fn allocate(&mut self, n: usize) -> Result<Vec<u16>, PortError> {
        let ports = allocate_vnc_ports(n, self.base, |p| {
            !self.taken.contains(&p) && (!self.probe_host || host_port_free(p))
        })?;
        self.taken.extend(&ports);
        Ok(ports)
    }

    /// Marks a port as occupied by something else.
    pub fn occupy(&mut self, port: u16) {
        self.taken.insert(port);
    }

    pub fn release(&mut self, ports: &[u16]) {
        for p in ports {
            self.taken.remove(p);
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LaunchError {
    #[error("provisioning failed: {0}")]
    Provision(String),
    #[error("host never became ready: {0}")]
    HostStartTimeout(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Ports(#[from] PortError),
    #[error("match is {0}, expected {1}")]
    WrongState(StateKind, StateKind),
}

/// Payload-free tag of a [`MatchState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StateKind {
    Pending,
    Provisioning,
    HostStarting,
    Joining,
    Running,
    Finished,
    Crashed,
    TimedOut,
    Aborted,
}

impl StateKind {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            StateKind::Finished | StateKind::Crashed | StateKind::TimedOut | StateKind::Aborted
        )
    }

    /// Whether `self → next` is an edge of the state machine.
    pub fn can_become(self, next: StateKind) -> bool {
        use StateKind::*;
        if self.is_terminal() {
            return false;
        }
        matches!(
            (self, next),
            (_, Aborted)
                | (Pending, Provisioning)
                | (Provisioning, HostStarting)
                | (HostStarting, Joining)
                | (Joining, Running)
                | (Running, Finished | Crashed | TimedOut)
        )
    }
}

impl fmt::Display for StateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatchState {
    Pending,
    Provisioning,
    HostStarting,
    Joining,
    Running,
    Finished(GameResult),
    Crashed { slots: BTreeSet<usize>, result: GameResult },
    TimedOut(GameResult),
    Aborted { reason: String },
}

impl MatchState {
    pub fn kind(&self) -> StateKind {
        match self {
            MatchState::Pending => StateKind::Pending,
            MatchState::Provisioning => StateKind::Provisioning,
            MatchState::HostStarting => StateKind::HostStarting,
            MatchState::Joining => StateKind::Joining,
            MatchState::Running => StateKind::Running,
            MatchState::Finished(_) => StateKind::Finished,
            MatchState::Crashed { .. } => StateKind::Crashed,
            MatchState::TimedOut(_) => StateKind::TimedOut,
            MatchState::Aborted { .. } => StateKind::Aborted,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.kind().is_terminal()
    }

    pub fn result(&self) -> Option<&GameResult> {
        match self {
            MatchState::Finished(r) | MatchState::TimedOut(r) | MatchState::Crashed { result: r, .. } => Some(r),
            _ => None,
        }
    }
}

/// One match being driven through its lifecycle.
#[derive(Debug)]
pub struct MatchHandle {
    pub spec: MatchSpec,
    pub layout: VolumeLayout,
    /// Created containers, indexed by slot.
    pub containers: Vec<ContainerHandle>,
    pub network: Option<String>,
    pub vnc_ports: Option<Vec<u16>>,
    pub deadline: Option<Timestamp>,
    pub warnings: Vec<String>,
    config: LifecycleConfig,
    state: MatchState,
    history: Vec<StateKind>,
    launched_at: Option<Timestamp>,
    host_started_at: Option<Timestamp>,
    crashed: BTreeSet<usize>,
    torn_down: bool,
}

impl MatchHandle {
    pub fn new(spec: MatchSpec, layout: VolumeLayout, config: LifecycleConfig) -> Self {
        MatchHandle {
            spec,
            layout,
            containers: Vec::new(),
            network: None,
            vnc_ports: None,
            deadline: None,
            warnings: Vec::new(),
            config,
            state: MatchState::Pending,
            history: vec![StateKind::Pending],
            launched_at: None,
            host_started_at: None,
            crashed: BTreeSet::new(),
            torn_down: false,
        }
    }

    pub fn state(&self) -> &MatchState {
        &self.state
    }

    /// Every state the match has been in, in order.
    pub fn history(&self) -> &[StateKind] {
        &self.history
    }

    pub fn game_name(&self) -> &str {
        &self.spec.game_name
    }

    pub fn network_name(&self) -> String {
        network_name(&self.spec.game_name)
    }

    fn set_state(&mut self, next: MatchState) {
        let (from, to) = (self.state.kind(), next.kind());
        assert!(from.can_become(to), "illegal match transition {from} -> {to}");
        log::debug!("{}: {from} -> {to}", self.spec.game_name);
        self.history.push(to);
        self.state = next;
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{}: {msg}", self.spec.game_name);
        self.warnings.push(msg);
    }

    /// Environment passed to the in-container wrapper for `slot`.
    pub fn env_for_slot(&self, slot: usize) -> Vec<String> {
        let spec = &self.spec;
        let p = &spec.players[slot];
        let bot_type = p.bot_type().map(|t| t.extension()).unwrap_or("");
        let lan_host = if slot == 0 { String::new() } else { container_name(&spec.game_name, 0) };
        vec![
            format!("{ENV_GAME_NAME}={}", spec.game_name),
            format!("{ENV_PLAYER_SLOT}={slot}"),
            format!("{ENV_NUM_PLAYERS}={}", spec.players.len()),
            format!("{ENV_BOT_NAME}={}", p.bot_name),
            format!("{ENV_BOT_FILE}={CONTAINER_BOTS}/{}/{}", p.bot_name, p.bot_file),
            format!("{ENV_BOT_TYPE}={bot_type}"),
            format!("{ENV_MAP}={CONTAINER_MAPS}/{}", spec.map),
            format!("{ENV_HEADFUL}={}", u8::from(spec.headful)),
            format!("{ENV_LAN_HOST}={lan_host}"),
            format!("{ENV_TIMEOUT_S}={}", spec.timeout_s),
        ]
    }

    pub fn container_config(&self, slot: usize) -> Result<ContainerConfig, LaunchError> {
        let spec = &self.spec;
        let p = &spec.players[slot];
        let bot_type = p.bot_type().map_err(|e| LaunchError::Provision(e.to_string()))?;
        let mounts = mounts_for_slot(&self.layout, spec, slot).map_err(|e| LaunchError::Provision(e.to_string()))?;
        let port_bindings = match &self.vnc_ports {
            Some(ports) if spec.headful => vec![(VNC_CONTAINER_PORT, ports[slot])],
            _ => Vec::new(),
        };
        let labels: BTreeMap<String, String> = [
            (LABEL_GAME.to_string(), spec.game_name.clone()),
            (LABEL_SLOT.to_string(), slot.to_string()),
        ]
        .into();
        Ok(ContainerConfig {
            name: container_name(&spec.game_name, slot),
            image: self.config.images.resolve(bot_type, spec.headful),
            env: self.env_for_slot(slot),
            mounts,
            network: self.network_name(),
            cpus: spec.limits.cpus,
            memory_mib: spec.limits.memory_mib,
            port_bindings,
            labels,
        })
    }

    fn provision(&self) -> Result<(), LaunchError> {
        let prov = |e: io::Error, what: String| LaunchError::Provision(format!("{what}: {e}"));
        prepare_layout(self.layout.base_dir(), &self.spec).map_err(|e| LaunchError::Provision(e.to_string()))?;
        for p in &self.spec.players {
            let write_dir = self.layout.write_dir(&self.spec.game_name, p.slot);
            // Leftovers from an earlier run under the same name would end the
            // match immediately.
            for stale in [result_file_name(&self.spec.game_name), host_ready_file_name(&self.spec.game_name)] {
                let path = write_dir.join(stale);
                match fs::remove_file(&path) {
                    Ok(()) => {}
                    Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                    Err(e) => return Err(prov(e, path.display().to_string())),
                }
            }
            let bot = self.layout.bot_dir(&p.bot_name).join(&p.bot_file);
            if !bot.is_file() {
                return Err(LaunchError::Provision(format!(
                    "bot {} is not installed at {}",
                    p.bot_name,
                    bot.display()
                )));
            }
        }
        Ok(())
    }

    fn create_and_start(&mut self, rt: &dyn ContainerRuntime, slot: usize) -> Result<(), LaunchError> {
        let cfg = self.container_config(slot)?;
        let h = rt.create(&cfg)?;
        self.containers.push(h.clone());
        rt.start(&h)?;
        Ok(())
    }

    /// Provisions the match and starts the host container. The match ends up
    /// in `HostStarting`, or `Aborted` with everything torn down.
    pub fn begin(&mut self, rt: &dyn ContainerRuntime, ports: &mut PortAllocator) -> Result<(), LaunchError> {
        if self.state.kind() != StateKind::Pending {
            return Err(LaunchError::WrongState(self.state.kind(), StateKind::Pending));
        }
        let clock = rt.clock();
        self.launched_at = Some(clock.now());
        self.set_state(MatchState::Provisioning);
        let res = (|| {
            self.provision()?;
            if self.spec.headful {
                self.vnc_ports = Some(ports.allocate(self.spec.players.len())?);
            }
            self.network = Some(rt.ensure_network(&self.network_name())?);
            self.set_state(MatchState::HostStarting);
            self.host_started_at = Some(clock.now());
            self.create_and_start(rt, 0)
        })();
        if let Err(e) = &res {
            self.fail(rt, e);
        }
        res
    }

    fn fail(&mut self, rt: &dyn ContainerRuntime, e: &LaunchError) {
        self.warn(format!("launch failed: {e}"));
        self.set_state(MatchState::Aborted { reason: e.to_string() });
        self.teardown(rt);
    }

    fn host_ready(&mut self, rt: &dyn ContainerRuntime, now: Timestamp) -> Result<bool, LaunchError> {
        let marker = self
            .layout
            .write_dir(&self.spec.game_name, 0)
            .join(host_ready_file_name(&self.spec.game_name));
        if marker.exists() {
            return Ok(true);
        }
        let host = self.containers[0].clone();
        match rt.inspect(&host) {
            Ok(ContainerStatus::Running { since }) => Ok(now.since(since) >= self.config.ready_fallback),
            Ok(ContainerStatus::Created) => Ok(false),
            Ok(ContainerStatus::Exited { code }) => Err(LaunchError::HostStartTimeout(format!(
                "host exited with code {code} before becoming ready"
            ))),
            Ok(ContainerStatus::NotFound) => Err(LaunchError::HostStartTimeout("host container disappeared".into())),
            Err(e) => {
                self.warn(format!("inspect of host failed: {e}"));
                Ok(false)
            }
        }
    }

    /// Advances the match without blocking: checks host readiness, launches
    /// joiners, or polls a running match. Reaching a terminal state tears
    /// the match down.
    pub fn step(&mut self, rt: &dyn ContainerRuntime) -> Result<&MatchState, LaunchError> {
        let now = rt.clock().now();
        match self.state.kind() {
            StateKind::HostStarting => {
                let res = (|| {
                    if !self.host_ready(rt, now)? {
                        let started = self.host_started_at.unwrap_or(now);
                        if now.since(started) >= self.config.host_ready_timeout {
                            return Err(LaunchError::HostStartTimeout(format!(
                                "not ready after {}s",
                                self.config.host_ready_timeout.as_secs()
                            )));
                        }
                        return Ok(());
                    }
                    self.set_state(MatchState::Joining);
                    for slot in 1..self.spec.players.len() {
                        self.create_and_start(rt, slot)?;
                    }
                    self.deadline = Some(now.plus(Duration::from_secs(self.spec.timeout_s)));
                    self.set_state(MatchState::Running);
                    Ok(())
                })();
                if let Err(e) = res {
                    self.fail(rt, &e);
                    return Err(e);
                }
            }
            StateKind::Running => {
                self.poll(rt);
                if self.state.is_terminal() {
                    self.teardown(rt);
                }
            }
            _ => {}
        }
        Ok(&self.state)
    }

    fn read_result(&mut self, slot: usize) -> Option<PlayerResult> {
        let path = self
            .layout
            .write_dir(&self.spec.game_name, slot)
            .join(result_file_name(&self.spec.game_name));
        let text = fs::read_to_string(&path).ok()?;
        match parse_result_file(&text) {
            Ok(r) => Some(r),
            Err(e) => {
                self.warn(format!("ignoring result file of slot {slot}: {e}"));
                None
            }
        }
    }

    /// Recomputes the state of a running match from result files, container
    /// statuses and the clock. Runtime errors leave the state unchanged.
    pub fn poll(&mut self, rt: &dyn ContainerRuntime) -> &MatchState {
        if self.state.kind() != StateKind::Running {
            return &self.state;
        }
        let now = rt.clock().now();
        let n = self.spec.players.len();
        let mut statuses = Vec::with_capacity(n);
        for h in self.containers.clone() {
            match rt.inspect(&h) {
                Ok(s) => statuses.push(s),
                Err(e) => {
                    self.warn(format!("inspect of {} failed: {e}", h.name));
                    return &self.state;
                }
            }
        }
        let mut files: BTreeMap<usize, Option<PlayerResult>> = BTreeMap::new();
        for slot in 0..n {
            let r = self.read_result(slot);
            files.insert(slot, r);
        }
        for (slot, status) in statuses.iter().enumerate() {
            let has_file = files[&slot].is_some();
            let died = match status {
                ContainerStatus::Exited { code } => *code != 0,
                ContainerStatus::NotFound => true,
                _ => false,
            };
            if died && !has_file {
                self.crashed.insert(slot);
            }
        }
        let finished_slot = |slot: usize| {
            files[&slot].is_some()
                || matches!(statuses[slot], ContainerStatus::Exited { .. } | ContainerStatus::NotFound)
        };
        let all_done = (0..n).all(finished_slot);
        let standing = n - self.crashed.len();
        let decidable = all_done || (!self.crashed.is_empty() && standing <= 1);

        let elapsed = self.launched_at.map(|t| now.since(t)).unwrap_or_default();
        let outcome = if decidable {
            Some(false)
        } else if self.deadline.is_some_and(|d| now >= d) {
            Some(true)
        } else {
            None
        };
        let Some(timed_out) = outcome else {
            return &self.state;
        };
        let next = match aggregate(&self.spec, &files, &self.crashed, timed_out) {
            Ok(mut result) => {
                result.wall_seconds = elapsed.as_secs_f64();
                let crashed: BTreeSet<usize> = result.players.iter().filter(|p| p.is_crashed).map(|p| p.slot).collect();
                if timed_out {
                    MatchState::TimedOut(result)
                } else if crashed.is_empty() {
                    MatchState::Finished(result)
                } else {
                    MatchState::Crashed { slots: crashed, result }
                }
            }
            Err(e) => MatchState::Aborted {
                reason: format!("inconsistent results: {e}"),
            },
        };
        self.set_state(next);
        &self.state
    }

    /// Stops and removes every container and the network. Best effort:
    /// failures are recorded as warnings. Safe to call repeatedly.
    pub fn teardown(&mut self, rt: &dyn ContainerRuntime) {
        let mut failures = Vec::new();
        for h in &self.containers {
            match rt.stop(h, self.config.stop_grace_s) {
                Ok(()) | Err(RuntimeError::NotFound(_)) => {}
                Err(e) => failures.push(format!("stop {}: {e}", h.name)),
            }
            match rt.remove(h) {
                Ok(()) | Err(RuntimeError::NotFound(_)) => {}
                Err(e) => failures.push(format!("remove {}: {e}", h.name)),
            }
        }
        // Containers created under our labels but never handed back (a failed
        // start after create, an earlier crashed driver).
        match rt.list_by_label(LABEL_GAME, Some(&self.spec.game_name)) {
            Ok(stray) => {
                for h in stray {
                    let _ = rt.stop(&h, self.config.stop_grace_s);
                    if let Err(e) = rt.remove(&h) {
                        failures.push(format!("remove {}: {e}", h.name));
                    }
                }
            }
            Err(e) => failures.push(format!("list: {e}")),
        }
        if self.network.is_some() || !self.torn_down {
            if let Err(e) = rt.remove_network(&self.network_name()) {
                failures.push(format!("remove network: {e}"));
            }
        }
        self.torn_down = failures.is_empty();
        for f in failures {
            self.warn(format!("teardown: {f}"));
        }
    }

    /// Ends the match as `Aborted` unless it already ended, then tears down.
    pub fn abort(&mut self, rt: &dyn ContainerRuntime) {
        if !self.state.is_terminal() {
            self.set_state(MatchState::Aborted {
                reason: "aborted".into(),
            });
        }
        self.teardown(rt);
    }
}

/// Provisions and starts a match, waiting until every slot has joined.
pub fn launch_match(
    spec: MatchSpec,
    rt: &dyn ContainerRuntime,
    layout: VolumeLayout,
    ports: &mut PortAllocator,
    config: LifecycleConfig,
) -> Result<MatchHandle, LaunchError> {
    let clock = rt.clock();
    let poll = config.poll_interval;
    let mut handle = MatchHandle::new(spec, layout, config);
    handle.begin(rt, ports)?;
    loop {
        let state = handle.step(rt)?.kind();
        if state == StateKind::Running {
            return Ok(handle);
        }
        clock.sleep(poll);
    }
}

/// Polls until the match ends, then tears it down.
pub fn await_completion(handle: &mut MatchHandle, rt: &dyn ContainerRuntime) -> MatchState {
    let clock: std::sync::Arc<dyn Clock> = rt.clock();
    loop {
        match handle.step(rt) {
            Ok(s) if s.is_terminal() => break,
            Ok(_) => {}
            Err(_) => break,
        }
        clock.sleep(handle.config.poll_interval);
    }
    handle.teardown(rt);
    handle.state.clone()
}

/// Blocking abort for callers that only hold the handle.
pub fn abort(handle: &mut MatchHandle, rt: &dyn ContainerRuntime) {
    handle.abort(rt);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{MatchTemplate, RosterEntry};
    use crate::fixtures::{roster, spec_for, stub_host};
    use crate::results::{render_result_file, Outcome};
    use crate::runtime::{ContainerPlan, SimEventKind, SimFile, SimRuntime, SimScript};
    use crate::volumes::CONTAINER_WRITE;
    use proptest::prelude::*;
    use tempfile::TempDir;

    struct Env {
        _dir: TempDir,
        layout: VolumeLayout,
        bots: Vec<RosterEntry>,
    }

    fn env(names: &[&str]) -> Env {
        let dir = TempDir::new().unwrap();
        let bots = roster(names);
        let layout = stub_host(dir.path(), &["sscai/(2)Benzene.scx"], &bots).unwrap();
        Env { _dir: dir, layout, bots }
    }

    fn spec(env: &Env, game: &str, headful: bool) -> MatchSpec {
        let template = MatchTemplate {
            headful,
            ..MatchTemplate::default()
        };
        spec_for(game, "sscai/(2)Benzene.scx", &env.bots, &template)
    }

    fn result_file(game: &str, slot: usize, winner: bool, at_s: f64) -> SimFile {
        let r = PlayerResult {
            slot,
            is_winner: winner,
            frame_count: 1000,
            ..PlayerResult::default()
        };
        SimFile::at(format!("{CONTAINER_WRITE}/{}", result_file_name(game)), render_result_file(&r), at_s)
    }

    fn live(rt: &SimRuntime) -> Vec<ContainerHandle> {
        rt.list_by_label(LABEL_GAME, None).unwrap()
    }


    #[test]
    fn four_bot_match_runs_to_a_decision() {
        let env = env(&["Iron", "Locutus", "ZZZKBot", "PurpleWave"]);
        let rt = SimRuntime::with_seed(7);
        let mut ports = PortAllocator::in_memory(VNC_BASE_PORT);
        let spec = spec(&env, "g4", false);
        let mut h = launch_match(spec, &rt, env.layout.clone(), &mut ports, LifecycleConfig::default()).unwrap();
        assert_eq!(h.state().kind(), StateKind::Running);
        assert_eq!(h.containers.len(), 4);

        // The host is running before any joiner exists.
        let events = rt.events();
        let host_start = events.iter().position(|e| e.subject == "arena_g4_0" && e.kind == SimEventKind::Started);
        let first_joiner = events.iter().position(|e| e.subject == "arena_g4_1" && e.kind == SimEventKind::Created);
        assert!(host_start.unwrap() < first_joiner.unwrap());

        for slot in 0..4 {
            let cfg = rt.config_of(&container_name("g4", slot)).unwrap();
            assert_eq!(cfg.network, "arena_g4");
            assert_eq!(cfg.env_var(ENV_PLAYER_SLOT), Some(slot.to_string().as_str()));
            assert_eq!(cfg.env_var(ENV_NUM_PLAYERS), Some("4"));
            let lan = if slot == 0 { "" } else { "arena_g4_0" };
            assert_eq!(cfg.env_var(ENV_LAN_HOST), Some(lan));
            assert_eq!(cfg.env_var(ENV_MAP), Some("/app/sc/maps/sscai/(2)Benzene.scx"));
            assert_eq!(cfg.env_var(ENV_HEADFUL), Some("0"));
            assert!(cfg.port_bindings.is_empty());
            assert_eq!(cfg.labels[LABEL_SLOT], slot.to_string());
        }
        let bot1 = rt.config_of("arena_g4_1").unwrap();
        assert_eq!(bot1.env_var(ENV_BOT_FILE), Some("/app/sc/bots/Locutus/Locutus.dll"));
        assert_eq!(bot1.env_var(ENV_BOT_TYPE), Some("dll"));

        let end = await_completion(&mut h, &rt);
        let MatchState::Finished(result) = end else { panic!("{end:?}") };
        assert_eq!(result.outcome, Outcome::Decided);
        assert!(result.winner_slot.unwrap() < 4);
        assert!(live(&rt).is_empty());
        assert!(rt.networks().is_empty());
    }

    #[test]
    fn headful_binds_consecutive_vnc_ports() {
        let env = env(&["A", "B"]);
        let rt = SimRuntime::with_seed(1);
        let mut ports = PortAllocator::in_memory(VNC_BASE_PORT);
        let h = launch_match(spec(&env, "hf", true), &rt, env.layout.clone(), &mut ports, LifecycleConfig::default())
            .unwrap();
        assert_eq!(h.vnc_ports, Some(vec![5900, 5901]));
        assert_eq!(rt.config_of("arena_hf_0").unwrap().port_bindings, vec![(5900, 5900)]);
        assert_eq!(rt.config_of("arena_hf_1").unwrap().port_bindings, vec![(5900, 5901)]);
        assert_eq!(rt.config_of("arena_hf_1").unwrap().env_var(ENV_HEADFUL), Some("1"));
    }

    #[test]
    fn hung_host_times_out_and_cleans_up() {
        let env = env(&["A", "B"]);
        let hang = ContainerPlan {
            fail_start: true,
            ..ContainerPlan::default()
        };
        let rt = SimRuntime::new(SimScript::new(0).with_plan("arena_hang_0", hang));
        let mut ports = PortAllocator::in_memory(VNC_BASE_PORT);
        let err = launch_match(spec(&env, "hang", false), &rt, env.layout.clone(), &mut ports, LifecycleConfig::default())
            .unwrap_err();
        assert!(matches!(err, LaunchError::HostStartTimeout(_)), "{err:?}");
        assert!(rt.now().as_millis() >= 60_000);
        assert!(rt.config_of("arena_hang_1").is_none());
        assert!(live(&rt).is_empty());
        assert!(rt.networks().is_empty());
    }

    #[test]
    fn missing_bot_is_a_provision_error() {
        let env = env(&["A", "B"]);
        let mut s = spec(&env, "nobot", false);
        s.players[1].bot_name = "Ghost".into();
        s.players[1].bot_file = "Ghost.dll".into();
        let rt = SimRuntime::with_seed(0);
        let mut ports = PortAllocator::in_memory(VNC_BASE_PORT);
        let mut h = MatchHandle::new(s, env.layout.clone(), LifecycleConfig::default());
        assert!(matches!(h.begin(&rt, &mut ports), Err(LaunchError::Provision(_))));
        assert_eq!(h.state().kind(), StateKind::Aborted);
        assert!(rt.events().iter().all(|e| e.kind != SimEventKind::Created));
    }

    #[test]
    fn killed_joiner_crashes_the_match() {
        let env = env(&["A", "B"]);
        let killed = ContainerPlan {
            run_duration_s: 30.0,
            exit_code: 137,
            ..ContainerPlan::default()
        };
        let rt = SimRuntime::new(SimScript::new(3).with_plan("arena_c_1", killed));
        let mut ports = PortAllocator::in_memory(VNC_BASE_PORT);
        let mut h =
            launch_match(spec(&env, "c", false), &rt, env.layout.clone(), &mut ports, LifecycleConfig::default()).unwrap();
        let end = await_completion(&mut h, &rt);
        let MatchState::Crashed { slots, result } = end else { panic!("{end:?}") };
        assert_eq!(slots, BTreeSet::from([1]));
        assert_eq!(result.winner_slot, Some(0));
        assert!(live(&rt).is_empty());
    }

    #[test]
    fn clean_exit_without_result_is_not_a_crash() {
        let env = env(&["A", "B", "C"]);
        let quiet = ContainerPlan {
            run_duration_s: 10.0,
            ..ContainerPlan::default()
        };
        let script = SimScript::new(0)
            .with_plan("arena_q_1", quiet)
            .with_plan(
                "arena_q_0",
                ContainerPlan {
                    run_duration_s: 200.0,
                    files_to_write: vec![result_file("q", 0, true, 199.0)],
                    ..ContainerPlan::default()
                },
            )
            .with_plan(
                "arena_q_2",
                ContainerPlan {
                    run_duration_s: 200.0,
                    files_to_write: vec![result_file("q", 2, false, 199.0)],
                    ..ContainerPlan::default()
                },
            );
        let rt = SimRuntime::new(script);
        let mut ports = PortAllocator::in_memory(VNC_BASE_PORT);
        let mut h =
            launch_match(spec(&env, "q", false), &rt, env.layout.clone(), &mut ports, LifecycleConfig::default()).unwrap();
        let end = await_completion(&mut h, &rt);
        let MatchState::Finished(result) = end else { panic!("{end:?}") };
        assert_eq!(result.winner_slot, Some(0));
    }

    #[test]
    fn deadline_times_the_match_out() {
        let env = env(&["A", "B"]);
        let rt = SimRuntime::with_seed(5);
        let mut ports = PortAllocator::in_memory(VNC_BASE_PORT);
        let mut s = spec(&env, "slow", false);
        // Autoplayed games last at least 120 s.
        s.timeout_s = 100;
        let mut h = launch_match(s, &rt, env.layout.clone(), &mut ports, LifecycleConfig::default()).unwrap();
        let end = await_completion(&mut h, &rt);
        let MatchState::TimedOut(result) = end else { panic!("{end:?}") };
        assert_eq!(result.outcome, Outcome::TimedOut);
        assert!(live(&rt).is_empty());
    }

    #[test]
    fn abort_is_idempotent() {
        let env = env(&["A", "B"]);
        let rt = SimRuntime::with_seed(0);
        let mut ports = PortAllocator::in_memory(VNC_BASE_PORT);
        let mut h =
            launch_match(spec(&env, "ab", false), &rt, env.layout.clone(), &mut ports, LifecycleConfig::default()).unwrap();
        abort(&mut h, &rt);
        abort(&mut h, &rt);
        assert_eq!(h.state().kind(), StateKind::Aborted);
        assert!(live(&rt).is_empty());
        assert!(rt.networks().is_empty());
        let stops: Vec<_> = rt
            .events()
            .into_iter()
            .filter(|e| matches!(e.kind, SimEventKind::Stopped(_)))
            .collect();
        assert_eq!(stops.len(), 2);
    }

    #[test]
    fn stale_result_from_earlier_run_is_ignored() {
        let env = env(&["A", "B"]);
        let stale = env.layout.write_dir("again", 0);
        fs::create_dir_all(&stale).unwrap();
        fs::write(stale.join(result_file_name("again")), "garbage").unwrap();
        let rt = SimRuntime::with_seed(9);
        let mut ports = PortAllocator::in_memory(VNC_BASE_PORT);
        let mut h =
            launch_match(spec(&env, "again", false), &rt, env.layout.clone(), &mut ports, LifecycleConfig::default())
                .unwrap();
        assert!(matches!(await_completion(&mut h, &rt), MatchState::Finished(_)));
        assert!(h.warnings.is_empty(), "{:?}", h.warnings);
    }

    fn arb_plan() -> impl Strategy<Value = (f64, i64, Option<(f64, bool)>, bool)> {
        (
            1.0f64..400.0,
            prop_oneof![Just(0i64), Just(1), Just(137)],
            proptest::option::of((0.5f64..400.0, any::<bool>())),
            proptest::bool::weighted(0.1),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn transitions_follow_the_state_machine(
            plans in proptest::collection::vec(arb_plan(), 2..=4),
            timeout_s in 50u64..500,
        ) {
            let names = ["A", "B", "C", "D"];
            let env = env(&names[..plans.len()]);
            let mut script = SimScript::new(0);
            for (slot, (dur, code, file, hang)) in plans.iter().enumerate() {
                let files = file.iter().map(|(at, win)| result_file("pm", slot, *win, *at)).collect();
                script = script.with_plan(container_name("pm", slot), ContainerPlan {
                    run_duration_s: *dur,
                    exit_code: *code,
                    files_to_write: files,
                    fail_create: false,
                    fail_start: *hang,
                });
            }
            let rt = SimRuntime::new(script);
            let mut ports = PortAllocator::in_memory(VNC_BASE_PORT);
            let mut s = spec(&env, "pm", false);
            s.timeout_s = timeout_s;
            let mut h = MatchHandle::new(s, env.layout.clone(), LifecycleConfig::default());
            if h.begin(&rt, &mut ports).is_ok() {
                let state = await_completion(&mut h, &rt);
                prop_assert!(state.is_terminal());
            }
            let hist = h.history();
            prop_assert!(hist.windows(2).all(|w| w[0].can_become(w[1])), "{hist:?}");
            prop_assert!(hist.last().unwrap().is_terminal());
            prop_assert!(live(&rt).is_empty());
            prop_assert!(rt.networks().is_empty());
        }
    }

    #[test]
    fn port_allocation_rules() {
        assert_eq!(allocate_vnc_ports(2, 5900, |_| true), Ok(vec![5900, 5901]));
        assert_eq!(allocate_vnc_ports(1, 5900, |p| p != 5900), Ok(vec![5901]));
        assert_eq!(
            allocate_vnc_ports(1, 65535, |p| p != 65535),
            Err(PortError::Exhausted { base: 65535, wanted: 1 })
        );
        assert_eq!(allocate_vnc_ports(0, 5900, |_| true), Err(PortError::NothingRequested));
        assert_eq!(allocate_vnc_ports(2, 65535, |_| true), Err(PortError::Exhausted { base: 65535, wanted: 2 }));
    }

    #[test]
    fn allocator_tracks_reservations() {
        let mut ports = PortAllocator::in_memory(5900);
        ports.occupy(5901);
        assert_eq!(ports.allocate(2).unwrap(), vec![5900, 5902]);
        assert_eq!(ports.allocate(1).unwrap(), vec![5903]);
        ports.release(&[5900]);
        assert_eq!(ports.allocate(1).unwrap(), vec![5900]);
    }

    #[test]
    fn host_probe_skips_bound_ports() {
        let listener = TcpListener::bind(("0.0.0.0", 0)).unwrap();
        let port = listener.local_addr().unwrap().port();
        let mut ports = PortAllocator::new(port);
        let got = ports.allocate(1).unwrap();
        assert!(got[0] > port);
    }

    #[test]
    fn transition_relation() {
        use StateKind::*;
        let all = [Pending, Provisioning, HostStarting, Joining, Running, Finished, Crashed, TimedOut, Aborted];
        let forward = [(Pending, Provisioning), (Provisioning, HostStarting), (HostStarting, Joining), (Joining, Running)];
        for from in all {
            for to in all {
                let expected = if from.is_terminal() {
                    false
                } else {
                    to == Aborted
                        || forward.contains(&(from, to))
                        || (from == Running && matches!(to, Finished | Crashed | TimedOut))
                };
                assert_eq!(from.can_become(to), expected, "{from} -> {to}");
            }
        }
    }

    #[test]
    fn names() {
        assert_eq!(network_name("g1"), "arena_g1");
        assert_eq!(container_name("g1", 3), "arena_g1_3");
        assert_eq!(host_ready_file_name("g1"), "g1_host_ready");
    }
}
