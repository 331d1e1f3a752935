//! Deterministic simulated container runtime.
//!
//! Time only moves when [`SimRuntime::advance`] is called (or a lifecycle
//! sleeps on [`SimRuntime::clock`]). Every observable change is appended to
//! an event trace, so identical scripts and seeds give identical traces.
//!
//! Containers without an explicit [`ContainerPlan`] "autoplay": they read the
//! game environment the lifecycle injects, slot 0 writes the host-ready
//! marker after one second, and every slot writes a result file when the
//! game ends. Duration and winner are derived from the seed and game name.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Clock, ContainerConfig, ContainerHandle, ContainerRuntime, ContainerStatus, RuntimeError, Timestamp, LABEL_GAME,
};
use crate::config::{GAME_IMAGE, JAVA_IMAGE};
use crate::lifecycle::{host_ready_file_name, ENV_GAME_NAME, ENV_NUM_PLAYERS, ENV_PLAYER_SLOT};
use crate::results::{render_result_file, result_file_name, PlayerResult};
use crate::volumes::CONTAINER_WRITE;

/// Exit code the simulator reports for a container killed by `stop`.
pub const KILLED_EXIT_CODE: i64 = 137;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimFile {
    pub container_path: String,
    pub bytes: Vec<u8>,
    /// Seconds after start; `None` writes at exit.
    pub at_s: Option<f64>,
}

impl SimFile {
    pub fn at_exit(container_path: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Self {
        SimFile {
            container_path: container_path.into(),
            bytes: bytes.into(),
            at_s: None,
        }
    }

    pub fn at(container_path: impl Into<String>, bytes: impl Into<Vec<u8>>, at_s: f64) -> Self {
        SimFile {
            container_path: container_path.into(),
            bytes: bytes.into(),
            at_s: Some(at_s),
        }
    }
}

/// Scripted behavior of one container, keyed by container name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerPlan {
    pub run_duration_s: f64,
    pub exit_code: i64,
    pub files_to_write: Vec<SimFile>,
    /// `create` fails with `Unavailable`.
    pub fail_create: bool,
    /// `start` is accepted but the container never leaves `Created`.
    pub fail_start: bool,
}

impl Default for ContainerPlan {
    fn default() -> Self {
        ContainerPlan {
            run_duration_s: 60.0,
            exit_code: 0,
            files_to_write: Vec::new(),
            fail_create: false,
            fail_start: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimScript {
    pub plans: BTreeMap<String, ContainerPlan>,
    pub seed: u64,
}

impl SimScript {
    pub fn new(seed: u64) -> Self {
        SimScript {
            plans: BTreeMap::new(),
            seed,
        }
    }

    pub fn with_plan(mut self, container: impl Into<String>, plan: ContainerPlan) -> Self {
        self.plans.insert(container.into(), plan);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimEventKind {
    NetworkCreated,
    NetworkRemoved,
    CreateFailed,
    Created,
    Started,
    StartHung,
    FileWritten(String),
    WriteRejected(String),
    Exited(i64),
    Stopped(i64),
    Removed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub at: Timestamp,
    /// Container or network name.
    pub subject: String,
    /// `arena.game` label of the container, if any.
    pub game: Option<String>,
    pub kind: SimEventKind,
}

#[derive(Debug)]
struct PendingWrite {
    at: Timestamp,
    container_path: String,
    bytes: Vec<u8>,
}

#[derive(Debug)]
struct SimContainer {
    seq: u64,
    handle: ContainerHandle,
    cfg: ContainerConfig,
    status: ContainerStatus,
    plan: ContainerPlan,
    exit_at: Option<Timestamp>,
    writes: Vec<PendingWrite>,
}

#[derive(Debug)]
struct SimState {
    now: Timestamp,
    script: SimScript,
    images: BTreeSet<String>,
    available: bool,
    networks: BTreeMap<String, String>,
    next_seq: u64,
    // Live (not removed) containers by id.
    containers: BTreeMap<String, SimContainer>,
    history: BTreeMap<String, ContainerConfig>,
    events: Vec<SimEvent>,
}

/// Shared handle to one simulated engine. Clones refer to the same state.
#[derive(Debug, Clone)]
pub struct SimRuntime {
    state: Arc<Mutex<SimState>>,
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.iter().chain(std::iter::once(&0xffu8)) {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

fn secs_to_ms(s: f64) -> u64 {
    if s.is_finite() && s > 0.0 {
        (s * 1000.0).round() as u64
    } else {
        0
    }
}

impl SimRuntime {
    pub fn new(script: SimScript) -> Self {
        SimRuntime {
            state: Arc::new(Mutex::new(SimState {
                now: Timestamp(0),
                script,
                images: [GAME_IMAGE, JAVA_IMAGE].iter().map(|s| s.to_string()).collect(),
                available: true,
                networks: BTreeMap::new(),
                next_seq: 0,
                containers: BTreeMap::new(),
                history: BTreeMap::new(),
                events: Vec::new(),
            })),
        }
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(SimScript::new(seed))
    }

    fn lock(&self) -> MutexGuard<'_, SimState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn now(&self) -> Timestamp {
        self.lock().now
    }

    /// Moves simulated time forward, firing scheduled writes and exits in
    /// time order.
    pub fn advance(&self, d: Duration) {
        let mut st = self.lock();
        let target = st.now.plus(d);
        st.run_until(target);
    }

    pub fn set_plan(&self, container: impl Into<String>, plan: ContainerPlan) {
        self.lock().script.plans.insert(container.into(), plan);
    }

    /// Simulates the daemon going away (or coming back).
    pub fn set_available(&self, available: bool) {
        self.lock().available = available;
    }

    pub fn add_image(&self, image: &str) {
        self.lock().images.insert(image.to_string());
    }

    pub fn remove_image(&self, image: &str) {
        self.lock().images.remove(image);
    }

    pub fn events(&self) -> Vec<SimEvent> {
        self.lock().events.clone()
    }

    /// Config of the most recent container created under `name`, kept after
    /// removal.
    pub fn config_of(&self, name: &str) -> Option<ContainerConfig> {
        self.lock().history.get(name).cloned()
    }

    pub fn networks(&self) -> Vec<String> {
        self.lock().networks.keys().cloned().collect()
    }
}

impl SimState {
    fn check_available(&self) -> Result<(), RuntimeError> {
        if self.available {
            Ok(())
        } else {
            Err(RuntimeError::Unavailable("simulated daemon is down".into()))
        }
    }

    fn push(&mut self, subject: &str, game: Option<String>, kind: SimEventKind) {
        self.events.push(SimEvent {
            at: self.now,
            subject: subject.to_string(),
            game,
            kind,
        });
    }

    fn by_handle(&mut self, h: &ContainerHandle) -> Option<&mut SimContainer> {
        self.containers.get_mut(&h.id).filter(|c| c.handle.name == h.name)
    }

    fn autoplay_plan(&self, cfg: &ContainerConfig) -> ContainerPlan {
        let (Some(game), Some(slot), Some(n)) = (
            cfg.env_var(ENV_GAME_NAME),
            cfg.env_var(ENV_PLAYER_SLOT).and_then(|s| s.parse::<usize>().ok()),
            cfg.env_var(ENV_NUM_PLAYERS).and_then(|s| s.parse::<usize>().ok()),
        ) else {
            return ContainerPlan::default();
        };
        let seed = self.script.seed;
        let mut game_rng = ChaCha8Rng::seed_from_u64(fnv1a(&[&seed.to_le_bytes(), game.as_bytes()]));
        let duration_s: u64 = game_rng.random_range(120..=900);
        let winner = game_rng.random_range(0..n.max(1));
        let mut slot_rng =
            ChaCha8Rng::seed_from_u64(fnv1a(&[&seed.to_le_bytes(), game.as_bytes(), &slot.to_le_bytes()]));
        let result = PlayerResult {
            slot,
            is_winner: slot == winner,
            building_score: slot_rng.random_range(0..5000),
            razing_score: slot_rng.random_range(0..5000),
            unit_score: slot_rng.random_range(0..10000),
            kill_score: slot_rng.random_range(0..10000),
            frame_count: duration_s * 24,
            ..PlayerResult::default()
        };
        let mut files = Vec::new();
        if slot == 0 {
            files.push(SimFile::at(
                format!("{CONTAINER_WRITE}/{}", host_ready_file_name(game)),
                Vec::new(),
                1.0,
            ));
        }
        files.push(SimFile::at_exit(
            format!("{CONTAINER_WRITE}/{}", result_file_name(game)),
            render_result_file(&result),
        ));
        ContainerPlan {
            run_duration_s: duration_s as f64,
            exit_code: 0,
            files_to_write: files,
            fail_create: false,
            fail_start: false,
        }
    }

    fn host_path(cfg: &ContainerConfig, container_path: &str) -> Result<PathBuf, ()> {
        let mount = cfg
            .mounts
            .iter()
            .filter(|m| {
                container_path == m.container_path
                    || container_path.starts_with(&format!("{}/", m.container_path))
            })
            .max_by_key(|m| m.container_path.len())
            .ok_or(())?;
        if mount.read_only {
            return Err(());
        }
        let rel = container_path[mount.container_path.len()..].trim_start_matches('/');
        if rel.split('/').any(|c| c == ".." || c.is_empty()) {
            return Err(());
        }
        Ok(mount.host_path.join(rel))
    }

    fn write_file(&mut self, id: &str, container_path: &str, bytes: &[u8]) {
        let Some(c) = self.containers.get(id) else { return };
        let name = c.handle.name.clone();
        let game = c.cfg.labels.get(LABEL_GAME).cloned();
        let written = Self::host_path(&c.cfg, container_path).ok().and_then(|path| {
            path.parent().map(fs::create_dir_all)?.ok()?;
            fs::write(&path, bytes).ok()
        });
        let kind = match written {
            Some(()) => SimEventKind::FileWritten(container_path.to_string()),
            None => SimEventKind::WriteRejected(container_path.to_string()),
        };
        self.push(&name, game, kind);
    }

    fn next_due(&self, target: Timestamp) -> Option<(Timestamp, u8, u64, String)> {
        let mut best: Option<(Timestamp, u8, u64, String)> = None;
        for (id, c) in &self.containers {
            if !c.status.is_running() {
                continue;
            }
            let mut consider = |cand: (Timestamp, u8, u64, String)| {
                if cand.0 <= target && best.as_ref().is_none_or(|b| (cand.0, cand.1, cand.2) < (b.0, b.1, b.2)) {
                    best = Some(cand);
                }
            };
            if let Some(w) = c.writes.iter().map(|w| w.at).min() {
                consider((w, 0, c.seq, id.clone()));
            }
            if let Some(exit) = c.exit_at {
                consider((exit, 1, c.seq, id.clone()));
            }
        }
        best
    }

    fn run_until(&mut self, target: Timestamp) {
        while let Some((at, kind, _, id)) = self.next_due(target) {
            self.now = self.now.max(at);
            if kind == 0 {
                let c = self.containers.get_mut(&id).expect("due container exists");
                let idx = c
                    .writes
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, w)| w.at)
                    .map(|(i, _)| i)
                    .expect("due write exists");
                let w = c.writes.remove(idx);
                self.write_file(&id, &w.container_path, &w.bytes);
            } else {
                let c = self.containers.get_mut(&id).expect("due container exists");
                // Whatever was scheduled for exit time lands before the exit.
                let writes = std::mem::take(&mut c.writes);
                for w in writes {
                    self.write_file(&id, &w.container_path, &w.bytes);
                }
                let c = self.containers.get_mut(&id).expect("due container exists");
                let code = c.plan.exit_code;
                c.status = ContainerStatus::Exited { code };
                c.exit_at = None;
                let name = c.handle.name.clone();
                let game = c.cfg.labels.get(LABEL_GAME).cloned();
                self.push(&name, game, SimEventKind::Exited(code));
            }
        }
        self.now = self.now.max(target);
    }
}

struct SimClock(SimRuntime);

impl Clock for SimClock {
    fn now(&self) -> Timestamp {
        self.0.now()
    }

    fn sleep(&self, d: Duration) {
        self.0.advance(d);
    }
}

impl ContainerRuntime for SimRuntime {
    fn ensure_network(&self, name: &str) -> Result<String, RuntimeError> {
        let mut st = self.lock();
        st.check_available()?;
        if let Some(id) = st.networks.get(name) {
            return Ok(id.clone());
        }
        let id = format!("simnet-{:016x}", fnv1a(&[name.as_bytes(), &st.next_seq.to_le_bytes()]));
        st.next_seq += 1;
        st.networks.insert(name.to_string(), id.clone());
        st.push(name, None, SimEventKind::NetworkCreated);
        Ok(id)
    }

    fn remove_network(&self, name: &str) -> Result<(), RuntimeError> {
        let mut st = self.lock();
        st.check_available()?;
        if st.networks.remove(name).is_some() {
            st.push(name, None, SimEventKind::NetworkRemoved);
        }
        Ok(())
    }

    fn list_networks(&self, prefix: &str) -> Result<Vec<String>, RuntimeError> {
        let st = self.lock();
        st.check_available()?;
        Ok(st.networks.keys().filter(|n| n.starts_with(prefix)).cloned().collect())
    }

    fn create(&self, cfg: &ContainerConfig) -> Result<ContainerHandle, RuntimeError> {
        let mut st = self.lock();
        st.check_available()?;
        cfg.validate()?;
        let game = cfg.labels.get(LABEL_GAME).cloned();
        if st.containers.values().any(|c| c.handle.name == cfg.name) {
            return Err(RuntimeError::NameConflict(cfg.name.clone()));
        }
        if !st.images.contains(&cfg.image.to_string()) {
            return Err(RuntimeError::ImageMissing(cfg.image.to_string()));
        }
        let plan = match st.script.plans.get(&cfg.name) {
            Some(p) => p.clone(),
            None => st.autoplay_plan(cfg),
        };
        if plan.fail_create {
            st.push(&cfg.name, game, SimEventKind::CreateFailed);
            return Err(RuntimeError::Unavailable(format!("injected create failure for {}", cfg.name)));
        }
        let seq = st.next_seq;
        st.next_seq += 1;
        let handle = ContainerHandle {
            id: format!("sim{seq:08}"),
            name: cfg.name.clone(),
        };
        st.containers.insert(
            handle.id.clone(),
            SimContainer {
                seq,
                handle: handle.clone(),
                cfg: cfg.clone(),
                status: ContainerStatus::Created,
                plan,
                exit_at: None,
                writes: Vec::new(),
            },
        );
        st.history.insert(cfg.name.clone(), cfg.clone());
        st.push(&cfg.name, game, SimEventKind::Created);
        Ok(handle)
    }

    fn start(&self, h: &ContainerHandle) -> Result<(), RuntimeError> {
        let mut st = self.lock();
        st.check_available()?;
        let now = st.now;
        let c = st.by_handle(h).ok_or_else(|| RuntimeError::NotFound(h.name.clone()))?;
        match c.status {
            ContainerStatus::Running { .. } => return Err(RuntimeError::AlreadyRunning(h.name.clone())),
            ContainerStatus::Exited { .. } | ContainerStatus::NotFound => {
                return Err(RuntimeError::Api {
                    status: 409,
                    message: format!("{} has already exited", h.name),
                })
            }
            ContainerStatus::Created => {}
        }
        let game = c.cfg.labels.get(LABEL_GAME).cloned();
        if c.plan.fail_start {
            st.push(&h.name, game, SimEventKind::StartHung);
            return Ok(());
        }
        c.status = ContainerStatus::Running { since: now };
        c.exit_at = Some(now.plus(Duration::from_millis(secs_to_ms(c.plan.run_duration_s))));
        let exit_at = c.exit_at.expect("just set");
        c.writes = c
            .plan
            .files_to_write
            .iter()
            .map(|f| PendingWrite {
                at: match f.at_s {
                    Some(s) => now.plus(Duration::from_millis(secs_to_ms(s))).min(exit_at),
                    None => exit_at,
                },
                container_path: f.container_path.clone(),
                bytes: f.bytes.clone(),
            })
            .collect();
        st.push(&h.name, game, SimEventKind::Started);
        Ok(())
    }

    fn stop(&self, h: &ContainerHandle, _grace_s: u64) -> Result<(), RuntimeError> {
        let mut st = self.lock();
        st.check_available()?;
        let c = st.by_handle(h).ok_or_else(|| RuntimeError::NotFound(h.name.clone()))?;
        let code = match c.status {
            ContainerStatus::Running { .. } => KILLED_EXIT_CODE,
            ContainerStatus::Created => 0,
            ContainerStatus::Exited { .. } | ContainerStatus::NotFound => return Ok(()),
        };
        c.status = ContainerStatus::Exited { code };
        c.exit_at = None;
        c.writes.clear();
        let game = c.cfg.labels.get(LABEL_GAME).cloned();
        st.push(&h.name, game, SimEventKind::Stopped(code));
        Ok(())
    }

    fn remove(&self, h: &ContainerHandle) -> Result<(), RuntimeError> {
        let mut st = self.lock();
        st.check_available()?;
        let c = st.by_handle(h).ok_or_else(|| RuntimeError::NotFound(h.name.clone()))?;
        if c.status.is_running() {
            return Err(RuntimeError::StillRunning(h.name.clone()));
        }
        let game = c.cfg.labels.get(LABEL_GAME).cloned();
        st.containers.remove(&h.id);
        st.push(&h.name, game, SimEventKind::Removed);
        Ok(())
    }

    fn inspect(&self, h: &ContainerHandle) -> Result<ContainerStatus, RuntimeError> {
        let mut st = self.lock();
        st.check_available()?;
        Ok(st.by_handle(h).map(|c| c.status).unwrap_or(ContainerStatus::NotFound))
    }

    fn list_by_label(&self, key: &str, value: Option<&str>) -> Result<Vec<ContainerHandle>, RuntimeError> {
        let st = self.lock();
        st.check_available()?;
        let mut found: Vec<&SimContainer> = st
            .containers
            .values()
            .filter(|c| match (c.cfg.labels.get(key), value) {
                (Some(v), Some(want)) => v == want,
                (Some(_), None) => true,
                (None, _) => false,
            })
            .collect();
        found.sort_by_key(|c| c.seq);
        Ok(found.into_iter().map(|c| c.handle.clone()).collect())
    }

    fn clock(&self) -> Arc<dyn Clock> {
        Arc::new(SimClock(self.clone()))
    }
}
