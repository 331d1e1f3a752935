//! Runs many matches against one runtime under a concurrency cap and a CPU
//! budget.
//!
//! A single thread drives every active match: admit what fits, step each
//! match once, sleep one poll interval on the runtime's clock, repeat.
//! Admission walks the queue in order and skips matches that do not fit
//! the remaining budget. Crashed matches are retried under a new name at
//! the front of the queue; timeouts are final.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::config::{
    validate_game_name, ConfigError, Cpus, MatchSpec, MatchTemplate, PlanFile, PlayerSlot, RosterEntry,
};
use crate::lifecycle::{LifecycleConfig, MatchHandle, MatchState, PortAllocator, StateKind};
use crate::results::GameResult;
use crate::runtime::ContainerRuntime;
use crate::volumes::VolumeLayout;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentPlan {
    pub matches: Vec<MatchSpec>,
    pub max_concurrent: usize,
    pub cpu_budget: Cpus,
    pub retry_crashed: u32,
    pub seed: u64,
}

impl DeploymentPlan {
    pub fn new(matches: Vec<MatchSpec>, max_concurrent: usize, cpu_budget: Cpus) -> Self {
        DeploymentPlan {
            matches,
            max_concurrent,
            cpu_budget,
            retry_crashed: 0,
            seed: 0,
        }
    }

    /// Explicit matches first, then the expanded round robin.
    pub fn from_file(file: &PlanFile) -> Self {
        let mut matches = file.matches.clone();
        if let Some(rr) = &file.round_robin {
            matches.extend(plan_round_robin(&rr.bots, &rr.maps, rr.repeats, &file.template));
        }
        DeploymentPlan {
            matches,
            max_concurrent: file.max_concurrent,
            cpu_budget: file.cpu_budget,
            retry_crashed: file.retry_crashed,
            seed: file.seed,
        }
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.max_concurrent == 0 {
            return Err(SchedulerError::Plan("max_concurrent must be ≥1".into()));
        }
        if self.cpu_budget.nanos() == 0 {
            return Err(SchedulerError::Plan("cpu_budget must be > 0".into()));
        }
        let mut seen = BTreeSet::new();
        for m in &self.matches {
            m.validate()?;
            if !seen.insert(m.game_name.as_str()) {
                return Err(SchedulerError::Plan(format!("duplicate game_name {:?}", m.game_name)));
            }
        }
        Ok(())
    }
}

/// Every pair of distinct bots on every map, `repeats` times over.
///
/// Game names are `rr_<i>_<j>_<map>_<r>` with roster indices `i < j`, the
/// map index and the repeat index; the lower index hosts.
pub fn plan_round_robin(
    bots: &[RosterEntry],
    maps: &[String],
    repeats: u32,
    template: &MatchTemplate,
) -> Vec<MatchSpec> {
    let seat = |slot: usize, b: &RosterEntry| PlayerSlot {
        slot,
        bot_name: b.bot_name.clone(),
        race: b.race,
        bot_file: b.bot_file.clone(),
    };
    let mut out = Vec::new();
    for i in 0..bots.len() {
        for j in i + 1..bots.len() {
            for (m, map) in maps.iter().enumerate() {
                for r in 0..repeats {
                    out.push(MatchSpec {
                        game_name: format!("rr_{i}_{j}_{m}_{r}"),
                        map: map.clone(),
                        players: vec![seat(0, &bots[i]), seat(1, &bots[j])],
                        headful: template.headful,
                        timeout_s: template.timeout_s,
                        limits: template.limits,
                    });
                }
            }
        }
    }
    out
}

pub fn retry_name(game_name: &str, attempt: u32) -> String {
    format!("{game_name}_retry{attempt}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEntry {
    pub game_name: String,
    /// Name of the last attempt; differs from `game_name` after retries.
    pub final_game_name: String,
    pub attempts: u32,
    pub state: StateKind,
    pub result: Option<GameResult>,
    pub bots: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Record {
    pub wins: u32,
    pub losses: u32,
    /// Draws, timeouts and games someone else won.
    pub other: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeploymentReport {
    /// One entry per planned match, in plan order.
    pub entries: Vec<ReportEntry>,
    /// `win_matrix[a][b]`: how `a` fared in games that also seated `b`.
    pub win_matrix: BTreeMap<String, BTreeMap<String, Record>>,
    pub wall_seconds: f64,
    pub peak_concurrent: usize,
    pub peak_cpus: Cpus,
}

impl DeploymentReport {
    pub fn record(&self, bot: &str, opponent: &str) -> Record {
        self.win_matrix
            .get(bot)
            .and_then(|row| row.get(opponent))
            .copied()
            .unwrap_or_default()
    }

    pub fn count(&self, state: StateKind) -> usize {
        self.entries.iter().filter(|e| e.state == state).count()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn results(&self) -> Vec<GameResult> {
        self.entries.iter().filter_map(|e| e.result.clone()).collect()
    }
}

fn win_matrix(entries: &[ReportEntry]) -> BTreeMap<String, BTreeMap<String, Record>> {
    let mut m: BTreeMap<String, BTreeMap<String, Record>> = BTreeMap::new();
    for e in entries {
        let Some(result) = &e.result else { continue };
        let winner = result.winner_slot;
        for (a, bot_a) in e.bots.iter().enumerate() {
            for (b, bot_b) in e.bots.iter().enumerate() {
                if a == b {
                    continue;
                }
                let rec = m.entry(bot_a.clone()).or_default().entry(bot_b.clone()).or_default();
                match winner {
                    Some(w) if w == a => rec.wins += 1,
                    Some(w) if w == b => rec.losses += 1,
                    _ => rec.other += 1,
                }
            }
        }
    }
    m
}

struct Job {
    index: usize,
    spec: MatchSpec,
    attempt: u32,
}

struct Active {
    job: Job,
    handle: MatchHandle,
    cost: Cpus,
}

/// Runs `plan` to completion and reports every match.
pub fn run_plan(
    plan: &DeploymentPlan,
    rt: &dyn ContainerRuntime,
    layout: &VolumeLayout,
    ports: &mut PortAllocator,
    config: &LifecycleConfig,
) -> Result<DeploymentReport, SchedulerError> {
    plan.validate()?;
    let clock = rt.clock();
    let started = clock.now();
    let mut queue: VecDeque<Job> = plan
        .matches
        .iter()
        .enumerate()
        .map(|(index, spec)| Job {
            index,
            spec: spec.clone(),
            attempt: 1,
        })
        .collect();
    let mut done: Vec<Option<ReportEntry>> = vec![None; plan.matches.len()];
    let mut active: Vec<Active> = Vec::new();
    let mut used = Cpus::default();
    let mut peak_concurrent = 0;
    let mut peak_cpus = Cpus::default();

    let finish = |done: &mut Vec<Option<ReportEntry>>, job: &Job, state: &MatchState| {
        let original = &plan.matches[job.index];
        let reason = match state {
            MatchState::Aborted { reason } => Some(reason.clone()),
            _ => None,
        };
        done[job.index] = Some(ReportEntry {
            game_name: original.game_name.clone(),
            final_game_name: job.spec.game_name.clone(),
            attempts: job.attempt,
            state: state.kind(),
            result: state.result().cloned(),
            bots: original.bot_names(),
            reason,
        });
    };

    loop {
        let mut i = 0;
        while i < queue.len() && active.len() < plan.max_concurrent {
            let cost = queue[i].spec.cost();
            if cost > plan.cpu_budget {
                let job = queue.remove(i).expect("index in range");
                let reason = format!("needs {} CPUs, budget is {}", cost.as_f64(), plan.cpu_budget.as_f64());
                log::warn!("{}: {reason}", job.spec.game_name);
                finish(&mut done, &job, &MatchState::Aborted { reason });
                continue;
            }
            if used + cost > plan.cpu_budget {
                i += 1;
                continue;
            }
            let job = queue.remove(i).expect("index in range");
            let mut handle = MatchHandle::new(job.spec.clone(), layout.clone(), config.clone());
            match handle.begin(rt, ports) {
                Ok(()) => {
                    log::info!("{}: admitted ({} CPUs)", job.spec.game_name, cost.as_f64());
                    used = used + cost;
                    active.push(Active { job, handle, cost });
                }
                Err(e) => {
                    log::warn!("{}: {e}", job.spec.game_name);
                    finish(&mut done, &job, handle.state());
                }
            }
        }
        peak_concurrent = peak_concurrent.max(active.len());
        peak_cpus = peak_cpus.max(used);

        if active.is_empty() {
            if queue.is_empty() {
                break;
            }
            // Nothing running and nothing admissible cannot happen: every
            // queued match fits an empty budget.
            unreachable!("queued matches but none admissible");
        }

        clock.sleep(config.poll_interval);

        let mut still = Vec::with_capacity(active.len());
        let mut retries = Vec::new();
        for mut a in active.drain(..) {
            let _ = a.handle.step(rt);
            let state = a.handle.state().clone();
            if !state.is_terminal() {
                still.push(a);
                continue;
            }
            used = used.saturating_sub(a.cost);
            if let Some(p) = a.handle.vnc_ports.take() {
                ports.release(&p);
            }
            let original = &plan.matches[a.job.index].game_name;
            let next_name = retry_name(original, a.job.attempt);
            let can_retry = matches!(state, MatchState::Crashed { .. })
                && a.job.attempt <= plan.retry_crashed
                && validate_game_name(&next_name).is_ok();
            if can_retry {
                log::info!("{}: crashed, retrying as {next_name}", a.job.spec.game_name);
                let mut spec = a.job.spec.clone();
                spec.game_name = next_name;
                retries.push(Job {
                    index: a.job.index,
                    spec,
                    attempt: a.job.attempt + 1,
                });
            } else {
                log::info!("{}: {}", a.job.spec.game_name, state.kind());
                finish(&mut done, &a.job, &state);
            }
        }
        active = still;
        for job in retries.into_iter().rev() {
            queue.push_front(job);
        }
    }

    let entries: Vec<ReportEntry> = done.into_iter().map(|e| e.expect("every match reported")).collect();
    Ok(DeploymentReport {
        win_matrix: win_matrix(&entries),
        entries,
        wall_seconds: clock.now().since(started).as_secs_f64(),
        peak_concurrent,
        peak_cpus,
    })
}

/// Fixed-width win/loss table, one row and column per bot, sorted by name.
/// Cells read `wins-losses-other`.
pub fn summarize(report: &DeploymentReport) -> String {
    let mut bots: BTreeSet<&str> = BTreeSet::new();
    for e in &report.entries {
        bots.extend(e.bots.iter().map(String::as_str));
    }
    let bots: Vec<&str> = bots.into_iter().collect();
    let cell = |a: &str, b: &str| {
        if a == b {
            "-".to_string()
        } else {
            let r = report.record(a, b);
            format!("{}-{}-{}", r.wins, r.losses, r.other)
        }
    };
    let mut width = bots.iter().map(|b| b.chars().count()).max().unwrap_or(0).max(3);
    for a in &bots {
        for b in &bots {
            width = width.max(cell(a, b).len());
        }
    }
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "bot");
    for b in &bots {
        let _ = write!(out, "  {b:>width$}");
    }
    out.push('\n');
    for a in &bots {
        let _ = write!(out, "{a:<width$}");
        for b in &bots {
            let _ = write!(out, "  {:>width$}", cell(a, b));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ResourceLimits, MatchTemplate};
    use crate::fixtures::{roster, spec_for, stub_host};
    use crate::lifecycle::container_name;
    use crate::runtime::{ContainerPlan, SimEventKind, SimRuntime, SimScript};
    use tempfile::TempDir;

    const MAP: &str = "(2)Benzene.scx";

    #[test]
    fn round_robin_sizes() {
        let t = MatchTemplate::default();
        let maps = vec![MAP.to_string()];
        assert_eq!(plan_round_robin(&roster(&["A", "B", "C"]), &maps, 1, &t).len(), 3);
        assert!(plan_round_robin(&roster(&["A"]), &maps, 3, &t).is_empty());
        assert!(plan_round_robin(&roster(&["A", "B"]), &maps, 0, &t).is_empty());
    }

    #[test]
    fn round_robin_covers_every_pair_map_and_repeat() {
        let bots = roster(&["A", "B", "C", "D"]);
        let maps = vec!["m1.scx".to_string(), "m2.scm".to_string()];
        let specs = plan_round_robin(&bots, &maps, 2, &MatchTemplate::default());
        assert_eq!(specs.len(), 24);

        // Oracle: every 2-element subset of the roster by bitmask.
        let mut expected = BTreeMap::new();
        for mask in 0u32..16 {
            if mask.count_ones() != 2 {
                continue;
            }
            let pair: Vec<String> = (0..4).filter(|i| mask & (1 << i) != 0).map(|i| bots[i].bot_name.clone()).collect();
            for map in &maps {
                *expected.entry((pair.clone(), map.clone())).or_insert(0) += 2;
            }
        }
        let mut actual = BTreeMap::new();
        let mut names = BTreeSet::new();
        for s in &specs {
            s.validate().unwrap();
            assert!(names.insert(s.game_name.clone()));
            assert_ne!(s.players[0].bot_name, s.players[1].bot_name);
            let mut pair = s.bot_names();
            pair.sort();
            *actual.entry((pair, s.map.clone())).or_insert(0) += 1;
        }
        assert_eq!(actual, expected);
        assert_eq!(specs[0].game_name, "rr_0_1_0_0");
        assert_eq!(specs[1].game_name, "rr_0_1_0_1");
        assert_eq!(specs[2].game_name, "rr_0_1_1_0");
    }

    struct Rig {
        _dir: TempDir,
        layout: VolumeLayout,
    }

    fn rig(bots: &[&str]) -> Rig {
        let dir = TempDir::new().unwrap();
        let layout = stub_host(dir.path(), &[MAP], &roster(bots)).unwrap();
        Rig { _dir: dir, layout }
    }

    fn pairs(n: usize, bots: &[&str]) -> Vec<MatchSpec> {
        let r = roster(bots);
        (0..n)
            .map(|i| spec_for(&format!("m{i}"), MAP, &r[..2], &MatchTemplate::default()))
            .collect()
    }

    /// Highest number of games with a live container at once, replayed from
    /// the runtime's event trace.
    fn peak_live_games(rt: &SimRuntime) -> usize {
        let mut live: BTreeMap<String, usize> = BTreeMap::new();
        let mut peak = 0;
        for e in rt.events() {
            let Some(game) = e.game else { continue };
            match e.kind {
                SimEventKind::Created => *live.entry(game).or_default() += 1,
                SimEventKind::Removed => {
                    let n = live.get_mut(&game).unwrap();
                    *n -= 1;
                    if *n == 0 {
                        live.remove(&game);
                    }
                }
                _ => {}
            }
            peak = peak.max(live.len());
        }
        peak
    }

    fn run(plan: &DeploymentPlan, rt: &SimRuntime, layout: &VolumeLayout) -> DeploymentReport {
        let mut ports = PortAllocator::in_memory(5900);
        run_plan(plan, rt, layout, &mut ports, &LifecycleConfig::default()).unwrap()
    }

    #[test]
    fn budget_binds_before_concurrency_cap() {
        let rig = rig(&["A", "B"]);
        let rt = SimRuntime::with_seed(11);
        let plan = DeploymentPlan::new(pairs(6, &["A", "B"]), 8, Cpus::whole(4));
        let report = run(&plan, &rt, &rig.layout);
        assert_eq!(report.entries.len(), 6);
        assert_eq!(report.count(StateKind::Finished), 6);
        assert_eq!(report.peak_concurrent, 2);
        assert_eq!(report.peak_cpus, Cpus::whole(4));
        assert_eq!(peak_live_games(&rt), 2);
        assert!(rt.list_by_label(crate::runtime::LABEL_GAME, None).unwrap().is_empty());
    }

    #[test]
    fn concurrency_cap_binds_before_budget() {
        let rig = rig(&["A", "B"]);
        let rt = SimRuntime::with_seed(12);
        let plan = DeploymentPlan::new(pairs(5, &["A", "B"]), 1, Cpus::whole(100));
        let report = run(&plan, &rt, &rig.layout);
        assert_eq!(report.peak_concurrent, 1);
        assert_eq!(peak_live_games(&rt), 1);
    }

    #[test]
    fn crashed_match_is_retried_until_it_succeeds() {
        let rig = rig(&["A", "B"]);
        let crash = ContainerPlan {
            run_duration_s: 20.0,
            exit_code: 139,
            ..ContainerPlan::default()
        };
        let script = SimScript::new(3)
            .with_plan(container_name("m0", 1), crash.clone())
            .with_plan(container_name(&retry_name("m0", 1), 1), crash);
        let rt = SimRuntime::new(script);
        let mut plan = DeploymentPlan::new(pairs(2, &["A", "B"]), 1, Cpus::whole(2));
        plan.retry_crashed = 2;
        let report = run(&plan, &rt, &rig.layout);
        let e = &report.entries[0];
        assert_eq!(e.game_name, "m0");
        assert_eq!(e.final_game_name, "m0_retry2");
        assert_eq!(e.attempts, 3);
        assert_eq!(e.state, StateKind::Finished);
        assert_eq!(report.entries[1].attempts, 1);

        // Retries jump the queue: m1 is only created after the last retry.
        let created: Vec<String> = rt
            .events()
            .into_iter()
            .filter(|e| e.kind == SimEventKind::Created && e.subject.ends_with("_0"))
            .map(|e| e.game.unwrap())
            .collect();
        assert_eq!(created, ["m0", "m0_retry1", "m0_retry2", "m1"]);
    }

    #[test]
    fn retries_are_bounded() {
        let rig = rig(&["A", "B"]);
        let crash = ContainerPlan {
            run_duration_s: 20.0,
            exit_code: 1,
            ..ContainerPlan::default()
        };
        let mut script = SimScript::new(0).with_plan(container_name("m0", 0), crash.clone());
        for k in 1..=3 {
            script = script.with_plan(container_name(&retry_name("m0", k), 0), crash.clone());
        }
        let rt = SimRuntime::new(script);
        let mut plan = DeploymentPlan::new(pairs(1, &["A", "B"]), 1, Cpus::whole(2));
        plan.retry_crashed = 1;
        let report = run(&plan, &rt, &rig.layout);
        assert_eq!(report.entries[0].attempts, 2);
        assert_eq!(report.entries[0].state, StateKind::Crashed);
    }

    #[test]
    fn timeouts_are_not_retried() {
        let rig = rig(&["A", "B"]);
        let rt = SimRuntime::with_seed(0);
        let mut specs = pairs(1, &["A", "B"]);
        specs[0].timeout_s = 60;
        let mut plan = DeploymentPlan::new(specs, 1, Cpus::whole(2));
        plan.retry_crashed = 5;
        let report = run(&plan, &rt, &rig.layout);
        assert_eq!(report.entries[0].state, StateKind::TimedOut);
        assert_eq!(report.entries[0].attempts, 1);
    }

    #[test]
    fn oversized_match_is_rejected_and_the_rest_run() {
        let rig = rig(&["A", "B"]);
        let rt = SimRuntime::with_seed(0);
        let mut specs = pairs(3, &["A", "B"]);
        specs[1].limits = ResourceLimits {
            cpus: Cpus::whole(3),
            ..specs[1].limits
        };
        let plan = DeploymentPlan::new(specs, 4, Cpus::whole(4));
        let report = run(&plan, &rt, &rig.layout);
        assert_eq!(report.entries[1].state, StateKind::Aborted);
        assert!(report.entries[1].reason.as_deref().unwrap().contains("budget"));
        assert_eq!(report.count(StateKind::Finished), 2);
        assert!(rt.config_of("arena_m1_0").is_none());
    }

    #[test]
    fn invalid_plans_are_refused() {
        let rig = rig(&["A", "B"]);
        let rt = SimRuntime::with_seed(0);
        let mut ports = PortAllocator::in_memory(5900);
        let cfg = LifecycleConfig::default();
        let mut dup = pairs(2, &["A", "B"]);
        dup[1].game_name = dup[0].game_name.clone();
        for plan in [
            DeploymentPlan::new(dup, 1, Cpus::whole(2)),
            DeploymentPlan::new(pairs(1, &["A", "B"]), 0, Cpus::whole(2)),
            DeploymentPlan::new(pairs(1, &["A", "B"]), 1, Cpus::from_nanos(0)),
        ] {
            assert!(matches!(
                run_plan(&plan, &rt, &rig.layout, &mut ports, &cfg),
                Err(SchedulerError::Plan(_))
            ));
        }
    }

    #[test]
    fn reports_are_reproducible() {
        let rig = rig(&["A", "B", "C"]);
        let specs = plan_round_robin(&roster(&["A", "B", "C"]), &[MAP.to_string()], 2, &MatchTemplate::default());
        let plan = DeploymentPlan::new(specs, 3, Cpus::whole(4));
        let a = run(&plan, &SimRuntime::with_seed(42), &rig.layout).to_json();
        let b = run(&plan, &SimRuntime::with_seed(42), &rig.layout).to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn win_matrix_and_summary() {
        let rig = rig(&["A", "B", "C"]);
        let specs = plan_round_robin(&roster(&["A", "B", "C"]), &[MAP.to_string()], 3, &MatchTemplate::default());
        let plan = DeploymentPlan::new(specs, 4, Cpus::whole(8));
        let report = run(&plan, &SimRuntime::with_seed(5), &rig.layout);
        for a in ["A", "B", "C"] {
            for b in ["A", "B", "C"] {
                if a == b {
                    continue;
                }
                let (ab, ba) = (report.record(a, b), report.record(b, a));
                assert_eq!((ab.wins, ab.losses, ab.other), (ba.losses, ba.wins, ba.other));
                assert_eq!(ab.wins + ab.losses + ab.other, 3);
            }
        }
        let table = summarize(&report);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("bot"));
        assert!(lines[1].starts_with('A') && lines[2].starts_with('B') && lines[3].starts_with('C'));
        let r = report.record("A", "B");
        assert!(lines[1].contains(&format!("{}-{}-{}", r.wins, r.losses, r.other)));
    }

    #[test]
    fn empty_summary_is_just_the_header() {
        let report = DeploymentReport {
            entries: Vec::new(),
            win_matrix: BTreeMap::new(),
            wall_seconds: 0.0,
            peak_concurrent: 0,
            peak_cpus: Cpus::default(),
        };
        assert_eq!(summarize(&report), "bot\n");
    }
}
