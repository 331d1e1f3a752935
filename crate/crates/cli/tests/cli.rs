use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clap::Parser;
use sc_arena::config::{BotType, MatchTemplate, Race};
use sc_arena::fixtures::{roster, spec_for, stub_host};
use sc_arena::lifecycle::{launch_match, LifecycleConfig, PortAllocator};
use sc_arena::registry::fake::{FakeBot, FakeRegistry};
use sc_arena::runtime::docker::stub::StubDaemon;
use sc_arena::runtime::{ContainerRuntime, DockerRuntime, SimRuntime};
use sc_arena_cli::{run, Cli};
use tempfile::TempDir;

fn arena(base: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arena"))
        .arg("--base-dir")
        .arg(base)
        .args(args)
        .env_remove("ARENA_REGISTRY_URL")
        .env_remove("ARENA_BASE_DIR")
        // Nothing listens here; any daemon access fails loudly.
        .env("ARENA_DOCKER_HOST", "tcp://127.0.0.1:1")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn base_with_map() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::create_dir_all(dir.path().join("maps")).unwrap();
    fs::write(dir.path().join("maps/m.scx"), b"map").unwrap();
    dir
}

#[test]
fn sim_play_prints_the_winner() {
    let base = base_with_map();
    let o = arena(base.path(), &["--runtime", "sim", "play", "--bot", "A", "--bot", "B", "--map", "m.scx"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains(": Finished"), "{text}");
    let winner = text.lines().find(|l| l.starts_with("winner: slot ")).unwrap();
    assert!(winner.ends_with("(A)") || winner.ends_with("(B)"), "{winner}");
    assert!(base.path().join("bots/A/A.dll").is_file());
}

#[test]
fn sim_play_json_is_machine_readable() {
    let base = base_with_map();
    let o = arena(
        base.path(),
        &["--runtime", "sim", "--json", "play", "--bot", "A", "--bot", "B", "--map", "m.scx", "--game-name", "j1"],
    );
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["game_name"], "j1");
    assert_eq!(v["state"], "Finished");
    assert_eq!(v["exit_code"], 0);
    assert!(v["result"]["winner_slot"].is_u64());
}

#[test]
fn one_bot_is_a_usage_error() {
    let base = base_with_map();
    let o = arena(base.path(), &["--runtime", "sim", "play", "--bot", "A", "--map", "m.scx"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least two"));
}

#[test]
fn bad_flags_exit_one_and_help_exits_zero() {
    let base = base_with_map();
    assert_eq!(arena(base.path(), &["--runtime", "sim", "--frobnicate"]).status.code(), Some(1));
    assert_eq!(arena(base.path(), &["play", "--bot"]).status.code(), Some(1));
    assert_eq!(arena(base.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_map_is_an_error() {
    let base = base_with_map();
    let o = arena(base.path(), &["--runtime", "sim", "play", "--bot", "A", "--bot", "B", "--map", "nope.scx"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.scx"));
}

#[test]
fn timed_out_match_exits_with_3() {
    let base = base_with_map();
    // Simulated games run at least 120 s.
    let o = arena(
        base.path(),
        &["--runtime", "sim", "play", "--bot", "A", "--bot", "B", "--map", "m.scx", "--timeout", "30"],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("TimedOut"));
}

#[test]
fn headful_play_prints_vnc_ports() {
    let base = base_with_map();
    let o = arena(
        base.path(),
        &["--runtime", "sim", "play", "--bot", "A", "--bot", "B", "--bot", "C", "--map", "m.scx", "--headful"],
    );
    assert_eq!(o.status.code(), Some(0));
    let vnc: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with("VNC:")).map(str::to_string).collect();
    assert_eq!(
        vnc,
        [
            "VNC: slot 0 → localhost:5900",
            "VNC: slot 1 → localhost:5901",
            "VNC: slot 2 → localhost:5902"
        ]
    );
    let headless = arena(base.path(), &["--runtime", "sim", "play", "--bot", "A", "--bot", "B", "--map", "m.scx"]);
    assert!(!stdout(&headless).contains("VNC:"));
}

#[test]
fn clean_on_empty_host_is_idempotent() {
    let base = base_with_map();
    for _ in 0..2 {
        let o = arena(base.path(), &["--runtime", "sim", "clean"]);
        assert_eq!(o.status.code(), Some(0));
        assert!(stdout(&o).starts_with("0 removed"), "{}", stdout(&o));
    }
}

fn run_in_process(rt: &dyn ContainerRuntime, args: &[&str]) -> (i32, String) {
    let cli = Cli::try_parse_from(std::iter::once("arena").chain(args.iter().copied())).unwrap();
    let mut out = Vec::new();
    let code = run(&cli, rt, &mut out).unwrap();
    (code, String::from_utf8(out).unwrap())
}

#[test]
fn status_lists_a_running_four_bot_match_and_clean_removes_it() {
    let dir = TempDir::new().unwrap();
    let bots = roster(&["A", "B", "C", "D"]);
    let layout = stub_host(dir.path(), &["m.scx"], &bots).unwrap();
    let rt = SimRuntime::with_seed(1);
    let spec = spec_for("four", "m.scx", &bots, &MatchTemplate::default());
    let mut ports = PortAllocator::in_memory(5900);
    launch_match(spec, &rt, layout, &mut ports, LifecycleConfig::default()).unwrap();

    let base = dir.path().to_str().unwrap();
    let (code, text) = run_in_process(&rt, &["--runtime", "sim", "--base-dir", base, "status"]);
    assert_eq!(code, 0);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "{text}");
    for (slot, row) in rows.iter().enumerate() {
        assert!(row.starts_with(&format!("arena_four_{slot}")), "{row}");
        assert!(row.contains("running"), "{row}");
    }

    let (_, json) = run_in_process(&rt, &["--runtime", "sim", "--base-dir", base, "--json", "status"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 4);

    let (code, text) = run_in_process(&rt, &["--runtime", "sim", "--base-dir", base, "clean"]);
    assert_eq!(code, 0);
    assert_eq!(text.trim(), "4 removed, 1 networks pruned");
    let (_, text) = run_in_process(&rt, &["--runtime", "sim", "--base-dir", base, "clean"]);
    assert!(text.starts_with("0 removed"));
    let (_, text) = run_in_process(&rt, &["--runtime", "sim", "--base-dir", base, "status"]);
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn status_and_clean_over_the_docker_api() {
    let daemon = StubDaemon::start(&["starcraft:game"]);
    let dir = TempDir::new().unwrap();
    let bots = roster(&["A", "B"]);
    let layout = stub_host(dir.path(), &["m.scx"], &bots).unwrap();
    let rt = DockerRuntime::new(&daemon.endpoint()).unwrap();
    let spec = spec_for("dk", "m.scx", &bots, &MatchTemplate::default());
    let mut h = sc_arena::lifecycle::MatchHandle::new(spec, layout, LifecycleConfig::default());
    h.begin(&rt, &mut PortAllocator::in_memory(5900)).unwrap();
    assert_eq!(daemon.container_names(), ["arena_dk_0"]);

    let o = Command::new(env!("CARGO_BIN_EXE_arena"))
        .args(["--base-dir", dir.path().to_str().unwrap(), "status"])
        .env("ARENA_DOCKER_HOST", daemon.endpoint())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2, "{text}");
    assert!(text.lines().nth(1).unwrap().contains("running"));

    let o = Command::new(env!("CARGO_BIN_EXE_arena"))
        .args(["--base-dir", dir.path().to_str().unwrap(), "clean"])
        .env("ARENA_DOCKER_HOST", daemon.endpoint())
        .output()
        .unwrap();
    assert_eq!(stdout(&o).trim(), "1 removed, 1 networks pruned");
    assert!(daemon.container_names().is_empty());
    assert!(daemon.network_names().is_empty());
}

#[test]
fn docker_runtime_reports_an_unreachable_daemon() {
    let base = base_with_map();
    let o = arena(base.path(), &["status"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unavailable"));
}

const PLAN: &str = r#"
max_concurrent = 3
cpu_budget = 4.0
seed = 9
timeout_s = 1200

[round_robin]
maps = ["m.scx"]
repeats = 2
[[round_robin.bots]]
bot_name = "A"
race = "Terran"
bot_file = "A.dll"
[[round_robin.bots]]
bot_name = "B"
race = "Zerg"
bot_file = "B.dll"
[[round_robin.bots]]
bot_name = "C"
race = "Protoss"
bot_file = "C.jar"
"#;

#[test]
fn sim_deploy_writes_reports_and_summary() {
    let base = base_with_map();
    let plan = base.path().join("league.toml");
    fs::write(&plan, PLAN).unwrap();
    let o = arena(base.path(), &["--runtime", "sim", "deploy", plan.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("bot"));
    assert!(lines[1].starts_with('A') && lines[2].starts_with('B') && lines[3].starts_with('C'));
    assert!(text.contains("6 matches"), "{text}");

    let dir = base.path().join("reports/league");
    let first = fs::read(dir.join("deployment.json")).unwrap();
    let csv = fs::read_to_string(dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(base.path().join("bots/C/C.jar").is_file());

    let o = arena(base.path(), &["--runtime", "sim", "deploy", plan.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(dir.join("deployment.json")).unwrap(), first);
}

fn registry() -> FakeRegistry {
    FakeRegistry::start(vec![
        FakeBot::new("Iron", Race::Terran, BotType::NativeClient, b"iron binary"),
        FakeBot::new("Locutus", Race::Protoss, BotType::BwapiModule, b"locutus binary"),
    ])
}

#[test]
fn bots_list_and_fetch_use_the_registry() {
    let reg = registry();
    let base = base_with_map();
    let url = reg.url();
    let o = arena(base.path(), &["--registry-url", &url, "bots", "list"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("Iron") && text.contains("Locutus"), "{text}");

    let o = arena(base.path(), &["--registry-url", &url, "bots", "fetch", "Iron"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(base.path().join("bots/Iron/Iron.exe")).unwrap(), b"iron binary");

    let o = arena(base.path(), &["--registry-url", &url, "bots", "fetch", "Nobody"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sim_runtime_stays_offline() {
    let reg = registry();
    let base = base_with_map();
    let url = reg.url();
    let o = arena(
        base.path(),
        &["--runtime", "sim", "--registry-url", &url, "play", "--bot", "Iron", "--bot", "Locutus", "--map", "m.scx"],
    );
    assert_eq!(o.status.code(), Some(0));
    let o = arena(base.path(), &["--runtime", "sim", "--registry-url", &url, "bots", "list"]);
    assert_eq!(o.status.code(), Some(0));
    let o = arena(base.path(), &["--runtime", "sim", "--registry-url", &url, "bots", "fetch", "Iron"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(reg.hits(), 0);
}

#[test]
fn cached_bots_are_used_in_sim_play() {
    let reg = registry();
    let base = base_with_map();
    let url = reg.url();
    assert_eq!(arena(base.path(), &["--registry-url", &url, "bots", "fetch", "Iron"]).status.code(), Some(0));
    let hits = reg.hits();
    let o = arena(
        base.path(),
        &["--runtime", "sim", "--json", "play", "--bot", "Iron", "--bot", "X", "--map", "m.scx"],
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(reg.hits(), hits);
    assert!(!base.path().join("bots/Iron/Iron.dll").exists());
    let o = arena(base.path(), &["--runtime", "sim", "bots", "list"]);
    assert!(stdout(&o).contains("Iron"));
}
