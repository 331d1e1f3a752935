//! The `arena` command line: play single matches, deploy plans, manage bots
//! and clean up containers.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sc_arena::config::{
    detect_bot_type, parse_match_spec, parse_plan_file, validate_cross, Cpus, MatchSpec, MatchTemplate, Race,
    ResourceLimits, RosterEntry, DEFAULT_MEMORY_MIB, DEFAULT_TIMEOUT_S,
};
use sc_arena::fixtures::{spec_for, stub_bot_file, STUB_BOT_BYTES};
use sc_arena::lifecycle::{
    await_completion, launch_match, network_name, LifecycleConfig, MatchState, PortAllocator, StateKind,
    VNC_BASE_PORT,
};
use sc_arena::registry::{cached_packages, fetch_bot, latest_cached, list_bots, BotMetadata};
use sc_arena::results::{write_report, ReportFormat};
use sc_arena::runtime::{ContainerRuntime, ContainerStatus, DockerRuntime, SimRuntime, LABEL_GAME};
use sc_arena::scheduler::{run_plan, summarize, DeploymentPlan};
use sc_arena::volumes::{install_bot_bytes, install_bot_files, VolumeLayout};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CRASHED: i32 = 2;
pub const EXIT_TIMED_OUT: i32 = 3;

const STOP_GRACE_S: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuntimeKind {
    Docker,
    Sim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

#[derive(Debug, Parser)]
#[command(name = "arena", version, about = "Run StarCraft: Brood War bot matches in containers")]
pub struct Cli {
    /// Root of maps, bots, caches and per-game write directories.
    #[arg(long, env = "ARENA_BASE_DIR", global = true)]
    pub base_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "docker", global = true)]
    pub runtime: RuntimeKind,
    /// Bot registry base URL.
    #[arg(long, env = "ARENA_REGISTRY_URL", global = true)]
    pub registry_url: Option<String>,
    #[arg(long, value_enum, default_value = "warn", global = true)]
    pub log_level: LogLevel,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    /// Seed for the simulated runtime; `deploy` defaults to the plan's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one match and wait for its result.
    Play(PlayArgs),
    /// Run every match of a plan file.
    Deploy(DeployArgs),
    /// Query the registry and manage installed bots.
    Bots {
        #[command(subcommand)]
        command: BotsCommand,
    },
    /// List match containers and their states.
    Status,
    /// Stop and remove all match containers and networks.
    Clean,
}

#[derive(Debug, Args)]
pub struct PlayArgs {
    /// Match spec file; replaces the inline flags.
    #[arg(long, conflicts_with_all = ["bots", "map"])]
    pub spec: Option<PathBuf>,
    /// Bot to seat, in slot order. The first one hosts.
    #[arg(long = "bot", value_name = "NAME")]
    pub bots: Vec<String>,
    /// Map path relative to the maps directory.
    #[arg(long)]
    pub map: Option<String>,
    #[arg(long)]
    pub headful: bool,
    #[arg(long)]
    pub game_name: Option<String>,
    /// Seconds before the match is called a timeout.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT_S)]
    pub timeout: u64,
    /// CPUs per container.
    #[arg(long, default_value_t = 1.0)]
    pub cpus: f64,
    /// MiB of memory per container.
    #[arg(long, default_value_t = DEFAULT_MEMORY_MIB)]
    pub memory: u64,
}

#[derive(Debug, Args)]
pub struct DeployArgs {
    pub plan: PathBuf,
    /// Directory for report files. Defaults to `<base>/reports/<plan name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum BotsCommand {
    /// Show registry contents (cached packages with `--runtime sim`).
    List,
    /// Download bots into the cache and install them.
    Fetch {
        #[arg(required = true)]
        names: Vec<String>,
    },
}

#[derive(Debug)]
pub struct CliError(pub String);

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CliError {}

fn err(e: impl std::fmt::Display) -> CliError {
    CliError(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

/// Exit status for a match that ended in `state`.
pub fn exit_code(state: StateKind) -> i32 {
    match state {
        StateKind::Finished => EXIT_OK,
        StateKind::Crashed => EXIT_CRASHED,
        StateKind::TimedOut => EXIT_TIMED_OUT,
        _ => EXIT_ERROR,
    }
}

fn default_base_dir() -> PathBuf {
    std::env::var_os("HOME")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
        .join(".arena")
}

pub struct Context<'a> {
    pub cli: &'a Cli,
    pub rt: &'a dyn ContainerRuntime,
    pub layout: VolumeLayout,
}

impl Context<'_> {
    fn sim(&self) -> bool {
        self.cli.runtime == RuntimeKind::Sim
    }

    fn cache_dir(&self) -> PathBuf {
        self.layout.base_dir().join("cache")
    }

    fn ports(&self) -> PortAllocator {
        if self.sim() {
            PortAllocator::in_memory(VNC_BASE_PORT)
        } else {
            PortAllocator::new(VNC_BASE_PORT)
        }
    }

    fn lifecycle_config(&self) -> LifecycleConfig {
        LifecycleConfig::default()
    }
}

/// `--seed` if given, else the seed of the plan being deployed, else 0.
fn sim_seed(cli: &Cli) -> u64 {
    if let Some(seed) = cli.seed {
        return seed;
    }
    match &cli.command {
        Command::Deploy(args) => fs::read_to_string(&args.plan)
            .ok()
            .and_then(|text| parse_plan_file(&text).ok())
            .map_or(0, |plan| plan.seed),
        _ => 0,
    }
}

/// Parses `args`, sets up logging and the runtime, runs the command and
/// returns the process exit code.
pub fn main_with(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_ERROR,
            };
        }
    };
    let level = match cli.log_level {
        LogLevel::Error => log::LevelFilter::Error,
        LogLevel::Warn => log::LevelFilter::Warn,
        LogLevel::Info => log::LevelFilter::Info,
        LogLevel::Debug => log::LevelFilter::Debug,
        LogLevel::Trace => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();

    let rt: Box<dyn ContainerRuntime> = match cli.runtime {
        RuntimeKind::Sim => Box::new(SimRuntime::with_seed(sim_seed(&cli))),
        RuntimeKind::Docker => match DockerRuntime::from_env() {
            Ok(rt) => Box::new(rt),
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_ERROR;
            }
        },
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(&cli, rt.as_ref(), &mut out) {
        Ok(code) => code,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

/// Runs an already parsed command against `rt`, writing to `out`.
pub fn run(cli: &Cli, rt: &dyn ContainerRuntime, out: &mut dyn Write) -> CliResult<i32> {
    let base = cli.base_dir.clone().unwrap_or_else(default_base_dir);
    fs::create_dir_all(&base).map_err(|e| CliError(format!("{}: {e}", base.display())))?;
    let layout = VolumeLayout::new(&base).map_err(err)?;
    for dir in layout.shared_dirs() {
        fs::create_dir_all(&dir).map_err(|e| CliError(format!("{}: {e}", dir.display())))?;
    }
    let ctx = Context { cli, rt, layout };
    match &cli.command {
        Command::Play(args) => cmd_play(&ctx, args, out),
        Command::Deploy(args) => cmd_deploy(&ctx, args, out),
        Command::Bots { command } => cmd_bots(&ctx, command, out),
        Command::Status => cmd_status(&ctx, out),
        Command::Clean => cmd_clean(&ctx, out),
    }
}

fn locally_installed(layout: &VolumeLayout, name: &str) -> Option<RosterEntry> {
    let dir = layout.bot_dir(name);
    let mut files: Vec<String> = fs::read_dir(&dir)
        .ok()?
        .flatten()
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|f| detect_bot_type(f).is_ok())
        .collect();
    files.sort();
    let preferred = files.iter().find(|f| f.rsplit_once('.').is_some_and(|(stem, _)| stem == name));
    let bot_file = preferred.or(files.first())?.clone();
    Some(RosterEntry {
        bot_name: name.to_string(),
        race: Race::Random,
        bot_file,
    })
}

/// Finds or obtains bots for a match. Lookup order: the download cache,
/// bots already in the bots directory, then the registry. The simulated
/// runtime never goes online and installs placeholder binaries instead.
struct BotResolver<'a> {
    ctx: &'a Context<'a>,
    listing: Option<Vec<BotMetadata>>,
}

impl<'a> BotResolver<'a> {
    fn new(ctx: &'a Context<'a>) -> Self {
        BotResolver { ctx, listing: None }
    }

    fn registry_url(&self) -> CliResult<&str> {
        self.ctx
            .cli
            .registry_url
            .as_deref()
            .ok_or_else(|| CliError("no registry configured (set --registry-url or ARENA_REGISTRY_URL)".into()))
    }

    fn lookup(&mut self, name: &str) -> CliResult<BotMetadata> {
        if self.listing.is_none() {
            let url = self.registry_url()?.to_string();
            self.listing = Some(list_bots(&url).map_err(err)?);
        }
        self.listing
            .as_ref()
            .and_then(|l| l.iter().find(|b| b.name == name).cloned())
            .ok_or_else(|| CliError(format!("bot {name:?} is not in the registry")))
    }

    fn from_cache(&self, name: &str) -> CliResult<Option<RosterEntry>> {
        let Some(pkg) = latest_cached(&self.ctx.cache_dir(), name).map_err(err)? else {
            return Ok(None);
        };
        if !pkg.verify().unwrap_or(false) {
            log::warn!("cached package of {name} failed verification, ignoring it");
            return Ok(None);
        }
        install_bot_files(&self.ctx.layout, &pkg).map_err(err)?;
        Ok(Some(RosterEntry::from(&pkg.meta)))
    }

    fn fetch(&mut self, name: &str) -> CliResult<RosterEntry> {
        let meta = self.lookup(name)?;
        let pkg = fetch_bot(&meta, &self.ctx.cache_dir()).map_err(err)?;
        install_bot_files(&self.ctx.layout, &pkg).map_err(err)?;
        Ok(RosterEntry::from(&pkg.meta))
    }

    fn resolve(&mut self, name: &str) -> CliResult<RosterEntry> {
        if let Some(entry) = self.from_cache(name)? {
            return Ok(entry);
        }
        if let Some(entry) = locally_installed(&self.ctx.layout, name) {
            return Ok(entry);
        }
        if self.ctx.sim() {
            let file = stub_bot_file(name);
            install_bot_bytes(&self.ctx.layout, name, &file, STUB_BOT_BYTES).map_err(err)?;
            return Ok(RosterEntry {
                bot_name: name.to_string(),
                race: Race::Random,
                bot_file: file,
            });
        }
        self.fetch(name)
    }

    /// Makes sure every player's binary is installed under its spec'd name.
    fn ensure_spec(&mut self, spec: &MatchSpec) -> CliResult<()> {
        let mut done = BTreeSet::new();
        for p in &spec.players {
            if !done.insert(p.bot_name.clone()) {
                continue;
            }
            if self.ctx.layout.bot_dir(&p.bot_name).join(&p.bot_file).is_file() {
                continue;
            }
            if self.ctx.sim() {
                if self.from_cache(&p.bot_name)?.is_some_and(|e| e.bot_file == p.bot_file) {
                    continue;
                }
                install_bot_bytes(&self.ctx.layout, &p.bot_name, &p.bot_file, STUB_BOT_BYTES).map_err(err)?;
                continue;
            }
            let entry = self.resolve(&p.bot_name)?;
            if entry.bot_file != p.bot_file {
                return Err(CliError(format!(
                    "bot {} is installed as {}, but the spec wants {}",
                    p.bot_name, entry.bot_file, p.bot_file
                )));
            }
        }
        Ok(())
    }
}

fn default_game_name() -> String {
    format!("play_{}", std::process::id())
}

fn build_play_spec(ctx: &Context, args: &PlayArgs) -> CliResult<MatchSpec> {
    if let Some(path) = &args.spec {
        let text = fs::read_to_string(path).map_err(|e| CliError(format!("{}: {e}", path.display())))?;
        let spec = parse_match_spec(&text).map_err(err)?;
        BotResolver::new(ctx).ensure_spec(&spec)?;
        return Ok(spec);
    }
    if args.bots.len() < 2 {
        return Err(CliError("play needs at least two --bot arguments".into()));
    }
    let map = args.map.clone().ok_or_else(|| CliError("--map is required".into()))?;
    let cpus = Cpus::from_f64(args.cpus).ok_or_else(|| CliError("--cpus must be > 0".into()))?;
    let template = MatchTemplate {
        headful: args.headful,
        timeout_s: args.timeout,
        limits: ResourceLimits {
            cpus,
            memory_mib: args.memory,
        },
    };
    let game_name = args.game_name.clone().unwrap_or_else(default_game_name);
    // Validate the shape before downloading anything.
    let placeholder: Vec<RosterEntry> = args
        .bots
        .iter()
        .map(|b| RosterEntry {
            bot_name: b.clone(),
            race: Race::Random,
            bot_file: format!("{b}.dll"),
        })
        .collect();
    spec_for(&game_name, &map, &placeholder, &template).validate().map_err(err)?;
    let mut resolver = BotResolver::new(ctx);
    let roster = args
        .bots
        .iter()
        .map(|b| resolver.resolve(b))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(spec_for(&game_name, &map, &roster, &template))
}

fn cmd_play(ctx: &Context, args: &PlayArgs, out: &mut dyn Write) -> CliResult<i32> {
    let spec = build_play_spec(ctx, args)?;
    spec.validate().map_err(err)?;
    validate_cross(&spec, &ctx.layout.available_maps().map_err(err)?).map_err(err)?;

    let mut ports = ctx.ports();
    let mut handle = launch_match(spec, ctx.rt, ctx.layout.clone(), &mut ports, ctx.lifecycle_config()).map_err(err)?;
    if let Some(vnc) = &handle.vnc_ports {
        for (slot, port) in vnc.iter().enumerate() {
            if ctx.cli.json {
                writeln!(out, "{}", json!({ "vnc": { "slot": slot, "host": "localhost", "port": port } })).map_err(err)?;
            } else {
                writeln!(out, "VNC: slot {slot} → localhost:{port}").map_err(err)?;
            }
        }
        out.flush().map_err(err)?;
    }
    let state = await_completion(&mut handle, ctx.rt);
    let code = exit_code(state.kind());
    if ctx.cli.json {
        let doc = json!({
            "game_name": handle.game_name(),
            "state": state.kind(),
            "exit_code": code,
            "result": state.result(),
            "reason": match &state { MatchState::Aborted { reason } => Some(reason.as_str()), _ => None },
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&doc).map_err(err)?).map_err(err)?;
        return Ok(code);
    }
    writeln!(out, "game {}: {}", handle.game_name(), state.kind()).map_err(err)?;
    match &state {
        MatchState::Aborted { reason } => writeln!(out, "reason: {reason}").map_err(err)?,
        other => {
            let result = other.result().expect("terminal non-aborted state carries a result");
            match (result.winner_slot, result.winner_bot()) {
                (Some(slot), Some(bot)) => writeln!(out, "winner: slot {slot} ({bot})"),
                (Some(slot), None) => writeln!(out, "winner: slot {slot}"),
                _ => writeln!(out, "winner: none ({})", result.outcome),
            }
            .map_err(err)?;
            if let MatchState::Crashed { slots, .. } = other {
                let list: Vec<String> = slots.iter().map(usize::to_string).collect();
                writeln!(out, "crashed slots: {}", list.join(", ")).map_err(err)?;
            }
            writeln!(out, "frames: {}  wall: {:.1}s", result.frames(), result.wall_seconds).map_err(err)?;
        }
    }
    Ok(code)
}

fn cmd_deploy(ctx: &Context, args: &DeployArgs, out: &mut dyn Write) -> CliResult<i32> {
    let text = fs::read_to_string(&args.plan).map_err(|e| CliError(format!("{}: {e}", args.plan.display())))?;
    let file = parse_plan_file(&text).map_err(err)?;
    let plan = DeploymentPlan::from_file(&file);
    plan.validate().map_err(err)?;

    let maps = ctx.layout.available_maps().map_err(err)?;
    let mut resolver = BotResolver::new(ctx);
    for spec in &plan.matches {
        validate_cross(spec, &maps).map_err(err)?;
        resolver.ensure_spec(spec)?;
    }

    let mut ports = ctx.ports();
    let report = run_plan(&plan, ctx.rt, &ctx.layout, &mut ports, &ctx.lifecycle_config()).map_err(err)?;

    let stem = args
        .plan
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "plan".into());
    let out_dir = args.out.clone().unwrap_or_else(|| ctx.layout.base_dir().join("reports").join(stem));
    fs::create_dir_all(&out_dir).map_err(|e| CliError(format!("{}: {e}", out_dir.display())))?;
    let results = report.results();
    write_report(&results, ReportFormat::Json, &out_dir.join("results.json")).map_err(err)?;
    write_report(&results, ReportFormat::Csv, &out_dir.join("results.csv")).map_err(err)?;
    let report_path = out_dir.join("deployment.json");
    fs::write(&report_path, report.to_json()).map_err(|e| CliError(format!("{}: {e}", report_path.display())))?;

    let all_terminal = report.entries.len() == plan.matches.len() && report.entries.iter().all(|e| e.state.is_terminal());
    if ctx.cli.json {
        let doc = json!({
            "matches": report.entries.len(),
            "finished": report.count(StateKind::Finished),
            "crashed": report.count(StateKind::Crashed),
            "timed_out": report.count(StateKind::TimedOut),
            "aborted": report.count(StateKind::Aborted),
            "report_dir": out_dir,
            "win_matrix": report.win_matrix,
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&doc).map_err(err)?).map_err(err)?;
    } else {
        write!(out, "{}", summarize(&report)).map_err(err)?;
        writeln!(
            out,
            "{} matches: {} finished, {} crashed, {} timed out, {} aborted",
            report.entries.len(),
            report.count(StateKind::Finished),
            report.count(StateKind::Crashed),
            report.count(StateKind::TimedOut),
            report.count(StateKind::Aborted),
        )
        .map_err(err)?;
        writeln!(out, "reports written to {}", out_dir.display()).map_err(err)?;
    }
    Ok(if all_terminal { EXIT_OK } else { EXIT_ERROR })
}

fn cmd_bots(ctx: &Context, command: &BotsCommand, out: &mut dyn Write) -> CliResult<i32> {
    match command {
        BotsCommand::List => {
            let bots: Vec<BotMetadata> = if ctx.sim() {
                cached_packages(&ctx.cache_dir()).map_err(err)?.into_iter().map(|p| p.meta).collect()
            } else {
                let url = BotResolver::new(ctx).registry_url()?.to_string();
                list_bots(&url).map_err(err)?
            };
            if ctx.cli.json {
                writeln!(out, "{}", serde_json::to_string_pretty(&bots).map_err(err)?).map_err(err)?;
            } else {
                let width = bots.iter().map(|b| b.name.chars().count()).max().unwrap_or(4).max(4);
                writeln!(out, "{:<width$}  {:<8}  {:<4}  sha256", "name", "race", "type").map_err(err)?;
                for b in &bots {
                    writeln!(
                        out,
                        "{:<width$}  {:<8}  {:<4}  {}",
                        b.name,
                        b.race.as_str(),
                        b.bot_type.extension(),
                        &b.sha256[..b.sha256.len().min(12)]
                    )
                    .map_err(err)?;
                }
            }
        }
        BotsCommand::Fetch { names } => {
            let mut resolver = BotResolver::new(ctx);
            let mut installed = Vec::new();
            for name in names {
                let entry = if ctx.sim() {
                    resolver
                        .from_cache(name)?
                        .ok_or_else(|| CliError(format!("bot {name:?} is not cached (the sim runtime stays offline)")))?
                } else {
                    resolver.fetch(name)?
                };
                let path = ctx.layout.bot_dir(&entry.bot_name).join(&entry.bot_file);
                installed.push((entry, path));
            }
            if ctx.cli.json {
                let list: Vec<_> = installed
                    .iter()
                    .map(|(e, p)| json!({ "bot_name": e.bot_name, "bot_file": e.bot_file, "path": p }))
                    .collect();
                writeln!(out, "{}", serde_json::to_string_pretty(&list).map_err(err)?).map_err(err)?;
            } else {
                for (e, p) in &installed {
                    writeln!(out, "installed {} -> {}", e.bot_name, p.display()).map_err(err)?;
                }
            }
        }
    }
    Ok(EXIT_OK)
}

/// `arena_<game>_<slot>` → `(game, slot)`.
fn split_container_name(name: &str) -> (String, String) {
    let stem = name.strip_prefix("arena_").unwrap_or(name);
    match stem.rsplit_once('_') {
        Some((game, slot)) if slot.parse::<usize>().is_ok() => (game.to_string(), slot.to_string()),
        _ => (stem.to_string(), String::new()),
    }
}

fn cmd_status(ctx: &Context, out: &mut dyn Write) -> CliResult<i32> {
    let mut rows = Vec::new();
    for h in ctx.rt.list_by_label(LABEL_GAME, None).map_err(err)? {
        let status = ctx.rt.inspect(&h).map_err(err)?;
        let (game, slot) = split_container_name(&h.name);
        let state = match status {
            ContainerStatus::Created => "created".to_string(),
            ContainerStatus::Running { .. } => "running".to_string(),
            ContainerStatus::Exited { code } => format!("exited({code})"),
            ContainerStatus::NotFound => continue,
        };
        rows.push((h.name, game, slot, state));
    }
    rows.sort();
    if ctx.cli.json {
        let list: Vec<_> = rows
            .iter()
            .map(|(name, game, slot, state)| json!({ "container": name, "game": game, "slot": slot, "state": state }))
            .collect();
        writeln!(out, "{}", serde_json::to_string_pretty(&list).map_err(err)?).map_err(err)?;
        return Ok(EXIT_OK);
    }
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("container".len());
    let g = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max("game".len());
    writeln!(out, "{:<w$}  {:<g$}  slot  state", "container", "game").map_err(err)?;
    for (name, game, slot, state) in &rows {
        writeln!(out, "{name:<w$}  {game:<g$}  {slot:<4}  {state}").map_err(err)?;
    }
    Ok(EXIT_OK)
}

fn cmd_clean(ctx: &Context, out: &mut dyn Write) -> CliResult<i32> {
    let mut removed = 0;
    let mut failures = Vec::new();
    for h in ctx.rt.list_by_label(LABEL_GAME, None).map_err(err)? {
        let _ = ctx.rt.stop(&h, STOP_GRACE_S);
        match ctx.rt.remove(&h) {
            Ok(()) => removed += 1,
            Err(e) => failures.push(format!("{}: {e}", h.name)),
        }
    }
    let mut pruned = 0;
    for net in ctx.rt.list_networks(&network_name("")).map_err(err)? {
        match ctx.rt.remove_network(&net) {
            Ok(()) => pruned += 1,
            Err(e) => failures.push(format!("{net}: {e}")),
        }
    }
    if ctx.cli.json {
        let doc = json!({ "removed": removed, "networks_pruned": pruned, "failures": failures });
        writeln!(out, "{}", serde_json::to_string_pretty(&doc).map_err(err)?).map_err(err)?;
    } else {
        writeln!(out, "{removed} removed, {pruned} networks pruned").map_err(err)?;
        for f in &failures {
            writeln!(out, "failed: {f}").map_err(err)?;
        }
    }
    Ok(if failures.is_empty() { EXIT_OK } else { EXIT_ERROR })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_cover_every_terminal_state() {
        assert_eq!(exit_code(StateKind::Finished), 0);
        assert_eq!(exit_code(StateKind::Crashed), 2);
        assert_eq!(exit_code(StateKind::TimedOut), 3);
        assert_eq!(exit_code(StateKind::Aborted), 1);
    }

    #[test]
    fn container_names_split() {
        assert_eq!(split_container_name("arena_rr_0_1_0_0_1"), ("rr_0_1_0_0".into(), "1".into()));
        assert_eq!(split_container_name("arena_g_0"), ("g".into(), "0".into()));
        assert_eq!(split_container_name("other"), ("other".into(), String::new()));
    }

    #[test]
    fn command_line_shape() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["arena", "--runtime", "sim", "play", "--bot", "A", "--bot", "B", "--map", "m.scx"])
            .unwrap();
        let Command::Play(p) = cli.command else { panic!() };
        assert_eq!(p.bots, ["A", "B"]);
        assert_eq!(p.timeout, DEFAULT_TIMEOUT_S);
    }
}
