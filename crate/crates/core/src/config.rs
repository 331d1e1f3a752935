//! Match specifications, bot classification and image resolution.
//!
//! A match spec is a TOML document, one match per file:
//!
//! ```toml
//! game_name = "ladder_01"
//! map = "sscai/(2)Benzene.scx"
//! headful = false        # optional, default false
//! timeout_s = 3600       # optional, default 3600
//!
//! [limits]               # optional
//! cpus = 1.0             # default 1.0, fraction of one CPU per container
//! memory_mib = 2048      # default 2048, at least 256
//!
//! [[players]]
//! bot_name = "Iron"
//! race = "Terran"
//! bot_file = "Iron.exe"
//!
//! [[players]]
//! bot_name = "Krasi0"
//! race = "Terran"
//! bot_file = "Krasi0.dll"
//! ```
//!
//! Player slots are assigned in file order starting at 0. An explicit
//! `slot` key is accepted but must match that order.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Component, Path};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMEOUT_S: u64 = 3600;
pub const DEFAULT_MEMORY_MIB: u64 = 2048;
pub const MIN_MEMORY_MIB: u64 = 256;
pub const MIN_PLAYERS: usize = 2;
pub const MAX_PLAYERS: usize = 8;

/// Image used by dll and exe bots.
pub const GAME_IMAGE: &str = "starcraft:game";
/// Image with the Java runtime layered on top of the game image.
pub const JAVA_IMAGE: &str = "starcraft:java";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("{field}: {message}")]
    Validation { field: String, message: String },
    #[error("unsupported bot type: {0}")]
    UnsupportedBotType(String),
    #[error("map not found: {0}")]
    MapNotFound(String),
}

impl ConfigError {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

fn identifier_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z0-9_-]{1,64}$").unwrap())
}

// Bot names from public registries contain spaces and dots; they become a
// single path component, so they may not start with a dot or contain a
// separator.
fn bot_name_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z0-9_][A-Za-z0-9_. -]{0,63}$").unwrap())
}

/// Checks a game name against `[A-Za-z0-9_-]{1,64}`.
pub fn validate_game_name(name: &str) -> Result<(), ConfigError> {
    if name.is_empty() {
        return Err(ConfigError::validation("game_name", "must not be empty"));
    }
    if name.chars().count() > 64 {
        return Err(ConfigError::validation("game_name", "longer than 64 characters"));
    }
    if !identifier_re().is_match(name) {
        return Err(ConfigError::validation("game_name", "illegal character"));
    }
    Ok(())
}

pub fn validate_bot_name(name: &str) -> Result<(), ConfigError> {
    if !bot_name_re().is_match(name) || name.ends_with(' ') {
        return Err(ConfigError::validation(
            "bot_name",
            format!("illegal bot name {name:?}"),
        ));
    }
    Ok(())
}

fn validate_bot_file(file: &str) -> Result<(), ConfigError> {
    if !bot_name_re().is_match(file) {
        return Err(ConfigError::validation(
            "bot_file",
            format!("illegal file name {file:?}"),
        ));
    }
    Ok(())
}

/// A map path must be relative and stay below the maps directory.
pub fn validate_map_path(map: &str) -> Result<(), ConfigError> {
    let path = Path::new(map);
    if map.is_empty() || map.contains(':') || map.contains('\\') {
        return Err(ConfigError::validation("map", "illegal map path"));
    }
    if !path
        .components()
        .all(|c| matches!(c, Component::Normal(_)))
    {
        return Err(ConfigError::validation(
            "map",
            "must be a relative path without '..'",
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Race {
    Terran,
    Protoss,
    Zerg,
    Random,
}

impl Race {
    pub fn as_str(self) -> &'static str {
        match self {
            Race::Terran => "Terran",
            Race::Protoss => "Protoss",
            Race::Zerg => "Zerg",
            Race::Random => "Random",
        }
    }
}

impl fmt::Display for Race {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Race {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Terran" => Ok(Race::Terran),
            "Protoss" => Ok(Race::Protoss),
            "Zerg" => Ok(Race::Zerg),
            "Random" => Ok(Race::Random),
            other => Err(ConfigError::validation("race", format!("unknown race {other:?}"))),
        }
    }
}

/// How a bot attaches to the game, decided by its file extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BotType {
    /// `.dll` injected into the game process.
    #[serde(rename = "dll")]
    BwapiModule,
    /// `.exe` client process.
    #[serde(rename = "exe")]
    NativeClient,
    /// `.jar` client, needs the Java image.
    #[serde(rename = "jar")]
    JavaClient,
}

impl BotType {
    pub fn extension(self) -> &'static str {
        match self {
            BotType::BwapiModule => "dll",
            BotType::NativeClient => "exe",
            BotType::JavaClient => "jar",
        }
    }

    pub fn from_extension(ext: &str) -> Option<BotType> {
        match ext.to_ascii_lowercase().as_str() {
            "dll" => Some(BotType::BwapiModule),
            "exe" => Some(BotType::NativeClient),
            "jar" => Some(BotType::JavaClient),
            _ => None,
        }
    }
}

impl fmt::Display for BotType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

/// Classifies a bot binary by its extension, ignoring case.
pub fn detect_bot_type(bot_file: &str) -> Result<BotType, ConfigError> {
    if bot_file.is_empty() {
        return Err(ConfigError::validation("bot_file", "must not be empty"));
    }
    Path::new(bot_file)
        .extension()
        .and_then(|e| e.to_str())
        .and_then(BotType::from_extension)
        .ok_or_else(|| ConfigError::UnsupportedBotType(bot_file.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub name: String,
    pub tag: String,
}

impl ImageRef {
    pub fn new(name: impl Into<String>, tag: impl Into<String>) -> Self {
        ImageRef {
            name: name.into(),
            tag: tag.into(),
        }
    }

    /// Parses `name[:tag]`, defaulting the tag to `latest`.
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        // A colon before the last slash belongs to a registry host:port.
        let (name, tag) = match s.rfind(':') {
            Some(i) if !s[i..].contains('/') => (&s[..i], &s[i + 1..]),
            _ => (s, "latest"),
        };
        if name.is_empty() || tag.is_empty() {
            return Err(ConfigError::validation("image", format!("bad image reference {s:?}")));
        }
        Ok(ImageRef::new(name, tag))
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.tag)
    }
}

/// Image names per bot type. Deployments can override both.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageCatalog {
    pub game: ImageRef,
    pub java: ImageRef,
}

impl Default for ImageCatalog {
    fn default() -> Self {
        ImageCatalog {
            game: ImageRef::parse(GAME_IMAGE).unwrap(),
            java: ImageRef::parse(JAVA_IMAGE).unwrap(),
        }
    }
}

impl ImageCatalog {
    pub fn resolve(&self, bot_type: BotType, _headful: bool) -> ImageRef {
        match bot_type {
            BotType::JavaClient => self.java.clone(),
            BotType::BwapiModule | BotType::NativeClient => self.game.clone(),
        }
    }
}

/// Image for a bot with the default catalog. The GUI is switched on by
/// environment, so `headful` never changes the image.
pub fn resolve_image(bot_type: BotType, headful: bool) -> ImageRef {
    ImageCatalog::default().resolve(bot_type, headful)
}

/// CPU share stored as integer nano-CPUs so budgets add up exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Cpus(u64);

impl Cpus {
    pub const NANOS_PER_CPU: u64 = 1_000_000_000;

    pub fn from_nanos(nanos: u64) -> Self {
        Cpus(nanos)
    }

    pub fn from_f64(cpus: f64) -> Option<Self> {
        if !cpus.is_finite() || cpus <= 0.0 || cpus > 1.0e6 {
            return None;
        }
        let nanos = (cpus * Self::NANOS_PER_CPU as f64).round() as u64;
        (nanos > 0).then_some(Cpus(nanos))
    }

    pub fn whole(cpus: u64) -> Self {
        Cpus(cpus * Self::NANOS_PER_CPU)
    }

    pub fn nanos(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / Self::NANOS_PER_CPU as f64
    }

    pub fn saturating_sub(self, other: Cpus) -> Cpus {
        Cpus(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for Cpus {
    type Output = Cpus;
    fn add(self, rhs: Cpus) -> Cpus {
        Cpus(self.0 + rhs.0)
    }
}

impl std::ops::Mul<u64> for Cpus {
    type Output = Cpus;
    fn mul(self, rhs: u64) -> Cpus {
        Cpus(self.0 * rhs)
    }
}

impl std::iter::Sum for Cpus {
    fn sum<I: Iterator<Item = Cpus>>(iter: I) -> Cpus {
        iter.fold(Cpus(0), |a, b| a + b)
    }
}

impl fmt::Display for Cpus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_f64())
    }
}

impl Serialize for Cpus {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Cpus {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Cpus::from_f64(v).ok_or_else(|| serde::de::Error::custom("cpus must be > 0"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceLimits {
    pub cpus: Cpus,
    pub memory_mib: u64,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        ResourceLimits {
            cpus: Cpus::whole(1),
            memory_mib: DEFAULT_MEMORY_MIB,
        }
    }
}

impl ResourceLimits {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.cpus.nanos() == 0 {
            return Err(ConfigError::validation("limits.cpus", "must be > 0"));
        }
        if self.memory_mib < MIN_MEMORY_MIB {
            return Err(ConfigError::validation(
                "limits.memory_mib",
                format!("must be at least {MIN_MEMORY_MIB}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlayerSlot {
    pub slot: usize,
    pub bot_name: String,
    pub race: Race,
    pub bot_file: String,
}

impl PlayerSlot {
    pub fn bot_type(&self) -> Result<BotType, ConfigError> {
        detect_bot_type(&self.bot_file)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub game_name: String,
    pub map: String,
    pub players: Vec<PlayerSlot>,
    pub headful: bool,
    pub timeout_s: u64,
    pub limits: ResourceLimits,
}

impl MatchSpec {
    /// Checks every field-level invariant. Uniqueness of `game_name` among
    /// live matches is enforced by the runtime (container names collide).
    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_game_name(&self.game_name)?;
        validate_map_path(&self.map)?;
        if self.players.len() < MIN_PLAYERS {
            return Err(ConfigError::validation("players", "need ≥2"));
        }
        if self.players.len() > MAX_PLAYERS {
            return Err(ConfigError::validation("players", "at most 8"));
        }
        for (i, p) in self.players.iter().enumerate() {
            if p.slot != i {
                return Err(ConfigError::validation(
                    "players",
                    format!("slot indices must be contiguous from 0, found {} at position {i}", p.slot),
                ));
            }
            validate_bot_name(&p.bot_name)?;
            validate_bot_file(&p.bot_file)?;
            if detect_bot_type(&p.bot_file).is_err() {
                return Err(ConfigError::validation(
                    "bot_file",
                    format!("extension of {:?} must be dll, exe or jar", p.bot_file),
                ));
            }
        }
        if self.timeout_s == 0 {
            return Err(ConfigError::validation("timeout_s", "must be > 0"));
        }
        self.limits.validate()
    }

    /// CPU cost of the whole match: one container per slot.
    pub fn cost(&self) -> Cpus {
        self.limits.cpus * self.players.len() as u64
    }

    pub fn bot_names(&self) -> Vec<String> {
        self.players.iter().map(|p| p.bot_name.clone()).collect()
    }

    /// Serializes to the spec-file format accepted by [`parse_match_spec`].
    pub fn render(&self) -> String {
        let file = SpecFile::from(self);
        toml::to_string(&file).expect("match spec is always serializable")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlayerEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slot: Option<usize>,
    bot_name: String,
    race: String,
    bot_file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LimitsEntry {
    #[serde(default)]
    cpus: Option<f64>,
    #[serde(default)]
    memory_mib: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    game_name: String,
    map: String,
    #[serde(default)]
    headful: Option<bool>,
    #[serde(default)]
    timeout_s: Option<i64>,
    #[serde(default)]
    limits: Option<LimitsEntry>,
    #[serde(default)]
    players: Vec<PlayerEntry>,
}

impl From<&MatchSpec> for SpecFile {
    fn from(spec: &MatchSpec) -> Self {
        SpecFile {
            game_name: spec.game_name.clone(),
            map: spec.map.clone(),
            headful: Some(spec.headful),
            timeout_s: Some(spec.timeout_s as i64),
            limits: Some(LimitsEntry {
                cpus: Some(spec.limits.cpus.as_f64()),
                memory_mib: Some(spec.limits.memory_mib as i64),
            }),
            players: spec
                .players
                .iter()
                .map(|p| PlayerEntry {
                    slot: None,
                    bot_name: p.bot_name.clone(),
                    race: p.race.to_string(),
                    bot_file: p.bot_file.clone(),
                })
                .collect(),
        }
    }
}

fn build_limits(entry: Option<LimitsEntry>, base: ResourceLimits) -> Result<ResourceLimits, ConfigError> {
    let Some(entry) = entry else {
        return Ok(base);
    };
    let cpus = match entry.cpus {
        None => base.cpus,
        Some(c) => Cpus::from_f64(c)
            .ok_or_else(|| ConfigError::validation("limits.cpus", "must be > 0"))?,
    };
    let memory_mib = match entry.memory_mib {
        None => base.memory_mib,
        Some(m) if m < MIN_MEMORY_MIB as i64 => {
            return Err(ConfigError::validation(
                "limits.memory_mib",
                format!("must be at least {MIN_MEMORY_MIB}"),
            ))
        }
        Some(m) => m as u64,
    };
    Ok(ResourceLimits { cpus, memory_mib })
}

fn build_spec(file: SpecFile, template: &MatchTemplate) -> Result<MatchSpec, ConfigError> {
    let timeout_s = match file.timeout_s {
        None => template.timeout_s,
        Some(t) if t <= 0 => return Err(ConfigError::validation("timeout_s", "must be > 0")),
        Some(t) => t as u64,
    };
    let mut players = Vec::with_capacity(file.players.len());
    for (i, p) in file.players.into_iter().enumerate() {
        if let Some(slot) = p.slot {
            if slot != i {
                return Err(ConfigError::validation(
                    "players",
                    format!("slot indices must be contiguous from 0, found {slot} at position {i}"),
                ));
            }
        }
        players.push(PlayerSlot {
            slot: i,
            race: p.race.parse()?,
            bot_name: p.bot_name,
            bot_file: p.bot_file,
        });
    }
    let spec = MatchSpec {
        game_name: file.game_name,
        map: file.map,
        players,
        headful: file.headful.unwrap_or(template.headful),
        timeout_s,
        limits: build_limits(file.limits, template.limits)?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Parses and validates one match spec document.
pub fn parse_match_spec(text: &str) -> Result<MatchSpec, ConfigError> {
    let file: SpecFile = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.message().to_string()))?;
    build_spec(file, &MatchTemplate::default())
}

/// Defaults applied to generated or partially specified matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchTemplate {
    pub headful: bool,
    pub timeout_s: u64,
    pub limits: ResourceLimits,
}

impl Default for MatchTemplate {
    fn default() -> Self {
        MatchTemplate {
            headful: false,
            timeout_s: DEFAULT_TIMEOUT_S,
            limits: ResourceLimits::default(),
        }
    }
}

/// Checks a spec against what is actually on disk.
pub fn validate_cross(spec: &MatchSpec, available_maps: &BTreeSet<String>) -> Result<(), ConfigError> {
    for p in &spec.players {
        detect_bot_type(&p.bot_file)?;
    }
    if !available_maps.contains(&spec.map) {
        return Err(ConfigError::MapNotFound(spec.map.clone()));
    }
    Ok(())
}

/// A bot taking part in a generated round robin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub bot_name: String,
    pub race: Race,
    pub bot_file: String,
}

/// Deployment plan document: the match spec keys as defaults plus
/// scheduling keys, explicit `[[matches]]` and/or a `[round_robin]` table.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanFile {
    pub max_concurrent: usize,
    pub cpu_budget: Cpus,
    pub retry_crashed: u32,
    pub seed: u64,
    pub template: MatchTemplate,
    pub matches: Vec<MatchSpec>,
    pub round_robin: Option<RoundRobinSection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRobinSection {
    pub bots: Vec<RosterEntry>,
    pub maps: Vec<String>,
    pub repeats: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRoundRobin {
    bots: Vec<PlayerEntry>,
    maps: Vec<String>,
    #[serde(default)]
    repeats: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlan {
    max_concurrent: Option<i64>,
    cpu_budget: Option<f64>,
    retry_crashed: Option<i64>,
    seed: Option<i64>,
    headful: Option<bool>,
    timeout_s: Option<i64>,
    limits: Option<LimitsEntry>,
    #[serde(default)]
    matches: Vec<SpecFile>,
    round_robin: Option<RawRoundRobin>,
}

pub fn parse_plan_file(text: &str) -> Result<PlanFile, ConfigError> {
    let raw: RawPlan = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.message().to_string()))?;
    let max_concurrent = match raw.max_concurrent {
        None => 1,
        Some(n) if n < 1 => return Err(ConfigError::validation("max_concurrent", "must be ≥1")),
        Some(n) => n as usize,
    };
    let cpu_budget = match raw.cpu_budget {
        None => return Err(ConfigError::validation("cpu_budget", "required")),
        Some(c) => Cpus::from_f64(c).ok_or_else(|| ConfigError::validation("cpu_budget", "must be > 0"))?,
    };
    let retry_crashed = match raw.retry_crashed {
        None => 0,
        Some(n) if n < 0 => return Err(ConfigError::validation("retry_crashed", "must be ≥0")),
        Some(n) => n as u32,
    };
    let timeout_s = match raw.timeout_s {
        None => DEFAULT_TIMEOUT_S,
        Some(t) if t <= 0 => return Err(ConfigError::validation("timeout_s", "must be > 0")),
        Some(t) => t as u64,
    };
    let template = MatchTemplate {
        headful: raw.headful.unwrap_or(false),
        timeout_s,
        limits: build_limits(raw.limits, ResourceLimits::default())?,
    };
    let matches = raw
        .matches
        .into_iter()
        .map(|m| build_spec(m, &template))
        .collect::<Result<Vec<_>, _>>()?;
    let round_robin = match raw.round_robin {
        None => None,
        Some(rr) => {
            let bots = rr
                .bots
                .into_iter()
                .map(|b| {
                    validate_bot_name(&b.bot_name)?;
                    detect_bot_type(&b.bot_file)?;
                    Ok(RosterEntry {
                        race: b.race.parse()?,
                        bot_name: b.bot_name,
                        bot_file: b.bot_file,
                    })
                })
                .collect::<Result<Vec<_>, ConfigError>>()?;
            Some(RoundRobinSection {
                bots,
                maps: rr.maps,
                repeats: rr.repeats.unwrap_or(1),
            })
        }
    };
    if matches.is_empty() && round_robin.is_none() {
        return Err(ConfigError::validation("matches", "plan contains no matches"));
    }
    Ok(PlanFile {
        max_concurrent,
        cpu_budget,
        retry_crashed,
        seed: raw.seed.unwrap_or(0) as u64,
        template,
        matches,
        round_robin,
    })
}
