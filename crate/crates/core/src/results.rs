//! Per-player result files and match aggregation.
//!
//! The in-container wrapper writes `<write_dir>/<game_name>_result.json`:
//!
//! ```json
//! {"slot": 0, "is_winner": true, "is_crashed": false, "frame_count": 8612,
//!  "building_score": 0, "razing_score": 0, "unit_score": 0, "kill_score": 0}
//! ```
//!
//! The four score fields are optional and default to 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::MatchSpec;

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl PartialEq for ResultsError {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ResultsError::Protocol(a), ResultsError::Protocol(b)) => a == b,
            (ResultsError::Io { path: a, .. }, ResultsError::Io { path: b, .. }) => a == b,
            _ => false,
        }
    }
}

/// File name of a slot's result file inside its write directory.
pub fn result_file_name(game_name: &str) -> String {
    format!("{game_name}_result.json")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlayerResult {
    pub slot: usize,
    /// Filled from the match spec during aggregation, never read from files.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub bot_name: String,
    pub is_winner: bool,
    pub is_crashed: bool,
    pub building_score: u64,
    pub razing_score: u64,
    pub unit_score: u64,
    pub kill_score: u64,
    pub frame_count: u64,
}

#[derive(Deserialize)]
struct RawResult {
    slot: usize,
    is_winner: bool,
    is_crashed: bool,
    frame_count: u64,
    #[serde(default)]
    building_score: u64,
    #[serde(default)]
    razing_score: u64,
    #[serde(default)]
    unit_score: u64,
    #[serde(default)]
    kill_score: u64,
}

pub fn parse_result_file(text: &str) -> Result<PlayerResult, ResultsError> {
    if text.trim().is_empty() {
        return Err(ResultsError::Protocol("empty result file".into()));
    }
    let raw: RawResult =
        serde_json::from_str(text).map_err(|e| ResultsError::Protocol(format!("bad result file: {e}")))?;
    if raw.is_winner && raw.is_crashed {
        return Err(ResultsError::Protocol(format!(
            "slot {} claims both winner and crashed",
            raw.slot
        )));
    }
    Ok(PlayerResult {
        slot: raw.slot,
        bot_name: String::new(),
        is_winner: raw.is_winner,
        is_crashed: raw.is_crashed,
        building_score: raw.building_score,
        razing_score: raw.razing_score,
        unit_score: raw.unit_score,
        kill_score: raw.kill_score,
        frame_count: raw.frame_count,
    })
}

/// JSON body a wrapper would write for `result`.
pub fn render_result_file(result: &PlayerResult) -> String {
    let mut r = result.clone();
    r.bot_name.clear();
    serde_json::to_string(&r).expect("result is serializable")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Decided,
    Draw,
    AllCrashed,
    TimedOut,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Decided => "Decided",
            Outcome::Draw => "Draw",
            Outcome::AllCrashed => "AllCrashed",
            Outcome::TimedOut => "TimedOut",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameResult {
    pub game_name: String,
    pub winner_slot: Option<usize>,
    pub players: Vec<PlayerResult>,
    pub wall_seconds: f64,
    pub outcome: Outcome,
}

impl GameResult {
    pub fn winner_bot(&self) -> Option<&str> {
        let w = self.winner_slot?;
        self.players.iter().find(|p| p.slot == w).map(|p| p.bot_name.as_str())
    }

    pub fn frames(&self) -> u64 {
        self.players.iter().map(|p| p.frame_count).max().unwrap_or(0)
    }
}

/// Combines per-slot files with observed crashes.
///
/// Rules, first match wins: timeout; every slot crashed; exactly one slot
/// left standing wins by default; otherwise the winner claims of the
/// surviving slots decide (one claim wins, none is a draw, more is an
/// error). A file reporting `is_crashed` counts as a crash. Claims from
/// crashed slots are ignored.
pub fn aggregate(
    spec: &MatchSpec,
    per_slot: &BTreeMap<usize, Option<PlayerResult>>,
    crashed_slots: &BTreeSet<usize>,
    timed_out: bool,
) -> Result<GameResult, ResultsError> {
    let n = spec.players.len();
    if let Some(bad) = per_slot.keys().chain(crashed_slots.iter()).find(|&&s| s >= n) {
        return Err(ResultsError::Protocol(format!("slot {bad} outside 0..{n}")));
    }
    let mut players = Vec::with_capacity(n);
    for p in &spec.players {
        let file = per_slot.get(&p.slot).and_then(|r| r.as_ref());
        if let Some(f) = file {
            if f.slot != p.slot {
                return Err(ResultsError::Protocol(format!(
                    "result for slot {} found in slot {}'s directory",
                    f.slot, p.slot
                )));
            }
        }
        let mut r = file.cloned().unwrap_or(PlayerResult {
            slot: p.slot,
            ..PlayerResult::default()
        });
        r.bot_name = p.bot_name.clone();
        r.is_crashed = r.is_crashed || crashed_slots.contains(&p.slot);
        players.push(r);
    }
    let claims_winner: Vec<bool> = players.iter().map(|r| r.is_winner && !r.is_crashed).collect();
    for r in &mut players {
        r.is_winner = false;
    }
    let standing: Vec<usize> = players.iter().filter(|r| !r.is_crashed).map(|r| r.slot).collect();

    let (outcome, winner_slot) = if timed_out {
        (Outcome::TimedOut, None)
    } else if standing.is_empty() {
        (Outcome::AllCrashed, None)
    } else if standing.len() == 1 && standing.len() < n {
        (Outcome::Decided, Some(standing[0]))
    } else {
        let winners: Vec<usize> = (0..n).filter(|&s| claims_winner[s]).collect();
        match winners.as_slice() {
            [] => (Outcome::Draw, None),
            [w] => (Outcome::Decided, Some(*w)),
            many => {
                return Err(ResultsError::Protocol(format!(
                    "slots {many:?} all claim victory"
                )))
            }
        }
    };
    if let Some(w) = winner_slot {
        players[w].is_winner = true;
    }
    Ok(GameResult {
        game_name: spec.game_name.clone(),
        winner_slot,
        players,
        wall_seconds: 0.0,
        outcome,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

pub const CSV_COLUMNS: [&str; 6] = ["game_name", "outcome", "winner_slot", "winner_bot", "wall_seconds", "frames"];

fn sorted(results: &[GameResult]) -> Vec<&GameResult> {
    let mut v: Vec<&GameResult> = results.iter().collect();
    v.sort_by(|a, b| a.game_name.cmp(&b.game_name));
    v
}

pub fn render_report(results: &[GameResult], format: ReportFormat) -> String {
    let rows = sorted(results);
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&rows).expect("results are serializable");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_COLUMNS).expect("in-memory write");
            for r in rows {
                w.write_record([
                    r.game_name.clone(),
                    r.outcome.to_string(),
                    r.winner_slot.map(|s| s.to_string()).unwrap_or_default(),
                    r.winner_bot().unwrap_or_default().to_string(),
                    r.wall_seconds.to_string(),
                    r.frames().to_string(),
                ])
                .expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv of utf-8 fields")
        }
    }
}

/// Writes results sorted by game name. Output depends only on the input.
pub fn write_report(results: &[GameResult], format: ReportFormat, out: &Path) -> Result<(), ResultsError> {
    fs::write(out, render_report(results, format)).map_err(|source| ResultsError::Io {
        path: out.to_path_buf(),
        source,
    })
}
