//! Host trees, rosters and specs for simulated runs.

use std::fs;
use std::path::Path;

use crate::config::{MatchSpec, MatchTemplate, PlayerSlot, Race, RosterEntry};
use crate::volumes::{install_bot_bytes, VolumeError, VolumeLayout};

/// Contents of a placeholder bot binary.
pub const STUB_BOT_BYTES: &[u8] = b"MZ\0stub bot\n";

pub fn stub_bot_file(bot_name: &str) -> String {
    format!("{bot_name}.dll")
}

/// Roster of module bots named `names`, cycling through the three races.
pub fn roster(names: &[&str]) -> Vec<RosterEntry> {
    const RACES: [Race; 3] = [Race::Terran, Race::Protoss, Race::Zerg];
    names
        .iter()
        .enumerate()
        .map(|(i, n)| RosterEntry {
            bot_name: n.to_string(),
            race: RACES[i % RACES.len()],
            bot_file: stub_bot_file(n),
        })
        .collect()
}

/// One match seating `bots` in order.
pub fn spec_for(game_name: &str, map: &str, bots: &[RosterEntry], template: &MatchTemplate) -> MatchSpec {
    MatchSpec {
        game_name: game_name.to_string(),
        map: map.to_string(),
        players: bots
            .iter()
            .enumerate()
            .map(|(slot, b)| PlayerSlot {
                slot,
                bot_name: b.bot_name.clone(),
                race: b.race,
                bot_file: b.bot_file.clone(),
            })
            .collect(),
        headful: template.headful,
        timeout_s: template.timeout_s,
        limits: template.limits,
    }
}

/// Creates the shared tree under `base` with placeholder maps and bots.
pub fn stub_host(base: impl AsRef<Path>, maps: &[&str], bots: &[RosterEntry]) -> Result<VolumeLayout, VolumeError> {
    let layout = VolumeLayout::new(base)?;
    for dir in layout.shared_dirs() {
        fs::create_dir_all(&dir).map_err(|source| VolumeError::Io { path: dir.clone(), source })?;
    }
    for map in maps {
        let path = layout.maps_dir().join(map);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| VolumeError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        fs::write(&path, b"stub map").map_err(|source| VolumeError::Io { path: path.clone(), source })?;
    }
    for b in bots {
        install_bot_bytes(&layout, &b.bot_name, &b.bot_file, STUB_BOT_BYTES)?;
    }
    Ok(layout)
}
