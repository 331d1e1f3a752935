//! Host-side directory tree shared with game containers.
//!
//! ```text
//! <base>/maps/                         -> /app/sc/maps        (ro)
//! <base>/bots/<bot_name>/              -> /app/sc/bots        (ro)
//! <base>/bwapi-data/                   -> /app/sc/bwapi-data  (ro)
//! <base>/bwta-cache/                   -> /app/sc/bwta-cache  (rw, shared)
//! <base>/games/<game_name>/write_<n>/  -> /app/sc/write       (rw, per slot)
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{validate_bot_name, validate_game_name, MatchSpec};
use crate::registry::BotPackage;

pub const CONTAINER_MAPS: &str = "/app/sc/maps";
pub const CONTAINER_BOTS: &str = "/app/sc/bots";
pub const CONTAINER_BWAPI_DATA: &str = "/app/sc/bwapi-data";
pub const CONTAINER_WRITE: &str = "/app/sc/write";
pub const CONTAINER_BWTA_CACHE: &str = "/app/sc/bwta-cache";

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("slot {slot} out of range for a {players}-player match")]
    SlotOutOfRange { slot: usize, players: usize },
    #[error("unsafe name {0:?}")]
    UnsafeName(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mount {
    pub host_path: PathBuf,
    pub container_path: String,
    pub read_only: bool,
}

impl Mount {
    /// Docker bind syntax `<host>:<ctr>[:ro]`.
    pub fn bind_spec(&self) -> String {
        let mut s = format!("{}:{}", self.host_path.display(), self.container_path);
        if self.read_only {
            s.push_str(":ro");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeLayout {
    base_dir: PathBuf,
}

impl VolumeLayout {
    /// Wraps `base_dir` without touching the filesystem. Relative paths are
    /// resolved against the current directory.
    pub fn new(base_dir: impl AsRef<Path>) -> Result<Self, VolumeError> {
        let base = base_dir.as_ref();
        let base_dir = std::path::absolute(base).map_err(io_err(base))?;
        Ok(VolumeLayout { base_dir })
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn maps_dir(&self) -> PathBuf {
        self.base_dir.join("maps")
    }

    pub fn bots_dir(&self) -> PathBuf {
        self.base_dir.join("bots")
    }

    pub fn bwapi_data_dir(&self) -> PathBuf {
        self.base_dir.join("bwapi-data")
    }

    pub fn bwta_cache_dir(&self) -> PathBuf {
        self.base_dir.join("bwta-cache")
    }

    pub fn games_dir(&self) -> PathBuf {
        self.base_dir.join("games")
    }

    pub fn game_dir(&self, game_name: &str) -> PathBuf {
        self.games_dir().join(game_name)
    }

    pub fn write_dir(&self, game_name: &str, slot: usize) -> PathBuf {
        self.game_dir(game_name).join(format!("write_{slot}"))
    }

    pub fn bot_dir(&self, bot_name: &str) -> PathBuf {
        self.bots_dir().join(bot_name)
    }

    pub fn shared_dirs(&self) -> [PathBuf; 4] {
        [
            self.maps_dir(),
            self.bots_dir(),
            self.bwapi_data_dir(),
            self.bwta_cache_dir(),
        ]
    }

    /// Relative paths of every regular file under `maps/`, using `/`.
    pub fn available_maps(&self) -> Result<BTreeSet<String>, VolumeError> {
        let root = self.maps_dir();
        let mut maps = BTreeSet::new();
        if !root.is_dir() {
            return Ok(maps);
        }
        for entry in walkdir::WalkDir::new(&root).follow_links(true) {
            let entry = entry.map_err(|e| VolumeError::Io {
                path: root.clone(),
                source: e.into(),
            })?;
            if entry.file_type().is_file() {
                let rel = entry.path().strip_prefix(&root).expect("walkdir stays under root");
                let parts: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect();
                maps.insert(parts.join("/"));
            }
        }
        Ok(maps)
    }
}

/// Creates the shared directories and one write directory per player.
/// Safe to call repeatedly.
pub fn prepare_layout(base_dir: impl AsRef<Path>, spec: &MatchSpec) -> Result<VolumeLayout, VolumeError> {
    validate_game_name(&spec.game_name).map_err(|_| VolumeError::UnsafeName(spec.game_name.clone()))?;
    let layout = VolumeLayout::new(base_dir)?;
    for dir in layout.shared_dirs() {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for p in &spec.players {
        let dir = layout.write_dir(&spec.game_name, p.slot);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    Ok(layout)
}

/// The five bind mounts for one player container.
pub fn mounts_for_slot(layout: &VolumeLayout, spec: &MatchSpec, slot: usize) -> Result<Vec<Mount>, VolumeError> {
    if slot >= spec.players.len() {
        return Err(VolumeError::SlotOutOfRange {
            slot,
            players: spec.players.len(),
        });
    }
    validate_game_name(&spec.game_name).map_err(|_| VolumeError::UnsafeName(spec.game_name.clone()))?;
    let mount = |host_path: PathBuf, container_path: &str, read_only: bool| Mount {
        host_path,
        container_path: container_path.to_string(),
        read_only,
    };
    Ok(vec![
        mount(layout.maps_dir(), CONTAINER_MAPS, true),
        mount(layout.bots_dir(), CONTAINER_BOTS, true),
        mount(layout.bwapi_data_dir(), CONTAINER_BWAPI_DATA, true),
        mount(layout.bwta_cache_dir(), CONTAINER_BWTA_CACHE, false),
        mount(layout.write_dir(&spec.game_name, slot), CONTAINER_WRITE, false),
    ])
}

fn file_sha256(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    let mut file = fs::File::open(path)?;
    io::copy(&mut file, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

/// Copies a verified bot binary to `bots/<bot_name>/<bot_file>`. An
/// existing file with the same digest is left untouched.
pub fn install_bot_files(layout: &VolumeLayout, pkg: &BotPackage) -> Result<PathBuf, VolumeError> {
    let name = &pkg.meta.name;
    validate_bot_name(name).map_err(|_| VolumeError::UnsafeName(name.clone()))?;
    let file_name = pkg.meta.bot_file();
    let dir = layout.bot_dir(name);
    let target = dir.join(&file_name);
    if target.is_file() {
        if let Ok(existing) = file_sha256(&target) {
            if existing == pkg.meta.sha256 {
                return Ok(target);
            }
        }
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err(&dir))?;
    fs::copy(&pkg.local_path, tmp.path()).map_err(io_err(&pkg.local_path))?;
    tmp.persist(&target).map_err(|e| VolumeError::Io {
        path: target.clone(),
        source: e.error,
    })?;
    Ok(target)
}

/// Writes raw bot bytes to `bots/<bot_name>/<bot_file>`, for locally built
/// bots that never went through the registry.
pub fn install_bot_bytes(
    layout: &VolumeLayout,
    bot_name: &str,
    bot_file: &str,
    bytes: &[u8],
) -> Result<PathBuf, VolumeError> {
    validate_bot_name(bot_name).map_err(|_| VolumeError::UnsafeName(bot_name.to_string()))?;
    if bot_file.is_empty() || bot_file.contains(['/', '\\']) || bot_file.starts_with('.') {
        return Err(VolumeError::UnsafeName(bot_file.to_string()));
    }
    let dir = layout.bot_dir(bot_name);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let target = dir.join(bot_file);
    fs::write(&target, bytes).map_err(io_err(&target))?;
    Ok(target)
}

/// Every regular file each slot wrote, sorted by `(slot, path)`.
pub fn collect_artifacts(layout: &VolumeLayout, game_name: &str) -> Vec<(usize, PathBuf)> {
    let game_dir = layout.game_dir(game_name);
    let Ok(entries) = fs::read_dir(&game_dir) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for entry in entries.flatten() {
        let name = entry.file_name();
        let Some(slot) = name
            .to_str()
            .and_then(|n| n.strip_prefix("write_"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        for file in walkdir::WalkDir::new(entry.path()).into_iter().flatten() {
            if file.file_type().is_file() {
                out.push((slot, file.into_path()));
            }
        }
    }
    out.sort();
    out
}
