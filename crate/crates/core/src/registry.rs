//! Bot registry client with a content-addressed, checksum-verified cache.
//!
//! Wire format: `GET <registry>/bots` returns a JSON array of
//! `{"name", "race", "botType", "binaryUrl", "sha256"}` objects, and
//! `GET <binaryUrl>` returns the raw binary with a `Content-Length`.
//!
//! Cache layout: `<cache>/<sha256>/<bot_file>` plus a `package.json`
//! record. Downloads land in a temporary file and are renamed into place
//! only after the digest matches.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock, Mutex};

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{BotType, Race, RosterEntry};

pub mod fake;

const PACKAGE_RECORD: &str = "package.json";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("network error: {0}")]
    Network(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("checksum mismatch for {name}: expected {expected}, got {actual}")]
    ChecksumMismatch {
        name: String,
        expected: String,
        actual: String,
    },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RegistryError + '_ {
    move |source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sha_re() -> &'static Regex {
    static RE: LazyLock<Regex> = LazyLock::new(|| Regex::new("^[0-9a-f]{64}$").unwrap());
    &RE
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BotMetadata {
    pub name: String,
    pub race: Race,
    #[serde(rename = "botType")]
    pub bot_type: BotType,
    #[serde(rename = "binaryUrl")]
    pub binary_url: String,
    pub sha256: String,
}

impl BotMetadata {
    pub fn validate(&self) -> Result<(), RegistryError> {
        if self.name.is_empty() {
            return Err(RegistryError::Protocol("bot with empty name".into()));
        }
        if !sha_re().is_match(&self.sha256) {
            return Err(RegistryError::Protocol(format!(
                "bot {:?}: sha256 must be 64 lowercase hex characters",
                self.name
            )));
        }
        Ok(())
    }

    /// `<name>.<ext>` for the bot's type.
    pub fn bot_file(&self) -> String {
        format!("{}.{}", self.name, self.bot_type.extension())
    }
}

impl From<&BotMetadata> for RosterEntry {
    fn from(meta: &BotMetadata) -> Self {
        RosterEntry {
            bot_name: meta.name.clone(),
            race: meta.race,
            bot_file: meta.bot_file(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BotPackage {
    pub meta: BotMetadata,
    pub local_path: PathBuf,
    pub fetched_at: DateTime<Utc>,
}

impl BotPackage {
    /// Rehashes the cached file against its metadata.
    pub fn verify(&self) -> io::Result<bool> {
        Ok(sha256_file(&self.local_path)? == self.meta.sha256)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    io::copy(&mut fs::File::open(path)?, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

/// Source of bot listings. The HTTP client implements the schema above;
/// adapters for other registry APIs implement this trait.
pub trait BotRegistry {
    fn list_bots(&self) -> Result<Vec<BotMetadata>, RegistryError>;
}

#[derive(Debug, Clone)]
pub struct HttpRegistry {
    base_url: String,
}

impl HttpRegistry {
    pub fn new(base_url: impl Into<String>) -> Self {
        let mut base_url = base_url.into();
        while base_url.ends_with('/') {
            base_url.pop();
        }
        HttpRegistry { base_url }
    }
}

impl BotRegistry for HttpRegistry {
    fn list_bots(&self) -> Result<Vec<BotMetadata>, RegistryError> {
        list_bots(&self.base_url)
    }
}

fn network(e: ureq::Error) -> RegistryError {
    RegistryError::Network(e.to_string())
}

/// Fetches and validates the registry listing, in the order served.
pub fn list_bots(registry_url: &str) -> Result<Vec<BotMetadata>, RegistryError> {
    let url = format!("{}/bots", registry_url.trim_end_matches('/'));
    let mut resp = ureq::get(&url).call().map_err(network)?;
    let body = resp.body_mut().read_to_string().map_err(network)?;
    let bots: Vec<BotMetadata> =
        serde_json::from_str(&body).map_err(|e| RegistryError::Protocol(format!("bad bot listing: {e}")))?;
    for b in &bots {
        b.validate()?;
    }
    Ok(bots)
}

// One lock per cache entry so concurrent fetches of a digest download once.
static ENTRY_LOCKS: LazyLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = LazyLock::new(Default::default);

fn entry_lock(dir: &Path) -> Arc<Mutex<()>> {
    let mut locks = ENTRY_LOCKS.lock().unwrap_or_else(|e| e.into_inner());
    locks.entry(dir.to_path_buf()).or_default().clone()
}

fn read_record(dir: &Path) -> Option<BotPackage> {
    let text = fs::read_to_string(dir.join(PACKAGE_RECORD)).ok()?;
    serde_json::from_str(&text).ok()
}

fn cached(meta: &BotMetadata, dir: &Path) -> Option<BotPackage> {
    let record = read_record(dir)?;
    let path = dir.join(meta.bot_file());
    if record.meta.sha256 != meta.sha256 || !path.is_file() {
        return None;
    }
    match sha256_file(&path) {
        Ok(d) if d == meta.sha256 => Some(BotPackage {
            meta: meta.clone(),
            local_path: path,
            fetched_at: record.fetched_at,
        }),
        _ => None,
    }
}

/// Ensures the bot's binary is in the cache and verified. A present digest
/// is served from disk without touching the network.
pub fn fetch_bot(meta: &BotMetadata, cache_dir: &Path) -> Result<BotPackage, RegistryError> {
    meta.validate()?;
    crate::config::validate_bot_name(&meta.name)
        .map_err(|e| RegistryError::Protocol(format!("unusable bot name: {e}")))?;
    fs::create_dir_all(cache_dir).map_err(io_err(cache_dir))?;
    let dir = cache_dir.join(&meta.sha256);
    let lock = entry_lock(&dir);
    let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());

    if let Some(pkg) = cached(meta, &dir) {
        log::debug!("cache hit for {} ({})", meta.name, meta.sha256);
        return Ok(pkg);
    }

    let mut resp = ureq::get(&meta.binary_url).call().map_err(network)?;
    let expected_len = resp
        .body()
        .content_length()
        .ok_or_else(|| RegistryError::Protocol("binary response without Content-Length".into()))?;

    let mut tmp = tempfile::NamedTempFile::new_in(cache_dir).map_err(io_err(cache_dir))?;
    let mut hasher = Sha256::new();
    let mut reader = resp.body_mut().as_reader();
    let mut buf = [0u8; 64 * 1024];
    let mut received = 0u64;
    loop {
        let n = reader.read(&mut buf).map_err(|e| RegistryError::Network(e.to_string()))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        tmp.write_all(&buf[..n]).map_err(io_err(tmp.path()))?;
        received += n as u64;
    }
    if received != expected_len {
        return Err(RegistryError::Network(format!(
            "short read: {received} of {expected_len} bytes"
        )));
    }
    let actual = hex::encode(hasher.finalize());
    if actual != meta.sha256 {
        return Err(RegistryError::ChecksumMismatch {
            name: meta.name.clone(),
            expected: meta.sha256.clone(),
            actual,
        });
    }
    tmp.as_file().sync_all().map_err(io_err(tmp.path()))?;

    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(meta.bot_file());
    tmp.persist(&path).map_err(|e| RegistryError::Io {
        path: path.clone(),
        source: e.error,
    })?;
    let pkg = BotPackage {
        meta: meta.clone(),
        local_path: path,
        fetched_at: Utc::now(),
    };
    write_record(&dir, &pkg)?;
    Ok(pkg)
}

fn write_record(dir: &Path, pkg: &BotPackage) -> Result<(), RegistryError> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    let json = serde_json::to_vec_pretty(pkg).expect("package is serializable");
    tmp.write_all(&json).map_err(io_err(dir))?;
    let record = dir.join(PACKAGE_RECORD);
    tmp.persist(&record).map_err(|e| RegistryError::Io {
        path: record,
        source: e.error,
    })?;
    Ok(())
}

/// Every package recorded in the cache, in digest order.
pub fn cached_packages(cache_dir: &Path) -> Result<Vec<BotPackage>, RegistryError> {
    let entries = match fs::read_dir(cache_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(cache_dir)(e)),
    };
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(io_err(cache_dir))?;
        if entry.file_type().map(|t| t.is_dir()).unwrap_or(false) {
            if let Some(pkg) = read_record(&entry.path()) {
                out.push(pkg);
            }
        }
    }
    out.sort_by(|a, b| a.meta.sha256.cmp(&b.meta.sha256));
    Ok(out)
}

/// Newest cached package for a bot name.
pub fn latest_cached(cache_dir: &Path, bot_name: &str) -> Result<Option<BotPackage>, RegistryError> {
    Ok(cached_packages(cache_dir)?
        .into_iter()
        .filter(|p| p.meta.name == bot_name)
        .max_by(|a, b| a.fetched_at.cmp(&b.fetched_at).then(a.meta.sha256.cmp(&b.meta.sha256))))
}

/// Keeps the `keep_latest_n_per_bot` newest versions of each bot and
/// deletes the rest. Returns how many versions were removed.
pub fn purge_cache(cache_dir: &Path, keep_latest_n_per_bot: usize) -> Result<usize, RegistryError> {
    if keep_latest_n_per_bot == 0 {
        return Err(RegistryError::InvalidArgument("must keep at least one version per bot".into()));
    }
    let mut by_name: BTreeMap<String, Vec<BotPackage>> = BTreeMap::new();
    for pkg in cached_packages(cache_dir)? {
        by_name.entry(pkg.meta.name.clone()).or_default().push(pkg);
    }
    let mut removed = 0;
    for (_, mut versions) in by_name {
        versions.sort_by(|a, b| b.fetched_at.cmp(&a.fetched_at).then(b.meta.sha256.cmp(&a.meta.sha256)));
        for old in versions.into_iter().skip(keep_latest_n_per_bot) {
            let dir = cache_dir.join(&old.meta.sha256);
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
            removed += 1;
        }
    }
    Ok(removed)
}
