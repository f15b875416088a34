//! Directory-backed store with three logical tables: observations,
//! forecasts and models, and runs.
//!
//! ```text
//! {root}/registry.csv
//! {root}/observations/{produce}.csv
//! {root}/snapshots/{id}.json        staged or published daily snapshots
//! {root}/published                  id of the snapshot readers see
//! {root}/models/{produce}/{market}/q{q}/v{version}.json
//! {root}/models/{produce}/{market}/q{q}/current
//! {root}/runs.jsonl                 append-only run reports
//! {root}/lease                      single-writer lease
//! ```
//!
//! Every file except `runs.jsonl` is replaced by write-to-temp then rename,
//! so a crash never leaves a half-written file behind. Readers hold an
//! `Arc<Snapshot>` taken from the published pointer and never see a later
//! publish mid-request.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Duration, Utc};
use mandi_core::data::{parse_observations, write_observations, MarketRegistry, ObservationRow};
use mandi_core::model::forest::{FOREST_FORMAT, FOREST_FORMAT_VERSION};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::records::{ModelArtifact, RunReport, Snapshot};

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Names used as path components: produce, market ids, snapshot ids.
fn check_name(kind: &str, name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ServiceError::Invalid(format!(
            "{kind} `{name}` is not a safe identifier"
        )))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().expect("store paths have a parent");
    fs::create_dir_all(dir).map_err(|e| ServiceError::io(dir, e))?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let mut f = File::create(&tmp).map_err(|e| ServiceError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| ServiceError::io(&tmp, e))?;
    f.sync_all().map_err(|e| ServiceError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ServiceError::io(path, e))
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(ServiceError::io(path, e)),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    match read_optional(path)? {
        Some(s) => serde_json::from_str(&s)
            .map(Some)
            .map_err(|e| ServiceError::json(path, e)),
        None => Ok(None),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LeaseInfo {
    holder: String,
    pid: u32,
    since: DateTime<Utc>,
}

/// Held while a writer runs; removing the lease file on drop releases it.
#[derive(Debug)]
pub struct Lease {
    path: PathBuf,
}

impl Drop for Lease {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug)]
pub struct FileStore {
    root: PathBuf,
    published: RwLock<Option<Arc<Snapshot>>>,
    /// Leases older than this are considered abandoned.
    lease_ttl: Duration,
}

impl FileStore {
    /// Opens (creating if needed) a store rooted at `root` and loads the
    /// published snapshot, if any.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| ServiceError::io(&root, e))?;
        let store = Self {
            root,
            published: RwLock::new(None),
            lease_ttl: Duration::hours(6),
        };
        store.refresh()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn with_lease_ttl(mut self, ttl: Duration) -> Self {
        self.lease_ttl = ttl;
        self
    }

    // registry

    pub fn registry(&self) -> Result<Option<MarketRegistry>> {
        let path = self.root.join("registry.csv");
        match read_optional(&path)? {
            Some(s) => Ok(Some(MarketRegistry::from_csv(s.as_bytes())?)),
            None => Ok(None),
        }
    }

    pub fn require_registry(&self) -> Result<MarketRegistry> {
        self.registry()?.ok_or(ServiceError::NoRegistry)
    }

    pub fn put_registry(&self, registry: &MarketRegistry) -> Result<()> {
        for id in registry.ids() {
            check_name("market id", &id)?;
        }
        write_atomic(&self.root.join("registry.csv"), registry.to_csv().as_bytes())
    }

    // observations

    fn observations_path(&self, produce: &str) -> Result<PathBuf> {
        check_name("produce", produce)?;
        Ok(self.root.join("observations").join(format!("{produce}.csv")))
    }

    /// Produce names with archived observations, sorted.
    pub fn produce(&self) -> Result<Vec<String>> {
        let dir = self.root.join("observations");
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(ServiceError::io(&dir, e)),
        };
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| ServiceError::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(p) = name.strip_suffix(".csv") {
                out.push(p.to_string());
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn observations(&self, produce: &str) -> Result<Vec<ObservationRow>> {
        let path = self.observations_path(produce)?;
        match read_optional(&path)? {
            Some(s) => {
                parse_observations(s.as_bytes()).map_err(|e| ServiceError::Invalid(format!("{}: {e}", path.display())))
            }
            None => Ok(Vec::new()),
        }
    }

    /// Replaces the archive for `produce` with `rows`.
    pub fn put_observations(&self, produce: &str, rows: &[ObservationRow]) -> Result<()> {
        write_atomic(&self.observations_path(produce)?, write_observations(rows).as_bytes())
    }

    /// Merges `rows` into the archive: one row per (date, market, produce),
    /// later rows win. Returns the merged archive per produce.
    pub fn merge_observations(&self, rows: &[ObservationRow]) -> Result<Vec<(String, Vec<ObservationRow>)>> {
        let mut produce: Vec<String> = rows.iter().map(|r| r.produce.clone()).collect();
        produce.sort();
        produce.dedup();
        let mut out = Vec::with_capacity(produce.len());
        for p in produce {
            let merged = merge_rows(self.observations(&p)?, rows.iter().filter(|r| r.produce == p).cloned());
            out.push((p, merged));
        }
        Ok(out)
    }

    // snapshots

    fn snapshot_path(&self, id: &str) -> Result<PathBuf> {
        check_name("snapshot id", id)?;
        Ok(self.root.join("snapshots").join(format!("{id}.json")))
    }

    /// Writes a snapshot without making it visible.
    pub fn stage_snapshot(&self, snapshot: &Snapshot) -> Result<()> {
        let path = self.snapshot_path(&snapshot.id)?;
        let bytes = serde_json::to_vec(snapshot).map_err(|e| ServiceError::json(&path, e))?;
        write_atomic(&path, &bytes)
    }

    pub fn load_snapshot(&self, id: &str) -> Result<Snapshot> {
        let path = self.snapshot_path(id)?;
        read_json(&path)?.ok_or_else(|| ServiceError::NotFound(format!("snapshot {id}")))
    }

    /// Points readers at a staged snapshot. The pointer file flips by rename
    /// and the in-memory handle swaps under one write lock.
    pub fn publish(&self, id: &str) -> Result<Arc<Snapshot>> {
        let snapshot = Arc::new(self.load_snapshot(id)?);
        write_atomic(&self.root.join("published"), id.as_bytes())?;
        *self.published.write().expect("snapshot lock") = Some(snapshot.clone());
        Ok(snapshot)
    }

    pub fn published(&self) -> Option<Arc<Snapshot>> {
        self.published.read().expect("snapshot lock").clone()
    }

    /// Reloads the published snapshot if another process moved the pointer.
    pub fn refresh(&self) -> Result<()> {
        let Some(id) = read_optional(&self.root.join("published"))? else {
            return Ok(());
        };
        let id = id.trim();
        if self.published().is_some_and(|s| s.id == id) {
            return Ok(());
        }
        let snapshot = Arc::new(self.load_snapshot(id)?);
        *self.published.write().expect("snapshot lock") = Some(snapshot);
        Ok(())
    }

    // models

    fn model_dir(&self, produce: &str, market_id: &str, q: usize) -> Result<PathBuf> {
        check_name("produce", produce)?;
        check_name("market id", market_id)?;
        Ok(self
            .root
            .join("models")
            .join(produce)
            .join(market_id)
            .join(format!("q{q}")))
    }

    pub fn current_model_version(&self, produce: &str, market_id: &str, q: usize) -> Result<Option<u64>> {
        let path = self.model_dir(produce, market_id, q)?.join("current");
        match read_optional(&path)? {
            Some(s) => s
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| ServiceError::Invalid(format!("{}: bad version `{}`", path.display(), s.trim()))),
            None => Ok(None),
        }
    }

    pub fn model(&self, produce: &str, market_id: &str, q: usize, version: u64) -> Result<ModelArtifact> {
        let path = self
            .model_dir(produce, market_id, q)?
            .join(format!("v{version:06}.json"));
        let artifact: ModelArtifact = read_json(&path)?
            .ok_or_else(|| ServiceError::NotFound(format!("model {produce}/{market_id}/q{q} v{version}")))?;
        let f = &artifact.forest;
        if f.format != FOREST_FORMAT || f.format_version != FOREST_FORMAT_VERSION {
            return Err(ServiceError::Invalid(format!(
                "{}: unsupported model format {} v{}",
                path.display(),
                f.format,
                f.format_version
            )));
        }
        Ok(artifact)
    }

    pub fn current_model(&self, produce: &str, market_id: &str, q: usize) -> Result<Option<ModelArtifact>> {
        match self.current_model_version(produce, market_id, q)? {
            Some(v) => Ok(Some(self.model(produce, market_id, q, v)?)),
            None => Ok(None),
        }
    }

    /// Highest stored version, or 0 when none exists.
    pub fn latest_model_version(&self, produce: &str, market_id: &str, q: usize) -> Result<u64> {
        let dir = self.model_dir(produce, market_id, q)?;
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(ServiceError::io(&dir, e)),
        };
        let mut latest = 0;
        for entry in entries {
            let entry = entry.map_err(|e| ServiceError::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(v) = name
                .strip_prefix('v')
                .and_then(|n| n.strip_suffix(".json"))
                .and_then(|n| n.parse::<u64>().ok())
            {
                latest = latest.max(v);
            }
        }
        Ok(latest)
    }

    /// Stores `artifact` under its version and makes it current.
    pub fn put_model(&self, artifact: &ModelArtifact) -> Result<()> {
        let dir = self.model_dir(&artifact.produce, &artifact.market_id, artifact.q)?;
        let path = dir.join(format!("v{:06}.json", artifact.version));
        let bytes = serde_json::to_vec(artifact).map_err(|e| ServiceError::json(&path, e))?;
        write_atomic(&path, &bytes)?;
        write_atomic(&dir.join("current"), artifact.version.to_string().as_bytes())
    }

    // runs

    pub fn append_run(&self, report: &RunReport) -> Result<()> {
        let path = self.root.join("runs.jsonl");
        let mut line = serde_json::to_string(report).map_err(|e| ServiceError::json(&path, e))?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| ServiceError::io(&path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| ServiceError::io(&path, e))?;
        f.sync_all().map_err(|e| ServiceError::io(&path, e))
    }

    /// All run reports in append order.
    pub fn runs(&self) -> Result<Vec<RunReport>> {
        let path = self.root.join("runs.jsonl");
        let Some(text) = read_optional(&path)? else {
            return Ok(Vec::new());
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| ServiceError::json(&path, e)))
            .collect()
    }

    // lease

    /// Takes the single-writer lease, replacing one older than the TTL.
    pub fn lease(&self, holder: &str) -> Result<Lease> {
        let path = self.root.join("lease");
        let info = LeaseInfo {
            holder: holder.to_string(),
            pid: std::process::id(),
            since: Utc::now(),
        };
        let body = serde_json::to_vec(&info).map_err(|e| ServiceError::json(&path, e))?;
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    f.write_all(&body).map_err(|e| ServiceError::io(&path, e))?;
                    return Ok(Lease { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let held: Option<LeaseInfo> = read_json(&path).ok().flatten();
                    match held {
                        Some(h) if Utc::now() - h.since < self.lease_ttl => {
                            return Err(ServiceError::LeaseHeld {
                                holder: format!("{} (pid {})", h.holder, h.pid),
                                since: h.since.to_rfc3339(),
                            });
                        }
                        _ => {
                            tracing::warn!(path = %path.display(), "replacing stale lease");
                            let _ = fs::remove_file(&path);
                        }
                    }
                }
                Err(e) => return Err(ServiceError::io(&path, e)),
            }
        }
        Err(ServiceError::LeaseHeld {
            holder: "unknown".into(),
            since: "unknown".into(),
        })
    }
}

/// One row per (date, market, produce); rows from `incoming` replace
/// existing ones. Output is sorted by (date, market_id).
pub fn merge_rows(
    existing: Vec<ObservationRow>,
    incoming: impl IntoIterator<Item = ObservationRow>,
) -> Vec<ObservationRow> {
    let mut by_key = std::collections::BTreeMap::new();
    for row in existing.into_iter().chain(incoming) {
        by_key.insert((row.date, row.market_id.clone(), row.produce.clone()), row);
    }
    by_key.into_values().collect()
}
