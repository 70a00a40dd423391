//! Event-sourced durability: the append-only session log, binary state
//! snapshots, and replay.
//!
//! A data directory holds:
//!
//! * `events.jsonl`: every [`EventRecord`], one per line, see [`log`].
//! * `snapshot-<seq>.bin`: engine state as of `seq`, see [`Snapshot`].
//! * `config.yaml`: the inventory and engine configuration the log was
//!   written under.

pub mod log;
mod record;
mod snapshot;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use log::{read_log, EventLog};
pub use record::{EventKind, EventRecord, Scope, SessionEvent};
pub use snapshot::{config_hash, Snapshot, SNAPSHOT_VERSION};

use crate::engine::{ApplyError, EngineState};
use crate::inventory::{load_inventory, EngineConfig, Inventory, InventoryError};

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("sequence gap: expected seq {expected}, found {found}")]
    SequenceGap { expected: u64, found: u64 },
    #[error("checksum mismatch at line {line} of the event log")]
    Checksum { line: usize },
    #[error("snapshot was written under a different configuration ({found:08x} != {expected:08x})")]
    ConfigMismatch { expected: u32, found: u32 },
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Apply(#[from] ApplyError),
    #[error(transparent)]
    Inventory(#[from] InventoryError),
    #[error("verification failed: {0}")]
    Verify(String),
}

/// Rebuild engine state from an optional snapshot plus log records. Records
/// at or below the snapshot's sequence number are skipped.
pub fn replay(
    inventory: &Inventory,
    config: &EngineConfig,
    snapshot: Option<Snapshot>,
    records: &[EventRecord],
) -> Result<EngineState, PersistError> {
    let mut state = match snapshot {
        Some(s) => {
            let expected = config_hash(inventory, config);
            if s.config_hash != expected {
                return Err(PersistError::ConfigMismatch { expected, found: s.config_hash });
            }
            s.state
        }
        None => EngineState::default(),
    };
    let start = state.last_seq;
    for record in records.iter().filter(|r| r.seq > start) {
        state.apply(inventory, config, record)?;
    }
    Ok(state)
}

pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub const EVENTS: &'static str = "events.jsonl";
    pub const CONFIG: &'static str = "config.yaml";

    pub fn create(root: &Path) -> Result<Self, PersistError> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn existing(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn events_path(&self) -> PathBuf {
        self.root.join(Self::EVENTS)
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(Self::CONFIG)
    }

    pub fn write_config(&self, inventory: &Inventory, config: &EngineConfig) -> Result<(), PersistError> {
        fs::write(self.config_path(), inventory.to_yaml(config))?;
        Ok(())
    }

    pub fn snapshot_path(&self, seq: u64) -> PathBuf {
        self.root.join(format!("snapshot-{seq}.bin"))
    }

    /// Snapshot files present, sorted by sequence number.
    pub fn snapshots(&self) -> Result<Vec<(u64, PathBuf)>, PersistError> {
        let mut found = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(found),
            Err(e) => return Err(e.into()),
        };
        for entry in entries {
            let entry = entry?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(seq) = name
                .strip_prefix("snapshot-")
                .and_then(|s| s.strip_suffix(".bin"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                found.push((seq, entry.path()));
            }
        }
        found.sort();
        Ok(found)
    }

    pub fn latest_snapshot(&self) -> Result<Option<Snapshot>, PersistError> {
        match self.snapshots()?.pop() {
            Some((_, path)) => Ok(Some(Snapshot::decode(&fs::read(path)?)?)),
            None => Ok(None),
        }
    }

    /// Write a snapshot atomically (temp file, then rename).
    pub fn write_snapshot(&self, snapshot: &Snapshot) -> Result<PathBuf, PersistError> {
        let path = self.snapshot_path(snapshot.as_of_seq());
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, snapshot.encode())?;
        fs::File::open(&tmp)?.sync_all()?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReport {
    pub events: usize,
    pub last_seq: u64,
    /// Sequence numbers of the snapshots that were checked.
    pub snapshots_checked: Vec<u64>,
}

/// Replay the log in `dir` from scratch and check that every snapshot in
/// the directory agrees byte-for-byte with the replayed state: a snapshot at
/// the log head must equal the full replay, and one taken earlier must
/// reproduce the full replay once the log tail is applied on top.
pub fn verify_data_dir(dir: impl AsRef<Path>) -> Result<VerifyReport, PersistError> {
    let dir = DataDir::existing(dir.as_ref());
    let (inventory, config) = load_inventory(dir.config_path())?;
    let records = read_log(dir.events_path())?;
    let full = replay(&inventory, &config, None, &records)?;
    let full_bytes = Snapshot::new(&inventory, &config, full.clone()).encode();

    let mut checked = Vec::new();
    for (seq, path) in dir.snapshots()? {
        let snap = Snapshot::decode(&fs::read(&path)?)?;
        if snap.as_of_seq() != seq {
            return Err(PersistError::Verify(format!(
                "{} holds state as of seq {}",
                path.display(),
                snap.as_of_seq()
            )));
        }
        let rebuilt = replay(&inventory, &config, Some(snap), &records)?;
        let rebuilt_bytes = Snapshot::new(&inventory, &config, rebuilt).encode();
        if rebuilt_bytes != full_bytes {
            return Err(PersistError::Verify(format!(
                "snapshot {seq} plus log tail differs from full replay"
            )));
        }
        checked.push(seq);
    }
    Ok(VerifyReport { events: records.len(), last_seq: full.last_seq, snapshots_checked: checked })
}
