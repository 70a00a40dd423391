//! Binary snapshot format.
//!
//! ```text
//! u8   version
//! u32  section count (LE)
//! repeated: u8 tag | u64 length (LE) | body (bincode)
//! ```
//!
//! Sections, in order: header (as-of seq, config hash), global table, user
//! profiles, cluster model, open sessions, metrics. Every map is ordered, so
//! equal states encode to equal bytes.

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::PersistError;
use crate::engine::EngineState;
use crate::inventory::{EngineConfig, Inventory};

pub const SNAPSHOT_VERSION: u8 = 1;

const TAG_HEADER: u8 = 1;
const TAG_GLOBAL: u8 = 2;
const TAG_USERS: u8 = 3;
const TAG_CLUSTERS: u8 = 4;
const TAG_SESSIONS: u8 = 5;
const TAG_METRICS: u8 = 6;

/// CRC32 of the canonical YAML rendering of the inventory and configuration.
pub fn config_hash(inventory: &Inventory, config: &EngineConfig) -> u32 {
    crc32fast::hash(inventory.to_yaml(config).as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub config_hash: u32,
    pub state: EngineState,
}

impl Snapshot {
    pub fn new(inventory: &Inventory, config: &EngineConfig, state: EngineState) -> Self {
        Self { config_hash: config_hash(inventory, config), state }
    }

    pub fn as_of_seq(&self) -> u64 {
        self.state.last_seq
    }

    pub fn encode(&self) -> Vec<u8> {
        let s = &self.state;
        let sections: [(u8, Vec<u8>); 6] = [
            (TAG_HEADER, body(&(s.last_seq, self.config_hash))),
            (TAG_GLOBAL, body(&s.global)),
            (TAG_USERS, body(&s.users)),
            (TAG_CLUSTERS, body(&s.clusters)),
            (TAG_SESSIONS, body(&(&s.sessions, &s.open_by_user))),
            (TAG_METRICS, body(&s.metrics)),
        ];
        let mut out = vec![SNAPSHOT_VERSION];
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (tag, bytes) in sections {
            out.push(tag);
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PersistError> {
        let mut r = Reader { bytes, pos: 0 };
        let version = r.take(1)?[0];
        if version != SNAPSHOT_VERSION {
            return Err(PersistError::Snapshot(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut bodies: [Option<&[u8]>; 6] = [None; 6];
        for _ in 0..count {
            let tag = r.take(1)?[0];
            let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            let data = r.take(len)?;
            // Unknown tags are skipped so later versions can add sections.
            if (TAG_HEADER..=TAG_METRICS).contains(&tag) {
                bodies[(tag - 1) as usize] = Some(data);
            }
        }
        if r.pos != bytes.len() {
            return Err(PersistError::Snapshot("trailing bytes".into()));
        }
        let get = |tag: u8| {
            bodies[(tag - 1) as usize]
                .ok_or_else(|| PersistError::Snapshot(format!("missing section {tag}")))
        };
        let (last_seq, config_hash): (u64, u32) = parse(get(TAG_HEADER)?)?;
        let (sessions, open_by_user) = parse(get(TAG_SESSIONS)?)?;
        let state = EngineState {
            last_seq,
            global: parse(get(TAG_GLOBAL)?)?,
            users: parse(get(TAG_USERS)?)?,
            clusters: parse(get(TAG_CLUSTERS)?)?,
            sessions,
            open_by_user,
            metrics: parse(get(TAG_METRICS)?)?,
        };
        Ok(Self { config_hash, state })
    }
}

fn body<T: Serialize>(value: &T) -> Vec<u8> {
    bincode::serialize(value).expect("engine state always serializes")
}

fn parse<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, PersistError> {
    bincode::deserialize(bytes).map_err(|e| PersistError::Snapshot(e.to_string()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PersistError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PersistError::Snapshot("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}
