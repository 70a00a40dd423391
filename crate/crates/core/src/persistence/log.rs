//! Append-only JSON-lines event log with a per-record CRC32.
//!
//! Each line is the record serialized as a JSON object (`seq`, `kind`,
//! `payload`) with a trailing `"crc"` field holding the CRC32 of the same
//! object serialized without it:
//!
//! ```text
//! {"seq":1,"kind":"choice_made","payload":{...},"crc":2281920348}
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{EventRecord, PersistError};

const CRC_FIELD: &str = ",\"crc\":";

pub fn encode_line(record: &EventRecord) -> String {
    let body = serde_json::to_string(record).expect("event records always serialize");
    let crc = crc32fast::hash(body.as_bytes());
    let mut line = String::with_capacity(body.len() + 20);
    line.push_str(&body[..body.len() - 1]);
    line.push_str(CRC_FIELD);
    line.push_str(&crc.to_string());
    line.push_str("}\n");
    line
}

/// Parse one line (without its newline). `None` means the line is damaged.
pub fn decode_line(line: &str) -> Option<EventRecord> {
    let at = line.rfind(CRC_FIELD)?;
    let crc_text = line[at + CRC_FIELD.len()..].strip_suffix('}')?;
    let stored: u32 = crc_text.parse().ok()?;
    let body = format!("{}}}", &line[..at]);
    if crc32fast::hash(body.as_bytes()) != stored {
        return None;
    }
    serde_json::from_str(&body).ok()
}

/// Result of scanning a log file.
struct Scan {
    records: Vec<EventRecord>,
    /// Byte length of the valid prefix.
    valid_len: u64,
    torn: bool,
}

fn scan(path: &Path) -> Result<Scan, PersistError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Ok(Scan { records: Vec::new(), valid_len: 0, torn: false })
        }
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut records: Vec<EventRecord> = Vec::new();
    let mut valid_len = 0u64;
    let mut bad_line: Option<usize> = None;
    let mut buf = Vec::new();
    let mut line_no = 0usize;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if let Some(first_bad) = bad_line {
            // More data after a damaged record is corruption, not a torn tail.
            return Err(PersistError::Checksum { line: first_bad });
        }
        let complete = buf.last() == Some(&b'\n');
        let decoded = complete
            .then(|| std::str::from_utf8(&buf[..buf.len() - 1]).ok())
            .flatten()
            .and_then(decode_line);
        match decoded {
            Some(rec) => {
                let expected = records.last().map_or(1, |r| r.seq + 1);
                if rec.seq != expected {
                    return Err(PersistError::SequenceGap { expected, found: rec.seq });
                }
                records.push(rec);
                valid_len += n as u64;
            }
            None => bad_line = Some(line_no),
        }
    }
    Ok(Scan { records, valid_len, torn: bad_line.is_some() })
}

/// Read every valid record, ignoring a damaged final record.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EventRecord>, PersistError> {
    Ok(scan(path.as_ref())?.records)
}

/// Single writer over `events.jsonl`.
pub struct EventLog {
    path: PathBuf,
    writer: BufWriter<File>,
    last_seq: u64,
    sync: bool,
}

impl EventLog {
    /// Open (creating if needed) the log at `path`. A damaged final record
    /// left by an interrupted write is cut off. With `sync`, every append is
    /// fsynced before it returns; otherwise writes are buffered until
    /// [`flush`](Self::flush).
    pub fn open(path: impl AsRef<Path>, sync: bool) -> Result<(Self, Vec<EventRecord>), PersistError> {
        let path = path.as_ref().to_path_buf();
        let scan = scan(&path)?;
        let file = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
        if scan.torn {
            file.set_len(scan.valid_len)?;
            file.sync_all()?;
        }
        let last_seq = scan.records.last().map_or(0, |r| r.seq);
        Ok((Self { path, writer: BufWriter::new(file), last_seq, sync }, scan.records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn append(&mut self, record: &EventRecord) -> Result<(), PersistError> {
        if record.seq != self.last_seq + 1 {
            return Err(PersistError::SequenceGap { expected: self.last_seq + 1, found: record.seq });
        }
        self.writer.write_all(encode_line(record).as_bytes())?;
        if self.sync {
            self.writer.flush()?;
            self.writer.get_ref().sync_data()?;
        }
        self.last_seq = record.seq;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), PersistError> {
        self.writer.flush()?;
        self.writer.get_ref().sync_data()?;
        Ok(())
    }
}

impl Drop for EventLog {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}
