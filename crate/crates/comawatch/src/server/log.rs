//! Append-only event log.
//!
//! Each entry is `u32 length | u32 crc | u64 recv_at_ms | payload`, all
//! little-endian, where `length` is the payload length and the CRC-32
//! (IEEE, reflected) covers the length, timestamp and payload bytes. A
//! damaged or incomplete final entry is a torn write and is dropped on
//! recovery; damage anywhere else is corruption.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

pub const HEADER_LEN: usize = 16;
/// Wire records are short; anything longer is a damaged length field.
pub const MAX_PAYLOAD: usize = 4096;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("corrupt log entry at byte offset {offset}")]
    Corrupt { offset: u64 },
    #[error("payload of {0} bytes exceeds the entry limit")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub recv_at_ms: u64,
    pub payload: String,
}

fn checksum(len: u32, recv_at_ms: u64, payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&len.to_le_bytes());
    h.update(&recv_at_ms.to_le_bytes());
    h.update(payload);
    h.finalize()
}

pub fn encode_entry(entry: &LogEntry, out: &mut Vec<u8>) -> Result<(), LogError> {
    let payload = entry.payload.as_bytes();
    if payload.len() > MAX_PAYLOAD {
        return Err(LogError::TooLarge(payload.len()));
    }
    let len = payload.len() as u32;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&checksum(len, entry.recv_at_ms, payload).to_le_bytes());
    out.extend_from_slice(&entry.recv_at_ms.to_le_bytes());
    out.extend_from_slice(payload);
    Ok(())
}

pub fn encode_entries<'a>(entries: impl IntoIterator<Item = &'a LogEntry>) -> Result<Vec<u8>, LogError> {
    let mut out = Vec::new();
    for e in entries {
        encode_entry(e, &mut out)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovered {
    pub entries: Vec<LogEntry>,
    /// Length of the intact prefix; the file should be truncated to this.
    pub valid_len: u64,
    /// Bytes discarded from a torn final entry.
    pub torn_bytes: u64,
}

/// Decodes a log image, dropping a torn tail.
pub fn decode(bytes: &[u8]) -> Result<Recovered, LogError> {
    let mut entries = Vec::new();
    let mut pos = 0usize;
    while pos < bytes.len() {
        let rest = &bytes[pos..];
        if rest.len() < HEADER_LEN {
            break;
        }
        let len = u32::from_le_bytes(rest[0..4].try_into().expect("4 bytes"));
        let crc = u32::from_le_bytes(rest[4..8].try_into().expect("4 bytes"));
        let recv_at_ms = u64::from_le_bytes(rest[8..16].try_into().expect("8 bytes"));
        if len as usize > MAX_PAYLOAD {
            return Err(LogError::Corrupt { offset: pos as u64 });
        }
        let end = HEADER_LEN + len as usize;
        if rest.len() < end {
            break;
        }
        let payload = &rest[HEADER_LEN..end];
        let intact = checksum(len, recv_at_ms, payload) == crc;
        let last = rest.len() == end;
        match (intact, std::str::from_utf8(payload)) {
            (true, Ok(text)) => entries.push(LogEntry {
                recv_at_ms,
                payload: text.to_owned(),
            }),
            _ if last => break,
            _ => return Err(LogError::Corrupt { offset: pos as u64 }),
        }
        pos += end;
    }
    Ok(Recovered {
        entries,
        valid_len: pos as u64,
        torn_bytes: (bytes.len() - pos) as u64,
    })
}

/// Reads a log file, truncating any torn tail in place.
pub fn recover_file(path: &Path) -> Result<Recovered, LogError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let recovered = decode(&bytes)?;
    if recovered.torn_bytes > 0 {
        log::warn!(
            "{}: dropping {} bytes of torn tail",
            path.display(),
            recovered.torn_bytes
        );
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(recovered.valid_len)?;
        f.sync_all()?;
    }
    Ok(recovered)
}

/// Durable appender; every entry is flushed before `append` returns.
#[derive(Debug)]
pub struct LogWriter {
    out: BufWriter<File>,
    scratch: Vec<u8>,
}

impl LogWriter {
    pub fn open(path: &Path) -> Result<LogWriter, LogError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(LogWriter {
            out: BufWriter::new(file),
            scratch: Vec::with_capacity(128),
        })
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<(), LogError> {
        self.scratch.clear();
        encode_entry(entry, &mut self.scratch)?;
        self.out.write_all(&self.scratch)?;
        self.out.flush()?;
        Ok(())
    }

    pub fn sync(&mut self) -> Result<(), LogError> {
        self.out.flush()?;
        self.out.get_ref().sync_data()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(n: usize) -> Vec<LogEntry> {
        (0..n)
            .map(|i| LogEntry {
                recv_at_ms: i as u64 * 10,
                payload: format!("V1|dev1|{}|{}|HR|72", i + 1, i * 1000),
            })
            .collect()
    }

    #[test]
    fn crc_parameters_match_reference() {
        // CRC-32/ISO-HDLC check value
        assert_eq!(crc32fast::hash(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn clean_round_trip() {
        let es = entries(50);
        let bytes = encode_entries(&es).unwrap();
        let r = decode(&bytes).unwrap();
        assert_eq!(r.entries, es);
        assert_eq!(r.valid_len, bytes.len() as u64);
        assert_eq!(r.torn_bytes, 0);
    }

    #[test]
    fn torn_tail_dropped() {
        let es = entries(10);
        let bytes = encode_entries(&es).unwrap();
        let r = decode(&bytes[..bytes.len() - 3]).unwrap();
        assert_eq!(r.entries, es[..9]);
        assert!(r.torn_bytes > 0);
        // damaged but complete final entry is also a torn write
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 1] ^= 0x40;
        assert_eq!(decode(&flipped).unwrap().entries, es[..9]);
    }

    #[test]
    fn interior_damage_is_corrupt() {
        let es = entries(10);
        let bytes = encode_entries(&es).unwrap();
        let offset_of_5: usize = es[..5]
            .iter()
            .map(|e| HEADER_LEN + e.payload.len())
            .sum();
        for delta in [0, 5, 9, HEADER_LEN + 2] {
            let mut damaged = bytes.clone();
            damaged[offset_of_5 + delta] ^= 0x01;
            match decode(&damaged) {
                Err(LogError::Corrupt { offset }) => assert_eq!(offset, offset_of_5 as u64),
                other => panic!("delta {delta}: {other:?}"),
            }
        }
    }

    #[test]
    fn writer_appends_and_recovery_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.log");
        let es = entries(5);
        {
            let mut w = LogWriter::open(&path).unwrap();
            for e in &es {
                w.append(e).unwrap();
            }
            w.sync().unwrap();
        }
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 4]).unwrap();
        let r = recover_file(&path).unwrap();
        assert_eq!(r.entries, es[..4]);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), r.valid_len);
        assert_eq!(recover_file(&dir.path().join("missing.log")).unwrap().entries, vec![]);
    }
}
