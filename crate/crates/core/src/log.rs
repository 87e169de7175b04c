//! Persistent log record format.
//!
//! Every record starts on a block boundary with a 32-byte header:
//!
//! | bytes  | field                                   |
//! |--------|-----------------------------------------|
//! | 0..2   | magic `0x4C47`                          |
//! | 2      | kind                                    |
//! | 3      | flags                                   |
//! | 4..8   | object length                           |
//! | 8..16  | transaction id                          |
//! | 16..24 | object address                          |
//! | 24..28 | global sequence number                  |
//! | 28..32 | CRC-32 of header (crc zeroed) + payload |
//!
//! Undo records carry the old image. Redo records carry the new image,
//! followed by the old image when `FLAG_OLD_IMAGE` is set. Logical-commit
//! markers have no payload. A physical-commit marker lists the checksum
//! blocks its transaction changes, each as an 8-byte address followed by the
//! block's new 64-byte content, so recovery can reinstate them.

use serde::{Deserialize, Serialize};

use crate::emu::BLOCK;
use crate::error::{Error, Result};

pub const MAGIC: u16 = 0x4C47;
pub const HEADER_LEN: usize = 32;

pub const FLAG_OLD_IMAGE: u8 = 1;
pub const FLAG_REDO: u8 = 2;

const CHECKSUM_ENTRY: usize = 8 + BLOCK;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    UndoData = 1,
    RedoData = 2,
    LogicalCommit = 3,
    PhysicalCommit = 4,
}

impl RecordKind {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => RecordKind::UndoData,
            2 => RecordKind::RedoData,
            3 => RecordKind::LogicalCommit,
            4 => RecordKind::PhysicalCommit,
            _ => return None,
        })
    }

    pub fn is_marker(self) -> bool {
        matches!(self, RecordKind::LogicalCommit | RecordKind::PhysicalCommit)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogRecord {
    pub kind: RecordKind,
    pub flags: u8,
    pub txn: u64,
    pub addr: u64,
    pub seq: u32,
    /// Image of the object this record is primarily about: the old value
    /// for undo records, the new value for redo records.
    pub image: Vec<u8>,
    /// Pre-transaction image carried by redo records.
    pub old: Option<Vec<u8>>,
}

impl LogRecord {
    pub fn undo(txn: u64, addr: u64, seq: u32, old: Vec<u8>) -> Self {
        LogRecord {
            kind: RecordKind::UndoData,
            flags: 0,
            txn,
            addr,
            seq,
            image: old,
            old: None,
        }
    }

    pub fn redo(txn: u64, addr: u64, seq: u32, new: Vec<u8>, old: Option<Vec<u8>>) -> Self {
        let flags = FLAG_REDO | if old.is_some() { FLAG_OLD_IMAGE } else { 0 };
        LogRecord {
            kind: RecordKind::RedoData,
            flags,
            txn,
            addr,
            seq,
            image: new,
            old,
        }
    }

    pub fn marker(kind: RecordKind, txn: u64, seq: u32, redo: bool) -> Self {
        debug_assert!(kind.is_marker());
        LogRecord {
            kind,
            flags: if redo { FLAG_REDO } else { 0 },
            txn,
            addr: 0,
            seq,
            image: Vec::new(),
            old: None,
        }
    }

    pub fn physical_commit(
        txn: u64,
        seq: u32,
        redo: bool,
        checksums: &[(u64, [u8; BLOCK])],
    ) -> Self {
        let mut image = Vec::with_capacity(checksums.len() * CHECKSUM_ENTRY);
        for (addr, block) in checksums {
            image.extend_from_slice(&addr.to_le_bytes());
            image.extend_from_slice(block);
        }
        LogRecord {
            image,
            ..LogRecord::marker(RecordKind::PhysicalCommit, txn, seq, redo)
        }
    }

    /// Checksum blocks carried by a physical-commit marker.
    pub fn checksum_images(&self) -> Vec<(u64, [u8; BLOCK])> {
        if self.kind != RecordKind::PhysicalCommit {
            return Vec::new();
        }
        self.image
            .chunks_exact(CHECKSUM_ENTRY)
            .map(|e| {
                (
                    u64::from_le_bytes(e[..8].try_into().unwrap()),
                    e[8..].try_into().unwrap(),
                )
            })
            .collect()
    }

    pub fn is_redo(&self) -> bool {
        self.flags & FLAG_REDO != 0
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.image.len() + self.old.as_ref().map_or(0, Vec::len)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC.to_le_bytes());
        out.push(self.kind as u8);
        out.push(self.flags);
        out.extend_from_slice(&(self.image.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.txn.to_le_bytes());
        out.extend_from_slice(&self.addr.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&[0; 4]);
        out.extend_from_slice(&self.image);
        if let Some(old) = &self.old {
            out.extend_from_slice(old);
        }
        let crc = crc32fast::hash(&out);
        out[28..32].copy_from_slice(&crc.to_le_bytes());
        out
    }

    /// Decodes the record starting at `bytes[0]`, returning it with its
    /// encoded length.
    pub fn decode(bytes: &[u8]) -> Result<(LogRecord, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Recovery("log header truncated".into()));
        }
        let magic = u16::from_le_bytes([bytes[0], bytes[1]]);
        if magic != MAGIC {
            return Err(Error::Recovery(format!("bad log magic {magic:#06x}")));
        }
        let kind = RecordKind::from_u8(bytes[2])
            .ok_or_else(|| Error::Recovery(format!("unknown log record kind {}", bytes[2])))?;
        let flags = bytes[3];
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let txn = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let addr = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let seq = u32::from_le_bytes(bytes[24..28].try_into().unwrap());
        let crc = u32::from_le_bytes(bytes[28..32].try_into().unwrap());
        let has_old = kind == RecordKind::RedoData && flags & FLAG_OLD_IMAGE != 0;
        let total = HEADER_LEN + len * if has_old { 2 } else { 1 };
        let bad_payload = match kind {
            RecordKind::LogicalCommit => len != 0,
            RecordKind::PhysicalCommit => !len.is_multiple_of(CHECKSUM_ENTRY),
            _ => false,
        };
        if bad_payload {
            return Err(Error::Recovery(format!(
                "commit marker with payload length {len}"
            )));
        }
        if bytes.len() < total {
            return Err(Error::Recovery(format!(
                "log record of txn {txn} needs {total} bytes, {} remain",
                bytes.len()
            )));
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&bytes[..28]);
        hasher.update(&[0; 4]);
        hasher.update(&bytes[HEADER_LEN..total]);
        if hasher.finalize() != crc {
            return Err(Error::Recovery(format!(
                "checksum mismatch in log record seq {seq} of txn {txn}"
            )));
        }
        let image = bytes[HEADER_LEN..HEADER_LEN + len].to_vec();
        let old = has_old.then(|| bytes[HEADER_LEN + len..total].to_vec());
        Ok((
            LogRecord {
                kind,
                flags,
                txn,
                addr,
                seq,
                image,
                old,
            },
            total,
        ))
    }
}

/// Parses every record in a log region. All-zero blocks are free space;
/// anything else must be a well-formed record starting on a block boundary.
/// Returns each record with its absolute address.
pub fn scan(region: &[u8], base: u64) -> Result<Vec<(u64, LogRecord)>> {
    let mut out = Vec::new();
    let mut off = 0usize;
    while off < region.len() {
        let end = (off + BLOCK).min(region.len());
        if region[off..end].iter().all(|&b| b == 0) {
            off += BLOCK;
            continue;
        }
        let (rec, len) = LogRecord::decode(&region[off..]).map_err(|e| match e {
            Error::Recovery(msg) => Error::Recovery(format!("at {:#x}: {msg}", base + off as u64)),
            other => other,
        })?;
        out.push((base + off as u64, rec));
        off += len.div_ceil(BLOCK) * BLOCK;
    }
    Ok(out)
}
