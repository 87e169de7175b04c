//! Post-crash processing.
//!
//! Recovery works directly on the durable image:
//!
//! 1. parse the log pool and classify each transaction by its highest
//!    persisted commit marker;
//! 2. undo every change not covered by a physical commit, newest first,
//!    so the object pools reflect exactly the physically committed state
//!    (checksums are only ever advanced after a physical-commit marker is
//!    durable, and recovery reinstates the checksum blocks such markers
//!    carry);
//! 3. verify every checksum-protected page and repair stale blocks;
//! 4. optionally roll logically committed redo transactions forward;
//! 5. clear the log pool.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checksum::{correct_page, verify_page, DeltaSet};
use crate::emu::BLOCK;
use crate::error::{Error, Result};
use crate::layout::{self, PAGE_SIZE};
use crate::log::{self, LogRecord, RecordKind};
use crate::pool::{Allocation, PoolKind, PoolRange, Superblock};
use crate::txn::{LogMode, TxnId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryOptions {
    /// Re-apply logically committed redo transactions instead of cancelling
    /// them. Redo records written without their old image are always rolled
    /// forward, since they cannot be cancelled.
    pub roll_forward_redo: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnClasses {
    pub physical: Vec<TxnId>,
    pub logical_only: Vec<TxnId>,
    pub active: Vec<TxnId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageReport {
    pub page: u64,
    pub bad_columns: Vec<usize>,
    pub bad_rows: Vec<usize>,
    pub corrected: Vec<(usize, usize)>,
    pub uncorrectable: Vec<(usize, usize)>,
    pub checksums_rebuilt: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Ground-truth inconsistent objects; filled in by a harness that knows
    /// the expected contents.
    #[serde(rename = "I_obj")]
    pub inconsistent_objects: u64,
    /// Objects found inconsistent by checksum verification.
    #[serde(rename = "DI_obj")]
    pub detected: u64,
    /// Detected objects that could not be repaired.
    #[serde(rename = "CC_obj")]
    pub uncorrected: u64,
    pub corrected: u64,
    pub rolled_back: Vec<TxnId>,
    pub rolled_forward: Vec<TxnId>,
    pub committed: Vec<TxnId>,
    pub log_records: u64,
    pub detected_blocks: u64,
    pub corrected_blocks: u64,
    pub uncorrectable_blocks: u64,
    /// Addresses of detected objects (or blocks, without a directory).
    #[serde(skip)]
    pub detected_addrs: Vec<u64>,
    #[serde(skip)]
    pub uncorrected_addrs: Vec<u64>,
    pub pages: Vec<PageReport>,
}

impl RecoveryReport {
    pub fn changed_nothing(&self) -> bool {
        self.detected_blocks == 0
            && self.rolled_back.is_empty()
            && self.rolled_forward.is_empty()
            && self.log_records == 0
            && self.pages.iter().all(|p| p.checksums_rebuilt == 0)
    }
}

#[derive(Debug, Default)]
struct TxnLog {
    redo: bool,
    logical: bool,
    physical: bool,
    data: Vec<LogRecord>,
    checksums: Vec<(u32, Vec<(u64, [u8; BLOCK])>)>,
}

fn group(records: Vec<(u64, LogRecord)>) -> BTreeMap<TxnId, TxnLog> {
    let mut by_txn: BTreeMap<TxnId, TxnLog> = BTreeMap::new();
    for (_, r) in records {
        let e = by_txn.entry(r.txn).or_default();
        e.redo |= r.is_redo();
        match r.kind {
            RecordKind::LogicalCommit => e.logical = true,
            RecordKind::PhysicalCommit => {
                e.physical = true;
                e.checksums.push((r.seq, r.checksum_images()));
            }
            RecordKind::UndoData | RecordKind::RedoData => e.data.push(r),
        }
    }
    by_txn
}

fn region(image: &[u8], r: PoolRange) -> Result<&[u8]> {
    image
        .get(r.base as usize..r.end() as usize)
        .ok_or_else(|| Error::Recovery(format!("image too small for pool at {:#x}", r.base)))
}

/// Partitions the transactions found in the log by their highest marker.
pub fn classify_txns(image: &[u8]) -> Result<TxnClasses> {
    let sb = Superblock::decode(image)?;
    let records = log::scan(region(image, sb.log)?, sb.log.base)?;
    Ok(classify(&group(records)))
}

fn classify(logs: &BTreeMap<TxnId, TxnLog>) -> TxnClasses {
    let mut c = TxnClasses::default();
    for (&id, t) in logs {
        if t.physical {
            c.physical.push(id);
        } else if t.logical {
            c.logical_only.push(id);
        } else {
            c.active.push(id);
        }
    }
    c
}

fn write_bytes(image: &mut [u8], addr: u64, data: &[u8]) -> Result<()> {
    let cap = image.len() as u64;
    image
        .get_mut(addr as usize..addr as usize + data.len())
        .ok_or(Error::Range {
            addr,
            len: data.len() as u64,
            capacity: cap,
        })?
        .copy_from_slice(data);
    Ok(())
}

/// Recovers `image` in place. `directory`, when given, lists the objects
/// whose consistency is tallied; otherwise tallies are per block.
pub fn recover(
    image: &mut [u8],
    opts: RecoveryOptions,
    directory: Option<&[Allocation]>,
) -> Result<RecoveryReport> {
    let sb = Superblock::decode(image)?;
    if (sb.nvm_bytes() as usize) > image.len() {
        return Err(Error::Recovery(format!(
            "image holds {} bytes, superblock needs {}",
            image.len(),
            sb.nvm_bytes()
        )));
    }
    let records = log::scan(region(image, sb.log)?, sb.log.base)?;
    let mut report = RecoveryReport {
        log_records: records.len() as u64,
        ..RecoveryReport::default()
    };
    let logs = group(records);
    let classes = classify(&logs);

    let mut restore: Vec<&LogRecord> = Vec::new();
    let mut forward: Vec<&LogRecord> = Vec::new();
    let mut checksum_images = Vec::new();
    for (&id, t) in &logs {
        if t.physical {
            report.committed.push(id);
            checksum_images.extend(t.checksums.iter());
            continue;
        }
        let mode = if t.redo { LogMode::Redo } else { LogMode::Undo };
        match (mode, t.logical) {
            (LogMode::Undo, _) => {
                restore.extend(&t.data);
                if !t.data.is_empty() {
                    report.rolled_back.push(id);
                }
            }
            (LogMode::Redo, false) => {
                if !t.data.is_empty() {
                    report.rolled_back.push(id);
                }
            }
            (LogMode::Redo, true) => {
                let complete = t.data.iter().all(|r| r.old.is_some());
                restore.extend(t.data.iter().filter(|r| r.old.is_some()));
                if opts.roll_forward_redo || !complete {
                    forward.extend(&t.data);
                    report.rolled_forward.push(id);
                    report.committed.push(id);
                } else {
                    report.rolled_back.push(id);
                }
            }
        }
    }
    debug_assert_eq!(
        classes.physical.len() + classes.logical_only.len() + classes.active.len(),
        logs.len()
    );

    restore.sort_by_key(|r| std::cmp::Reverse(r.seq));
    for r in restore {
        let old = match r.kind {
            RecordKind::UndoData => &r.image,
            _ => r.old.as_ref().expect("filtered above"),
        };
        write_bytes(image, r.addr, old)?;
    }
    checksum_images.sort_by_key(|(seq, _)| *seq);
    for (_, blocks) in checksum_images {
        for (addr, b) in blocks {
            write_bytes(image, *addr, b)?;
        }
    }

    if sb.checksums {
        let mut pages = Vec::new();
        for kind in [PoolKind::Key, PoolKind::FieldValue] {
            let range = sb.range(kind);
            let slice = &mut image[range.base as usize..range.end() as usize];
            let found: Vec<(PageReport, Vec<u8>)> = slice
                .par_chunks_mut(PAGE_SIZE as usize)
                .enumerate()
                .filter_map(|(i, page)| {
                    let check = verify_page(page, 0).expect("page-sized chunk");
                    if check.is_clean() {
                        return None;
                    }
                    let before = page.to_vec();
                    let c = correct_page(page, 0).expect("page-sized chunk");
                    Some((
                        PageReport {
                            page: range.base + i as u64 * PAGE_SIZE,
                            bad_columns: c.bad_columns,
                            bad_rows: c.bad_rows,
                            corrected: c.corrected,
                            uncorrectable: c.uncorrectable,
                            checksums_rebuilt: c.checksums_rebuilt,
                        },
                        before,
                    ))
                })
                .collect();
            pages.extend(found);
        }
        tally(&mut report, image, &pages, directory);
        report.pages = pages.into_iter().map(|(p, _)| p).collect();
    }

    forward.sort_by_key(|r| r.seq);
    for r in forward {
        let at = r.addr as usize;
        let old = image
            .get(at..at + r.image.len())
            .ok_or_else(|| {
                Error::Recovery(format!(
                    "redo record targets {:#x} beyond the image",
                    r.addr
                ))
            })?
            .to_vec();
        write_bytes(image, r.addr, &r.image)?;
        if sb.checksums && sb.kind_of(r.addr).is_some_and(PoolKind::checksummed) {
            let mut ds = DeltaSet::new();
            ds.record(r.addr, &old, &r.image)?;
            ds.apply(image)?;
        }
    }

    let log = sb.log;
    image[log.base as usize..log.end() as usize].fill(0);
    report.committed.sort_unstable();
    report.rolled_back.sort_unstable();
    Ok(report)
}

fn tally(
    report: &mut RecoveryReport,
    image: &[u8],
    pages: &[(PageReport, Vec<u8>)],
    directory: Option<&[Allocation]>,
) {
    let mut sorted: Vec<Allocation> = directory.map(<[_]>::to_vec).unwrap_or_default();
    sorted.sort_by_key(|a| a.addr);
    let overlapping = |lo: u64, hi: u64| -> Vec<Allocation> {
        let start = sorted.partition_point(|a| a.end() <= lo);
        sorted[start..]
            .iter()
            .take_while(|a| a.addr < hi)
            .filter(|a| a.end() > lo)
            .copied()
            .collect()
    };
    let mut detected = std::collections::BTreeSet::new();
    let mut uncorrected = std::collections::BTreeSet::new();
    for (p, before) in pages {
        let psa = p.page;
        report.corrected_blocks += p.corrected.len() as u64;
        report.uncorrectable_blocks += p.uncorrectable.len() as u64;
        report.detected_blocks += (p.corrected.len() + p.uncorrectable.len()) as u64;
        for &(r, c) in &p.corrected {
            let b = layout::data_block(psa, r, c);
            if directory.is_none() {
                detected.insert(b);
                continue;
            }
            for a in overlapping(b, b + BLOCK as u64) {
                let lo = a.addr.max(b);
                let hi = a.end().min(b + BLOCK as u64);
                let rel = (lo - psa) as usize..(hi - psa) as usize;
                if before[rel.clone()] != image[psa as usize + rel.start..psa as usize + rel.end] {
                    detected.insert(a.addr);
                }
            }
        }
        for &(r, c) in &p.uncorrectable {
            let b = layout::data_block(psa, r, c);
            if directory.is_none() {
                detected.insert(b);
                uncorrected.insert(b);
                continue;
            }
            for a in overlapping(b, b + BLOCK as u64) {
                detected.insert(a.addr);
                uncorrected.insert(a.addr);
            }
        }
    }
    report.detected = detected.len() as u64;
    report.uncorrected = uncorrected.len() as u64;
    report.corrected = report.detected - report.uncorrected;
    report.detected_addrs = detected.into_iter().collect();
    report.uncorrected_addrs = uncorrected.into_iter().collect();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, TrackerConfig};
    use crate::emu::{CacheConfig, Policy};
    use crate::pool::PoolConfig;
    use crate::txn::{Runtime, TxnState};

    fn cfg() -> Config {
        Config {
            cache: CacheConfig::new(32, 4, Policy::Lru, 1),
            pools: PoolConfig {
                key_pool_bytes: 8 * 4096,
                field_value_pool_bytes: 8 * 4096,
                log_pool_bytes: 32 * 4096,
            },
            tracker: TrackerConfig {
                capacity_blocks: Some(64),
            },
            ..Config::default()
        }
    }

    #[test]
    fn quiescent_crash_reports_nothing() {
        let mut rt = Runtime::init(&cfg()).unwrap();
        let o = rt.alloc(PoolKind::FieldValue, 100).unwrap();
        let t = rt.tx_start(LogMode::Undo, false).unwrap();
        rt.tx_write(t, &o, &[5; 100]).unwrap();
        rt.tx_lcommit(t).unwrap();
        let mut img = rt.crash().into_inner();
        let before = img.clone();
        let rep = recover(&mut img, RecoveryOptions::default(), None).unwrap();
        assert!(rep.changed_nothing());
        assert_eq!(img, before);
    }

    #[test]
    fn active_undo_txn_is_rolled_back() {
        let mut rt = Runtime::init(&cfg()).unwrap();
        let o = rt.alloc(PoolKind::FieldValue, 100).unwrap();
        rt.bulk_load(&[(o, vec![1; 100])]).unwrap();
        let t = rt.tx_start(LogMode::Undo, false).unwrap();
        rt.tx_write(t, &o, &[2; 100]).unwrap();
        let mut img = rt.crash().into_inner();
        assert_eq!(img[o.addr as usize], 2);
        let rep = recover(&mut img, RecoveryOptions::default(), None).unwrap();
        assert_eq!(rep.rolled_back, vec![t]);
        assert_eq!(&img[o.addr as usize..o.end() as usize], &[1; 100][..]);
        let again = recover(&mut img, RecoveryOptions::default(), None).unwrap();
        assert!(again.changed_nothing());
    }

    #[test]
    fn classification_by_markers() {
        let mut rt = Runtime::init(&cfg()).unwrap();
        let a = rt.alloc(PoolKind::Key, 16).unwrap();
        let b = rt.alloc(PoolKind::Key, 16).unwrap();
        let t1 = rt.tx_start(LogMode::Undo, true).unwrap();
        rt.tx_write(t1, &a, &[1; 16]).unwrap();
        rt.tx_lcommit(t1).unwrap();
        let t2 = rt.tx_start(LogMode::Undo, true).unwrap();
        rt.tx_write(t2, &b, &[1; 16]).unwrap();
        let img = rt.crash().into_inner();
        let c = classify_txns(&img).unwrap();
        assert_eq!(c.logical_only, vec![t1]);
        assert_eq!(c.active, vec![t2]);
        assert!(c.physical.is_empty());
    }

    #[test]
    fn physical_marker_wins() {
        let mut rt = Runtime::init(&cfg()).unwrap();
        let sb = *rt.superblock();
        let mut img = rt.crash().into_inner();
        let mut at = sb.log.base as usize;
        for r in [
            LogRecord::undo(9, sb.key.base, 0, vec![0; 16]),
            LogRecord::marker(RecordKind::LogicalCommit, 9, 1, false),
            LogRecord::marker(RecordKind::PhysicalCommit, 9, 2, false),
        ] {
            let b = r.encode();
            img[at..at + b.len()].copy_from_slice(&b);
            at += b.len().div_ceil(BLOCK) * BLOCK;
        }
        assert_eq!(classify_txns(&img).unwrap().physical, vec![9]);
        let rep = recover(&mut img, RecoveryOptions::default(), None).unwrap();
        assert_eq!(rep.committed, vec![9]);
        assert!(img[sb.log.base as usize..sb.log.end() as usize]
            .iter()
            .all(|&b| b == 0));
    }

    #[test]
    fn framing_error_is_reported() {
        let mut rt = Runtime::init(&cfg()).unwrap();
        let sb = *rt.superblock();
        let mut img = rt.crash().into_inner();
        img[sb.log.base as usize + 64] = 0x5A;
        assert!(matches!(
            recover(&mut img, RecoveryOptions::default(), None),
            Err(Error::Recovery(_))
        ));
    }

    #[test]
    fn stale_skipped_object_is_repaired() {
        // Tracker smaller than the cache: the object is dropped from the
        // tracker while its line is still dirty in the cache.
        let mut c = cfg();
        c.tracker.capacity_blocks = Some(2);
        let mut rt = Runtime::init(&c).unwrap();
        let objs: Vec<_> = (0..3)
            .map(|_| rt.alloc(PoolKind::FieldValue, 64).unwrap())
            .collect();
        rt.bulk_load(&objs.iter().map(|o| (*o, vec![1; 64])).collect::<Vec<_>>())
            .unwrap();
        let t = rt.tx_start(LogMode::Undo, true).unwrap();
        rt.tx_write(t, &objs[0], &[7; 64]).unwrap();
        rt.tx_lcommit(t).unwrap();
        let t2 = rt.tx_start(LogMode::Undo, true).unwrap();
        rt.tx_read(t2, &objs[1]).unwrap();
        rt.tx_read(t2, &objs[2]).unwrap();
        rt.tx_lcommit(t2).unwrap();
        assert_eq!(rt.state(t), Some(TxnState::PhysicallyCommitted));
        assert!(rt.emulator().is_dirty_resident(objs[0].addr));
        let mut img = rt.crash().into_inner();
        assert_eq!(img[objs[0].addr as usize], 1);
        let rep = recover(&mut img, RecoveryOptions::default(), Some(&objs)).unwrap();
        assert_eq!((rep.detected, rep.corrected, rep.uncorrected), (1, 1, 0));
        assert_eq!(
            &img[objs[0].addr as usize..objs[0].end() as usize],
            &[7; 64][..]
        );
    }

    #[test]
    fn logical_only_redo_cancel_and_roll_forward() {
        let mut c = cfg();
        c.tracker.capacity_blocks = Some(64);
        for roll in [false, true] {
            let mut rt = Runtime::init(&c).unwrap();
            let o = rt.alloc(PoolKind::FieldValue, 100).unwrap();
            rt.bulk_load(&[(o, vec![1; 100])]).unwrap();
            let t = rt.tx_start(LogMode::Redo, true).unwrap();
            rt.tx_write(t, &o, &[2; 100]).unwrap();
            assert_eq!(rt.tx_lcommit(t).unwrap(), TxnState::LogicallyCommitted);
            rt.emulator_mut().flush_range(o.addr, 100).unwrap();
            let mut img = rt.crash().into_inner();
            let opts = RecoveryOptions {
                roll_forward_redo: roll,
            };
            let rep = recover(&mut img, opts, Some(&[o])).unwrap();
            let want = if roll { 2 } else { 1 };
            assert_eq!(&img[o.addr as usize..o.end() as usize], &[want; 100][..]);
            assert_eq!(rep.detected, 0);
            assert_eq!(rep.committed.contains(&t), roll);
            let psa = layout::page_start(o.addr);
            assert!(verify_page(img.as_mut_slice(), psa).unwrap().is_clean());
        }
    }
}
