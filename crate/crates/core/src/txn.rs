//! Undo and redo logging transactions with optional flush elision.
//!
//! A transaction that finishes its operations is *logically* committed.
//! With elision on, the object flushes it would normally issue are left
//! pending in the locality tracker; each is later either issued (the object
//! was reused while presumed cached) or dropped (the object aged out of the
//! tracker, so the cache has presumably written it back). Once every pending
//! flush is decided the transaction's checksum updates are persisted, a
//! physical-commit marker is written and its log space is reclaimed.
//!
//! Physical commit happens in logical-commit order, so a transaction never
//! becomes durable ahead of one it may have read from.
//!
//! Crash consistency holds at operation boundaries: a crash is modelled as
//! happening between two public calls, never inside one.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checksum::DeltaSet;
use crate::config::Config;
use crate::emu::{Emulator, PersistentImage, BLOCK};
use crate::error::{Error, Result};
use crate::log::{LogRecord, RecordKind};
use crate::pool::{blocks_spanned, Allocation, Pair, PoolKind, PoolSet, Superblock};
use crate::tracker::{Access, Resolved, Tracked, Tracker, TrackerStats};

pub type TxnId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogMode {
    Undo,
    Redo,
}

impl LogMode {
    pub fn name(self) -> &'static str {
        match self {
            LogMode::Undo => "undo",
            LogMode::Redo => "redo",
        }
    }
}

impl fmt::Display for LogMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for LogMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "undo" => Ok(LogMode::Undo),
            "redo" => Ok(LogMode::Redo),
            other => Err(Error::config(format!("unknown logging mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxnState {
    Active,
    LogicallyCommitted,
    PhysicallyCommitted,
    Aborted,
}

impl TxnState {
    pub fn name(self) -> &'static str {
        match self {
            TxnState::Active => "active",
            TxnState::LogicallyCommitted => "logically committed",
            TxnState::PhysicallyCommitted => "physically committed",
            TxnState::Aborted => "aborted",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Flushed,
    SkippedWithChecksum,
}

/// Flush and barrier counts broken down by purpose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeCounters {
    pub object_flushes: u64,
    pub log_flushes: u64,
    pub marker_flushes: u64,
    pub checksum_flushes: u64,
    pub reclaim_flushes: u64,
    pub object_barriers: u64,
    pub log_barriers: u64,
    pub marker_barriers: u64,
    pub checksum_barriers: u64,
    pub reclaim_barriers: u64,
    /// Object blocks whose flush was dropped.
    pub object_blocks_skipped: u64,
    pub completed_on_reuse: u64,
    pub skipped_on_eviction: u64,
    pub drained: u64,
    pub txns_started: u64,
    pub undo_txns: u64,
    pub redo_txns: u64,
    pub read_only_txns: u64,
    pub physically_committed: u64,
    pub aborted: u64,
}

impl RuntimeCounters {
    pub fn object_and_log_flushes(&self) -> u64 {
        self.object_flushes + self.log_flushes
    }

    pub fn object_and_log_barriers(&self) -> u64 {
        self.object_barriers + self.log_barriers
    }

    pub fn total_flushes(&self) -> u64 {
        self.object_flushes
            + self.log_flushes
            + self.marker_flushes
            + self.checksum_flushes
            + self.reclaim_flushes
    }

    pub fn total_barriers(&self) -> u64 {
        self.object_barriers
            + self.log_barriers
            + self.marker_barriers
            + self.checksum_barriers
            + self.reclaim_barriers
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Cat {
    Object,
    Log,
    Marker,
    Checksum,
    Reclaim,
}

#[derive(Clone, Debug)]
struct WriteEntry {
    obj: Allocation,
    old: Option<Vec<u8>>,
    new: Vec<u8>,
}

#[derive(Debug)]
struct Txn {
    mode: LogMode,
    elide: bool,
    state: TxnState,
    writes: Vec<WriteEntry>,
    /// Latest write-set entry per object address, for read-own-writes.
    latest: HashMap<u64, usize>,
    pending: u32,
    deltas: DeltaSet,
    data_logs: Vec<Allocation>,
    markers: Vec<Allocation>,
}

/// Snapshot of a live transaction's write set, for test oracles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxnView {
    pub id: TxnId,
    pub mode: LogMode,
    pub elide: bool,
    pub state: TxnState,
    pub pending: u32,
    pub objects: Vec<Allocation>,
}

pub struct Runtime {
    cfg: Config,
    emu: Emulator,
    sb: Superblock,
    pools: PoolSet,
    tracker: Tracker,
    txns: HashMap<TxnId, Txn>,
    finished: HashMap<TxnId, TxnState>,
    commit_queue: VecDeque<TxnId>,
    commit_order: Vec<TxnId>,
    commit_fences: Vec<u64>,
    next_txn: TxnId,
    next_seq: u32,
    counters: RuntimeCounters,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("emu", &self.emu)
            .field("live_txns", &self.txns.len())
            .field("commit_queue", &self.commit_queue.len())
            .field("counters", &self.counters)
            .finish_non_exhaustive()
    }
}

impl Runtime {
    /// Formats fresh NVM: zeroed pools plus a durable superblock.
    pub fn init(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let sb = PoolSet::layout(&cfg.pools, cfg.checksums)?;
        let mut emu = Emulator::new(cfg.cache.clone(), sb.nvm_bytes() as usize)?;
        emu.store(Superblock::ADDR, &sb.encode())?;
        emu.flush_line(Superblock::ADDR)?;
        emu.fence();
        emu.reset_counters();
        Runtime::assemble(cfg, emu, sb, PoolSet::new(&sb), 1)
    }

    /// Resumes on a recovered image. `live` lists the allocations the
    /// application still owns; `first_txn` is the next transaction id.
    pub fn reopen(
        cfg: &Config,
        image: PersistentImage,
        live: impl IntoIterator<Item = Allocation>,
        first_txn: TxnId,
    ) -> Result<Self> {
        cfg.validate()?;
        let sb = Superblock::decode(&image[..Superblock::LEN])?;
        if sb.nvm_bytes() as usize != image.capacity() {
            return Err(Error::config(format!(
                "image holds {} bytes but its superblock describes {}",
                image.capacity(),
                sb.nvm_bytes()
            )));
        }
        let pools = PoolSet::rebuild(&sb, live.into_iter().filter(|a| a.pool != PoolKind::Log))?;
        let emu = Emulator::from_image(cfg.cache.clone(), image)?;
        let mut cfg = cfg.clone();
        cfg.checksums = sb.checksums;
        Runtime::assemble(&cfg, emu, sb, pools, first_txn)
    }

    fn assemble(
        cfg: &Config,
        emu: Emulator,
        sb: Superblock,
        pools: PoolSet,
        first_txn: TxnId,
    ) -> Result<Self> {
        Ok(Runtime {
            tracker: Tracker::new(cfg.tracker_capacity())?,
            cfg: cfg.clone(),
            emu,
            sb,
            pools,
            txns: HashMap::new(),
            finished: HashMap::new(),
            commit_queue: VecDeque::new(),
            commit_order: Vec::new(),
            commit_fences: Vec::new(),
            next_txn: first_txn.max(1),
            next_seq: 0,
            counters: RuntimeCounters::default(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn superblock(&self) -> &Superblock {
        &self.sb
    }

    pub fn emulator(&self) -> &Emulator {
        &self.emu
    }

    pub fn emulator_mut(&mut self) -> &mut Emulator {
        &mut self.emu
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    pub fn tracker_stats(&self) -> TrackerStats {
        self.tracker.stats()
    }

    pub fn pools(&self) -> &PoolSet {
        &self.pools
    }

    pub fn counters(&self) -> RuntimeCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = RuntimeCounters::default();
        self.emu.reset_counters();
    }

    pub fn next_txn_id(&self) -> TxnId {
        self.next_txn
    }

    /// Transactions in the order they became physically committed.
    pub fn commit_order(&self) -> &[TxnId] {
        &self.commit_order
    }

    /// For each entry of [`Runtime::commit_order`], the emulator fence
    /// count at which its physical-commit marker became durable.
    pub fn commit_fences(&self) -> &[u64] {
        &self.commit_fences
    }

    pub fn state(&self, txn: TxnId) -> Option<TxnState> {
        self.txns
            .get(&txn)
            .map(|t| t.state)
            .or_else(|| self.finished.get(&txn).copied())
    }

    pub fn pending_count(&self, txn: TxnId) -> u32 {
        self.txns.get(&txn).map_or(0, |t| t.pending)
    }

    /// Transactions that are neither physically committed nor aborted.
    pub fn in_flight(&self) -> Vec<TxnView> {
        let mut v: Vec<TxnView> = self
            .txns
            .iter()
            .map(|(&id, t)| TxnView {
                id,
                mode: t.mode,
                elide: t.elide,
                state: t.state,
                pending: t.pending,
                objects: t.writes.iter().map(|w| w.obj).collect(),
            })
            .collect();
        v.sort_by_key(|t| t.id);
        v
    }

    /// Live allocations in the key and field/value pools.
    pub fn live_objects(&self) -> Vec<Allocation> {
        let mut v: Vec<Allocation> = [PoolKind::Key, PoolKind::FieldValue]
            .iter()
            .flat_map(|&k| self.pools.pool(k).live().copied())
            .collect();
        v.sort_by_key(|a| a.addr);
        v
    }

    /// Discards the cache and returns the durable image. The runtime must
    /// not be used afterwards except through [`Runtime::reopen`].
    pub fn crash(&mut self) -> PersistentImage {
        self.emu.crash()
    }

    fn checksummed(&self, addr: u64) -> bool {
        self.cfg.checksums && self.sb.kind_of(addr).is_some_and(PoolKind::checksummed)
    }

    fn flush(&mut self, cat: Cat, addr: u64, len: u64) -> Result<()> {
        let n = self.emu.flush_range(addr, len as usize)?;
        let c = &mut self.counters;
        match cat {
            Cat::Object => c.object_flushes += n,
            Cat::Log => c.log_flushes += n,
            Cat::Marker => c.marker_flushes += n,
            Cat::Checksum => c.checksum_flushes += n,
            Cat::Reclaim => c.reclaim_flushes += n,
        }
        Ok(())
    }

    fn fence(&mut self, cat: Cat) {
        self.emu.fence();
        let c = &mut self.counters;
        match cat {
            Cat::Object => c.object_barriers += 1,
            Cat::Log => c.log_barriers += 1,
            Cat::Marker => c.marker_barriers += 1,
            Cat::Checksum => c.checksum_barriers += 1,
            Cat::Reclaim => c.reclaim_barriers += 1,
        }
    }

    fn seq(&mut self) -> u32 {
        let s = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        s
    }

    /// Allocates a log record, stores it and flushes its blocks.
    fn write_record(&mut self, rec: &LogRecord, cat: Cat) -> Result<Allocation> {
        let bytes = rec.encode();
        let a = self.pools.alloc(PoolKind::Log, bytes.len() as u64)?;
        self.emu.store(a.addr, &bytes)?;
        self.flush(cat, a.addr, a.size)?;
        Ok(a)
    }

    // ---- allocation ------------------------------------------------------

    pub fn alloc(&mut self, kind: PoolKind, size: u64) -> Result<Allocation> {
        if kind == PoolKind::Log {
            return Err(Error::usage("the log pool is reserved for the runtime"));
        }
        self.pools.alloc(kind, size)
    }

    pub fn alloc_pair(&mut self, field_size: u64, value_size: u64) -> Result<Pair> {
        self.pools.alloc_pair(field_size, value_size)
    }

    /// Returns an object to its pool. Its bytes are left in place, so page
    /// checksums stay valid without further writes. The object must not be
    /// part of any in-flight transaction.
    pub fn pfree(&mut self, obj: &Allocation) -> Result<()> {
        if !self.pools.pool(obj.pool).is_live(obj.addr) {
            return Err(Error::usage(format!(
                "{:#x} is not a live allocation",
                obj.addr
            )));
        }
        if let Some(t) = self
            .txns
            .iter()
            .find(|(_, t)| t.writes.iter().any(|w| w.obj.addr == obj.addr))
        {
            return Err(Error::usage(format!(
                "{:#x} is still written by in-flight transaction {}",
                obj.addr, t.0
            )));
        }
        self.tracker.remove(obj.addr);
        self.pools.release(obj)?;
        Ok(())
    }

    /// Writes initial contents outside any transaction: stores, flushes,
    /// and brings checksums up to date.
    pub fn bulk_load(&mut self, items: &[(Allocation, Vec<u8>)]) -> Result<()> {
        let mut ds = DeltaSet::new();
        for (obj, data) in items {
            if data.len() as u64 != obj.size {
                return Err(Error::usage(format!(
                    "bulk load of {:#x}: {} bytes for a {}-byte object",
                    obj.addr,
                    data.len(),
                    obj.size
                )));
            }
            let old = self.emu.load(obj.addr, data.len())?;
            self.emu.store(obj.addr, data)?;
            self.emu.flush_range(obj.addr, data.len())?;
            if self.checksummed(obj.addr) {
                ds.record(obj.addr, &old, data)?;
            }
        }
        ds.apply(&mut self.emu)?;
        self.emu.fence();
        Ok(())
    }

    // ---- transactions ----------------------------------------------------

    pub fn tx_start(&mut self, mode: LogMode, elide: bool) -> Result<TxnId> {
        if elide && !self.cfg.checksums {
            return Err(Error::config("flush elision requires page checksums"));
        }
        let id = self.next_txn;
        self.next_txn += 1;
        self.counters.txns_started += 1;
        match mode {
            LogMode::Undo => self.counters.undo_txns += 1,
            LogMode::Redo => self.counters.redo_txns += 1,
        }
        self.txns.insert(
            id,
            Txn {
                mode,
                elide,
                state: TxnState::Active,
                writes: Vec::new(),
                latest: HashMap::new(),
                pending: 0,
                deltas: DeltaSet::new(),
                data_logs: Vec::new(),
                markers: Vec::new(),
            },
        );
        Ok(id)
    }

    fn txn(&self, id: TxnId) -> Result<&Txn> {
        self.txns
            .get(&id)
            .ok_or_else(|| match self.finished.get(&id) {
                Some(s) => Error::State {
                    txn: id,
                    state: s.name(),
                    expected: "active",
                },
                None => Error::usage(format!("unknown transaction {id}")),
            })
    }

    fn expect_state(&self, id: TxnId, want: TxnState) -> Result<&Txn> {
        let t = self.txn(id)?;
        if t.state != want {
            return Err(Error::State {
                txn: id,
                state: t.state.name(),
                expected: want.name(),
            });
        }
        Ok(t)
    }

    fn check_object(&self, obj: &Allocation) -> Result<()> {
        if !self.pools.pool(obj.pool).is_live(obj.addr) && !self.is_pair_member(obj) {
            return Err(Error::usage(format!(
                "{:#x} is not an allocated object",
                obj.addr
            )));
        }
        Ok(())
    }

    fn is_pair_member(&self, obj: &Allocation) -> bool {
        obj.pool == PoolKind::FieldValue
            && self
                .sb
                .kind_of(obj.addr)
                .is_some_and(|k| k == PoolKind::FieldValue)
    }

    fn tracked(obj: &Allocation) -> Tracked {
        Tracked {
            id: obj.addr,
            addr: obj.addr,
            size: obj.size,
            blocks: blocks_spanned(obj.addr, obj.size).count() as u32,
        }
    }

    pub fn tx_write(&mut self, id: TxnId, obj: &Allocation, data: &[u8]) -> Result<()> {
        let t = self.expect_state(id, TxnState::Active)?;
        let (mode, elide) = (t.mode, t.elide);
        self.check_object(obj)?;
        if data.len() as u64 != obj.size {
            return Err(Error::usage(format!(
                "write of {} bytes to a {}-byte object",
                data.len(),
                obj.size
            )));
        }
        match mode {
            LogMode::Undo => {
                let old = self.emu.load(obj.addr, data.len())?;
                let seq = self.seq();
                let log =
                    self.write_record(&LogRecord::undo(id, obj.addr, seq, old.clone()), Cat::Log)?;
                self.fence(Cat::Log);
                self.emu.store(obj.addr, data)?;
                let checksummed = self.checksummed(obj.addr);
                let t = self.txns.get_mut(&id).unwrap();
                if checksummed {
                    t.deltas.record(obj.addr, &old, data)?;
                }
                t.data_logs.push(log);
                t.latest.insert(obj.addr, t.writes.len());
                t.writes.push(WriteEntry {
                    obj: *obj,
                    old: Some(old),
                    new: data.to_vec(),
                });
                self.persist_object(id, obj, elide)?;
            }
            LogMode::Redo => {
                let old = if self.cfg.checksums {
                    Some(self.current_value(id, obj)?)
                } else {
                    None
                };
                let seq = self.seq();
                let log = self.write_record(
                    &LogRecord::redo(id, obj.addr, seq, data.to_vec(), old.clone()),
                    Cat::Log,
                )?;
                let t = self.txns.get_mut(&id).unwrap();
                t.data_logs.push(log);
                t.latest.insert(obj.addr, t.writes.len());
                t.writes.push(WriteEntry {
                    obj: *obj,
                    old,
                    new: data.to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Value of `obj` as transaction `id` sees it.
    fn current_value(&mut self, id: TxnId, obj: &Allocation) -> Result<Vec<u8>> {
        let t = self.txn(id)?;
        if t.mode == LogMode::Redo {
            if let Some(&i) = t.latest.get(&obj.addr) {
                let w = &t.writes[i];
                if w.obj.size == obj.size {
                    return Ok(w.new.clone());
                }
            }
        }
        self.emu.load(obj.addr, obj.size as usize)
    }

    /// Flushes the object now, or hands it to the tracker when eliding.
    fn persist_object(&mut self, id: TxnId, obj: &Allocation, elide: bool) -> Result<()> {
        if elide {
            let access = self.tracker.record_access(Runtime::tracked(obj), true, id);
            if access.new_pending {
                self.txns.get_mut(&id).unwrap().pending += 1;
            }
            self.handle_access(access)?;
        } else {
            self.flush(Cat::Object, obj.addr, obj.size)?;
            self.fence(Cat::Object);
        }
        Ok(())
    }

    pub fn tx_read(&mut self, id: TxnId, obj: &Allocation) -> Result<Vec<u8>> {
        let t = self.expect_state(id, TxnState::Active)?;
        let elide = t.elide;
        self.check_object(obj)?;
        let v = self.current_value(id, obj)?;
        if elide {
            let access = self.tracker.record_access(Runtime::tracked(obj), false, id);
            self.handle_access(access)?;
        }
        Ok(v)
    }

    /// Ends the transaction's operations. Returns the resulting state, which
    /// is `PhysicallyCommitted` when nothing was left pending.
    pub fn tx_lcommit(&mut self, id: TxnId) -> Result<TxnState> {
        let t = self.expect_state(id, TxnState::Active)?;
        let (mode, elide) = (t.mode, t.elide);
        if t.writes.is_empty() {
            let t = self.txns.remove(&id).unwrap();
            debug_assert_eq!(t.pending, 0);
            self.finished.insert(id, TxnState::PhysicallyCommitted);
            self.counters.read_only_txns += 1;
            return Ok(TxnState::PhysicallyCommitted);
        }
        if mode == LogMode::Redo {
            self.fence(Cat::Log);
        }
        let seq = self.seq();
        let marker = self.write_record(
            &LogRecord::marker(RecordKind::LogicalCommit, id, seq, mode == LogMode::Redo),
            Cat::Marker,
        )?;
        self.fence(Cat::Marker);
        {
            let t = self.txns.get_mut(&id).unwrap();
            t.markers.push(marker);
            t.state = TxnState::LogicallyCommitted;
        }
        self.commit_queue.push_back(id);
        if mode == LogMode::Redo {
            let writes = self.txns[&id].writes.clone();
            for w in &writes {
                self.emu.store(w.obj.addr, &w.new)?;
                if self.checksummed(w.obj.addr) {
                    let old = match &w.old {
                        Some(o) => o.clone(),
                        None => return Err(Error::Internal("redo record lacks old image".into())),
                    };
                    self.txns
                        .get_mut(&id)
                        .unwrap()
                        .deltas
                        .record(w.obj.addr, &old, &w.new)?;
                }
                self.persist_object(id, &w.obj, elide)?;
            }
        }
        self.try_commit()?;
        Ok(self.state(id).unwrap())
    }

    /// Alias of [`Runtime::tx_lcommit`].
    pub fn tx_end(&mut self, id: TxnId) -> Result<TxnState> {
        self.tx_lcommit(id)
    }

    pub fn tx_abort(&mut self, id: TxnId) -> Result<()> {
        let t = self.expect_state(id, TxnState::Active)?;
        if t.mode == LogMode::Undo {
            let writes = t.writes.clone();
            for w in writes.iter().rev() {
                let old = w.old.as_ref().expect("undo entries keep the old image");
                self.emu.store(w.obj.addr, old)?;
                self.flush(Cat::Object, w.obj.addr, w.obj.size)?;
            }
            if !writes.is_empty() {
                self.fence(Cat::Object);
            }
            self.tracker.cancel(id);
        }
        let mut t = self.txns.remove(&id).unwrap();
        t.state = TxnState::Aborted;
        t.pending = 0;
        self.reclaim(&t)?;
        self.finished.insert(id, TxnState::Aborted);
        self.counters.aborted += 1;
        Ok(())
    }

    fn handle_access(&mut self, access: Access) -> Result<()> {
        if let Some(r) = access.completed {
            self.flush(Cat::Object, r.object.addr, r.object.size)?;
            self.counters.completed_on_reuse += 1;
            self.resolved(r.txn)?;
        }
        for r in access.skipped() {
            self.skip(&r);
            self.counters.skipped_on_eviction += 1;
            self.resolved(r.txn)?;
        }
        Ok(())
    }

    fn skip(&mut self, r: &Resolved) {
        self.emu.record_skipped(r.object.blocks as u64);
        self.counters.object_blocks_skipped += r.object.blocks as u64;
    }

    fn resolved(&mut self, id: TxnId) -> Result<()> {
        let t = self
            .txns
            .get_mut(&id)
            .ok_or_else(|| Error::Internal(format!("resolution for finished transaction {id}")))?;
        t.pending = t
            .pending
            .checked_sub(1)
            .ok_or_else(|| Error::Internal(format!("transaction {id} has no pending flush")))?;
        if t.pending == 0 && t.state == TxnState::LogicallyCommitted {
            self.try_commit()?;
        }
        Ok(())
    }

    /// Settles one pending flush of a logically committed transaction.
    pub fn resolve_pending(&mut self, id: TxnId, obj: &Allocation, how: Resolution) -> Result<()> {
        self.expect_state(id, TxnState::LogicallyCommitted)?;
        if self.tracker.pending_owner(obj.addr) != Some(id) {
            return Err(Error::Internal(format!(
                "transaction {id} has no pending flush for {:#x}",
                obj.addr
            )));
        }
        let (object, _) = self.tracker.remove(obj.addr).unwrap();
        let r = Resolved { object, txn: id };
        match how {
            Resolution::Flushed => {
                self.flush(Cat::Object, object.addr, object.size)?;
                self.counters.completed_on_reuse += 1;
            }
            Resolution::SkippedWithChecksum => {
                self.skip(&r);
                self.counters.drained += 1;
            }
        }
        self.resolved(id)
    }

    /// Settles every pending flush of `id` by dropping it.
    pub fn drain(&mut self, id: TxnId) -> Result<()> {
        if self.finished.contains_key(&id) {
            return Ok(());
        }
        let t = self.txn(id)?;
        if t.state != TxnState::LogicallyCommitted {
            return match t.state {
                TxnState::Active => Err(Error::State {
                    txn: id,
                    state: t.state.name(),
                    expected: TxnState::LogicallyCommitted.name(),
                }),
                _ => Ok(()),
            };
        }
        for r in self.tracker.drain(id) {
            self.skip(&r);
            self.counters.drained += 1;
            self.resolved(id)?;
        }
        Ok(())
    }

    /// Drains every logically committed transaction.
    pub fn drain_all(&mut self) -> Result<()> {
        let ids: Vec<TxnId> = self.commit_queue.iter().copied().collect();
        for id in ids {
            if self.state(id) == Some(TxnState::LogicallyCommitted) {
                self.drain(id)?;
            }
        }
        Ok(())
    }

    fn try_commit(&mut self) -> Result<()> {
        while let Some(&id) = self.commit_queue.front() {
            let t = &self.txns[&id];
            if t.state != TxnState::LogicallyCommitted || t.pending != 0 {
                break;
            }
            self.commit_queue.pop_front();
            self.physical_commit(id)?;
        }
        Ok(())
    }

    /// Makes `id` durable: the physical-commit marker carries the new
    /// contents of every checksum block the transaction changes, so once it
    /// is persisted the checksum update can be replayed.
    fn physical_commit(&mut self, id: TxnId) -> Result<()> {
        let deltas = std::mem::take(&mut self.txns.get_mut(&id).unwrap().deltas);
        let checksums = deltas.resolve(&mut self.emu)?;
        let redo = self.txns[&id].mode == LogMode::Redo;
        let seq = self.seq();
        let marker = self.write_record(
            &LogRecord::physical_commit(id, seq, redo, &checksums),
            Cat::Marker,
        )?;
        self.fence(Cat::Marker);
        self.commit_fences.push(self.emu.fence_count());
        if !checksums.is_empty() {
            for (addr, block) in &checksums {
                self.emu.store(*addr, block)?;
                self.flush(Cat::Checksum, *addr, BLOCK as u64)?;
            }
            self.fence(Cat::Checksum);
        }
        let mut t = self.txns.remove(&id).unwrap();
        t.markers.push(marker);
        t.state = TxnState::PhysicallyCommitted;
        self.finished.insert(id, TxnState::PhysicallyCommitted);
        self.commit_order.push(id);
        self.counters.physically_committed += 1;
        self.reclaim(&t)
    }

    /// Zeroes a finished transaction's log space (data records first, then
    /// markers) and returns it to the pool.
    fn reclaim(&mut self, t: &Txn) -> Result<()> {
        for group in [&t.data_logs, &t.markers] {
            if group.is_empty() {
                continue;
            }
            for a in group {
                let len = a.blocks as usize * BLOCK;
                self.emu.store(a.addr, &vec![0u8; len])?;
                self.flush(Cat::Reclaim, a.addr, len as u64)?;
            }
            self.fence(Cat::Reclaim);
            for a in group {
                self.pools.release(a)?;
            }
        }
        Ok(())
    }
}
