//! Byte-addressable persistent memory behind a write-back cache.
//!
//! Stores land in the cache only. The persistent image changes when a dirty
//! line is flushed or when the replacement policy evicts it. `crash` throws
//! away every cached line without writing anything back, so the returned
//! image is exactly what would survive a power failure.

mod policy;

use std::fmt;
use std::ops::Deref;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use policy::Replacer;
pub use policy::{InsertPosition, Policy, BIP_THROTTLE};

/// Cache block size in bytes.
pub const BLOCK: usize = 64;
const BLOCK_U64: u64 = BLOCK as u64;

/// Tag bit marking lines that hold volatile (DRAM) data rather than NVM.
const VOLATILE_TAG: u64 = 1 << 63;
const INVALID: u64 = u64::MAX;

pub const DIRTINESS_BUCKETS: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub sets: usize,
    pub ways: usize,
    pub policy: Policy,
    pub seed: u64,
}

impl Default for CacheConfig {
    /// About 2 MiB with 11 ways.
    fn default() -> Self {
        CacheConfig {
            sets: 2978,
            ways: 11,
            policy: Policy::Lru,
            seed: 0,
        }
    }
}

impl CacheConfig {
    pub fn new(sets: usize, ways: usize, policy: Policy, seed: u64) -> Self {
        CacheConfig {
            sets,
            ways,
            policy,
            seed,
        }
    }

    /// Geometry holding `bytes` of data at the given associativity, rounding
    /// the set count down.
    pub fn with_capacity(bytes: usize, ways: usize, policy: Policy, seed: u64) -> Self {
        let sets = bytes / (ways.max(1) * BLOCK);
        CacheConfig::new(sets, ways, policy, seed)
    }

    /// A 19.25 MiB, 11-way last-level cache.
    pub fn full_scale(policy: Policy, seed: u64) -> Self {
        CacheConfig::with_capacity(19 * 1024 * 1024 + 256 * 1024, 11, policy, seed)
    }

    pub fn capacity_bytes(&self) -> usize {
        self.sets * self.ways * BLOCK
    }

    pub fn capacity_blocks(&self) -> usize {
        self.sets * self.ways
    }

    pub fn validate(&self) -> Result<()> {
        if self.sets == 0 {
            return Err(Error::config("cache must have at least one set"));
        }
        if self.ways == 0 || self.ways > 64 {
            return Err(Error::config(format!(
                "associativity must be in 1..=64, got {}",
                self.ways
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlushCounters {
    pub flushes_issued: u64,
    pub flushes_skipped: u64,
    pub barriers_issued: u64,
    pub dirty_bytes_flushed: u64,
    pub lines_flushed: u64,
    pub writebacks_by_eviction: u64,
}

impl FlushCounters {
    /// Fraction of bytes in flushed lines that were actually modified.
    pub fn average_dirtiness(&self) -> f64 {
        if self.lines_flushed == 0 {
            0.0
        } else {
            self.dirty_bytes_flushed as f64 / (BLOCK_U64 * self.lines_flushed) as f64
        }
    }

    pub fn saturating_sub(&self, earlier: &FlushCounters) -> FlushCounters {
        FlushCounters {
            flushes_issued: self.flushes_issued.saturating_sub(earlier.flushes_issued),
            flushes_skipped: self.flushes_skipped.saturating_sub(earlier.flushes_skipped),
            barriers_issued: self.barriers_issued.saturating_sub(earlier.barriers_issued),
            dirty_bytes_flushed: self
                .dirty_bytes_flushed
                .saturating_sub(earlier.dirty_bytes_flushed),
            lines_flushed: self.lines_flushed.saturating_sub(earlier.lines_flushed),
            writebacks_by_eviction: self
                .writebacks_by_eviction
                .saturating_sub(earlier.writebacks_by_eviction),
        }
    }
}

/// Durable contents of the emulated NVM.
#[derive(Clone, PartialEq, Eq)]
pub struct PersistentImage(Vec<u8>);

impl PersistentImage {
    pub fn zeroed(capacity: usize) -> Self {
        PersistentImage(vec![0; capacity])
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        PersistentImage(bytes)
    }

    pub fn capacity(&self) -> usize {
        self.0.len()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn as_bytes_mut(&mut self) -> &mut [u8] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.0
    }
}

impl Deref for PersistentImage {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for PersistentImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nonzero = self.0.iter().filter(|&&b| b != 0).count();
        f.debug_struct("PersistentImage")
            .field("capacity", &self.0.len())
            .field("nonzero_bytes", &nonzero)
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    Store {
        addr: u64,
        len: u64,
    },
    Load {
        addr: u64,
        len: u64,
    },
    Flush {
        addr: u64,
    },
    Fence,
    /// A valid NVM line left the cache; its dirty bytes (if any) were written back.
    Evict {
        addr: u64,
        dirty_bytes: u32,
    },
    Crash,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TraceEvent::Store { addr, len } => write!(f, "store {addr:#x} {len}"),
            TraceEvent::Load { addr, len } => write!(f, "load {addr:#x} {len}"),
            TraceEvent::Flush { addr } => write!(f, "flush {addr:#x} {BLOCK}"),
            TraceEvent::Fence => write!(f, "fence 0 0"),
            TraceEvent::Evict { addr, dirty_bytes } => write!(f, "evict {addr:#x} {dirty_bytes}"),
            TraceEvent::Crash => write!(f, "crash 0 0"),
        }
    }
}

struct Line {
    tag: u64,
    dirty: u64,
}

pub struct Emulator {
    cfg: CacheConfig,
    image: Vec<u8>,
    lines: Vec<Line>,
    data: Vec<[u8; BLOCK]>,
    replacer: Replacer,
    rng: ChaCha8Rng,
    counters: FlushCounters,
    histogram: [u64; DIRTINESS_BUCKETS],
    trace: Option<Vec<TraceEvent>>,
    fences: u64,
    armed: Option<u64>,
    snapshot: Option<PersistentImage>,
}

impl fmt::Debug for Emulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Emulator")
            .field("cfg", &self.cfg)
            .field("capacity", &self.image.len())
            .field("counters", &self.counters)
            .finish_non_exhaustive()
    }
}

impl Emulator {
    /// Creates an emulator over a zero-filled image of `nvm_capacity` bytes.
    pub fn new(cfg: CacheConfig, nvm_capacity: usize) -> Result<Self> {
        Emulator::from_image(cfg, PersistentImage::zeroed(nvm_capacity))
    }

    /// Creates an emulator with a cold cache over an existing durable image.
    pub fn from_image(cfg: CacheConfig, image: PersistentImage) -> Result<Self> {
        cfg.validate()?;
        if image.capacity() == 0 {
            return Err(Error::config("NVM capacity must be nonzero"));
        }
        let n = cfg.sets * cfg.ways;
        let lines = (0..n)
            .map(|_| Line {
                tag: INVALID,
                dirty: 0,
            })
            .collect();
        Ok(Emulator {
            replacer: Replacer::new(cfg.policy, cfg.sets, cfg.ways),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            image: image.into_inner(),
            lines,
            data: vec![[0; BLOCK]; n],
            counters: FlushCounters::default(),
            histogram: [0; DIRTINESS_BUCKETS],
            trace: None,
            fences: 0,
            armed: None,
            snapshot: None,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn capacity(&self) -> usize {
        self.image.len()
    }

    pub fn counters(&self) -> FlushCounters {
        self.counters
    }

    /// Histogram of per-flush dirtiness in ten equal buckets over [0, 1].
    pub fn dirtiness_histogram(&self) -> [u64; DIRTINESS_BUCKETS] {
        self.histogram
    }

    pub fn reset_counters(&mut self) {
        self.counters = FlushCounters::default();
        self.histogram = [0; DIRTINESS_BUCKETS];
    }

    /// Accounts for `blocks` object-block flushes that were elided.
    pub fn record_skipped(&mut self, blocks: u64) {
        self.counters.flushes_skipped += blocks;
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn emit(&mut self, ev: TraceEvent) {
        if let Some(t) = self.trace.as_mut() {
            t.push(ev);
        }
    }

    fn check(&self, addr: u64, len: usize) -> Result<()> {
        let cap = self.image.len() as u64;
        match addr.checked_add(len as u64) {
            Some(end) if end <= cap => Ok(()),
            _ => Err(Error::Range {
                addr,
                len: len as u64,
                capacity: cap,
            }),
        }
    }

    fn set_of(&self, tag: u64) -> usize {
        (tag % self.cfg.sets as u64) as usize
    }

    fn lookup(&self, tag: u64) -> Option<usize> {
        let base = self.set_of(tag) * self.cfg.ways;
        (base..base + self.cfg.ways).find(|&i| self.lines[i].tag == tag)
    }

    fn write_back(&mut self, slot: usize) -> u32 {
        let line = &mut self.lines[slot];
        let mask = line.dirty;
        if mask == 0 {
            return 0;
        }
        let base = (line.tag * BLOCK_U64) as usize;
        line.dirty = 0;
        let src = &self.data[slot];
        let mut m = mask;
        while m != 0 {
            let i = m.trailing_zeros() as usize;
            self.image[base + i] = src[i];
            m &= m - 1;
        }
        mask.count_ones()
    }

    fn evict_slot(&mut self, slot: usize) {
        let tag = self.lines[slot].tag;
        if tag == INVALID {
            return;
        }
        if tag & VOLATILE_TAG == 0 {
            let n = self.write_back(slot);
            if n > 0 {
                self.counters.writebacks_by_eviction += 1;
            }
            self.emit(TraceEvent::Evict {
                addr: tag * BLOCK_U64,
                dirty_bytes: n,
            });
        }
        self.lines[slot].tag = INVALID;
        self.lines[slot].dirty = 0;
    }

    /// Returns the slot holding `tag`, filling it on a miss.
    fn access(&mut self, tag: u64) -> usize {
        let set = self.set_of(tag);
        let ways = self.cfg.ways;
        let base = set * ways;
        if let Some(slot) = self.lookup(tag) {
            self.replacer.touch(set, slot - base);
            return slot;
        }
        let way = match (0..ways).find(|&w| self.lines[base + w].tag == INVALID) {
            Some(w) => w,
            None => {
                let w = self.replacer.victim(set, &mut self.rng);
                self.evict_slot(base + w);
                w
            }
        };
        let slot = base + way;
        self.lines[slot].tag = tag;
        self.lines[slot].dirty = 0;
        if tag & VOLATILE_TAG == 0 {
            let start = (tag * BLOCK_U64) as usize;
            let end = (start + BLOCK).min(self.image.len());
            let buf = &mut self.data[slot];
            buf[..end - start].copy_from_slice(&self.image[start..end]);
            buf[end - start..].fill(0);
        }
        let lines = &self.lines;
        self.replacer
            .fill(set, way, |w| lines[base + w].tag != INVALID, &mut self.rng);
        slot
    }

    pub fn store(&mut self, addr: u64, bytes: &[u8]) -> Result<()> {
        self.check(addr, bytes.len())?;
        self.emit(TraceEvent::Store {
            addr,
            len: bytes.len() as u64,
        });
        let mut pos = 0usize;
        while pos < bytes.len() {
            let a = addr + pos as u64;
            let off = (a % BLOCK_U64) as usize;
            let n = (BLOCK - off).min(bytes.len() - pos);
            let slot = self.access(a / BLOCK_U64);
            self.data[slot][off..off + n].copy_from_slice(&bytes[pos..pos + n]);
            let mask = if n == BLOCK {
                u64::MAX
            } else {
                ((1u64 << n) - 1) << off
            };
            self.lines[slot].dirty |= mask;
            pos += n;
        }
        Ok(())
    }

    pub fn load_into(&mut self, addr: u64, out: &mut [u8]) -> Result<()> {
        self.check(addr, out.len())?;
        self.emit(TraceEvent::Load {
            addr,
            len: out.len() as u64,
        });
        let mut pos = 0usize;
        while pos < out.len() {
            let a = addr + pos as u64;
            let off = (a % BLOCK_U64) as usize;
            let n = (BLOCK - off).min(out.len() - pos);
            let slot = self.access(a / BLOCK_U64);
            out[pos..pos + n].copy_from_slice(&self.data[slot][off..off + n]);
            pos += n;
        }
        Ok(())
    }

    pub fn load(&mut self, addr: u64, len: usize) -> Result<Vec<u8>> {
        let mut out = vec![0; len];
        self.load_into(addr, &mut out)?;
        Ok(out)
    }

    /// Reads the current (cached or durable) contents without touching
    /// replacement state, counters or the trace.
    pub fn peek_into(&self, addr: u64, out: &mut [u8]) -> Result<()> {
        self.check(addr, out.len())?;
        let mut pos = 0usize;
        while pos < out.len() {
            let a = addr + pos as u64;
            let off = (a % BLOCK_U64) as usize;
            let n = (BLOCK - off).min(out.len() - pos);
            match self.lookup(a / BLOCK_U64) {
                Some(slot) => out[pos..pos + n].copy_from_slice(&self.data[slot][off..off + n]),
                None => out[pos..pos + n].copy_from_slice(&self.image[a as usize..a as usize + n]),
            }
            pos += n;
        }
        Ok(())
    }

    pub fn peek(&self, addr: u64, len: usize) -> Result<Vec<u8>> {
        let mut out = vec![0; len];
        self.peek_into(addr, &mut out)?;
        Ok(out)
    }

    /// The durable image as it stands now.
    pub fn image(&self) -> &[u8] {
        &self.image
    }

    /// Writes back the block containing `addr` if it is resident and dirty.
    /// The line stays valid.
    pub fn flush_line(&mut self, addr: u64) -> Result<()> {
        self.check(addr, 1)?;
        let tag = addr / BLOCK_U64;
        self.emit(TraceEvent::Flush {
            addr: tag * BLOCK_U64,
        });
        self.counters.flushes_issued += 1;
        if let Some(slot) = self.lookup(tag) {
            let n = self.write_back(slot);
            if n > 0 {
                self.counters.lines_flushed += 1;
                self.counters.dirty_bytes_flushed += n as u64;
                let bucket = ((n as usize * DIRTINESS_BUCKETS) / BLOCK).min(DIRTINESS_BUCKETS - 1);
                self.histogram[bucket] += 1;
            }
        }
        Ok(())
    }

    /// Flushes every block overlapping `[addr, addr+len)`; returns the number
    /// of flush instructions issued.
    pub fn flush_range(&mut self, addr: u64, len: usize) -> Result<u64> {
        if len == 0 {
            return Ok(0);
        }
        self.check(addr, len)?;
        let first = addr / BLOCK_U64;
        let last = (addr + len as u64 - 1) / BLOCK_U64;
        for b in first..=last {
            self.flush_line(b * BLOCK_U64)?;
        }
        Ok(last - first + 1)
    }

    pub fn fence(&mut self) {
        self.emit(TraceEvent::Fence);
        self.counters.barriers_issued += 1;
        self.fences += 1;
        if self.armed == Some(self.fences) {
            self.armed = None;
            self.snapshot = Some(PersistentImage(self.image.clone()));
        }
    }

    /// Fences issued since construction; unaffected by counter resets.
    pub fn fence_count(&self) -> u64 {
        self.fences
    }

    /// Arranges for the durable image to be captured right after fence
    /// number `fence` completes, as if power failed there. Execution carries
    /// on normally; the capture is collected with
    /// [`Emulator::take_crash_snapshot`].
    pub fn arm_crash(&mut self, fence: u64) {
        self.armed = (fence > self.fences).then_some(fence);
        self.snapshot = None;
    }

    pub fn take_crash_snapshot(&mut self) -> Option<PersistentImage> {
        self.snapshot.take()
    }

    /// Drops every cached line without write-back and returns the durable image.
    pub fn crash(&mut self) -> PersistentImage {
        self.emit(TraceEvent::Crash);
        for line in &mut self.lines {
            line.tag = INVALID;
            line.dirty = 0;
        }
        self.replacer = Replacer::new(self.cfg.policy, self.cfg.sets, self.cfg.ways);
        PersistentImage(self.image.clone())
    }

    /// Switches replacement policy. Dirty lines are written back and the
    /// cache is emptied first.
    pub fn set_policy(&mut self, policy: Policy, seed: u64) {
        for slot in 0..self.lines.len() {
            self.evict_slot(slot);
        }
        self.cfg.policy = policy;
        self.cfg.seed = seed;
        self.replacer = Replacer::new(policy, self.cfg.sets, self.cfg.ways);
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn policy(&self) -> Policy {
        self.replacer.policy()
    }

    /// Touches one line of volatile memory, competing with NVM lines for
    /// cache space. Volatile lines are never written to the image.
    pub fn touch_volatile(&mut self, line: u64) {
        self.access(VOLATILE_TAG | (line & !VOLATILE_TAG));
    }

    pub fn is_resident(&self, addr: u64) -> bool {
        self.lookup(addr / BLOCK_U64).is_some()
    }

    /// True when the block holding `addr` is cached with unflushed bytes.
    pub fn is_dirty_resident(&self, addr: u64) -> bool {
        self.lookup(addr / BLOCK_U64)
            .is_some_and(|slot| self.lines[slot].dirty != 0)
    }

    pub fn dirty_mask(&self, addr: u64) -> u64 {
        self.lookup(addr / BLOCK_U64)
            .map_or(0, |slot| self.lines[slot].dirty)
    }

    pub fn dirty_line_count(&self) -> usize {
        self.lines.iter().filter(|l| l.dirty != 0).count()
    }

    /// NVM blocks (by address) that are cached with unflushed bytes.
    pub fn dirty_blocks(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self
            .lines
            .iter()
            .filter(|l| l.dirty != 0 && l.tag & VOLATILE_TAG == 0)
            .map(|l| l.tag * BLOCK_U64)
            .collect();
        v.sort_unstable();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emu(sets: usize, ways: usize, policy: Policy) -> Emulator {
        Emulator::new(CacheConfig::new(sets, ways, policy, 1), 1 << 16).unwrap()
    }

    /// Block addresses that all map to set 0.
    fn conflicting(e: &Emulator, n: usize) -> Vec<u64> {
        let sets = e.config().sets as u64;
        (0..n as u64).map(|i| i * sets * BLOCK_U64).collect()
    }

    #[test]
    fn store_is_volatile_until_flushed() {
        let mut e = emu(4, 2, Policy::Lru);
        e.store(0, &[0xAB; 8]).unwrap();
        assert_eq!(&e.image()[..8], &[0; 8]);
        assert_eq!(e.load(0, 8).unwrap(), vec![0xAB; 8]);
        e.flush_line(0).unwrap();
        assert_eq!(&e.image()[..8], &[0xAB; 8]);
    }

    #[test]
    fn out_of_range_is_rejected() {
        let mut e = emu(4, 2, Policy::Lru);
        let cap = e.capacity() as u64;
        assert!(matches!(
            e.store(cap - 4, &[1; 8]),
            Err(Error::Range { .. })
        ));
        assert!(matches!(e.load(cap, 1), Err(Error::Range { .. })));
        assert!(matches!(e.flush_line(cap), Err(Error::Range { .. })));
        assert!(e.store(cap - 8, &[1; 8]).is_ok());
    }

    #[test]
    fn flush_counts_dirty_bytes() {
        let mut e = emu(4, 2, Policy::Lru);
        e.store(8, &[1; 8]).unwrap();
        e.flush_line(8).unwrap();
        let c = e.counters();
        assert_eq!(c.flushes_issued, 1);
        assert_eq!(c.lines_flushed, 1);
        assert_eq!(c.dirty_bytes_flushed, 8);
        assert_eq!(e.dirty_mask(0), 0);
        assert!(e.is_resident(0));

        e.flush_line(4096).unwrap();
        let c = e.counters();
        assert_eq!(c.flushes_issued, 2);
        assert_eq!(c.lines_flushed, 1);
    }

    #[test]
    fn disjoint_stores_coalesce_into_one_flush() {
        let mut e = emu(4, 2, Policy::Lru);
        e.store(0, &[1; 4]).unwrap();
        e.store(32, &[2; 4]).unwrap();
        e.flush_line(0).unwrap();
        assert_eq!(&e.image()[..4], &[1; 4]);
        assert_eq!(&e.image()[32..36], &[2; 4]);
        assert_eq!(e.counters().lines_flushed, 1);
        assert_eq!(e.counters().dirty_bytes_flushed, 8);
    }

    #[test]
    fn store_spanning_blocks_marks_both() {
        let mut e = emu(4, 2, Policy::Lru);
        e.store(60, &[9; 8]).unwrap();
        assert_eq!(e.dirty_mask(0), 0xF << 60);
        assert_eq!(e.dirty_mask(64), 0xF);
        assert_eq!(e.flush_range(60, 8).unwrap(), 2);
        assert_eq!(&e.image()[60..68], &[9; 8]);
    }

    #[test]
    fn lru_conflict_evicts_first_block() {
        let mut e = emu(8, 4, Policy::Lru);
        let addrs = conflicting(&e, 5);
        for (i, &a) in addrs.iter().enumerate() {
            e.store(a, &[i as u8 + 1; 64]).unwrap();
        }
        assert_eq!(e.image()[addrs[0] as usize], 1);
        assert!(!e.is_resident(addrs[0]));
        for &a in &addrs[1..] {
            assert_eq!(e.image()[a as usize], 0);
            assert!(e.is_dirty_resident(a));
        }
        assert_eq!(e.counters().writebacks_by_eviction, 1);
    }

    #[test]
    fn load_refreshes_recency() {
        let mut e = emu(4, 2, Policy::Lru);
        let a = conflicting(&e, 3);
        e.store(a[0], &[1]).unwrap();
        e.store(a[1], &[2]).unwrap();
        e.load(a[0], 1).unwrap();
        e.store(a[2], &[3]).unwrap();
        // a[0] was reused, so a[1] is the LRU way.
        assert!(e.is_resident(a[0]));
        assert!(!e.is_resident(a[1]));
        assert_eq!(e.image()[a[1] as usize], 2);
    }

    #[test]
    fn load_does_not_dirty() {
        let mut e = emu(4, 2, Policy::Lru);
        assert_eq!(e.load(128, 16).unwrap(), vec![0; 16]);
        assert!(e.is_resident(128));
        assert!(!e.is_dirty_resident(128));
    }

    #[test]
    fn crash_discards_dirty_lines() {
        let mut e = emu(4, 2, Policy::Lru);
        e.store(0, &[5; 8]).unwrap();
        e.store(64, &[6; 8]).unwrap();
        e.flush_line(64).unwrap();
        let snap = e.crash();
        assert_eq!(&snap[..8], &[0; 8]);
        assert_eq!(&snap[64..72], &[6; 8]);
        assert_eq!(e.load(0, 8).unwrap(), vec![0; 8]);
        assert_eq!(e.dirty_line_count(), 0);
    }

    #[test]
    fn armed_crash_captures_state_at_fence() {
        let mut e = emu(4, 2, Policy::Lru);
        e.arm_crash(2);
        e.store(0, &[1; 8]).unwrap();
        e.flush_line(0).unwrap();
        e.fence();
        assert!(e.take_crash_snapshot().is_none());
        e.store(64, &[2; 8]).unwrap();
        e.store(0, &[3; 8]).unwrap();
        e.flush_line(64).unwrap();
        e.fence();
        e.flush_line(0).unwrap();
        e.fence();
        let snap = e.take_crash_snapshot().unwrap();
        assert_eq!(&snap[..8], &[1; 8]);
        assert_eq!(&snap[64..72], &[2; 8]);
        assert_eq!(&e.image()[..8], &[3; 8]);
        assert_eq!(e.fence_count(), 3);
        assert_eq!(e.dirty_blocks(), Vec::<u64>::new());
        e.store(128, &[1]).unwrap();
        assert_eq!(e.dirty_blocks(), vec![128]);
    }

    #[test]
    fn one_way_eviction_survives_crash() {
        let mut e = emu(4, 1, Policy::Lru);
        let a = conflicting(&e, 2);
        e.store(a[0], &[0xA; 4]).unwrap();
        e.store(a[1], &[0xB; 4]).unwrap();
        let snap = e.crash();
        assert_eq!(&snap[a[0] as usize..a[0] as usize + 4], &[0xA; 4]);
        assert_eq!(&snap[a[1] as usize..a[1] as usize + 4], &[0; 4]);
    }

    #[test]
    fn flush_is_idempotent() {
        let mut e = emu(4, 2, Policy::Lru);
        e.store(0, &[3; 16]).unwrap();
        e.flush_line(0).unwrap();
        let img = e.image().to_vec();
        let before = e.counters();
        e.flush_line(0).unwrap();
        assert_eq!(e.image(), &img[..]);
        assert_eq!(e.counters().lines_flushed, before.lines_flushed);
        assert_eq!(e.counters().dirty_bytes_flushed, before.dirty_bytes_flushed);
    }

    #[test]
    fn volatile_lines_compete_but_never_persist() {
        let mut e = emu(1, 2, Policy::Lru);
        e.store(0, &[1; 8]).unwrap();
        e.touch_volatile(0);
        e.touch_volatile(1);
        assert!(!e.is_resident(0));
        assert_eq!(&e.image()[..8], &[1; 8]);
        assert_eq!(e.image().iter().filter(|&&b| b != 0).count(), 8);
    }

    #[test]
    fn histogram_mass_matches_lines_flushed() {
        let mut e = emu(16, 4, Policy::Plru);
        for i in 0..64u64 {
            e.store(i * 64, &vec![1; (i % 64 + 1) as usize]).unwrap();
            e.flush_line(i * 64).unwrap();
        }
        let h = e.dirtiness_histogram();
        assert_eq!(h.iter().sum::<u64>(), e.counters().lines_flushed);
        assert_eq!(h[DIRTINESS_BUCKETS - 1], 7);
        let d = e.counters().average_dirtiness();
        assert!(d > 0.0 && d <= 1.0);
    }

    #[test]
    fn trace_lines_have_three_fields() {
        let mut e = emu(1, 1, Policy::Lru);
        e.enable_trace();
        e.store(0, &[1]).unwrap();
        e.store(64, &[1]).unwrap();
        e.flush_line(64).unwrap();
        e.fence();
        e.crash();
        let t = e.take_trace();
        assert!(t.contains(&TraceEvent::Evict {
            addr: 0,
            dirty_bytes: 1
        }));
        for ev in t {
            assert_eq!(ev.to_string().split(' ').count(), 3);
        }
    }

    #[test]
    fn set_policy_writes_back_and_resets() {
        let mut e = emu(4, 2, Policy::Lru);
        e.store(0, &[7; 4]).unwrap();
        e.set_policy(Policy::Random, 9);
        assert_eq!(e.policy(), Policy::Random);
        assert_eq!(&e.image()[..4], &[7; 4]);
        assert!(!e.is_resident(0));
    }

    #[test]
    fn default_geometry_is_about_two_mib() {
        let c = CacheConfig::default();
        assert_eq!(c.ways, 11);
        let cap = c.capacity_bytes();
        assert!(cap <= 2 << 20 && cap > (2 << 20) - 11 * 64);
        assert_eq!(CacheConfig::full_scale(Policy::Lru, 0).sets, 28672);
        assert!(CacheConfig::new(0, 4, Policy::Lru, 0).validate().is_err());
        assert!(CacheConfig::new(4, 65, Policy::Lru, 0).validate().is_err());
    }
}
