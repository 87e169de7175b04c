//! Pre-carved persistent memory pools.
//!
//! The NVM address space starts with one superblock page followed by the
//! key pool, the field/value pool and the log pool, each a whole number of
//! pages. The two object pools allocate inside the 3136-byte data region of
//! each page so every block has a checksum slot; because data columns are
//! laid out back to back, an object is simply a contiguous byte range. The
//! log pool carries no checksums and hands out plain runs of blocks.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::emu::BLOCK;
use crate::error::{Error, Result};
use crate::layout::{self, COLS, DATA_BYTES, PAGE_SIZE, ROWS};

const CBS: u64 = BLOCK as u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Key,
    FieldValue,
    Log,
}

impl PoolKind {
    pub const ALL: [PoolKind; 3] = [PoolKind::Key, PoolKind::FieldValue, PoolKind::Log];

    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Key => "key_pool",
            PoolKind::FieldValue => "field_value_pool",
            PoolKind::Log => "log_pool",
        }
    }

    /// Whether objects in this pool are covered by page checksums.
    pub fn checksummed(self) -> bool {
        self != PoolKind::Log
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Allocation {
    pub addr: u64,
    pub size: u64,
    pub blocks: u32,
    pub pool: PoolKind,
}

impl Allocation {
    pub fn end(&self) -> u64 {
        self.addr + self.size
    }

    /// Addresses of every block overlapped by the allocation.
    pub fn block_addrs(&self) -> impl Iterator<Item = u64> {
        blocks_spanned(self.addr, self.size)
    }
}

/// Blocks overlapped by `[addr, addr + size)`.
pub fn blocks_spanned(addr: u64, size: u64) -> impl Iterator<Item = u64> {
    let first = addr / CBS;
    let last = if size == 0 {
        first
    } else {
        (addr + size - 1) / CBS + 1
    };
    (first..last).map(|b| b * CBS)
}

pub fn blocks_for(size: u64) -> u32 {
    size.div_ceil(CBS) as u32
}

/// A field and its value packed into one region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub region: Allocation,
    pub field: Allocation,
    pub value: Allocation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub key_pool_bytes: u64,
    pub field_value_pool_bytes: u64,
    pub log_pool_bytes: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            key_pool_bytes: 4 << 20,
            field_value_pool_bytes: 32 << 20,
            log_pool_bytes: 16 << 20,
        }
    }
}

impl PoolConfig {
    fn bytes(&self, kind: PoolKind) -> u64 {
        match kind {
            PoolKind::Key => self.key_pool_bytes,
            PoolKind::FieldValue => self.field_value_pool_bytes,
            PoolKind::Log => self.log_pool_bytes,
        }
    }

    /// Total NVM bytes needed: superblock page plus every pool.
    pub fn nvm_bytes(&self) -> u64 {
        PAGE_SIZE
            + PoolKind::ALL
                .iter()
                .map(|&k| self.bytes(k) / PAGE_SIZE * PAGE_SIZE)
                .sum::<u64>()
    }
}

/// Placement of one pool in the NVM address space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolRange {
    pub base: u64,
    pub pages: u64,
}

impl PoolRange {
    pub fn end(&self) -> u64 {
        self.base + self.pages * PAGE_SIZE
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    pub fn page_starts(&self) -> impl Iterator<Item = u64> {
        let base = self.base;
        (0..self.pages).map(move |p| base + p * PAGE_SIZE)
    }
}

pub struct Pool {
    kind: PoolKind,
    range: PoolRange,
    /// Next free byte, as an offset from `range.base`.
    cursor: u64,
    free: BTreeMap<u32, Vec<u64>>,
    live: HashMap<u64, Allocation>,
}

impl fmt::Debug for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pool")
            .field("kind", &self.kind)
            .field("range", &self.range)
            .field("cursor", &self.cursor)
            .field("live", &self.live.len())
            .finish_non_exhaustive()
    }
}

impl Pool {
    pub fn new(kind: PoolKind, range: PoolRange) -> Self {
        Pool {
            kind,
            range,
            cursor: 0,
            free: BTreeMap::new(),
            live: HashMap::new(),
        }
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    pub fn range(&self) -> PoolRange {
        self.range
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn live(&self) -> impl Iterator<Item = &Allocation> {
        self.live.values()
    }

    pub fn is_live(&self, addr: u64) -> bool {
        self.live.contains_key(&addr)
    }

    pub fn get(&self, addr: u64) -> Option<Allocation> {
        self.live.get(&addr).copied()
    }

    pub fn max_object(&self) -> u64 {
        if self.kind.checksummed() {
            DATA_BYTES
        } else {
            self.range.pages * PAGE_SIZE
        }
    }

    /// Pages that have ever held an allocation.
    pub fn used_pages(&self) -> u64 {
        self.cursor.div_ceil(PAGE_SIZE).min(self.range.pages)
    }

    pub fn alloc(&mut self, size: u64) -> Result<Allocation> {
        if size == 0 || size > self.max_object() {
            return Err(Error::Alloc(format!(
                "{}: size {size} outside 1..={}",
                self.kind,
                self.max_object()
            )));
        }
        let blocks = blocks_for(size);
        let addr = match self.free.get_mut(&blocks).and_then(Vec::pop) {
            Some(a) => a,
            None => self.bump(blocks)?,
        };
        let a = Allocation {
            addr,
            size,
            blocks,
            pool: self.kind,
        };
        self.live.insert(addr, a);
        Ok(a)
    }

    fn bump(&mut self, blocks: u32) -> Result<u64> {
        let need = blocks as u64 * CBS;
        let total = self.range.pages * PAGE_SIZE;
        let mut off = self.cursor;
        if self.kind.checksummed() {
            let mut in_page = off % PAGE_SIZE;
            if in_page >= DATA_BYTES {
                off += PAGE_SIZE - in_page;
                in_page = 0;
            }
            let col_off = in_page % layout::COLUMN_BYTES;
            let fits_column = blocks as usize <= ROWS && col_off + need <= layout::COLUMN_BYTES;
            let starts_column = blocks as usize > ROWS && col_off == 0;
            if col_off != 0 && !fits_column && !starts_column {
                off += layout::COLUMN_BYTES - col_off;
                in_page += layout::COLUMN_BYTES - col_off;
            }
            if in_page + need > DATA_BYTES {
                off += PAGE_SIZE - in_page;
            }
            debug_assert!(need <= layout::COLUMN_BYTES * COLS as u64);
        }
        if off + need > total {
            return Err(Error::OutOfMemory(self.kind.name()));
        }
        self.cursor = off + need;
        Ok(self.range.base + off)
    }

    /// Returns an allocation to the free list.
    pub fn release(&mut self, addr: u64) -> Result<Allocation> {
        let a = self.live.remove(&addr).ok_or_else(|| {
            Error::usage(format!("{}: {addr:#x} is not a live allocation", self.kind))
        })?;
        self.free.entry(a.blocks).or_default().push(a.addr);
        Ok(a)
    }

    /// Marks `a` live during a rebuild and moves the bump cursor past it.
    fn adopt(&mut self, a: Allocation) -> Result<()> {
        if !self.range.contains(a.addr) || a.end() > self.range.end() {
            return Err(Error::Alloc(format!(
                "{}: rebuilt allocation {:#x}+{} lies outside the pool",
                self.kind, a.addr, a.size
            )));
        }
        let end = a.addr - self.range.base + a.blocks as u64 * CBS;
        self.cursor = self.cursor.max(end);
        self.live.insert(a.addr, a);
        Ok(())
    }
}

pub const SUPERBLOCK_MAGIC: u64 = 0x504d_5458_5342_0001;

/// Persistent description of the pool layout, kept in page 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Superblock {
    pub checksums: bool,
    pub key: PoolRange,
    pub field_value: PoolRange,
    pub log: PoolRange,
}

impl Superblock {
    pub const ADDR: u64 = 0;
    pub const LEN: usize = 64;

    pub fn encode(&self) -> [u8; Self::LEN] {
        let mut out = [0u8; Self::LEN];
        let words = [
            SUPERBLOCK_MAGIC,
            self.checksums as u64,
            self.key.base,
            self.key.pages,
            self.field_value.base,
            self.field_value.pages,
            self.log.base,
            self.log.pages,
        ];
        for (i, w) in words.iter().enumerate() {
            out[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < Self::LEN {
            return Err(Error::Recovery("superblock truncated".into()));
        }
        let w = |i: usize| u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
        if w(0) != SUPERBLOCK_MAGIC {
            return Err(Error::Recovery(format!("bad superblock magic {:#x}", w(0))));
        }
        let range = |i| PoolRange {
            base: w(i),
            pages: w(i + 1),
        };
        Ok(Superblock {
            checksums: w(1) != 0,
            key: range(2),
            field_value: range(4),
            log: range(6),
        })
    }

    pub fn range(&self, kind: PoolKind) -> PoolRange {
        match kind {
            PoolKind::Key => self.key,
            PoolKind::FieldValue => self.field_value,
            PoolKind::Log => self.log,
        }
    }

    pub fn kind_of(&self, addr: u64) -> Option<PoolKind> {
        PoolKind::ALL
            .into_iter()
            .find(|&k| self.range(k).contains(addr))
    }

    pub fn nvm_bytes(&self) -> u64 {
        self.log.end()
    }
}

#[derive(Debug)]
pub struct PoolSet {
    key: Pool,
    field_value: Pool,
    log: Pool,
}

impl PoolSet {
    /// Carves the three pools out of the address space after the superblock.
    pub fn layout(cfg: &PoolConfig, checksums: bool) -> Result<Superblock> {
        let mut base = PAGE_SIZE;
        let mut ranges = Vec::with_capacity(3);
        for kind in PoolKind::ALL {
            let pages = cfg.bytes(kind) / PAGE_SIZE;
            if pages == 0 {
                return Err(Error::config(format!(
                    "{kind} needs at least one {PAGE_SIZE}-byte page (got {} bytes)",
                    cfg.bytes(kind)
                )));
            }
            ranges.push(PoolRange { base, pages });
            base += pages * PAGE_SIZE;
        }
        Ok(Superblock {
            checksums,
            key: ranges[0],
            field_value: ranges[1],
            log: ranges[2],
        })
    }

    pub fn new(sb: &Superblock) -> Self {
        PoolSet {
            key: Pool::new(PoolKind::Key, sb.key),
            field_value: Pool::new(PoolKind::FieldValue, sb.field_value),
            log: Pool::new(PoolKind::Log, sb.log),
        }
    }

    /// Reconstructs allocator state from the set of allocations known to be
    /// live. Holes below the highest live allocation are not recycled.
    pub fn rebuild(sb: &Superblock, live: impl IntoIterator<Item = Allocation>) -> Result<Self> {
        let mut set = PoolSet::new(sb);
        for a in live {
            set.pool_mut(a.pool).adopt(a)?;
        }
        Ok(set)
    }

    pub fn pool(&self, kind: PoolKind) -> &Pool {
        match kind {
            PoolKind::Key => &self.key,
            PoolKind::FieldValue => &self.field_value,
            PoolKind::Log => &self.log,
        }
    }

    pub fn pool_mut(&mut self, kind: PoolKind) -> &mut Pool {
        match kind {
            PoolKind::Key => &mut self.key,
            PoolKind::FieldValue => &mut self.field_value,
            PoolKind::Log => &mut self.log,
        }
    }

    pub fn alloc(&mut self, kind: PoolKind, size: u64) -> Result<Allocation> {
        self.pool_mut(kind).alloc(size)
    }

    /// Allocates a field and its value as one contiguous region.
    pub fn alloc_pair(&mut self, field_size: u64, value_size: u64) -> Result<Pair> {
        if field_size == 0 || value_size == 0 {
            return Err(Error::Alloc("pair members must be nonempty".into()));
        }
        let region = self.field_value.alloc(field_size + value_size)?;
        let sub = |addr: u64, size: u64| Allocation {
            addr,
            size,
            blocks: blocks_spanned(addr, size).count() as u32,
            pool: PoolKind::FieldValue,
        };
        Ok(Pair {
            region,
            field: sub(region.addr, field_size),
            value: sub(region.addr + field_size, value_size),
        })
    }

    pub fn release(&mut self, a: &Allocation) -> Result<Allocation> {
        self.pool_mut(a.pool).release(a.addr)
    }
}
