//! Row and column checksums over the page matrix, and the decoder that
//! repairs stale data blocks from them.
//!
//! A checksum block is the lane-wise wrapping sum of eight little-endian
//! `u64` words. Because integer addition of a byte string's little-endian
//! value is linear, the change caused by rewriting any sub-range of a block
//! can be computed from the old and new bytes of that range alone.

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::emu::{Emulator, BLOCK};
use crate::error::{Error, Result};
use crate::layout::{self, COLS, ROWS};

const LANES: usize = BLOCK / 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ChecksumBlock(pub [u64; LANES]);

impl ChecksumBlock {
    pub const ZERO: ChecksumBlock = ChecksumBlock([0; LANES]);

    pub fn from_bytes(b: &[u8; BLOCK]) -> Self {
        let mut lanes = [0u64; LANES];
        for (i, lane) in lanes.iter_mut().enumerate() {
            *lane = u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
        }
        ChecksumBlock(lanes)
    }

    pub fn to_bytes(self) -> [u8; BLOCK] {
        let mut out = [0u8; BLOCK];
        for (i, lane) in self.0.iter().enumerate() {
            out[i * 8..i * 8 + 8].copy_from_slice(&lane.to_le_bytes());
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&l| l == 0)
    }
}

impl Add for ChecksumBlock {
    type Output = ChecksumBlock;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for ChecksumBlock {
    fn add_assign(&mut self, rhs: Self) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a = a.wrapping_add(b);
        }
    }
}

impl Sub for ChecksumBlock {
    type Output = ChecksumBlock;
    fn sub(mut self, rhs: Self) -> Self {
        self -= rhs;
        self
    }
}

impl SubAssign for ChecksumBlock {
    fn sub_assign(&mut self, rhs: Self) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a = a.wrapping_sub(b);
        }
    }
}

impl Neg for ChecksumBlock {
    type Output = ChecksumBlock;
    fn neg(self) -> Self {
        ChecksumBlock::ZERO - self
    }
}

impl std::iter::Sum for ChecksumBlock {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ChecksumBlock::ZERO, Add::add)
    }
}

/// Block-granular access to some backing memory.
pub trait BlockStore {
    fn read_block(&mut self, addr: u64) -> Result<[u8; BLOCK]>;
    fn write_block(&mut self, addr: u64, data: &[u8; BLOCK]) -> Result<()>;
    /// Makes a previously written block durable.
    fn persist_block(&mut self, addr: u64) -> Result<()>;
}

impl BlockStore for Emulator {
    fn read_block(&mut self, addr: u64) -> Result<[u8; BLOCK]> {
        let mut b = [0u8; BLOCK];
        self.load_into(addr, &mut b)?;
        Ok(b)
    }

    fn write_block(&mut self, addr: u64, data: &[u8; BLOCK]) -> Result<()> {
        self.store(addr, data)
    }

    fn persist_block(&mut self, addr: u64) -> Result<()> {
        self.flush_line(addr)
    }
}

impl BlockStore for [u8] {
    fn read_block(&mut self, addr: u64) -> Result<[u8; BLOCK]> {
        let a = addr as usize;
        self.get(a..a + BLOCK)
            .map(|s| s.try_into().unwrap())
            .ok_or(Error::Range {
                addr,
                len: BLOCK as u64,
                capacity: self.len() as u64,
            })
    }

    fn write_block(&mut self, addr: u64, data: &[u8; BLOCK]) -> Result<()> {
        let cap = self.len() as u64;
        let a = addr as usize;
        self.get_mut(a..a + BLOCK)
            .ok_or(Error::Range {
                addr,
                len: BLOCK as u64,
                capacity: cap,
            })?
            .copy_from_slice(data);
        Ok(())
    }

    fn persist_block(&mut self, _addr: u64) -> Result<()> {
        Ok(())
    }
}

impl BlockStore for Vec<u8> {
    fn read_block(&mut self, addr: u64) -> Result<[u8; BLOCK]> {
        self.as_mut_slice().read_block(addr)
    }

    fn write_block(&mut self, addr: u64, data: &[u8; BLOCK]) -> Result<()> {
        self.as_mut_slice().write_block(addr, data)
    }

    fn persist_block(&mut self, _addr: u64) -> Result<()> {
        Ok(())
    }
}

/// Lane-wise change of a block when `old` is replaced by `new` at byte
/// offset `off` within it.
pub fn partial_delta(off: usize, old: &[u8], new: &[u8]) -> ChecksumBlock {
    debug_assert_eq!(old.len(), new.len());
    debug_assert!(off + old.len() <= BLOCK);
    let mut a = [0u8; BLOCK];
    let mut b = [0u8; BLOCK];
    a[off..off + old.len()].copy_from_slice(old);
    b[off..off + new.len()].copy_from_slice(new);
    ChecksumBlock::from_bytes(&b) - ChecksumBlock::from_bytes(&a)
}

/// Pending checksum adjustments, aggregated per checksum block.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DeltaSet {
    deltas: BTreeMap<u64, ChecksumBlock>,
}

impl DeltaSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.values().all(ChecksumBlock::is_zero)
    }

    pub fn add(&mut self, checksum_addr: u64, delta: ChecksumBlock) {
        if delta.is_zero() {
            return;
        }
        *self.deltas.entry(checksum_addr).or_default() += delta;
    }

    /// Records that bytes `[addr, addr+old.len())` change from `old` to `new`.
    /// The range must lie in the data region of a single page.
    pub fn record(&mut self, addr: u64, old: &[u8], new: &[u8]) -> Result<()> {
        if old.len() != new.len() {
            return Err(Error::Internal(format!(
                "delta images differ in length ({} vs {})",
                old.len(),
                new.len()
            )));
        }
        let mut pos = 0usize;
        while pos < old.len() {
            let a = addr + pos as u64;
            let off = (a % BLOCK as u64) as usize;
            let n = (BLOCK - off).min(old.len() - pos);
            let d = partial_delta(off, &old[pos..pos + n], &new[pos..pos + n]);
            if !d.is_zero() {
                self.add(layout::locate_consistency(a)?, d);
                self.add(layout::locate_correlation(a)?, d);
            }
            pos += n;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &DeltaSet) {
        for (&a, &d) in &other.deltas {
            self.add(a, d);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, ChecksumBlock)> + '_ {
        self.deltas
            .iter()
            .filter(|(_, d)| !d.is_zero())
            .map(|(&a, &d)| (a, d))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    /// New contents of every affected checksum block, given the current
    /// contents in `store`.
    pub fn resolve<S: BlockStore + ?Sized>(
        &self,
        store: &mut S,
    ) -> Result<Vec<(u64, [u8; BLOCK])>> {
        self.iter()
            .map(|(addr, d)| {
                let cur = ChecksumBlock::from_bytes(&store.read_block(addr)?);
                Ok((addr, (cur + d).to_bytes()))
            })
            .collect()
    }

    /// Adds every delta into its checksum block and persists it. Returns the
    /// number of checksum blocks written.
    pub fn apply<S: BlockStore + ?Sized>(&self, store: &mut S) -> Result<u64> {
        let blocks = self.resolve(store)?;
        for (addr, b) in &blocks {
            store.write_block(*addr, b)?;
            store.persist_block(*addr)?;
        }
        Ok(blocks.len() as u64)
    }
}

fn read_data<S: BlockStore + ?Sized>(
    store: &mut S,
    psa: u64,
) -> Result<[[ChecksumBlock; COLS]; ROWS]> {
    let mut d = [[ChecksumBlock::ZERO; COLS]; ROWS];
    for c in 0..COLS {
        for (r, row) in d.iter_mut().enumerate() {
            row[c] = ChecksumBlock::from_bytes(&store.read_block(layout::data_block(psa, r, c))?);
        }
    }
    Ok(d)
}

fn column_sum(d: &[[ChecksumBlock; COLS]; ROWS], c: usize) -> ChecksumBlock {
    d.iter().map(|row| row[c]).sum()
}

fn row_sum(d: &[[ChecksumBlock; COLS]; ROWS], r: usize) -> ChecksumBlock {
    d[r].iter().copied().sum()
}

/// Recomputes the consistency checksums of `columns` and every correlation
/// checksum of the page at `psa`, storing and persisting each. Returns the
/// number of checksum blocks written.
pub fn build_checksums<S: BlockStore + ?Sized>(
    store: &mut S,
    psa: u64,
    columns: &[usize],
) -> Result<u64> {
    let d = read_data(store, psa)?;
    let mut n = 0;
    for &c in columns {
        if c >= COLS {
            return Err(Error::Internal(format!("column {c} out of range")));
        }
        let a = layout::cons_block(psa, c);
        store.write_block(a, &column_sum(&d, c).to_bytes())?;
        store.persist_block(a)?;
        n += 1;
    }
    for r in 0..ROWS {
        let a = layout::corr_block(psa, r);
        store.write_block(a, &row_sum(&d, r).to_bytes())?;
        store.persist_block(a)?;
        n += 1;
    }
    Ok(n)
}

pub fn build_page<S: BlockStore + ?Sized>(store: &mut S, psa: u64) -> Result<u64> {
    let all: Vec<usize> = (0..COLS).collect();
    build_checksums(store, psa, &all)
}

/// Incrementally updates both checksums covering the data block at
/// `block_addr` after it changed from `old` to `new`. Returns the number of
/// checksum blocks written (zero when nothing changed).
pub fn update_checksums<S: BlockStore + ?Sized>(
    store: &mut S,
    block_addr: u64,
    old: &[u8; BLOCK],
    new: &[u8; BLOCK],
) -> Result<u64> {
    let mut ds = DeltaSet::new();
    ds.record(block_addr - block_addr % BLOCK as u64, old, new)?;
    ds.apply(store)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageCheck {
    pub bad_columns: Vec<usize>,
    pub bad_rows: Vec<usize>,
}

impl PageCheck {
    pub fn is_clean(&self) -> bool {
        self.bad_columns.is_empty() && self.bad_rows.is_empty()
    }
}

struct Syndromes {
    row: [ChecksumBlock; ROWS],
    col: [ChecksumBlock; COLS],
}

impl Syndromes {
    fn compute(
        d: &[[ChecksumBlock; COLS]; ROWS],
        cons: &[ChecksumBlock; COLS],
        corr: &[ChecksumBlock; ROWS],
    ) -> Self {
        let mut s = Syndromes {
            row: [ChecksumBlock::ZERO; ROWS],
            col: [ChecksumBlock::ZERO; COLS],
        };
        for r in 0..ROWS {
            s.row[r] = corr[r] - row_sum(d, r);
        }
        for c in 0..COLS {
            s.col[c] = cons[c] - column_sum(d, c);
        }
        s
    }

    fn bad_rows(&self) -> Vec<usize> {
        (0..ROWS).filter(|&r| !self.row[r].is_zero()).collect()
    }

    fn bad_cols(&self) -> Vec<usize> {
        (0..COLS).filter(|&c| !self.col[c].is_zero()).collect()
    }
}

fn read_checksums<S: BlockStore + ?Sized>(
    store: &mut S,
    psa: u64,
) -> Result<([ChecksumBlock; COLS], [ChecksumBlock; ROWS])> {
    let mut cons = [ChecksumBlock::ZERO; COLS];
    let mut corr = [ChecksumBlock::ZERO; ROWS];
    for (c, v) in cons.iter_mut().enumerate() {
        *v = ChecksumBlock::from_bytes(&store.read_block(layout::cons_block(psa, c))?);
    }
    for (r, v) in corr.iter_mut().enumerate() {
        *v = ChecksumBlock::from_bytes(&store.read_block(layout::corr_block(psa, r))?);
    }
    Ok((cons, corr))
}

pub fn verify_page<S: BlockStore + ?Sized>(store: &mut S, psa: u64) -> Result<PageCheck> {
    let d = read_data(store, psa)?;
    let (cons, corr) = read_checksums(store, psa)?;
    let s = Syndromes::compute(&d, &cons, &corr);
    Ok(PageCheck {
        bad_columns: s.bad_cols(),
        bad_rows: s.bad_rows(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    pub bad_columns: Vec<usize>,
    pub bad_rows: Vec<usize>,
    /// Data blocks rewritten from checksums, as (row, column).
    pub corrected: Vec<(usize, usize)>,
    /// Suspect data blocks the decoder could not pin down.
    pub uncorrectable: Vec<(usize, usize)>,
    /// Checksum blocks found stale while every data block agreed, and rebuilt.
    pub checksums_rebuilt: usize,
}

impl Correction {
    pub fn is_clean(&self) -> bool {
        self.bad_columns.is_empty() && self.bad_rows.is_empty()
    }
}

/// Verifies the page and repairs what it can.
///
/// Suspects are the intersections of rows and columns with a nonzero
/// syndrome. A bad row whose suspects all sit in a single bad column is
/// repaired from its row syndrome, and symmetrically for columns. When no
/// row or column is that simple, a suspect whose row syndrome equals its
/// column syndrome, with that pairing unique on both sides, is repaired
/// from it (this resolves errors that share no row or column). Syndromes
/// are recomputed after every round until nothing changes.
pub fn correct_page<S: BlockStore + ?Sized>(store: &mut S, psa: u64) -> Result<Correction> {
    let mut d = read_data(store, psa)?;
    let (mut cons, mut corr) = read_checksums(store, psa)?;
    let mut s = Syndromes::compute(&d, &cons, &corr);
    let mut out = Correction {
        bad_columns: s.bad_cols(),
        bad_rows: s.bad_rows(),
        ..Correction::default()
    };
    let mut touched = [[false; COLS]; ROWS];
    let mut rebuilt_cons = [false; COLS];
    let mut rebuilt_corr = [false; ROWS];

    for _ in 0..(ROWS * COLS + ROWS + COLS) {
        let rows = s.bad_rows();
        let cols = s.bad_cols();
        if rows.is_empty() && cols.is_empty() {
            break;
        }
        let mut fixes: Vec<(usize, usize, ChecksumBlock)> = Vec::new();
        if cols.is_empty() {
            for &r in &rows {
                corr[r] = row_sum(&d, r);
                rebuilt_corr[r] = true;
            }
        } else if rows.is_empty() {
            for &c in &cols {
                cons[c] = column_sum(&d, c);
                rebuilt_cons[c] = true;
            }
        } else if cols.len() == 1 {
            fixes.extend(rows.iter().map(|&r| (r, cols[0], s.row[r])));
        } else if rows.len() == 1 {
            fixes.extend(cols.iter().map(|&c| (rows[0], c, s.col[c])));
        } else {
            for &r in &rows {
                let matches: Vec<usize> = cols
                    .iter()
                    .copied()
                    .filter(|&c| s.col[c] == s.row[r])
                    .collect();
                if let [c] = matches[..] {
                    let back = rows.iter().filter(|&&r2| s.row[r2] == s.col[c]).count();
                    if back == 1 {
                        fixes.push((r, c, s.row[r]));
                    }
                }
            }
            if fixes.is_empty() {
                break;
            }
        }
        for (r, c, delta) in fixes {
            d[r][c] += delta;
            touched[r][c] = true;
        }
        s = Syndromes::compute(&d, &cons, &corr);
    }

    for r in 0..ROWS {
        for c in 0..COLS {
            if touched[r][c] {
                let a = layout::data_block(psa, r, c);
                store.write_block(a, &d[r][c].to_bytes())?;
                store.persist_block(a)?;
                out.corrected.push((r, c));
            }
        }
    }
    for c in 0..COLS {
        if rebuilt_cons[c] {
            let a = layout::cons_block(psa, c);
            store.write_block(a, &cons[c].to_bytes())?;
            store.persist_block(a)?;
            out.checksums_rebuilt += 1;
        }
    }
    for r in 0..ROWS {
        if rebuilt_corr[r] {
            let a = layout::corr_block(psa, r);
            store.write_block(a, &corr[r].to_bytes())?;
            store.persist_block(a)?;
            out.checksums_rebuilt += 1;
        }
    }
    for &r in &s.bad_rows() {
        for &c in &s.bad_cols() {
            out.uncorrectable.push((r, c));
        }
    }
    // A fix that did not converge is not a correction.
    out.corrected.retain(|p| !out.uncorrectable.contains(p));
    Ok(out)
}
