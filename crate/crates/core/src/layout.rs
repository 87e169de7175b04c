//! Page geometry for checksum-protected pools.
//!
//! A 4 KiB page is viewed as an 8x8 matrix of 64-byte blocks. The first
//! 3136 bytes hold a 7x7 grid of data blocks laid out column by column (each
//! column is 448 contiguous bytes). The next 448 bytes hold one consistency
//! checksum per column, then 448 bytes of correlation checksums, one per row.
//! The last 64 bytes of the page are unused.

use serde::{Deserialize, Serialize};

use crate::emu::BLOCK;
use crate::error::{Error, Result};

pub const PAGE_SIZE: u64 = 4096;
pub const CBS: u64 = BLOCK as u64;
pub const ROWS: usize = 7;
pub const COLS: usize = 7;
pub const COLUMN_BYTES: u64 = ROWS as u64 * CBS;
pub const DATA_BYTES: u64 = COLS as u64 * COLUMN_BYTES;
pub const CHECKSUM_BYTES: u64 = (ROWS + COLS) as u64 * CBS;
pub const CONS_BASE: u64 = DATA_BYTES;
pub const CORR_BASE: u64 = DATA_BYTES + COLS as u64 * CBS;
pub const DATA_BLOCKS: usize = ROWS * COLS;
pub const CHECKSUM_BLOCKS: usize = ROWS + COLS;

/// Layout constants as published in the configuration document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutInfo {
    pub mps: u64,
    pub cbs: u64,
    pub oms: u64,
    pub cms: u64,
    pub matrix_rows: usize,
    pub matrix_cols: usize,
    pub bytes_per_column: u64,
}

impl Default for LayoutInfo {
    fn default() -> Self {
        LayoutInfo {
            mps: PAGE_SIZE,
            cbs: CBS,
            oms: DATA_BYTES,
            cms: CHECKSUM_BYTES,
            matrix_rows: ROWS + 1,
            matrix_cols: COLS + 1,
            bytes_per_column: COLUMN_BYTES,
        }
    }
}

#[inline]
pub fn page_start(addr: u64) -> u64 {
    addr - addr % PAGE_SIZE
}

#[inline]
pub fn page_offset(addr: u64) -> u64 {
    addr % PAGE_SIZE
}

#[inline]
pub fn column_of(offset: u64) -> usize {
    (offset / COLUMN_BYTES) as usize
}

#[inline]
pub fn row_of(offset: u64) -> usize {
    ((offset % COLUMN_BYTES) / CBS) as usize
}

#[inline]
pub fn data_block(psa: u64, row: usize, col: usize) -> u64 {
    psa + col as u64 * COLUMN_BYTES + row as u64 * CBS
}

#[inline]
pub fn cons_block(psa: u64, col: usize) -> u64 {
    psa + CONS_BASE + col as u64 * CBS
}

#[inline]
pub fn corr_block(psa: u64, row: usize) -> u64 {
    psa + CORR_BASE + row as u64 * CBS
}

/// Row and column of the data block containing `addr`.
pub fn position(addr: u64) -> Result<(usize, usize)> {
    let off = page_offset(addr);
    if off >= DATA_BYTES {
        return Err(Error::Layout { addr, offset: off });
    }
    Ok((row_of(off), column_of(off)))
}

/// Address of the consistency checksum protecting the block at `addr`.
pub fn locate_consistency(addr: u64) -> Result<u64> {
    let (_, col) = position(addr)?;
    Ok(cons_block(page_start(addr), col))
}

/// Address of the correlation checksum protecting the block at `addr`.
pub fn locate_correlation(addr: u64) -> Result<u64> {
    let (row, _) = position(addr)?;
    Ok(corr_block(page_start(addr), row))
}

/// Closed-form consistency locator using a ceiling over the column width.
/// Agrees with [`locate_consistency`] except at offsets that are exact
/// multiples of the column width, where it lands one column early (or
/// before the region, for offset 0).
pub fn consistency_closed_form(psa: u64, offset: u64) -> i64 {
    let col_ceil = offset.div_ceil(COLUMN_BYTES) as i64;
    (col_ceil - 1) * CBS as i64 + CONS_BASE as i64 + psa as i64
}

/// Closed-form correlation locator: `offset mod 448 - 64 + 3136 + 448 + psa`.
/// The raw value is not block aligned in general; rounding it up to the next
/// block boundary agrees with [`locate_correlation`] except at offsets that
/// are exact multiples of the block size.
pub fn correlation_closed_form(psa: u64, offset: u64) -> i64 {
    (offset % COLUMN_BYTES) as i64 - CBS as i64 + CORR_BASE as i64 + psa as i64
}

pub fn align_up(v: i64, to: i64) -> i64 {
    (v + to - 1).div_euclid(to) * to
}
