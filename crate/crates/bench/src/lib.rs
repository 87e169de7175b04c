//! Shared fixtures for the criterion benchmarks.

use pmtx_core::checksum::build_page;
use pmtx_core::layout::{DATA_BYTES, PAGE_SIZE};

/// A page whose data region holds a simple byte pattern and whose
/// checksums are valid.
pub fn patterned_page(seed: u8) -> Vec<u8> {
    let mut page = vec![0u8; PAGE_SIZE as usize];
    for (i, b) in page[..DATA_BYTES as usize].iter_mut().enumerate() {
        *b = (i as u8).wrapping_mul(31).wrapping_add(seed);
    }
    build_page(page.as_mut_slice(), 0).expect("page-sized buffer");
    page
}
