//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion before asserting, so `cargo test --test acceptance -- --nocapture`
//! doubles as a readable report.

use std::collections::HashMap;

use pmtx_core::checksum::{build_page, correct_page, verify_page};
use pmtx_core::emu::TraceEvent;
use pmtx_core::harness::{
    crashtest, interleaved_crashes, microbench_checksum, packed_page_economy, run, RunOptions,
};
use pmtx_core::layout::{
    self, align_up, consistency_closed_form, correlation_closed_form, locate_consistency,
    locate_correlation, CBS, COLUMN_BYTES, CONS_BASE, CORR_BASE, DATA_BLOCKS, PAGE_SIZE,
};
use pmtx_core::pool::blocks_spanned;
use pmtx_core::{
    CacheConfig, Config, Emulator, LogMode, Policy, PoolConfig, PoolKind, Runtime, TxnState,
    WorkloadSpec,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POLICIES: [Policy; 4] = [Policy::Lru, Policy::Plru, Policy::Bip, Policy::Random];

fn verdict(n: u32, title: &str, failures: &[String], detail: &str) {
    let status = if failures.is_empty() { "PASS" } else { "FAIL" };
    println!("criterion {n} ({title}): {status} {detail}");
    for f in failures.iter().take(20) {
        println!("    {f}");
    }
    assert!(
        failures.is_empty(),
        "criterion {n} failed: {} violations",
        failures.len()
    );
}

#[test]
fn criterion_1_crash_consistency_matrix() {
    let presets = ["tpcc", "ycsb-a", "ycsb-b", "ycsb-d", "ycsb-f"];
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    for name in presets {
        let spec = WorkloadSpec::preset(name)
            .unwrap()
            .with_ops(10_000)
            .with_objects(2_000);
        let read_heavy = spec.mix.read_percent() >= 95;
        for policy in POLICIES {
            let opts = RunOptions::crash_scale(LogMode::Undo, policy);
            let s = crashtest(&spec, &opts, 20).unwrap();
            failures.extend(s.violations());
            for r in &s.runs {
                if r.check.inconsistent != Some(r.check.report.detected) {
                    failures.push(format!(
                        "{name}/{policy} run {}: I_obj {:?} != DI_obj {}",
                        r.index, r.check.inconsistent, r.check.report.detected
                    ));
                }
            }
            if read_heavy && s.totals.inconsistent > 0 {
                failures.push(format!(
                    "{name}/{policy}: read-heavy preset has I_obj {}",
                    s.totals.inconsistent
                ));
            }
            rows.push(format!(
                "{name}/{policy}: I_obj {} DI_obj {} CC_obj {}",
                s.totals.inconsistent, s.totals.detected, s.totals.uncorrected
            ));
        }
    }
    for r in &rows {
        println!("    {r}");
    }
    verdict(
        1,
        "crash consistency, 5 presets x 4 policies x 20 crashes",
        &failures,
        "",
    );
}

#[test]
fn criterion_2_flush_reduction() {
    let spec = WorkloadSpec::preset("update-only")
        .unwrap()
        .with_ops(100_000)
        .with_objects(50_000);
    let mut failures = Vec::new();
    let mut detail = String::new();
    for mode in [LogMode::Undo, LogMode::Redo] {
        let on = run(
            &spec,
            &RunOptions {
                mode,
                elide: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        let off = run(
            &spec,
            &RunOptions {
                mode,
                elide: false,
                ..RunOptions::default()
            },
        )
        .unwrap();
        let reduction =
            1.0 - on.runtime.object_flushes as f64 / off.runtime.object_flushes.max(1) as f64;
        detail += &format!(
            "[{mode}: skipped {:.1}%, object flushes {} vs {}] ",
            on.skipped_fraction * 100.0,
            on.runtime.object_flushes,
            off.runtime.object_flushes
        );
        if on.skipped_fraction < 0.5 || reduction < 0.5 {
            failures.push(format!(
                "{mode}: skipped fraction {:.3}, reduction {reduction:.3}",
                on.skipped_fraction
            ));
        }
        if off.runtime.object_blocks_skipped != 0 {
            failures.push(format!("{mode}: flushes skipped with elision off"));
        }
    }
    verdict(2, "flush reduction >= 50%", &failures, &detail);
}

fn count_config() -> Config {
    Config {
        pools: PoolConfig {
            key_pool_bytes: 64 * PAGE_SIZE,
            field_value_pool_bytes: 64 * PAGE_SIZE,
            log_pool_bytes: 256 * PAGE_SIZE,
        },
        ..Config::default()
    }
}

/// One transaction writing `b` fresh single-block objects; returns the
/// runtime counters after it physically commits.
fn count_run(mode: LogMode, elide: bool, b: usize) -> pmtx_core::txn::RuntimeCounters {
    let mut rt = Runtime::init(&count_config()).unwrap();
    let objs: Vec<_> = (0..b)
        .map(|_| rt.alloc(PoolKind::Key, 16).unwrap())
        .collect();
    assert!(objs.iter().all(|o| o.blocks == 1));
    rt.reset_counters();
    let t = rt.tx_start(mode, elide).unwrap();
    for (i, o) in objs.iter().enumerate() {
        rt.tx_write(t, o, &[i as u8 + 1; 16]).unwrap();
    }
    if rt.tx_lcommit(t).unwrap() != TxnState::PhysicallyCommitted {
        rt.drain(t).unwrap();
    }
    assert_eq!(rt.state(t), Some(TxnState::PhysicallyCommitted));
    rt.counters()
}

#[test]
fn criterion_3_count_table() {
    let b = 100;
    let mut failures = Vec::new();
    let mut check = |what: &str, got: u64, want: u64| {
        if got != want {
            failures.push(format!("{what}: got {got}, want {want}"));
        }
    };
    let undo = count_run(LogMode::Undo, false, b);
    check("undo flushes", undo.object_and_log_flushes(), 200);
    check("undo barriers", undo.object_and_log_barriers(), 200);
    let redo = count_run(LogMode::Redo, false, b);
    check("redo flushes", redo.object_and_log_flushes(), 200);
    check("redo barriers", redo.object_and_log_barriers(), 101);
    let undo_e = count_run(LogMode::Undo, true, b);
    check("undo-elide log flushes", undo_e.log_flushes, 100);
    check("undo-elide object flushes", undo_e.object_flushes, 0);
    check("undo-elide barriers", undo_e.object_and_log_barriers(), 100);
    check("undo-elide skipped", undo_e.object_blocks_skipped, 100);
    let redo_e = count_run(LogMode::Redo, true, b);
    check("redo-elide log flushes", redo_e.log_flushes, 100);
    check("redo-elide object flushes", redo_e.object_flushes, 0);
    let detail = format!(
        "undo {}/{}, redo {}/{}, undo-elide {} log/{} barriers, redo-elide {} log",
        undo.object_and_log_flushes(),
        undo.object_and_log_barriers(),
        redo.object_and_log_flushes(),
        redo.object_and_log_barriers(),
        undo_e.log_flushes,
        undo_e.object_and_log_barriers(),
        redo_e.log_flushes
    );
    verdict(
        3,
        "flush and barrier counts for B = 100",
        &failures,
        &detail,
    );
}

fn random_page(seed: u64) -> Vec<u8> {
    let mut img = vec![0u8; PAGE_SIZE as usize];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut img[..layout::DATA_BYTES as usize]);
    build_page(&mut img, 0).unwrap();
    img
}

fn corrupt(img: &mut [u8], rng: &mut ChaCha8Rng, row: usize, col: usize) {
    let at = layout::data_block(0, row, col) as usize;
    let mut junk = [0u8; 64];
    rng.fill_bytes(&mut junk);
    for (b, j) in img[at..at + 64].iter_mut().zip(junk) {
        *b = b.wrapping_add(j | 1);
    }
}

#[test]
fn criterion_4_checksum_math() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clean = random_page(11);

    let mut repaired = 0;
    for k in 0..DATA_BLOCKS {
        let (row, col) = (k % 7, k / 7);
        let mut img = clean.clone();
        corrupt(&mut img, &mut rng, row, col);
        let check = verify_page(&mut img, 0).unwrap();
        let fixed = correct_page(&mut img, 0).unwrap();
        if check.bad_rows == [row]
            && check.bad_columns == [col]
            && img == clean
            && fixed.corrected == [(row, col)]
        {
            repaired += 1;
        } else {
            failures.push(format!("single error at ({row},{col}) not repaired"));
        }
    }

    let mut img = clean.clone();
    corrupt(&mut img, &mut rng, 1, 2);
    corrupt(&mut img, &mut rng, 1, 5);
    let fixed = correct_page(&mut img, 0).unwrap();
    if img != clean || fixed.corrected.len() != 2 || !fixed.uncorrectable.is_empty() {
        failures.push("two errors in one row, each alone in its column, not repaired".into());
    }

    for pattern in [
        vec![(1, 2), (1, 4), (4, 2), (4, 4)],
        vec![(1, 2), (1, 4), (4, 2), (2, 4)],
    ] {
        let mut img = clean.clone();
        for &(r, c) in &pattern {
            corrupt(&mut img, &mut rng, r, c);
        }
        let before = img.clone();
        let fixed = correct_page(&mut img, 0).unwrap();
        if fixed.uncorrectable.is_empty() {
            failures.push(format!("pattern {pattern:?} not reported uncorrectable"));
        }
        for &(r, c) in &fixed.corrected {
            let at = layout::data_block(0, r, c) as usize;
            if img[at..at + 64] != clean[at..at + 64] && img[at..at + 64] != before[at..at + 64] {
                failures.push(format!("pattern {pattern:?}: block ({r},{c}) miscorrected"));
            }
        }
    }

    // Walk the data region block by block in allocation order and record
    // where each block's checksums live.
    let psa = 5 * PAGE_SIZE;
    let mut oracle = HashMap::new();
    let (mut row, mut col) = (0u64, 0u64);
    let mut off = 0;
    while off < layout::DATA_BYTES {
        oracle.insert(
            off,
            (psa + CONS_BASE + col * CBS, psa + CORR_BASE + row * CBS),
        );
        off += CBS;
        row += 1;
        if row == 7 {
            row = 0;
            col += 1;
        }
    }
    let mut aligned_ok = 0;
    for (&off, &(cons, corr)) in &oracle {
        let a = psa + off;
        if locate_consistency(a).unwrap() == cons && locate_correlation(a).unwrap() == corr {
            aligned_ok += 1;
        } else {
            failures.push(format!(
                "locator disagrees with enumeration at offset {off}"
            ));
        }
    }

    let mut cons_div = Vec::new();
    let mut corr_div = Vec::new();
    for off in 0..layout::DATA_BYTES {
        let a = psa + off;
        if consistency_closed_form(psa, off) != locate_consistency(a).unwrap() as i64 {
            cons_div.push(off);
        }
        let corr = align_up(correlation_closed_form(psa, off), CBS as i64);
        if corr != locate_correlation(a).unwrap() as i64 {
            corr_div.push(off);
        }
    }
    let want_cons: Vec<u64> = (0..7).map(|c| c * COLUMN_BYTES).collect();
    let want_corr: Vec<u64> = (0..DATA_BLOCKS as u64).map(|b| b * CBS).collect();
    if cons_div != want_cons {
        failures.push(format!("consistency closed form diverges at {cons_div:?}"));
    }
    if corr_div != want_corr {
        failures.push(format!(
            "correlation closed form diverges at {} offsets",
            corr_div.len()
        ));
    }

    let detail = format!(
        "{repaired}/49 single errors repaired, {aligned_ok}/49 aligned offsets match, closed forms diverge only at {} column and {} block boundaries",
        cons_div.len(),
        corr_div.len()
    );
    verdict(
        4,
        "checksum detection, correction and location",
        &failures,
        &detail,
    );
}

#[test]
fn criterion_5_checksum_flush_economy() {
    let mut failures = Vec::new();
    let page = packed_page_economy().unwrap();
    if page.checksum_flushes != 14 || page.object_flushes != 49 {
        failures.push(format!(
            "packed page: {} checksum vs {} object flushes",
            page.checksum_flushes, page.object_flushes
        ));
    }
    let m = microbench_checksum(2048, 64, 5).unwrap();
    if m.full_page.checksum_flushes >= m.full_page.object_flushes {
        failures.push("checksum flushes not below object flushes".into());
    }
    let detail = format!(
        "{} vs {} (ratio {:.3}); 64 x 2 KiB objects: create {:.3}, update {:.3}",
        page.checksum_flushes,
        page.object_flushes,
        page.checksum_flushes as f64 / page.object_flushes as f64,
        m.create_ratio,
        m.update_ratio
    );
    verdict(
        5,
        "14 checksum flushes versus 49 object flushes",
        &failures,
        &detail,
    );
}

#[test]
fn criterion_6_dirtiness() {
    let mut failures = Vec::new();
    let spec = WorkloadSpec::preset("ycsb-a")
        .unwrap()
        .with_ops(20_000)
        .with_objects(5_000);
    let pair = run(
        &spec,
        &RunOptions {
            pair_alloc: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    let split = run(
        &spec,
        &RunOptions {
            pair_alloc: false,
            ..RunOptions::default()
        },
    )
    .unwrap();
    if pair.average_dirtiness <= split.average_dirtiness {
        failures.push(format!(
            "pair {:.4} not above split {:.4}",
            pair.average_dirtiness, split.average_dirtiness
        ));
    }

    let mut rt = Runtime::init(&count_config()).unwrap();
    let mut spans = [0usize; 4];
    for _ in 0..200 {
        let p = rt.alloc_pair(16, 100).unwrap();
        let n = blocks_spanned(p.value.addr, p.value.size).count();
        spans[n.min(3)] += 1;
        if n != 2 || blocks_spanned(p.region.addr, p.region.size).count() != 2 {
            failures.push(format!(
                "100-byte value at {:#x} spans {n} blocks",
                p.value.addr
            ));
        }
    }
    let detail = format!(
        "pair {:.4} > split {:.4}; 100-byte values spanning 2 blocks: {}/200",
        pair.average_dirtiness, split.average_dirtiness, spans[2]
    );
    verdict(
        6,
        "coalesced allocation raises dirtiness",
        &failures,
        &detail,
    );
}

#[test]
fn criterion_7_atomicity_under_interleaved_crashes() {
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    let spec = WorkloadSpec::preset("ycsb-sql")
        .unwrap()
        .with_ops(10_000)
        .with_objects(2_000);
    let cases = [
        (LogMode::Undo, Policy::Lru, false),
        (LogMode::Undo, Policy::Random, false),
        (LogMode::Redo, Policy::Plru, false),
        (LogMode::Redo, Policy::Bip, true),
    ];
    for (mode, policy, roll_forward) in cases {
        let mut opts = RunOptions {
            clients: 4,
            abort_percent: 2,
            ..RunOptions::crash_scale(mode, policy)
        };
        opts.recovery.roll_forward_redo = roll_forward;
        let s = interleaved_crashes(&spec, &opts, 50).unwrap();
        if s.checks.len() != 50 {
            failures.push(format!(
                "{mode}/{policy}: {} crashes injected",
                s.checks.len()
            ));
        }
        failures.extend(
            s.violations()
                .into_iter()
                .map(|v| format!("{mode}/{policy}: {v}")),
        );
        let mid = s.checks.iter().filter(|c| c.fence.is_some()).count();
        rows.push(format!(
            "{mode}/{policy}{}: {} ops, 50 crashes ({mid} mid-operation), {} in-flight transactions cancelled, {} objects repaired",
            if roll_forward { " roll-forward" } else { "" },
            s.ops,
            s.txns.lost_to_crash,
            s.totals.corrected
        ));
    }
    for r in &rows {
        println!("    {r}");
    }
    verdict(
        7,
        "byte-exact atomicity across 50 interleaved crashes",
        &failures,
        "",
    );
}

const TRACE_BLOCKS: u64 = 48;

/// Replays a random trace and checks the crash image against a
/// straight-line model of (volatile, durable) bytes. Evictions are taken
/// from the emulator's own event trace.
fn replay_trace(policy: Policy, seed: u64) -> Result<Vec<u8>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = (TRACE_BLOCKS * CBS) as usize;
    let mut emu = Emulator::new(CacheConfig::new(4, 2, policy, seed), cap).unwrap();
    emu.enable_trace();
    let mut volatile = vec![0u8; cap];
    let mut durable = vec![0u8; cap];
    let mut dirty = vec![false; cap];
    let write_back = |line: u64, volatile: &[u8], durable: &mut [u8], dirty: &mut [bool]| {
        let r = (line * CBS) as usize..((line + 1) * CBS) as usize;
        for i in r {
            if dirty[i] {
                durable[i] = volatile[i];
                dirty[i] = false;
            }
        }
    };
    for step in 0..200 {
        match rng.random_range(0..100) {
            0..=44 => {
                let len = rng.random_range(1..=150usize);
                let addr = rng.random_range(0..(cap - len) as u64);
                let mut data = vec![0u8; len];
                rng.fill_bytes(&mut data);
                emu.store(addr, &data).unwrap();
                volatile[addr as usize..addr as usize + len].copy_from_slice(&data);
                dirty[addr as usize..addr as usize + len].fill(true);
            }
            45..=64 => {
                let len = rng.random_range(1..=100usize);
                let addr = rng.random_range(0..(cap - len) as u64);
                let got = emu.load(addr, len).unwrap();
                if got[..] != volatile[addr as usize..addr as usize + len] {
                    return Err(format!("step {step}: load returned stale bytes"));
                }
            }
            65..=79 => {
                emu.flush_line(rng.random_range(0..cap as u64)).unwrap();
            }
            80..=87 => emu.fence(),
            88..=96 => emu.touch_volatile(rng.random_range(0..1 << 20)),
            _ => {
                for ev in emu.take_trace() {
                    apply_event(ev, &volatile, &mut durable, &mut dirty, &write_back);
                }
                let img = emu.crash().into_inner();
                if img != durable {
                    return Err(format!("step {step}: crash image differs from model"));
                }
                volatile.copy_from_slice(&durable);
                dirty.fill(false);
                emu.take_trace();
            }
        }
        for ev in emu.take_trace() {
            apply_event(ev, &volatile, &mut durable, &mut dirty, &write_back);
        }
        let c = emu.counters();
        if c.dirty_bytes_flushed > 64 * c.lines_flushed {
            return Err(format!("step {step}: dirtiness counters out of range"));
        }
    }
    let img = emu.crash().into_inner();
    if img != durable {
        return Err("final crash image differs from model".into());
    }
    let c = emu.counters();
    let mut out = img;
    out.extend_from_slice(
        format!(
            "{} {} {} {}",
            c.flushes_issued, c.lines_flushed, c.dirty_bytes_flushed, c.writebacks_by_eviction
        )
        .as_bytes(),
    );
    Ok(out)
}

fn apply_event(
    ev: TraceEvent,
    volatile: &[u8],
    durable: &mut [u8],
    dirty: &mut [bool],
    write_back: &impl Fn(u64, &[u8], &mut [u8], &mut [bool]),
) {
    match ev {
        TraceEvent::Flush { addr } | TraceEvent::Evict { addr, .. } => {
            write_back(addr / CBS, volatile, durable, dirty)
        }
        _ => {}
    }
}

#[test]
fn criterion_8_emulator_soundness() {
    let mut failures = Vec::new();
    let mut traces = 0;
    for policy in POLICIES {
        for seed in 0..1000 {
            match replay_trace(policy, seed) {
                Ok(_) => traces += 1,
                Err(e) => failures.push(format!("{policy} seed {seed}: {e}")),
            }
        }
        for seed in [7, 99] {
            if replay_trace(policy, seed) != replay_trace(policy, seed) {
                failures.push(format!("{policy} seed {seed}: replay not deterministic"));
            }
        }
    }
    let spec = WorkloadSpec::preset("ycsb-sql")
        .unwrap()
        .with_ops(2_000)
        .with_objects(500);
    let opts = RunOptions {
        clients: 3,
        ..RunOptions::crash_scale(LogMode::Redo, Policy::Random)
    };
    let a = serde_json::to_string(&run(&spec, &opts).unwrap()).unwrap();
    let b = serde_json::to_string(&run(&spec, &opts).unwrap()).unwrap();
    if a != b {
        failures.push("workload run not byte-identical across repeats".into());
    }
    verdict(
        8,
        "emulator durability oracle and determinism",
        &failures,
        &format!("{traces}/4000 traces match the oracle; repeated runs byte-identical"),
    );
}
