//! Workload driver, crash campaigns and the checksum micro-benchmark.
//!
//! The driver executes a [`WorkloadSpec`] against a [`Runtime`] while
//! keeping a reference model of every record's last physically committed
//! contents. Crash campaigns compare recovered images against that model.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checksum::{build_page, DeltaSet};
use crate::config::Config;
use crate::emu::{
    CacheConfig, Emulator, FlushCounters, PersistentImage, Policy, DIRTINESS_BUCKETS,
};
use crate::error::{Error, Result};
use crate::layout::{self, PAGE_SIZE};
use crate::pool::{Allocation, Pair, PoolConfig, PoolKind};
use crate::recovery::{recover, RecoveryOptions, RecoveryReport};
use crate::tracker::TrackerStats;
use crate::txn::{LogMode, Runtime, RuntimeCounters, TxnId};
use crate::workload::{KeyChooser, OpKind, WorkloadSpec};

/// Volatile lines touched by background traffic are drawn from this many
/// distinct lines.
const DRAM_FOOTPRINT_LINES: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub mode: LogMode,
    /// Defer object flushes to the locality tracker.
    pub elide: bool,
    /// Pack each field with its value in one region.
    pub pair_alloc: bool,
    /// Concurrent clients, stepped round-robin one call at a time.
    pub clients: usize,
    /// Volatile cache lines touched per operation, standing in for the
    /// application's DRAM-resident state.
    pub dram_lines_per_op: u32,
    /// Chance, in percent, that a writing transaction aborts instead of
    /// committing.
    pub abort_percent: u32,
    pub config: Config,
    pub recovery: RecoveryOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            mode: LogMode::Undo,
            elide: true,
            pair_alloc: true,
            clients: 1,
            dram_lines_per_op: 0,
            abort_percent: 0,
            config: Config::default(),
            recovery: RecoveryOptions::default(),
        }
    }
}

impl RunOptions {
    pub fn with_policy(mut self, policy: Policy, seed: u64) -> Self {
        self.config.cache.policy = policy;
        self.config.cache.seed = seed;
        self
    }

    /// Geometry for crash campaigns: a 176 KiB cache and small pools, so
    /// that a few thousand operations cycle the cache many times over.
    pub fn crash_scale(mode: LogMode, policy: Policy) -> Self {
        RunOptions {
            mode,
            dram_lines_per_op: 32,
            config: Config {
                cache: CacheConfig::new(256, 11, policy, 0),
                pools: PoolConfig {
                    key_pool_bytes: 1 << 20,
                    field_value_pool_bytes: 4 << 20,
                    log_pool_bytes: 4 << 20,
                },
                ..Config::default()
            },
            ..RunOptions::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.clients == 0 {
            return Err(Error::config("at least one client is required"));
        }
        if self.abort_percent > 100 {
            return Err(Error::config("abort_percent must be at most 100"));
        }
        if self.elide && !self.config.checksums {
            return Err(Error::config("flush elision requires page checksums"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum Fv {
    Pair(Pair),
    Split {
        field: Allocation,
        value: Allocation,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Record {
    key: Allocation,
    fv: Fv,
}

impl Record {
    /// Units written by updates.
    fn data_objects(&self) -> Vec<Allocation> {
        match self.fv {
            Fv::Pair(p) => vec![p.region],
            Fv::Split { field, value } => vec![field, value],
        }
    }

    fn objects(&self) -> Vec<Allocation> {
        let mut v = vec![self.key];
        v.extend(self.data_objects());
        v
    }

    /// Allocations as the allocator sees them.
    fn regions(&self) -> Vec<Allocation> {
        self.objects()
    }
}

#[derive(Clone, Debug)]
enum Step {
    Read(Allocation),
    Write(Allocation, Vec<u8>),
    Commit,
}

#[derive(Debug)]
struct Active {
    txn: TxnId,
    steps: VecDeque<Step>,
    locked: Option<u64>,
    insert: Option<Record>,
}

#[derive(Debug)]
struct Plan {
    mode: LogMode,
    writes: Vec<(Allocation, Vec<u8>)>,
    insert: Option<Record>,
    lcommit_seq: Option<u64>,
}

/// Final-state tallies of the transactions a run issued.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnCounts {
    pub started: u64,
    pub physically_committed: u64,
    pub read_only: u64,
    pub aborted: u64,
    pub lost_to_crash: u64,
    pub ops_by_kind: BTreeMap<String, u64>,
    /// Operations dropped because every candidate record was busy or the
    /// pools were full.
    pub skipped_ops: u64,
}

/// Outcome of one crash: what recovery reported and how the recovered
/// image compares with the reference model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashCheck {
    /// Operations completed before the crash.
    pub op_index: u64,
    /// Fence after which the image was captured, for mid-operation crashes.
    pub fence: Option<u64>,
    /// Ground-truth inconsistent objects, known for crashes between
    /// operations.
    pub inconsistent: Option<u64>,
    pub durable_commits: u64,
    pub report: RecoveryReport,
    /// Live objects whose recovered bytes differ from the model.
    pub mismatched_objects: u64,
    /// Transactions recovery called committed that never reached their
    /// commit point.
    pub phantom_commits: u64,
    /// Durably committed transactions that recovery rolled back.
    pub lost_commits: u64,
}

impl CrashCheck {
    pub fn is_consistent(&self) -> bool {
        self.mismatched_objects == 0 && self.phantom_commits == 0 && self.lost_commits == 0
    }

    /// Detection matched ground truth and every detected object was repaired.
    pub fn fully_repaired(&self) -> bool {
        self.inconsistent.is_none_or(|i| i == self.report.detected) && self.report.uncorrected == 0
    }
}

struct Driver {
    spec: WorkloadSpec,
    opts: RunOptions,
    rt: Runtime,
    rng: ChaCha8Rng,
    chooser: KeyChooser,
    records: Vec<Record>,
    durable: HashMap<u64, Record>,
    expected: HashMap<u64, Vec<u8>>,
    plans: HashMap<TxnId, Plan>,
    synced: usize,
    locks: HashSet<u64>,
    clients: Vec<Option<Active>>,
    ops_started: u64,
    ops_completed: u64,
    lcommits: u64,
    counts: TxnCounts,
    armed: Option<u64>,
    crashes: Vec<CrashCheck>,
}

impl Driver {
    fn new(spec: &WorkloadSpec, opts: &RunOptions) -> Result<Self> {
        spec.validate()?;
        opts.validate()?;
        let rt = Runtime::init(&opts.config)?;
        let mut d = Driver {
            chooser: KeyChooser::new(spec.distribution, spec.object_count)?,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec: spec.clone(),
            opts: opts.clone(),
            rt,
            records: Vec::new(),
            durable: HashMap::new(),
            expected: HashMap::new(),
            plans: HashMap::new(),
            synced: 0,
            locks: HashSet::new(),
            clients: (0..opts.clients).map(|_| None).collect(),
            ops_started: 0,
            ops_completed: 0,
            lcommits: 0,
            counts: TxnCounts::default(),
            armed: None,
            crashes: Vec::new(),
        };
        d.load()?;
        Ok(d)
    }

    fn random_bytes(&mut self, n: u64) -> Vec<u8> {
        let mut v = vec![0u8; n as usize];
        self.rng.fill_bytes(&mut v);
        v
    }

    fn alloc_record(&mut self) -> Result<Record> {
        let key = self.rt.alloc(PoolKind::Key, self.spec.key_size)?;
        let fv = if self.opts.pair_alloc {
            match self
                .rt
                .alloc_pair(self.spec.field_size, self.spec.object_size)
            {
                Ok(p) => Fv::Pair(p),
                Err(e) => {
                    self.rt.pfree(&key)?;
                    return Err(e);
                }
            }
        } else {
            let field = self.rt.alloc(PoolKind::FieldValue, self.spec.field_size)?;
            let value = match self.rt.alloc(PoolKind::FieldValue, self.spec.object_size) {
                Ok(v) => v,
                Err(e) => {
                    self.rt.pfree(&key)?;
                    self.rt.pfree(&field)?;
                    return Err(e);
                }
            };
            Fv::Split { field, value }
        };
        Ok(Record { key, fv })
    }

    fn load(&mut self) -> Result<()> {
        let mut items = Vec::new();
        for _ in 0..self.spec.object_count {
            let r = self.alloc_record()?;
            for o in r.objects() {
                let bytes = self.random_bytes(o.size);
                self.expected.insert(o.addr, bytes.clone());
                items.push((o, bytes));
            }
            self.durable.insert(r.key.addr, r);
            self.records.push(r);
        }
        for chunk in items.chunks(4096) {
            self.rt.bulk_load(chunk)?;
        }
        self.rt.reset_counters();
        Ok(())
    }

    fn busy(&self) -> bool {
        self.clients.iter().any(Option::is_some)
    }

    fn finished(&self) -> bool {
        self.ops_started >= self.spec.ops && !self.busy()
    }

    /// Picks a record not locked by another client.
    fn pick_unlocked(&mut self) -> Option<usize> {
        if self.records.is_empty() {
            return None;
        }
        for _ in 0..16 {
            let i = self.chooser.choose(&mut self.rng, self.records.len());
            if !self.locks.contains(&self.records[i].key.addr) {
                return Some(i);
            }
        }
        None
    }

    fn pick_any(&mut self) -> Option<usize> {
        (!self.records.is_empty()).then(|| self.chooser.choose(&mut self.rng, self.records.len()))
    }

    fn touch_dram(&mut self) {
        for _ in 0..self.opts.dram_lines_per_op {
            let line = self.rng.random_range(0..DRAM_FOOTPRINT_LINES);
            self.rt.emulator_mut().touch_volatile(line);
        }
    }

    fn count_op(&mut self, kind: OpKind) {
        *self
            .counts
            .ops_by_kind
            .entry(kind.name().to_string())
            .or_default() += 1;
    }

    fn skip_op(&mut self) {
        self.counts.skipped_ops += 1;
        self.ops_completed += 1;
    }

    /// Starts the next operation on client `c`.
    fn begin_op(&mut self, c: usize) -> Result<()> {
        self.ops_started += 1;
        self.touch_dram();
        let mut kind = self.spec.mix.sample(&mut self.rng);
        if self.records.is_empty() && kind != OpKind::Insert {
            kind = OpKind::Insert;
        }
        self.count_op(kind);
        let mut steps = VecDeque::new();
        let mut locked = None;
        let mut insert = None;
        match kind {
            OpKind::Read => {
                let Some(i) = self.pick_any() else {
                    {
                        self.skip_op();
                        return Ok(());
                    }
                };
                let r = self.records[i];
                steps.extend(r.objects().into_iter().map(Step::Read));
            }
            OpKind::Update | OpKind::ReadModifyUpdate => {
                let Some(i) = self.pick_unlocked() else {
                    {
                        self.skip_op();
                        return Ok(());
                    }
                };
                let r = self.records[i];
                locked = Some(r.key.addr);
                if kind == OpKind::Update {
                    steps.push_back(Step::Read(r.key));
                } else {
                    steps.extend(r.data_objects().into_iter().map(Step::Read));
                }
                for o in r.data_objects() {
                    let b = self.random_bytes(o.size);
                    steps.push_back(Step::Write(o, b));
                }
            }
            OpKind::Insert => {
                let r = match self.alloc_record() {
                    Ok(r) => r,
                    Err(Error::OutOfMemory(_)) => {
                        self.skip_op();
                        return Ok(());
                    }
                    Err(e) => return Err(e),
                };
                for o in r.objects() {
                    let b = self.random_bytes(o.size);
                    steps.push_back(Step::Write(o, b));
                }
                locked = Some(r.key.addr);
                insert = Some(r);
            }
            OpKind::Scan => {
                let Some(start) = self.pick_any() else {
                    {
                        self.skip_op();
                        return Ok(());
                    }
                };
                let n = (self.spec.scan_length as usize).min(self.records.len());
                for k in 0..n {
                    let r = self.records[(start + k) % self.records.len()];
                    steps.extend(r.data_objects().into_iter().map(Step::Read));
                }
            }
            OpKind::Delete => {
                self.delete_one()?;
                self.ops_completed += 1;
                return Ok(());
            }
        }
        if let Some(k) = locked {
            self.locks.insert(k);
        }
        steps.push_back(Step::Commit);
        let txn = self.rt.tx_start(self.opts.mode, self.opts.elide)?;
        self.counts.started += 1;
        self.clients[c] = Some(Active {
            txn,
            steps,
            locked,
            insert,
        });
        Ok(())
    }

    fn delete_one(&mut self) -> Result<()> {
        let Some(i) = self.pick_unlocked() else {
            self.counts.skipped_ops += 1;
            return Ok(());
        };
        let r = self.records[i];
        let objs: HashSet<u64> = r.objects().iter().map(|o| o.addr).collect();
        let written = self
            .plans
            .values()
            .any(|p| p.writes.iter().any(|(o, _)| objs.contains(&o.addr)));
        if written || !self.durable.contains_key(&r.key.addr) {
            self.counts.skipped_ops += 1;
            return Ok(());
        }
        for a in r.regions() {
            self.rt.pfree(&a)?;
        }
        self.records.remove(i);
        self.durable.remove(&r.key.addr);
        for a in objs {
            self.expected.remove(&a);
        }
        Ok(())
    }

    /// Executes one call for client `c`.
    fn step(&mut self, c: usize) -> Result<()> {
        let Some(active) = self.clients[c].as_mut() else {
            return Ok(());
        };
        let txn = active.txn;
        let step = active.steps.pop_front().expect("active clients have steps");
        match step {
            Step::Read(o) => {
                self.rt.tx_read(txn, &o)?;
            }
            Step::Write(o, b) => {
                self.rt.tx_write(txn, &o, &b)?;
                let mode = self.opts.mode;
                let insert = self.clients[c].as_ref().unwrap().insert;
                self.plans
                    .entry(txn)
                    .or_insert_with(|| Plan {
                        mode,
                        writes: Vec::new(),
                        insert,
                        lcommit_seq: None,
                    })
                    .writes
                    .push((o, b));
            }
            Step::Commit => {
                let a = self.clients[c].take().unwrap();
                if let Some(k) = a.locked {
                    self.locks.remove(&k);
                }
                let writes = self.plans.contains_key(&txn);
                let abort = writes
                    && self.opts.abort_percent > 0
                    && self.rng.random_range(0..100) < self.opts.abort_percent;
                if abort {
                    self.rt.tx_abort(txn)?;
                    self.plans.remove(&txn);
                    self.counts.aborted += 1;
                    if let Some(r) = a.insert {
                        for g in r.regions() {
                            self.rt.pfree(&g)?;
                        }
                    }
                } else {
                    self.rt.tx_lcommit(txn)?;
                    if let Some(p) = self.plans.get_mut(&txn) {
                        p.lcommit_seq = Some(self.lcommits);
                        self.lcommits += 1;
                    } else {
                        self.counts.read_only += 1;
                    }
                    if let Some(r) = a.insert {
                        self.records.push(r);
                    }
                }
                self.ops_completed += 1;
            }
        }
        Ok(())
    }

    /// Applies newly physically committed transactions to the model, up to
    /// `limit` entries of the commit order.
    fn sync_to(&mut self, limit: usize) {
        let order: Vec<TxnId> = self.rt.commit_order()[self.synced..limit].to_vec();
        for id in order {
            if let Some(p) = self.plans.remove(&id) {
                self.apply_plan(p);
            }
            self.counts.physically_committed += 1;
        }
        self.synced = limit;
    }

    fn apply_plan(&mut self, p: Plan) {
        if let Some(r) = p.insert {
            self.durable.insert(r.key.addr, r);
        }
        for (o, b) in p.writes {
            self.expected.insert(o.addr, b);
        }
    }

    /// Post-call bookkeeping. Returns true if an armed crash fired during
    /// the call, in which case the runtime has been replaced.
    fn after_call(&mut self) -> Result<bool> {
        if self.armed.is_some() {
            if let Some(img) = self.rt.emulator_mut().take_crash_snapshot() {
                let fence = self.armed.take().unwrap();
                let truth = self.rt.commit_fences().partition_point(|&f| f <= fence);
                self.crash_with(img, truth, Some(fence))?;
                return Ok(true);
            }
        }
        let n = self.rt.commit_order().len();
        self.sync_to(n);
        Ok(false)
    }

    /// One round: every client makes one call.
    fn tick(&mut self) -> Result<()> {
        for c in 0..self.clients.len() {
            if self.clients[c].is_none() {
                if self.ops_started >= self.spec.ops {
                    continue;
                }
                self.begin_op(c)?;
                if self.after_call()? {
                    return Ok(());
                }
            }
            if self.clients[c].is_some() {
                self.step(c)?;
                if self.after_call()? {
                    return Ok(());
                }
            }
        }
        Ok(())
    }

    fn drain(&mut self) -> Result<()> {
        self.rt.drain_all()?;
        self.after_call()?;
        Ok(())
    }

    /// Arms a crash `k` fences from now.
    fn arm(&mut self, k: u64) {
        let f = self.rt.emulator().fence_count() + k.max(1);
        self.rt.emulator_mut().arm_crash(f);
        self.armed = Some(f);
    }

    /// Crashes between calls.
    fn crash_now(&mut self) -> Result<()> {
        let img = self.rt.crash();
        let n = self.rt.commit_order().len();
        self.armed = None;
        self.crash_with(img, n, None)
    }

    fn directory(&self) -> Vec<Allocation> {
        let mut v: Vec<Allocation> = self.durable.values().flat_map(Record::objects).collect();
        v.sort_by_key(|a| a.addr);
        v
    }

    /// Objects whose pre-transaction value recovery restores from a log.
    fn log_covered(&self) -> HashSet<u64> {
        self.plans
            .values()
            .filter(|p| p.mode == LogMode::Undo || p.lcommit_seq.is_some())
            .flat_map(|p| p.writes.iter().map(|(o, _)| o.addr))
            .collect()
    }

    fn crash_with(&mut self, img: PersistentImage, truth: usize, fence: Option<u64>) -> Result<()> {
        self.sync_to(truth);
        let durable_ids: HashSet<TxnId> = self.rt.commit_order()[..truth].iter().copied().collect();
        let directory = self.directory();
        let mut bytes = img.into_inner();

        let inconsistent = fence.is_none().then(|| {
            let covered = self.log_covered();
            directory
                .iter()
                .filter(|o| !covered.contains(&o.addr))
                .filter(|o| bytes[o.addr as usize..o.end() as usize] != self.expected[&o.addr][..])
                .count() as u64
        });

        let mut report = recover(&mut bytes, self.opts.recovery, Some(&directory))?;
        if let Some(i) = inconsistent {
            report.inconsistent_objects = i;
        }

        let mut forward: Vec<Plan> = report
            .rolled_forward
            .iter()
            .filter_map(|id| self.plans.remove(id))
            .collect();
        forward.sort_by_key(|p| p.lcommit_seq);
        for p in forward {
            self.apply_plan(p);
        }
        let phantom_commits = report
            .committed
            .iter()
            .filter(|id| !durable_ids.contains(id) && !report.rolled_forward.contains(id))
            .count() as u64;
        let lost_commits = report
            .rolled_back
            .iter()
            .filter(|id| durable_ids.contains(id))
            .count() as u64;

        let directory = self.directory();
        let mismatched_objects = directory
            .iter()
            .filter(|o| bytes[o.addr as usize..o.end() as usize] != self.expected[&o.addr][..])
            .count() as u64;

        self.counts.lost_to_crash += self.plans.len() as u64;
        self.crashes.push(CrashCheck {
            op_index: self.ops_completed,
            fence,
            inconsistent,
            durable_commits: truth as u64,
            report,
            mismatched_objects,
            phantom_commits,
            lost_commits,
        });

        let regions: Vec<Allocation> = self.durable.values().flat_map(Record::regions).collect();
        let next = self.rt.next_txn_id();
        self.rt = Runtime::reopen(
            &self.opts.config,
            PersistentImage::from_bytes(bytes),
            regions,
            next,
        )?;
        self.plans.clear();
        self.locks.clear();
        for c in &mut self.clients {
            if c.take().is_some() {
                self.ops_completed += 1;
            }
        }
        let durable = &self.durable;
        self.records.retain(|r| durable.contains_key(&r.key.addr));
        self.synced = 0;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub workload: String,
    pub mode: LogMode,
    pub elide: bool,
    pub pair_alloc: bool,
    pub policy: Policy,
    pub seed: u64,
    pub ops: u64,
    pub clients: usize,
    pub flush: FlushCounters,
    pub runtime: RuntimeCounters,
    pub tracker: TrackerStats,
    pub dirtiness_histogram: [u64; DIRTINESS_BUCKETS],
    pub average_dirtiness: f64,
    /// Object blocks whose flush was skipped, over skipped plus issued
    /// object-block flushes.
    pub skipped_fraction: f64,
    pub txns: TxnCounts,
    pub recovery: Option<RecoveryReport>,
    /// Wall-clock throughput; informational and left out of serialized
    /// output so reports stay reproducible.
    #[serde(skip)]
    pub ops_per_sec: f64,
}

impl RunResult {
    fn collect(d: &Driver, elapsed: f64) -> Self {
        let flush = d.rt.emulator().counters();
        let runtime = d.rt.counters();
        let skipped = runtime.object_blocks_skipped;
        let denom = skipped + runtime.object_flushes;
        RunResult {
            workload: d.spec.name.clone(),
            mode: d.opts.mode,
            elide: d.opts.elide,
            pair_alloc: d.opts.pair_alloc,
            policy: d.opts.config.cache.policy,
            seed: d.spec.seed,
            ops: d.ops_completed,
            clients: d.opts.clients,
            flush,
            runtime,
            tracker: d.rt.tracker_stats(),
            dirtiness_histogram: d.rt.emulator().dirtiness_histogram(),
            average_dirtiness: flush.average_dirtiness(),
            skipped_fraction: if denom == 0 {
                0.0
            } else {
                skipped as f64 / denom as f64
            },
            txns: d.counts.clone(),
            recovery: d.crashes.last().map(|c| c.report.clone()),
            ops_per_sec: if elapsed > 0.0 {
                d.ops_completed as f64 / elapsed
            } else {
                0.0
            },
        }
    }
}

/// Runs `spec.ops` operations, drains pending flushes and reports counters
/// for the measured phase (initial loading excluded).
pub fn run(spec: &WorkloadSpec, opts: &RunOptions) -> Result<RunResult> {
    let mut d = Driver::new(spec, opts)?;
    let t0 = Instant::now();
    while !d.finished() {
        d.tick()?;
    }
    d.drain()?;
    Ok(RunResult::collect(&d, t0.elapsed().as_secs_f64()))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashTotals {
    #[serde(rename = "I_obj")]
    pub inconsistent: u64,
    #[serde(rename = "DI_obj")]
    pub detected: u64,
    #[serde(rename = "CC_obj")]
    pub uncorrected: u64,
    pub corrected: u64,
    pub rolled_back: u64,
    pub mismatched_objects: u64,
}

impl CrashTotals {
    fn add(&mut self, c: &CrashCheck) {
        self.inconsistent += c.inconsistent.unwrap_or(0);
        self.detected += c.report.detected;
        self.uncorrected += c.report.uncorrected;
        self.corrected += c.report.corrected;
        self.rolled_back += c.report.rolled_back.len() as u64;
        self.mismatched_objects += c.mismatched_objects;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashRun {
    pub index: u32,
    pub seed: u64,
    pub check: CrashCheck,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashTestSummary {
    pub workload: String,
    pub mode: LogMode,
    pub policy: Policy,
    pub crashes: u32,
    pub totals: CrashTotals,
    pub runs: Vec<CrashRun>,
}

impl CrashTestSummary {
    /// Human-readable descriptions of every run that broke a guarantee.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for r in &self.runs {
            let c = &r.check;
            let tag = format!(
                "{}/{}/{} run {}",
                self.workload, self.mode, self.policy, r.index
            );
            if !c.fully_repaired() {
                v.push(format!(
                    "{tag}: I_obj {:?} DI_obj {} CC_obj {}",
                    c.inconsistent, c.report.detected, c.report.uncorrected
                ));
            }
            if !c.is_consistent() {
                v.push(format!(
                    "{tag}: {} mismatched objects, {} phantom and {} lost commits",
                    c.mismatched_objects, c.phantom_commits, c.lost_commits
                ));
            }
        }
        v
    }
}

fn derive_seed(base: u64, i: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(base ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.next_u64()
}

/// Runs `crashes` independent executions, each crashed between two
/// operations at an index drawn uniformly from `0..spec.ops`, then
/// recovered and compared with the reference model. Runs execute in
/// parallel; results are ordered by run index.
pub fn crashtest(spec: &WorkloadSpec, opts: &RunOptions, crashes: u32) -> Result<CrashTestSummary> {
    spec.validate()?;
    opts.validate()?;
    let runs: Vec<CrashRun> = (0..crashes)
        .into_par_iter()
        .map(|i| -> Result<CrashRun> {
            let seed = derive_seed(spec.seed, i as u64);
            let mut s = spec.clone();
            s.seed = seed;
            let mut o = opts.clone();
            o.config.cache.seed = seed;
            let crash_op = ChaCha8Rng::seed_from_u64(seed).random_range(0..spec.ops.max(1));
            let mut d = Driver::new(&s, &o)?;
            while d.ops_completed < crash_op && !d.finished() {
                d.tick()?;
            }
            d.crash_now()?;
            Ok(CrashRun {
                index: i,
                seed,
                check: d.crashes.pop().unwrap(),
            })
        })
        .collect::<Result<_>>()?;
    let mut totals = CrashTotals::default();
    for r in &runs {
        totals.add(&r.check);
    }
    Ok(CrashTestSummary {
        workload: spec.name.clone(),
        mode: opts.mode,
        policy: opts.config.cache.policy,
        crashes,
        totals,
        runs,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub workload: String,
    pub mode: LogMode,
    pub policy: Policy,
    pub ops: u64,
    pub clients: usize,
    pub totals: CrashTotals,
    pub checks: Vec<CrashCheck>,
    pub txns: TxnCounts,
}

impl CampaignSummary {
    pub fn violations(&self) -> Vec<String> {
        self.checks
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.is_consistent() || c.report.uncorrected > 0)
            .map(|(i, c)| {
                format!(
                    "crash {i} after op {} (fence {:?}): {} mismatched objects, {} phantom and {} lost commits, CC_obj {}",
                    c.op_index,
                    c.fence,
                    c.mismatched_objects,
                    c.phantom_commits,
                    c.lost_commits,
                    c.report.uncorrected
                )
            })
            .collect()
    }
}

/// One long execution interrupted by `crashes` power failures. Each failure
/// strikes a few fences after a uniformly chosen operation index, so it can
/// land inside any operation, including commit processing. After each one
/// the image is recovered, checked against the model, and execution resumes
/// on the recovered image.
pub fn interleaved_crashes(
    spec: &WorkloadSpec,
    opts: &RunOptions,
    crashes: u32,
) -> Result<CampaignSummary> {
    let mut d = Driver::new(spec, opts)?;
    let mut plan_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, u64::MAX));
    let mut points: Vec<u64> = (0..crashes)
        .map(|_| plan_rng.random_range(0..spec.ops.max(1)))
        .collect();
    points.sort_unstable();
    let mut next = points.into_iter().peekable();
    while !d.finished() {
        if d.armed.is_none() {
            if let Some(&p) = next.peek() {
                if d.ops_completed >= p {
                    next.next();
                    let k = plan_rng.random_range(1..=24);
                    d.arm(k);
                }
            }
        }
        d.tick()?;
    }
    d.drain()?;
    for _ in next {
        d.crash_now()?;
    }
    if d.armed.is_some() {
        d.crash_now()?;
    }
    let mut totals = CrashTotals::default();
    for c in &d.crashes {
        totals.add(c);
    }
    Ok(CampaignSummary {
        workload: spec.name.clone(),
        mode: opts.mode,
        policy: opts.config.cache.policy,
        ops: d.ops_completed,
        clients: opts.clients,
        totals,
        checks: d.crashes.clone(),
        txns: d.counts.clone(),
    })
}

/// Flush counts for persisting one fully packed page.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageEconomy {
    pub object_flushes: u64,
    pub checksum_flushes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicrobenchReport {
    pub object_size: u64,
    pub count: u64,
    pub pages: u64,
    /// Blocks flushed when every object is flushed directly.
    pub flush_every_object: u64,
    /// Checksum blocks flushed when building checksums for every page.
    pub create_checksums: u64,
    /// Checksum blocks flushed when every object is overwritten once and
    /// checksums are updated incrementally.
    pub update_checksums: u64,
    /// Checksum blocks flushed by an overwrite with identical bytes.
    pub identical_update: u64,
    pub create_ratio: f64,
    pub update_ratio: f64,
    pub full_page: PageEconomy,
    /// Wall-clock seconds per strategy; informational only.
    #[serde(skip)]
    pub seconds: [f64; 3],
}

fn bench_emulator(
    pools: &PoolConfig,
) -> Result<(Emulator, crate::pool::PoolSet, crate::pool::Superblock)> {
    let sb = crate::pool::PoolSet::layout(pools, true)?;
    let emu = Emulator::new(CacheConfig::default(), sb.nvm_bytes() as usize)?;
    Ok((emu, crate::pool::PoolSet::new(&sb), sb))
}

/// Blocks flushed to persist a page whose 49 data blocks are all filled,
/// object by object versus through its checksums.
pub fn packed_page_economy() -> Result<PageEconomy> {
    let mut img = vec![0u8; PAGE_SIZE as usize];
    let mut emu = Emulator::new(CacheConfig::default(), PAGE_SIZE as usize)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    rng.fill_bytes(&mut img[..layout::DATA_BYTES as usize]);
    for col in 0..layout::COLS as u64 {
        let at = col * layout::COLUMN_BYTES;
        emu.store(at, &img[at as usize..(at + layout::COLUMN_BYTES) as usize])?;
    }
    let before = emu.counters().flushes_issued;
    for col in 0..layout::COLS as u64 {
        emu.flush_range(col * layout::COLUMN_BYTES, layout::COLUMN_BYTES as usize)?;
    }
    let object_flushes = emu.counters().flushes_issued - before;
    let before = emu.counters().flushes_issued;
    build_page(&mut emu, 0)?;
    Ok(PageEconomy {
        object_flushes,
        checksum_flushes: emu.counters().flushes_issued - before,
    })
}

/// Compares flushing objects directly with creating or updating checksums
/// for `count` objects of `object_size` bytes, packed into fresh pages.
pub fn microbench_checksum(object_size: u64, count: u64, seed: u64) -> Result<MicrobenchReport> {
    if object_size == 0 || object_size > layout::DATA_BYTES {
        return Err(Error::config(format!(
            "object size must be in 1..={}",
            layout::DATA_BYTES
        )));
    }
    let per_page = (PAGE_SIZE / 64).max(1);
    let pages_needed = (count * object_size.div_ceil(64)).div_ceil(per_page / 2) + 2;
    let pools = PoolConfig {
        key_pool_bytes: PAGE_SIZE,
        field_value_pool_bytes: pages_needed * PAGE_SIZE * 2,
        log_pool_bytes: PAGE_SIZE,
    };
    let (mut emu, mut set, _) = bench_emulator(&pools)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objs = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let o = set.alloc(PoolKind::FieldValue, object_size)?;
        let mut b = vec![0u8; object_size as usize];
        rng.fill_bytes(&mut b);
        emu.store(o.addr, &b)?;
        objs.push((o, b));
    }
    let mut pages: Vec<u64> = objs
        .iter()
        .map(|(o, _)| layout::page_start(o.addr))
        .collect();
    pages.dedup();

    let t = Instant::now();
    let before = emu.counters().flushes_issued;
    for (o, _) in &objs {
        emu.flush_range(o.addr, o.size as usize)?;
    }
    let flush_every_object = emu.counters().flushes_issued - before;
    let s0 = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let before = emu.counters().flushes_issued;
    for &p in &pages {
        build_page(&mut emu, p)?;
    }
    let create_checksums = emu.counters().flushes_issued - before;
    let s1 = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut ds = DeltaSet::new();
    for (o, old) in &mut objs {
        let mut new = vec![0u8; o.size as usize];
        rng.fill_bytes(&mut new);
        emu.store(o.addr, &new)?;
        ds.record(o.addr, old, &new)?;
        *old = new;
    }
    let before = emu.counters().flushes_issued;
    ds.apply(&mut emu)?;
    let update_checksums = emu.counters().flushes_issued - before;
    let s2 = t.elapsed().as_secs_f64();

    let mut same = DeltaSet::new();
    for (o, cur) in &objs {
        same.record(o.addr, cur, cur)?;
    }
    let before = emu.counters().flushes_issued;
    same.apply(&mut emu)?;
    let identical_update = emu.counters().flushes_issued - before;

    let ratio = |n: u64| {
        if flush_every_object == 0 {
            0.0
        } else {
            n as f64 / flush_every_object as f64
        }
    };
    Ok(MicrobenchReport {
        object_size,
        count,
        pages: pages.len() as u64,
        flush_every_object,
        create_checksums,
        update_checksums,
        identical_update,
        create_ratio: ratio(create_checksums),
        update_ratio: ratio(update_checksums),
        full_page: packed_page_economy()?,
        seconds: [s0, s1, s2],
    })
}
