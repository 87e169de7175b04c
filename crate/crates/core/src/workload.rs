//! Synthetic key-value workloads.
//!
//! A workload is a population of records, each a key object in the key pool
//! plus a field and a value in the field/value pool, driven by a stream of
//! operations drawn from a percentage mix.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Read,
    Update,
    Insert,
    ReadModifyUpdate,
    Scan,
    Delete,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::Read,
        OpKind::Update,
        OpKind::Insert,
        OpKind::ReadModifyUpdate,
        OpKind::Scan,
        OpKind::Delete,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Read => "read",
            OpKind::Update => "update",
            OpKind::Insert => "insert",
            OpKind::ReadModifyUpdate => "read_modify_update",
            OpKind::Scan => "scan",
            OpKind::Delete => "delete",
        }
    }

    pub fn writes(self) -> bool {
        matches!(
            self,
            OpKind::Update | OpKind::Insert | OpKind::ReadModifyUpdate
        )
    }
}

/// Operation percentages. They must sum to 100.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpMix {
    pub read: u32,
    pub update: u32,
    pub insert: u32,
    pub read_modify_update: u32,
    pub scan: u32,
    pub delete: u32,
}

/// Nonzero shares as `name=percent`, e.g. `read=50 update=50`.
impl fmt::Display for OpMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = OpKind::ALL
            .iter()
            .filter(|&&o| self.percent(o) > 0)
            .map(|&o| format!("{}={}", o.name(), self.percent(o)))
            .collect();
        f.write_str(&parts.join(" "))
    }
}

impl OpMix {
    pub const fn new(
        read: u32,
        update: u32,
        insert: u32,
        rmu: u32,
        scan: u32,
        delete: u32,
    ) -> Self {
        OpMix {
            read,
            update,
            insert,
            read_modify_update: rmu,
            scan,
            delete,
        }
    }

    pub fn percent(&self, op: OpKind) -> u32 {
        match op {
            OpKind::Read => self.read,
            OpKind::Update => self.update,
            OpKind::Insert => self.insert,
            OpKind::ReadModifyUpdate => self.read_modify_update,
            OpKind::Scan => self.scan,
            OpKind::Delete => self.delete,
        }
    }

    pub fn total(&self) -> u32 {
        OpKind::ALL.iter().map(|&o| self.percent(o)).sum()
    }

    pub fn read_percent(&self) -> u32 {
        self.read + self.scan
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() != 100 {
            return Err(Error::config(format!(
                "operation mix sums to {}, expected 100",
                self.total()
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> OpKind {
        let mut x = rng.random_range(0..self.total().max(1));
        for op in OpKind::ALL {
            let p = self.percent(op);
            if x < p {
                return op;
            }
            x -= p;
        }
        OpKind::Read
    }
}

pub const DEFAULT_THETA: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum KeyDistribution {
    #[default]
    Uniform,
    /// Popularity follows a Zipf law; ranks are scattered over the key
    /// space by hashing.
    Zipfian { theta: f64 },
    /// Zipf law over recency: the newest records are the most popular.
    Latest { theta: f64 },
}

impl FromStr for KeyDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(KeyDistribution::Uniform),
            "zipfian" | "zipf" => Ok(KeyDistribution::Zipfian {
                theta: DEFAULT_THETA,
            }),
            "latest" => Ok(KeyDistribution::Latest {
                theta: DEFAULT_THETA,
            }),
            other => Err(Error::config(format!("unknown key distribution `{other}`"))),
        }
    }
}

impl fmt::Display for KeyDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyDistribution::Uniform => write!(f, "uniform"),
            KeyDistribution::Zipfian { theta } => write!(f, "zipfian({theta})"),
            KeyDistribution::Latest { theta } => write!(f, "latest({theta})"),
        }
    }
}

fn fnv1a(x: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in x.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Draws record indices from a [`KeyDistribution`] over a population that
/// may grow or shrink.
#[derive(Clone, Debug)]
pub struct KeyChooser {
    dist: KeyDistribution,
    zipf: Option<Zipf<f64>>,
}

impl KeyChooser {
    /// `expected` sizes the Zipf table; indices are folded into the live
    /// population at draw time.
    pub fn new(dist: KeyDistribution, expected: u64) -> Result<Self> {
        let zipf = match dist {
            KeyDistribution::Uniform => None,
            KeyDistribution::Zipfian { theta } | KeyDistribution::Latest { theta } => Some(
                Zipf::new(expected.max(1) as f64, theta)
                    .map_err(|e| Error::config(format!("zipf(theta = {theta}): {e}")))?,
            ),
        };
        Ok(KeyChooser { dist, zipf })
    }

    /// An index in `0..len`; `len` must be nonzero.
    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R, len: usize) -> usize {
        debug_assert!(len > 0);
        let mut rank = || self.zipf.as_ref().unwrap().sample(&mut *rng) as u64 - 1;
        match self.dist {
            KeyDistribution::Uniform => rng.random_range(0..len),
            KeyDistribution::Zipfian { .. } => (fnv1a(rank()) % len as u64) as usize,
            KeyDistribution::Latest { .. } => len - 1 - (rank() % len as u64) as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub name: String,
    pub mix: OpMix,
    /// Records loaded before the measured operations.
    pub object_count: u64,
    pub key_size: u64,
    pub field_size: u64,
    /// Size of each value in bytes.
    pub object_size: u64,
    pub distribution: KeyDistribution,
    pub ops: u64,
    /// Records visited by one scan.
    pub scan_length: u32,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            name: "custom".into(),
            mix: OpMix::new(50, 50, 0, 0, 0, 0),
            object_count: 10_000,
            key_size: 16,
            field_size: 16,
            object_size: 100,
            distribution: KeyDistribution::Uniform,
            ops: 10_000,
            scan_length: 10,
            seed: 1,
        }
    }
}

pub const PRESETS: [&str; 10] = [
    "tpcc",
    "ycsb-a",
    "ycsb-b",
    "ycsb-c",
    "ycsb-d",
    "ycsb-e",
    "ycsb-f",
    "linkbench",
    "ycsb-sql",
    "update-only",
];

impl WorkloadSpec {
    /// Mixes of the standard benchmark families. `update-only` is a pure
    /// write stream used for flush-reduction measurements.
    pub fn preset(name: &str) -> Result<Self> {
        let zipf = KeyDistribution::Zipfian {
            theta: DEFAULT_THETA,
        };
        let (mix, distribution) = match name {
            "tpcc" => (OpMix::new(8, 47, 45, 0, 0, 0), KeyDistribution::Uniform),
            "ycsb-a" => (OpMix::new(50, 50, 0, 0, 0, 0), zipf),
            "ycsb-b" => (OpMix::new(95, 5, 0, 0, 0, 0), zipf),
            "ycsb-c" => (OpMix::new(100, 0, 0, 0, 0, 0), zipf),
            "ycsb-d" => (
                OpMix::new(95, 0, 5, 0, 0, 0),
                KeyDistribution::Latest {
                    theta: DEFAULT_THETA,
                },
            ),
            "ycsb-e" => (OpMix::new(0, 0, 5, 0, 95, 0), zipf),
            "ycsb-f" => (OpMix::new(50, 0, 0, 50, 0, 0), zipf),
            "linkbench" => (OpMix::new(64, 16, 12, 0, 4, 4), zipf),
            "ycsb-sql" => (OpMix::new(50, 10, 5, 10, 15, 10), zipf),
            "update-only" => (OpMix::new(0, 100, 0, 0, 0, 0), KeyDistribution::Uniform),
            other => return Err(Error::config(format!("unknown workload preset `{other}`"))),
        };
        Ok(WorkloadSpec {
            name: name.into(),
            mix,
            distribution,
            ..WorkloadSpec::default()
        })
    }

    /// A preset name, or a path to a JSON document.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if PRESETS.contains(&name_or_path) {
            return WorkloadSpec::preset(name_or_path);
        }
        let p = Path::new(name_or_path);
        if p.exists() {
            return WorkloadSpec::from_json(&std::fs::read_to_string(p)?);
        }
        WorkloadSpec::preset(name_or_path)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: WorkloadSpec = serde_json::from_str(s)?;
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        if self.object_count == 0 {
            return Err(Error::config("object_count must be at least 1"));
        }
        if self.key_size == 0 || self.field_size == 0 || self.object_size == 0 {
            return Err(Error::config("key, field and value sizes must be nonzero"));
        }
        if self.mix.scan > 0 && self.scan_length == 0 {
            return Err(Error::config("scans need a nonzero scan_length"));
        }
        if let KeyDistribution::Zipfian { theta } | KeyDistribution::Latest { theta } =
            self.distribution
        {
            if !(theta > 0.0 && theta.is_finite()) {
                return Err(Error::config(format!(
                    "zipf theta must be positive, got {theta}"
                )));
            }
        }
        Ok(())
    }

    pub fn with_ops(mut self, ops: u64) -> Self {
        self.ops = ops;
        self
    }

    pub fn with_objects(mut self, n: u64) -> Self {
        self.object_count = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}
