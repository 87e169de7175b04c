pub mod checksum;
pub mod config;
pub mod emu;
pub mod error;
pub mod harness;
pub mod layout;
pub mod log;
pub mod pool;
pub mod recovery;
pub mod report;
pub mod tracker;
pub mod txn;
pub mod workload;

pub use config::Config;
pub use emu::{CacheConfig, Emulator, FlushCounters, PersistentImage, Policy};
pub use error::{Error, Result};
pub use harness::{RunOptions, RunResult};
pub use pool::{Allocation, Pair, PoolConfig, PoolKind};
pub use recovery::{RecoveryOptions, RecoveryReport};
pub use txn::{LogMode, Runtime, TxnId, TxnState};
pub use workload::{KeyDistribution, OpKind, OpMix, WorkloadSpec};
