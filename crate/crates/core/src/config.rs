//! The runtime configuration document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::emu::CacheConfig;
use crate::error::{Error, Result};
use crate::layout::LayoutInfo;
use crate::pool::PoolConfig;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Queue capacity in blocks; defaults to the cache capacity.
    pub capacity_blocks: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub cache: CacheConfig,
    pub pools: PoolConfig,
    pub tracker: TrackerConfig,
    /// Maintain page checksums for the key and field/value pools. Flush
    /// elision requires it.
    pub checksums: bool,
    /// Fixed page geometry. Present so the document is self-describing;
    /// any value other than the built-in layout is rejected.
    pub layout: LayoutInfo,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            cache: CacheConfig::default(),
            pools: PoolConfig::default(),
            tracker: TrackerConfig::default(),
            checksums: true,
            layout: LayoutInfo::default(),
        }
    }
}

impl Config {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Config::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn tracker_capacity(&self) -> u64 {
        self.tracker
            .capacity_blocks
            .unwrap_or(self.cache.capacity_blocks() as u64)
    }

    pub fn validate(&self) -> Result<()> {
        self.cache.validate()?;
        if self.layout != LayoutInfo::default() {
            return Err(Error::config("page layout is fixed and cannot be changed"));
        }
        if self.tracker.capacity_blocks == Some(0) {
            return Err(Error::config("tracker capacity must be at least one block"));
        }
        crate::pool::PoolSet::layout(&self.pools, self.checksums)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let c = Config::default();
        assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.tracker_capacity(), c.cache.capacity_blocks() as u64);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = Config::from_json(r#"{"cache": {"ways": 4, "policy": "bip"}}"#).unwrap();
        assert_eq!(c.cache.ways, 4);
        assert_eq!(c.cache.sets, CacheConfig::default().sets);
        assert!(c.checksums);
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(matches!(
            Config::from_json(r#"{"cache": {"policy": "fifo"}}"#),
            Err(Error::Json(_))
        ));
        assert!(Config::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(matches!(
            Config::from_json(
                r#"{"layout": {"mps": 8192, "cbs": 64, "oms": 3136, "cms": 896, "matrix_rows": 8, "matrix_cols": 8, "bytes_per_column": 448}}"#
            ),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Config::from_json(r#"{"pools": {"key_pool_bytes": 0}}"#),
            Err(Error::Config(_))
        ));
    }
}
