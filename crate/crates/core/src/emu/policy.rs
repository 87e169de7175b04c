//! Victim selection for the emulated last-level cache.
//!
//! All four policies share one state object so a cache can switch policy
//! without reallocating. Per-set state is indexed by `set * ways + way` for
//! the stamp based policies and by `set` for the PLRU trees.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// One in `BIP_THROTTLE` fills is inserted at the MRU position.
pub const BIP_THROTTLE: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Lru,
    Plru,
    Bip,
    Random,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Lru, Policy::Plru, Policy::Bip, Policy::Random];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Lru => "lru",
            Policy::Plru => "plru",
            Policy::Bip => "bip",
            Policy::Random => "random",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lru" => Ok(Policy::Lru),
            "plru" | "pseudolru" | "pseudo-lru" | "tree-plru" => Ok(Policy::Plru),
            "bip" | "bimodal" | "bimodalinsertion" | "bimodal-insertion" => Ok(Policy::Bip),
            "random" | "rand" => Ok(Policy::Random),
            other => Err(Error::config(format!("unknown cache policy `{other}`"))),
        }
    }
}

/// Where a freshly filled line landed in the recency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertPosition {
    Mru,
    Lru,
}

#[derive(Clone, Debug)]
pub(crate) struct Replacer {
    policy: Policy,
    ways: usize,
    stamps: Vec<i64>,
    clock: i64,
    tree: Vec<u64>,
    leaves: usize,
}

impl Replacer {
    pub(crate) fn new(policy: Policy, sets: usize, ways: usize) -> Self {
        let leaves = ways.next_power_of_two();
        let (stamps, tree) = match policy {
            Policy::Lru | Policy::Bip => (vec![0; sets * ways], Vec::new()),
            Policy::Plru => (Vec::new(), vec![0; sets]),
            Policy::Random => (Vec::new(), Vec::new()),
        };
        Replacer {
            policy,
            ways,
            stamps,
            clock: 0,
            tree,
            leaves,
        }
    }

    pub(crate) fn policy(&self) -> Policy {
        self.policy
    }

    /// Records a hit on `way`.
    pub(crate) fn touch(&mut self, set: usize, way: usize) {
        match self.policy {
            Policy::Lru | Policy::Bip => {
                self.clock += 1;
                self.stamps[set * self.ways + way] = self.clock;
            }
            Policy::Plru => self.plru_touch(set, way),
            Policy::Random => {}
        }
    }

    /// Records that `way` was just filled with a new block. `valid` tells
    /// which other ways of the set currently hold lines.
    pub(crate) fn fill(
        &mut self,
        set: usize,
        way: usize,
        valid: impl Fn(usize) -> bool,
        rng: &mut ChaCha8Rng,
    ) -> InsertPosition {
        if self.policy != Policy::Bip {
            self.touch(set, way);
            return InsertPosition::Mru;
        }
        if rng.random_range(0..BIP_THROTTLE) == 0 {
            self.touch(set, way);
            return InsertPosition::Mru;
        }
        let base = set * self.ways;
        let oldest = (0..self.ways)
            .filter(|&w| w != way && valid(w))
            .map(|w| self.stamps[base + w])
            .min();
        match oldest {
            Some(min) => {
                self.stamps[base + way] = min - 1;
                InsertPosition::Lru
            }
            None => {
                self.touch(set, way);
                InsertPosition::Mru
            }
        }
    }

    /// Picks the way to evict from a full set.
    pub(crate) fn victim(&mut self, set: usize, rng: &mut ChaCha8Rng) -> usize {
        match self.policy {
            Policy::Lru | Policy::Bip => {
                let base = set * self.ways;
                let mut best = 0;
                for w in 1..self.ways {
                    if self.stamps[base + w] < self.stamps[base + best] {
                        best = w;
                    }
                }
                best
            }
            Policy::Plru => self.plru_victim(set),
            Policy::Random => rng.random_range(0..self.ways),
        }
    }

    // Tree nodes are stored heap style in the low bits of one word; node 1 is
    // the root. A set bit means "the victim is in the right subtree".
    fn plru_touch(&mut self, set: usize, way: usize) {
        let mut bits = self.tree[set];
        let (mut node, mut lo, mut hi) = (1usize, 0usize, self.leaves);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if way < mid {
                bits |= 1 << node;
                node *= 2;
                hi = mid;
            } else {
                bits &= !(1 << node);
                node = node * 2 + 1;
                lo = mid;
            }
        }
        self.tree[set] = bits;
    }

    fn plru_victim(&self, set: usize) -> usize {
        let bits = self.tree[set];
        let (mut node, mut lo, mut hi) = (1usize, 0usize, self.leaves);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            let mut right = bits & (1 << node) != 0;
            // Subtrees made only of padding leaves hold no real way.
            if right && mid >= self.ways {
                right = false;
            }
            if right {
                node = node * 2 + 1;
                lo = mid;
            } else {
                node *= 2;
                hi = mid;
            }
        }
        lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn parses_policy_names() {
        assert_eq!("LRU".parse::<Policy>().unwrap(), Policy::Lru);
        assert_eq!("pseudo-lru".parse::<Policy>().unwrap(), Policy::Plru);
        assert_eq!("bimodal".parse::<Policy>().unwrap(), Policy::Bip);
        assert_eq!("random".parse::<Policy>().unwrap(), Policy::Random);
        assert!(matches!("fifo".parse::<Policy>(), Err(Error::Config(_))));
    }

    #[test]
    fn lru_victim_is_oldest_touch() {
        let mut r = Replacer::new(Policy::Lru, 1, 4);
        let mut g = rng();
        for w in 0..4 {
            r.fill(0, w, |_| true, &mut g);
        }
        r.touch(0, 0);
        assert_eq!(r.victim(0, &mut g), 1);
        r.touch(0, 1);
        assert_eq!(r.victim(0, &mut g), 2);
    }

    // Hand-simulated 4-way tree: nodes 1 (root), 2 (ways 0/1), 3 (ways 2/3).
    #[test]
    fn plru_matches_hand_trace() {
        let mut r = Replacer::new(Policy::Plru, 1, 4);
        let mut g = rng();
        // Touch 0: root->right, node2->right(1). victim: root right -> node3 bit 0 -> way 2.
        r.touch(0, 0);
        assert_eq!(r.victim(0, &mut g), 2);
        // Touch 2: root->left, node3->right(3). victim: root left -> node2 right -> way 1.
        r.touch(0, 2);
        assert_eq!(r.victim(0, &mut g), 1);
        // Touch 1: root->right, node2->left(0). victim: root right -> node3 right -> way 3.
        r.touch(0, 1);
        assert_eq!(r.victim(0, &mut g), 3);
        // Touch 3: root->left, node3->left(2). victim: root left -> node2 left -> way 0.
        r.touch(0, 3);
        assert_eq!(r.victim(0, &mut g), 0);
    }

    #[test]
    fn plru_never_picks_padding_way() {
        let mut r = Replacer::new(Policy::Plru, 1, 11);
        let mut g = rng();
        for i in 0..500 {
            let v = r.victim(0, &mut g);
            assert!(v < 11);
            r.touch(0, (v + i) % 11);
        }
    }

    #[test]
    fn bip_inserts_mostly_at_lru() {
        let mut r = Replacer::new(Policy::Bip, 1, 2);
        let mut g = ChaCha8Rng::seed_from_u64(42);
        r.touch(0, 0);
        let trials = 100_000;
        let mut mru = 0;
        for _ in 0..trials {
            if r.fill(0, 1, |_| true, &mut g) == InsertPosition::Mru {
                mru += 1;
            }
        }
        let p = mru as f64 / trials as f64;
        let expected = 1.0 / BIP_THROTTLE as f64;
        // Binomial standard deviation at n = 1e5 is ~5.5e-4; allow ~5 sigma.
        assert!((p - expected).abs() < 3e-3, "observed MRU share {p}");
    }

    #[test]
    fn bip_lru_insert_becomes_next_victim() {
        let mut r = Replacer::new(Policy::Bip, 1, 4);
        let mut g = ChaCha8Rng::seed_from_u64(3);
        for w in 0..3 {
            r.touch(0, w);
        }
        loop {
            if r.fill(0, 3, |_| true, &mut g) == InsertPosition::Lru {
                break;
            }
        }
        assert_eq!(r.victim(0, &mut g), 3);
    }
}
