//! Cache-residency estimate for persistent objects.
//!
//! A flat LRU queue whose capacity is the cache size in blocks. Each
//! tracked object occupies one entry weighted by its block count. While an
//! object stays in the queue it is presumed cached, so the flush for a write
//! to it can wait; if the object is touched again the waiting flush is
//! issued, and if it falls off the LRU end the flush is dropped because the
//! cache has presumably written it back already.
//!
//! The tracker only decides. The caller performs flushes and checksum work
//! for the entries it returns.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NIL: usize = usize::MAX;

/// An object as the tracker sees it. `id` is usually the object address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tracked {
    pub id: u64,
    pub addr: u64,
    pub size: u64,
    pub blocks: u32,
}

/// A write whose flush decision has been made.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resolved {
    pub object: Tracked,
    pub txn: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Access {
    /// Pending flush that must be issued now because the object was reused.
    pub completed: Option<Resolved>,
    /// Whether this access left a new pending flush behind.
    pub new_pending: bool,
    /// Entries pushed out of the queue. Those with `Some` txn had a pending
    /// flush that is now skipped.
    pub evicted: Vec<(Tracked, Option<u64>)>,
}

impl Access {
    pub fn skipped(&self) -> impl Iterator<Item = Resolved> + '_ {
        self.evicted
            .iter()
            .filter_map(|&(object, txn)| txn.map(|txn| Resolved { object, txn }))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub pending_created: u64,
    pub completed_on_reuse: u64,
    pub skipped_on_eviction: u64,
    pub drained: u64,
    pub cancelled: u64,
}

#[derive(Clone, Debug)]
struct Node {
    obj: Tracked,
    pending: Option<u64>,
    prev: usize,
    next: usize,
}

#[derive(Clone, Debug)]
pub struct Tracker {
    capacity_blocks: u64,
    occupancy: u64,
    index: HashMap<u64, usize>,
    nodes: Vec<Node>,
    free: Vec<usize>,
    /// Most recently used end.
    head: usize,
    /// Least recently used end.
    tail: usize,
    pending: BTreeMap<u64, BTreeSet<u64>>,
    stats: TrackerStats,
}

impl Tracker {
    pub fn new(capacity_blocks: u64) -> Result<Self> {
        if capacity_blocks == 0 {
            return Err(Error::config("tracker capacity must be at least one block"));
        }
        Ok(Tracker {
            capacity_blocks,
            occupancy: 0,
            index: HashMap::new(),
            nodes: Vec::new(),
            free: Vec::new(),
            head: NIL,
            tail: NIL,
            pending: BTreeMap::new(),
            stats: TrackerStats::default(),
        })
    }

    pub fn capacity_blocks(&self) -> u64 {
        self.capacity_blocks
    }

    pub fn occupancy_blocks(&self) -> u64 {
        self.occupancy
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn stats(&self) -> TrackerStats {
        self.stats
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    pub fn pending_owner(&self, id: u64) -> Option<u64> {
        self.index.get(&id).and_then(|&i| self.nodes[i].pending)
    }

    pub fn pending_count(&self, txn: u64) -> usize {
        self.pending.get(&txn).map_or(0, BTreeSet::len)
    }

    pub fn total_pending(&self) -> usize {
        self.pending.values().map(BTreeSet::len).sum()
    }

    /// Ids from most to least recently used.
    pub fn order(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.len());
        let mut i = self.head;
        while i != NIL {
            out.push(self.nodes[i].obj.id);
            i = self.nodes[i].next;
        }
        out
    }

    fn unlink(&mut self, i: usize) {
        let (prev, next) = (self.nodes[i].prev, self.nodes[i].next);
        if prev != NIL {
            self.nodes[prev].next = next;
        } else {
            self.head = next;
        }
        if next != NIL {
            self.nodes[next].prev = prev;
        } else {
            self.tail = prev;
        }
        self.nodes[i].prev = NIL;
        self.nodes[i].next = NIL;
    }

    fn push_front(&mut self, i: usize) {
        self.nodes[i].prev = NIL;
        self.nodes[i].next = self.head;
        if self.head != NIL {
            self.nodes[self.head].prev = i;
        }
        self.head = i;
        if self.tail == NIL {
            self.tail = i;
        }
    }

    fn take_pending(&mut self, i: usize) -> Option<u64> {
        let txn = self.nodes[i].pending.take()?;
        let id = self.nodes[i].obj.id;
        if let Some(set) = self.pending.get_mut(&txn) {
            set.remove(&id);
            if set.is_empty() {
                self.pending.remove(&txn);
            }
        }
        Some(txn)
    }

    fn set_pending(&mut self, i: usize, txn: u64) {
        self.nodes[i].pending = Some(txn);
        self.pending
            .entry(txn)
            .or_default()
            .insert(self.nodes[i].obj.id);
        self.stats.pending_created += 1;
    }

    fn remove_node(&mut self, i: usize) -> (Tracked, Option<u64>) {
        let txn = self.take_pending(i);
        self.unlink(i);
        let obj = self.nodes[i].obj;
        self.index.remove(&obj.id);
        self.occupancy -= obj.blocks as u64;
        self.free.push(i);
        (obj, txn)
    }

    /// Registers a read or write. Writes leave a pending flush owned by `txn`.
    pub fn record_access(&mut self, obj: Tracked, is_write: bool, txn: u64) -> Access {
        let mut out = Access::default();
        match self.index.get(&obj.id).copied() {
            Some(i) => {
                self.stats.hits += 1;
                if let Some(prior) = self.take_pending(i) {
                    self.stats.completed_on_reuse += 1;
                    out.completed = Some(Resolved {
                        object: self.nodes[i].obj,
                        txn: prior,
                    });
                }
                if self.nodes[i].obj.blocks != obj.blocks {
                    self.occupancy =
                        self.occupancy - self.nodes[i].obj.blocks as u64 + obj.blocks as u64;
                }
                self.nodes[i].obj = obj;
                self.unlink(i);
                self.push_front(i);
                if is_write {
                    self.set_pending(i, txn);
                    out.new_pending = true;
                }
            }
            None => {
                self.stats.misses += 1;
                let node = Node {
                    obj,
                    pending: None,
                    prev: NIL,
                    next: NIL,
                };
                let i = match self.free.pop() {
                    Some(i) => {
                        self.nodes[i] = node;
                        i
                    }
                    None => {
                        self.nodes.push(node);
                        self.nodes.len() - 1
                    }
                };
                self.index.insert(obj.id, i);
                self.occupancy += obj.blocks as u64;
                self.push_front(i);
                if is_write {
                    self.set_pending(i, txn);
                    out.new_pending = true;
                }
            }
        }
        out.evicted = self.evict_to_fit();
        out
    }

    /// Pops LRU entries until the occupancy bound holds again.
    pub fn evict_to_fit(&mut self) -> Vec<(Tracked, Option<u64>)> {
        let mut out = Vec::new();
        while self.occupancy > self.capacity_blocks && self.tail != NIL {
            let (obj, txn) = self.remove_node(self.tail);
            self.stats.evictions += 1;
            if txn.is_some() {
                self.stats.skipped_on_eviction += 1;
            }
            out.push((obj, txn));
        }
        out
    }

    /// Evicts every object with a flush pending for `txn`, returning them.
    pub fn drain(&mut self, txn: u64) -> Vec<Resolved> {
        let ids: Vec<u64> = self
            .pending
            .get(&txn)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        ids.into_iter()
            .map(|id| {
                let i = self.index[&id];
                let (object, _) = self.remove_node(i);
                self.stats.drained += 1;
                Resolved { object, txn }
            })
            .collect()
    }

    /// Forgets the pending flushes of `txn` without resolving them. Entries
    /// stay queued.
    pub fn cancel(&mut self, txn: u64) -> Vec<Tracked> {
        let ids: Vec<u64> = self
            .pending
            .remove(&txn)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        ids.into_iter()
            .map(|id| {
                let i = self.index[&id];
                self.nodes[i].pending = None;
                self.stats.cancelled += 1;
                self.nodes[i].obj
            })
            .collect()
    }

    /// Drops an object from the queue, returning its pending owner if any.
    pub fn remove(&mut self, id: u64) -> Option<(Tracked, Option<u64>)> {
        let i = self.index.get(&id).copied()?;
        Some(self.remove_node(i))
    }

    /// Transactions that currently own at least one pending flush.
    pub fn pending_txns(&self) -> impl Iterator<Item = u64> + '_ {
        self.pending.keys().copied()
    }
}
