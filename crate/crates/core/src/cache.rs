//! In-proxy access decision cache.
//!
//! Entries are keyed by the request's entity vector and operation. RBAC
//! verdicts depend on the subject, on the kinds of non-user targets and on
//! the identity of user targets, so non-user targets are keyed by their
//! kind's class entity: one entry serves every object of a kind. A
//! per-subject index lets subject-scoped invalidation notices drop exactly
//! the affected entries.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use hashbrown::{HashMap, HashSet};
use thiserror::Error;

use crate::entity::{EntityId, EntityKind, OperationId};
use crate::policy::{Invalidation, KeyPattern};
use crate::wire::AccessDecision;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("stale invalidation notice: epoch {epoch} <= last seen {last_seen}")]
    StaleNotice { epoch: u64, last_seen: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CacheKey {
    entities: Vec<EntityId>,
    op: OperationId,
}

impl CacheKey {
    pub fn for_request(entities: &[EntityId], op: &OperationId) -> Self {
        let entities = entities
            .iter()
            .enumerate()
            .map(|(i, e)| if i == 0 || e.kind() == EntityKind::User { *e } else { EntityId::class(e.kind()) })
            .collect();
        CacheKey { entities, op: op.clone() }
    }

    pub fn subject(&self) -> Option<EntityId> {
        self.entities.first().copied()
    }

    pub fn entities(&self) -> &[EntityId] {
        &self.entities
    }

    pub fn op(&self) -> &OperationId {
        &self.op
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub inserts: u64,
    pub skipped: u64,
    pub evicted: u64,
    pub invalidated: u64,
}

#[derive(Clone, Copy, Debug)]
struct Entry {
    verdict: bool,
    epoch: u64,
    stamp: u64,
}

/// Hash-table decision cache with optional LRU bound.
///
/// Not synchronized; the owning proxy wraps it in a lock.
#[derive(Debug, Default)]
pub struct DecisionCache {
    entries: HashMap<CacheKey, Entry>,
    by_subject: HashMap<EntityId, HashSet<CacheKey>>,
    capacity: Option<usize>,
    recency: BTreeMap<u64, CacheKey>,
    clock: u64,
    last_epoch: u64,
    stats: CacheStats,
}

impl DecisionCache {
    /// Unbounded cache.
    pub fn new() -> Self {
        DecisionCache::default()
    }

    /// Cache evicting the least recently used entry beyond `capacity`
    /// entries. A capacity of 0 caches nothing.
    pub fn with_capacity(capacity: usize) -> Self {
        DecisionCache { capacity: Some(capacity), ..DecisionCache::default() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    /// Highest notice epoch applied so far.
    pub fn last_epoch(&self) -> u64 {
        self.last_epoch
    }

    pub fn lookup(&mut self, key: &CacheKey) -> Option<bool> {
        let Some(entry) = self.entries.get_mut(key) else {
            self.stats.misses += 1;
            return None;
        };
        self.stats.hits += 1;
        let verdict = entry.verdict;
        if self.capacity.is_some() {
            self.clock += 1;
            let old = core::mem::replace(&mut entry.stamp, self.clock);
            if let Some(k) = self.recency.remove(&old) {
                self.recency.insert(self.clock, k);
            }
        }
        Some(verdict)
    }

    /// Stores a decision. Non-cacheable or failed decisions, and decisions
    /// older than the last applied notice, are skipped. Returns whether the
    /// entry was stored.
    pub fn insert(&mut self, key: CacheKey, decision: &AccessDecision) -> bool {
        if !decision.cacheable || !decision.status.is_ok() || decision.epoch < self.last_epoch {
            self.stats.skipped += 1;
            return false;
        }
        if self.capacity == Some(0) {
            self.stats.skipped += 1;
            return false;
        }
        self.clock += 1;
        let entry = Entry { verdict: decision.verdict, epoch: decision.epoch, stamp: self.clock };
        if let Some(subject) = key.subject() {
            self.by_subject.entry(subject).or_default().insert(key.clone());
        }
        if self.capacity.is_some() {
            self.recency.insert(self.clock, key.clone());
        }
        if let Some(old) = self.entries.insert(key, entry) {
            self.recency.remove(&old.stamp);
        }
        self.stats.inserts += 1;
        self.evict();
        true
    }

    fn evict(&mut self) {
        let Some(cap) = self.capacity else { return };
        while self.entries.len() > cap {
            let Some((_, key)) = self.recency.pop_first() else { break };
            self.remove(&key);
            self.stats.evicted += 1;
        }
    }

    fn remove(&mut self, key: &CacheKey) -> bool {
        let Some(entry) = self.entries.remove(key) else { return false };
        self.recency.remove(&entry.stamp);
        if let Some(subject) = key.subject() {
            if let Some(keys) = self.by_subject.get_mut(&subject) {
                keys.remove(key);
                if keys.is_empty() {
                    self.by_subject.remove(&subject);
                }
            }
        }
        true
    }

    /// Applies an invalidation notice, returning how many entries it
    /// dropped. Notices not newer than the last applied one are rejected.
    pub fn invalidate(&mut self, notice: &Invalidation) -> Result<usize, CacheError> {
        if notice.epoch <= self.last_epoch {
            return Err(CacheError::StaleNotice { epoch: notice.epoch, last_seen: self.last_epoch });
        }
        self.last_epoch = notice.epoch;
        let mut dropped = 0;
        for pattern in &notice.patterns {
            match pattern {
                KeyPattern::All => {
                    dropped += self.entries.len();
                    self.clear();
                }
                KeyPattern::Subject(s) => {
                    for key in self.by_subject.remove(s).unwrap_or_default() {
                        if let Some(entry) = self.entries.remove(&key) {
                            self.recency.remove(&entry.stamp);
                            dropped += 1;
                        }
                    }
                }
            }
        }
        self.stats.invalidated += dropped as u64;
        Ok(dropped)
    }

    /// Drops every entry without touching the epoch.
    pub fn clear(&mut self) {
        self.entries.clear();
        self.by_subject.clear();
        self.recency.clear();
    }

    /// Epoch the entry for `key` was decided under, if present.
    pub fn entry_epoch(&self, key: &CacheKey) -> Option<u64> {
        self.entries.get(key).map(|e| e.epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::Status;
    use alloc::vec;

    fn user(n: u64) -> EntityId {
        EntityId::new(EntityKind::User, n)
    }

    fn patient(n: u64) -> EntityId {
        EntityId::new(EntityKind::Patient, n)
    }

    fn key(s: u64, t: u64, op: &str) -> CacheKey {
        CacheKey::for_request(&[user(s), patient(t)], &OperationId::new(op, 2))
    }

    fn allow(epoch: u64) -> AccessDecision {
        AccessDecision { request_id: 0, verdict: true, epoch, cacheable: true, status: Status::Ok }
    }

    #[test]
    fn store_and_retrieve() {
        let mut c = DecisionCache::new();
        assert_eq!(c.lookup(&key(1, 1, "read")), None);
        assert!(c.insert(key(1, 1, "read"), &allow(0)));
        assert_eq!(c.lookup(&key(1, 1, "read")), Some(true));
        // Same kind, different object: same entry.
        assert_eq!(c.lookup(&key(1, 2, "read")), Some(true));
        assert_eq!(c.lookup(&key(2, 1, "read")), None);
    }

    #[test]
    fn skip_non_cacheable_and_overwrite() {
        let mut c = DecisionCache::new();
        let mut d = allow(0);
        d.cacheable = false;
        assert!(!c.insert(key(1, 1, "read"), &d));
        assert!(!c.insert(key(1, 1, "read"), &AccessDecision::deny(0, 0, Status::UnknownEntity)));
        assert_eq!(c.lookup(&key(1, 1, "read")), None);
        c.insert(key(1, 1, "read"), &allow(0));
        c.insert(key(1, 1, "read"), &AccessDecision { verdict: false, ..allow(0) });
        assert_eq!(c.lookup(&key(1, 1, "read")), Some(false));
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn user_targets_keep_identity() {
        let a = CacheKey::for_request(&[user(1), user(2)], &OperationId::new("x", 2));
        let b = CacheKey::for_request(&[user(1), user(3)], &OperationId::new("x", 2));
        assert_ne!(a, b);
    }

    #[test]
    fn declared_arity_is_part_of_the_key() {
        let a = CacheKey::for_request(&[user(1)], &OperationId::new("x", 1));
        let b = CacheKey::for_request(&[user(1)], &OperationId::new("x", 2));
        assert_ne!(a, b);
    }

    #[test]
    fn subject_pattern_removes_exactly_that_subject() {
        let mut c = DecisionCache::new();
        for s in 1..=3 {
            for op in ["read", "write"] {
                c.insert(key(s, 1, op), &allow(0));
            }
        }
        let n = c.invalidate(&Invalidation { epoch: 1, patterns: vec![KeyPattern::Subject(user(2))] });
        assert_eq!(n, Ok(2));
        assert_eq!(c.lookup(&key(2, 1, "read")), None);
        assert_eq!(c.lookup(&key(1, 1, "read")), Some(true));
        assert_eq!(c.lookup(&key(3, 1, "write")), Some(true));
    }

    #[test]
    fn wildcard_empties_cache() {
        let mut c = DecisionCache::new();
        c.insert(key(1, 1, "read"), &allow(0));
        c.insert(key(2, 1, "read"), &allow(0));
        assert_eq!(c.invalidate(&Invalidation { epoch: 4, patterns: vec![KeyPattern::All] }), Ok(2));
        assert!(c.is_empty());
        assert_eq!(c.last_epoch(), 4);
    }

    #[test]
    fn stale_notice_rejected_and_old_decisions_skipped() {
        let mut c = DecisionCache::new();
        c.invalidate(&Invalidation { epoch: 5, patterns: vec![] }).unwrap();
        assert_eq!(
            c.invalidate(&Invalidation { epoch: 5, patterns: vec![KeyPattern::All] }),
            Err(CacheError::StaleNotice { epoch: 5, last_seen: 5 })
        );
        // Decided before the notice, arrives after it.
        assert!(!c.insert(key(1, 1, "read"), &allow(4)));
        assert!(c.insert(key(1, 1, "read"), &allow(5)));
    }

    #[test]
    fn lru_bound_evicts_least_recent() {
        let mut c = DecisionCache::with_capacity(2);
        c.insert(key(1, 1, "a"), &allow(0));
        c.insert(key(1, 1, "b"), &allow(0));
        c.lookup(&key(1, 1, "a"));
        c.insert(key(1, 1, "c"), &allow(0));
        assert_eq!(c.len(), 2);
        assert_eq!(c.lookup(&key(1, 1, "b")), None);
        assert_eq!(c.lookup(&key(1, 1, "a")), Some(true));
        assert_eq!(c.stats().evicted, 1);
        // Evicted keys are gone from the subject index too.
        assert_eq!(c.invalidate(&Invalidation { epoch: 1, patterns: vec![KeyPattern::Subject(user(1))] }), Ok(2));
    }
}
