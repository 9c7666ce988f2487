//! TOM-side requester proxy for policy decisions, with the decision cache.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use appspear_core::{
    AccessDecision, AccessRequest, Ack, AdminCommand, CacheError, CacheKey, CacheStats, DecisionCache, EntityId,
    Invalidation, OperationId, Status, WireMessage,
};

use crate::tps::SharedServer;
use crate::transport::{Channel, Subscriber, TransportError};

/// Counts how policy was consulted, to check total mediation.
#[derive(Debug, Default)]
pub struct MediationCounter {
    requests_sent: AtomicU64,
    cache_hits: AtomicU64,
    // Executed operations are derived: every consultation that produced a
    // decision. Keeps the allowed path to one counter update.
    failures: AtomicU64,
    denied: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MediationStats {
    /// Decisions requested from the policy server.
    pub requests_sent: u64,
    /// Decisions served from the cache.
    pub cache_hits: u64,
    /// Operations mediated, whatever the verdict.
    pub operations_executed: u64,
    /// Operations refused, by verdict or error.
    pub denied: u64,
}

impl MediationCounter {
    pub fn snapshot(&self) -> MediationStats {
        let requests_sent = self.requests_sent.load(Ordering::SeqCst);
        let cache_hits = self.cache_hits.load(Ordering::SeqCst);
        MediationStats {
            requests_sent,
            cache_hits,
            operations_executed: requests_sent + cache_hits - self.failures.load(Ordering::SeqCst),
            denied: self.denied.load(Ordering::SeqCst),
        }
    }

    pub(crate) fn refused(&self) {
        self.denied.fetch_add(1, Ordering::SeqCst);
    }
}

/// Counters of the policy server.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ServerCounters {
    pub requests: u64,
    pub transitions: u64,
    pub epoch: u64,
}

/// Path from a TOM to the policy server. Ports number their own requests.
pub trait PolicyPort: Send + Sync {
    fn decide(&self, entities: &[EntityId], op: &OperationId) -> Result<AccessDecision, TransportError>;
    fn admin(&self, command: AdminCommand) -> Result<Ack, TransportError>;
    fn counters(&self) -> Result<ServerCounters, TransportError>;
    fn subscribe(&self, subscriber: Arc<dyn Subscriber>) -> Result<(), TransportError>;
}

/// Same address space: the server is called directly, without building a
/// message.
pub struct LocalPort {
    server: SharedServer,
}

impl LocalPort {
    pub fn new(server: SharedServer) -> Self {
        LocalPort { server }
    }
}

impl PolicyPort for LocalPort {
    fn decide(&self, entities: &[EntityId], op: &OperationId) -> Result<AccessDecision, TransportError> {
        let mut server = self.server.lock().unwrap();
        let id = server.stats().requests + 1;
        Ok(server.decide(id, entities, op))
    }

    fn admin(&self, command: AdminCommand) -> Result<Ack, TransportError> {
        let mut server = self.server.lock().unwrap();
        let id = server.stats().transitions + server.stats().rejected_transitions + 1;
        Ok(server.handle_admin(id, &command))
    }

    fn counters(&self) -> Result<ServerCounters, TransportError> {
        let s = self.server.lock().unwrap();
        let st = s.stats();
        Ok(ServerCounters { requests: st.requests, transitions: st.transitions, epoch: s.epoch() })
    }

    fn subscribe(&self, subscriber: Arc<dyn Subscriber>) -> Result<(), TransportError> {
        self.server.lock().unwrap().subscribe(subscriber);
        Ok(())
    }
}

/// Across a boundary: requests travel as wire messages over a channel.
pub struct RemotePort {
    channel: Arc<dyn Channel>,
    next_id: AtomicU64,
}

impl RemotePort {
    pub fn new(channel: Arc<dyn Channel>) -> Self {
        RemotePort { channel, next_id: AtomicU64::new(1) }
    }

    fn request_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }
}

fn unexpected(reply: WireMessage) -> TransportError {
    TransportError::failure(format!("unexpected reply {reply:?}"))
}

impl PolicyPort for RemotePort {
    fn decide(&self, entities: &[EntityId], op: &OperationId) -> Result<AccessDecision, TransportError> {
        let request_id = self.request_id();
        let req = AccessRequest { request_id, entities: entities.to_vec(), op: op.clone(), contexts_required: false };
        match self.channel.call(WireMessage::Request(req))? {
            WireMessage::Decision(d) => Ok(d),
            // A malformed-request ack is still an answer: deny.
            WireMessage::Ack(a) => Ok(AccessDecision::deny(request_id, a.epoch, a.status)),
            other => Err(unexpected(other)),
        }
    }

    fn admin(&self, command: AdminCommand) -> Result<Ack, TransportError> {
        let request_id = self.request_id();
        match self.channel.call(WireMessage::Admin { request_id, command })? {
            WireMessage::Ack(a) => Ok(a),
            other => Err(unexpected(other)),
        }
    }

    fn counters(&self) -> Result<ServerCounters, TransportError> {
        let request_id = self.request_id();
        match self.channel.call(WireMessage::StatsQuery { request_id })? {
            WireMessage::Stats { requests, transitions, epoch, .. } => {
                Ok(ServerCounters { requests, transitions, epoch })
            }
            other => Err(unexpected(other)),
        }
    }

    fn subscribe(&self, subscriber: Arc<dyn Subscriber>) -> Result<(), TransportError> {
        self.channel.subscribe(subscriber)
    }
}

/// The decision cache as an invalidation subscriber. Once notices can no
/// longer arrive the cache is emptied and bypassed for good.
pub struct CacheSubscriber {
    cache: Mutex<DecisionCache>,
    poisoned: AtomicBool,
}

impl CacheSubscriber {
    fn new(capacity: Option<usize>) -> Self {
        let cache = match capacity {
            Some(n) => DecisionCache::with_capacity(n),
            None => DecisionCache::new(),
        };
        CacheSubscriber { cache: Mutex::new(cache), poisoned: AtomicBool::new(false) }
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned.load(Ordering::SeqCst)
    }
}

impl Subscriber for CacheSubscriber {
    fn deliver(&self, notice: &Invalidation) -> Result<(), TransportError> {
        match self.cache.lock().unwrap().invalidate(notice) {
            Ok(_) => {}
            Err(e @ CacheError::StaleNotice { .. }) => log::warn!("{e}"),
        }
        Ok(())
    }

    fn disconnected(&self) {
        self.poisoned.store(true, Ordering::SeqCst);
        self.cache.lock().unwrap().clear();
        log::warn!("invalidation channel lost; decision cache disabled");
    }
}

/// Requests decisions for one TOM, consulting the cache first when enabled.
pub struct PolicyClient {
    port: Arc<dyn PolicyPort>,
    cache: Option<Arc<CacheSubscriber>>,
    counter: MediationCounter,
}

impl PolicyClient {
    /// With `cache`, subscribes the cache for invalidations; `capacity`
    /// bounds it (LRU) when given.
    pub fn new(port: Arc<dyn PolicyPort>, cache: bool, capacity: Option<usize>) -> Result<Self, TransportError> {
        let cache = if cache {
            let sub = Arc::new(CacheSubscriber::new(capacity));
            port.subscribe(sub.clone())?;
            Some(sub)
        } else {
            None
        };
        Ok(PolicyClient { port, cache, counter: MediationCounter::default() })
    }

    pub fn cache_enabled(&self) -> bool {
        self.cache.as_ref().is_some_and(|c| !c.is_poisoned())
    }

    /// One policy consultation for `entities` and `op`.
    pub fn check(&self, entities: &[EntityId], op: &OperationId) -> Result<AccessDecision, TransportError> {
        let cache = self.cache.as_ref().filter(|c| !c.is_poisoned());
        let key = cache.map(|c| {
            let key = CacheKey::for_request(entities, op);
            let hit = c.cache.lock().unwrap().lookup(&key);
            (key, hit)
        });
        if let Some((_, Some(verdict))) = key {
            self.counter.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(AccessDecision { request_id: 0, verdict, epoch: 0, cacheable: true, status: Status::Ok });
        }
        self.counter.requests_sent.fetch_add(1, Ordering::SeqCst);
        let decision = self.port.decide(entities, op).inspect_err(|_| {
            self.counter.failures.fetch_add(1, Ordering::SeqCst);
        })?;
        if let (Some(c), Some((key, _))) = (cache, key) {
            if decision.cacheable && decision.status.is_ok() {
                c.cache.lock().unwrap().insert(key, &decision);
            }
        }
        Ok(decision)
    }

    pub fn admin(&self, command: AdminCommand) -> Result<Ack, TransportError> {
        self.port.admin(command)
    }

    pub fn server_counters(&self) -> Result<ServerCounters, TransportError> {
        self.port.counters()
    }

    pub fn counter(&self) -> &MediationCounter {
        &self.counter
    }

    pub fn cache_stats(&self) -> Option<CacheStats> {
        self.cache.as_ref().map(|c| c.cache.lock().unwrap().stats())
    }
}
