//! The trusted policy server.
//!
//! A [`PolicyServer`] owns the policy state and is driven by one caller at a
//! time; concurrent transports share it as a [`SharedServer`] and funnel
//! every message through its lock. Decisions fail closed. Administrative
//! transitions are persisted and broadcast to every subscribed decision
//! cache before they are acknowledged.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use appspear_core::{
    AccessDecision, Ack, AdminCommand, ContextValue, DecisionEvent, EntityId, Invalidation, OperationId, PolicyState,
    Status, WireMessage,
};

use crate::store::PolicyStore;
use crate::tep::AuditSink;
use crate::transport::{Responder, Subscriber, TransportError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TpsStats {
    pub requests: u64,
    pub allowed: u64,
    pub transitions: u64,
    pub rejected_transitions: u64,
    pub context_pushes: u64,
    pub notices_sent: u64,
    pub subscriber_failures: u64,
    pub audit_failures: u64,
    pub persist_failures: u64,
}

pub struct PolicyServer {
    state: PolicyState,
    /// Latest value per context variable.
    contexts: BTreeMap<String, ContextValue>,
    /// The same values as a slice for evaluation.
    context_vec: Vec<ContextValue>,
    providers: Vec<String>,
    subscribers: Vec<Arc<dyn Subscriber>>,
    store: Option<PolicyStore>,
    audit: Option<Box<dyn AuditSink>>,
    started: Instant,
    stats: TpsStats,
}

pub type SharedServer = Arc<Mutex<PolicyServer>>;

impl PolicyServer {
    pub fn new(state: PolicyState) -> Self {
        PolicyServer {
            state,
            contexts: BTreeMap::new(),
            context_vec: Vec::new(),
            providers: Vec::new(),
            subscribers: Vec::new(),
            store: None,
            audit: None,
            started: Instant::now(),
            stats: TpsStats::default(),
        }
    }

    pub fn shared(self) -> SharedServer {
        Arc::new(Mutex::new(self))
    }

    pub fn state(&self) -> &PolicyState {
        &self.state
    }

    pub fn epoch(&self) -> u64 {
        self.state.epoch()
    }

    pub fn stats(&self) -> TpsStats {
        self.stats
    }

    pub fn set_store(&mut self, store: PolicyStore) {
        self.store = Some(store);
    }

    pub fn set_audit(&mut self, sink: Box<dyn AuditSink>) {
        self.audit = Some(sink);
    }

    pub fn take_audit(&mut self) -> Option<Box<dyn AuditSink>> {
        self.audit.take()
    }

    /// Allows `provider` to push context values.
    pub fn register_provider(&mut self, provider: &str) {
        if !self.providers.iter().any(|p| p == provider) {
            self.providers.push(provider.to_owned());
        }
    }

    pub fn context(&self, variable: &str) -> Option<&ContextValue> {
        self.contexts.get(variable)
    }

    pub fn subscribe(&mut self, subscriber: Arc<dyn Subscriber>) {
        self.subscribers.push(subscriber);
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.len()
    }

    /// Decides one request. Every error becomes a non-cacheable denial
    /// carrying the reason.
    pub fn decide(&mut self, request_id: u64, entities: &[EntityId], op: &OperationId) -> AccessDecision {
        self.stats.requests += 1;
        let epoch = self.state.epoch();
        let decision = match self.state.decide(entities, op, &self.context_vec) {
            Ok((verdict, contextual)) => {
                AccessDecision { request_id, verdict, epoch, cacheable: !contextual, status: Status::Ok }
            }
            Err(e) => AccessDecision::deny(request_id, epoch, (&e).into()),
        };
        if decision.verdict {
            self.stats.allowed += 1;
        }
        if let Some(sink) = self.audit.as_mut() {
            let event = DecisionEvent {
                request_id,
                entities: entities.to_vec(),
                op: op.name.clone(),
                verdict: decision.verdict,
                status: decision.status,
                epoch,
                timestamp: self.started.elapsed().as_nanos() as u64,
            };
            if let Err(e) = sink.record(&event) {
                self.stats.audit_failures += 1;
                log::warn!("audit: {e}");
            }
        }
        decision
    }

    /// Executes an administrative command. On success the change is logged
    /// and every subscriber has dropped the affected cache entries by the
    /// time this returns.
    pub fn handle_admin(&mut self, request_id: u64, cmd: &AdminCommand) -> Ack {
        let base = self.state.epoch();
        let notice = match self.state.execute(cmd) {
            Ok(n) => n,
            Err(e) => {
                self.stats.rejected_transitions += 1;
                return Ack { request_id, status: (&e).into(), epoch: base };
            }
        };
        self.stats.transitions += 1;
        if matches!(cmd, AdminCommand::Install(_)) {
            self.prune_contexts();
        }
        if let Some(store) = self.store.as_mut() {
            // The transition has committed in memory; a storage failure is
            // reported but does not roll it back.
            if let Err(e) = store.record(base, cmd, &self.state) {
                self.stats.persist_failures += 1;
                log::error!("persisting epoch {}: {e}", notice.epoch);
            }
        }
        self.broadcast(&notice);
        Ack { request_id, status: Status::Ok, epoch: notice.epoch }
    }

    fn broadcast(&mut self, notice: &Invalidation) {
        let mut failed = 0;
        self.subscribers.retain(|s| match s.deliver(notice) {
            Ok(()) => true,
            Err(e) => {
                log::warn!("dropping subscriber after failed delivery: {e}");
                failed += 1;
                false
            }
        });
        self.stats.notices_sent += self.subscribers.len() as u64;
        self.stats.subscriber_failures += failed;
    }

    fn prune_contexts(&mut self) {
        let risk = self.state.risk().cloned();
        self.contexts.retain(|name, _| risk.as_ref().is_some_and(|r| r.covers(name)));
        self.context_vec = self.contexts.values().cloned().collect();
    }

    /// Stores the latest value of a context variable.
    pub fn push_context(&mut self, provider: &str, value: ContextValue) -> Status {
        if !self.providers.iter().any(|p| p == provider) {
            return Status::UnknownProvider;
        }
        if !self.state.risk().is_some_and(|r| r.covers(&value.name)) || !value.value.is_finite() {
            return Status::UnknownContextVariable;
        }
        if let Some(prev) = self.contexts.get(&value.name) {
            if value.timestamp < prev.timestamp {
                return Status::StaleContext;
            }
        }
        self.stats.context_pushes += 1;
        self.contexts.insert(value.name.clone(), value);
        self.context_vec = self.contexts.values().cloned().collect();
        Status::Ok
    }

    /// Answers one wire message.
    pub fn respond(&mut self, msg: WireMessage) -> WireMessage {
        let epoch = self.state.epoch();
        let ack = |request_id, status| WireMessage::Ack(Ack { request_id, status, epoch });
        match msg {
            WireMessage::Request(req) => WireMessage::Decision(self.decide(req.request_id, &req.entities, &req.op)),
            WireMessage::Admin { request_id, command } => WireMessage::Ack(self.handle_admin(request_id, &command)),
            WireMessage::ContextPush { request_id, provider, value } => {
                let status = self.push_context(&provider, value);
                ack(request_id, status)
            }
            WireMessage::StatsQuery { request_id } => WireMessage::Stats {
                request_id,
                requests: self.stats.requests,
                transitions: self.stats.transitions,
                epoch,
            },
            m @ WireMessage::Echo { .. } => m,
            other => ack(other.request_id(), Status::Malformed),
        }
    }
}

/// Serves a shared policy server behind any transport.
#[derive(Clone)]
pub struct TpsResponder {
    server: SharedServer,
}

impl TpsResponder {
    pub fn new(server: SharedServer) -> Self {
        TpsResponder { server }
    }

    pub fn server(&self) -> &SharedServer {
        &self.server
    }
}

impl Responder for TpsResponder {
    fn respond(&self, msg: WireMessage) -> WireMessage {
        self.server.lock().unwrap().respond(msg)
    }

    fn subscribe(&self, subscriber: Arc<dyn Subscriber>) -> Result<(), TransportError> {
        self.server.lock().unwrap().subscribe(subscriber);
        Ok(())
    }
}
