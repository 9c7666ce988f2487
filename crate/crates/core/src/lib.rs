//! Policy-side building blocks for application-level reference monitors.
//!
//! This crate holds everything that is pure computation: the RBAC policy
//! state with its access control functions and transition scheme, the
//! context/risk evaluation, the line-oriented policy bootstrap grammar, the
//! binary wire codec spoken between proxies, the in-proxy decision cache and
//! the checksummed persistence records. It needs `alloc` but not `std`;
//! transports, servers and file IO live in the `appspear` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod bootstrap;
pub mod cache;
pub mod context;
pub mod entity;
pub mod persist;
pub mod policy;
pub mod wire;

pub use bootstrap::{parse_bootstrap, Bootstrap, BootstrapError};
pub use cache::{CacheError, CacheKey, CacheStats, DecisionCache};
pub use context::{risk_score, ContextValue, RiskPolicy};
pub use entity::{EntityId, EntityKind, OperationId};
pub use persist::{PersistError, PersistenceRecord, Strategy};
pub use policy::{
    AdminCommand, Invalidation, KeyPattern, OperationSpec, Permission, PolicyBuilder, PolicyError, PolicyState, Role,
    TransitionCommand,
};
pub use wire::{AccessDecision, AccessRequest, Ack, DecisionEvent, Status, WireError, WireMessage};
