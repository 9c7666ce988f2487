//! RBAC policy state, its access control functions and transition scheme.
//!
//! Users activate a subset of their assigned roles in a session; a request
//! `⟨subject, target, ...⟩ op` is allowed iff one of the subject's activated
//! roles holds the permission `(op, kind(target))`. The first entity of every
//! request vector is the requesting subject. For unary operations the target
//! kind is the subject's own kind.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::borrow::Borrow;
use core::fmt;

use thiserror::Error;

use crate::context::{risk_score, ContextValue, RiskPolicy};
use crate::entity::{EntityId, EntityKind, OperationId};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    #[error("operation {op} expects {expected} entities, got {got}")]
    ArityMismatch { op: String, expected: u8, got: usize },
    #[error("unknown operation `{0}`")]
    UnknownOperation(String),
    #[error("unknown context variable `{0}`")]
    UnknownContextVariable(String),
    #[error("unknown referent: {0}")]
    UnknownReferent(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(&'static str),
    #[error("operation `{0}` is context-classified but the policy has no risk policy")]
    MissingRiskPolicy(String),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Role(String);

impl Role {
    pub fn new(name: impl Into<String>) -> Self {
        Role(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Borrow<str> for Role {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Right to perform `op` on entities of `kind`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Permission {
    pub op: String,
    pub kind: EntityKind,
}

impl Permission {
    pub fn new(op: impl Into<String>, kind: EntityKind) -> Self {
        Permission { op: op.into(), kind }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OperationSpec {
    pub arity: u8,
    /// Decided by the context-aware function instead of the plain one.
    pub context: bool,
}

/// State-modifying commands of the dynamic RBAC model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransitionCommand {
    AddUser(EntityId),
    RemoveUser(EntityId),
    AssignRole { user: EntityId, role: Role },
    RevokeRole { user: EntityId, role: Role },
    ActivateRole { user: EntityId, role: Role },
    DeactivateRole { user: EntityId, role: Role },
    GrantPermission { permission: Permission, role: Role },
    RevokePermission { permission: Permission, role: Role },
}

/// What the administration channel can ask of the policy server.
#[derive(Clone, Debug, PartialEq)]
pub enum AdminCommand {
    Transition(TransitionCommand),
    /// Replace all relations with those of another state.
    Install(PolicyState),
}

/// Cache keys a transition may have changed the verdict of.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KeyPattern {
    /// Every key whose requesting subject is this entity.
    Subject(EntityId),
    All,
}

impl KeyPattern {
    pub fn matches_subject(&self, subject: EntityId) -> bool {
        match self {
            KeyPattern::Subject(s) => *s == subject,
            KeyPattern::All => true,
        }
    }
}

/// Result of a successful transition: the new epoch and the key patterns
/// whose cached verdicts must be dropped.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Invalidation {
    pub epoch: u64,
    pub patterns: Vec<KeyPattern>,
}

impl Invalidation {
    pub fn covers(&self, subject: EntityId) -> bool {
        self.patterns.iter().any(|p| p.matches_subject(subject))
    }
}

/// The TPS-held RBAC policy.
///
/// Permission-role assignment is stored indexed by target kind and operation
/// name so that a decision needs no allocation.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PolicyState {
    operations: BTreeMap<String, OperationSpec>,
    users: BTreeSet<EntityId>,
    retired: BTreeSet<EntityId>,
    roles: BTreeSet<Role>,
    permissions: BTreeSet<Permission>,
    user_roles: BTreeMap<EntityId, BTreeSet<Role>>,
    permission_roles: BTreeMap<EntityKind, BTreeMap<String, BTreeSet<Role>>>,
    sessions: BTreeMap<EntityId, BTreeSet<Role>>,
    risk: Option<RiskPolicy>,
    epoch: u64,
}

impl PolicyState {
    pub fn builder() -> PolicyBuilder {
        PolicyBuilder::default()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn risk(&self) -> Option<&RiskPolicy> {
        self.risk.as_ref()
    }

    pub fn operation(&self, name: &str) -> Option<OperationSpec> {
        self.operations.get(name).copied()
    }

    pub fn operations(&self) -> impl Iterator<Item = (&str, OperationSpec)> {
        self.operations.iter().map(|(n, s)| (n.as_str(), *s))
    }

    pub fn users(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.users.iter().copied()
    }

    pub fn retired_users(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.retired.iter().copied()
    }

    pub fn has_user(&self, user: EntityId) -> bool {
        self.users.contains(&user)
    }

    pub fn roles(&self) -> impl Iterator<Item = &Role> {
        self.roles.iter()
    }

    pub fn permissions(&self) -> impl Iterator<Item = &Permission> {
        self.permissions.iter()
    }

    pub fn assigned_roles(&self, user: EntityId) -> impl Iterator<Item = &Role> {
        self.user_roles.get(&user).into_iter().flatten()
    }

    pub fn active_roles(&self, user: EntityId) -> impl Iterator<Item = &Role> {
        self.sessions.get(&user).into_iter().flatten()
    }

    /// `(user, role)` pairs of the user-role assignment.
    pub fn user_role_pairs(&self) -> impl Iterator<Item = (EntityId, &Role)> {
        self.user_roles.iter().flat_map(|(u, rs)| rs.iter().map(move |r| (*u, r)))
    }

    /// `(permission, role)` pairs of the permission-role assignment.
    pub fn permission_role_pairs(&self) -> impl Iterator<Item = (Permission, &Role)> {
        self.permission_roles.iter().flat_map(|(kind, by_op)| {
            by_op.iter().flat_map(move |(op, rs)| rs.iter().map(move |r| (Permission::new(op.clone(), *kind), r)))
        })
    }

    /// `(user, role)` pairs of activated roles.
    pub fn session_pairs(&self) -> impl Iterator<Item = (EntityId, &Role)> {
        self.sessions.iter().flat_map(|(u, rs)| rs.iter().map(move |r| (*u, r)))
    }

    fn check_request(&self, entities: &[EntityId], op: &OperationId) -> Result<OperationSpec, PolicyError> {
        let spec = self
            .operations
            .get(op.name.as_str())
            .copied()
            .ok_or_else(|| PolicyError::UnknownOperation(op.name.clone()))?;
        if op.arity != spec.arity || entities.len() != spec.arity as usize || entities.is_empty() {
            return Err(PolicyError::ArityMismatch { op: op.name.clone(), expected: spec.arity, got: entities.len() });
        }
        for e in entities {
            if e.kind() == EntityKind::User && !self.users.contains(e) {
                return Err(PolicyError::UnknownEntity(*e));
            }
        }
        Ok(spec)
    }

    fn rbac_verdict(&self, entities: &[EntityId], op: &str) -> bool {
        let subject = entities[0];
        let kind = entities.get(1).unwrap_or(&subject).kind();
        let Some(granted) = self.permission_roles.get(&kind).and_then(|m| m.get(op)) else {
            return false;
        };
        self.sessions.get(&subject).is_some_and(|active| active.iter().any(|r| granted.contains(r)))
    }

    /// The plain access control function. Pure.
    pub fn evaluate(&self, entities: &[EntityId], op: &OperationId) -> Result<bool, PolicyError> {
        self.check_request(entities, op)?;
        Ok(self.rbac_verdict(entities, &op.name))
    }

    /// The context-aware access control function: the RBAC verdict and an
    /// acceptable risk. Pure.
    pub fn evaluate_in_context(
        &self,
        entities: &[EntityId],
        op: &OperationId,
        contexts: &[ContextValue],
        risk: &RiskPolicy,
    ) -> Result<bool, PolicyError> {
        self.check_request(entities, op)?;
        let score = risk_score(contexts, risk)?;
        Ok(self.rbac_verdict(entities, &op.name) && score <= risk.threshold)
    }

    /// Decides with whichever function the operation is classified for.
    /// Returns the verdict and whether it depended on context.
    pub fn decide(
        &self,
        entities: &[EntityId],
        op: &OperationId,
        contexts: &[ContextValue],
    ) -> Result<(bool, bool), PolicyError> {
        let spec = self.check_request(entities, op)?;
        if !spec.context {
            return Ok((self.rbac_verdict(entities, &op.name), false));
        }
        let risk = self.risk.as_ref().ok_or_else(|| PolicyError::MissingRiskPolicy(op.name.clone()))?;
        let score = risk_score(contexts, risk)?;
        Ok((self.rbac_verdict(entities, &op.name) && score <= risk.threshold, true))
    }

    fn require_user(&self, user: EntityId) -> Result<(), PolicyError> {
        if self.users.contains(&user) {
            Ok(())
        } else {
            Err(PolicyError::UnknownReferent(alloc::format!("user {user}")))
        }
    }

    fn require_role(&self, role: &Role) -> Result<(), PolicyError> {
        if self.roles.contains(role) {
            Ok(())
        } else {
            Err(PolicyError::UnknownReferent(alloc::format!("role {role}")))
        }
    }

    fn require_permission(&self, permission: &Permission) -> Result<(), PolicyError> {
        if self.permissions.contains(permission) {
            Ok(())
        } else {
            Err(PolicyError::UnknownReferent(alloc::format!("permission ({}, {})", permission.op, permission.kind)))
        }
    }

    fn subjects_with_active(&self, role: &Role) -> Vec<KeyPattern> {
        self.sessions.iter().filter(|(_, active)| active.contains(role)).map(|(u, _)| KeyPattern::Subject(*u)).collect()
    }

    /// Applies one transition. On error the state, including its epoch, is
    /// left untouched.
    pub fn apply(&mut self, cmd: &TransitionCommand) -> Result<Invalidation, PolicyError> {
        use TransitionCommand::*;
        // Validate everything before the first mutation.
        match cmd {
            AddUser(u) => {
                if u.kind() != EntityKind::User || u.is_class() {
                    return Err(PolicyError::InvariantViolation("users must be non-class user entities"));
                }
                if self.users.contains(u) {
                    return Err(PolicyError::InvariantViolation("user already exists"));
                }
                if self.retired.contains(u) {
                    return Err(PolicyError::InvariantViolation("user id was retired and cannot be reused"));
                }
            }
            RemoveUser(u) => self.require_user(*u)?,
            AssignRole { user, role } | RevokeRole { user, role } | DeactivateRole { user, role } => {
                self.require_user(*user)?;
                self.require_role(role)?;
            }
            ActivateRole { user, role } => {
                self.require_user(*user)?;
                self.require_role(role)?;
                if !self.user_roles.get(user).is_some_and(|rs| rs.contains(role)) {
                    return Err(PolicyError::InvariantViolation("cannot activate a role that is not assigned"));
                }
            }
            GrantPermission { permission, role } | RevokePermission { permission, role } => {
                self.require_permission(permission)?;
                self.require_role(role)?;
            }
        }

        let patterns = match cmd {
            AddUser(u) => {
                self.users.insert(*u);
                Vec::new()
            }
            RemoveUser(u) => {
                self.users.remove(u);
                self.user_roles.remove(u);
                self.sessions.remove(u);
                self.retired.insert(*u);
                // Keys may name the user as a target too.
                alloc::vec![KeyPattern::All]
            }
            AssignRole { user, role } => {
                self.user_roles.entry(*user).or_default().insert(role.clone());
                Vec::new()
            }
            RevokeRole { user, role } => {
                remove_from(&mut self.user_roles, user, role);
                remove_from(&mut self.sessions, user, role);
                alloc::vec![KeyPattern::Subject(*user)]
            }
            ActivateRole { user, role } => {
                self.sessions.entry(*user).or_default().insert(role.clone());
                alloc::vec![KeyPattern::Subject(*user)]
            }
            DeactivateRole { user, role } => {
                remove_from(&mut self.sessions, user, role);
                alloc::vec![KeyPattern::Subject(*user)]
            }
            GrantPermission { permission, role } => {
                self.permission_roles
                    .entry(permission.kind)
                    .or_default()
                    .entry(permission.op.clone())
                    .or_default()
                    .insert(role.clone());
                self.subjects_with_active(role)
            }
            RevokePermission { permission, role } => {
                if let Some(by_op) = self.permission_roles.get_mut(&permission.kind) {
                    remove_from(by_op, &permission.op, role);
                    if by_op.is_empty() {
                        self.permission_roles.remove(&permission.kind);
                    }
                }
                self.subjects_with_active(role)
            }
        };
        self.epoch += 1;
        Ok(Invalidation { epoch: self.epoch, patterns })
    }

    /// Replaces all relations with those of `next`, keeping the epoch
    /// monotone. Everything cached before is invalid afterwards.
    pub fn install(&mut self, next: PolicyState) -> Invalidation {
        let epoch = self.epoch.max(next.epoch) + 1;
        *self = next;
        self.epoch = epoch;
        Invalidation { epoch, patterns: alloc::vec![KeyPattern::All] }
    }

    pub fn execute(&mut self, cmd: &AdminCommand) -> Result<Invalidation, PolicyError> {
        match cmd {
            AdminCommand::Transition(t) => self.apply(t),
            AdminCommand::Install(s) => Ok(self.install(s.clone())),
        }
    }

    /// Checks every structural invariant. States built through the builder,
    /// transitions or the decoder always pass; used by tests and decoders.
    pub fn validate(&self) -> Result<(), PolicyError> {
        for (u, rs) in &self.user_roles {
            self.require_user(*u)?;
            for r in rs {
                self.require_role(r)?;
            }
        }
        for (kind, by_op) in &self.permission_roles {
            for (op, rs) in by_op {
                self.require_permission(&Permission::new(op.clone(), *kind))?;
                for r in rs {
                    self.require_role(r)?;
                }
            }
        }
        for p in &self.permissions {
            if !self.operations.contains_key(&p.op) {
                return Err(PolicyError::UnknownReferent(alloc::format!("operation {}", p.op)));
            }
        }
        for (u, active) in &self.sessions {
            let assigned = self.user_roles.get(u);
            if !active.iter().all(|r| assigned.is_some_and(|a| a.contains(r))) {
                return Err(PolicyError::InvariantViolation("activated role not assigned"));
            }
        }
        if self.users.iter().any(|u| self.retired.contains(u) || u.kind() != EntityKind::User) {
            return Err(PolicyError::InvariantViolation("invalid user set"));
        }
        if self.operations.values().any(|s| s.arity == 0) {
            return Err(PolicyError::InvariantViolation("operations need at least the subject"));
        }
        if self.operations.values().any(|s| s.context) && self.risk.is_none() {
            return Err(PolicyError::InvariantViolation("context operations need a risk policy"));
        }
        Ok(())
    }

    // Raw access for the persistence decoder; the result is validated.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        operations: BTreeMap<String, OperationSpec>,
        users: BTreeSet<EntityId>,
        retired: BTreeSet<EntityId>,
        roles: BTreeSet<Role>,
        permissions: BTreeSet<Permission>,
        user_roles: Vec<(EntityId, Role)>,
        permission_roles: Vec<(Permission, Role)>,
        sessions: Vec<(EntityId, Role)>,
        risk: Option<RiskPolicy>,
        epoch: u64,
    ) -> Result<Self, PolicyError> {
        let mut state =
            PolicyState { operations, users, retired, roles, permissions, risk, epoch, ..PolicyState::default() };
        for (u, r) in user_roles {
            state.user_roles.entry(u).or_default().insert(r);
        }
        for (p, r) in permission_roles {
            state.permission_roles.entry(p.kind).or_default().entry(p.op).or_default().insert(r);
        }
        for (u, r) in sessions {
            state.sessions.entry(u).or_default().insert(r);
        }
        state.validate()?;
        Ok(state)
    }
}

fn remove_from<K: Ord + Borrow<Q>, Q: Ord + ?Sized, R: Ord>(map: &mut BTreeMap<K, BTreeSet<R>>, key: &Q, item: &R) {
    if let Some(set) = map.get_mut(key) {
        set.remove(item);
        if set.is_empty() {
            map.remove(key);
        }
    }
}

/// Assembles an initial policy state (epoch 0).
#[derive(Default, Debug, Clone)]
pub struct PolicyBuilder {
    operations: BTreeMap<String, OperationSpec>,
    users: BTreeSet<EntityId>,
    roles: BTreeSet<Role>,
    permissions: BTreeSet<Permission>,
    user_roles: Vec<(EntityId, Role)>,
    permission_roles: Vec<(Permission, Role)>,
    sessions: Vec<(EntityId, Role)>,
    risk: Option<RiskPolicy>,
}

impl PolicyBuilder {
    pub fn operation(mut self, name: &str, arity: u8) -> Self {
        self.operations.insert(name.into(), OperationSpec { arity, context: false });
        self
    }

    pub fn context_operation(mut self, name: &str, arity: u8) -> Self {
        self.operations.insert(name.into(), OperationSpec { arity, context: true });
        self
    }

    pub fn role(mut self, name: &str) -> Self {
        self.roles.insert(Role::new(name));
        self
    }

    pub fn permission(mut self, op: &str, kind: EntityKind) -> Self {
        self.permissions.insert(Permission::new(op, kind));
        self
    }

    pub fn user(mut self, user: EntityId) -> Self {
        self.users.insert(user);
        self
    }

    pub fn assign(mut self, user: EntityId, role: &str) -> Self {
        self.user_roles.push((user, Role::new(role)));
        self
    }

    pub fn grant(mut self, op: &str, kind: EntityKind, role: &str) -> Self {
        self.permission_roles.push((Permission::new(op, kind), Role::new(role)));
        self
    }

    pub fn activate(mut self, user: EntityId, role: &str) -> Self {
        self.sessions.push((user, Role::new(role)));
        self
    }

    pub fn risk(mut self, risk: RiskPolicy) -> Self {
        self.risk = Some(risk);
        self
    }

    pub fn build(self) -> Result<PolicyState, PolicyError> {
        if self.operations.contains_key("") {
            return Err(PolicyError::InvariantViolation("empty operation name"));
        }
        PolicyState::from_parts(
            self.operations,
            self.users,
            BTreeSet::new(),
            self.roles,
            self.permissions,
            self.user_roles,
            self.permission_roles,
            self.sessions,
            self.risk,
            0,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alice() -> EntityId {
        EntityId::new(EntityKind::User, 1)
    }

    fn epr_bob() -> EntityId {
        EntityId::new(EntityKind::Patient, 7)
    }

    fn base() -> PolicyBuilder {
        PolicyState::builder()
            .operation("append", 2)
            .role("physician")
            .role("nurse")
            .permission("append", EntityKind::Patient)
            .user(alice())
            .assign(alice(), "physician")
            .grant("append", EntityKind::Patient, "physician")
    }

    #[test]
    fn physician_may_append_checkup() {
        let state = base().activate(alice(), "physician").build().unwrap();
        let op = OperationId::new("append", 2);
        assert_eq!(state.evaluate(&[alice(), epr_bob()], &op), Ok(true));
    }

    #[test]
    fn empty_session_authorizes_nothing() {
        let state = base().build().unwrap();
        let op = OperationId::new("append", 2);
        assert_eq!(state.evaluate(&[alice(), epr_bob()], &op), Ok(false));
    }

    #[test]
    fn request_errors() {
        let state = base().build().unwrap();
        let carol = EntityId::new(EntityKind::User, 3);
        let op = OperationId::new("append", 2);
        assert_eq!(state.evaluate(&[carol, epr_bob()], &op), Err(PolicyError::UnknownEntity(carol)));
        assert!(matches!(state.evaluate(&[alice()], &op), Err(PolicyError::ArityMismatch { .. })));
        assert!(matches!(
            state.evaluate(&[alice(), epr_bob()], &OperationId::new("append", 3)),
            Err(PolicyError::ArityMismatch { .. })
        ));
        assert!(matches!(
            state.evaluate(&[alice(), epr_bob()], &OperationId::new("read", 2)),
            Err(PolicyError::UnknownOperation(_))
        ));
    }

    #[test]
    fn activating_unassigned_role_fails_and_keeps_epoch() {
        let mut state = base().build().unwrap();
        let before = state.clone();
        let err = state.apply(&TransitionCommand::ActivateRole { user: alice(), role: Role::new("nurse") });
        assert!(matches!(err, Err(PolicyError::InvariantViolation(_))));
        assert_eq!(state, before);
    }

    #[test]
    fn revoke_role_invalidates_subject() {
        let mut state = base().activate(alice(), "physician").build().unwrap();
        let inv = state.apply(&TransitionCommand::RevokeRole { user: alice(), role: Role::new("physician") }).unwrap();
        assert_eq!(inv.epoch, 1);
        assert!(inv.covers(alice()));
        assert_eq!(state.active_roles(alice()).count(), 0);
        assert_eq!(state.evaluate(&[alice(), epr_bob()], &OperationId::new("append", 2)), Ok(false));
    }

    #[test]
    fn add_user_bumps_epoch_only() {
        let mut state = base().activate(alice(), "physician").build().unwrap();
        let carol = EntityId::new(EntityKind::User, 3);
        let inv = state.apply(&TransitionCommand::AddUser(carol)).unwrap();
        assert_eq!(inv.epoch, 1);
        assert!(inv.patterns.is_empty());
        assert_eq!(state.evaluate(&[alice(), epr_bob()], &OperationId::new("append", 2)), Ok(true));
    }

    #[test]
    fn removed_user_cannot_be_readded() {
        let mut state = base().build().unwrap();
        state.apply(&TransitionCommand::RemoveUser(alice())).unwrap();
        assert!(state.apply(&TransitionCommand::AddUser(alice())).is_err());
        assert_eq!(state.epoch(), 1);
    }

    #[test]
    fn grant_invalidates_active_holders_only() {
        let bob = EntityId::new(EntityKind::User, 2);
        let mut state = base()
            .permission("append", EntityKind::Person)
            .user(bob)
            .assign(bob, "nurse")
            .activate(alice(), "physician")
            .build()
            .unwrap();
        let inv = state
            .apply(&TransitionCommand::GrantPermission {
                permission: Permission::new("append", EntityKind::Person),
                role: Role::new("physician"),
            })
            .unwrap();
        assert_eq!(inv.patterns, alloc::vec![KeyPattern::Subject(alice())]);
    }

    #[test]
    fn install_keeps_epoch_monotone() {
        let mut state = base().build().unwrap();
        state.apply(&TransitionCommand::AddUser(EntityId::new(EntityKind::User, 9))).unwrap();
        let inv = state.install(base().build().unwrap());
        assert_eq!(inv.epoch, 2);
        assert_eq!(inv.patterns, alloc::vec![KeyPattern::All]);
        assert_eq!(state.epoch(), 2);
    }

    #[test]
    fn builder_rejects_dangling_relations() {
        let r = PolicyState::builder().user(alice()).assign(alice(), "ghost").build();
        assert!(matches!(r, Err(PolicyError::UnknownReferent(_))));
        let r = base().activate(alice(), "nurse").build();
        assert!(matches!(r, Err(PolicyError::InvariantViolation(_))));
    }
}
