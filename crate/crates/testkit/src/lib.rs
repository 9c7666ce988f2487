//! Reference model and generators shared by the test suites.
//!
//! The model stores every relation as a flat list of tuples and decides by
//! brute-force join. It shares no data structures or code paths with the
//! policy implementation it is used to check.

// `Err(())` marks "the implementation must report some error"; which one
// is not the oracle's business.
#![allow(clippy::result_unit_err)]

use appspear_core::{
    ContextValue, EntityId, EntityKind, OperationId, Permission, PolicyState, RiskPolicy, Role, TransitionCommand,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const OP_POOL: [(&str, u8); 6] =
    [("read", 2), ("write", 2), ("create", 2), ("destroy", 2), ("append", 2), ("ping", 1)];
pub const CONTEXT_VARS: [&str; 3] = ["time", "location", "temperature"];
/// A user serial no generated model ever declares.
pub const UNKNOWN_USER_SERIAL: u64 = 4000;

pub fn user(serial: u64) -> EntityId {
    EntityId::new(EntityKind::User, serial)
}

#[derive(Clone, Debug, Default)]
pub struct RefModel {
    /// `(name, arity, context-classified)`
    pub ops: Vec<(String, u8, bool)>,
    pub users: Vec<EntityId>,
    pub retired: Vec<EntityId>,
    pub roles: Vec<String>,
    pub perms: Vec<(String, EntityKind)>,
    pub ua: Vec<(EntityId, String)>,
    pub pa: Vec<(String, EntityKind, String)>,
    pub sessions: Vec<(EntityId, String)>,
    pub weights: Vec<(String, f64)>,
    pub threshold: f64,
}

impl RefModel {
    fn op(&self, name: &str) -> Option<(u8, bool)> {
        self.ops.iter().find(|(n, _, _)| n == name).map(|(_, a, c)| (*a, *c))
    }

    /// `Err(())` where the implementation must report an error.
    pub fn outcome(&self, entities: &[EntityId], op: &OperationId) -> Result<bool, ()> {
        let (arity, _) = self.op(&op.name).ok_or(())?;
        if op.arity != arity || entities.len() != arity as usize {
            return Err(());
        }
        if entities.iter().any(|e| e.kind() == EntityKind::User && !self.users.contains(e)) {
            return Err(());
        }
        let subject = entities[0];
        let kind = entities.get(1).unwrap_or(&subject).kind();
        let mut allowed = false;
        for (su, sr) in &self.sessions {
            for (uu, ur) in &self.ua {
                for (pop, pkind, pr) in &self.pa {
                    if *su == subject && uu == su && ur == sr && pr == sr && *pop == op.name && *pkind == kind {
                        allowed = true;
                    }
                }
            }
        }
        Ok(allowed)
    }

    pub fn verdict(&self, entities: &[EntityId], op: &OperationId) -> bool {
        self.outcome(entities, op).unwrap_or(false)
    }

    /// Weighted sum of `contexts`; `Err(())` for an uncovered variable.
    pub fn score(&self, contexts: &[(String, f64)]) -> Result<f64, ()> {
        let mut total = 0.0;
        for (name, value) in contexts {
            let (_, w) = self.weights.iter().find(|(n, _)| n == name).ok_or(())?;
            total += w * value;
        }
        Ok(total)
    }

    /// Outcome of the context-aware function.
    pub fn outcome_in_context(
        &self,
        entities: &[EntityId],
        op: &OperationId,
        contexts: &[(String, f64)],
    ) -> Result<bool, ()> {
        let base = self.outcome(entities, op)?;
        let score = self.score(contexts)?;
        Ok(base && score <= self.threshold)
    }

    /// Outcome under whichever function the operation is classified for.
    pub fn decide(&self, entities: &[EntityId], op: &OperationId, contexts: &[(String, f64)]) -> Result<bool, ()> {
        match self.op(&op.name) {
            Some((_, true)) => self.outcome_in_context(entities, op, contexts),
            _ => self.outcome(entities, op),
        }
    }

    /// Applies a transition; returns false (leaving the model unchanged)
    /// where the implementation must reject it.
    pub fn apply(&mut self, cmd: &TransitionCommand) -> bool {
        use TransitionCommand::*;
        let has_user = |m: &RefModel, u: &EntityId| m.users.contains(u);
        let has_role = |m: &RefModel, r: &Role| m.roles.iter().any(|x| x == r.as_str());
        let has_perm = |m: &RefModel, p: &Permission| m.perms.iter().any(|(o, k)| *o == p.op && *k == p.kind);
        match cmd {
            AddUser(u) => {
                if u.kind() != EntityKind::User || u.serial() == 0 || has_user(self, u) || self.retired.contains(u) {
                    return false;
                }
                self.users.push(*u);
            }
            RemoveUser(u) => {
                if !has_user(self, u) {
                    return false;
                }
                self.users.retain(|x| x != u);
                self.ua.retain(|(x, _)| x != u);
                self.sessions.retain(|(x, _)| x != u);
                self.retired.push(*u);
            }
            AssignRole { user, role } => {
                if !has_user(self, user) || !has_role(self, role) {
                    return false;
                }
                let pair = (*user, role.as_str().to_string());
                if !self.ua.contains(&pair) {
                    self.ua.push(pair);
                }
            }
            RevokeRole { user, role } => {
                if !has_user(self, user) || !has_role(self, role) {
                    return false;
                }
                self.ua.retain(|(u, r)| !(u == user && r == role.as_str()));
                self.sessions.retain(|(u, r)| !(u == user && r == role.as_str()));
            }
            ActivateRole { user, role } => {
                if !has_user(self, user) || !has_role(self, role) {
                    return false;
                }
                let pair = (*user, role.as_str().to_string());
                if !self.ua.contains(&pair) {
                    return false;
                }
                if !self.sessions.contains(&pair) {
                    self.sessions.push(pair);
                }
            }
            DeactivateRole { user, role } => {
                if !has_user(self, user) || !has_role(self, role) {
                    return false;
                }
                self.sessions.retain(|(u, r)| !(u == user && r == role.as_str()));
            }
            GrantPermission { permission, role } => {
                if !has_perm(self, permission) || !has_role(self, role) {
                    return false;
                }
                let t = (permission.op.clone(), permission.kind, role.as_str().to_string());
                if !self.pa.contains(&t) {
                    self.pa.push(t);
                }
            }
            RevokePermission { permission, role } => {
                if !has_perm(self, permission) || !has_role(self, role) {
                    return false;
                }
                self.pa.retain(|(o, k, r)| !(*o == permission.op && *k == permission.kind && r == role.as_str()));
            }
        }
        true
    }

    /// Builds the equivalent implementation state. Only valid for models
    /// without retired users, which a fresh state cannot express.
    pub fn to_state(&self) -> PolicyState {
        assert!(self.retired.is_empty(), "retired users cannot be bootstrapped");
        let mut b = PolicyState::builder();
        for (name, arity, context) in &self.ops {
            b = if *context { b.context_operation(name, *arity) } else { b.operation(name, *arity) };
        }
        for r in &self.roles {
            b = b.role(r);
        }
        for (op, kind) in &self.perms {
            b = b.permission(op, *kind);
        }
        for u in &self.users {
            b = b.user(*u);
        }
        for (u, r) in &self.ua {
            b = b.assign(*u, r);
        }
        for (op, kind, r) in &self.pa {
            b = b.grant(op, *kind, r);
        }
        for (u, r) in &self.sessions {
            b = b.activate(*u, r);
        }
        if !self.weights.is_empty() || self.ops.iter().any(|o| o.2) {
            b = b.risk(RiskPolicy::new(self.weights.clone(), self.threshold).unwrap());
        }
        b.build().expect("reference model produced an invalid state")
    }

    /// Bootstrap-file text describing this model. Users are named `u<serial>`
    /// and must have serials 1..=n in order.
    pub fn to_bootstrap(&self) -> String {
        let mut out = String::new();
        for (name, arity, context) in &self.ops {
            out += &format!("operation {name} {arity}{}\n", if *context { " context" } else { "" });
        }
        for r in &self.roles {
            out += &format!("role {r}\n");
        }
        for (op, kind) in &self.perms {
            out += &format!("permission {op} {kind}\n");
        }
        for (i, u) in self.users.iter().enumerate() {
            assert_eq!(u.serial(), i as u64 + 1, "bootstrap users must be numbered densely");
            out += &format!("user u{}\n", u.serial());
        }
        for (u, r) in &self.ua {
            out += &format!("assign u{} {r}\n", u.serial());
        }
        for (op, kind, r) in &self.pa {
            out += &format!("grant {op} {kind} {r}\n");
        }
        for (u, r) in &self.sessions {
            out += &format!("activate u{} {r}\n", u.serial());
        }
        if !self.weights.is_empty() {
            out += &format!("risk-threshold {}\n", self.threshold);
            for (n, w) in &self.weights {
                out += &format!("risk-weight {n} {w}\n");
            }
        }
        out
    }

    /// Every subject worth asking about: live, retired and one unknown user.
    pub fn subjects(&self) -> Vec<EntityId> {
        let mut s: Vec<EntityId> = self.users.iter().chain(&self.retired).copied().collect();
        s.push(user(UNKNOWN_USER_SERIAL));
        s
    }

    /// Exhaustive request table: every subject against one object of each
    /// non-user kind and every known user, for every operation, plus an
    /// arity violation and an unknown operation per subject.
    pub fn all_requests(&self) -> Vec<(Vec<EntityId>, OperationId)> {
        let subjects = self.subjects();
        let mut targets: Vec<EntityId> =
            EntityKind::ALL.iter().filter(|k| **k != EntityKind::User).map(|k| EntityId::new(*k, 1)).collect();
        targets.extend(subjects.iter().copied());
        let mut out = Vec::new();
        for s in &subjects {
            for (name, arity, _) in &self.ops {
                let op = OperationId::new(name.clone(), *arity);
                if *arity == 1 {
                    out.push((vec![*s], op));
                } else {
                    for t in &targets {
                        let mut v = vec![*s, *t];
                        v.resize(*arity as usize, *t);
                        out.push((v, op.clone()));
                    }
                }
            }
            out.push((vec![*s], OperationId::new("read", 1)));
            out.push((vec![*s, targets[0]], OperationId::new("no-such-op", 2)));
        }
        out
    }
}

/// Random state with up to `max_users` users, five roles and ten permissions.
pub fn random_model(rng: &mut TestRng, max_users: usize) -> RefModel {
    let mut m = RefModel {
        ops: OP_POOL.iter().map(|(n, a)| (n.to_string(), *a, false)).collect(),
        roles: (0..5).map(|i| format!("r{i}")).collect(),
        ..RefModel::default()
    };
    let mut all_perms: Vec<(String, EntityKind)> =
        OP_POOL.iter().flat_map(|(n, _)| EntityKind::ALL.iter().map(move |k| (n.to_string(), *k))).collect();
    all_perms.shuffle(rng);
    m.perms = all_perms.into_iter().take(10).collect();
    let n = rng.gen_range(1..=max_users);
    m.users = (1..=n as u64).map(user).collect();
    for u in m.users.clone() {
        for r in m.roles.clone() {
            if rng.gen_bool(0.4) {
                if rng.gen_bool(0.6) {
                    m.sessions.push((u, r.clone()));
                }
                m.ua.push((u, r));
            }
        }
    }
    for (op, kind) in m.perms.clone() {
        for r in m.roles.clone() {
            if rng.gen_bool(0.3) {
                m.pa.push((op.clone(), kind, r));
            }
        }
    }
    m
}

/// Like [`random_model`] but with `read` context-classified and random
/// finite weights and threshold.
pub fn random_context_model(rng: &mut TestRng, max_users: usize) -> RefModel {
    let mut m = random_model(rng, max_users);
    for op in &mut m.ops {
        if op.0 == "read" {
            op.2 = true;
        }
    }
    m.weights = CONTEXT_VARS.iter().map(|v| (v.to_string(), rng.gen_range(-3.0..3.0))).collect();
    m.threshold = rng.gen_range(-5.0..10.0);
    m
}

pub fn random_contexts(rng: &mut TestRng) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for v in CONTEXT_VARS {
        if rng.gen_bool(0.7) {
            out.push((v.to_string(), rng.gen_range(-4.0..4.0)));
        }
    }
    out
}

pub fn to_context_values(contexts: &[(String, f64)], timestamp: u64) -> Vec<ContextValue> {
    contexts.iter().map(|(n, v)| ContextValue::new(n.clone(), *v, timestamp)).collect()
}

/// A random request; mostly well-formed, sometimes referencing unknown
/// users, unknown operations or with the wrong arity.
pub fn random_request(rng: &mut TestRng, m: &RefModel) -> (Vec<EntityId>, OperationId) {
    let pick_user = |rng: &mut TestRng| -> EntityId {
        let pool = m.subjects();
        if rng.gen_bool(0.9) && !m.users.is_empty() {
            *m.users.choose(rng).unwrap()
        } else {
            *pool.choose(rng).unwrap()
        }
    };
    let subject = pick_user(rng);
    let (name, arity, _) = m.ops.choose(rng).unwrap().clone();
    let mut op = OperationId::new(name, arity);
    let mut entities = vec![subject];
    for _ in 1..arity {
        let kind = *EntityKind::ALL.choose(rng).unwrap();
        let t = if kind == EntityKind::User { pick_user(rng) } else { EntityId::new(kind, rng.gen_range(1..50)) };
        entities.push(t);
    }
    match rng.gen_range(0..40) {
        0 => op = OperationId::new("no-such-op", arity),
        1 => entities.push(EntityId::new(EntityKind::Person, 1)),
        2 => op.arity = op.arity.wrapping_add(1),
        _ => {}
    }
    (entities, op)
}

/// A random transition command, usually with valid referents.
pub fn random_transition(rng: &mut TestRng, m: &RefModel) -> TransitionCommand {
    let u = if !m.users.is_empty() && rng.gen_bool(0.9) {
        *m.users.choose(rng).unwrap()
    } else {
        *m.subjects().choose(rng).unwrap()
    };
    let role = Role::new(if rng.gen_bool(0.95) { m.roles.choose(rng).unwrap().clone() } else { "ghost".into() });
    let (op, kind) = m.perms.choose(rng).unwrap().clone();
    let permission = Permission::new(op, kind);
    match rng.gen_range(0..16) {
        0 => {
            let next = m.users.iter().chain(&m.retired).map(|e| e.serial()).max().unwrap_or(0) + 1;
            TransitionCommand::AddUser(user(if rng.gen_bool(0.9) { next } else { u.serial() }))
        }
        1 => TransitionCommand::RemoveUser(u),
        2 | 3 => TransitionCommand::AssignRole { user: u, role },
        4 | 5 => TransitionCommand::RevokeRole { user: u, role },
        6..=8 => TransitionCommand::ActivateRole { user: u, role },
        9..=11 => TransitionCommand::DeactivateRole { user: u, role },
        12 | 13 => TransitionCommand::GrantPermission { permission, role },
        _ => TransitionCommand::RevokePermission { permission, role },
    }
}
