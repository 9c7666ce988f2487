//! Line-oriented policy bootstrap files.
//!
//! One directive per line, whitespace separated; `#` starts a comment.
//!
//! ```text
//! operation <name> <arity> [context]   declare an operation
//! role <name>                          declare a role
//! permission <op> <kind>               declare the permission (op, kind)
//! user <name>                          declare a user; ids are assigned 1, 2, ... in order
//! assign <user> <role>                 user-role assignment
//! grant <op> <kind> <role>             permission-role assignment
//! activate <user> <role>               role activated in the user's session
//! risk-threshold <number>              risk bound for context operations
//! risk-weight <variable> <number>      weight of a context variable
//! ```
//!
//! Kinds are `user`, `person`, `patient`, `emr-document` and `os-object`.
//! Declarations must precede their use.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::context::RiskPolicy;
use crate::entity::{EntityId, EntityKind};
use crate::policy::{PolicyError, PolicyState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BootstrapError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// A parsed bootstrap file: the initial state plus the user directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Bootstrap {
    pub state: PolicyState,
    /// `(username, id)` in declaration order.
    pub users: Vec<(String, EntityId)>,
}

impl Bootstrap {
    pub fn user(&self, name: &str) -> Option<EntityId> {
        self.users.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }
}

pub fn parse_bootstrap(text: &str) -> Result<Bootstrap, BootstrapError> {
    let mut builder = PolicyState::builder();
    let mut users: Vec<(String, EntityId)> = Vec::new();
    let mut by_name: BTreeMap<String, EntityId> = BTreeMap::new();
    let mut declared_ops: BTreeMap<String, ()> = BTreeMap::new();
    let mut weights: Vec<(String, f64)> = Vec::new();
    let mut threshold: Option<f64> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |message: &str| BootstrapError::Syntax { line, message: message.to_string() };
        let content = raw.split('#').next().unwrap_or("");
        let words: Vec<&str> = content.split_whitespace().collect();
        let Some((&directive, args)) = words.split_first() else {
            continue;
        };
        let kind = |s: &str| EntityKind::from_name(s).ok_or_else(|| err("unknown entity kind"));
        let user = |s: &str| by_name.get(s).copied().ok_or_else(|| err("undeclared user"));
        let number =
            |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err("expected a finite number"));
        match (directive, args) {
            ("operation", [name, arity]) | ("operation", [name, arity, "context"]) => {
                let arity: u8 = arity.parse().map_err(|_| err("arity must be an integer 1..=255"))?;
                if arity == 0 {
                    return Err(err("arity must be an integer 1..=255"));
                }
                if declared_ops.insert(name.to_string(), ()).is_some() {
                    return Err(err("duplicate operation"));
                }
                builder = if args.len() == 3 {
                    builder.context_operation(name, arity)
                } else {
                    builder.operation(name, arity)
                };
            }
            ("role", [name]) => builder = builder.role(name),
            ("permission", [op, k]) => builder = builder.permission(op, kind(k)?),
            ("user", [name]) => {
                if by_name.contains_key(*name) {
                    return Err(err("duplicate user"));
                }
                let id = EntityId::new(EntityKind::User, users.len() as u64 + 1);
                by_name.insert(name.to_string(), id);
                users.push((name.to_string(), id));
                builder = builder.user(id);
            }
            ("assign", [u, role]) => builder = builder.assign(user(u)?, role),
            ("grant", [op, k, role]) => builder = builder.grant(op, kind(k)?, role),
            ("activate", [u, role]) => builder = builder.activate(user(u)?, role),
            ("risk-threshold", [v]) => threshold = Some(number(v)?),
            ("risk-weight", [name, v]) => weights.push((name.to_string(), number(v)?)),
            _ => return Err(err("unrecognized directive or wrong argument count")),
        }
    }

    if threshold.is_some() || !weights.is_empty() {
        builder = builder.risk(RiskPolicy::new(weights, threshold.unwrap_or(0.0))?);
    }
    Ok(Bootstrap { state: builder.build()?, users })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entity::OperationId;

    const SAMPLE: &str = "
        # demo
        operation append 2
        operation read 2 context
        role physician
        permission append patient
        permission read patient
        user alice
        user bob      # no roles
        assign alice physician
        grant append patient physician
        grant read patient physician
        activate alice physician
        risk-threshold 4
        risk-weight time 1
    ";

    #[test]
    fn parses_sample() {
        let b = parse_bootstrap(SAMPLE).unwrap();
        let alice = b.user("alice").unwrap();
        assert_eq!(alice, EntityId::new(EntityKind::User, 1));
        assert_eq!(b.user("bob"), Some(EntityId::new(EntityKind::User, 2)));
        let target = EntityId::new(EntityKind::Patient, 1);
        assert_eq!(b.state.evaluate(&[alice, target], &OperationId::new("append", 2)), Ok(true));
        assert!(b.state.operation("read").unwrap().context);
        assert_eq!(b.state.risk().unwrap().threshold, 4.0);
    }

    #[test]
    fn reports_line_numbers() {
        let err = parse_bootstrap("role a\nassign nobody a\n").unwrap_err();
        assert_eq!(err, BootstrapError::Syntax { line: 2, message: "undeclared user".into() });
        let err = parse_bootstrap("operation x 0").unwrap_err();
        assert!(matches!(err, BootstrapError::Syntax { line: 1, .. }));
        assert!(parse_bootstrap("permission read spaceship").is_err());
    }

    #[test]
    fn context_operation_without_risk_is_rejected() {
        assert!(matches!(
            parse_bootstrap("operation read 2 context"),
            Err(BootstrapError::Policy(PolicyError::InvariantViolation(_)))
        ));
    }
}
