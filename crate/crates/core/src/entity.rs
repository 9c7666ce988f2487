use alloc::string::String;
use core::fmt;

/// Kinds of policy entities known to the framework.
///
/// The set is closed: a TOM is registered for one of these kinds and every
/// [`EntityId`] carries its kind in the top byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum EntityKind {
    User = 1,
    Person = 2,
    Patient = 3,
    EmrDocument = 4,
    OsObject = 5,
}

impl EntityKind {
    pub const ALL: [EntityKind; 5] =
        [EntityKind::User, EntityKind::Person, EntityKind::Patient, EntityKind::EmrDocument, EntityKind::OsObject];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(EntityKind::User),
            2 => Some(EntityKind::Person),
            3 => Some(EntityKind::Patient),
            4 => Some(EntityKind::EmrDocument),
            5 => Some(EntityKind::OsObject),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EntityKind::User => "user",
            EntityKind::Person => "person",
            EntityKind::Patient => "patient",
            EntityKind::EmrDocument => "emr-document",
            EntityKind::OsObject => "os-object",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        EntityKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const SERIAL_BITS: u32 = 56;
const SERIAL_MASK: u64 = (1 << SERIAL_BITS) - 1;

/// Opaque 64-bit entity identifier, comparable to a security identifier.
///
/// The top byte is the kind tag and the low 56 bits a per-kind serial, so
/// the kind of an id can never change. Serial 0 is reserved for the kind's
/// class entity, which stands for "objects of this kind" (used as the target
/// of `create` requests and in cache keys).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(u64);

impl EntityId {
    pub const MAX_SERIAL: u64 = SERIAL_MASK;

    /// Builds an id from kind and serial. Serials wider than 56 bits are
    /// truncated.
    pub fn new(kind: EntityKind, serial: u64) -> Self {
        EntityId(((kind.tag() as u64) << SERIAL_BITS) | (serial & SERIAL_MASK))
    }

    pub fn class(kind: EntityKind) -> Self {
        EntityId::new(kind, 0)
    }

    /// Reinterprets a raw value; fails if the kind tag is unknown.
    pub fn from_raw(raw: u64) -> Option<Self> {
        EntityKind::from_tag((raw >> SERIAL_BITS) as u8).map(|_| EntityId(raw))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn kind(self) -> EntityKind {
        // Constructors only admit valid tags.
        EntityKind::from_tag((self.0 >> SERIAL_BITS) as u8).unwrap_or(EntityKind::OsObject)
    }

    pub fn serial(self) -> u64 {
        self.0 & SERIAL_MASK
    }

    pub fn is_class(self) -> bool {
        self.serial() == 0
    }
}

impl fmt::Debug for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.kind().name(), self.serial())
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A symbolic operation together with the entity-vector length it expects.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OperationId {
    pub name: String,
    pub arity: u8,
}

impl OperationId {
    pub fn new(name: impl Into<String>, arity: u8) -> Self {
        OperationId { name: name.into(), arity }
    }
}

impl fmt::Display for OperationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.name, self.arity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_survives_roundtrip() {
        for kind in EntityKind::ALL {
            let id = EntityId::new(kind, 42);
            assert_eq!(id.kind(), kind);
            assert_eq!(id.serial(), 42);
            assert_eq!(EntityId::from_raw(id.raw()), Some(id));
            assert_eq!(EntityKind::from_name(kind.name()), Some(kind));
        }
    }

    #[test]
    fn raw_with_unknown_tag_is_rejected() {
        assert_eq!(EntityId::from_raw(0), None);
        assert_eq!(EntityId::from_raw(0xff << 56), None);
    }

    #[test]
    fn same_serial_different_kind_differs() {
        assert_ne!(EntityId::new(EntityKind::User, 1), EntityId::new(EntityKind::Patient, 1));
    }
}
