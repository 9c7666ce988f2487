use appspear_core::wire::{Decode, Decoder, Encode, Encoder};
use appspear_core::{EntityId, WireError};

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Person {
    pub name: String,
    pub address: String,
}

/// A patient record; `person` is the person it describes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patient {
    pub person: EntityId,
    pub diagnosis: String,
}

/// A system user as known to the user service.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserAccount {
    pub eid: EntityId,
    pub username: String,
    /// Roles assigned at bootstrap.
    pub roles: Vec<String>,
}

impl Encode for Person {
    fn encode(&self, e: &mut Encoder) {
        e.str(&self.name).str(&self.address);
    }
}

impl Decode for Person {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Person { name: d.string()?, address: d.string()? })
    }
}

impl Encode for Patient {
    fn encode(&self, e: &mut Encoder) {
        e.entity(self.person).str(&self.diagnosis);
    }
}

impl Decode for Patient {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Patient { person: d.entity()?, diagnosis: d.string()? })
    }
}
