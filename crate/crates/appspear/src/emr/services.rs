//! User, person and patient services.
//!
//! Person and patient services are thin layers over their object managers;
//! every object access goes through mediation with the entity vector
//! ⟨session user, object⟩. The user service changes sessions through the
//! policy server's administration channel.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use appspear_core::{AdminCommand, Bootstrap, EntityId, EntityKind, Role, Status, TransitionCommand};

use super::records::{Patient, Person, UserAccount};
use crate::client::PolicyClient;
use crate::kv::KvStore;
use crate::tom::{ObjectManager, TomError};

pub struct UserService {
    policy: Arc<PolicyClient>,
    accounts: BTreeMap<String, UserAccount>,
    /// Logged-in users and the roles they activated through this service.
    sessions: Mutex<BTreeMap<EntityId, BTreeSet<String>>>,
}

impl UserService {
    pub fn new(policy: Arc<PolicyClient>, bootstrap: &Bootstrap) -> Self {
        let accounts = bootstrap
            .users
            .iter()
            .map(|(name, eid)| {
                let roles = bootstrap.state.assigned_roles(*eid).map(|r| r.as_str().to_owned()).collect();
                (name.clone(), UserAccount { eid: *eid, username: name.clone(), roles })
            })
            .collect();
        UserService { policy, accounts, sessions: Mutex::new(BTreeMap::new()) }
    }

    pub fn account(&self, username: &str) -> Option<&UserAccount> {
        self.accounts.get(username)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &UserAccount> {
        self.accounts.values()
    }

    /// Looks the user up by name; authentication itself is out of scope.
    pub fn login(&self, username: &str) -> Result<EntityId, TomError> {
        let acct = self.accounts.get(username).ok_or_else(|| TomError::UnknownUser(username.to_owned()))?;
        self.sessions.lock().unwrap().entry(acct.eid).or_default();
        Ok(acct.eid)
    }

    fn require_session(&self, user: EntityId) -> Result<(), TomError> {
        if self.sessions.lock().unwrap().contains_key(&user) {
            Ok(())
        } else {
            Err(TomError::NotLoggedIn(user))
        }
    }

    fn transition(&self, cmd: TransitionCommand, role: &str) -> Result<(), TomError> {
        let ack =
            self.policy.admin(AdminCommand::Transition(cmd)).map_err(|e| TomError::TransportFailure(e.to_string()))?;
        match ack.status {
            Status::Ok => Ok(()),
            Status::InvariantViolation | Status::UnknownReferent => Err(TomError::RoleNotAssigned(role.to_owned())),
            s => Err(TomError::Policy(s)),
        }
    }

    pub fn activate_role(&self, user: EntityId, role: &str) -> Result<(), TomError> {
        self.require_session(user)?;
        self.transition(TransitionCommand::ActivateRole { user, role: Role::new(role) }, role)?;
        if let Some(s) = self.sessions.lock().unwrap().get_mut(&user) {
            s.insert(role.to_owned());
        }
        Ok(())
    }

    pub fn deactivate_role(&self, user: EntityId, role: &str) -> Result<(), TomError> {
        self.require_session(user)?;
        self.transition(TransitionCommand::DeactivateRole { user, role: Role::new(role) }, role)?;
        if let Some(s) = self.sessions.lock().unwrap().get_mut(&user) {
            s.remove(role);
        }
        Ok(())
    }

    /// Ends the session, deactivating every role the user may hold active.
    pub fn logout(&self, user: EntityId) -> Result<(), TomError> {
        let activated = self.sessions.lock().unwrap().remove(&user).ok_or(TomError::NotLoggedIn(user))?;
        let assigned = self.accounts.values().find(|a| a.eid == user).map(|a| a.roles.clone()).unwrap_or_default();
        let roles: BTreeSet<String> = activated.into_iter().chain(assigned).collect();
        for role in roles {
            match self.transition(TransitionCommand::DeactivateRole { user, role: Role::new(&role) }, &role) {
                Ok(()) | Err(TomError::RoleNotAssigned(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

/// person → patients referring to it.
#[derive(Default)]
pub struct Links {
    by_person: Mutex<BTreeMap<EntityId, BTreeSet<EntityId>>>,
}

impl Links {
    fn add(&self, person: EntityId, patient: EntityId) {
        self.by_person.lock().unwrap().entry(person).or_default().insert(patient);
    }

    fn remove(&self, person: EntityId, patient: EntityId) {
        let mut map = self.by_person.lock().unwrap();
        if let Some(set) = map.get_mut(&person) {
            set.remove(&patient);
            if set.is_empty() {
                map.remove(&person);
            }
        }
    }

    pub fn count(&self, person: EntityId) -> usize {
        self.by_person.lock().unwrap().get(&person).map_or(0, BTreeSet::len)
    }
}

pub struct PersonService {
    persons: Arc<ObjectManager<Person>>,
    links: Arc<Links>,
}

impl PersonService {
    pub fn create_person(&self, subject: EntityId, name: &str, address: &str) -> Result<EntityId, TomError> {
        self.persons.create(subject, Person { name: name.to_owned(), address: address.to_owned() })
    }

    /// Fails with `DanglingLink` while a patient record refers to the person.
    pub fn delete_person(&self, subject: EntityId, person: EntityId) -> Result<(), TomError> {
        let op = &self.persons.ops().destroy;
        self.persons.mediate(subject, op, &[person], |t| {
            t.get(person)?;
            match self.links.count(person) {
                0 => t.remove(person).map(drop),
                n => Err(TomError::DanglingLink(person, n)),
            }
        })
    }

    pub fn get_person(&self, subject: EntityId, person: EntityId) -> Result<Person, TomError> {
        Ok(self.persons.read(subject, person)?.body().clone())
    }

    pub fn get_address(&self, subject: EntityId, person: EntityId) -> Result<String, TomError> {
        let op = &self.persons.ops().read;
        self.persons.mediate(subject, op, &[person], |t| Ok(t.get(person)?.body().address.clone()))
    }

    pub fn set_address(&self, subject: EntityId, person: EntityId, address: &str) -> Result<u64, TomError> {
        let op = &self.persons.ops().write;
        self.persons.mediate(subject, op, &[person], |t| t.update_with(person, |p| p.address = address.to_owned()))
    }
}

pub struct PatientService {
    patients: ObjectManager<Patient>,
    persons: Arc<ObjectManager<Person>>,
    links: Arc<Links>,
}

impl PatientService {
    /// The person must exist and stays undeletable while the patient does.
    pub fn create_patient(&self, subject: EntityId, person: EntityId, diagnosis: &str) -> Result<EntityId, TomError> {
        let op = &self.patients.ops().create;
        self.patients.mediate(subject, op, &[EntityId::class(EntityKind::Patient)], |t| {
            // The person table stays locked until the link is recorded, so
            // the person cannot be deleted in between.
            self.persons.inspect(|persons| {
                if !persons.contains(person) {
                    return Err(TomError::UnknownEntity(person));
                }
                let eid = t.insert(Patient { person, diagnosis: diagnosis.to_owned() })?;
                self.links.add(person, eid);
                Ok(eid)
            })
        })
    }

    pub fn delete_patient(&self, subject: EntityId, patient: EntityId) -> Result<(), TomError> {
        let op = &self.patients.ops().destroy;
        self.patients.mediate(subject, op, &[patient], |t| {
            let removed = t.remove(patient)?;
            self.links.remove(removed.body().person, patient);
            Ok(())
        })
    }

    pub fn get_patient(&self, subject: EntityId, patient: EntityId) -> Result<Patient, TomError> {
        Ok(self.patients.read(subject, patient)?.body().clone())
    }

    pub fn get_diagnosis(&self, subject: EntityId, patient: EntityId) -> Result<String, TomError> {
        let op = &self.patients.ops().read;
        self.patients.mediate(subject, op, &[patient], |t| Ok(t.get(patient)?.body().diagnosis.clone()))
    }

    pub fn set_diagnosis(&self, subject: EntityId, patient: EntityId, diagnosis: &str) -> Result<u64, TomError> {
        let op = &self.patients.ops().write;
        self.patients
            .mediate(subject, op, &[patient], |t| t.update_with(patient, |p| p.diagnosis = diagnosis.to_owned()))
    }
}

/// The three services over one object store.
pub struct EmrServices {
    pub users: UserService,
    pub persons: PersonService,
    pub patients: PatientService,
    links: Arc<Links>,
}

impl EmrServices {
    pub fn open(
        policy: Arc<PolicyClient>,
        bootstrap: &Bootstrap,
        kv: Option<Arc<Mutex<KvStore>>>,
    ) -> Result<Self, TomError> {
        let persons = Arc::new(ObjectManager::open(EntityKind::Person, policy.clone(), kv.clone())?);
        let patients: ObjectManager<Patient> = ObjectManager::open(EntityKind::Patient, policy.clone(), kv)?;
        let links = Arc::new(Links::default());
        patients.inspect(|t| {
            for p in t.iter() {
                links.add(p.body().person, p.eid());
            }
        });
        Ok(EmrServices {
            users: UserService::new(policy, bootstrap),
            persons: PersonService { persons: persons.clone(), links: links.clone() },
            patients: PatientService { patients, persons, links: links.clone() },
            links,
        })
    }

    pub fn links(&self) -> &Links {
        &self.links
    }

    /// Number of stored persons and patients, for reporting.
    pub fn counts(&self) -> (usize, usize) {
        (self.persons.persons.inspect(|t| t.len()), self.patients.patients.inspect(|t| t.len()))
    }
}
