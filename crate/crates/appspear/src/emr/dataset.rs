//! Deterministic synthetic patient population.

use appspear_core::EntityId;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::records::Person;
use super::services::EmrServices;
use crate::tom::TomError;

const FIRST: &[&str] = &[
    "Ada", "Bela", "Chen", "Dalia", "Emil", "Farah", "Goran", "Hana", "Ilse", "Jonas", "Kemal", "Lena", "Malik",
    "Nora", "Oskar", "Priya", "Quentin", "Rosa", "Sven", "Tariq", "Uma", "Viktor", "Wen", "Yara", "Zoe",
];
const LAST: &[&str] = &[
    "Albers", "Brandt", "Costa", "Dietrich", "Eriksen", "Fischer", "Garcia", "Hoffmann", "Ivanova", "Jansen", "Keller",
    "Lange", "Moreau", "Nowak", "Okafor", "Peters", "Richter", "Schmidt", "Tanaka", "Vogel", "Weber",
];
const STREETS: &[&str] = &[
    "Lindenweg",
    "Hauptstrasse",
    "Bahnhofstrasse",
    "Schillerplatz",
    "Am Markt",
    "Gartenstrasse",
    "Mozartring",
    "Bergstrasse",
    "Uferweg",
    "Kirchgasse",
];
const CITIES: &[&str] = &["Hamburg", "Leipzig", "Bremen", "Kassel", "Ulm", "Jena", "Trier", "Passau"];
const DIAGNOSES: &[&str] = &[
    "hypertension",
    "type 2 diabetes",
    "asthma",
    "migraine",
    "influenza",
    "fractured radius",
    "anemia",
    "hypothyroidism",
    "gastritis",
    "bronchitis",
    "atrial fibrillation",
    "osteoarthritis",
    "no findings",
];

/// One generated patient: the person and the diagnosis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticPatient {
    pub person: Person,
    pub diagnosis: String,
}

pub fn generate(seed: u64, n: usize) -> Vec<SyntheticPatient> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let pick = |rng: &mut ChaCha8Rng, list: &[&str]| (*list.choose(rng).unwrap()).to_owned();
            let name = format!("{} {}", pick(&mut rng, FIRST), pick(&mut rng, LAST));
            let address = format!(
                "{} {}, {:05} {}",
                pick(&mut rng, STREETS),
                rng.gen_range(1..200),
                rng.gen_range(1000..99999),
                pick(&mut rng, CITIES)
            );
            SyntheticPatient { person: Person { name, address }, diagnosis: pick(&mut rng, DIAGNOSES) }
        })
        .collect()
}

/// Creates the generated population through the services, acting as
/// `subject`. Returns `(person, patient)` ids in generation order.
pub fn load_dataset(
    services: &EmrServices,
    subject: EntityId,
    seed: u64,
    n: usize,
) -> Result<Vec<(EntityId, EntityId)>, TomError> {
    generate(seed, n)
        .into_iter()
        .map(|p| {
            let person = services.persons.create_person(subject, &p.person.name, &p.person.address)?;
            let patient = services.patients.create_patient(subject, person, &p.diagnosis)?;
            Ok((person, patient))
        })
        .collect()
}
