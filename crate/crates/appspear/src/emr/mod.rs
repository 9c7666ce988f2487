//! Miniature electronic medical record application built on the framework.

pub mod dataset;
pub mod records;
pub mod services;

pub use dataset::{generate, load_dataset, SyntheticPatient};
pub use records::{Patient, Person, UserAccount};
pub use services::{EmrServices, PatientService, PersonService, UserService};

/// Default policy of the demo: physicians, nurses and administrators.
pub const EMR_POLICY: &str = include_str!("../../fixtures/emr-policy.txt");

/// Always-allow policy with the single unary operation `noop`, user `bench`.
pub const BASELINE_POLICY: &str = include_str!("../../fixtures/baseline-policy.txt");
