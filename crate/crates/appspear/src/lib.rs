pub mod app;
pub mod bench;
pub mod client;
pub mod deploy;
pub mod emr;
pub mod host;
pub mod kv;
pub mod store;
pub mod tep;
pub mod tom;
pub mod tps;
pub mod transport;
