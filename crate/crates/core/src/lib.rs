pub mod client;
pub mod crypto;
pub mod ids;
pub mod policy;
pub mod document;
pub mod operator;
pub mod query;
pub mod enclave;
pub mod host;
pub mod wire;
