pub mod agents;
pub mod fixture;
pub mod harness;
pub mod policies;
pub mod protocol;
pub mod sandbox;
pub mod schema;
mod serde_secs;
pub mod workspace;
