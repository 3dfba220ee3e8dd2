pub mod agent;
pub mod client;
pub mod dsl;
pub mod engine;
pub mod persistence;
pub mod queue;
pub mod trainer;
pub mod value;
pub mod wire;

pub use agent::{Agent, AgentConfig, AgentError, Controller, Subscriber};
pub use value::{Record, Value};
