pub mod agent;
pub mod clock;
pub mod model;
pub mod providers;
pub mod results;
pub mod scheduler;
pub mod statemachine;
pub mod provisioning;
pub mod store;
pub mod orchestrator;
pub mod gateway;
pub mod client;
pub mod cli;
