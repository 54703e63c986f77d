pub mod config;
pub mod corpus;
pub mod evaluation;
pub mod gateway;
pub mod imaging;
pub mod orchestrator;
pub mod priors;
pub mod rewards;
pub mod trajectory;
