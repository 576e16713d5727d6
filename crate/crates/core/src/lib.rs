pub mod config;
pub mod coordinator;
pub mod domain;
pub mod engine;
pub mod findings;
pub mod fusion;
pub mod geometry;
pub mod growth;
pub mod json;
pub mod protocol;
pub mod imageio;
pub mod metrics;
pub mod mocks;
pub mod summarizer;
pub mod video;
