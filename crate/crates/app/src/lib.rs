pub mod commands;
pub mod mock_tool;
pub mod pipeline;
pub mod runs;
pub mod service;
pub mod settings;
