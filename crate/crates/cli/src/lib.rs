pub mod commands;
pub mod config;
pub mod experiments;
pub mod features;
pub mod probes;
pub mod report;
pub mod verify;
