pub mod commands;
pub mod config;
pub mod dataset;
pub mod manifest;
pub mod phantom;
