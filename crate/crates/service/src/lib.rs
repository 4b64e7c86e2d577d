//! Command line and HTTP service for the ReF-Net toolkit.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod rle;
pub mod store;
