//! Command line front end, HTTP ingestion server and client for impact
//! tracking.

pub mod client;
pub mod commands;
pub mod server;
