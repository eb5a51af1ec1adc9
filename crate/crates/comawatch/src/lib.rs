//! Simulation harness, central server and HTTP API for bedside vital-sign
//! monitoring.

pub mod harness;
pub mod server;
pub mod http;
