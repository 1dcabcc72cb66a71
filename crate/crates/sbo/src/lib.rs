//! Session service and experiment harness around `sbo-core`.

pub mod api;
pub mod harness;
pub mod session;
pub mod store;
