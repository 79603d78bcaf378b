//! Stores, message bus, scheduler and job runner of castorette.

pub mod api;
pub mod bus;
pub mod context;
pub mod journal;
pub mod models;
pub mod pipeline;
pub mod platform;
pub mod runner;
pub mod scheduler;
pub mod synthetic;
pub mod time;
pub mod timeseries;
