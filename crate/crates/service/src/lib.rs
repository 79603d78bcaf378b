//! HTTP gateway, CSV ingestion and configuration for the castorette
//! platform. Every request is answered by the bus handlers of
//! [`castorette_core::platform::Platform`].

pub mod config;
pub mod http;
pub mod ingest;
