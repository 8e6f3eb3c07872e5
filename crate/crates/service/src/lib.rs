//! HTTP triage service around the `bayescan` classifiers.
//!
//! Frames arrive per stream, are windowed and scored; windows the triage
//! policy flags join a queue that engineers label. Retraining on base data
//! plus labels yields a new model version, swapped in without downtime.
//!
//! - [`config`]: TOML file plus `BAYESCAN_*` environment overrides
//! - [`store`]: event-sourced ledger with snapshots
//! - [`service`]: ingestion, queue, labeling, retrain jobs
//! - [`api`]: axum router

pub mod api;
pub mod config;
pub mod service;
pub mod store;

pub use api::router;
pub use config::ServiceConfig;
pub use service::{Service, ServiceError};

/// Bind `cfg.bind` and serve until the process ends.
pub async fn serve(svc: std::sync::Arc<Service>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(&svc.config().bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(svc)).await
}
