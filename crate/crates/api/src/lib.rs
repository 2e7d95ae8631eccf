//! HTTP front end for interactive training sessions: per-epoch metrics,
//! influence matrices, ceiling diagnostics and reweighting jobs.

mod error;
mod routes;
mod state;

use std::net::SocketAddr;

pub use error::{ApiError, ApiResult};
pub use routes::{
    router, CommitResponse, EpochEntry, InfluenceResponse, MetricsHistory, SessionSummary, TrainResponse,
};
pub use state::{AppState, JobKind, JobState, JobStatus};

/// Serves the API on `addr` until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
