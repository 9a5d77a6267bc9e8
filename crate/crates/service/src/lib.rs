//! Live annotation sessions over HTTP+JSON.
//!
//! A session holds support images (which receive clicks) and query images
//! (which never do). Every click triggers one forward pass over all images
//! of the session. Mutations carry the revision the client last saw and are
//! rejected with 409 when it is stale.

pub mod api;
pub mod error;
pub mod journal;
pub mod session;

pub use api::{router, AppState, CreateSession, ImageSpec, ServiceConfig};
pub use error::{ServiceError, ServiceResult};
pub use session::{ClickRequest, PromoteRequest, SessionView};

/// Binds and serves until the process is stopped.
pub async fn serve(state: std::sync::Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, version = state.checkpoint_version(), "serving");
    axum::serve(listener, router(state)).await
}
