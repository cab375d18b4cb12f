//! Session service: dataset and query endpoints over HTTP plus live layout
//! sessions streamed as binary position frames.

pub mod config;
pub mod datasets;
pub mod error;
pub mod http;
pub mod protocol;
pub mod session;

use std::future::Future;
use std::net::SocketAddr;
use std::time::Duration;

use tokio::net::TcpListener;

pub use config::{ServiceConfig, StoreEntry};
pub use error::{ApiError, ErrorBody, ServeError};
pub use http::{router, AppState};
pub use protocol::{ClientMessage, ControlMessage, PositionFrame, ServerMessage, SessionStatus};

fn reap_interval(timeout: Duration) -> Duration {
    (timeout / 4).clamp(Duration::from_millis(100), Duration::from_secs(30))
}

/// Serves `state` on `listener` until `shutdown` resolves, then closes every session.
pub async fn serve_on<F>(listener: TcpListener, state: AppState, shutdown: F) -> Result<(), ServeError>
where
    F: Future<Output = ()> + Send + 'static,
{
    let timeout = state.config().idle_timeout();
    let reaper_state = state.clone();
    let reaper = tokio::spawn(async move {
        let mut tick = tokio::time::interval(reap_interval(timeout));
        loop {
            tick.tick().await;
            for id in reaper_state.sessions().reap_idle(timeout) {
                tracing::info!(session = %id, "closed idle session");
            }
        }
    });
    let app = router(state.clone());
    let result = axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await;
    reaper.abort();
    state.sessions().close_all();
    result.map_err(ServeError::from)
}

/// Binds to the configured address and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServeError> {
    let addr = SocketAddr::new(config.bind, config.port);
    let state = AppState::new(config)?;
    let listener = TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, datasets = state.registry().list().len(), "listening");
    serve_on(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
