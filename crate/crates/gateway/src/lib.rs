//! Bridges browsers to one or more agents: an HTTP API for stream and
//! observable control plus a WebSocket that pushes data messages.
//!
//! Live agents are reached through the blocking client SDK on the blocking
//! thread pool. Recorded stream files can be registered as `replay:N`
//! pseudo-agents; a replay starts once a WebSocket client subscribes to it.

mod api;
mod state;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

pub use state::{LinkState, Shared};

pub const DEFAULT_RETRY: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    /// Agent control addresses (`host:port`) to attach at startup.
    pub agents: Vec<String>,
    /// Reconnect / health-check period for agent links.
    pub retry: Duration,
    /// Per-WebSocket-client queue bound.
    pub ws_queue_capacity: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 7480)),
            agents: Vec::new(),
            retry: DEFAULT_RETRY,
            ws_queue_capacity: livewatch::queue::DEFAULT_CAPACITY,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
}

/// A gateway serving in the background of the current tokio runtime.
pub struct RunningGateway {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: watch::Sender<bool>,
    server: JoinHandle<()>,
}

impl RunningGateway {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shared(&self) -> &Arc<Shared> {
        &self.shared
    }

    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        let _ = self.server.await;
        self.shared.close_all().await;
    }
}

pub async fn start(config: GatewayConfig) -> Result<RunningGateway, GatewayError> {
    let listener = TcpListener::bind(config.listen).await.map_err(|source| GatewayError::Bind { addr: config.listen, source })?;
    let addr = listener.local_addr().map_err(|source| GatewayError::Bind { addr: config.listen, source })?;
    let (stop, stopped) = watch::channel(false);
    let shared = Arc::new(Shared::new(config.retry, config.ws_queue_capacity, stopped.clone()));
    for address in &config.agents {
        shared.add_agent(address.clone()).await;
    }
    let app = api::router(shared.clone());
    let mut on_stop = stopped;
    let server = tokio::spawn(async move {
        let result = axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = on_stop.wait_for(|s| *s).await;
            })
            .await;
        if let Err(e) = result {
            log::error!("gateway server failed: {e}");
        }
    });
    log::info!("gateway listening on {addr}");
    Ok(RunningGateway { addr, shared, stop, server })
}

/// Serves until `shutdown` resolves.
pub async fn serve(config: GatewayConfig, shutdown: impl std::future::Future<Output = ()>) -> Result<(), GatewayError> {
    let running = start(config).await?;
    shutdown.await;
    running.shutdown().await;
    Ok(())
}
