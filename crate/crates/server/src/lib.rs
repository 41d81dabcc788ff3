//! The gridlet node service: an XML-RPC endpoint over HTTP hosting the file
//! service, an optional worker and an embedded broker that either leads or
//! stands by to take over.

mod agent;
pub mod config;
mod faults;
mod handlers;
mod http;
mod json;
pub mod node;

use std::net::SocketAddr;
use std::sync::Arc;

use tokio::task::JoinHandle;

pub use config::Config;
pub use node::{Node, StartError};

/// A node bound to its listener with its background tasks running.
/// Dropping it (or calling [`RunningNode::kill`]) stops everything at once,
/// as if the process had died.
pub struct RunningNode {
    node: Arc<Node>,
    addr: SocketAddr,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningNode {
    pub async fn start(config: Config) -> Result<RunningNode, StartError> {
        let listener = tokio::net::TcpListener::bind(&config.node.listen).await?;
        let addr = listener.local_addr()?;
        let url = config
            .node
            .url
            .clone()
            .unwrap_or_else(|| format!("http://{addr}"));
        let node = Node::open(config, url)?;
        tracing::info!("{} listening on {addr} as {}", node.peer_id(), node.url());
        let app = http::router(node.clone());
        let mut tasks = vec![tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                tracing::error!("server stopped: {e}");
            }
        })];
        tasks.extend(agent::spawn(&node));
        Ok(RunningNode { node, addr, tasks })
    }

    pub fn node(&self) -> &Arc<Node> {
        &self.node
    }

    pub fn url(&self) -> &str {
        self.node.url()
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops serving and all background work immediately.
    pub fn kill(self) {
        drop(self);
    }

    /// Runs until the server task ends.
    pub async fn wait(mut self) {
        if let Some(server) = self.tasks.first_mut() {
            let _ = server.await;
        }
    }
}

impl Drop for RunningNode {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}
