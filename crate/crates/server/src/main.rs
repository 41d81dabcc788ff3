use std::path::PathBuf;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use gridlet_server::{Config, RunningNode};

/// Runs one gridlet node.
#[derive(Parser)]
#[command(name = "gridletd", version)]
struct Args {
    /// TOML configuration file.
    #[arg(short, long, env = "GRIDLETD_CONFIG")]
    config: PathBuf,
    /// Overrides `node.listen`.
    #[arg(long)]
    listen: Option<String>,
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .init();
    let args = Args::parse();
    let mut config = match Config::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("gridletd: {e}");
            std::process::exit(2);
        }
    };
    if let Some(listen) = args.listen {
        config.node.listen = listen;
    }
    let node = match RunningNode::start(config).await {
        Ok(n) => n,
        Err(e) => {
            eprintln!("gridletd: {e}");
            std::process::exit(1);
        }
    };
    // dropping the node on ctrl-c stops the server and background tasks
    tokio::select! {
        _ = tokio::signal::ctrl_c() => tracing::info!("shutting down"),
        _ = node.wait() => {}
    }
}
