use std::net::SocketAddr;

use clap::Parser;
use sbo::api::{router, AppState};
use sbo::store::EventStore;

/// HTTP service for live voting sessions.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Directory for the per-session event logs. Sessions are in memory only when unset.
    #[arg(long, env = "SBO_DATA_DIR")]
    data_dir: Option<String>,
    /// Bearer token required to create sessions and read estimates and traces.
    #[arg(long, env = "SBO_FACILITATOR_TOKEN", hide_env_values = true)]
    facilitator_token: Option<String>,
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    let store = args.data_dir.map(EventStore::open).transpose()?;
    let state = AppState::new(store, args.facilitator_token);
    let restored = state.restore()?;
    if restored > 0 {
        eprintln!("restored {restored} session(s)");
    }
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse()?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
