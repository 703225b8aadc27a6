use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use gcrf_core::edits::PropagateConfig;
use gcrf_core::pipeline::load_checkpoint;
use gcrf_service::{router, AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "gcrf-service", about = "HTTP service for scribble colorization and diverse sampling")]
struct Args {
    #[arg(long, env = "GCRF_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "GCRF_HOST", default_value = "127.0.0.1")]
    host: String,
    /// Checkpoint that enables `/diverse`.
    #[arg(long, env = "GCRF_MODEL")]
    model: Option<PathBuf>,
    /// Directory of UI assets served under `/`.
    #[arg(long, env = "GCRF_STATIC_DIR")]
    static_dir: Option<PathBuf>,
    /// Allowed CORS origin; repeat for several. Any origin when absent.
    #[arg(long = "cors-origin", env = "GCRF_CORS_ORIGIN")]
    cors_origins: Vec<String>,
    #[arg(long, default_value_t = 32)]
    grid_w: usize,
    #[arg(long, default_value_t = 32)]
    grid_h: usize,
    #[arg(long, default_value_t = 64)]
    max_sessions: usize,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();
    let model = match &args.model {
        Some(path) => match load_checkpoint(path) {
            Ok(m) => Some(Arc::new(m)),
            Err(e) => {
                eprintln!("cannot load {}: {e}", path.display());
                return ExitCode::from(5);
            }
        },
        None => None,
    };
    let config = ServiceConfig {
        propagate: PropagateConfig {
            grid_width: args.grid_w,
            grid_height: args.grid_h,
            ..PropagateConfig::default()
        },
        max_sessions: args.max_sessions,
        cors_origins: args.cors_origins,
        static_dir: args.static_dir,
        model,
        sample_seed: args.sample_seed,
    };
    let addr: SocketAddr = match format!("{}:{}", args.host, args.port).parse() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("bad listen address: {e}");
            return ExitCode::from(2);
        }
    };
    let listener = match tokio::net::TcpListener::bind(addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("cannot bind {addr}: {e}");
            return ExitCode::from(5);
        }
    };
    eprintln!("listening on http://{addr}");
    let app = router(AppState::new(config));
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    match axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("server error: {e}");
            ExitCode::from(5)
        }
    }
}
