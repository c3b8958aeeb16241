//! HTTP job service around the inpainting engine.
//!
//! Jobs run on a worker pool and persist into `runs_dir/<job id>/` using the
//! engine's result layout; the on-disk tree is re-indexed on startup.

pub mod api;
pub mod bundles;
pub mod jobs;
pub mod multipart;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use bundles::{BundleRegistry, LoadError};
use jobs::{JobTable, WorkerPool};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub runs_dir: PathBuf,
    pub bundles_dir: PathBuf,
    pub workers: usize,
    /// Bundle to load at startup.
    pub bundle: Option<String>,
    /// Seed for submissions that do not carry one.
    pub default_seed: u64,
}

impl ServiceConfig {
    pub fn new(runs_dir: PathBuf, bundles_dir: PathBuf) -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            runs_dir,
            bundles_dir,
            workers: 1,
            bundle: None,
            default_seed: 0,
        }
    }
}

pub struct AppState {
    pub jobs: JobTable,
    pub bundles: BundleRegistry,
    pub pool: WorkerPool,
    pub default_seed: u64,
}

impl AppState {
    pub fn open(cfg: &ServiceConfig) -> std::io::Result<Self> {
        let bundles = BundleRegistry::new(&cfg.bundles_dir);
        if let Some(name) = &cfg.bundle {
            bundles.load(name).map_err(|e| {
                let msg = match e {
                    LoadError::NotFound(m) | LoadError::Corrupt(m) => m,
                };
                std::io::Error::new(std::io::ErrorKind::InvalidInput, msg)
            })?;
        }
        Ok(Self {
            jobs: JobTable::open(&cfg.runs_dir)?,
            bundles,
            pool: WorkerPool::start(cfg.workers),
            default_seed: cfg.default_seed,
        })
    }
}

pub fn router(state: Arc<AppState>) -> axum::Router {
    api::router(state)
}

/// A server on its own runtime thread; used by tests and embedders.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl RunningServer {
    pub fn start(cfg: ServiceConfig) -> std::io::Result<Self> {
        let state = Arc::new(AppState::open(&cfg)?);
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind(cfg.listen))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = router(state.clone());
        let thread = std::thread::Builder::new().name("inpaint-http".into()).spawn(move || {
            rt.block_on(async move {
                let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = serve.await {
                    log::error!("server error: {e}");
                }
            });
        })?;
        log::info!("listening on http://{addr}");
        Ok(Self {
            addr,
            state,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting requests and waits for the HTTP thread to exit.
    /// Queued jobs finish once the last handle to the state is dropped.
    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Runs the service until the process is killed.
pub fn serve(cfg: ServiceConfig) -> std::io::Result<()> {
    let server = RunningServer::start(cfg)?;
    println!("serving on {}", server.url());
    if let Some(t) = server_thread(server) {
        let _ = t.join();
    }
    Ok(())
}

fn server_thread(mut server: RunningServer) -> Option<std::thread::JoinHandle<()>> {
    let t = server.thread.take();
    // keep the shutdown sender alive for the life of the process
    std::mem::forget(server.shutdown.take());
    t
}
