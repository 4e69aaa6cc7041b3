//! Process wiring for `safespace serve`: store, scheduler and dispatcher
//! loops, HTTP listener, graceful shutdown.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tracing::{error, info, warn};

use crate::api::{router, AppState};
use crate::clock::SystemClock;
use crate::config::Config;
use crate::dispatch::SmtpMailer;
use crate::store::DocumentStore;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot listen on {addr}")]
    Bind {
        addr: std::net::SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

/// One scheduler pass: fire missed deadlines, then note the tick.
pub fn scheduler_pass(state: &AppState) {
    match state.ping.poll_deadlines() {
        Ok(alerts) if !alerts.is_empty() => info!(count = alerts.len(), "missed check-in alerts queued"),
        Ok(_) => {}
        Err(e) => error!(error = %e, "scheduler pass failed"),
    }
    state.health.scheduler_ticked(state.clock.now());
}

/// One dispatcher pass over due outbox entries.
pub fn dispatcher_pass(state: &AppState) {
    match state.dispatcher.flush(state.transport.as_ref(), state.clock.as_ref()) {
        Ok(s) if s.attempted > 0 => info!(
            attempted = s.attempted,
            sent = s.sent,
            failed = s.failed,
            exhausted = s.exhausted,
            pending = s.pending,
            "outbox flushed"
        ),
        Ok(_) => {}
        Err(e) => error!(error = %e, "dispatcher pass failed"),
    }
    state.health.dispatcher_ticked(state.clock.now());
}

/// Handles of the two background loops. Dropping the sender stops them
/// after their current pass.
pub struct Loops {
    stop: watch::Sender<bool>,
    handles: Vec<JoinHandle<()>>,
}

impl Loops {
    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        for h in self.handles {
            let _ = h.await;
        }
    }
}

pub fn spawn_loops(state: AppState) -> Loops {
    let (stop, rx) = watch::channel(false);
    let tick = Duration::from_secs(state.tick_secs.max(1));
    let handles = vec![
        spawn_loop("scheduler", state.clone(), tick, rx.clone(), scheduler_pass),
        spawn_loop("dispatcher", state, tick, rx, dispatcher_pass),
    ];
    Loops { stop, handles }
}

fn spawn_loop(
    name: &'static str,
    state: AppState,
    tick: Duration,
    mut stop: watch::Receiver<bool>,
    pass: fn(&AppState),
) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(tick);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = interval.tick() => {
                    let s = state.clone();
                    if let Err(e) = tokio::task::spawn_blocking(move || pass(&s)).await {
                        error!(loop_name = name, error = %e, "background pass panicked");
                    }
                }
                _ = stop.changed() => break,
            }
        }
        info!(loop_name = name, "stopped");
    })
}

/// Serves `state` on `listener` with the background loops until `shutdown`
/// resolves. In-flight requests and the current dispatcher pass finish
/// before this returns.
pub async fn serve_with(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> anyhow::Result<()> {
    let loops = spawn_loops(state.clone());
    let app = router(state);
    let served = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    loops.shutdown().await;
    served.map_err(Into::into)
}

/// Opens the configured store and SMTP relay, binds, and serves until
/// Ctrl-C or SIGTERM.
pub async fn run(config: Config) -> Result<(), ServeError> {
    let store = Arc::new(DocumentStore::open(&config.data_dir).map_err(anyhow::Error::from)?);
    let mailer = Arc::new(SmtpMailer::new(&config.smtp)?);
    let state = AppState::new(&config, store, Arc::new(SystemClock::new()), mailer)?;
    let listener = TcpListener::bind(config.listen).await.map_err(|source| ServeError::Bind {
        addr: config.listen,
        source,
    })?;
    let addr = listener.local_addr().map_err(anyhow::Error::from)?;
    info!(%addr, "listening");
    println!("listening on {addr}");
    serve_with(listener, state, shutdown_signal()).await?;
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        if let Err(e) = tokio::signal::ctrl_c().await {
            warn!(error = %e, "cannot listen for Ctrl-C");
            std::future::pending::<()>().await;
        }
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    info!("shutting down");
}
