//! Newline-delimited JSON over TCP: one request per line, one response line
//! per request.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Result;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinSet;

use crate::bundle::{respond, EngineBundle};

const DRAIN_TIMEOUT: Duration = Duration::from_secs(5);

async fn connection(stream: TcpStream, bundle: Arc<EngineBundle>, mut stop: watch::Receiver<bool>) -> Result<()> {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    loop {
        let line = tokio::select! {
            line = lines.next_line() => line?,
            _ = stop.changed() => break,
        };
        let Some(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let b = bundle.clone();
        let mut out = tokio::task::spawn_blocking(move || respond(&b, &line)).await?;
        out.push('\n');
        write.write_all(out.as_bytes()).await?;
    }
    Ok(())
}

/// Accept connections until `shutdown` resolves, then let open connections
/// finish their current request.
pub async fn serve_until<F>(listener: TcpListener, bundle: Arc<EngineBundle>, shutdown: F) -> Result<()>
where
    F: std::future::Future<Output = ()>,
{
    let (stop_tx, stop_rx) = watch::channel(false);
    let mut tasks = JoinSet::new();
    tokio::pin!(shutdown);
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let (stream, peer) = accepted?;
                log::debug!("connection from {peer}");
                tasks.spawn(connection(stream, bundle.clone(), stop_rx.clone()));
            }
            _ = &mut shutdown => break,
            Some(done) = tasks.join_next(), if !tasks.is_empty() => {
                if let Ok(Err(e)) = done {
                    log::warn!("connection ended with error: {e:#}");
                }
            }
        }
    }
    log::info!("shutting down");
    let _ = stop_tx.send(true);
    let _ = tokio::time::timeout(DRAIN_TIMEOUT, async { while tasks.join_next().await.is_some() {} }).await;
    Ok(())
}

async fn signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

/// Bind `127.0.0.1:port` (0 picks a free port), print the bound address on
/// stdout and serve until interrupted.
pub fn run(bundle: EngineBundle, port: u16) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], port))).await?;
        println!("listening on {}", listener.local_addr()?);
        serve_until(listener, Arc::new(bundle), signal()).await
    })
}
