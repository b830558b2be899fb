//! SSH transport: direct connections and the two-stage proxy tunnel.
//!
//! Host keys are checked against a [`HostKeyStore`] during the handshake.
//! Authentication is key-based only: identities from the running key agent
//! are tried first, then private key files.

use std::io;
use std::path::{Path, PathBuf};
use std::pin::Pin;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};
use std::time::Duration;

use async_trait::async_trait;
use log::{debug, warn};
use russh::client::{self, Handle, Handler};
use russh::keys::agent::client::AgentClient;
use russh::keys::agent::AgentIdentity;
use russh::keys::{load_secret_key, Algorithm, EcdsaCurve, HashAlg, PrivateKeyWithHashAlg, PublicKeyOrCertificate};
use russh::ChannelMsg;
use tokio::io::{duplex, AsyncWrite, AsyncWriteExt};
use tokio::sync::oneshot;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use super::{BoxedWrite, Connection, Endpoint, ExecHandle, ExitWatch, ProxySpec, Stage, Topology, TransportError};
use crate::hostkeys::{host_pattern, rsa_remedy, verify, HostKeyStore, KeyType, VerifyResult};

const PIPE_BUFFER: usize = 64 * 1024;

#[derive(Debug, Clone)]
pub struct SshOptions {
    /// Private key files tried after the agent, in order. Missing files are
    /// skipped.
    pub identity_files: Vec<PathBuf>,
    pub use_agent: bool,
    pub connect_timeout: Duration,
}

impl SshOptions {
    /// Agent plus the conventional key files under `home/.ssh`.
    pub fn with_home(home: Option<&Path>) -> Self {
        let identity_files = home
            .map(|h| {
                ["id_rsa", "id_ecdsa", "id_ed25519"]
                    .iter()
                    .map(|f| h.join(".ssh").join(f))
                    .collect()
            })
            .unwrap_or_default();
        SshOptions {
            identity_files,
            use_agent: true,
            connect_timeout: Duration::from_secs(30),
        }
    }
}

impl Default for SshOptions {
    fn default() -> Self {
        SshOptions::with_home(std::env::var_os("HOME").map(PathBuf::from).as_deref())
    }
}

type Outcome = Arc<Mutex<Option<(VerifyResult, KeyType)>>>;

struct HostKeyCheck {
    store: Arc<dyn HostKeyStore>,
    host: String,
    port: u16,
    outcome: Outcome,
}

impl Handler for HostKeyCheck {
    type Error = russh::Error;

    async fn check_server_key(&mut self, key: &PublicKeyOrCertificate) -> Result<bool, Self::Error> {
        let (key_type, result) = match key {
            PublicKeyOrCertificate::PublicKey { key, .. } => {
                let key_type = KeyType::from_name(key.algorithm().as_str());
                let blob = key.to_bytes().unwrap_or_default();
                let stored = self.store.lookup(&self.host, self.port);
                (key_type.clone(), verify(&stored, &key_type, &blob))
            }
            PublicKeyOrCertificate::Certificate(cert) => {
                let key_type = KeyType::Other(format!("{} certificate", cert.algorithm().as_str()));
                (key_type, VerifyResult::UnsupportedKeyType)
            }
        };
        debug!(
            "host key for {}: {key_type} -> {result}",
            host_pattern(&self.host, self.port)
        );
        *self.outcome.lock().unwrap() = Some((result, key_type));
        Ok(result.is_accepted())
    }
}

/// Host key algorithms offered to the server, RSA first. The others stay in
/// the list so a server without an RSA key still completes negotiation and
/// is then refused with a precise diagnosis.
fn client_config() -> client::Config {
    let mut config = client::Config::default();
    config.preferred.key = vec![
        Algorithm::Rsa { hash: Some(HashAlg::Sha512) },
        Algorithm::Rsa { hash: Some(HashAlg::Sha256) },
        Algorithm::Rsa { hash: None },
        Algorithm::Ed25519,
        Algorithm::Ecdsa { curve: EcdsaCurve::NistP256 },
        Algorithm::Ecdsa { curve: EcdsaCurve::NistP384 },
        Algorithm::Ecdsa { curve: EcdsaCurve::NistP521 },
    ]
    .into();
    config
}

/// Opens and authenticates one SSH session to `addr`, verifying the host
/// key under the known-hosts name `key_host`/`key_port`.
async fn open_session(
    addr: (&str, u16),
    key_host: &str,
    key_port: u16,
    user: &str,
    store: Arc<dyn HostKeyStore>,
    opts: &SshOptions,
    stage: Stage,
) -> Result<Handle<HostKeyCheck>, TransportError> {
    let outcome: Outcome = Arc::default();
    let handler = HostKeyCheck {
        store,
        host: key_host.to_string(),
        port: key_port,
        outcome: outcome.clone(),
    };
    let target = format!("{}:{}", addr.0, addr.1);
    let connected = tokio::time::timeout(
        opts.connect_timeout,
        client::connect(Arc::new(client_config()), addr, handler),
    )
    .await;
    let mut handle = match connected {
        Ok(Ok(h)) => h,
        Ok(Err(e)) => {
            if let Some((result, key_type)) = outcome.lock().unwrap().take() {
                if !result.is_accepted() {
                    return Err(TransportError::HostKey {
                        stage,
                        host_pattern: host_pattern(key_host, key_port),
                        result,
                        presented: Some(key_type),
                        remedy: rsa_remedy(key_host, key_port),
                    });
                }
            }
            return Err(TransportError::Connect {
                stage,
                target,
                detail: e.to_string(),
            });
        }
        Err(_) => {
            return Err(TransportError::Connect {
                stage,
                target,
                detail: format!("timed out after {:?}", opts.connect_timeout),
            })
        }
    };
    authenticate(&mut handle, user, opts)
        .await
        .map_err(|detail| TransportError::Auth {
            stage,
            user: user.to_string(),
            host: target,
            detail,
        })?;
    Ok(handle)
}

async fn authenticate(handle: &mut Handle<HostKeyCheck>, user: &str, opts: &SshOptions) -> Result<(), String> {
    let mut tried = Vec::new();
    let rsa_hash = handle
        .best_supported_rsa_hash()
        .await
        .map_err(|e| e.to_string())?
        .flatten();

    if opts.use_agent && std::env::var_os("SSH_AUTH_SOCK").is_some() {
        match AgentClient::connect_env().await {
            Ok(mut agent) => {
                let identities = agent.request_identities().await.unwrap_or_default();
                for identity in identities {
                    let AgentIdentity::PublicKey { key, comment } = identity else {
                        continue;
                    };
                    let hash = matches!(key.algorithm(), Algorithm::Rsa { .. })
                        .then_some(rsa_hash)
                        .flatten();
                    match handle.authenticate_publickey_with(user, key, hash, &mut agent).await {
                        Ok(r) if r.success() => return Ok(()),
                        Ok(_) => tried.push(format!("agent key {comment}")),
                        Err(e) => warn!("agent signing failed: {e}"),
                    }
                }
            }
            Err(e) => warn!("cannot reach the SSH agent: {e}"),
        }
    }

    for path in &opts.identity_files {
        if !path.exists() {
            continue;
        }
        let key = match load_secret_key(path, None) {
            Ok(k) => k,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let hash = matches!(key.algorithm(), Algorithm::Rsa { .. })
            .then_some(rsa_hash)
            .flatten();
        let key = PrivateKeyWithHashAlg::new(Arc::new(key), hash);
        match handle.authenticate_publickey(user, key).await {
            Ok(r) if r.success() => return Ok(()),
            Ok(_) => tried.push(path.display().to_string()),
            Err(e) => return Err(e.to_string()),
        }
    }

    if tried.is_empty() {
        Err("no usable private key found in the agent or key files".into())
    } else {
        Err(format!("server refused {}", tried.join(", ")))
    }
}

struct Tunnel {
    _proxy: Arc<Handle<HostKeyCheck>>,
    forwarder: JoinHandle<()>,
}

impl Tunnel {
    /// Stops forwarding and waits until the local port is released.
    async fn close(mut self) {
        self.forwarder.abort();
        let _ = (&mut self.forwarder).await;
    }
}

impl Drop for Tunnel {
    fn drop(&mut self) {
        self.forwarder.abort();
    }
}

pub struct SshConnection {
    handle: Handle<HostKeyCheck>,
    topology: Topology,
    _tunnel: Option<Tunnel>,
}

impl SshConnection {
    pub async fn connect(
        endpoint: &Endpoint,
        store: Arc<dyn HostKeyStore>,
        opts: &SshOptions,
    ) -> Result<SshConnection, TransportError> {
        let handle = open_session(
            (&endpoint.host, endpoint.port),
            &endpoint.host,
            endpoint.port,
            &endpoint.user,
            store,
            opts,
            Stage::Direct,
        )
        .await?;
        Ok(SshConnection {
            handle,
            topology: Topology::Direct,
            _tunnel: None,
        })
    }

    /// Stage 1 logs into the proxy and forwards `127.0.0.1:forward_port` to
    /// the target's SSH port. Stage 2 logs into the target through that
    /// forward, so its host key is looked up as `[localhost]:forward_port`.
    pub async fn connect_via_proxy(
        proxy: &ProxySpec,
        target: &Endpoint,
        store: Arc<dyn HostKeyStore>,
        opts: &SshOptions,
    ) -> Result<SshConnection, TransportError> {
        let listener = match TcpListener::bind(("127.0.0.1", proxy.forward_port)).await {
            Ok(l) => l,
            Err(e) if e.kind() == io::ErrorKind::AddrInUse => {
                return Err(TransportError::PortInUse(proxy.forward_port))
            }
            Err(e) => {
                return Err(TransportError::Connect {
                    stage: Stage::Proxy,
                    target: format!("127.0.0.1:{}", proxy.forward_port),
                    detail: e.to_string(),
                })
            }
        };
        let proxy_handle = open_session(
            (&proxy.host, proxy.ssh_port),
            &proxy.host,
            proxy.ssh_port,
            &target.user,
            store.clone(),
            opts,
            Stage::Proxy,
        )
        .await?;
        let proxy_handle = Arc::new(proxy_handle);
        let forwarder = spawn_forwarder(listener, proxy_handle.clone(), target.host.clone(), target.port);
        let tunnel = Tunnel {
            _proxy: proxy_handle,
            forwarder,
        };
        let handle = match open_session(
            ("127.0.0.1", proxy.forward_port),
            "localhost",
            proxy.forward_port,
            &target.user,
            store,
            opts,
            Stage::Target,
        )
        .await
        {
            Ok(h) => h,
            Err(e) => {
                tunnel.close().await;
                return Err(e);
            }
        };
        Ok(SshConnection {
            handle,
            topology: Topology::Tunneled(proxy.clone()),
            _tunnel: Some(tunnel),
        })
    }
}

fn spawn_forwarder(
    listener: TcpListener,
    proxy: Arc<Handle<HostKeyCheck>>,
    host: String,
    port: u16,
) -> JoinHandle<()> {
    tokio::spawn(async move {
        loop {
            let (mut socket, peer) = match listener.accept().await {
                Ok(s) => s,
                Err(e) => {
                    warn!("tunnel listener failed: {e}");
                    return;
                }
            };
            let proxy = proxy.clone();
            let host = host.clone();
            tokio::spawn(async move {
                let channel = match proxy
                    .channel_open_direct_tcpip(
                        host.as_str(),
                        port as u32,
                        peer.ip().to_string(),
                        peer.port() as u32,
                    )
                    .await
                {
                    Ok(c) => c,
                    Err(e) => {
                        warn!("proxy refused forwarding to {host}:{port}: {e}");
                        return;
                    }
                };
                let mut stream = channel.into_stream();
                let _ = tokio::io::copy_bidirectional(&mut socket, &mut stream).await;
            });
        }
    })
}

#[async_trait]
impl Connection for SshConnection {
    fn topology(&self) -> Topology {
        self.topology.clone()
    }

    async fn exec_shell(&self, command: &str) -> Result<(ExecHandle, BoxedWrite), TransportError> {
        let channel = self
            .handle
            .channel_open_session()
            .await
            .map_err(|e| TransportError::Channel(format!("cannot open session channel: {e}")))?;
        channel
            .exec(true, command)
            .await
            .map_err(|e| TransportError::Channel(format!("cannot start `{command}`: {e}")))?;
        let (mut read_half, write_half) = channel.split();
        let (closed_tx, mut closed_rx) = oneshot::channel();
        let stdin: BoxedWrite = Box::pin(RemoteStdin {
            inner: Box::pin(write_half.make_writer()),
            closed: Some(closed_tx),
        });
        let (mut out_tx, out_rx) = duplex(PIPE_BUFFER);
        let (mut err_tx, err_rx) = duplex(PIPE_BUFFER);
        let (status_tx, status) = ExitWatch::channel();
        tokio::spawn(async move {
            let mut code = None;
            let mut stdin_open = true;
            loop {
                let msg = tokio::select! {
                    m = read_half.wait() => m,
                    dropped = &mut closed_rx, if stdin_open => {
                        stdin_open = false;
                        if dropped == Ok(true) {
                            let _ = write_half.eof().await;
                        }
                        continue;
                    }
                };
                let Some(msg) = msg else { break };
                match msg {
                    ChannelMsg::Data { data } => {
                        let _ = out_tx.write_all(&data).await;
                    }
                    ChannelMsg::ExtendedData { data, ext: 1 } => {
                        let _ = err_tx.write_all(&data).await;
                    }
                    ChannelMsg::ExitStatus { exit_status } => code = Some(exit_status as i32),
                    ChannelMsg::ExitSignal { signal_name, .. } => {
                        debug!("remote process killed by {signal_name:?}");
                        code.get_or_insert(255);
                    }
                    ChannelMsg::Close => break,
                    _ => {}
                }
            }
            drop(out_tx);
            drop(err_tx);
            let _ = status_tx.send(code.ok_or_else(|| "channel closed without an exit status".to_string()));
        });
        Ok((
            ExecHandle {
                stdout: Box::pin(out_rx),
                stderr: Box::pin(err_rx),
                status,
            },
            stdin,
        ))
    }
}

/// Stdin of a remote process. Shutting it down or dropping it sends EOF, so
/// a remote reader sees end of input either way.
struct RemoteStdin {
    inner: BoxedWrite,
    /// Tells the channel pump whether it still has to send EOF itself.
    closed: Option<oneshot::Sender<bool>>,
}

impl AsyncWrite for RemoteStdin {
    fn poll_write(mut self: Pin<&mut Self>, cx: &mut Context<'_>, buf: &[u8]) -> Poll<io::Result<usize>> {
        self.inner.as_mut().poll_write(cx, buf)
    }

    fn poll_flush(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        self.inner.as_mut().poll_flush(cx)
    }

    fn poll_shutdown(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        let res = self.inner.as_mut().poll_shutdown(cx);
        if res.is_ready() {
            if let Some(tx) = self.closed.take() {
                let _ = tx.send(false);
            }
        }
        res
    }
}

impl Drop for RemoteStdin {
    fn drop(&mut self) {
        if let Some(tx) = self.closed.take() {
            let _ = tx.send(true);
        }
    }
}
