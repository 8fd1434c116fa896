//! TCP server and client for the registry protocol.

use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::registry::{ModelEnvelope, RegistryClient, RegistryError, Selector};
use super::wire::{read_frame, write_frame, Request, Response, WireError};

/// Running registry server. Dropping the handle stops the accept loop.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

/// Binds `endpoint` and serves `registry`, one thread per connection.
pub fn serve<R>(registry: Arc<R>, endpoint: impl ToSocketAddrs) -> std::io::Result<ServerHandle>
where
    R: RegistryClient + ?Sized + 'static,
{
    let listener = TcpListener::bind(endpoint)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let accept = thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let registry = registry.clone();
            thread::spawn(move || {
                let _ = handle_connection(&*registry, stream);
            });
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        accept: Some(accept),
    })
}

fn send(w: &mut impl Write, resp: &Response) -> Result<(), WireError> {
    let (t, p) = resp.encode()?;
    write_frame(w, t, &p)
}

fn handle_connection<R: RegistryClient + ?Sized>(registry: &R, stream: TcpStream) -> Result<(), WireError> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream.try_clone()?);
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(WireError::Closed) => return Ok(()),
            Err(e) => {
                let _ = send(&mut writer, &Response::Err { code: e.code(), message: e.to_string() });
                let _ = stream.shutdown(Shutdown::Both);
                return Err(e);
            }
        };
        let request = match Request::decode(&frame) {
            Ok(r) => r,
            Err(e) => {
                let _ = send(&mut writer, &Response::Err { code: e.code(), message: e.to_string() });
                let _ = stream.shutdown(Shutdown::Both);
                return Err(e);
            }
        };
        let response = match request {
            Request::Upload {
                model_id,
                creator,
                payload,
            } => registry
                .upload(&model_id, &creator, &payload)
                .map(|version| Response::Ok { version }),
            Request::Fetch { model_id, selector } => registry
                .fetch(&model_id, selector)
                .map(|env| Response::Envelope {
                    version: env.version,
                    payload: env.payload,
                }),
            Request::List => registry.list().map(Response::Listing),
        }
        .unwrap_or_else(|e| Response::from_error(&e));
        send(&mut writer, &response)?;
    }
}

/// Registry client speaking the wire protocol over one TCP connection.
///
/// The connection is opened lazily and reopened after a failure.
pub struct RemoteRegistry {
    addr: SocketAddr,
    timeout: Duration,
    conn: Mutex<Option<TcpStream>>,
}

impl RemoteRegistry {
    pub fn new(endpoint: impl ToSocketAddrs) -> Result<Self, RegistryError> {
        let addr = endpoint
            .to_socket_addrs()
            .map_err(|e| RegistryError::Connection(e.to_string()))?
            .next()
            .ok_or_else(|| RegistryError::Connection("endpoint resolved to no address".into()))?;
        Ok(Self {
            addr,
            timeout: Duration::from_secs(30),
            conn: Mutex::new(None),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn call(&self, req: &Request) -> Result<Response, RegistryError> {
        let conn_err = |e: WireError| RegistryError::Connection(e.to_string());
        let mut guard = self.conn.lock().unwrap();
        if guard.is_none() {
            let s = TcpStream::connect_timeout(&self.addr, self.timeout)
                .map_err(|e| RegistryError::Connection(format!("{}: {e}", self.addr)))?;
            s.set_read_timeout(Some(self.timeout)).ok();
            s.set_nodelay(true).ok();
            *guard = Some(s);
        }
        let stream = guard.as_mut().unwrap();
        let (t, p) = req.encode().map_err(conn_err)?;
        let result = write_frame(stream, t, &p)
            .and_then(|_| read_frame(stream))
            .and_then(|f| Response::decode(&f));
        match result {
            Ok(resp) => Ok(resp),
            Err(e) => {
                *guard = None;
                Err(conn_err(e))
            }
        }
    }
}

fn unexpected(resp: Response) -> RegistryError {
    match resp {
        Response::Err { code, message } => RegistryError::Remote { code, message },
        other => RegistryError::Connection(format!("unexpected response {other:?}")),
    }
}

impl RegistryClient for RemoteRegistry {
    fn upload(&self, model_id: &str, creator: &str, payload: &[u8]) -> Result<u32, RegistryError> {
        let req = Request::Upload {
            model_id: model_id.to_string(),
            creator: creator.to_string(),
            payload: payload.to_vec(),
        };
        match self.call(&req)? {
            Response::Ok { version } => Ok(version),
            other => Err(unexpected(other)),
        }
    }

    /// The wire `ENVELOPE` carries no creator, so remote envelopes report an empty one.
    fn fetch(&self, model_id: &str, selector: Selector) -> Result<ModelEnvelope, RegistryError> {
        let req = Request::Fetch {
            model_id: model_id.to_string(),
            selector,
        };
        match self.call(&req)? {
            Response::Envelope { version, payload } => {
                let mut env = ModelEnvelope::new(model_id, "", payload);
                env.version = version;
                Ok(env)
            }
            other => Err(unexpected(other)),
        }
    }

    fn list(&self) -> Result<Vec<(String, u32)>, RegistryError> {
        match self.call(&Request::List)? {
            Response::Listing(entries) => Ok(entries),
            other => Err(unexpected(other)),
        }
    }
}
