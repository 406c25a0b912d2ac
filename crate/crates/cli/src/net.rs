//! Service frames over TCP. A connection carries any number of
//! request/response frame pairs.

use std::io::{self, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use qshield_core::host::{ExecutionMode, HostError, LocalHost};
use qshield_core::wire::{opcode, Boundary, Frame};

/// Client side of the socket transport. The connection is opened lazily and
/// reopened after a failure.
pub struct TcpBoundary {
    addr: String,
    stream: Mutex<Option<TcpStream>>,
}

impl TcpBoundary {
    pub fn new(addr: impl Into<String>) -> Self {
        Self { addr: addr.into(), stream: Mutex::new(None) }
    }

    fn exchange(&self, request: &[u8]) -> io::Result<Vec<u8>> {
        let mut guard = self.stream.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(TcpStream::connect(&self.addr)?);
        }
        let stream = guard.as_mut().expect("connected above");
        let result = stream
            .write_all(request)
            .and_then(|_| Frame::read_from(stream).map_err(io::Error::other));
        match result {
            Ok(f) => Ok(f.encode()),
            Err(e) => {
                *guard = None;
                Err(e)
            }
        }
    }
}

impl Boundary for TcpBoundary {
    fn call(&self, request: &[u8]) -> Vec<u8> {
        self.exchange(request).unwrap_or_else(|e| {
            let err = HostError::Storage(format!("cannot reach host at {}: {e}", self.addr));
            Frame::new(opcode::ERR, &err, Vec::new()).encode()
        })
    }
}

/// Accepts connections until the listener fails, one thread per connection.
/// The host service itself runs queries one at a time.
pub fn serve(listener: TcpListener, host: Arc<LocalHost>, mode: ExecutionMode) -> io::Result<()> {
    for conn in listener.incoming() {
        let conn = conn?;
        let host = Arc::clone(&host);
        thread::spawn(move || handle(conn, &host, mode));
    }
    Ok(())
}

fn handle(mut conn: TcpStream, host: &LocalHost, mode: ExecutionMode) {
    while let Ok(request) = Frame::read_from(&mut conn) {
        let response = host.handle_frame(&request.encode(), mode);
        if conn.write_all(&response).and_then(|_| conn.flush()).is_err() {
            return;
        }
    }
}
