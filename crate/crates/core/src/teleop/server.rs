//! WebSocket front end for a [`Session`].
//!
//! One owner thread holds the session and processes events strictly in
//! arrival order: client frames, connection changes, and timer ticks.
//! Each connection runs a reader/writer thread that forwards frames to the
//! owner and drains its outbound queue. Only one client is served at a
//! time; further connections receive an error and are closed.

use super::{ServerMessage, Session, TICK_MS};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};
use tungstenite::{Message, WebSocket};

enum Event {
    Connected(u64, Sender<String>),
    Frame(u64, String),
    Disconnected(u64),
    Tick,
}

/// A running server. Dropping the handle does not stop it; call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the acceptor.
        let _ = TcpStream::connect(self.addr);
        for t in self.threads {
            let _ = t.join();
        }
    }

    /// Blocks until the server stops.
    pub fn join(self) {
        for t in self.threads {
            let _ = t.join();
        }
    }
}

/// Binds `addr` (port 0 picks a free port) and starts serving `session`.
pub fn spawn(addr: &str, session: Session) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<Event>();

    let owner = {
        let stop = stop.clone();
        thread::spawn(move || run_owner(session, rx, stop))
    };
    let clock = {
        let (tx, stop) = (tx.clone(), stop.clone());
        thread::spawn(move || {
            let period = Duration::from_millis(TICK_MS);
            let mut next = Instant::now() + period;
            while !stop.load(Ordering::SeqCst) {
                thread::sleep(next.saturating_duration_since(Instant::now()));
                next += period;
                if tx.send(Event::Tick).is_err() {
                    break;
                }
            }
        })
    };
    let acceptor = {
        let stop = stop.clone();
        thread::spawn(move || {
            let mut next_id = 0u64;
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let (tx, stop, id) = (tx.clone(), stop.clone(), next_id);
                next_id += 1;
                thread::spawn(move || serve_connection(id, stream, tx, stop));
            }
        })
    };
    log::info!("teleop server listening on ws://{local}");
    Ok(ServerHandle { addr: local, stop, threads: vec![owner, clock, acceptor] })
}

fn run_owner(mut session: Session, rx: Receiver<Event>, stop: Arc<AtomicBool>) {
    let mut client: Option<(u64, Sender<String>)> = None;
    let send = |client: &Option<(u64, Sender<String>)>, msgs: Vec<ServerMessage>| {
        if let Some((_, out)) = client {
            for m in msgs {
                let _ = out.send(serde_json::to_string(&m).expect("message serialises"));
            }
        }
    };
    while !stop.load(Ordering::SeqCst) {
        let Ok(event) = rx.recv_timeout(Duration::from_millis(200)) else { continue };
        match event {
            Event::Connected(id, out) => {
                if client.is_some() {
                    let busy = ServerMessage::Error { reason: "another client is connected".into() };
                    let _ = out.send(serde_json::to_string(&busy).expect("message serialises"));
                    // Dropping `out` makes the connection thread close.
                } else {
                    client = Some((id, out));
                }
            }
            Event::Disconnected(id) => {
                if client.as_ref().is_some_and(|(c, _)| *c == id) {
                    client = None;
                }
            }
            Event::Frame(id, text) => {
                if client.as_ref().is_some_and(|(c, _)| *c == id) {
                    let out = session.handle_text(&text);
                    send(&client, out);
                }
            }
            Event::Tick => {
                let out = session.tick();
                send(&client, out);
            }
        }
    }
}

fn serve_connection(id: u64, stream: TcpStream, events: Sender<Event>, stop: Arc<AtomicBool>) {
    let mut ws: WebSocket<TcpStream> = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("websocket handshake failed: {e}");
            return;
        }
    };
    if ws.get_mut().set_read_timeout(Some(Duration::from_millis(5))).is_err() {
        return;
    }
    let (out_tx, out_rx) = mpsc::channel::<String>();
    if events.send(Event::Connected(id, out_tx)).is_err() {
        return;
    }
    'conn: while !stop.load(Ordering::SeqCst) {
        loop {
            match out_rx.try_recv() {
                Ok(text) => {
                    if ws.send(Message::text(text)).is_err() {
                        break 'conn;
                    }
                }
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    break 'conn;
                }
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                if events.send(Event::Frame(id, text.to_string())).is_err() {
                    break;
                }
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }
    let _ = events.send(Event::Disconnected(id));
}
