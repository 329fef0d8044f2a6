//! WebSocket host for an interactive [`Session`].
//!
//! One thread owns the session and ticks it in real time. Every connection
//! gets its own thread, a bounded snapshot queue that drops the oldest entry
//! when a reader falls behind, and an unbounded queue for events and replies.

use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use crossbeam::channel::{self, Receiver, Sender};
use crossbeam::queue::ArrayQueue;
use needleguide::pipeline::SimConfig;
use needleguide::session::{OperatorCommand, ServerMessage, Session, Snapshot};
use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::http::StatusCode;
use tungstenite::{Message, WebSocket};

pub const PATH: &str = "/session";
const SNAPSHOT_QUEUE: usize = 64;
const POLL: Duration = Duration::from_millis(5);

struct Client {
    id: u64,
    snapshots: Arc<ArrayQueue<Snapshot>>,
    /// First and last tick lost since the reader last caught up.
    dropped: Arc<Mutex<Option<(u64, u64)>>>,
    control: Sender<ServerMessage>,
}

type Clients = Arc<Mutex<Vec<Client>>>;

/// Bind, print the listening address and serve until the process ends.
pub fn serve(cfg: SimConfig, port: u16, seed: u64, debug: bool) -> Result<()> {
    let listener = TcpListener::bind(("127.0.0.1", port)).with_context(|| format!("port {port} unavailable"))?;
    let addr = listener.local_addr()?;
    let session = Session::new(cfg.clone(), seed, debug)?;
    println!("listening on ws://{addr}{PATH}");

    let clients: Clients = Arc::default();
    let (cmd_tx, cmd_rx) = channel::unbounded::<(u64, OperatorCommand)>();
    {
        let clients = clients.clone();
        let period = Duration::from_secs_f64(1.0 / cfg.tick_hz);
        thread::spawn(move || run_loop(session, period, cmd_rx, clients));
    }

    let next_id = AtomicU64::new(0);
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let id = next_id.fetch_add(1, Ordering::Relaxed);
        let clients = clients.clone();
        let cmd_tx = cmd_tx.clone();
        thread::spawn(move || {
            if let Err(e) = handle(stream, id, clients.clone(), cmd_tx) {
                log::info!("client {id} closed: {e}");
            }
            clients.lock().unwrap().retain(|c| c.id != id);
        });
    }
    Ok(())
}

fn run_loop(mut session: Session, period: Duration, commands: Receiver<(u64, OperatorCommand)>, clients: Clients) {
    let mut deadline = Instant::now();
    loop {
        let replies: Vec<(u64, ServerMessage)> = commands
            .try_iter()
            .map(|(from, cmd)| {
                let kind = cmd.kind().to_string();
                let reply = match session.apply(cmd) {
                    Ok(()) => ServerMessage::Ack { command: kind },
                    Err(e) => ServerMessage::Error {
                        message: format!("{kind}: {e}"),
                    },
                };
                (from, reply)
            })
            .collect();
        let (snapshot, events) = session.tick();
        {
            let clients = clients.lock().unwrap();
            for (from, reply) in replies {
                if let Some(c) = clients.iter().find(|c| c.id == from) {
                    let _ = c.control.send(reply);
                }
            }
            for c in clients.iter() {
                for e in &events {
                    let _ = c.control.send(ServerMessage::Event(*e));
                }
                if let Some(old) = c.snapshots.force_push(snapshot.clone()) {
                    let mut d = c.dropped.lock().unwrap();
                    *d = Some(d.map_or((old.tick, old.tick), |(a, _)| (a, old.tick)));
                }
            }
        }
        deadline += period;
        let now = Instant::now();
        if deadline > now {
            thread::sleep(deadline - now);
        } else {
            deadline = now;
        }
    }
}

fn handle(stream: TcpStream, id: u64, clients: Clients, commands: Sender<(u64, OperatorCommand)>) -> Result<()> {
    let check_path = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        if req.uri().path() == PATH {
            Ok(resp)
        } else {
            let mut err = ErrorResponse::new(Some(format!("only {PATH} is served")));
            *err.status_mut() = StatusCode::NOT_FOUND;
            Err(err)
        }
    };
    let mut ws = tungstenite::accept_hdr(stream, check_path)?;
    ws.get_ref().set_read_timeout(Some(POLL))?;

    let snapshots = Arc::new(ArrayQueue::new(SNAPSHOT_QUEUE));
    let dropped = Arc::new(Mutex::new(None));
    let (control_tx, control_rx) = channel::unbounded();
    clients.lock().unwrap().push(Client {
        id,
        snapshots: snapshots.clone(),
        dropped: dropped.clone(),
        control: control_tx.clone(),
    });

    loop {
        for msg in control_rx.try_iter() {
            send(&mut ws, &msg)?;
        }
        if let Some((from_tick, to_tick)) = dropped.lock().unwrap().take() {
            send(&mut ws, &ServerMessage::Dropped { from_tick, to_tick })?;
        }
        while let Some(s) = snapshots.pop() {
            send(&mut ws, &ServerMessage::Snapshot(s))?;
        }
        ws.flush()?;
        match ws.read() {
            Ok(Message::Text(text)) => {
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    match OperatorCommand::from_line(line) {
                        Ok(cmd) => commands.send((id, cmd))?,
                        Err(e) => {
                            let _ = control_tx.send(ServerMessage::Error { message: e.to_string() });
                        }
                    }
                }
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e.into()),
        }
    }
}

fn send(ws: &mut WebSocket<TcpStream>, msg: &ServerMessage) -> Result<()> {
    let mut line = msg.to_line();
    line.push('\n');
    ws.write(Message::text(line))?;
    Ok(())
}
