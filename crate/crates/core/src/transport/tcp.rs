use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::mailbox::Mailbox;
use super::wire;
use super::{check_rank, Endpoint, Message, RankId, TransportError};

/// TCP backend. Rank `r` listens on `endpoints[r]`, dials every lower rank and
/// accepts every higher one; each connection starts with the dialer's rank as
/// a little-endian `u32`. One reader thread per peer drains the socket into
/// the local mailbox.
pub struct TcpEndpoint {
    rank: RankId,
    world: usize,
    timeout: Duration,
    inbox: Arc<Mailbox>,
    writers: Vec<Option<Mutex<TcpStream>>>,
    readers: Vec<JoinHandle<()>>,
}

const POLL: Duration = Duration::from_millis(5);

impl TcpEndpoint {
    /// Binds `endpoints[rank]` and joins the rendezvous.
    pub fn connect(rank: RankId, endpoints: &[SocketAddr], timeout: Duration) -> Result<Self, TransportError> {
        check_rank(rank, endpoints.len())?;
        let listener = TcpListener::bind(endpoints[rank])?;
        Self::from_listener(rank, listener, endpoints, timeout)
    }

    /// Joins the rendezvous with an already bound listener for this rank.
    pub fn from_listener(
        rank: RankId,
        listener: TcpListener,
        endpoints: &[SocketAddr],
        timeout: Duration,
    ) -> Result<Self, TransportError> {
        let world = endpoints.len();
        check_rank(rank, world)?;
        let deadline = Instant::now() + timeout;
        let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();

        for (peer, addr) in endpoints.iter().enumerate().take(rank) {
            let mut s = dial(*addr, deadline).map_err(|e| match e {
                TransportError::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => TransportError::Timeout {
                    peer,
                    tag: 0,
                    after: timeout,
                },
                other => other,
            })?;
            s.write_all(&(rank as u32).to_le_bytes())?;
            streams[peer] = Some(s);
        }

        listener.set_nonblocking(true)?;
        let mut pending = world - rank - 1;
        while pending > 0 {
            match listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nonblocking(false)?;
                    s.set_read_timeout(Some(timeout))?;
                    let mut b = [0u8; 4];
                    s.read_exact(&mut b)?;
                    s.set_read_timeout(None)?;
                    let peer = u32::from_le_bytes(b) as usize;
                    if peer <= rank || peer >= world || streams[peer].is_some() {
                        return Err(TransportError::Protocol(format!(
                            "rank {rank} got unexpected handshake from rank {peer}"
                        )));
                    }
                    streams[peer] = Some(s);
                    pending -= 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        let peer = (rank + 1..world).find(|p| streams[*p].is_none()).unwrap();
                        return Err(TransportError::Timeout {
                            peer,
                            tag: 0,
                            after: timeout,
                        });
                    }
                    thread::sleep(POLL);
                }
                Err(e) => return Err(e.into()),
            }
        }

        let inbox = Arc::new(Mailbox::default());
        let mut writers = Vec::with_capacity(world);
        let mut readers = Vec::new();
        for (peer, s) in streams.into_iter().enumerate() {
            let Some(s) = s else {
                writers.push(None);
                continue;
            };
            s.set_nodelay(true)?;
            let mut reader = s.try_clone()?;
            let inbox = Arc::clone(&inbox);
            readers.push(thread::spawn(move || {
                loop {
                    match wire::read_message(&mut reader) {
                        Ok((h, payload)) if h.source as usize == peer => inbox.push(peer, h.tag, payload),
                        _ => break,
                    }
                }
                inbox.close(peer);
            }));
            writers.push(Some(Mutex::new(s)));
        }

        Ok(TcpEndpoint {
            rank,
            world,
            timeout,
            inbox,
            writers,
            readers,
        })
    }
}

fn dial(addr: SocketAddr, deadline: Instant) -> Result<TcpStream, TransportError> {
    loop {
        match TcpStream::connect_timeout(&addr, POLL.max(Duration::from_millis(200))) {
            Ok(s) => return Ok(s),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(std::io::Error::new(std::io::ErrorKind::TimedOut, e).into());
                }
                thread::sleep(POLL);
            }
        }
    }
}

impl Endpoint for TcpEndpoint {
    fn rank(&self) -> RankId {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world
    }

    fn timeout(&self) -> Duration {
        self.timeout
    }

    fn send(&self, to: RankId, tag: u32, payload: &[f64]) -> Result<(), TransportError> {
        check_rank(to, self.world)?;
        if to == self.rank {
            self.inbox.push(to, tag, payload.to_vec());
            return Ok(());
        }
        let writer = self.writers[to].as_ref().ok_or(TransportError::Closed { peer: to })?;
        let mut stream = writer.lock().unwrap();
        wire::write_message(&mut *stream, tag, self.rank as u32, payload)
            .map_err(|_| TransportError::Closed { peer: to })
    }

    fn recv_timeout(&self, from: RankId, tag: u32, timeout: Duration) -> Result<Message, TransportError> {
        check_rank(from, self.world)?;
        let payload = self.inbox.pop(from, tag, timeout)?;
        Ok(Message {
            tag,
            source: from,
            payload,
        })
    }
}

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        for w in self.writers.iter().flatten() {
            if let Ok(s) = w.lock() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
        for h in self.readers.drain(..) {
            let _ = h.join();
        }
    }
}
