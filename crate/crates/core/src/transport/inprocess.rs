use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::mailbox::Mailbox;
use super::{check_rank, Endpoint, Message, RankId, TransportError};

struct Fabric {
    mailboxes: Vec<Mailbox>,
    alive: Vec<AtomicBool>,
}

/// In-process backend: one endpoint per rank, each meant to be moved to its
/// own thread. Dropping an endpoint disconnects it from every peer.
pub struct LocalEndpoint {
    rank: RankId,
    fabric: Arc<Fabric>,
    timeout: Duration,
}

/// Creates a fully connected world of `world_size` in-process endpoints.
pub fn inprocess_world(world_size: usize, timeout: Duration) -> Vec<LocalEndpoint> {
    let fabric = Arc::new(Fabric {
        mailboxes: (0..world_size).map(|_| Mailbox::default()).collect(),
        alive: (0..world_size).map(|_| AtomicBool::new(true)).collect(),
    });
    (0..world_size)
        .map(|rank| LocalEndpoint {
            rank,
            fabric: Arc::clone(&fabric),
            timeout,
        })
        .collect()
}

impl Endpoint for LocalEndpoint {
    fn rank(&self) -> RankId {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.fabric.mailboxes.len()
    }

    fn timeout(&self) -> Duration {
        self.timeout
    }

    fn send(&self, to: RankId, tag: u32, payload: &[f64]) -> Result<(), TransportError> {
        check_rank(to, self.world_size())?;
        if !self.fabric.alive[to].load(Ordering::Acquire) {
            return Err(TransportError::Closed { peer: to });
        }
        self.fabric.mailboxes[to].push(self.rank, tag, payload.to_vec());
        Ok(())
    }

    fn recv_timeout(&self, from: RankId, tag: u32, timeout: Duration) -> Result<Message, TransportError> {
        check_rank(from, self.world_size())?;
        let payload = self.fabric.mailboxes[self.rank].pop(from, tag, timeout)?;
        Ok(Message {
            tag,
            source: from,
            payload,
        })
    }
}

impl Drop for LocalEndpoint {
    fn drop(&mut self) {
        self.fabric.alive[self.rank].store(false, Ordering::Release);
        for mb in &self.fabric.mailboxes {
            mb.close(self.rank);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    const T: Duration = Duration::from_secs(5);

    #[test]
    fn round_trip_is_bitwise() {
        let eps = inprocess_world(2, T);
        let payload = vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300];
        eps[0].send(1, 3, &payload).unwrap();
        let m = eps[1].recv(0, 3).unwrap();
        assert_eq!(m.source, 0);
        assert!(m.payload.iter().zip(&payload).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn fifo_and_tag_isolation() {
        let eps = inprocess_world(2, T);
        eps[0].send(1, 7, &[1.0]).unwrap();
        eps[0].send(1, 8, &[9.0]).unwrap();
        eps[0].send(1, 7, &[2.0]).unwrap();
        assert_eq!(eps[1].recv(0, 7).unwrap().payload, vec![1.0]);
        assert_eq!(eps[1].recv(0, 7).unwrap().payload, vec![2.0]);
        assert_eq!(eps[1].recv(0, 8).unwrap().payload, vec![9.0]);
        assert!(matches!(
            eps[1].recv_timeout(0, 7, Duration::from_millis(10)),
            Err(TransportError::Timeout { .. })
        ));
    }

    #[test]
    fn unknown_rank_and_disconnect() {
        let mut eps = inprocess_world(4, T);
        assert!(matches!(
            eps[0].send(99, 0, &[]),
            Err(TransportError::UnknownRank { rank: 99, world: 4 })
        ));
        let gone = eps.pop().unwrap();
        gone.send(0, 1, &[4.0]).unwrap();
        drop(gone);
        assert_eq!(eps[0].recv(3, 1).unwrap().payload, vec![4.0]);
        assert!(matches!(eps[0].recv(3, 1), Err(TransportError::Closed { peer: 3 })));
        assert!(matches!(
            eps[0].send(3, 1, &[]),
            Err(TransportError::Closed { peer: 3 })
        ));
    }

    #[test]
    fn recv_wakes_on_late_send() {
        let mut eps = inprocess_world(2, T).into_iter();
        let a = eps.next().unwrap();
        let b = eps.next().unwrap();
        let h = thread::spawn(move || b.recv(0, 1).unwrap().payload);
        thread::sleep(Duration::from_millis(20));
        a.send(1, 1, &[5.0]).unwrap();
        assert_eq!(h.join().unwrap(), vec![5.0]);
    }
}
