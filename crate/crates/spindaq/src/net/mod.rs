//! Network fault injection: a single-client UDP proxy that drops, duplicates
//! and delays datagrams in both directions. Used to exercise the
//! retransmission layer under hostile loopback conditions.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct FaultConfig {
    /// Probability a datagram is silently discarded.
    pub drop: f64,
    /// Probability a surviving datagram is sent twice.
    pub duplicate: f64,
    /// Probability a surviving datagram is held back so later traffic
    /// overtakes it.
    pub reorder: f64,
    /// How long a held-back datagram is delayed.
    pub reorder_delay: Duration,
    pub seed: u64,
}

impl Default for FaultConfig {
    fn default() -> Self {
        FaultConfig {
            drop: 0.30,
            duplicate: 0.10,
            reorder: 0.10,
            reorder_delay: Duration::from_millis(3),
            seed: 1,
        }
    }
}

struct Delayed {
    due: Instant,
    insertion: u64,
    dest: SocketAddr,
    bytes: Vec<u8>,
}

impl PartialEq for Delayed {
    fn eq(&self, other: &Self) -> bool {
        self.due == other.due && self.insertion == other.insertion
    }
}
impl Eq for Delayed {}
impl PartialOrd for Delayed {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Delayed {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // insertion index keeps equal deadlines FIFO
        (self.due, self.insertion).cmp(&(other.due, other.insertion))
    }
}

/// UDP proxy between one client and one upstream server. The first datagram
/// from any address other than the upstream is taken as the client; replies
/// from the upstream are forwarded back to it.
pub struct LossyProxy {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl LossyProxy {
    pub fn spawn(upstream: SocketAddr, faults: FaultConfig) -> io::Result<LossyProxy> {
        let socket = UdpSocket::bind(("127.0.0.1", 0))?;
        let local_addr = socket.local_addr()?;
        socket.set_read_timeout(Some(Duration::from_millis(1)))?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = Arc::clone(&stop);
        let thread = std::thread::Builder::new()
            .name("spindaq-lossy".into())
            .spawn(move || proxy_loop(socket, upstream, faults, &stop2))
            .expect("spawn proxy thread");
        Ok(LossyProxy { local_addr, stop, thread: Some(thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }
}

impl Drop for LossyProxy {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn proxy_loop(socket: UdpSocket, upstream: SocketAddr, faults: FaultConfig, stop: &AtomicBool) {
    let mut rng = ChaCha8Rng::seed_from_u64(faults.seed);
    let mut client: Option<SocketAddr> = None;
    let mut pending: BinaryHeap<Reverse<Delayed>> = BinaryHeap::new();
    let mut insertion = 0u64;
    let mut buf = [0u8; 2048];
    while !stop.load(Ordering::Relaxed) {
        let now = Instant::now();
        while pending.peek().is_some_and(|Reverse(d)| d.due <= now) {
            let Reverse(d) = pending.pop().unwrap();
            let _ = socket.send_to(&d.bytes, d.dest);
        }
        let (n, src) = match socket.recv_from(&mut buf) {
            Ok(v) => v,
            Err(e)
                if e.kind() == io::ErrorKind::WouldBlock || e.kind() == io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(_) => continue,
        };
        let dest = if src == upstream {
            match client {
                Some(c) => c,
                None => continue, // upstream spoke first; nowhere to forward
            }
        } else {
            client = Some(src);
            upstream
        };
        if rng.random::<f64>() < faults.drop {
            continue;
        }
        let copies = if rng.random::<f64>() < faults.duplicate { 2 } else { 1 };
        for _ in 0..copies {
            if rng.random::<f64>() < faults.reorder {
                pending.push(Reverse(Delayed {
                    due: now + faults.reorder_delay,
                    insertion,
                    dest,
                    bytes: buf[..n].to_vec(),
                }));
                insertion += 1;
            } else {
                let _ = socket.send_to(&buf[..n], dest);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// With faults disabled the proxy is a transparent bidirectional relay.
    #[test]
    fn clean_proxy_relays_both_directions() {
        let server = UdpSocket::bind(("127.0.0.1", 0)).unwrap();
        server.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
        let faults = FaultConfig { drop: 0.0, duplicate: 0.0, reorder: 0.0, ..Default::default() };
        let proxy = LossyProxy::spawn(server.local_addr().unwrap(), faults).unwrap();

        let client = UdpSocket::bind(("127.0.0.1", 0)).unwrap();
        client.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
        client.send_to(b"ping", proxy.local_addr()).unwrap();

        let mut buf = [0u8; 64];
        let (n, from) = server.recv_from(&mut buf).unwrap();
        assert_eq!(&buf[..n], b"ping");
        server.send_to(b"pong", from).unwrap();

        let (n, _) = client.recv_from(&mut buf).unwrap();
        assert_eq!(&buf[..n], b"pong");
    }

    /// Statistical sanity: with drop = 1.0 nothing gets through.
    #[test]
    fn full_loss_blocks_everything() {
        let server = UdpSocket::bind(("127.0.0.1", 0)).unwrap();
        server.set_read_timeout(Some(Duration::from_millis(100))).unwrap();
        let faults = FaultConfig { drop: 1.0, ..Default::default() };
        let proxy = LossyProxy::spawn(server.local_addr().unwrap(), faults).unwrap();

        let client = UdpSocket::bind(("127.0.0.1", 0)).unwrap();
        for _ in 0..20 {
            client.send_to(b"x", proxy.local_addr()).unwrap();
        }
        let mut buf = [0u8; 8];
        assert!(server.recv_from(&mut buf).is_err());
    }
}
