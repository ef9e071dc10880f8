//! Client transport: one blocking UDP session with retransmission, duplicate
//! suppression by sequence number, and the receive side of the batched READ
//! stream. Commands are strictly stop-and-wait, matching the server.

use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::codec::AcqPacket;
use crate::config::{ReliabilityConfig, Scenario};
use crate::proto::{
    self, decode_frame, encode_frame, DataBatch, Frame, FrameError, Opcode, PayloadError, ReadCmd,
    SetBiasCmd, SetDdsCmd, SetEnvChunk, SetPwmCmd, Status, StatusReport, ENV_CHUNK_BYTES,
};
use crate::sap::SapConfig;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("socket error: {0}")]
    Io(#[from] io::Error),
    #[error("no response to opcode {opcode:#04x} after {attempts} attempts")]
    Timeout { opcode: u8, attempts: u32 },
    #[error("cannot encode request: {0}")]
    Frame(#[from] FrameError),
    #[error("malformed response payload: {0}")]
    Payload(#[from] PayloadError),
    #[error("device rejected the command: {0:?}")]
    Device(Status),
    #[error("protocol violation: {0}")]
    Protocol(&'static str),
}

/// Transport counters, mostly for loss-injection tests and diagnostics.
#[derive(Debug, Default, Clone, Copy)]
pub struct TransportStats {
    pub frames_sent: u64,
    pub retransmits: u64,
    pub responses: u64,
    pub timeouts: u64,
    /// Frames that did not match the outstanding exchange (late
    /// retransmissions, stale batches) and were dropped.
    pub stale_frames: u64,
    pub decode_errors: u64,
    /// Batch frames received more than once and re-acknowledged.
    pub duplicate_batches: u64,
}

pub struct Client {
    socket: UdpSocket,
    server: SocketAddr,
    seq: u16,
    reliability: ReliabilityConfig,
    stats: TransportStats,
    identity: String,
    capabilities: u32,
}

impl Client {
    /// Bind an ephemeral local port and open a session (HELLO handshake).
    pub fn connect(
        server: impl ToSocketAddrs,
        reliability: ReliabilityConfig,
    ) -> Result<Client, ClientError> {
        let server = server
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        let socket = UdpSocket::bind(("0.0.0.0", 0))?;
        let mut c = Client {
            socket,
            server,
            seq: 0,
            reliability,
            stats: TransportStats::default(),
            identity: String::new(),
            capabilities: 0,
        };
        let reply = c.hello()?;
        c.identity = reply.identity;
        c.capabilities = reply.capabilities;
        Ok(c)
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn capabilities(&self) -> u32 {
        self.capabilities
    }

    pub fn stats(&self) -> TransportStats {
        self.stats
    }

    pub fn server_addr(&self) -> SocketAddr {
        self.server
    }

    fn next_seq(&mut self) -> u16 {
        let s = self.seq;
        self.seq = self.seq.wrapping_add(1);
        s
    }

    /// Send one command and wait for its response frame, retransmitting the
    /// identical datagram on timeout. The server's duplicate cache makes this
    /// safe even for commands with side effects.
    fn request(&mut self, opcode: Opcode, payload: Vec<u8>) -> Result<Frame, ClientError> {
        let seq = self.next_seq();
        let bytes = encode_frame(&Frame::new(opcode, seq, payload))?;
        let timeout = Duration::from_millis(self.reliability.ack_timeout_ms);
        for attempt in 0..self.reliability.max_attempts {
            if attempt > 0 {
                self.stats.retransmits += 1;
            }
            self.socket.send_to(&bytes, self.server)?;
            self.stats.frames_sent += 1;
            if let Some(frame) = self.recv_matching(timeout, opcode as u8, seq)? {
                self.stats.responses += 1;
                return Ok(frame);
            }
            self.stats.timeouts += 1;
        }
        Err(ClientError::Timeout { opcode: opcode as u8, attempts: self.reliability.max_attempts })
    }

    /// Wait up to `timeout` for a frame with the given opcode and seq,
    /// discarding anything else that arrives meanwhile.
    fn recv_matching(
        &mut self,
        timeout: Duration,
        opcode: u8,
        seq: u16,
    ) -> Result<Option<Frame>, ClientError> {
        let deadline = Instant::now() + timeout;
        let mut buf = [0u8; 2048];
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Ok(None);
            }
            self.socket.set_read_timeout(Some(remaining))?;
            match self.socket.recv_from(&mut buf) {
                Ok((n, from)) => {
                    if from != self.server {
                        self.stats.stale_frames += 1;
                        continue;
                    }
                    match decode_frame(&buf[..n]) {
                        Ok(f) if f.opcode == opcode && f.seq == seq => return Ok(Some(f)),
                        Ok(_) => self.stats.stale_frames += 1,
                        Err(_) => self.stats.decode_errors += 1,
                    }
                }
                Err(e)
                    if e.kind() == io::ErrorKind::WouldBlock
                        || e.kind() == io::ErrorKind::TimedOut =>
                {
                    return Ok(None);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn expect_ok(payload: &[u8]) -> Result<(), ClientError> {
        let status = proto::response_status(payload)?;
        if status == Status::Ok {
            Ok(())
        } else {
            Err(ClientError::Device(status))
        }
    }

    pub fn hello(&mut self) -> Result<proto::HelloReply, ClientError> {
        let f = self.request(Opcode::Hello, Vec::new())?;
        let status = proto::response_status(&f.payload)?;
        if status != Status::Ok {
            return Err(ClientError::Device(status));
        }
        Ok(proto::decode_hello_reply(&f.payload)?)
    }

    pub fn set_sap(&mut self, cfg: &SapConfig) -> Result<(), ClientError> {
        let f = self.request(Opcode::SetSap, proto::encode_sap_config(cfg))?;
        Self::expect_ok(&f.payload)
    }

    pub fn set_dds(&mut self, cmd: &SetDdsCmd) -> Result<(), ClientError> {
        let f = self.request(Opcode::SetDds, proto::encode_set_dds(cmd))?;
        Self::expect_ok(&f.payload)
    }

    pub fn set_pwm(&mut self, cmd: &SetPwmCmd) -> Result<(), ClientError> {
        let f = self.request(Opcode::SetPwm, proto::encode_set_pwm(cmd))?;
        Self::expect_ok(&f.payload)
    }

    pub fn set_bias(&mut self, cmd: &SetBiasCmd) -> Result<(), ClientError> {
        let f = self.request(Opcode::SetBias, proto::encode_set_bias(cmd))?;
        Self::expect_ok(&f.payload)
    }

    /// Upload a scenario as chunked JSON. Each chunk is its own acknowledged
    /// command; the server applies the scenario after the last one.
    pub fn set_scenario(&mut self, scenario: &Scenario) -> Result<(), ClientError> {
        let json = serde_json::to_vec(scenario).expect("scenario serializes");
        let total = json.chunks(ENV_CHUNK_BYTES).count() as u16;
        for (i, bytes) in json.chunks(ENV_CHUNK_BYTES).enumerate() {
            let chunk = SetEnvChunk {
                chunk_index: i as u16,
                total_chunks: total,
                bytes: bytes.to_vec(),
            };
            let f = self.request(Opcode::SetEnv, proto::encode_set_env(&chunk))?;
            Self::expect_ok(&f.payload)?;
        }
        Ok(())
    }

    pub fn arm(&mut self) -> Result<(), ClientError> {
        let f = self.request(Opcode::Arm, Vec::new())?;
        Self::expect_ok(&f.payload)
    }

    pub fn soft_trigger(&mut self) -> Result<(), ClientError> {
        let f = self.request(Opcode::SoftTrigger, Vec::new())?;
        Self::expect_ok(&f.payload)
    }

    pub fn stop(&mut self) -> Result<(), ClientError> {
        let f = self.request(Opcode::Stop, Vec::new())?;
        Self::expect_ok(&f.payload)
    }

    pub fn status(&mut self) -> Result<StatusReport, ClientError> {
        let f = self.request(Opcode::Status, Vec::new())?;
        let status = proto::response_status(&f.payload)?;
        if status != Status::Ok {
            return Err(ClientError::Device(status));
        }
        Ok(proto::decode_status_report(&f.payload)?)
    }

    /// Poll STATUS until the armed run finishes. `budget` bounds wall time.
    pub fn wait_idle(&mut self, budget: Duration) -> Result<StatusReport, ClientError> {
        let deadline = Instant::now() + budget;
        loop {
            let st = self.status()?;
            if !st.running {
                return Ok(st);
            }
            if Instant::now() >= deadline {
                return Err(ClientError::Protocol("run still active after wait budget"));
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    fn send_ack(&mut self, batch_index: u16) -> Result<(), ClientError> {
        let seq = self.next_seq();
        let bytes = encode_frame(&Frame::new(Opcode::Ack, seq, proto::encode_ack(batch_index)))?;
        self.socket.send_to(&bytes, self.server)?;
        self.stats.frames_sent += 1;
        Ok(())
    }

    /// Wait for the next batch of an in-flight READ stream. The server
    /// retransmits unacknowledged batches, so the wait budget covers its
    /// whole give-up horizon.
    fn wait_batch(&mut self, read_seq: u16) -> Result<DataBatch, ClientError> {
        let timeout = Duration::from_millis(self.reliability.ack_timeout_ms)
            * (self.reliability.max_attempts + 1);
        match self.recv_matching(timeout, Opcode::Read as u8, read_seq)? {
            Some(f) => {
                let status = proto::response_status(&f.payload)?;
                if status != Status::Ok {
                    return Err(ClientError::Device(status));
                }
                Ok(proto::decode_batch(&f.payload)?)
            }
            None => Err(ClientError::Timeout {
                opcode: Opcode::Read as u8,
                attempts: self.reliability.max_attempts,
            }),
        }
    }

    /// One READ command: sequence/idle mode reads `count` packets starting at
    /// `offset`; continuous mode drains up to `count` from the ring. Returns
    /// fewer packets when less data is stored (that is not an error).
    pub fn read(&mut self, offset: u32, count: u16) -> Result<Vec<AcqPacket>, ClientError> {
        let first = self.request(Opcode::Read, proto::encode_read(&ReadCmd { offset, count }))?;
        let read_seq = first.seq;
        let status = proto::response_status(&first.payload)?;
        if status != Status::Ok {
            return Err(ClientError::Device(status));
        }
        let mut batch = proto::decode_batch(&first.payload)?;
        let total = batch.total_batches as usize;
        if total == 0 {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        let mut expected = 0usize;
        loop {
            let idx = batch.batch_index as usize;
            if idx == expected {
                out.extend_from_slice(&batch.packets);
                expected += 1;
            } else if idx < expected {
                self.stats.duplicate_batches += 1;
            } else {
                // stop-and-wait can't legally skip ahead
                return Err(ClientError::Protocol("batch index from the future"));
            }
            self.send_ack(idx as u16)?;
            if expected == total {
                return Ok(out);
            }
            batch = self.wait_batch(read_seq)?;
        }
    }

    /// Read a known-length packet store, paginating over the u16 per-command
    /// limit and retrying chunks whose stream died mid-flight. Only valid for
    /// sequence-mode data, where reads are idempotent.
    pub fn read_store(&mut self, total: usize) -> Result<Vec<AcqPacket>, ClientError> {
        let mut out: Vec<AcqPacket> = Vec::with_capacity(total);
        let mut failures = 0u32;
        while out.len() < total {
            let want = (total - out.len()).min(u16::MAX as usize) as u16;
            match self.read(out.len() as u32, want) {
                Ok(chunk) => {
                    if chunk.is_empty() {
                        return Err(ClientError::Protocol("store ended before expected total"));
                    }
                    failures = 0;
                    out.extend_from_slice(&chunk);
                }
                Err(ClientError::Timeout { .. }) if failures < 8 => {
                    // stream abandoned under loss; re-issue the same offsets
                    failures += 1;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}
