//! UDP control server. One network thread owns the socket, the session, the
//! duplicate-suppression cache and the outbound batch stream; one worker
//! thread owns the engine and advances emulation between commands. Commands
//! cross over a channel, so the engine sees them strictly in arrival order.

use std::collections::VecDeque;
use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::codec::AcqPacket;
use crate::config::{ReliabilityConfig, Scenario, ServerConfig};
use crate::proto::{
    self, caps, decode_frame, encode_frame, DataBatch, Frame, HelloReply, Opcode,
    PayloadError, Status, MAX_BATCH_PACKETS,
};
use crate::server::engine::{Engine, EngineError};

const DEDUP_WINDOW: usize = 256;
const SOCKET_POLL: Duration = Duration::from_millis(5);

enum EngineCmd {
    SetSap(crate::sap::SapConfig),
    SetDds(proto::SetDdsCmd),
    SetPwm(proto::SetPwmCmd),
    SetBias(proto::SetBiasCmd),
    SetScenario(Box<Scenario>),
    Arm,
    SoftTrigger,
    Stop,
    Status,
    Read { offset: u32, count: u16 },
}

enum EngineReply {
    Done(Result<(), EngineError>),
    Status(Box<proto::StatusReport>),
    Packets(Result<Vec<AcqPacket>, EngineError>),
}

fn handle_cmd(engine: &mut Engine, cmd: EngineCmd) -> EngineReply {
    match cmd {
        EngineCmd::SetSap(cfg) => EngineReply::Done(engine.set_sap(cfg)),
        EngineCmd::SetDds(c) => EngineReply::Done(engine.set_dds(&c)),
        EngineCmd::SetPwm(c) => EngineReply::Done(engine.set_pwm(&c)),
        EngineCmd::SetBias(c) => EngineReply::Done(engine.set_bias(&c)),
        EngineCmd::SetScenario(s) => EngineReply::Done(engine.set_scenario(*s)),
        EngineCmd::Arm => EngineReply::Done(engine.arm()),
        EngineCmd::SoftTrigger => EngineReply::Done(engine.soft_trigger()),
        EngineCmd::Stop => {
            engine.stop();
            EngineReply::Done(Ok(()))
        }
        EngineCmd::Status => EngineReply::Status(Box::new(engine.status())),
        EngineCmd::Read { offset, count } => EngineReply::Packets(engine.read(offset, count)),
    }
}

fn worker_loop(mut engine: Engine, rx: Receiver<(EngineCmd, Sender<EngineReply>)>) {
    loop {
        loop {
            match rx.try_recv() {
                Ok((cmd, reply)) => {
                    let _ = reply.send(handle_cmd(&mut engine, cmd));
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return,
            }
        }
        if !engine.pump() {
            // nothing to emulate: park on the queue instead of spinning
            match rx.recv_timeout(SOCKET_POLL) {
                Ok((cmd, reply)) => {
                    let _ = reply.send(handle_cmd(&mut engine, cmd));
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
        }
    }
}

/// In-flight SET_ENV reassembly; chunks must arrive in order.
struct EnvAssembly {
    total: u16,
    next: u16,
    bytes: Vec<u8>,
}

/// Outbound stop-and-wait batch stream for one READ.
struct BatchStream {
    frames: Vec<Vec<u8>>,
    cursor: usize,
    /// Transmissions of the cursor batch so far.
    attempts: u32,
    deadline: Instant,
}

struct Session {
    peer: SocketAddr,
    last_seen: Instant,
    /// Recent (seq, response bytes): a retransmitted command is answered from
    /// here without re-executing, which makes retries of non-idempotent
    /// commands (ARM, continuous READ) safe.
    dedup: VecDeque<(u16, Vec<u8>)>,
    env: Option<EnvAssembly>,
    stream: Option<BatchStream>,
}

impl Session {
    fn new(peer: SocketAddr) -> Self {
        Session {
            peer,
            last_seen: Instant::now(),
            dedup: VecDeque::with_capacity(DEDUP_WINDOW),
            env: None,
            stream: None,
        }
    }

    fn cached(&self, seq: u16) -> Option<&Vec<u8>> {
        self.dedup.iter().find(|(s, _)| *s == seq).map(|(_, b)| b)
    }

    fn cache(&mut self, seq: u16, bytes: Vec<u8>) {
        if self.dedup.len() == DEDUP_WINDOW {
            self.dedup.pop_front();
        }
        self.dedup.push_back((seq, bytes));
    }
}

struct Net {
    socket: UdpSocket,
    cmd_tx: Sender<(EngineCmd, Sender<EngineReply>)>,
    reliability: ReliabilityConfig,
    idle_timeout: Duration,
    session: Option<Session>,
    malformed: u32,
    stop: Arc<AtomicBool>,
}

impl Net {
    fn engine(&self, cmd: EngineCmd) -> EngineReply {
        let (tx, rx) = mpsc::channel();
        self.cmd_tx.send((cmd, tx)).expect("engine worker alive");
        rx.recv().expect("engine worker replies")
    }

    fn engine_status_payload(&self, result: Result<(), EngineError>) -> Vec<u8> {
        let status = match result {
            Ok(()) => Status::Ok,
            Err(e) => e.status(),
        };
        proto::encode_status_only(status)
    }

    fn send(&self, to: SocketAddr, bytes: &[u8]) {
        // datagram sends are best-effort; the retry protocol covers losses
        let _ = self.socket.send_to(bytes, to);
    }

    fn reply_frame(&self, opcode: u8, seq: u16, payload: Vec<u8>) -> Vec<u8> {
        encode_frame(&Frame { opcode, seq, payload }).expect("response fits one datagram")
    }

    fn run(&mut self) {
        let mut buf = [0u8; 2048];
        while !self.stop.load(Ordering::Relaxed) {
            self.pump_retransmit();
            match self.socket.recv_from(&mut buf) {
                Ok((n, addr)) => self.on_datagram(&buf[..n], addr),
                Err(e)
                    if e.kind() == io::ErrorKind::WouldBlock
                        || e.kind() == io::ErrorKind::TimedOut => {}
                // e.g. ICMP port-unreachable surfacing on Linux; keep serving
                Err(_) => {}
            }
        }
    }

    fn pump_retransmit(&mut self) {
        let Some(session) = self.session.as_mut() else { return };
        let peer = session.peer;
        let max_attempts = self.reliability.max_attempts;
        let timeout = Duration::from_millis(self.reliability.ack_timeout_ms);
        let Some(st) = session.stream.as_mut() else { return };
        if Instant::now() < st.deadline {
            return;
        }
        if st.attempts >= max_attempts {
            // receiver is gone; abandon the stream, the data stays readable
            session.stream = None;
            return;
        }
        st.attempts += 1;
        st.deadline = Instant::now() + timeout;
        let bytes = st.frames[st.cursor].clone();
        self.send(peer, &bytes);
    }

    fn on_datagram(&mut self, bytes: &[u8], addr: SocketAddr) {
        let frame = match decode_frame(bytes) {
            Ok(f) => f,
            Err(_) => {
                self.malformed = self.malformed.wrapping_add(1);
                return;
            }
        };
        if frame.opcode == Opcode::Hello as u8 {
            self.on_hello(frame, addr);
            return;
        }
        let Some(session) = self.session.as_mut() else {
            let out = self.reply_frame(
                frame.opcode,
                frame.seq,
                proto::encode_status_only(Status::ErrState),
            );
            self.send(addr, &out);
            return;
        };
        if session.peer != addr {
            let out = self.reply_frame(
                frame.opcode,
                frame.seq,
                proto::encode_status_only(Status::ErrState),
            );
            self.send(addr, &out);
            return;
        }
        session.last_seen = Instant::now();
        if frame.opcode == Opcode::Ack as u8 {
            self.on_ack(&frame);
            return;
        }
        if let Some(cached) = session.cached(frame.seq) {
            let out = cached.clone();
            self.send(addr, &out);
            return;
        }
        let payload = self.dispatch(&frame);
        let out = self.reply_frame(frame.opcode, frame.seq, payload);
        let session = self.session.as_mut().expect("session checked above");
        session.cache(frame.seq, out.clone());
        self.send(addr, &out);
    }

    fn on_hello(&mut self, frame: Frame, addr: SocketAddr) {
        let takeover = match &self.session {
            None => true,
            Some(s) => s.peer == addr || s.last_seen.elapsed() >= self.idle_timeout,
        };
        if !takeover {
            let out = self.reply_frame(
                frame.opcode,
                frame.seq,
                proto::encode_status_only(Status::ErrState),
            );
            self.send(addr, &out);
            return;
        }
        self.session = Some(Session::new(addr));
        let reply = HelloReply { identity: proto::IDENTITY.into(), capabilities: caps::ALL };
        let out = self.reply_frame(frame.opcode, frame.seq, proto::encode_hello_reply(&reply));
        let session = self.session.as_mut().expect("just created");
        session.cache(frame.seq, out.clone());
        self.send(addr, &out);
    }

    fn on_ack(&mut self, frame: &Frame) {
        // ACK is pure flow control: never cached, never answered
        let Ok(index) = proto::decode_ack(&frame.payload) else {
            self.malformed = self.malformed.wrapping_add(1);
            return;
        };
        let timeout = Duration::from_millis(self.reliability.ack_timeout_ms);
        let session = self.session.as_mut().expect("caller checked");
        let peer = session.peer;
        let Some(st) = session.stream.as_mut() else { return };
        if index as usize != st.cursor {
            return;
        }
        st.cursor += 1;
        if st.cursor == st.frames.len() {
            session.stream = None;
            return;
        }
        st.attempts = 1;
        st.deadline = Instant::now() + timeout;
        let bytes = st.frames[st.cursor].clone();
        self.send(peer, &bytes);
    }

    /// Execute one non-HELLO, non-ACK command and produce the response
    /// payload. READ also installs the batch stream on the session.
    fn dispatch(&mut self, frame: &Frame) -> Vec<u8> {
        let opcode = match Opcode::try_from(frame.opcode) {
            Ok(op) => op,
            Err(_) => return proto::encode_status_only(Status::ErrOpcode),
        };
        let p = &frame.payload;
        match opcode {
            Opcode::Hello | Opcode::Ack => unreachable!("handled by caller"),
            Opcode::SetSap => match proto::decode_sap_config(p) {
                Ok(cfg) => {
                    let r = self.engine(EngineCmd::SetSap(cfg));
                    self.done_payload(r)
                }
                Err(e) => self.payload_error(e),
            },
            Opcode::SetDds => match proto::decode_set_dds(p) {
                Ok(c) => {
                    let r = self.engine(EngineCmd::SetDds(c));
                    self.done_payload(r)
                }
                Err(e) => self.payload_error(e),
            },
            Opcode::SetPwm => match proto::decode_set_pwm(p) {
                Ok(c) => {
                    let r = self.engine(EngineCmd::SetPwm(c));
                    self.done_payload(r)
                }
                Err(e) => self.payload_error(e),
            },
            Opcode::SetBias => match proto::decode_set_bias(p) {
                Ok(c) => {
                    let r = self.engine(EngineCmd::SetBias(c));
                    self.done_payload(r)
                }
                Err(e) => self.payload_error(e),
            },
            Opcode::SetEnv => match proto::decode_set_env(p) {
                Ok(c) => self.on_env_chunk(c),
                Err(e) => self.payload_error(e),
            },
            Opcode::Arm => {
                let r = self.engine(EngineCmd::Arm);
                self.done_payload(r)
            }
            Opcode::SoftTrigger => {
                let r = self.engine(EngineCmd::SoftTrigger);
                self.done_payload(r)
            }
            Opcode::Stop => {
                let r = self.engine(EngineCmd::Stop);
                self.done_payload(r)
            }
            Opcode::Status => match self.engine(EngineCmd::Status) {
                EngineReply::Status(mut rep) => {
                    rep.malformed_datagrams = self.malformed;
                    proto::encode_status_report(&rep)
                }
                _ => unreachable!("status reply shape"),
            },
            Opcode::Read => match proto::decode_read(p) {
                Ok(c) => self.on_read(frame, c),
                Err(e) => self.payload_error(e),
            },
        }
    }

    fn done_payload(&self, r: EngineReply) -> Vec<u8> {
        match r {
            EngineReply::Done(res) => self.engine_status_payload(res),
            _ => unreachable!("done reply shape"),
        }
    }

    fn payload_error(&self, e: PayloadError) -> Vec<u8> {
        let status = match e {
            PayloadError::Truncated => Status::ErrLength,
            PayloadError::BadValue(_) => Status::ErrParam,
        };
        proto::encode_status_only(status)
    }

    fn on_env_chunk(&mut self, chunk: proto::SetEnvChunk) -> Vec<u8> {
        let session = self.session.as_mut().expect("caller checked");
        let assembly = if chunk.chunk_index == 0 {
            session.env =
                Some(EnvAssembly { total: chunk.total_chunks, next: 0, bytes: Vec::new() });
            session.env.as_mut().expect("just set")
        } else {
            match session.env.as_mut() {
                Some(a) if a.total == chunk.total_chunks && a.next == chunk.chunk_index => a,
                _ => {
                    session.env = None;
                    return proto::encode_status_only(Status::ErrParam);
                }
            }
        };
        assembly.bytes.extend_from_slice(&chunk.bytes);
        assembly.next += 1;
        if assembly.next < assembly.total {
            return proto::encode_status_only(Status::Ok);
        }
        let bytes = session.env.take().expect("assembly complete").bytes;
        match serde_json::from_slice::<Scenario>(&bytes) {
            Ok(s) => {
                let r = self.engine(EngineCmd::SetScenario(Box::new(s)));
                self.done_payload(r)
            }
            Err(_) => proto::encode_status_only(Status::ErrParam),
        }
    }

    fn on_read(&mut self, frame: &Frame, cmd: proto::ReadCmd) -> Vec<u8> {
        let packets = match self.engine(EngineCmd::Read { offset: cmd.offset, count: cmd.count }) {
            EngineReply::Packets(Ok(p)) => p,
            EngineReply::Packets(Err(e)) => return proto::encode_status_only(e.status()),
            _ => unreachable!("read reply shape"),
        };
        let total = packets.len().div_ceil(MAX_BATCH_PACKETS);
        if total == 0 {
            let empty =
                DataBatch { status: Status::Ok, batch_index: 0, total_batches: 0, packets: vec![] };
            return proto::encode_batch(&empty);
        }
        let frames: Vec<Vec<u8>> = packets
            .chunks(MAX_BATCH_PACKETS)
            .enumerate()
            .map(|(j, chunk)| {
                let b = DataBatch {
                    status: Status::Ok,
                    batch_index: j as u16,
                    total_batches: total as u16,
                    packets: chunk.to_vec(),
                };
                self.reply_frame(frame.opcode, frame.seq, proto::encode_batch(&b))
            })
            .collect();
        let first_payload = proto::encode_batch(&DataBatch {
            status: Status::Ok,
            batch_index: 0,
            total_batches: total as u16,
            packets: packets[..packets.len().min(MAX_BATCH_PACKETS)].to_vec(),
        });
        let timeout = Duration::from_millis(self.reliability.ack_timeout_ms);
        let session = self.session.as_mut().expect("caller checked");
        session.stream = Some(BatchStream {
            frames,
            cursor: 0,
            attempts: 1,
            deadline: Instant::now() + timeout,
        });
        first_payload
    }
}

/// Running server handle. Dropping it (or calling `shutdown`) stops both
/// threads and releases the port.
pub struct Server {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    net: Option<JoinHandle<()>>,
    worker: Option<JoinHandle<()>>,
}

impl Server {
    /// Bind `0.0.0.0:port` (port 0 picks an ephemeral one) and start serving.
    /// Fails fast when the port is taken.
    pub fn spawn(config: ServerConfig) -> io::Result<Server> {
        let socket = UdpSocket::bind(("0.0.0.0", config.port))?;
        socket.set_read_timeout(Some(SOCKET_POLL))?;
        let local_addr = socket.local_addr()?;
        let engine = Engine::new(config.seed, config.scenario.clone(), config.store_capacity);
        let stop = Arc::new(AtomicBool::new(false));
        let (cmd_tx, cmd_rx) = mpsc::channel();
        let worker = std::thread::Builder::new()
            .name("spindaq-engine".into())
            .spawn(move || worker_loop(engine, cmd_rx))?;
        let mut net = Net {
            socket,
            cmd_tx,
            reliability: config.reliability,
            idle_timeout: Duration::from_millis(config.session_idle_timeout_ms),
            session: None,
            malformed: 0,
            stop: Arc::clone(&stop),
        };
        let net_thread = std::thread::Builder::new()
            .name("spindaq-net".into())
            .spawn(move || net.run())?;
        Ok(Server { local_addr, stop, net: Some(net_thread), worker: Some(worker) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn shutdown(mut self) {
        self.join();
    }

    fn join(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.net.take() {
            let _ = h.join();
        }
        // net thread owned the last Sender; worker exits on disconnect
        if let Some(h) = self.worker.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.join();
    }
}
