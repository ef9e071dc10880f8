//! Sampling processor: turns trigger events into acquisition packets.
//!
//! Two patterns exist. Sequence mode serves stepped experiments: each
//! accepted trigger opens one window of `window_ns` after `delay_ns`, both on
//! the 8 ns ADC grid, and produces exactly one packet carrying the per-window
//! channel means and the digital edge count. Continuous mode free-runs: one
//! packet per `decimation` ticks into a bounded ring, for streaming
//! measurements that must not pause.
//!
//! Time here is emulated nanoseconds. Nothing in this module sleeps; the
//! caller advances time by feeding triggers or span deadlines, which is what
//! makes runs bit-reproducible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{voltage_to_signed, AcqPacket};
use crate::msg::TICK_NS;

/// Hard ceiling for delay and window, per the 35-bit timing registers.
pub const TIMING_MAX_NS: u64 = 1 << 35;
/// Ring buffer depth in packets (64 KB of 16-byte packets).
pub const RING_CAPACITY: usize = 4096;
/// Largest continuous-mode read.
pub const READ_MAX: u16 = 4096;
/// Points are addressed by a 16-bit field in the packet.
pub const POINTS_MAX: u32 = 65_536;
/// Sanity bound on repeat counts so the trigger budget fits comfortably in u64.
pub const REPEATS_MAX: u32 = 1 << 20;

#[derive(Debug, Error, PartialEq)]
pub enum SapError {
    #[error("delay {0} ns exceeds 35-bit timing range")]
    DelayTooLong(u64),
    #[error("window {0} ns exceeds 35-bit timing range")]
    WindowTooLong(u64),
    #[error("window {0} ns is not a positive multiple of 8 ns x decimation {1}")]
    WindowNotAligned(u64, u32),
    #[error("points {0} outside 1..=65536")]
    BadPoints(u32),
    #[error("repeat count {0} outside 1..=2^20")]
    BadRepeats(u32),
    #[error("continuous read max {0} exceeds ring depth {READ_MAX}")]
    BadReadMax(u16),
    #[error("decimation must be >= 1")]
    BadDecimation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    Sequence,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerSource {
    /// Rising edges of the on-board PWM channel.
    InternalPwm,
    /// Emulated external trigger input (periodic pulse generator).
    ExternalDi,
    /// Host-injected triggers via the SOFT_TRIGGER command.
    Software,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SapConfig {
    pub pattern: Pattern,
    pub trigger_source: TriggerSource,
    pub delay_ns: u64,
    pub window_ns: u64,
    /// Sequence length N.
    pub points: u32,
    /// Consecutive triggers per point, R.
    pub point_repeats: u32,
    /// Full sweeps, S.
    pub sweep_repeats: u32,
    /// Largest single continuous-mode read, M.
    pub continuous_read_max: u16,
    /// K: continuous mode emits one packet per K ticks; sequence mode samples
    /// the window on a K-tick stride. K = 1 reproduces the full 125 MSPS
    /// per-tick granularity.
    pub decimation: u32,
}

impl Default for SapConfig {
    fn default() -> Self {
        SapConfig {
            pattern: Pattern::Sequence,
            trigger_source: TriggerSource::InternalPwm,
            delay_ns: 0,
            window_ns: 16_000_000,
            points: 1000,
            point_repeats: 1,
            sweep_repeats: 1,
            continuous_read_max: READ_MAX,
            decimation: 1,
        }
    }
}

impl SapConfig {
    pub fn validate(&self) -> Result<(), SapError> {
        if self.delay_ns > TIMING_MAX_NS {
            return Err(SapError::DelayTooLong(self.delay_ns));
        }
        if self.window_ns > TIMING_MAX_NS {
            return Err(SapError::WindowTooLong(self.window_ns));
        }
        if self.decimation == 0 {
            return Err(SapError::BadDecimation);
        }
        let stride = TICK_NS * self.decimation as u64;
        if self.pattern == Pattern::Sequence
            && (self.window_ns == 0 || !self.window_ns.is_multiple_of(stride))
        {
            return Err(SapError::WindowNotAligned(self.window_ns, self.decimation));
        }
        if self.points == 0 || self.points > POINTS_MAX {
            return Err(SapError::BadPoints(self.points));
        }
        for reps in [self.point_repeats, self.sweep_repeats] {
            if reps == 0 || reps > REPEATS_MAX {
                return Err(SapError::BadRepeats(reps));
            }
        }
        if self.continuous_read_max > READ_MAX {
            return Err(SapError::BadReadMax(self.continuous_read_max));
        }
        Ok(())
    }

    /// Total triggers a full sequence run consumes.
    pub fn total_triggers(&self) -> u64 {
        self.points as u64 * self.point_repeats as u64 * self.sweep_repeats as u64
    }
}

/// Position of one trigger within the sweep/point/repeat nest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggerIndex {
    pub sweep: u32,
    pub point: u32,
    pub repeat: u32,
}

/// Decompose a running trigger count; repeats cycle fastest, then points,
/// then sweeps. `None` once the sequence budget is exhausted (that is a
/// completion signal, not an error).
pub fn classify_trigger(count: u64, cfg: &SapConfig) -> Option<TriggerIndex> {
    if count >= cfg.total_triggers() {
        return None;
    }
    let r = cfg.point_repeats as u64;
    let n = cfg.points as u64;
    Some(TriggerIndex {
        repeat: (count % r) as u32,
        point: ((count / r) % n) as u32,
        sweep: (count / (r * n)) as u32,
    })
}

/// Signal inputs the processor samples: two analog channels and one digital
/// edge counter. `di_edges` is called with non-overlapping ascending spans,
/// so stateful (e.g. Poisson) sources stay reproducible.
pub trait SignalBundle {
    fn ai1_volts(&mut self, t_ns: u64) -> f64;
    fn ai2_volts(&mut self, t_ns: u64) -> f64;
    fn di_edges(&mut self, t0_ns: u64, t1_ns: u64) -> u64;
}

fn mean_code(sum: i64, n: u64) -> i16 {
    // |sum| < 2^13 * 2^32 samples, well inside f64's exact-integer range
    (sum as f64 / n as f64).round() as i16
}

/// Acquire one window: both analog channels sampled at `trigger + delay`,
/// `+delay + 8K`, ... across `window_ns`, per-window means rounded half away
/// from zero; digital edges counted over the whole window span.
pub fn run_window(
    cfg: &SapConfig,
    trigger_time_ns: u64,
    point_index: u16,
    sources: &mut impl SignalBundle,
) -> AcqPacket {
    let start = trigger_time_ns + cfg.delay_ns;
    let stride = TICK_NS * cfg.decimation as u64;
    let samples = cfg.window_ns / stride;
    let mut sum1 = 0i64;
    let mut sum2 = 0i64;
    for j in 0..samples {
        let t = start + j * stride;
        sum1 += voltage_to_signed(sources.ai1_volts(t)) as i64;
        sum2 += voltage_to_signed(sources.ai2_volts(t)) as i64;
    }
    let edges = sources.di_edges(start, start + cfg.window_ns);
    AcqPacket {
        timestamp_ns: start,
        point_index,
        ch1: mean_code(sum1, samples),
        ch2: mean_code(sum2, samples),
        photon_count: edges.min(u32::MAX as u64) as u32,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerOutcome {
    Accepted,
    /// Trigger arrived before the previous window closed.
    Dropped,
    /// Sequence budget already consumed.
    Complete,
}

/// State machine for one armed sequence run.
#[derive(Debug)]
pub struct SequenceRun {
    cfg: SapConfig,
    accepted: u64,
    dropped: u64,
    window_close_ns: u64,
}

impl SequenceRun {
    pub fn new(cfg: SapConfig) -> Result<Self, SapError> {
        cfg.validate()?;
        Ok(SequenceRun { cfg, accepted: 0, dropped: 0, window_close_ns: 0 })
    }

    pub fn is_complete(&self) -> bool {
        self.accepted >= self.cfg.total_triggers()
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn config(&self) -> &SapConfig {
        &self.cfg
    }

    /// End of the most recent accepted window; the next trigger must not
    /// arrive before this.
    pub fn window_close_ns(&self) -> u64 {
        self.window_close_ns
    }

    /// Feed one trigger edge. Returns the packet (plus its index) when the
    /// trigger is accepted.
    pub fn on_trigger(
        &mut self,
        t_ns: u64,
        sources: &mut impl SignalBundle,
    ) -> (TriggerOutcome, Option<(TriggerIndex, AcqPacket)>) {
        let Some(index) = classify_trigger(self.accepted, &self.cfg) else {
            return (TriggerOutcome::Complete, None);
        };
        if self.accepted > 0 && t_ns < self.window_close_ns {
            self.dropped += 1;
            return (TriggerOutcome::Dropped, None);
        }
        self.accepted += 1;
        self.window_close_ns = t_ns + self.cfg.delay_ns + self.cfg.window_ns;
        let packet = run_window(&self.cfg, t_ns, index.point as u16, sources);
        (TriggerOutcome::Accepted, Some((index, packet)))
    }
}

/// Drive a whole sequence from an in-process trigger schedule. Returns the
/// packets plus the dropped-trigger count.
pub fn run_sequence(
    cfg: SapConfig,
    triggers: impl IntoIterator<Item = u64>,
    sources: &mut impl SignalBundle,
) -> Result<(Vec<AcqPacket>, u64), SapError> {
    let mut run = SequenceRun::new(cfg)?;
    let mut packets = Vec::with_capacity(cfg.total_triggers() as usize);
    for t in triggers {
        if run.is_complete() {
            break;
        }
        if let (_, Some((_, p))) = run.on_trigger(t, sources) {
            packets.push(p);
        }
    }
    Ok((packets, run.dropped()))
}

/// Bounded packet ring mirroring the 64 KB acquisition BRAM: newest data
/// overwrites oldest, reads drain in chronological order.
#[derive(Debug)]
pub struct RingBuffer {
    buf: Vec<AcqPacket>,
    capacity: u64,
    written: u64,
    consumed: u64,
}

impl RingBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        RingBuffer {
            buf: Vec::with_capacity(capacity),
            capacity: capacity as u64,
            written: 0,
            consumed: 0,
        }
    }

    pub fn push(&mut self, p: AcqPacket) {
        let slot = (self.written % self.capacity) as usize;
        if self.buf.len() <= slot {
            self.buf.push(p);
        } else {
            self.buf[slot] = p;
        }
        self.written += 1;
    }

    /// Packets currently readable: written, not consumed, not overwritten.
    pub fn available(&self) -> u64 {
        self.written - self.oldest_live()
    }

    fn oldest_live(&self) -> u64 {
        self.consumed.max(self.written.saturating_sub(self.capacity))
    }

    /// Pop up to `max` packets in chronological order and mark them consumed.
    /// Packets lost to overwrite before being read are skipped silently; the
    /// survivors always form a contiguous run.
    pub fn read(&mut self, max: u64) -> Vec<AcqPacket> {
        let start = self.oldest_live();
        let n = max.min(self.written - start);
        let mut out = Vec::with_capacity(n as usize);
        for i in start..start + n {
            out.push(self.buf[(i % self.capacity) as usize]);
        }
        self.consumed = start + n;
        out
    }
}

/// Free-running continuous acquisition: one packet per K ticks into the ring.
/// The channel values are the mean over all K ticks of the span; the count is
/// the digital edges inside the span. `point_index` carries the span index
/// modulo 2^16 so consumers can spot gaps.
#[derive(Debug)]
pub struct ContinuousRun {
    cfg: SapConfig,
    ring: RingBuffer,
    next_span_start_ns: u64,
    spans_emitted: u64,
}

impl ContinuousRun {
    pub fn new(cfg: SapConfig, start_ns: u64) -> Result<Self, SapError> {
        cfg.validate()?;
        Ok(ContinuousRun {
            cfg,
            ring: RingBuffer::new(RING_CAPACITY),
            next_span_start_ns: start_ns,
            spans_emitted: 0,
        })
    }

    pub fn spans_emitted(&self) -> u64 {
        self.spans_emitted
    }

    pub fn ring(&mut self) -> &mut RingBuffer {
        &mut self.ring
    }

    pub fn ring_available(&self) -> u64 {
        self.ring.available()
    }

    /// Emulate forward to `until_ns`, emitting every span that closes at or
    /// before it. Partial spans wait for the next call.
    pub fn advance(&mut self, until_ns: u64, sources: &mut impl SignalBundle) {
        let span_ns = TICK_NS * self.cfg.decimation as u64;
        let k = self.cfg.decimation as u64;
        while self.next_span_start_ns + span_ns <= until_ns {
            let start = self.next_span_start_ns;
            let mut sum1 = 0i64;
            let mut sum2 = 0i64;
            for j in 0..k {
                let t = start + j * TICK_NS;
                sum1 += voltage_to_signed(sources.ai1_volts(t)) as i64;
                sum2 += voltage_to_signed(sources.ai2_volts(t)) as i64;
            }
            let edges = sources.di_edges(start, start + span_ns);
            self.ring.push(AcqPacket {
                timestamp_ns: start,
                point_index: (self.spans_emitted % 65_536) as u16,
                ch1: mean_code(sum1, k),
                ch2: mean_code(sum2, k),
                photon_count: edges.min(u32::MAX as u64) as u32,
            });
            self.spans_emitted += 1;
            self.next_span_start_ns += span_ns;
        }
    }
}

/// Count of pulse-train edges (period `p` ns, edges at multiples of `p`)
/// inside [t0, t1). Used by deterministic test sources and the emulated
/// external trigger input.
pub fn pulse_edges_in(period_ns: u64, t0_ns: u64, t1_ns: u64) -> u64 {
    let ceil_div = |x: u64, p: u64| x.div_ceil(p);
    ceil_div(t1_ns, period_ns) - ceil_div(t0_ns, period_ns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Mock {
        ai1: Box<dyn FnMut(u64) -> f64>,
        ai2: Box<dyn FnMut(u64) -> f64>,
        di_period: u64,
        ai1_calls: u64,
    }

    impl Mock {
        fn constant(v1: f64, v2: f64, di_period: u64) -> Self {
            Mock {
                ai1: Box::new(move |_| v1),
                ai2: Box::new(move |_| v2),
                di_period,
                ai1_calls: 0,
            }
        }
    }

    impl SignalBundle for Mock {
        fn ai1_volts(&mut self, t: u64) -> f64 {
            self.ai1_calls += 1;
            (self.ai1)(t)
        }
        fn ai2_volts(&mut self, t: u64) -> f64 {
            (self.ai2)(t)
        }
        fn di_edges(&mut self, t0: u64, t1: u64) -> u64 {
            if self.di_period == 0 {
                0
            } else {
                pulse_edges_in(self.di_period, t0, t1)
            }
        }
    }

    fn seq_cfg(n: u32, r: u32, s: u32) -> SapConfig {
        SapConfig {
            points: n,
            point_repeats: r,
            sweep_repeats: s,
            window_ns: 800,
            ..SapConfig::default()
        }
    }

    #[test]
    fn classify_nesting() {
        let cfg = seq_cfg(3, 2, 2);
        assert_eq!(
            classify_trigger(0, &cfg),
            Some(TriggerIndex { sweep: 0, point: 0, repeat: 0 })
        );
        assert_eq!(
            classify_trigger(7, &cfg),
            Some(TriggerIndex { sweep: 1, point: 0, repeat: 1 })
        );
        assert_eq!(
            classify_trigger(11, &cfg),
            Some(TriggerIndex { sweep: 1, point: 2, repeat: 1 })
        );
        assert_eq!(classify_trigger(12, &cfg), None);
    }

    #[test]
    fn classify_matches_loop_enumeration() {
        for n in 1..=4u32 {
            for r in 1..=4u32 {
                for s in 1..=4u32 {
                    let cfg = seq_cfg(n, r, s);
                    let mut count = 0u64;
                    for sweep in 0..s {
                        for point in 0..n {
                            for repeat in 0..r {
                                assert_eq!(
                                    classify_trigger(count, &cfg),
                                    Some(TriggerIndex { sweep, point, repeat })
                                );
                                count += 1;
                            }
                        }
                    }
                    assert_eq!(classify_trigger(count, &cfg), None);
                }
            }
        }
    }

    #[test]
    fn config_limits() {
        let mut cfg = SapConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.window_ns = TIMING_MAX_NS + 8;
        assert!(matches!(cfg.validate(), Err(SapError::WindowTooLong(_))));
        cfg.window_ns = 12; // not a multiple of 8
        assert!(matches!(cfg.validate(), Err(SapError::WindowNotAligned(12, 1))));
        cfg.window_ns = 16;
        cfg.decimation = 4; // 16 ns window cannot hold a 32 ns stride
        assert!(matches!(cfg.validate(), Err(SapError::WindowNotAligned(16, 4))));
        cfg = SapConfig { continuous_read_max: 5000, ..SapConfig::default() };
        assert!(matches!(cfg.validate(), Err(SapError::BadReadMax(5000))));
        cfg = SapConfig { points: 0, ..SapConfig::default() };
        assert!(matches!(cfg.validate(), Err(SapError::BadPoints(0))));
    }

    #[test]
    fn window_means_and_edge_count() {
        let cfg = seq_cfg(1, 1, 1);
        let mut src = Mock::constant(0.5, -0.25, 8);
        let p = run_window(&cfg, 1000, 7, &mut src);
        assert_eq!(p.timestamp_ns, 1000);
        assert_eq!(p.point_index, 7);
        assert_eq!(p.ch1, 4096);
        assert_eq!(p.ch2, -2048);
        // one DI pulse per 8 ns tick over an 800 ns window
        assert_eq!(p.photon_count, 100);
        assert_eq!(src.ai1_calls, 100);
    }

    #[test]
    fn window_mean_rounds_half_away_from_zero() {
        let cfg = SapConfig { window_ns: 16, ..seq_cfg(1, 1, 1) };
        // codes alternate 1, 2 -> mean 1.5 -> rounds to 2
        let mut src = Mock {
            ai1: Box::new(|t| if (t / 8) % 2 == 0 { 1.0 / 8192.0 } else { 2.0 / 8192.0 }),
            ai2: Box::new(|t| if (t / 8) % 2 == 0 { -1.0 / 8192.0 } else { -2.0 / 8192.0 }),
            di_period: 0,
            ai1_calls: 0,
        };
        let p = run_window(&cfg, 0, 0, &mut src);
        assert_eq!(p.ch1, 2);
        assert_eq!(p.ch2, -2);
    }

    #[test]
    fn full_rate_window_takes_two_million_samples() {
        let cfg = SapConfig { window_ns: 16_000_000, ..seq_cfg(1, 1, 1) };
        let mut src = Mock::constant(0.0, 0.0, 0);
        run_window(&cfg, 0, 0, &mut src);
        assert_eq!(src.ai1_calls, 2_000_000);
    }

    #[test]
    fn decimated_window_strides() {
        let cfg = SapConfig { window_ns: 8000, decimation: 10, ..seq_cfg(1, 1, 1) };
        let mut src = Mock::constant(0.1, 0.0, 0);
        run_window(&cfg, 0, 0, &mut src);
        assert_eq!(src.ai1_calls, 100);
    }

    #[test]
    fn sequence_point_order() {
        let cfg = seq_cfg(2, 3, 2);
        let mut src = Mock::constant(0.0, 0.0, 0);
        let triggers = (0..20u64).map(|i| i * 1000);
        let (packets, dropped) = run_sequence(cfg, triggers, &mut src).unwrap();
        assert_eq!(dropped, 0);
        let order: Vec<u16> = packets.iter().map(|p| p.point_index).collect();
        assert_eq!(order, [0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1]);
        let mut ts: Vec<u64> = packets.iter().map(|p| p.timestamp_ns).collect();
        let sorted = ts.clone();
        ts.sort_unstable();
        assert_eq!(ts, sorted, "timestamps must be monotone");
    }

    #[test]
    fn overlapping_trigger_dropped_not_counted_as_point() {
        let cfg = SapConfig { window_ns: 800, ..seq_cfg(2, 1, 1) };
        let mut run = SequenceRun::new(cfg).unwrap();
        let mut src = Mock::constant(0.0, 0.0, 0);
        let (o1, p1) = run.on_trigger(0, &mut src);
        assert_eq!(o1, TriggerOutcome::Accepted);
        assert_eq!(p1.unwrap().0.point, 0);
        // window closes at 800; a trigger at 500 lands inside it
        let (o2, p2) = run.on_trigger(500, &mut src);
        assert_eq!(o2, TriggerOutcome::Dropped);
        assert!(p2.is_none());
        let (o3, p3) = run.on_trigger(800, &mut src);
        assert_eq!(o3, TriggerOutcome::Accepted);
        assert_eq!(p3.unwrap().0.point, 1, "dropped trigger must not consume the point");
        assert!(run.is_complete());
        assert_eq!(run.dropped(), 1);
        assert_eq!(run.on_trigger(5000, &mut src).0, TriggerOutcome::Complete);
    }

    #[test]
    fn ring_reads_drain_chronologically() {
        let mut ring = RingBuffer::new(RING_CAPACITY);
        assert_eq!(ring.read(100).len(), 0);
        for i in 0..4096u64 {
            ring.push(tagged(i));
        }
        let got = ring.read(4096);
        assert_eq!(got.len(), 4096);
        assert_eq!(got[0].photon_count, 0);
        assert_eq!(got[4095].photon_count, 4095);
        assert_eq!(ring.read(10).len(), 0, "consumed packets must not reappear");
    }

    #[test]
    fn ring_overwrite_loses_only_oldest() {
        let mut ring = RingBuffer::new(RING_CAPACITY);
        for i in 0..5000u64 {
            ring.push(tagged(i));
        }
        assert_eq!(ring.available(), 4096);
        let got = ring.read(4096);
        assert_eq!(got[0].photon_count, 904);
        assert_eq!(got[4095].photon_count, 4999);
    }

    fn tagged(i: u64) -> AcqPacket {
        AcqPacket {
            timestamp_ns: i * 8,
            point_index: (i % 65_536) as u16,
            ch1: 0,
            ch2: 0,
            photon_count: i as u32,
        }
    }

    #[test]
    fn continuous_emits_one_packet_per_span() {
        let cfg = SapConfig {
            pattern: Pattern::Continuous,
            decimation: 4,
            ..SapConfig::default()
        };
        let mut run = ContinuousRun::new(cfg, 0).unwrap();
        let mut src = Mock::constant(0.5, 0.0, 8);
        run.advance(330, &mut src); // 10 whole 32 ns spans fit, the 11th is partial
        assert_eq!(run.spans_emitted(), 10);
        let packets = run.ring().read(100);
        assert_eq!(packets.len(), 10);
        for (i, p) in packets.iter().enumerate() {
            assert_eq!(p.timestamp_ns, i as u64 * 32);
            assert_eq!(p.ch1, 4096);
            assert_eq!(p.photon_count, 4); // 4 ticks per span, one edge per tick
        }
        run.advance(352, &mut src);
        assert_eq!(run.spans_emitted(), 11);
    }

    #[test]
    fn pulse_edge_counting() {
        assert_eq!(pulse_edges_in(8, 0, 800), 100);
        assert_eq!(pulse_edges_in(8, 4, 12), 1);
        assert_eq!(pulse_edges_in(8, 8, 8), 0);
        assert_eq!(pulse_edges_in(1000, 1, 1000), 0);
        assert_eq!(pulse_edges_in(1000, 0, 1), 1);
    }

    proptest! {
        // Oracle: an unbounded shadow log next to the ring. Reads must always
        // return a contiguous ascending slice of the shadow log, advancing
        // strictly, regardless of the write/read interleaving.
        #[test]
        fn ring_never_duplicates_or_reorders(ops in proptest::collection::vec(0u64..200, 1..60)) {
            let mut ring = RingBuffer::new(64);
            let mut shadow = 0u64; // next id to write
            let mut last_seen: Option<u64> = None;
            for (i, op) in ops.iter().enumerate() {
                if i % 2 == 0 {
                    for _ in 0..*op {
                        ring.push(tagged(shadow));
                        shadow += 1;
                    }
                } else {
                    let avail = ring.available();
                    let got = ring.read(*op);
                    prop_assert_eq!(got.len() as u64, op.min(&avail).to_owned());
                    for pair in got.windows(2) {
                        prop_assert_eq!(pair[1].photon_count, pair[0].photon_count + 1);
                    }
                    if let (Some(last), Some(first)) = (last_seen, got.first()) {
                        prop_assert!(u64::from(first.photon_count) > last);
                    }
                    if let Some(p) = got.last() {
                        last_seen = Some(p.photon_count as u64);
                    }
                }
            }
        }

        #[test]
        fn sequence_conserves_packets(n in 1u32..6, r in 1u32..5, s in 1u32..4, gap in 1000u64..5000) {
            let cfg = seq_cfg(n, r, s);
            let total = cfg.total_triggers();
            let mut src = Mock::constant(0.25, 0.0, 16);
            let triggers = (0..total + 3).map(|i| i * gap);
            let (packets, dropped) = run_sequence(cfg, triggers, &mut src).unwrap();
            prop_assert_eq!(dropped, 0);
            prop_assert_eq!(packets.len() as u64, total);
        }
    }
}
