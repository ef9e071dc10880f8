//! Instrument state machine. Owns the configured front-end blocks (SAP, DDS,
//! PWM, bias correction) plus the physics scenario, and advances armed runs in
//! bounded slices so a caller can interleave command handling with emulation.
//!
//! Packet data is a pure function of (rng seed, command history): every ARM
//! re-derives fresh ChaCha streams from the seed and an arm counter, so two
//! servers driven with the same commands produce byte-identical packets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{
    apply_bias_correction, bias_at_temperature, AcqPacket, BiasModel, TIMESTAMP_MAX,
};
use crate::config::{MwProgram, OdmrTarget, Scenario};
use crate::msg::{self, DdsConfig, PwmConfig, Waveform, TICK_NS};
use crate::nv::{self, RabiParams, ResonanceLine, NvEnvironment};
use crate::proto::{
    pattern_code, trigger_source_code, SetBiasCmd, SetDdsCmd, SetPwmCmd, Status, StatusReport,
};
use crate::sap::{
    classify_trigger, ContinuousRun, Pattern, SapConfig, SequenceRun, SignalBundle,
    TriggerSource, RING_CAPACITY,
};

/// Channel evaluations per `pump` slice; keeps one slice around a millisecond
/// so STATUS stays responsive during long runs.
const PUMP_BUDGET_TICKS: u64 = 1 << 18;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("wrong state: {0}")]
    State(&'static str),
    #[error("bad parameter: {0}")]
    Param(String),
    #[error("out of range: {0}")]
    Range(String),
}

impl EngineError {
    pub fn status(&self) -> Status {
        match self {
            EngineError::State(_) => Status::ErrState,
            EngineError::Param(_) => Status::ErrParam,
            EngineError::Range(_) => Status::ErrRange,
        }
    }
}

/// MW program resolved against the environment at ARM time.
#[derive(Debug, Clone)]
enum Prog {
    Idle,
    Sweep { list: Vec<f64>, lines: Vec<ResonanceLine> },
    Rabi { durations: Vec<f64>, params: RabiParams },
    Fm { carrier_mhz: f64, deviation_mhz: f64 },
}

/// Live signal model behind the two analog channels and the photon counter.
/// RNG streams are per-channel so sampling one channel never shifts another,
/// and per-arm so reruns are independent draws from the same seed.
#[derive(Debug)]
pub(crate) struct Sources {
    env: NvEnvironment,
    program: Prog,
    dds: DdsConfig,
    /// Physical input bias (board truth), injected into both channels.
    bias_mv: f64,
    current_point: u32,
    cached: Option<(u32, f64)>,
    rng_pd: ChaCha8Rng,
    rng_ai2: ChaCha8Rng,
    rng_photon: ChaCha8Rng,
}

impl Sources {
    fn new(scenario: &Scenario, dds: DdsConfig, seed: u64, epoch: u64) -> Self {
        let env = scenario.env.clone();
        let program = match &scenario.program {
            MwProgram::Idle => Prog::Idle,
            MwProgram::CwSweep { target, .. } => {
                let list = scenario.program.frequency_list().expect("sweep has a list");
                let lines = match target {
                    OdmrTarget::Ensemble => nv::resonance_lines(&env),
                    OdmrTarget::SingleNv => vec![env.single_nv.into()],
                };
                Prog::Sweep { list, lines }
            }
            MwProgram::Rabi { durations_ns } => {
                Prog::Rabi { durations: durations_ns.clone(), params: env.rabi }
            }
            MwProgram::FixedFm { carrier_mhz, deviation_mhz } => {
                Prog::Fm { carrier_mhz: *carrier_mhz, deviation_mhz: *deviation_mhz }
            }
        };
        let bias_mv = bias_at_temperature(&BiasModel::default(), env.temperature_c);
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(epoch.wrapping_mul(3).wrapping_add(k));
            r
        };
        Sources {
            env,
            program,
            dds,
            bias_mv,
            current_point: 0,
            cached: None,
            rng_pd: stream(0),
            rng_ai2: stream(1),
            rng_photon: stream(2),
        }
    }

    fn set_point(&mut self, p: u32) {
        self.current_point = p;
    }

    /// FM programs modulate in real time; everything else holds a fixed level
    /// per sequence point.
    fn fm_level(&self, t_ns: u64) -> Option<f64> {
        let Prog::Fm { carrier_mhz, deviation_mhz } = &self.program else {
            return None;
        };
        let drive = msg::dds_normalized(&self.dds, t_ns / TICK_NS);
        let line: ResonanceLine = self.env.single_nv.into();
        Some(nv::cw_odmr_level(
            carrier_mhz + deviation_mhz * drive,
            std::slice::from_ref(&line),
        ))
    }

    fn point_level(&mut self) -> f64 {
        let p = self.current_point;
        if let Some((cp, lvl)) = self.cached {
            if cp == p {
                return lvl;
            }
        }
        let lvl = match &self.program {
            Prog::Idle | Prog::Fm { .. } => 1.0,
            Prog::Sweep { list, lines } => nv::cw_odmr_level(list[p as usize % list.len()], lines),
            Prog::Rabi { durations, params } => {
                nv::rabi_level(durations[p as usize % durations.len()], params)
            }
        };
        self.cached = Some((p, lvl));
        lvl
    }
}

impl SignalBundle for Sources {
    fn ai1_volts(&mut self, t_ns: u64) -> f64 {
        let level = match self.fm_level(t_ns) {
            Some(l) => l,
            None => self.point_level(),
        };
        nv::pd_voltage(level, &self.env, self.bias_mv, &mut self.rng_pd)
    }

    fn ai2_volts(&mut self, t_ns: u64) -> f64 {
        let mut v = msg::dds_sample(&self.dds, t_ns / TICK_NS) + self.bias_mv * 1e-3;
        if self.env.ai2_noise_rms_v > 0.0 {
            v += Normal::new(0.0, self.env.ai2_noise_rms_v).unwrap().sample(&mut self.rng_ai2);
        }
        v
    }

    fn di_edges(&mut self, t0_ns: u64, t1_ns: u64) -> u64 {
        let span = t1_ns - t0_ns;
        let base = self.env.baseline_photon_rate_hz;
        if let Prog::Fm { carrier_mhz, deviation_mhz } = &self.program {
            let (carrier, deviation) = (*carrier_mhz, *deviation_mhz);
            let dds = self.dds;
            let line: ResonanceLine = self.env.single_nv.into();
            let rate = move |t_ns: f64| {
                let drive = msg::dds_normalized(&dds, (t_ns / TICK_NS as f64) as u64);
                base * nv::cw_odmr_level(carrier + deviation * drive, std::slice::from_ref(&line))
            };
            return nv::sample_photons(rate, base, t0_ns, span, &mut self.rng_photon);
        }
        let rate = base * self.point_level();
        nv::sample_photons(|_| rate, rate, t0_ns, span, &mut self.rng_photon)
    }
}

#[derive(Debug)]
struct SeqState {
    run: SequenceRun,
    sources: Sources,
    /// Trigger grid for the internal/external schedule; 0 = software only.
    schedule_period_ns: u64,
    next_edge: u64,
    done: bool,
    correction: Option<(BiasModel, f64)>,
}

#[derive(Debug)]
struct ContState {
    run: ContinuousRun,
    sources: Sources,
    span_ns: u64,
    read_max: u16,
    active: bool,
    correction: Option<(BiasModel, f64)>,
}

#[derive(Debug)]
enum RunState {
    Idle,
    Sequence(SeqState),
    Continuous(ContState),
}

#[derive(Debug)]
pub struct Engine {
    seed: u64,
    scenario: Scenario,
    sap: SapConfig,
    dds: DdsConfig,
    pwm: PwmConfig,
    correction_enabled: bool,
    /// NaN tracks the scenario's board temperature.
    correction_temperature_c: f64,
    correction_model: BiasModel,
    store_capacity: usize,
    store: Vec<AcqPacket>,
    run: RunState,
    arm_epoch: u64,
}

impl Engine {
    pub fn new(seed: u64, scenario: Scenario, store_capacity: usize) -> Self {
        Engine {
            seed,
            scenario,
            sap: SapConfig::default(),
            // benign power-on defaults: 1 MHz 1 Vpp sine, 200 us PWM at 50%
            dds: DdsConfig::for_frequency(1e6, 1.0, 0.0, Waveform::Sine).expect("default dds"),
            pwm: PwmConfig::new(25_000, 0.5, 0.0).expect("default pwm"),
            correction_enabled: false,
            correction_temperature_c: f64::NAN,
            correction_model: BiasModel::default(),
            store_capacity,
            store: Vec::new(),
            run: RunState::Idle,
            arm_epoch: 0,
        }
    }

    /// Reconfiguration is rejected while a run is in flight; a finished or
    /// stopped run keeps its data readable but no longer blocks.
    fn ensure_configurable(&self) -> Result<(), EngineError> {
        match &self.run {
            RunState::Sequence(s) if !s.done => {
                Err(EngineError::State("sequence run in progress"))
            }
            RunState::Continuous(c) if c.active => {
                Err(EngineError::State("continuous run in progress"))
            }
            _ => Ok(()),
        }
    }

    pub fn set_sap(&mut self, cfg: SapConfig) -> Result<(), EngineError> {
        self.ensure_configurable()?;
        cfg.validate().map_err(|e| EngineError::Param(e.to_string()))?;
        self.sap = cfg;
        Ok(())
    }

    pub fn set_dds(&mut self, cmd: &SetDdsCmd) -> Result<(), EngineError> {
        self.ensure_configurable()?;
        self.dds = DdsConfig::for_frequency(
            cmd.frequency_hz,
            cmd.amplitude_vpp,
            cmd.phase_offset_rad,
            cmd.waveform,
        )
        .map_err(|e| EngineError::Param(e.to_string()))?;
        Ok(())
    }

    pub fn set_pwm(&mut self, cmd: &SetPwmCmd) -> Result<(), EngineError> {
        self.ensure_configurable()?;
        self.pwm = PwmConfig::new(cmd.period_ticks, cmd.duty, cmd.rise_fall_ns)
            .map_err(|e| EngineError::Param(e.to_string()))?;
        Ok(())
    }

    /// An empty table toggles `enabled` while keeping the stored calibration.
    pub fn set_bias(&mut self, cmd: &SetBiasCmd) -> Result<(), EngineError> {
        self.ensure_configurable()?;
        if !cmd.table.is_empty() {
            self.correction_model = BiasModel::new(cmd.table.clone(), 24.0)
                .map_err(|e| EngineError::Param(e.to_string()))?;
        }
        self.correction_enabled = cmd.enabled;
        self.correction_temperature_c = cmd.temperature_c;
        Ok(())
    }

    pub fn set_scenario(&mut self, scenario: Scenario) -> Result<(), EngineError> {
        self.ensure_configurable()?;
        scenario.validate().map_err(|e| EngineError::Param(e.to_string()))?;
        self.scenario = scenario;
        Ok(())
    }

    pub fn arm(&mut self) -> Result<(), EngineError> {
        self.ensure_configurable()?;
        self.sap.validate().map_err(|e| EngineError::Param(e.to_string()))?;
        let schedule_period_ns = match (self.sap.pattern, self.sap.trigger_source) {
            (Pattern::Continuous, _) | (Pattern::Sequence, TriggerSource::Software) => 0,
            (Pattern::Sequence, TriggerSource::InternalPwm) => {
                let high = self.pwm.high_ticks();
                if high == 0 || high >= self.pwm.period_ticks {
                    return Err(EngineError::Param(format!(
                        "PWM duty {} never produces a rising edge",
                        self.pwm.duty
                    )));
                }
                self.pwm.period_ticks * TICK_NS
            }
            (Pattern::Sequence, TriggerSource::ExternalDi) => {
                let p = self.scenario.external_trigger_period_ns;
                if p == 0 {
                    return Err(EngineError::Param(
                        "scenario has no external trigger source".into(),
                    ));
                }
                p
            }
        };
        if self.sap.pattern == Pattern::Sequence {
            let total = self.sap.total_triggers();
            if total > self.store_capacity as u64 {
                return Err(EngineError::Param(format!(
                    "run of {total} packets exceeds store capacity {}",
                    self.store_capacity
                )));
            }
        }
        let correction = self.correction_enabled.then(|| {
            let t = if self.correction_temperature_c.is_nan() {
                self.scenario.env.temperature_c
            } else {
                self.correction_temperature_c
            };
            (self.correction_model.clone(), t)
        });
        self.arm_epoch += 1;
        let sources = Sources::new(&self.scenario, self.dds, self.seed, self.arm_epoch);
        self.store.clear();
        match self.sap.pattern {
            Pattern::Sequence => {
                let run =
                    SequenceRun::new(self.sap).map_err(|e| EngineError::Param(e.to_string()))?;
                self.run = RunState::Sequence(SeqState {
                    run,
                    sources,
                    schedule_period_ns,
                    next_edge: 0,
                    done: false,
                    correction,
                });
            }
            Pattern::Continuous => {
                let run = ContinuousRun::new(self.sap, 0)
                    .map_err(|e| EngineError::Param(e.to_string()))?;
                self.run = RunState::Continuous(ContState {
                    run,
                    sources,
                    span_ns: TICK_NS * self.sap.decimation as u64,
                    read_max: self.sap.continuous_read_max,
                    active: true,
                    correction,
                });
            }
        }
        Ok(())
    }

    fn feed_trigger(s: &mut SeqState, t_ns: u64, store: &mut Vec<AcqPacket>) {
        if let Some(ti) = classify_trigger(s.run.accepted(), s.run.config()) {
            s.sources.set_point(ti.point);
        }
        let (_, emitted) = s.run.on_trigger(t_ns, &mut s.sources);
        if let Some((_, mut p)) = emitted {
            p.timestamp_ns &= TIMESTAMP_MAX;
            if let Some((model, temp)) = &s.correction {
                p.ch1 = apply_bias_correction(p.ch1, model, *temp);
                p.ch2 = apply_bias_correction(p.ch2, model, *temp);
            }
            store.push(p);
        }
        if s.run.is_complete() {
            s.done = true;
        }
    }

    pub fn soft_trigger(&mut self) -> Result<(), EngineError> {
        let RunState::Sequence(s) = &mut self.run else {
            return Err(EngineError::State("no armed sequence run"));
        };
        if s.done {
            return Err(EngineError::State("run already complete"));
        }
        if s.run.config().trigger_source != TriggerSource::Software {
            return Err(EngineError::State("run is not software-triggered"));
        }
        // earliest legal instant, so a soft trigger never drops
        let t = s.run.window_close_ns();
        Self::feed_trigger(s, t, &mut self.store);
        Ok(())
    }

    /// Idempotent: a finished or idle engine stays stopped. Acquired data
    /// stays readable until the next ARM.
    pub fn stop(&mut self) {
        match &mut self.run {
            RunState::Idle => {}
            RunState::Sequence(s) => s.done = true,
            RunState::Continuous(c) => c.active = false,
        }
    }

    pub fn status(&self) -> StatusReport {
        let mut rep = StatusReport {
            running: false,
            pattern_continuous: pattern_code(self.sap.pattern) == 1,
            trigger_source: trigger_source_code(self.sap.trigger_source),
            packets_emitted: 0,
            dropped_triggers: 0,
            ring_available: 0,
            emu_time_ns: 0,
            malformed_datagrams: 0,
            pwm_period_ticks: self.pwm.period_ticks,
            pwm_duty_millis: (self.pwm.duty * 1000.0).round() as u16,
            dds_frequency_word: self.dds.frequency_word,
            dds_amplitude_mvpp: (self.dds.amplitude_vpp * 1000.0).round() as u16,
            mw_cursor: 0,
        };
        match &self.run {
            RunState::Idle => {}
            RunState::Sequence(s) => {
                rep.running = !s.done;
                rep.packets_emitted = self.store.len() as u64;
                rep.dropped_triggers = s.run.dropped();
                rep.emu_time_ns = s.run.window_close_ns() & TIMESTAMP_MAX;
                rep.mw_cursor = s.sources.current_point;
            }
            RunState::Continuous(c) => {
                rep.running = c.active;
                rep.packets_emitted = c.run.spans_emitted();
                rep.ring_available = c.run.ring_available().min(u16::MAX as u64) as u16;
                rep.emu_time_ns = c.run.spans_emitted().wrapping_mul(c.span_ns) & TIMESTAMP_MAX;
            }
        }
        rep
    }

    /// Sequence/idle reads address the packet store by offset; continuous
    /// reads drain the ring (offset ignored, capped at the armed read max).
    /// Reads work during runs and after STOP, until the next ARM.
    pub fn read(&mut self, offset: u32, count: u16) -> Result<Vec<AcqPacket>, EngineError> {
        if count == 0 {
            return Ok(Vec::new());
        }
        if let RunState::Continuous(c) = &mut self.run {
            let n = (count as u64).min(c.read_max as u64);
            let mut out = c.run.ring().read(n);
            for p in &mut out {
                p.timestamp_ns &= TIMESTAMP_MAX;
                if let Some((model, temp)) = &c.correction {
                    p.ch1 = apply_bias_correction(p.ch1, model, *temp);
                    p.ch2 = apply_bias_correction(p.ch2, model, *temp);
                }
            }
            return Ok(out);
        }
        let len = self.store.len();
        let off = offset as usize;
        if off > len {
            return Err(EngineError::Range(format!("offset {off} past stored {len}")));
        }
        let n = (count as usize).min(len - off);
        Ok(self.store[off..off + n].to_vec())
    }

    /// Advance the armed run by one bounded slice. Returns false when there
    /// is nothing to do: idle, done, software-triggered, or (continuous) the
    /// ring is full, in which case emulated time stalls until a READ drains
    /// it rather than overwriting unread spans.
    pub fn pump(&mut self) -> bool {
        match &mut self.run {
            RunState::Sequence(s) if !s.done && s.schedule_period_ns > 0 => {
                let cfg = *s.run.config();
                let stride = TICK_NS * cfg.decimation as u64;
                let samples_per_window = (cfg.window_ns / stride).max(1);
                let budget = (PUMP_BUDGET_TICKS / samples_per_window).clamp(1, 4096);
                let mut fed = 0;
                while fed < budget && !s.done {
                    let Some(t) = s.next_edge.checked_mul(s.schedule_period_ns) else {
                        // trigger clock wrapped the emulated timeline
                        s.done = true;
                        break;
                    };
                    s.next_edge += 1;
                    Self::feed_trigger(s, t, &mut self.store);
                    fed += 1;
                }
                true
            }
            RunState::Continuous(c) if c.active => {
                let free = (RING_CAPACITY as u64).saturating_sub(c.run.ring_available());
                let k = (c.span_ns / TICK_NS).max(1);
                let n = free.min((PUMP_BUDGET_TICKS / k).max(1));
                if n == 0 {
                    return false;
                }
                let until = (c.run.spans_emitted() + n).saturating_mul(c.span_ns);
                c.run.advance(until, &mut c.sources);
                true
            }
            _ => false,
        }
    }

    /// True while `pump` could still make progress on its own.
    pub fn busy(&self) -> bool {
        match &self.run {
            RunState::Idle => false,
            RunState::Sequence(s) => !s.done && s.schedule_period_ns > 0,
            RunState::Continuous(c) => c.active,
        }
    }
}
