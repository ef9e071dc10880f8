//! Command-line front end: serve an emulated instrument or drive one through
//! the measurement flows. Every failure prints `error category=<cat>: ...` on
//! stderr and maps to a stable exit code per category.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use spindaq::client::{Client, ClientError};
use spindaq::codec::AcqPacket;
use spindaq::config::{ConfigError, ServerConfig};
use spindaq::csvio;
use spindaq::experiments::{
    self, CwOdmrParams, ExperimentError, ExperimentResult, FitKind, LockinParams,
    PulsedOdmrParams, RabiScanParams,
};
use spindaq::msg::Waveform;
use spindaq::plot::{self, Series};
use spindaq::proto::{SetBiasCmd, SetDdsCmd, SetPwmCmd, Status};
use spindaq::server::Server;

const EXIT_USAGE: u8 = 2;
const EXIT_NETWORK: u8 = 3;
const EXIT_PROTOCOL: u8 = 4;
const EXIT_DATA: u8 = 5;
const EXIT_IO: u8 = 6;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Network(String),
    Protocol(String),
    Data(String),
    Io(String),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Network(_) => "network",
            CliError::Protocol(_) => "protocol",
            CliError::Data(_) => "data",
            CliError::Io(_) => "io",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m)
            | CliError::Network(m)
            | CliError::Protocol(m)
            | CliError::Data(m)
            | CliError::Io(m) => m,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Network(_) => EXIT_NETWORK,
            CliError::Protocol(_) => EXIT_PROTOCOL,
            CliError::Data(_) => EXIT_DATA,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Io(_) | ClientError::Timeout { .. } => CliError::Network(e.to_string()),
            // parameter rejections are the operator's input, not a wire fault
            ClientError::Device(Status::ErrParam) | ClientError::Device(Status::ErrRange) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Protocol(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(m) => CliError::Usage(m),
            ExperimentError::Client(c) => c.into(),
            ExperimentError::Fit(_) | ExperimentError::Lockin(_) | ExperimentError::Data(_) => {
                CliError::Data(e.to_string())
            }
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "spindaq", version, about = "Emulated spin-defect DAQ: device server and measurement client")]
struct Cli {
    /// Server host for client commands.
    #[arg(long, global = true, default_value = "127.0.0.1")]
    host: String,
    /// UDP port; beats the config file and SPINDAQ_PORT.
    #[arg(long, global = true)]
    port: Option<u16>,
    /// Physics RNG seed for `serve`; beats the config file and SPINDAQ_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Server/preset config file (JSON, same schema for both sides).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// CSV output path; each command has a default.
    #[arg(long, global = true, value_name = "CSV")]
    out: Option<PathBuf>,
    /// Optional SVG plot of the primary result.
    #[arg(long, global = true, value_name = "SVG")]
    plot: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the emulated instrument until interrupted.
    Serve,
    /// cw-ODMR sweep on the photodiode channel.
    Odmr(OdmrArgs),
    /// Rabi scan: one sequence point per MW pulse length.
    Rabi(RabiArgs),
    /// Pulsed ODMR across the isolated line, photon-count channel.
    PulsedOdmr(PulsedOdmrArgs),
    /// FM lock-in acquisition with 1f/2f demodulation.
    Lockin(LockinArgs),
    /// Program the DDS tone generator.
    Dds(DdsArgs),
    /// Program the PWM trigger generator.
    Pwm(PwmArgs),
    /// Configure the thermal bias correction.
    CalibrateBias(BiasArgs),
    /// Read stored packets without interpretation.
    ReadRaw(ReadRawArgs),
}

#[derive(Args)]
struct OdmrArgs {
    #[arg(long, default_value_t = 2790.0)]
    start: f64,
    #[arg(long, default_value_t = 2950.0)]
    stop: f64,
    #[arg(long, default_value_t = 1000)]
    points: u32,
    #[arg(long, default_value_t = 1)]
    repeats: u32,
    #[arg(long, default_value_t = 1)]
    sweeps: u32,
    #[arg(long, default_value_t = 16.0)]
    window_ms: f64,
    #[arg(long, default_value_t = 2000)]
    decimation: u32,
    #[arg(long, default_value_t = 20.0)]
    pwm_period_ms: f64,
    #[arg(long, default_value_t = 0.8)]
    pwm_duty: f64,
}

#[derive(Args)]
struct RabiArgs {
    /// Longest MW pulse, ns.
    #[arg(long, default_value_t = 4000.0)]
    max_ns: f64,
    /// Pulse length increment, ns.
    #[arg(long, default_value_t = 50.0)]
    step_ns: f64,
    #[arg(long, default_value_t = 1)]
    repeats: u32,
    #[arg(long, default_value_t = 1)]
    sweeps: u32,
    #[arg(long, default_value_t = 16.0)]
    window_ms: f64,
    #[arg(long, default_value_t = 1000)]
    decimation: u32,
}

#[derive(Args)]
struct PulsedOdmrArgs {
    /// Sweep start, MHz; defaults to 3 MHz below the isolated line.
    #[arg(long)]
    start: Option<f64>,
    /// Sweep stop, MHz; defaults to 3 MHz above the isolated line.
    #[arg(long)]
    stop: Option<f64>,
    #[arg(long, default_value_t = 200)]
    points: u32,
    #[arg(long, default_value_t = 1)]
    repeats: u32,
    #[arg(long, default_value_t = 1)]
    sweeps: u32,
    #[arg(long, default_value_t = 16.0)]
    window_ms: f64,
    #[arg(long, default_value_t = 2000)]
    decimation: u32,
}

#[derive(Args)]
struct LockinArgs {
    #[arg(long, default_value_t = 10.0)]
    fmod_hz: f64,
    #[arg(long, default_value_t = 1.72)]
    amplitude_vpp: f64,
    #[arg(long, default_value_t = 1.0)]
    duration_s: f64,
    /// MW carrier, MHz; defaults to the isolated line center.
    #[arg(long)]
    carrier_mhz: Option<f64>,
    #[arg(long, default_value_t = 0.2)]
    deviation_mhz: f64,
    #[arg(long, default_value_t = 12_500)]
    decimation: u32,
}

#[derive(Args)]
struct DdsArgs {
    #[arg(long)]
    freq_hz: f64,
    #[arg(long, default_value_t = 1.0)]
    amplitude_vpp: f64,
    #[arg(long, default_value_t = 0.0)]
    phase_rad: f64,
    /// sine | square | triangle | sawtooth
    #[arg(long, default_value = "sine")]
    waveform: String,
}

#[derive(Args)]
struct PwmArgs {
    #[arg(long, default_value_t = 20.0)]
    period_ms: f64,
    #[arg(long, default_value_t = 0.8)]
    duty: f64,
    #[arg(long, default_value_t = 0.0)]
    rise_fall_ns: f64,
}

#[derive(Args)]
struct BiasArgs {
    /// Correct at this fixed temperature instead of tracking the board.
    #[arg(long)]
    temperature: Option<f64>,
    /// Turn the correction off.
    #[arg(long)]
    disable: bool,
}

#[derive(Args)]
struct ReadRawArgs {
    #[arg(long, default_value_t = 0)]
    offset: u32,
    #[arg(long, default_value_t = 1000)]
    count: u16,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error category={}: {}", e.category(), e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = ServerConfig::load(cli.config.as_deref())?;
    if let Some(p) = cli.port {
        cfg.port = p;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.cmd {
        Cmd::Serve => serve(&cfg),
        Cmd::Odmr(a) => odmr(&cli, &cfg, a),
        Cmd::Rabi(a) => rabi(&cli, &cfg, a),
        Cmd::PulsedOdmr(a) => pulsed_odmr(&cli, &cfg, a),
        Cmd::Lockin(a) => lockin(&cli, &cfg, a),
        Cmd::Dds(a) => dds(&cli, &cfg, a),
        Cmd::Pwm(a) => pwm(&cli, &cfg, a),
        Cmd::CalibrateBias(a) => calibrate_bias(&cli, &cfg, a),
        Cmd::ReadRaw(a) => read_raw(&cli, &cfg, a),
    }
}

fn serve(cfg: &ServerConfig) -> Result<(), CliError> {
    let server = Server::spawn(cfg.clone())
        .map_err(|e| CliError::Network(format!("cannot bind port {}: {e}", cfg.port)))?;
    println!("spindaq server listening on {}", server.local_addr());
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

fn connect(cli: &Cli, cfg: &ServerConfig) -> Result<Client, CliError> {
    let addr = format!("{}:{}", cli.host, cfg.port);
    // one session at a time: a predecessor (say, the previous CLI call) must
    // go idle before the server lets us take over, so wait it out briefly
    let deadline = std::time::Instant::now() + Duration::from_secs(6);
    loop {
        match Client::connect(addr.as_str(), cfg.reliability) {
            Err(ClientError::Device(Status::ErrState)) if std::time::Instant::now() < deadline => {
                std::thread::sleep(Duration::from_millis(150));
            }
            other => return Ok(other?),
        }
    }
}

fn window_ns(window_ms: f64) -> Result<u64, CliError> {
    let valid = window_ms.is_finite() && window_ms > 0.0;
    if !valid {
        return Err(CliError::Usage(format!("window must be positive, got {window_ms} ms")));
    }
    Ok((window_ms * 1e6).round() as u64)
}

fn period_ticks(period_ms: f64) -> Result<u64, CliError> {
    let valid = period_ms.is_finite() && period_ms > 0.0;
    if !valid {
        return Err(CliError::Usage(format!("period must be positive, got {period_ms} ms")));
    }
    Ok((period_ms * 125_000.0).round() as u64)
}

/// CSV plus optional SVG for a standard x/y/sigma result.
fn emit(
    cli: &Cli,
    result: &ExperimentResult,
    default_out: &str,
    x_name: &str,
    y_name: &str,
    title: &str,
) -> Result<(), CliError> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(default_out));
    result.write_csv(&out, x_name, y_name)?;
    println!("wrote {} rows to {}", result.x.len(), out.display());
    if let Some(p) = &cli.plot {
        plot::write_svg(p, title, x_name, y_name, &[Series { x: &result.x, y: &result.y }])?;
        println!("wrote plot to {}", p.display());
    }
    if let Some(note) = &result.fit_note {
        println!("fit note: {note}");
    }
    Ok(())
}

fn odmr(cli: &Cli, cfg: &ServerConfig, a: &OdmrArgs) -> Result<(), CliError> {
    let params = CwOdmrParams {
        start_mhz: a.start,
        stop_mhz: a.stop,
        points: a.points,
        point_repeats: a.repeats,
        sweep_repeats: a.sweeps,
        window_ns: window_ns(a.window_ms)?,
        decimation: a.decimation,
        pwm_period_ticks: period_ticks(a.pwm_period_ms)?,
        pwm_duty: a.pwm_duty,
        env: cfg.scenario.env.clone(),
        ..CwOdmrParams::default()
    };
    let mut client = connect(cli, cfg)?;
    let result = experiments::run_cw_odmr(&mut client, &params)?;
    emit(cli, &result, "odmr.csv", "freq_mhz", "level", "cw ODMR sweep")?;
    if let Some(FitKind::OdmrLines(lines)) = &result.fit {
        println!("fitted {} resonance lines", lines.fit.lines.len());
        if !lines.broad_centers.is_empty() {
            println!("broad dip centers (MHz):");
            for c in &lines.broad_centers {
                println!("  {c:.3}");
            }
        }
    }
    Ok(())
}

fn rabi(cli: &Cli, cfg: &ServerConfig, a: &RabiArgs) -> Result<(), CliError> {
    let valid = a.step_ns > 0.0 && a.max_ns >= 0.0;
    if !valid {
        return Err(CliError::Usage("need max-ns >= 0 and step-ns > 0".into()));
    }
    let n = (a.max_ns / a.step_ns).floor() as usize + 1;
    let w = window_ns(a.window_ms)?;
    let params = RabiScanParams {
        durations_ns: (0..n).map(|i| i as f64 * a.step_ns).collect(),
        point_repeats: a.repeats,
        sweep_repeats: a.sweeps,
        window_ns: w,
        decimation: a.decimation,
        trigger_period_ns: w + 8_000,
        env: cfg.scenario.env.clone(),
    };
    let mut client = connect(cli, cfg)?;
    let result = experiments::run_rabi(&mut client, &params)?;
    emit(cli, &result, "rabi.csv", "t_ns", "counts", "Rabi scan")?;
    if let Some(FitKind::DampedCosine(fit)) = &result.fit {
        println!(
            "Rabi frequency {:.4} MHz, decay time {:.0} ns",
            fit.frequency * 1e3,
            1.0 / fit.decay_rate.max(1e-12)
        );
    }
    Ok(())
}

fn pulsed_odmr(cli: &Cli, cfg: &ServerConfig, a: &PulsedOdmrArgs) -> Result<(), CliError> {
    let line = cfg.scenario.env.single_nv.center_mhz;
    let params = PulsedOdmrParams {
        start_mhz: a.start.unwrap_or(line - 3.0),
        stop_mhz: a.stop.unwrap_or(line + 3.0),
        points: a.points,
        point_repeats: a.repeats,
        sweep_repeats: a.sweeps,
        window_ns: window_ns(a.window_ms)?,
        decimation: a.decimation,
        env: cfg.scenario.env.clone(),
        ..PulsedOdmrParams::default()
    };
    let mut client = connect(cli, cfg)?;
    let result = experiments::run_pulsed_odmr(&mut client, &params)?;
    emit(cli, &result, "pulsed_odmr.csv", "freq_mhz", "ratio", "pulsed ODMR")?;
    if let Some(FitKind::OdmrLines(lines)) = &result.fit {
        for l in &lines.fit.lines {
            println!("line at {:.4} +/- {:.4} MHz, fwhm {:.3} MHz", l.center, l.center_sigma, l.fwhm);
        }
    }
    Ok(())
}

fn lockin(cli: &Cli, cfg: &ServerConfig, a: &LockinArgs) -> Result<(), CliError> {
    let params = LockinParams {
        f_mod_hz: a.fmod_hz,
        amplitude_vpp: a.amplitude_vpp,
        duration_s: a.duration_s,
        carrier_mhz: a.carrier_mhz.unwrap_or(cfg.scenario.env.single_nv.center_mhz),
        deviation_mhz: a.deviation_mhz,
        decimation: a.decimation,
        env: cfg.scenario.env.clone(),
    };
    let mut client = connect(cli, cfg)?;
    let (result, harmonics) = experiments::run_lockin(&mut client, &params)?;
    emit(cli, &result, "lockin.csv", "t_s", "counts", "lock-in acquisition")?;
    for (name, h) in [("1f", &harmonics.f1), ("2f", &harmonics.f2)] {
        println!(
            "{name}: X={:+.4} Y={:+.4} R={:.4} phase={:+.2} deg",
            h.x,
            h.y,
            h.r,
            h.phase.to_degrees()
        );
    }
    if let Some(FitKind::Sinusoid(fit)) = &result.fit {
        println!("fluorescence oscillates at {:.3} Hz (modulation {:.3} Hz)", fit.frequency, a.fmod_hz);
    }
    Ok(())
}

fn parse_waveform(s: &str) -> Result<Waveform, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "sine" => Ok(Waveform::Sine),
        "square" => Ok(Waveform::Square),
        "triangle" => Ok(Waveform::Triangle),
        "sawtooth" => Ok(Waveform::Sawtooth),
        other => Err(CliError::Usage(format!(
            "unknown waveform {other:?}; use sine, square, triangle or sawtooth"
        ))),
    }
}

fn dds(cli: &Cli, cfg: &ServerConfig, a: &DdsArgs) -> Result<(), CliError> {
    let mut client = connect(cli, cfg)?;
    client.set_dds(&SetDdsCmd {
        frequency_hz: a.freq_hz,
        amplitude_vpp: a.amplitude_vpp,
        phase_offset_rad: a.phase_rad,
        waveform: parse_waveform(&a.waveform)?,
    })?;
    let st = client.status()?;
    println!(
        "dds: frequency word {} ({} mVpp programmed)",
        st.dds_frequency_word, st.dds_amplitude_mvpp
    );
    Ok(())
}

fn pwm(cli: &Cli, cfg: &ServerConfig, a: &PwmArgs) -> Result<(), CliError> {
    let mut client = connect(cli, cfg)?;
    client.set_pwm(&SetPwmCmd {
        period_ticks: period_ticks(a.period_ms)?,
        duty: a.duty,
        rise_fall_ns: a.rise_fall_ns,
    })?;
    let st = client.status()?;
    println!(
        "pwm: period {} ticks, duty {:.3}",
        st.pwm_period_ticks,
        st.pwm_duty_millis as f64 / 1000.0
    );
    Ok(())
}

fn calibrate_bias(cli: &Cli, cfg: &ServerConfig, a: &BiasArgs) -> Result<(), CliError> {
    let mut client = connect(cli, cfg)?;
    client.set_bias(&SetBiasCmd {
        enabled: !a.disable,
        temperature_c: a.temperature.unwrap_or(f64::NAN),
        table: Vec::new(),
    })?;
    if a.disable {
        println!("bias correction disabled");
    } else {
        match a.temperature {
            Some(t) => println!("bias correction enabled at fixed {t} C"),
            None => println!("bias correction enabled, tracking board temperature"),
        }
    }
    Ok(())
}

fn read_raw(cli: &Cli, cfg: &ServerConfig, a: &ReadRawArgs) -> Result<(), CliError> {
    let mut client = connect(cli, cfg)?;
    let packets = client.read(a.offset, a.count)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("read_raw.csv"));
    write_packets_csv(&out, &packets)?;
    println!("wrote {} packets to {}", packets.len(), out.display());
    Ok(())
}

fn write_packets_csv(path: &Path, packets: &[AcqPacket]) -> Result<(), CliError> {
    let ts: Vec<f64> = packets.iter().map(|p| p.timestamp_ns as f64).collect();
    let idx: Vec<f64> = packets.iter().map(|p| p.point_index as f64).collect();
    let ch1: Vec<f64> = packets.iter().map(|p| p.ch1 as f64).collect();
    let ch2: Vec<f64> = packets.iter().map(|p| p.ch2 as f64).collect();
    let ph: Vec<f64> = packets.iter().map(|p| p.photon_count as f64).collect();
    csvio::write_csv(
        path,
        &["timestamp_ns", "point_index", "ch1", "ch2", "photon_count"],
        &[&ts, &idx, &ch1, &ch2, &ph],
    )?;
    Ok(())
}
