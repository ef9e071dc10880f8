//! Measurement flows built on top of the client: cw-ODMR sweeps, Rabi scans,
//! pulsed ODMR, and lock-in detection. Each flow programs the instrument,
//! waits for the run, reads the packet store back, and reduces packets to
//! per-point statistics with propagated error bars.

use std::io;
use std::path::Path;
use std::time::Duration;

use thiserror::Error;

use crate::client::{Client, ClientError};
use crate::codec::{signed_to_voltage, AcqPacket};
use crate::config::{MwProgram, OdmrTarget, Scenario};
use crate::csvio;
use crate::fit::{
    self, find_dips, fit_damped_cosine, fit_lorentzian_multi, fit_lorentzian_with_init,
    fit_sinusoid, DampedCosineFit, FitError, MultiLorentzianFit, SinusoidFit,
};
use crate::lockin::{demodulate, LockinError, LockinOutput};
use crate::msg::{Waveform, TICK_NS};
use crate::nv::NvEnvironment;
use crate::proto::{SetDdsCmd, SetPwmCmd};
use crate::sap::{Pattern, SapConfig, TriggerSource};

/// Wall-clock allowance for an armed run plus its readback.
const RUN_BUDGET: Duration = Duration::from_secs(300);

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("bad experiment parameters: {0}")]
    Config(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Lockin(#[from] LockinError),
    #[error("inconsistent acquisition data: {0}")]
    Data(String),
}

/// Fitted model attached to a result, when a fit was run and converged well
/// enough to report.
#[derive(Debug, Clone)]
pub enum FitKind {
    OdmrLines(OdmrLines),
    DampedCosine(DampedCosineFit),
    Sinusoid(SinusoidFit),
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: Vec<f64>,
    pub fit: Option<FitKind>,
    /// Why `fit` is absent or should be read with care; the data above is
    /// still valid.
    pub fit_note: Option<String>,
    /// Raw packets exactly as read back, for logging and reprocessing.
    pub packets: Vec<AcqPacket>,
}

impl ExperimentResult {
    fn new(x: Vec<f64>, y: Vec<f64>, sigma: Vec<f64>, packets: Vec<AcqPacket>) -> Self {
        assert!(x.len() == y.len() && y.len() == sigma.len(), "ragged result arrays");
        assert!(sigma.iter().all(|s| *s >= 0.0), "negative error bar");
        ExperimentResult { x, y, sigma, fit: None, fit_note: None, packets }
    }

    /// Three-column CSV: x, y, sigma. Floats carry 17 significant digits so
    /// reparsing reproduces the values bit for bit.
    pub fn write_csv(&self, path: &Path, x_name: &str, y_name: &str) -> io::Result<()> {
        csvio::write_csv(path, &[x_name, y_name, "sigma"], &[&self.x, &self.y, &self.sigma])
    }
}

/// Per-point shot-noise error bars. Raw counts get sigma = sqrt(N); with a
/// reference series the error is that of the ratio N_sig/N_ref.
pub fn photon_error_bars(
    counts: &[f64],
    reference_counts: Option<&[f64]>,
) -> Result<Vec<f64>, ExperimentError> {
    match reference_counts {
        None => Ok(counts.iter().map(|&n| fit::poisson_sigma(n)).collect()),
        Some(refs) => {
            if refs.len() != counts.len() {
                return Err(ExperimentError::Config(
                    "signal and reference series differ in length".into(),
                ));
            }
            counts
                .iter()
                .zip(refs)
                .map(|(&ns, &nr)| Ok(fit::ratio_with_sigma(ns, nr)?.1))
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// packet reduction helpers

#[derive(Debug, Clone, Copy, Default)]
struct PointStats {
    n: u64,
    sum_v: f64,
    sum_v2: f64,
    counts: u64,
}

fn group_by_point(packets: &[AcqPacket], points: usize) -> Result<Vec<PointStats>, ExperimentError> {
    let mut stats = vec![PointStats::default(); points];
    for p in packets {
        let s = stats.get_mut(p.point_index as usize).ok_or_else(|| {
            ExperimentError::Data(format!(
                "packet point index {} outside the {points}-point sequence",
                p.point_index
            ))
        })?;
        let v = signed_to_voltage(p.ch1);
        s.n += 1;
        s.sum_v += v;
        s.sum_v2 += v * v;
        s.counts += p.photon_count as u64;
    }
    if let Some(i) = stats.iter().position(|s| s.n == 0) {
        return Err(ExperimentError::Data(format!("no packets for sequence point {i}")));
    }
    Ok(stats)
}

/// Noise level of a smooth series from the median absolute first difference.
/// Resonance dips are sparse, so the median sees mostly pure noise.
fn robust_sigma_from_differences(y: &[f64]) -> f64 {
    let mut d: Vec<f64> = y.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    // |y[i+1]-y[i]| is half-normal with scale sqrt(2)*sigma
    d[d.len() / 2] / (0.6745 * std::f64::consts::SQRT_2)
}

/// Off-resonance baseline: median of the brightest 30% of point means.
fn off_resonance_baseline(means: &[f64]) -> f64 {
    let mut sorted = means.to_vec();
    sorted.sort_by(f64::total_cmp);
    let start = sorted.len().saturating_sub((sorted.len() * 3).div_ceil(10)).min(sorted.len() - 1);
    let top = &sorted[start..];
    top[top.len() / 2]
}

/// Mean and standard error per point. With a single shot per point the
/// standard error falls back to a global estimate from first differences.
fn means_and_sems(stats: &[PointStats], floor: f64) -> (Vec<f64>, Vec<f64>) {
    let means: Vec<f64> = stats.iter().map(|s| s.sum_v / s.n as f64).collect();
    let fallback = robust_sigma_from_differences(&means).max(floor);
    let sems = stats
        .iter()
        .map(|s| {
            if s.n >= 2 {
                let n = s.n as f64;
                let var = ((s.sum_v2 - s.sum_v * s.sum_v / n) / (n - 1.0)).max(0.0);
                (var / n).sqrt().max(floor)
            } else {
                fallback
            }
        })
        .collect();
    (means, sems)
}

fn run_sequence(
    client: &mut Client,
    scenario: &Scenario,
    sap: &SapConfig,
    pwm: Option<&SetPwmCmd>,
) -> Result<Vec<AcqPacket>, ExperimentError> {
    client.set_scenario(scenario)?;
    if let Some(p) = pwm {
        client.set_pwm(p)?;
    }
    client.set_sap(sap)?;
    client.arm()?;
    client.wait_idle(RUN_BUDGET)?;
    let total = sap.points as usize * sap.point_repeats as usize * sap.sweep_repeats as usize;
    Ok(client.read_store(total)?)
}

// ---------------------------------------------------------------------------
// cw ODMR

#[derive(Debug, Clone)]
pub struct CwOdmrParams {
    pub start_mhz: f64,
    pub stop_mhz: f64,
    pub points: u32,
    pub point_repeats: u32,
    pub sweep_repeats: u32,
    pub window_ns: u64,
    pub decimation: u32,
    pub pwm_period_ticks: u64,
    pub pwm_duty: f64,
    pub target: OdmrTarget,
    pub env: NvEnvironment,
}

impl Default for CwOdmrParams {
    fn default() -> Self {
        CwOdmrParams {
            start_mhz: 2790.0,
            stop_mhz: 2950.0,
            points: 1000,
            point_repeats: 1,
            sweep_repeats: 1,
            window_ns: 16_000_000,
            decimation: 2000,
            pwm_period_ticks: 2_500_000, // 20 ms at the 8 ns tick
            pwm_duty: 0.8,
            target: OdmrTarget::Ensemble,
            env: NvEnvironment::default(),
        }
    }
}

/// Sweep the MW list across the range, average repeats per point, and
/// normalize to the off-resonance baseline. Attaches a multi-line fit when
/// one converges; its absence (with a note) is not an acquisition failure.
pub fn run_cw_odmr(client: &mut Client, p: &CwOdmrParams) -> Result<ExperimentResult, ExperimentError> {
    if p.points < 2 {
        return Err(ExperimentError::Config(format!("need at least 2 points, got {}", p.points)));
    }
    let ascending = p.stop_mhz > p.start_mhz;
    if !ascending {
        return Err(ExperimentError::Config(format!(
            "sweep range {}..{} MHz is not ascending",
            p.start_mhz, p.stop_mhz
        )));
    }
    if p.points as usize > u16::MAX as usize {
        return Err(ExperimentError::Config("sequence limit is 65535 points".into()));
    }
    let scenario = Scenario {
        env: p.env.clone(),
        program: MwProgram::CwSweep {
            start_mhz: p.start_mhz,
            stop_mhz: p.stop_mhz,
            points: p.points,
            target: p.target,
        },
        external_trigger_period_ns: 0,
    };
    let sap = SapConfig {
        pattern: Pattern::Sequence,
        trigger_source: TriggerSource::InternalPwm,
        delay_ns: 0,
        window_ns: p.window_ns,
        points: p.points,
        point_repeats: p.point_repeats,
        sweep_repeats: p.sweep_repeats,
        decimation: p.decimation,
        ..SapConfig::default()
    };
    let pwm = SetPwmCmd { period_ticks: p.pwm_period_ticks, duty: p.pwm_duty, rise_fall_ns: 0.0 };
    let packets = run_sequence(client, &scenario, &sap, Some(&pwm))?;

    let stats = group_by_point(&packets, p.points as usize)?;
    let (means, sems) = means_and_sems(&stats, 1e-9);
    let baseline = off_resonance_baseline(&means);
    if baseline <= 0.0 {
        return Err(ExperimentError::Data("non-positive off-resonance baseline".into()));
    }
    let freqs = scenario.program.frequency_list().expect("sweep program");
    let level: Vec<f64> = means.iter().map(|v| v / baseline).collect();
    let sigma: Vec<f64> = sems.iter().map(|s| s / baseline).collect();

    let mut result = ExperimentResult::new(freqs, level, sigma, packets);
    match fit_odmr_lines(&result.x, &result.y, &result.sigma, p.env.hyperfine_mhz) {
        Ok(lines) => result.fit = Some(FitKind::OdmrLines(lines)),
        Err(e) => result.fit_note = Some(format!("line fit failed: {e}")),
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// spectrum fitting

/// A fitted ODMR spectrum: every resolved line, plus the centers of the
/// hyperfine triplets ("broad" dips) when the spectrum has that structure.
#[derive(Debug, Clone)]
pub struct OdmrLines {
    /// Triplet midpoints, ascending. Empty when no triplet structure was
    /// detected (single-line spectra).
    pub broad_centers: Vec<f64>,
    pub fit: MultiLorentzianFit,
}

/// Identify dips, recognize hyperfine triplets, and run the joint
/// multi-Lorentzian fit.
///
/// Triplet recognition cannot rely on clustering by distance: neighboring
/// triplets may interleave, putting foreign lines between members of one
/// triplet. A dip is taken as a triplet middle exactly when dips exist near
/// both of its hyperfine satellites, which stays unambiguous as long as no
/// foreign line sits within the test tolerance of a satellite position.
///
/// Interleaving has a second consequence: a middle pinched between two
/// foreign neighbors can survive only as a shoulder, not a local minimum,
/// and then never enters the dip list at all. Such middles are rescued from
/// their satellites: any pair of dips separated by twice the splitting votes
/// for its midpoint, accepted when the spectrum actually absorbs there.
pub fn fit_odmr_lines(
    x: &[f64],
    y: &[f64],
    sigma: &[f64],
    hyperfine_mhz: f64,
) -> Result<OdmrLines, FitError> {
    let dips = find_dips(x, y);
    let Some(max_prom) = dips.first().map(|d| d.prominence) else {
        return Err(FitError::TooFewDips { found: 0, requested: 1 });
    };
    let kept: Vec<_> = dips.iter().filter(|d| d.prominence >= 0.2 * max_prom).collect();

    let mut sorted_y = y.to_vec();
    sorted_y.sort_by(f64::total_cmp);
    let baseline0 = sorted_y[(sorted_y.len() * 7) / 10];

    let tol = (hyperfine_mhz * 0.25).min(0.5);
    let near = |target: f64| kept.iter().any(|c| (c.x - target).abs() <= tol);
    let mut middles: Vec<f64> = kept
        .iter()
        .filter(|c| near(c.x - hyperfine_mhz) && near(c.x + hyperfine_mhz))
        .map(|c| c.x)
        .collect();

    // Shoulder rescue: mean level of the three samples nearest t, compared
    // against the baseline to demand genuine absorption at a voted midpoint.
    let level_at = |t: f64| {
        let i = x.partition_point(|&v| v < t);
        let lo = i.saturating_sub(1).min(x.len() - 3);
        y[lo..lo + 3].iter().sum::<f64>() / 3.0
    };
    for i in 0..kept.len() {
        for j in i + 1..kept.len() {
            let gap = (kept[i].x - kept[j].x).abs();
            if (gap - 2.0 * hyperfine_mhz).abs() > tol {
                continue;
            }
            let m = (kept[i].x + kept[j].x) / 2.0;
            if middles.iter().any(|&u| (u - m).abs() <= tol) {
                continue;
            }
            if baseline0 - level_at(m) >= 0.25 * max_prom {
                middles.push(m);
            }
        }
    }
    middles.sort_by(f64::total_cmp);

    if middles.is_empty() {
        let fit = fit_lorentzian_multi(x, y, sigma, kept.len())?;
        let broad_centers = Vec::new();
        return Ok(OdmrLines { broad_centers, fit });
    }

    let mut widths: Vec<f64> = kept.iter().map(|c| c.width).collect();
    widths.sort_by(f64::total_cmp);
    let w0 = widths[widths.len() / 2].clamp(0.1, 2.0);

    let mut p0 = Vec::with_capacity(1 + 9 * middles.len());
    p0.push(baseline0);
    for &m in &middles {
        for off in [-hyperfine_mhz, 0.0, hyperfine_mhz] {
            let c0 = m + off;
            let depth = kept
                .iter()
                .min_by(|a, b| (a.x - c0).abs().total_cmp(&(b.x - c0).abs()))
                .map_or(0.01, |c| c.prominence)
                .max(1e-4);
            p0.extend([c0, w0, depth]);
        }
    }
    let fit = fit_lorentzian_with_init(x, y, sigma, &p0)?;

    let centers: Vec<f64> = fit.lines.iter().map(|l| l.center).collect();
    let nearest = |t: f64| {
        centers
            .iter()
            .copied()
            .min_by(|a, b| (a - t).abs().total_cmp(&(b - t).abs()))
            .unwrap()
    };
    let broad_centers: Vec<f64> = middles
        .iter()
        .map(|&m| (nearest(m - hyperfine_mhz) + nearest(m) + nearest(m + hyperfine_mhz)) / 3.0)
        .collect();
    Ok(OdmrLines { broad_centers, fit })
}

// ---------------------------------------------------------------------------
// Rabi

#[derive(Debug, Clone)]
pub struct RabiScanParams {
    pub durations_ns: Vec<f64>,
    pub point_repeats: u32,
    pub sweep_repeats: u32,
    pub window_ns: u64,
    pub decimation: u32,
    /// Emulated external trigger period; must exceed the readout window.
    pub trigger_period_ns: u64,
    pub env: NvEnvironment,
}

impl Default for RabiScanParams {
    fn default() -> Self {
        RabiScanParams {
            durations_ns: (0..=80).map(|i| 50.0 * i as f64).collect(),
            point_repeats: 1,
            sweep_repeats: 1,
            window_ns: 16_000_000,
            decimation: 1000,
            trigger_period_ns: 16_008_000,
            env: NvEnvironment::default(),
        }
    }
}

/// One sequence point per MW pulse length, clocked by the emulated external
/// trigger input. The photon-count channel carries the signal; the fit is a
/// damped cosine with frequency in cycles/ns.
pub fn run_rabi(client: &mut Client, p: &RabiScanParams) -> Result<ExperimentResult, ExperimentError> {
    if p.durations_ns.is_empty() {
        return Err(ExperimentError::Config("empty duration list".into()));
    }
    if p.durations_ns.len() > u16::MAX as usize {
        return Err(ExperimentError::Config("sequence limit is 65535 points".into()));
    }
    if p.trigger_period_ns < p.window_ns {
        return Err(ExperimentError::Config(format!(
            "trigger period {} ns shorter than the {} ns readout window",
            p.trigger_period_ns, p.window_ns
        )));
    }
    let scenario = Scenario {
        env: p.env.clone(),
        program: MwProgram::Rabi { durations_ns: p.durations_ns.clone() },
        external_trigger_period_ns: p.trigger_period_ns,
    };
    let sap = SapConfig {
        pattern: Pattern::Sequence,
        trigger_source: TriggerSource::ExternalDi,
        delay_ns: 0,
        window_ns: p.window_ns,
        points: p.durations_ns.len() as u32,
        point_repeats: p.point_repeats,
        sweep_repeats: p.sweep_repeats,
        decimation: p.decimation,
        ..SapConfig::default()
    };
    let packets = run_sequence(client, &scenario, &sap, None)?;

    let stats = group_by_point(&packets, p.durations_ns.len())?;
    // mean counts per window; shot noise of the summed counts
    let y: Vec<f64> = stats.iter().map(|s| s.counts as f64 / s.n as f64).collect();
    let sigma: Vec<f64> =
        stats.iter().map(|s| (fit::poisson_sigma(s.counts as f64) / s.n as f64).max(1.0)).collect();

    let mut result = ExperimentResult::new(p.durations_ns.clone(), y, sigma, packets);
    if result.x.len() >= 8 {
        match fit_damped_cosine(&result.x, &result.y, &result.sigma) {
            Ok(f) => {
                if !f.report.converged {
                    result.fit_note = Some(format!(
                        "fit stopped after {} iterations without meeting the cost tolerance",
                        f.report.iterations
                    ));
                }
                result.fit = Some(FitKind::DampedCosine(f));
            }
            Err(e) => result.fit_note = Some(format!("damped cosine fit failed: {e}")),
        }
    } else {
        result.fit_note = Some("too few points for a damped cosine fit".into());
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// pulsed ODMR

#[derive(Debug, Clone)]
pub struct PulsedOdmrParams {
    pub start_mhz: f64,
    pub stop_mhz: f64,
    pub points: u32,
    pub point_repeats: u32,
    pub sweep_repeats: u32,
    pub window_ns: u64,
    pub decimation: u32,
    pub pwm_period_ticks: u64,
    pub pwm_duty: f64,
    pub env: NvEnvironment,
}

impl Default for PulsedOdmrParams {
    fn default() -> Self {
        let env = NvEnvironment::default();
        let c = env.single_nv.center_mhz;
        PulsedOdmrParams {
            start_mhz: c - 3.0,
            stop_mhz: c + 3.0,
            points: 200,
            point_repeats: 1,
            sweep_repeats: 1,
            window_ns: 16_000_000,
            decimation: 2000,
            pwm_period_ticks: 2_500_000,
            pwm_duty: 0.8,
            env,
        }
    }
}

/// Sweep across the isolated single-NV line on the photon-count channel.
/// y is the count ratio to the off-resonance reference with propagated shot
/// noise.
pub fn run_pulsed_odmr(
    client: &mut Client,
    p: &PulsedOdmrParams,
) -> Result<ExperimentResult, ExperimentError> {
    if p.points < 2 {
        return Err(ExperimentError::Config(format!("need at least 2 points, got {}", p.points)));
    }
    let ascending = p.stop_mhz > p.start_mhz;
    if !ascending {
        return Err(ExperimentError::Config(format!(
            "sweep range {}..{} MHz is not ascending",
            p.start_mhz, p.stop_mhz
        )));
    }
    let scenario = Scenario {
        env: p.env.clone(),
        program: MwProgram::CwSweep {
            start_mhz: p.start_mhz,
            stop_mhz: p.stop_mhz,
            points: p.points,
            target: OdmrTarget::SingleNv,
        },
        external_trigger_period_ns: 0,
    };
    let sap = SapConfig {
        pattern: Pattern::Sequence,
        trigger_source: TriggerSource::InternalPwm,
        delay_ns: 0,
        window_ns: p.window_ns,
        points: p.points,
        point_repeats: p.point_repeats,
        sweep_repeats: p.sweep_repeats,
        decimation: p.decimation,
        ..SapConfig::default()
    };
    let pwm = SetPwmCmd { period_ticks: p.pwm_period_ticks, duty: p.pwm_duty, rise_fall_ns: 0.0 };
    let packets = run_sequence(client, &scenario, &sap, Some(&pwm))?;

    let stats = group_by_point(&packets, p.points as usize)?;
    let totals: Vec<f64> = stats.iter().map(|s| s.counts as f64).collect();
    let n_ref = off_resonance_baseline(&totals);
    if n_ref <= 0.0 {
        return Err(ExperimentError::Data("zero off-resonance reference counts".into()));
    }
    let mut y = Vec::with_capacity(totals.len());
    let mut sigma = Vec::with_capacity(totals.len());
    for &n_sig in &totals {
        let (r, s) = fit::ratio_with_sigma(n_sig, n_ref)?;
        y.push(r);
        sigma.push(s.max(1e-9));
    }
    let freqs = scenario.program.frequency_list().expect("sweep program");

    let mut result = ExperimentResult::new(freqs, y, sigma, packets);
    match fit_odmr_lines(&result.x, &result.y, &result.sigma, p.env.hyperfine_mhz) {
        Ok(lines) => result.fit = Some(FitKind::OdmrLines(lines)),
        Err(e) => result.fit_note = Some(format!("line fit failed: {e}")),
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// lock-in

#[derive(Debug, Clone)]
pub struct LockinParams {
    pub f_mod_hz: f64,
    pub amplitude_vpp: f64,
    pub duration_s: f64,
    /// MW carrier; park it on the dip center for a pure 2f response.
    pub carrier_mhz: f64,
    pub deviation_mhz: f64,
    /// Continuous-mode decimation; sample rate is 125 MHz / decimation.
    pub decimation: u32,
    pub env: NvEnvironment,
}

impl Default for LockinParams {
    fn default() -> Self {
        let env = NvEnvironment::default();
        LockinParams {
            f_mod_hz: 10.0,
            amplitude_vpp: 1.72,
            duration_s: 1.0,
            carrier_mhz: env.single_nv.center_mhz,
            deviation_mhz: 0.2,
            decimation: 12_500, // 10 kHz sampling
            env,
        }
    }
}

/// Demodulation of one lock-in acquisition at the first two reference
/// harmonics.
#[derive(Debug, Clone, Copy)]
pub struct LockinHarmonics {
    pub f1: LockinOutput,
    pub f2: LockinOutput,
}

/// Frequency-modulate the carrier with the on-board DDS sine, loop the same
/// tone back on AI2, stream photon counts continuously, and demodulate the
/// counts against the measured reference phase at 1f and 2f.
pub fn run_lockin(
    client: &mut Client,
    p: &LockinParams,
) -> Result<(ExperimentResult, LockinHarmonics), ExperimentError> {
    let valid = p.f_mod_hz > 0.0 && p.duration_s > 0.0;
    if !valid {
        return Err(ExperimentError::Config("modulation frequency and duration must be > 0".into()));
    }
    if p.duration_s * p.f_mod_hz < 2.0 {
        return Err(ExperimentError::Config(format!(
            "{} s covers fewer than 2 modulation periods at {} Hz",
            p.duration_s, p.f_mod_hz
        )));
    }
    let fs = 1e9 / (TICK_NS as f64 * p.decimation as f64);
    let target = (p.duration_s * fs).round() as usize;

    let scenario = Scenario {
        env: p.env.clone(),
        program: MwProgram::FixedFm { carrier_mhz: p.carrier_mhz, deviation_mhz: p.deviation_mhz },
        external_trigger_period_ns: 0,
    };
    client.set_scenario(&scenario)?;
    client.set_dds(&SetDdsCmd {
        frequency_hz: p.f_mod_hz,
        amplitude_vpp: p.amplitude_vpp,
        phase_offset_rad: 0.0,
        waveform: Waveform::Sine,
    })?;
    let sap = SapConfig {
        pattern: Pattern::Continuous,
        trigger_source: TriggerSource::Software,
        decimation: p.decimation,
        ..SapConfig::default()
    };
    client.set_sap(&sap)?;
    client.arm()?;

    // the ring is smaller than a full acquisition; drain while streaming
    let mut packets: Vec<AcqPacket> = Vec::with_capacity(target);
    while packets.len() < target {
        let want = (target - packets.len()).min(sap.continuous_read_max as usize) as u16;
        let chunk = client.read(0, want)?;
        if chunk.is_empty() {
            std::thread::sleep(Duration::from_millis(1));
        } else {
            packets.extend_from_slice(&chunk);
        }
    }
    client.stop()?;

    let span_s = 1.0 / fs;
    let t: Vec<f64> = packets.iter().map(|p| p.timestamp_ns as f64 * 1e-9).collect();
    let counts: Vec<f64> = packets.iter().map(|p| p.photon_count as f64).collect();
    let reference: Vec<f64> = packets.iter().map(|p| signed_to_voltage(p.ch2)).collect();
    for w in t.windows(2) {
        if ((w[1] - w[0]) - span_s).abs() > 0.25 * span_s {
            return Err(ExperimentError::Data("continuous stream has a timing gap".into()));
        }
    }

    // a wired-up loopback shows most of the programmed swing; anything far
    // below that means the reference never reached AI2
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi - lo < 0.05 * p.amplitude_vpp {
        return Err(ExperimentError::Lockin(LockinError::NoReference));
    }

    let harmonics = LockinHarmonics {
        f1: demodulate(&counts, &reference, 1)?,
        f2: demodulate(&counts, &reference, 2)?,
    };

    let sigma = photon_error_bars(&counts, None)?;
    let mut result = ExperimentResult::new(t, counts, sigma, packets);
    match fit_sinusoid(&result.x, &result.y, &result.sigma) {
        Ok(f) => result.fit = Some(FitKind::Sinusoid(f)),
        Err(e) => result.fit_note = Some(format!("sinusoid fit failed: {e}")),
    }
    Ok((result, harmonics))
}
