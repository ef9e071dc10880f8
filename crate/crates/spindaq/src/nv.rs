//! Spin physics for synthesizing detector signals: resonance line sets for an
//! NV ensemble, cw and pulsed fluorescence levels, Rabi oscillations,
//! FM-modulated photon rates and Poisson photon statistics.
//!
//! Conventions: frequencies in MHz, magnetic field in gauss, times in
//! emulated nanoseconds, photon rates in Hz. Fluorescence "level" is the
//! relative emission normalized to 1 far off resonance.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Zero-field splitting of the NV ground state, MHz.
pub const ZFS_MHZ: f64 = 2870.0;
/// NV gyromagnetic ratio, MHz per gauss.
pub const GYRO_MHZ_PER_G: f64 = 2.8024;
/// 14N hyperfine splitting, MHz.
pub const HYPERFINE_MHZ: f64 = 2.16;
/// The four NV symmetry axes in the diamond lattice (unnormalized).
pub const NV_AXES: [[f64; 3]; 4] =
    [[1.0, 1.0, 1.0], [-1.0, 1.0, 1.0], [1.0, -1.0, 1.0], [1.0, 1.0, -1.0]];

/// Lines closer than this merge into one (degenerate field projections).
const MERGE_TOL_MHZ: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum NvError {
    #[error("summed dip contrast {0} must stay below 1")]
    ContrastTooDeep(f64),
    #[error("linewidth must be positive, got {0} MHz")]
    BadLinewidth(f64),
    #[error("rate {0} Hz must be non-negative and finite")]
    BadRate(f64),
}

/// One Lorentzian dip in the ODMR spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceLine {
    pub center_mhz: f64,
    pub contrast: f64,
    pub fwhm_mhz: f64,
}

/// The isolated line used for single-NV pulsed work, hyperfine-collapsed and
/// shifted far from the zero-field ensemble cluster by a strong bias field
/// (520 G along the NV axis puts it near 1412.8 MHz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleNvLine {
    pub center_mhz: f64,
    pub fwhm_mhz: f64,
    pub contrast: f64,
}

impl Default for SingleNvLine {
    fn default() -> Self {
        SingleNvLine {
            center_mhz: ZFS_MHZ - GYRO_MHZ_PER_G * 520.0,
            fwhm_mhz: 0.4,
            contrast: 0.30,
        }
    }
}

impl From<SingleNvLine> for ResonanceLine {
    fn from(l: SingleNvLine) -> ResonanceLine {
        ResonanceLine { center_mhz: l.center_mhz, contrast: l.contrast, fwhm_mhz: l.fwhm_mhz }
    }
}

/// Ground truth for an on-resonance Rabi drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RabiParams {
    pub frequency_mhz: f64,
    pub decay_ns: f64,
    pub contrast: f64,
}

impl Default for RabiParams {
    fn default() -> Self {
        RabiParams { frequency_mhz: 5.0, decay_ns: 3000.0, contrast: 0.2 }
    }
}

/// Everything the emulator needs to know about the sample and the detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NvEnvironment {
    pub b_field_gauss: [f64; 3],
    pub zfs_mhz: f64,
    pub gyro_mhz_per_g: f64,
    pub hyperfine_mhz: f64,
    /// Per-line FWHM of the ensemble dips.
    pub linewidth_mhz: f64,
    /// Per-line dip depth of the ensemble dips.
    pub contrast: f64,
    pub single_nv: SingleNvLine,
    pub rabi: RabiParams,
    /// APD count rate far off resonance.
    pub baseline_photon_rate_hz: f64,
    /// Photodiode output far off resonance.
    pub baseline_pd_volts: f64,
    pub pd_noise_rms_v: f64,
    pub ai2_noise_rms_v: f64,
    pub temperature_c: f64,
}

impl Default for NvEnvironment {
    fn default() -> Self {
        NvEnvironment {
            b_field_gauss: [10.0, 6.0, 3.0],
            zfs_mhz: ZFS_MHZ,
            gyro_mhz_per_g: GYRO_MHZ_PER_G,
            hyperfine_mhz: HYPERFINE_MHZ,
            linewidth_mhz: 0.5,
            contrast: 0.008,
            single_nv: SingleNvLine::default(),
            rabi: RabiParams::default(),
            baseline_photon_rate_hz: 1e6,
            baseline_pd_volts: 0.5,
            pd_noise_rms_v: 0.002,
            ai2_noise_rms_v: 0.0,
            temperature_c: 40.0,
        }
    }
}

impl NvEnvironment {
    pub fn validate(&self) -> Result<(), NvError> {
        if self.linewidth_mhz <= 0.0 || self.single_nv.fwhm_mhz <= 0.0 {
            return Err(NvError::BadLinewidth(self.linewidth_mhz.min(self.single_nv.fwhm_mhz)));
        }
        let total: f64 = resonance_lines(self).iter().map(|l| l.contrast).sum();
        if total >= 1.0 {
            return Err(NvError::ContrastTooDeep(total));
        }
        if self.single_nv.contrast >= 1.0 || self.rabi.contrast >= 1.0 {
            return Err(NvError::ContrastTooDeep(self.single_nv.contrast.max(self.rabi.contrast)));
        }
        for r in [self.baseline_photon_rate_hz, self.baseline_pd_volts] {
            if !r.is_finite() || r < 0.0 {
                return Err(NvError::BadRate(r));
            }
        }
        Ok(())
    }
}

/// Field projections |B . n_k| onto the four NV axes, gauss.
pub fn axis_projections_gauss(b_field_gauss: [f64; 3]) -> [f64; 4] {
    let norm = 3f64.sqrt();
    NV_AXES.map(|ax| {
        let dot = ax[0] * b_field_gauss[0] + ax[1] * b_field_gauss[1] + ax[2] * b_field_gauss[2];
        (dot / norm).abs()
    })
}

fn merge_sorted(mut centers: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    centers.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(centers.len());
    for (c, w) in centers {
        match out.last_mut() {
            Some(last) if (c - last.0).abs() < MERGE_TOL_MHZ => last.1 += w,
            _ => out.push((c, w)),
        }
    }
    out
}

/// The distinct coarse dip centers `zfs +/- gyro*|B.n_k|`, ascending.
/// Degenerate projections merge, so an unmagnetized sample has one.
pub fn broad_centers_mhz(env: &NvEnvironment) -> Vec<f64> {
    let mut centers = Vec::with_capacity(8);
    for b in axis_projections_gauss(env.b_field_gauss) {
        let shift = env.gyro_mhz_per_g * b;
        centers.push((env.zfs_mhz - shift, 1.0));
        centers.push((env.zfs_mhz + shift, 1.0));
    }
    merge_sorted(centers).into_iter().map(|(c, _)| c).collect()
}

/// Full ensemble line set: every broad center splits into the three 14N
/// hyperfine components. Coincident lines merge with summed contrast, which
/// collapses the zero-field spectrum to three lines.
pub fn resonance_lines(env: &NvEnvironment) -> Vec<ResonanceLine> {
    let mut lines = Vec::with_capacity(24);
    for b in axis_projections_gauss(env.b_field_gauss) {
        let shift = env.gyro_mhz_per_g * b;
        for sign in [-1.0, 1.0] {
            let broad = env.zfs_mhz + sign * shift;
            for hf in [-env.hyperfine_mhz, 0.0, env.hyperfine_mhz] {
                lines.push((broad + hf, env.contrast));
            }
        }
    }
    merge_sorted(lines)
        .into_iter()
        .map(|(c, w)| ResonanceLine { center_mhz: c, contrast: w, fwhm_mhz: env.linewidth_mhz })
        .collect()
}

/// Unit-height Lorentzian: 1 at the center, 1/2 at +/- FWHM/2.
pub fn lorentzian(f_mhz: f64, center_mhz: f64, fwhm_mhz: f64) -> f64 {
    let hw = fwhm_mhz / 2.0;
    hw * hw / ((f_mhz - center_mhz).powi(2) + hw * hw)
}

/// Relative cw fluorescence at a drive frequency for a set of dips.
pub fn cw_odmr_level(f_mhz: f64, lines: &[ResonanceLine]) -> f64 {
    1.0 - lines
        .iter()
        .map(|l| l.contrast * lorentzian(f_mhz, l.center_mhz, l.fwhm_mhz))
        .sum::<f64>()
}

/// Relative fluorescence after a resonant MW pulse of length `t_ns`:
/// damped Rabi oscillation between the spin projections.
pub fn rabi_level(t_ns: f64, p: &RabiParams) -> f64 {
    let osc = (std::f64::consts::TAU * p.frequency_mhz * t_ns * 1e-3).cos();
    let env = (-t_ns / p.decay_ns).exp();
    1.0 - p.contrast / 2.0 * (1.0 - osc * env)
}

/// Instantaneous photon rate while the carrier is frequency-modulated by a
/// normalized drive `v in [-1, 1]`: `f = carrier + deviation * v`, evaluated
/// against the single-NV line.
pub fn fm_modulated_rate(
    env: &NvEnvironment,
    carrier_mhz: f64,
    deviation_mhz: f64,
    drive_norm: f64,
) -> f64 {
    let f = carrier_mhz + deviation_mhz * drive_norm;
    let line: ResonanceLine = env.single_nv.into();
    env.baseline_photon_rate_hz * cw_odmr_level(f, std::slice::from_ref(&line))
}

/// Draw the photon count in [t0, t0 + span) for a possibly time-varying rate
/// by thinning a homogeneous Poisson process at `max_rate_hz`. Exact when
/// `rate(t) <= max_rate_hz` everywhere in the span.
pub fn sample_photons(
    mut rate_hz_at: impl FnMut(f64) -> f64,
    max_rate_hz: f64,
    t0_ns: u64,
    span_ns: u64,
    rng: &mut impl Rng,
) -> u64 {
    debug_assert!(max_rate_hz >= 0.0);
    if max_rate_hz <= 0.0 || span_ns == 0 {
        return 0;
    }
    let lambda_per_ns = max_rate_hz * 1e-9;
    let t_end = t0_ns as f64 + span_ns as f64;
    let mut t = t0_ns as f64;
    let mut count = 0u64;
    loop {
        // exponential inter-arrival via inverse CDF; 1-u avoids ln(0)
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / lambda_per_ns;
        if t >= t_end {
            return count;
        }
        let keep: f64 = rng.random();
        if keep * max_rate_hz < rate_hz_at(t) {
            count += 1;
        }
    }
}

/// Photodiode output for a given fluorescence level: baseline scaled by the
/// level, plus Gaussian noise, plus the thermal input bias (millivolts).
pub fn pd_voltage(level: f64, env: &NvEnvironment, bias_mv: f64, rng: &mut impl Rng) -> f64 {
    let mut v = env.baseline_pd_volts * level + bias_mv * 1e-3;
    if env.pd_noise_rms_v > 0.0 {
        v += Normal::new(0.0, env.pd_noise_rms_v).unwrap().sample(rng);
    }
    v
}

/// Emulated list-mode MW generator: outputs `list[cursor]` and steps once per
/// trigger edge, wrapping at the end of the list (= start of the next sweep).
#[derive(Debug, Clone, PartialEq)]
pub struct MwState {
    pub list_mhz: Vec<f64>,
    pub cursor: usize,
}

impl MwState {
    pub fn new(list_mhz: Vec<f64>) -> Self {
        assert!(!list_mhz.is_empty());
        MwState { list_mhz, cursor: 0 }
    }

    pub fn current_mhz(&self) -> f64 {
        self.list_mhz[self.cursor]
    }

    pub fn on_trigger(&mut self) {
        self.cursor = (self.cursor + 1) % self.list_mhz.len();
    }
}
