//! Software lock-in demodulation against a measured reference channel.
//!
//! The reference phase is reconstructed from the sampled waveform itself, not
//! from the programmed generator settings: rising zero crossings are located
//! by linear interpolation and phase advances 2*pi per cycle between them.
//! Phase zero sits at the reference maximum (cosine convention), so a rising
//! crossing is -pi/2. A signal in phase with the reference therefore
//! demodulates to phase ~0 at either harmonic.
//!
//! Both series must share a uniform sample grid; only whole reference periods
//! between the first and last crossing enter the demodulation sums, which
//! keeps DC and off-harmonic leakage out of X and Y.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LockinError {
    #[error("sample and reference series must have equal length")]
    LengthMismatch,
    #[error("series covers fewer than 2 reference periods")]
    TooShort,
    #[error("reference has no detectable oscillation")]
    NoReference,
    #[error("harmonic must be 1 or 2")]
    BadHarmonic,
    #[error("non-finite sample in input")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LockinOutput {
    pub x: f64,
    pub y: f64,
    pub r: f64,
    /// Signal lag behind the reference harmonic, in (-pi, pi].
    pub phase: f64,
}

/// Reference phase track over sample indices.
#[derive(Debug, Clone)]
pub struct PhaseTrack {
    /// Phase at each sample index, radians, unwrapped.
    pub phase: Vec<f64>,
    /// Rising zero crossings as fractional sample indices.
    pub crossings: Vec<f64>,
    /// Mean period in samples.
    pub period: f64,
    /// Half the peak-to-peak excursion after DC removal.
    pub amplitude: f64,
}

/// Reconstruct the reference phase from rising zero crossings of the
/// DC-removed waveform. Needs at least 3 crossings (2 full periods).
pub fn reference_phase(reference: &[f64]) -> Result<PhaseTrack, LockinError> {
    let n = reference.len();
    if n < 4 {
        return Err(LockinError::TooShort);
    }
    if reference.iter().any(|v| !v.is_finite()) {
        return Err(LockinError::NonFinite);
    }
    let mean = reference.iter().sum::<f64>() / n as f64;
    let r: Vec<f64> = reference.iter().map(|v| v - mean).collect();
    let (lo, hi) =
        r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let amplitude = (hi - lo) / 2.0;
    if amplitude <= 0.0 {
        return Err(LockinError::NoReference);
    }

    let mut crossings = Vec::new();
    for i in 0..n - 1 {
        if r[i] < 0.0 && r[i + 1] >= 0.0 {
            crossings.push(i as f64 + r[i] / (r[i] - r[i + 1]));
        }
    }
    if crossings.len() < 3 {
        return Err(LockinError::TooShort);
    }
    let period =
        (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64;

    // phase at a rising crossing is -pi/2 under the cosine convention
    let mut phase = vec![0.0; n];
    let tau = std::f64::consts::TAU;
    for (i, ph) in phase.iter_mut().enumerate() {
        let t = i as f64;
        let seg = match crossings.binary_search_by(|c| c.total_cmp(&t)) {
            Ok(k) => k,
            Err(0) => 0,
            Err(k) if k >= crossings.len() => crossings.len() - 2,
            Err(k) => k - 1,
        };
        let seg = seg.min(crossings.len() - 2);
        let (c0, c1) = (crossings[seg], crossings[seg + 1]);
        *ph = -std::f64::consts::FRAC_PI_2 + tau * (seg as f64 + (t - c0) / (c1 - c0));
    }
    Ok(PhaseTrack { phase, crossings, period, amplitude })
}

/// Synchronous demodulation of `samples` at `harmonic` times the reference
/// frequency: X = (2/M) sum x_i cos(n phi_i), Y likewise with sine, where the
/// sum runs over the whole periods between the first and last crossing and
/// x has its DC component removed.
pub fn demodulate(
    samples: &[f64],
    reference: &[f64],
    harmonic: u8,
) -> Result<LockinOutput, LockinError> {
    if samples.len() != reference.len() {
        return Err(LockinError::LengthMismatch);
    }
    if !(harmonic == 1 || harmonic == 2) {
        return Err(LockinError::BadHarmonic);
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(LockinError::NonFinite);
    }
    let track = reference_phase(reference)?;
    demodulate_with_phase(samples, &track, harmonic)
}

/// Demodulate against an already reconstructed phase track. Useful when one
/// reference serves several signals.
pub fn demodulate_with_phase(
    samples: &[f64],
    track: &PhaseTrack,
    harmonic: u8,
) -> Result<LockinOutput, LockinError> {
    if samples.len() != track.phase.len() {
        return Err(LockinError::LengthMismatch);
    }
    if !(harmonic == 1 || harmonic == 2) {
        return Err(LockinError::BadHarmonic);
    }
    let first = *track.crossings.first().unwrap();
    let last = *track.crossings.last().unwrap();
    let lo = first.ceil() as usize;
    let hi = (last.ceil() as usize).min(samples.len());
    if hi <= lo {
        return Err(LockinError::TooShort);
    }
    let m = (hi - lo) as f64;
    let mean = samples[lo..hi].iter().sum::<f64>() / m;
    let h = harmonic as f64;
    let (mut x, mut y) = (0.0, 0.0);
    for (sample, phase) in samples[lo..hi].iter().zip(&track.phase[lo..hi]) {
        let (s, c) = (h * phase).sin_cos();
        let v = sample - mean;
        x += v * c;
        y += v * s;
    }
    x *= 2.0 / m;
    y *= 2.0 / m;
    Ok(LockinOutput { x, y, r: x.hypot(y), phase: y.atan2(x) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TAU: f64 = std::f64::consts::TAU;

    /// Cosine-convention reference: max at phase 0.
    fn cos_reference(n: usize, cycles: f64, phase0: f64) -> (Vec<f64>, Vec<f64>) {
        let phases: Vec<f64> =
            (0..n).map(|i| TAU * cycles * i as f64 / n as f64 + phase0).collect();
        let wave = phases.iter().map(|p| p.cos()).collect();
        (phases, wave)
    }

    #[test]
    fn phase_reconstruction_matches_true_phase() {
        let (true_phase, wave) = cos_reference(5000, 10.3, 0.4);
        let track = reference_phase(&wave).unwrap();
        // compare away from the extrapolated edges, modulo 2*pi
        for (i, (got, want)) in track.phase.iter().zip(&true_phase).enumerate().take(4400).skip(600)
        {
            let d = (got - want).rem_euclid(TAU);
            let d = d.min(TAU - d);
            assert!(d < 0.01, "phase error {d} at sample {i}");
        }
        assert_abs_diff_eq!(track.period, 5000.0 / 10.3, epsilon = 0.5);
    }

    #[test]
    fn in_phase_second_harmonic_lands_on_x() {
        let (true_phase, wave) = cos_reference(4000, 8.0, 1.1);
        let samples: Vec<f64> = true_phase.iter().map(|p| 0.7 * (2.0 * p).cos()).collect();
        let out = demodulate(&samples, &wave, 2).unwrap();
        assert_abs_diff_eq!(out.x, 0.7, epsilon = 2e-3);
        assert_abs_diff_eq!(out.y, 0.0, epsilon = 2e-3);
        assert!(out.phase.abs() < 5e-3);
    }

    #[test]
    fn constant_signal_demodulates_to_zero() {
        let (_, wave) = cos_reference(2000, 5.0, 0.0);
        let samples = vec![3.7; 2000];
        for h in [1u8, 2] {
            let out = demodulate(&samples, &wave, h).unwrap();
            assert!(out.r < 1e-12, "harmonic {h} leaked {}", out.r);
        }
    }

    #[test]
    fn mixed_tone_quadratures() {
        // x = A*sin(2 phi) + B*cos(phi): harmonic 1 -> (B, 0), harmonic 2 -> (0, A)
        let (a, b) = (0.6, 1.3);
        let (true_phase, wave) = cos_reference(6000, 12.0, 0.2);
        let samples: Vec<f64> =
            true_phase.iter().map(|p| a * (2.0 * p).sin() + b * p.cos()).collect();
        let h1 = demodulate(&samples, &wave, 1).unwrap();
        assert_abs_diff_eq!(h1.x, b, epsilon = 3e-3);
        assert_abs_diff_eq!(h1.y, 0.0, epsilon = 3e-3);
        let h2 = demodulate(&samples, &wave, 2).unwrap();
        assert_abs_diff_eq!(h2.x, 0.0, epsilon = 3e-3);
        assert_abs_diff_eq!(h2.y, a, epsilon = 3e-3);
    }

    #[test]
    fn pure_1f_tone_rejected_at_2f() {
        let (true_phase, wave) = cos_reference(12_000, 11.0, 0.9);
        let samples: Vec<f64> = true_phase.iter().map(|p| (p - 0.3).cos()).collect();
        let r1 = demodulate(&samples, &wave, 1).unwrap().r;
        let r2 = demodulate(&samples, &wave, 2).unwrap().r;
        assert!(r2 < 0.01 * r1, "2f leakage {r2} vs 1f {r1}");
        // the 1f phase reads the injected lag
        let phase = demodulate(&samples, &wave, 1).unwrap().phase;
        assert_abs_diff_eq!(phase, 0.3, epsilon = 2e-3);
    }

    #[test]
    fn short_series_and_flat_reference_are_rejected() {
        let (_, wave) = cos_reference(1000, 1.5, 0.0);
        let samples = vec![0.0; 1000];
        assert_eq!(demodulate(&samples, &wave, 1), Err(LockinError::TooShort));
        assert_eq!(demodulate(&samples, &vec![2.0; 1000], 1), Err(LockinError::NoReference));
        assert_eq!(demodulate(&samples, &wave[..900], 1), Err(LockinError::LengthMismatch));
        let (_, wave) = cos_reference(1000, 5.0, 0.0);
        assert_eq!(demodulate(&samples, &wave, 3), Err(LockinError::BadHarmonic));
    }

    #[test]
    fn noisy_reference_still_tracks_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (true_phase, clean) = cos_reference(8000, 9.0, 0.0);
        let wave: Vec<f64> =
            clean.iter().map(|v| v + 0.01 * (rng.random::<f64>() - 0.5)).collect();
        let samples: Vec<f64> = true_phase.iter().map(|p| (2.0 * p).cos()).collect();
        let out = demodulate(&samples, &wave, 2).unwrap();
        assert!(out.phase.abs() < 0.02, "phase {} should stay near 0", out.phase);
        assert_abs_diff_eq!(out.r, 1.0, epsilon = 0.01);
    }

    proptest! {
        #[test]
        fn demodulation_is_linear(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            lag1 in -3.0f64..3.0,
            lag2 in -3.0f64..3.0,
        ) {
            let (true_phase, wave) = cos_reference(3000, 6.0, 0.5);
            let x1: Vec<f64> = true_phase.iter().map(|p| (p - lag1).cos()).collect();
            let x2: Vec<f64> = true_phase.iter().map(|p| (2.0 * p - lag2).cos()).collect();
            let combo: Vec<f64> =
                x1.iter().zip(&x2).map(|(u, v)| a * u + b * v).collect();
            for h in [1u8, 2] {
                let d1 = demodulate(&x1, &wave, h).unwrap();
                let d2 = demodulate(&x2, &wave, h).unwrap();
                let dc = demodulate(&combo, &wave, h).unwrap();
                prop_assert!((dc.x - (a * d1.x + b * d2.x)).abs() < 1e-9);
                prop_assert!((dc.y - (a * d1.y + b * d2.y)).abs() < 1e-9);
            }
        }
    }
}
