//! Experiment flows against a live loopback server: spectra, Rabi scans and
//! lock-in runs with their statistical contracts.

use spindaq::client::Client;
use spindaq::config::{ReliabilityConfig, ServerConfig};
use spindaq::experiments::{
    run_cw_odmr, run_lockin, run_rabi, CwOdmrParams, ExperimentError, FitKind, LockinParams,
    RabiScanParams,
};
use spindaq::lockin::LockinError;
use spindaq::nv::{resonance_lines, NvEnvironment};
use spindaq::server::Server;

fn start() -> (Server, Client) {
    let server = Server::spawn(ServerConfig { port: 0, ..ServerConfig::default() }).unwrap();
    let addr = std::net::SocketAddr::from(([127, 0, 0, 1], server.local_addr().port()));
    let client = Client::connect(addr, ReliabilityConfig::default()).unwrap();
    (server, client)
}

fn noiseless_env() -> NvEnvironment {
    NvEnvironment { pd_noise_rms_v: 0.0, ..NvEnvironment::default() }
}

#[test]
fn noiseless_sweep_recovers_every_configured_resonance() {
    let (_server, mut client) = start();
    let params = CwOdmrParams {
        window_ns: 8_000,
        decimation: 10,
        pwm_period_ticks: 1_000,
        env: noiseless_env(),
        ..CwOdmrParams::default()
    };
    let result = run_cw_odmr(&mut client, &params).unwrap();
    assert_eq!(result.x.len(), 1000);
    assert_eq!(result.packets.len(), 1000);

    let Some(FitKind::OdmrLines(lines)) = &result.fit else {
        panic!("expected a line fit, note: {:?}", result.fit_note);
    };
    let truth = resonance_lines(&params.env);
    assert_eq!(lines.fit.lines.len(), truth.len());
    for (fitted, t) in lines.fit.lines.iter().zip(&truth) {
        let rel = (fitted.center - t.center_mhz).abs() / t.center_mhz;
        assert!(rel < 1e-3, "center {} vs {}", fitted.center, t.center_mhz);
    }
    assert_eq!(lines.broad_centers.len(), 8);
}

#[test]
fn sweep_without_lines_sits_at_the_baseline() {
    let (_server, mut client) = start();
    let params = CwOdmrParams {
        start_mhz: 2000.0,
        stop_mhz: 2010.0,
        points: 2,
        window_ns: 8_000,
        decimation: 10,
        pwm_period_ticks: 1_000,
        env: noiseless_env(),
        ..CwOdmrParams::default()
    };
    let result = run_cw_odmr(&mut client, &params).unwrap();
    for level in &result.y {
        assert!((level - 1.0).abs() < 2e-3, "flat spectrum expected, got {level}");
    }
}

#[test]
fn single_point_sweeps_are_rejected() {
    let (_server, mut client) = start();
    let params = CwOdmrParams { points: 1, ..CwOdmrParams::default() };
    assert!(matches!(run_cw_odmr(&mut client, &params), Err(ExperimentError::Config(_))));
    let inverted = CwOdmrParams { start_mhz: 2950.0, stop_mhz: 2790.0, ..CwOdmrParams::default() };
    assert!(matches!(run_cw_odmr(&mut client, &inverted), Err(ExperimentError::Config(_))));
}

/// More repeats per point shrink the error bars like 1/sqrt(R).
#[test]
fn error_bars_scale_with_repeat_count() {
    let (_server, mut client) = start();
    let sigma_at = |client: &mut Client, repeats: u32| {
        let params = CwOdmrParams {
            start_mhz: 2820.0,
            stop_mhz: 2830.0,
            points: 40,
            point_repeats: repeats,
            window_ns: 40_000,
            decimation: 100,
            pwm_period_ticks: 5_000,
            pwm_duty: 0.5,
            ..CwOdmrParams::default()
        };
        let result = run_cw_odmr(client, &params).unwrap();
        let mut s = result.sigma.clone();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };
    let s1 = sigma_at(&mut client, 1);
    let s4 = sigma_at(&mut client, 4);
    let s16 = sigma_at(&mut client, 16);
    assert!((s4 / s1 - 0.5).abs() < 0.2, "sigma(R=4)/sigma(R=1) = {}", s4 / s1);
    assert!((s16 / s1 - 0.25).abs() < 0.15, "sigma(R=16)/sigma(R=1) = {}", s16 / s1);
}

#[test]
fn rabi_scan_recovers_the_drive_frequency() {
    let (_server, mut client) = start();
    let params = RabiScanParams {
        durations_ns: (0..=50).map(|i| 40.0 * i as f64).collect(),
        window_ns: 4_000_000,
        decimation: 1000,
        trigger_period_ns: 4_008_000,
        ..RabiScanParams::default()
    };
    let result = run_rabi(&mut client, &params).unwrap();

    // zero pulse length leaves the spins bright: the first point sits at the
    // maximum, up to shot noise
    let max = result.y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(
        result.y[0] > max - 8.0 * result.sigma[0],
        "y[0]={} max={max} sigma={}",
        result.y[0],
        result.sigma[0]
    );

    let Some(FitKind::DampedCosine(fit)) = &result.fit else {
        panic!("expected a damped cosine fit, note: {:?}", result.fit_note);
    };
    // with the a - b*cos(.)exp(.) form, a bright start means b < 0
    assert!(fit.amplitude < 0.0);
    let f_mhz = fit.frequency * 1e3;
    let truth = params.env.rabi.frequency_mhz;
    assert!(
        (f_mhz - truth).abs() / truth < 0.02,
        "fitted {f_mhz} MHz vs configured {truth} MHz"
    );
    assert!(fit.decay_rate > 0.0);
}

#[test]
fn lockin_on_the_dip_center_responds_at_twice_the_modulation() {
    let (_server, mut client) = start();
    let params = LockinParams { duration_s: 0.5, ..LockinParams::default() };
    let (result, harmonics) = run_lockin(&mut client, &params).unwrap();
    assert!(result.x.len() >= 4_999, "expected ~5000 spans, got {}", result.x.len());

    // parked on the symmetric dip center: even harmonic dominates
    assert!(
        harmonics.f2.r > 5.0 * harmonics.f1.r,
        "2f={} should dominate 1f={}",
        harmonics.f2.r,
        harmonics.f1.r
    );
    assert!(
        harmonics.f2.phase.abs() < 10f64.to_radians(),
        "2f phase {} deg",
        harmonics.f2.phase.to_degrees()
    );

    let Some(FitKind::Sinusoid(fit)) = &result.fit else {
        panic!("expected a sinusoid fit, note: {:?}", result.fit_note);
    };
    let expected = 2.0 * params.f_mod_hz;
    assert!(
        (fit.frequency - expected).abs() / expected < 0.02,
        "fluorescence oscillates at {} Hz, expected {expected} Hz",
        fit.frequency
    );
}

#[test]
fn lockin_detuning_direction_flips_the_1f_sign() {
    let run_detuned = |offset_mhz: f64| {
        let (_server, mut client) = start();
        let mut params = LockinParams { duration_s: 0.4, ..LockinParams::default() };
        params.carrier_mhz += offset_mhz;
        let (_, harmonics) = run_lockin(&mut client, &params).unwrap();
        harmonics
    };
    let plus = run_detuned(0.15);
    let minus = run_detuned(-0.15);
    assert!(
        plus.f1.x * minus.f1.x < 0.0,
        "1f in-phase parts should flip sign: {} vs {}",
        plus.f1.x,
        minus.f1.x
    );
    assert!(plus.f1.r > 1.0 && minus.f1.r > 1.0, "detuned 1f must rise above the noise");
}

#[test]
fn missing_reference_is_reported_as_such() {
    let (_server, mut client) = start();
    let params = LockinParams { amplitude_vpp: 0.0, duration_s: 0.3, ..LockinParams::default() };
    match run_lockin(&mut client, &params) {
        Err(ExperimentError::Lockin(LockinError::NoReference)) => {}
        other => panic!("expected the no-reference error, got {other:?}"),
    }
}
