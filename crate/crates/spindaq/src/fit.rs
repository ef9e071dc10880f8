//! Weighted nonlinear least squares for the experiment pipelines.
//!
//! The solver is a dense Levenberg-Marquardt. Models here carry at most a few
//! dozen parameters, so forming the normal equations and solving them with
//! Gaussian elimination is simple and fast. Steps are accepted only when they
//! reduce the cost, which makes the cost history monotone non-increasing by
//! construction; convergence is declared when an accepted step improves the
//! cost by less than [`RELATIVE_COST_TOL`] relative, with a hard cap of
//! [`MAX_ITERATIONS`] outer iterations.

use thiserror::Error;

pub const MAX_ITERATIONS: usize = 200;
pub const RELATIVE_COST_TOL: f64 = 1e-9;
const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e14;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("x, y, and sigma arrays must have equal length")]
    LengthMismatch,
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("found {found} candidate dips, need {requested}")]
    TooFewDips { found: usize, requested: usize },
    #[error("non-finite value in input data")]
    NonFinite,
    #[error("zero reference count makes the ratio undefined")]
    ZeroReference,
}

/// Outcome of one optimizer run. `covariance` is row-major `np x np`,
/// NaN-filled when the normal matrix is singular at the solution.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: Vec<f64>,
    pub covariance: Vec<f64>,
    pub chi2: f64,
    pub reduced_chi2: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Accepted costs, starting with the initial guess.
    pub cost_history: Vec<f64>,
}

impl FitReport {
    pub fn param_sigma(&self, i: usize) -> f64 {
        let np = self.params.len();
        self.covariance[i * np + i].max(0.0).sqrt()
    }
}

fn check_inputs(x: &[f64], y: &[f64], sigma: &[f64], np: usize) -> Result<(), FitError> {
    if x.len() != y.len() || x.len() != sigma.len() {
        return Err(FitError::LengthMismatch);
    }
    if x.len() < np {
        return Err(FitError::TooFewPoints { need: np, got: x.len() });
    }
    if x.iter().chain(y).chain(sigma).any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite);
    }
    Ok(())
}

/// Solve `a * x = b` (row-major `n x n`) by Gaussian elimination with partial
/// pivoting. Returns None when the matrix is singular to working precision.
fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let mut piv = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[piv * n + col].abs() {
                piv = row;
            }
        }
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                a.swap(piv * n + c, col * n + c);
            }
            b.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for c in col..n {
                    a[row * n + c] -= f * a[col * n + c];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for c in row + 1..n {
            s -= a[row * n + c] * x[c];
        }
        x[row] = s / a[row * n + row];
    }
    Some(x)
}

/// Invert a row-major `n x n` matrix by Gauss-Jordan elimination.
fn invert(mut a: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut piv = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[piv * n + col].abs() {
                piv = row;
            }
        }
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for c in 0..n {
                a.swap(piv * n + c, col * n + c);
                inv.swap(piv * n + c, col * n + c);
            }
        }
        let d = a[col * n + col];
        for c in 0..n {
            a[col * n + c] /= d;
            inv[col * n + c] /= d;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = a[row * n + col];
            if f != 0.0 {
                for c in 0..n {
                    a[row * n + c] -= f * a[col * n + c];
                    inv[row * n + c] -= f * inv[col * n + c];
                }
            }
        }
    }
    Some(inv)
}

/// Minimize sum of w_i * (y_i - model(x_i; p))^2 where w_i = 1/sigma_i^2.
/// Nonpositive sigmas mean "unweighted" (w = 1). The model closure writes
/// d(model)/d(p_j) into `grad` and returns the model value.
pub fn levenberg_marquardt<F>(
    x: &[f64],
    y: &[f64],
    sigma: &[f64],
    p0: &[f64],
    mut model: F,
) -> Result<FitReport, FitError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> f64,
{
    let np = p0.len();
    let n = x.len();
    check_inputs(x, y, sigma, np)?;
    if p0.iter().any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite);
    }
    let weights: Vec<f64> = sigma.iter().map(|&s| if s > 0.0 { 1.0 / (s * s) } else { 1.0 }).collect();

    fn weighted_cost<F>(
        x: &[f64],
        y: &[f64],
        w: &[f64],
        p: &[f64],
        model: &mut F,
        grad: &mut [f64],
    ) -> f64
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> f64,
    {
        let mut c = 0.0;
        for i in 0..x.len() {
            let r = y[i] - model(x[i], p, grad);
            c += w[i] * r * r;
        }
        c
    }

    let mut grad = vec![0.0; np];
    let mut p = p0.to_vec();
    let mut cost = weighted_cost(x, y, &weights, &p, &mut model, &mut grad);
    if !cost.is_finite() {
        return Err(FitError::NonFinite);
    }
    let mut history = vec![cost];
    let mut lambda = LAMBDA_INIT;
    let mut converged = false;
    let mut iterations = 0;

    let mut jtj = vec![0.0; np * np];
    let mut jtr = vec![0.0; np];
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        jtj.iter_mut().for_each(|v| *v = 0.0);
        jtr.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let f = model(x[i], &p, &mut grad);
            let r = y[i] - f;
            let w = weights[i];
            for j in 0..np {
                let wg = w * grad[j];
                jtr[j] += wg * r;
                for k in j..np {
                    jtj[j * np + k] += wg * grad[k];
                }
            }
        }
        for j in 0..np {
            for k in 0..j {
                jtj[j * np + k] = jtj[k * np + j];
            }
        }

        let mut accepted = false;
        while lambda <= LAMBDA_MAX {
            let mut aug = jtj.clone();
            for j in 0..np {
                // Marquardt scaling keeps the step sane for badly scaled
                // parameters; the absolute floor guards all-zero columns.
                aug[j * np + j] += lambda * jtj[j * np + j].max(1e-30);
            }
            if let Some(step) = solve_linear(aug, jtr.clone(), np) {
                let trial: Vec<f64> = p.iter().zip(&step).map(|(a, b)| a + b).collect();
                let trial_cost = weighted_cost(x, y, &weights, &trial, &mut model, &mut grad);
                if trial_cost.is_finite() && trial_cost <= cost {
                    let rel = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
                    p = trial;
                    cost = trial_cost;
                    history.push(cost);
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if rel < RELATIVE_COST_TOL {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no damping level improves the cost: stationary point
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    // covariance from the normal matrix at the solution
    jtj.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        model(x[i], &p, &mut grad);
        let w = weights[i];
        for j in 0..np {
            for k in j..np {
                jtj[j * np + k] += w * grad[j] * grad[k];
            }
        }
    }
    for j in 0..np {
        for k in 0..j {
            jtj[j * np + k] = jtj[k * np + j];
        }
    }
    let covariance = invert(jtj, np).unwrap_or_else(|| vec![f64::NAN; np * np]);

    let dof = n.saturating_sub(np).max(1);
    Ok(FitReport {
        chi2: cost,
        reduced_chi2: cost / dof as f64,
        params: p,
        covariance,
        iterations,
        converged,
        cost_history: history,
    })
}

// ------------------------------------------------------------ dip scanning

/// Local minimum of a sampled curve with its topographic prominence
/// (depth of the shallower saddle separating it from a lower minimum).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipCandidate {
    pub index: usize,
    pub x: f64,
    /// Smoothed y at the minimum.
    pub y: f64,
    pub prominence: f64,
    /// Full width at half prominence, in x units.
    pub width: f64,
}

fn smooth3(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            y[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Scan for dips in `y` over ascending `x`. Light 3-point smoothing first,
/// then strict local minima with true prominence. Sorted deepest first.
pub fn find_dips(x: &[f64], y: &[f64]) -> Vec<DipCandidate> {
    let n = y.len();
    if n < 3 || x.len() != n {
        return Vec::new();
    }
    let s = smooth3(y);
    let mut out = Vec::new();
    for i in 1..n - 1 {
        if !(s[i] < s[i - 1] && s[i] < s[i + 1]) {
            continue;
        }
        let mut left_col = f64::NEG_INFINITY;
        for j in (0..i).rev() {
            if s[j] < s[i] {
                break;
            }
            left_col = left_col.max(s[j]);
        }
        let mut right_col = f64::NEG_INFINITY;
        for j in i + 1..n {
            if s[j] < s[i] {
                break;
            }
            right_col = right_col.max(s[j]);
        }
        let prominence = left_col.min(right_col) - s[i];
        let half = s[i] + prominence / 2.0;
        let mut xl = x[0];
        for j in (0..i).rev() {
            if s[j] >= half {
                // linear interpolation to the half-prominence crossing
                let f = (half - s[j + 1]) / (s[j] - s[j + 1]);
                xl = x[j + 1] + f * (x[j] - x[j + 1]);
                break;
            }
        }
        let mut xr = x[n - 1];
        for j in i + 1..n {
            if s[j] >= half {
                let f = (half - s[j - 1]) / (s[j] - s[j - 1]);
                xr = x[j - 1] + f * (x[j] - x[j - 1]);
                break;
            }
        }
        out.push(DipCandidate { index: i, x: x[i], y: s[i], prominence, width: xr - xl });
    }
    out.sort_by(|a, b| b.prominence.total_cmp(&a.prominence));
    out
}

// ------------------------------------------------------- Lorentzian model

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorentzianLine {
    pub center: f64,
    pub fwhm: f64,
    pub depth: f64,
    pub center_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct MultiLorentzianFit {
    pub baseline: f64,
    /// Sorted by center, ascending.
    pub lines: Vec<LorentzianLine>,
    pub report: FitReport,
}

/// model(x) = baseline - sum_j depth_j * (G_j/2)^2 / ((x - c_j)^2 + (G_j/2)^2)
/// with params laid out [baseline, c_0, G_0, d_0, c_1, ...].
fn multi_lorentzian_model(x: f64, p: &[f64], grad: &mut [f64]) -> f64 {
    let mut y = p[0];
    grad[0] = 1.0;
    let n_lines = (p.len() - 1) / 3;
    for j in 0..n_lines {
        let c = p[1 + 3 * j];
        let h = p[2 + 3 * j] / 2.0;
        let a = p[3 + 3 * j];
        let u = x - c;
        let d = (u * u + h * h).max(1e-300);
        let l = h * h / d;
        y -= a * l;
        grad[1 + 3 * j] = -2.0 * a * u * h * h / (d * d);
        grad[2 + 3 * j] = -a * h * u * u / (d * d);
        grad[3 + 3 * j] = -l;
    }
    y
}

/// Fit `n_lines` Lorentzian dips plus a flat baseline. Initial centers come
/// from the prominence scan; candidates below 0.2x the deepest prominence are
/// ignored unless needed to reach `n_lines`.
pub fn fit_lorentzian_multi(
    x: &[f64],
    y: &[f64],
    sigma: &[f64],
    n_lines: usize,
) -> Result<MultiLorentzianFit, FitError> {
    let np = 1 + 3 * n_lines;
    check_inputs(x, y, sigma, np.max(3))?;
    if n_lines == 0 {
        return Err(FitError::TooFewDips { found: 0, requested: 0 });
    }

    let mut sorted = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let baseline0 = sorted[(sorted.len() - 1) * 95 / 100];

    let cands = find_dips(x, y);
    if cands.is_empty() {
        return Err(FitError::TooFewDips { found: 0, requested: n_lines });
    }
    let max_prom = cands[0].prominence;
    let strong: Vec<&DipCandidate> =
        cands.iter().filter(|c| c.prominence >= 0.2 * max_prom).collect();
    let mut picked: Vec<&DipCandidate> = strong.into_iter().take(n_lines).collect();
    if picked.len() < n_lines {
        for c in &cands {
            if picked.len() == n_lines {
                break;
            }
            if !picked.iter().any(|p| p.index == c.index) {
                picked.push(c);
            }
        }
    }
    if picked.len() < n_lines {
        return Err(FitError::TooFewDips { found: picked.len(), requested: n_lines });
    }
    picked.sort_by(|a, b| a.x.total_cmp(&b.x));

    let dx = (x[x.len() - 1] - x[0]).abs() / (x.len() - 1) as f64;
    let mut p0 = Vec::with_capacity(np);
    p0.push(baseline0);
    for c in &picked {
        p0.push(c.x);
        p0.push(c.width.abs().max(2.0 * dx));
        p0.push((baseline0 - c.y).max(c.prominence));
    }
    fit_lorentzian_with_init(x, y, sigma, &p0)
}

/// Same model with caller-chosen starting parameters, laid out
/// [baseline, c_0, G_0, d_0, c_1, ...]. Useful when the scan-based
/// initialization cannot resolve structure the caller knows (for example
/// interleaved hyperfine triplets).
pub fn fit_lorentzian_with_init(
    x: &[f64],
    y: &[f64],
    sigma: &[f64],
    p0: &[f64],
) -> Result<MultiLorentzianFit, FitError> {
    if p0.len() < 4 || !(p0.len() - 1).is_multiple_of(3) {
        return Err(FitError::LengthMismatch);
    }
    let n_lines = (p0.len() - 1) / 3;
    let report = levenberg_marquardt(x, y, sigma, p0, multi_lorentzian_model)?;
    let p = &report.params;
    let mut lines: Vec<LorentzianLine> = (0..n_lines)
        .map(|j| LorentzianLine {
            center: p[1 + 3 * j],
            fwhm: p[2 + 3 * j].abs(),
            depth: p[3 + 3 * j],
            center_sigma: report.param_sigma(1 + 3 * j),
        })
        .collect();
    lines.sort_by(|a, b| a.center.total_cmp(&b.center));
    Ok(MultiLorentzianFit { baseline: p[0], lines, report })
}

// ---------------------------------------------------- oscillation models

/// Coarse spectral scan for the dominant frequency of `y - mean(y)` over
/// ascending `t`. Uniform grids get a DFT-style bin scan; irregular grids a
/// 4x-oversampled direct scan. Parabolic refinement on the peak bin.
pub fn dominant_frequency(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len();
    if n < 4 {
        return 0.0;
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let span = t[n - 1] - t[0];
    let mut min_dt = f64::INFINITY;
    for w in t.windows(2) {
        min_dt = min_dt.min(w[1] - w[0]);
    }
    if !(span > 0.0 && min_dt > 0.0) {
        return 0.0;
    }
    let f_lo = 0.5 / span;
    let f_hi = 0.5 / min_dt;
    let bins = (2 * n).min(4096);
    let df = (f_hi - f_lo) / bins as f64;
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut power = vec![0.0; bins];
    for (k, pw) in power.iter_mut().enumerate() {
        let w = std::f64::consts::TAU * (f_lo + k as f64 * df);
        let (mut re, mut im) = (0.0, 0.0);
        for i in 0..n {
            let (s, c) = (w * t[i]).sin_cos();
            let dy = y[i] - mean;
            re += dy * c;
            im += dy * s;
        }
        *pw = re * re + im * im;
        if *pw > best.1 {
            best = (k, *pw);
        }
    }
    let k = best.0;
    let mut f = f_lo + k as f64 * df;
    if k > 0 && k + 1 < bins {
        let (a, b, c) = (power[k - 1], power[k], power[k + 1]);
        let denom = a - 2.0 * b + c;
        if denom < 0.0 {
            f += df * 0.5 * (a - c) / denom;
        }
    }
    f
}

#[derive(Debug, Clone)]
pub struct DampedCosineFit {
    /// model(t) = offset - amplitude * cos(2*pi*frequency*t) * exp(-decay_rate*t)
    pub offset: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub decay_rate: f64,
    pub report: FitReport,
}

fn damped_cosine_model(t: f64, p: &[f64], grad: &mut [f64]) -> f64 {
    let (a, b, f, g) = (p[0], p[1], p[2], p[3]);
    let w = std::f64::consts::TAU * f;
    let e = (-g * t).exp();
    let (s, c) = (w * t).sin_cos();
    grad[0] = 1.0;
    grad[1] = -c * e;
    grad[2] = std::f64::consts::TAU * t * b * s * e;
    grad[3] = t * b * c * e;
    a - b * c * e
}

/// Fit y(t) = a - b*cos(2*pi*f*t)*exp(-g*t). The cosine is phase-locked to
/// t = 0, matching pulse sequences that start every shot in the same state.
pub fn fit_damped_cosine(t: &[f64], y: &[f64], sigma: &[f64]) -> Result<DampedCosineFit, FitError> {
    check_inputs(t, y, sigma, 8)?;
    let n = t.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let f0 = dominant_frequency(t, y);
    let span = t[n - 1] - t[0];

    // matched-filter amplitude against +cos fixes the sign of b
    let w0 = std::f64::consts::TAU * f0;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let c = (w0 * t[i]).cos();
        num += (y[i] - mean) * c;
        den += c * c;
    }
    let q = if den > 0.0 { num / den } else { 0.0 };
    let b0 = if q != 0.0 {
        -q
    } else {
        let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
        (hi - lo) / 2.0
    };
    let g0 = if span > 0.0 { 1.0 / (2.0 * span) } else { 0.0 };

    let report = levenberg_marquardt(t, y, sigma, &[mean, b0, f0, g0], damped_cosine_model)?;
    let p = &report.params;
    Ok(DampedCosineFit {
        offset: p[0],
        amplitude: p[1],
        frequency: p[2].abs(),
        decay_rate: p[3],
        report,
    })
}

#[derive(Debug, Clone)]
pub struct SinusoidFit {
    /// model(t) = offset + amplitude * cos(2*pi*frequency*t + phase)
    pub offset: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub report: FitReport,
}

fn sinusoid_model(t: f64, p: &[f64], grad: &mut [f64]) -> f64 {
    let (bc, bs, f) = (p[1], p[2], p[3]);
    let w = std::f64::consts::TAU * f;
    let (s, c) = (w * t).sin_cos();
    grad[0] = 1.0;
    grad[1] = c;
    grad[2] = s;
    grad[3] = std::f64::consts::TAU * t * (-bc * s + bs * c);
    p[0] + bc * c + bs * s
}

/// Free-phase sine fit: y(t) = a + bc*cos(2*pi*f*t) + bs*sin(2*pi*f*t),
/// reported as amplitude/phase with y = a + A*cos(2*pi*f*t + phi).
pub fn fit_sinusoid(t: &[f64], y: &[f64], sigma: &[f64]) -> Result<SinusoidFit, FitError> {
    check_inputs(t, y, sigma, 8)?;
    let n = t.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let f0 = dominant_frequency(t, y);

    // linear quadrature regression at f0 seeds bc/bs
    let w0 = std::f64::consts::TAU * f0;
    let (mut cc, mut ss, mut cs, mut yc, mut ys) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let (s, c) = (w0 * t[i]).sin_cos();
        cc += c * c;
        ss += s * s;
        cs += c * s;
        yc += (y[i] - mean) * c;
        ys += (y[i] - mean) * s;
    }
    let det = cc * ss - cs * cs;
    let (bc0, bs0) = if det.abs() > 1e-30 {
        ((yc * ss - ys * cs) / det, (ys * cc - yc * cs) / det)
    } else {
        (0.0, 0.0)
    };

    let report = levenberg_marquardt(t, y, sigma, &[mean, bc0, bs0, f0], sinusoid_model)?;
    let p = &report.params;
    let mut frequency = p[3];
    let bc = p[1];
    let mut bs = p[2];
    if frequency < 0.0 {
        frequency = -frequency;
        bs = -bs;
    }
    Ok(SinusoidFit {
        offset: p[0],
        amplitude: bc.hypot(bs),
        frequency,
        phase: (-bs).atan2(bc),
        report,
    })
}

// ----------------------------------------------------- photon statistics

/// Poisson shot-noise sigma for a raw count.
pub fn poisson_sigma(count: f64) -> f64 {
    count.max(0.0).sqrt()
}

/// Ratio r = n_sig / n_ref with propagated shot noise. Equivalent to
/// r*sqrt(1/n_sig + 1/n_ref) when n_sig > 0, but well defined at n_sig = 0.
pub fn ratio_with_sigma(n_sig: f64, n_ref: f64) -> Result<(f64, f64), FitError> {
    if n_ref <= 0.0 {
        return Err(FitError::ZeroReference);
    }
    let r = n_sig / n_ref;
    let var = n_sig / (n_ref * n_ref) + (n_sig * n_sig) / (n_ref * n_ref * n_ref);
    Ok((r, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lorentzian_curve(x: &[f64], baseline: f64, lines: &[(f64, f64, f64)]) -> Vec<f64> {
        x.iter()
            .map(|&f| {
                let mut y = baseline;
                for &(c, fw, d) in lines {
                    let h = fw / 2.0;
                    y -= d * h * h / ((f - c).powi(2) + h * h);
                }
                y
            })
            .collect()
    }

    #[test]
    fn solves_known_linear_system() {
        // A = [[2,1,0],[1,3,1],[0,1,4]], x = [1,-2,3] -> b = [0,-2,10]
        let a = vec![2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0];
        let x = solve_linear(a.clone(), vec![0.0, -2.0, 10.0], 3).unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], -2.0, epsilon = 1e-12);
        assert_relative_eq!(x[2], 3.0, epsilon = 1e-12);
        let inv = invert(a.clone(), 3).unwrap();
        // A * inv(A) = I
        for r in 0..3 {
            for c in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[r * 3 + k] * inv[k * 3 + c];
                }
                assert_abs_diff_eq!(s, if r == c { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
        assert!(invert(vec![1.0, 2.0, 2.0, 4.0], 2).is_none());
    }

    #[test]
    fn single_exact_lorentzian_recovered_to_machine_precision() {
        let x: Vec<f64> = (0..200).map(|i| 2860.0 + 0.1 * i as f64).collect();
        let y = lorentzian_curve(&x, 1.0, &[(2870.3, 0.8, 0.25)]);
        let sigma = vec![1.0; x.len()];
        let fit = fit_lorentzian_multi(&x, &y, &sigma, 1).unwrap();
        assert!(fit.report.converged);
        assert_relative_eq!(fit.baseline, 1.0, max_relative = 1e-10);
        assert_relative_eq!(fit.lines[0].center, 2870.3, max_relative = 1e-10);
        assert_relative_eq!(fit.lines[0].fwhm, 0.8, max_relative = 1e-9);
        assert_relative_eq!(fit.lines[0].depth, 0.25, max_relative = 1e-9);
    }

    #[test]
    fn cost_history_is_monotone_on_noisy_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..300).map(|i| i as f64 * 0.5).collect();
        let clean = lorentzian_curve(&x, 1.0, &[(60.0, 6.0, 0.3), (100.0, 5.0, 0.2)]);
        let y: Vec<f64> =
            clean.iter().map(|v| v + 0.01 * (rng.random::<f64>() - 0.5)).collect();
        let sigma = vec![0.003; x.len()];
        let fit = fit_lorentzian_multi(&x, &y, &sigma, 2).unwrap();
        for w in fit.report.cost_history.windows(2) {
            assert!(w[1] <= w[0], "cost increased: {} -> {}", w[0], w[1]);
        }
        assert!(fit.report.converged);
    }

    #[test]
    fn underfitting_two_lines_with_one_shows_large_chi2() {
        let x: Vec<f64> = (0..400).map(|i| i as f64 * 0.25).collect();
        let y = lorentzian_curve(&x, 1.0, &[(30.0, 3.0, 0.3), (70.0, 3.0, 0.3)]);
        let sigma = vec![1e-3; x.len()];
        let fit = fit_lorentzian_multi(&x, &y, &sigma, 1).unwrap();
        assert!(
            fit.report.reduced_chi2 > 100.0,
            "reduced chi2 {} should flag the missing line",
            fit.report.reduced_chi2
        );
        let good = fit_lorentzian_multi(&x, &y, &sigma, 2).unwrap();
        assert!(good.report.reduced_chi2 < 1e-6);
    }

    #[test]
    fn prominence_scan_finds_both_close_dips() {
        let x: Vec<f64> = (0..1000).map(|i| 2790.0 + 0.16 * i as f64).collect();
        let y = lorentzian_curve(
            &x,
            1.0,
            &[(2869.458, 0.5, 0.008), (2870.542, 0.5, 0.008), (2900.0, 0.5, 0.016)],
        );
        let dips = find_dips(&x, &y);
        assert!(dips.len() >= 3);
        let mut centers: Vec<f64> = dips[..3].iter().map(|d| d.x).collect();
        centers.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(centers[0], 2869.458, epsilon = 0.2);
        assert_abs_diff_eq!(centers[1], 2870.542, epsilon = 0.2);
        assert_abs_diff_eq!(centers[2], 2900.0, epsilon = 0.2);
    }

    #[test]
    fn damped_cosine_noiseless_recovery() {
        let t: Vec<f64> = (0..81).map(|i| i as f64 * 50.0).collect();
        let (f, tau, c) = (5e-3, 3000.0, 0.2);
        let y: Vec<f64> = t
            .iter()
            .map(|&tt| {
                1.0 - (c / 2.0)
                    * (1.0 - (std::f64::consts::TAU * f * tt).cos() * (-tt / tau).exp())
            })
            .collect();
        let sigma = vec![1.0; t.len()];
        let fit = fit_damped_cosine(&t, &y, &sigma).unwrap();
        assert_relative_eq!(fit.frequency, f, max_relative = 1e-3);
        assert_relative_eq!(fit.decay_rate, 1.0 / tau, max_relative = 1e-3);
        assert_relative_eq!(fit.offset, 1.0 - c / 2.0, max_relative = 1e-3);
        assert_relative_eq!(fit.amplitude, -c / 2.0, max_relative = 1e-3);
    }

    #[test]
    fn undamped_cosine_fits_zero_decay() {
        let t: Vec<f64> = (0..81).map(|i| i as f64 * 50.0).collect();
        let y: Vec<f64> =
            t.iter().map(|&tt| 0.9 + 0.1 * (std::f64::consts::TAU * 5e-3 * tt).cos()).collect();
        let sigma = vec![1.0; t.len()];
        let fit = fit_damped_cosine(&t, &y, &sigma).unwrap();
        assert!(fit.decay_rate.abs() < 1e-7, "decay {} should be ~0", fit.decay_rate);
        assert_relative_eq!(fit.frequency, 5e-3, max_relative = 1e-6);
    }

    #[test]
    fn sinusoid_fit_recovers_phase_and_frequency() {
        let t: Vec<f64> = (0..1000).map(|i| i as f64 * 1e-4).collect();
        let y: Vec<f64> = t
            .iter()
            .map(|&tt| 2.0 + 0.5 * (std::f64::consts::TAU * 20.0 * tt + 0.7).cos())
            .collect();
        let sigma = vec![1.0; t.len()];
        let fit = fit_sinusoid(&t, &y, &sigma).unwrap();
        assert_relative_eq!(fit.frequency, 20.0, max_relative = 1e-6);
        assert_relative_eq!(fit.amplitude, 0.5, max_relative = 1e-6);
        assert_abs_diff_eq!(fit.phase, 0.7, epsilon = 1e-5);
        assert_relative_eq!(fit.offset, 2.0, max_relative = 1e-6);
    }

    #[test]
    fn photon_error_examples() {
        assert_eq!(poisson_sigma(10_000.0), 100.0);
        assert_eq!(poisson_sigma(0.0), 0.0);
        let (r, s) = ratio_with_sigma(1e4, 1e4).unwrap();
        assert_relative_eq!(r, 1.0);
        assert_relative_eq!(s, 0.014142, max_relative = 1e-4);
        assert_eq!(ratio_with_sigma(5.0, 0.0), Err(FitError::ZeroReference));
        let (r0, s0) = ratio_with_sigma(0.0, 100.0).unwrap();
        assert_eq!(r0, 0.0);
        assert_eq!(s0, 0.0);
    }

    #[test]
    fn input_validation() {
        let err = fit_lorentzian_multi(&[1.0, 2.0], &[1.0, 2.0], &[1.0; 4], 1).unwrap_err();
        assert_eq!(err, FitError::LengthMismatch);
        let err = fit_damped_cosine(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 1.0]).unwrap_err();
        assert_eq!(err, FitError::TooFewPoints { need: 8, got: 2 });
        let err =
            fit_sinusoid(&[0.0, f64::NAN, 2.0], &[0.0; 3], &[1.0; 3]).unwrap_err();
        assert_eq!(err, FitError::TooFewPoints { need: 8, got: 3 });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_single_lorentzian_recovered(
            center in 20.0f64..80.0,
            fwhm in 1.0f64..8.0,
            depth in 0.05f64..0.5,
            baseline in 0.5f64..2.0,
        ) {
            let x: Vec<f64> = (0..300).map(|i| i as f64 / 3.0).collect();
            let y = lorentzian_curve(&x, baseline, &[(center, fwhm, depth)]);
            let sigma = vec![1.0; x.len()];
            let fit = fit_lorentzian_multi(&x, &y, &sigma, 1).unwrap();
            prop_assert!((fit.lines[0].center - center).abs() < 1e-6 * center);
            prop_assert!((fit.lines[0].fwhm - fwhm).abs() < 1e-5 * fwhm);
        }
    }
}
