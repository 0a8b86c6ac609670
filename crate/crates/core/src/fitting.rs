//! Weighted nonlinear least squares and the model fits built on it.
//!
//! The solver is a damped Gauss–Newton iteration with Marquardt scaling and
//! a forward-difference Jacobian. Three models are provided on top of it:
//! the resonance dip of a transmission scan, the two-sided exponential
//! coincidence peak, and the interference fringe.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::correlation::{estimate_peak, Histogram};
use crate::error::{invalid_input, Result};
use crate::resonator::ScanTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
}

impl DataPoint {
    pub fn new(x: f64, y: f64, sigma: f64) -> Self {
        DataPoint { x, y, sigma }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StderrScaling {
    /// Covariance scaled by χ²/(n − k); insensitive to the absolute σ.
    ReducedChiSquare,
    /// Covariance taken as is; assumes the σ are exact.
    Unscaled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Relative parameter step at which the iteration stops.
    pub tolerance: f64,
    pub initial_lambda: f64,
    /// Relative forward-difference step.
    pub jacobian_step: f64,
    pub stderr_scaling: StderrScaling,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 200,
            tolerance: 1e-8,
            initial_lambda: 1e-3,
            jacobian_step: 1e-6,
            stderr_scaling: StderrScaling::ReducedChiSquare,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: BTreeMap<String, f64>,
    /// Standard errors for both fitted and derived quantities.
    pub stderr: BTreeMap<String, f64>,
    /// Quantities computed from the fitted parameters.
    pub derived: BTreeMap<String, f64>,
    /// √χ² of the weighted residuals.
    pub residual_norm: f64,
    pub reduced_chi_square: f64,
    pub iterations: usize,
    pub converged: bool,
    pub message: Option<String>,
}

impl FitResult {
    pub fn param(&self, name: &str) -> f64 {
        self.params
            .get(name)
            .or_else(|| self.derived.get(name))
            .copied()
            .unwrap_or(f64::NAN)
    }

    pub fn error(&self, name: &str) -> f64 {
        self.stderr.get(name).copied().unwrap_or(f64::NAN)
    }

    fn failed(names: &[&str], message: impl Into<String>) -> FitResult {
        FitResult {
            params: names.iter().map(|n| (n.to_string(), f64::NAN)).collect(),
            stderr: names.iter().map(|n| (n.to_string(), f64::NAN)).collect(),
            derived: BTreeMap::new(),
            residual_norm: f64::NAN,
            reduced_chi_square: f64::NAN,
            iterations: 0,
            converged: false,
            message: Some(message.into()),
        }
    }

    fn set(&mut self, name: &str, value: f64, stderr: f64) {
        self.params.insert(name.to_string(), value);
        self.stderr.insert(name.to_string(), stderr);
    }

    fn set_derived(&mut self, name: &str, value: f64, stderr: f64) {
        self.derived.insert(name.to_string(), value);
        self.stderr.insert(name.to_string(), stderr);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit result serialises")
    }
}

fn chi_square<F: Fn(f64, &[f64]) -> f64>(model: &F, data: &[DataPoint], p: &[f64]) -> f64 {
    data.iter().map(|d| ((d.y - model(d.x, p)) / d.sigma).powi(2)).sum()
}

/// Parameters are assumed to be expressed in units where 1 is a small
/// change; steps and convergence are measured against `max(|p|, 1)`.
fn scale(value: f64) -> f64 {
    value.abs().max(1.0)
}

fn step_size(value: f64, relative: f64) -> f64 {
    relative * scale(value)
}

/// Forward-difference Jacobian of the model, rows = data points.
pub fn forward_jacobian<F: Fn(f64, &[f64]) -> f64>(model: &F, xs: &[f64], p: &[f64], relative_step: f64) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(xs.len(), p.len());
    let base: Vec<f64> = xs.iter().map(|&x| model(x, p)).collect();
    let mut shifted = p.to_vec();
    for j in 0..p.len() {
        let h = step_size(p[j], relative_step);
        shifted[j] = p[j] + h;
        let h = shifted[j] - p[j];
        for (i, &x) in xs.iter().enumerate() {
            jac[(i, j)] = (model(x, &shifted) - base[i]) / h;
        }
        shifted[j] = p[j];
    }
    jac
}

pub fn central_jacobian<F: Fn(f64, &[f64]) -> f64>(model: &F, xs: &[f64], p: &[f64], relative_step: f64) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(xs.len(), p.len());
    let mut up = p.to_vec();
    let mut down = p.to_vec();
    for j in 0..p.len() {
        let h = step_size(p[j], relative_step);
        up[j] = p[j] + h;
        down[j] = p[j] - h;
        for (i, &x) in xs.iter().enumerate() {
            jac[(i, j)] = (model(x, &up) - model(x, &down)) / (up[j] - down[j]);
        }
        up[j] = p[j];
        down[j] = p[j];
    }
    jac
}

/// Analytic Jacobian: writes ∂f/∂p_j at `x` into the output slice.
pub type JacobianFn<'a> = &'a dyn Fn(f64, &[f64], &mut [f64]);

struct NormalEquations {
    matrix: DMatrix<f64>,
    gradient: DVector<f64>,
}

fn normal_equations<F: Fn(f64, &[f64]) -> f64>(
    model: &F,
    analytic: Option<JacobianFn>,
    data: &[DataPoint],
    p: &[f64],
    opts: &SolverOptions,
) -> NormalEquations {
    let xs: Vec<f64> = data.iter().map(|d| d.x).collect();
    let mut jac = match analytic {
        Some(jf) => {
            let mut jac = DMatrix::zeros(xs.len(), p.len());
            let mut row = vec![0.0; p.len()];
            for (i, &x) in xs.iter().enumerate() {
                jf(x, p, &mut row);
                for (j, v) in row.iter().enumerate() {
                    jac[(i, j)] = *v;
                }
            }
            jac
        }
        None => forward_jacobian(model, &xs, p, opts.jacobian_step),
    };
    let mut resid = DVector::zeros(data.len());
    for (i, d) in data.iter().enumerate() {
        resid[i] = (d.y - model(d.x, p)) / d.sigma;
        for j in 0..p.len() {
            jac[(i, j)] /= d.sigma;
        }
    }
    NormalEquations {
        matrix: jac.transpose() * &jac,
        gradient: jac.transpose() * resid,
    }
}

/// Outcome of the raw solver, parameters in input order.
#[derive(Debug, Clone)]
pub struct Solution {
    pub params: Vec<f64>,
    pub stderr: Vec<f64>,
    pub covariance: Option<DMatrix<f64>>,
    pub chi_square: f64,
    pub dof: usize,
    pub iterations: usize,
    pub converged: bool,
    pub message: Option<String>,
}

/// Minimises Σ((y − f(x; p)) / σ)² starting from `init`, with a
/// forward-difference Jacobian.
pub fn solve<F>(model: F, data: &[DataPoint], init: &[f64], opts: &SolverOptions) -> Result<Solution>
where
    F: Fn(f64, &[f64]) -> f64,
{
    solve_impl(&model, None, data, init, opts)
}

/// As [`solve`] with an analytic Jacobian. Forward differences limit the
/// attainable precision to roughly ε/step ≈ 1e-10 relative; this does not.
pub fn solve_with_jacobian<F>(
    model: F,
    jacobian: JacobianFn,
    data: &[DataPoint],
    init: &[f64],
    opts: &SolverOptions,
) -> Result<Solution>
where
    F: Fn(f64, &[f64]) -> f64,
{
    solve_impl(&model, Some(jacobian), data, init, opts)
}

fn solve_impl<F>(model: &F, analytic: Option<JacobianFn>, data: &[DataPoint], init: &[f64], opts: &SolverOptions) -> Result<Solution>
where
    F: Fn(f64, &[f64]) -> f64,
{
    let k = init.len();
    if k == 0 {
        return Err(invalid_input("no parameters to fit"));
    }
    if data.len() < 2 * k {
        return Err(invalid_input(format!("{} data points cannot constrain {k} parameters", data.len())));
    }
    if data.iter().any(|d| !d.x.is_finite() || !d.y.is_finite()) {
        return Err(invalid_input("data contains NaN or infinite values"));
    }
    if data.iter().any(|d| !(d.sigma.is_finite() && d.sigma > 0.0)) {
        return Err(invalid_input("sigma must be positive and finite"));
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(invalid_input("initial parameters must be finite"));
    }

    let mut p = init.to_vec();
    let mut chi2 = chi_square(model, data, &p);
    let mut lambda = opts.initial_lambda;
    let mut converged = false;
    let mut message = None;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iterations {
        iterations += 1;
        let ne = normal_equations(model, analytic, data, &p, opts);
        let max_diag = ne.matrix.diagonal().max();
        if !(max_diag > 0.0) || !max_diag.is_finite() {
            message = Some("singular normal matrix".to_string());
            break;
        }
        loop {
            let mut damped = ne.matrix.clone();
            for j in 0..k {
                damped[(j, j)] += lambda * ne.matrix[(j, j)].max(1e-12 * max_diag);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                if lambda > 1e16 {
                    message = Some("singular normal matrix".to_string());
                    break 'outer;
                }
                continue;
            };
            let delta = chol.solve(&ne.gradient);
            let relative = (0..k)
                .map(|j| delta[j].abs() / scale(p[j]))
                .fold(0.0, f64::max);
            let trial: Vec<f64> = (0..k).map(|j| p[j] + delta[j]).collect();
            let trial_chi2 = chi_square(model, data, &trial);
            if trial_chi2.is_finite() && trial_chi2 <= chi2 {
                p = trial;
                chi2 = trial_chi2;
                lambda = (lambda / 10.0).max(1e-12);
                if relative < opts.tolerance {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            if relative < opts.tolerance {
                // no downhill step left at this resolution
                converged = true;
                break 'outer;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                message = Some("step rejected at maximal damping".to_string());
                break 'outer;
            }
        }
    }
    if converged {
        // one undamped Gauss–Newton step removes the residual damping bias
        let ne = normal_equations(model, analytic, data, &p, opts);
        if let Some(chol) = ne.matrix.clone().cholesky() {
            let delta = chol.solve(&ne.gradient);
            let trial: Vec<f64> = (0..k).map(|j| p[j] + delta[j]).collect();
            let trial_chi2 = chi_square(model, data, &trial);
            // at the minimum χ² is flat to rounding, so a change below its
            // summation noise says nothing about which point is better
            let noise = 1e-12 * chi2.max(f64::MIN_POSITIVE);
            if trial_chi2.is_finite() && trial_chi2 <= chi2 + noise {
                p = trial;
                chi2 = trial_chi2;
            }
        }
    } else if message.is_none() {
        message = Some(format!("no convergence after {iterations} iterations"));
    }

    let dof = data.len() - k;
    let ne = normal_equations(model, analytic, data, &p, opts);
    let covariance = ne.matrix.clone().cholesky().map(|c| c.inverse());
    let scale = match opts.stderr_scaling {
        StderrScaling::ReducedChiSquare => chi2 / dof as f64,
        StderrScaling::Unscaled => 1.0,
    };
    let stderr = match &covariance {
        Some(cov) => (0..k).map(|j| (cov[(j, j)] * scale).max(0.0).sqrt()).collect(),
        None => {
            converged = false;
            message = Some("singular normal matrix".to_string());
            vec![f64::NAN; k]
        }
    };
    Ok(Solution { params: p, stderr, covariance, chi_square: chi2, dof, iterations, converged, message })
}

/// Generic named-parameter fit.
pub fn least_squares<F>(model: F, data: &[DataPoint], names: &[&str], init: &[f64], opts: &SolverOptions) -> Result<FitResult>
where
    F: Fn(f64, &[f64]) -> f64,
{
    if names.len() != init.len() {
        return Err(invalid_input("one name per parameter required"));
    }
    let sol = solve(model, data, init, opts)?;
    Ok(from_solution(names, &sol))
}

pub fn least_squares_with_jacobian<F>(
    model: F,
    jacobian: JacobianFn,
    data: &[DataPoint],
    names: &[&str],
    init: &[f64],
    opts: &SolverOptions,
) -> Result<FitResult>
where
    F: Fn(f64, &[f64]) -> f64,
{
    if names.len() != init.len() {
        return Err(invalid_input("one name per parameter required"));
    }
    let sol = solve_with_jacobian(model, jacobian, data, init, opts)?;
    Ok(from_solution(names, &sol))
}

/// y = slope·x + intercept.
pub fn line(x: f64, p: &[f64]) -> f64 {
    p[0] * x + p[1]
}

pub fn line_jacobian(x: f64, _p: &[f64], out: &mut [f64]) {
    out[0] = x;
    out[1] = 1.0;
}

/// Weighted straight-line fit with the analytic Jacobian.
pub fn fit_line(data: &[DataPoint], opts: &SolverOptions) -> Result<FitResult> {
    least_squares_with_jacobian(line, &line_jacobian, data, &["slope", "intercept"], &[0.0, 0.0], opts)
}

fn from_solution(names: &[&str], sol: &Solution) -> FitResult {
    FitResult {
        params: names.iter().map(|n| n.to_string()).zip(sol.params.iter().copied()).collect(),
        stderr: names.iter().map(|n| n.to_string()).zip(sol.stderr.iter().copied()).collect(),
        derived: BTreeMap::new(),
        residual_norm: sol.chi_square.sqrt(),
        reduced_chi_square: sol.chi_square / sol.dof as f64,
        iterations: sol.iterations,
        converged: sol.converged,
        message: sol.message.clone(),
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Robust white-noise level from first differences.
fn difference_noise(values: &[f64]) -> f64 {
    let diffs: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    median(&diffs) / (0.6745 * std::f64::consts::SQRT_2)
}

pub fn lorentzian_dip(x: f64, p: &[f64]) -> f64 {
    let (center, fwhm, depth, baseline) = (p[0], p[1], p[2], p[3]);
    let hw2 = 0.25 * fwhm * fwhm;
    baseline - depth * hw2 / ((x - center).powi(2) + hw2)
}

/// Fits `baseline − depth·(Γ/2)² / ((ν − ν₀)² + (Γ/2)²)` to a scan.
///
/// Reports `center_thz`, `fwhm_mhz`, `depth`, `baseline` and the derived
/// loaded Q. The fit runs in detuning (MHz) from the scan midpoint.
pub fn fit_lorentzian(scan: &ScanTable) -> Result<FitResult> {
    const NAMES: [&str; 4] = ["center_thz", "fwhm_mhz", "depth", "baseline"];
    let n = scan.len();
    if n < 8 {
        return Err(invalid_input(format!("scan has only {n} points")));
    }
    let mid_thz = 0.5 * (scan.freq_thz[0] + scan.freq_thz[n - 1]);
    let xs: Vec<f64> = scan.freq_thz.iter().map(|f| (f - mid_thz) * 1e6).collect();
    let ys = &scan.transmission;

    let edge = (n / 10).max(2);
    let mut edges: Vec<f64> = ys[..edge].to_vec();
    edges.extend_from_slice(&ys[n - edge..]);
    let baseline = median(&edges);
    let (i_min, &y_min) = ys.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
    let depth = baseline - y_min;
    let noise = difference_noise(ys);
    if !(depth > 3.0 * noise) || depth <= 0.0 {
        return Ok(FitResult::failed(&NAMES, "no resonance dip above noise"));
    }
    let half = baseline - 0.5 * depth;
    let below: Vec<usize> = (0..n).filter(|&i| ys[i] < half).collect();
    let step = (xs[n - 1] - xs[0]) / (n - 1) as f64;
    let width = match (below.first(), below.last()) {
        (Some(&lo), Some(&hi)) => (xs[hi] - xs[lo]).max(step),
        _ => step,
    };
    if xs[n - 1] - xs[0] < 3.0 * width {
        return Err(invalid_input("scan must span at least three linewidths"));
    }

    let data: Vec<DataPoint> = xs.iter().zip(ys).map(|(&x, &y)| DataPoint::new(x, y, 1.0)).collect();
    let init = [xs[i_min], width, depth, baseline];
    let sol = solve(lorentzian_dip, &data, &init, &SolverOptions::default())?;
    let mut fit = from_solution(&["center_mhz", "fwhm_mhz", "depth", "baseline"], &sol);
    fit.params.clear();
    fit.stderr.clear();
    let center_thz = mid_thz + sol.params[0] * 1e-6;
    let fwhm = sol.params[1].abs();
    fit.set(NAMES[0], center_thz, sol.stderr[0] * 1e-6);
    fit.set(NAMES[1], fwhm, sol.stderr[1]);
    fit.set(NAMES[2], sol.params[2], sol.stderr[2]);
    fit.set(NAMES[3], sol.params[3], sol.stderr[3]);
    let q = center_thz * 1e6 / fwhm;
    fit.set_derived("q_loaded", q, q * sol.stderr[1] / fwhm);
    Ok(fit)
}

pub fn double_exponential(x: f64, p: &[f64]) -> f64 {
    let (tau, amplitude, background, center) = (p[0], p[1], p[2], p[3]);
    background + amplitude * (-(x - center).abs() / tau.abs()).exp()
}

/// Minimum peak significance (smoothed peak excess over its noise).
pub const MIN_PEAK_SNR: f64 = 5.0;

/// Fits `background + amplitude·exp(−|Δt − center|/τ)` to the normalised
/// histogram (delays in ns), and reports Δν = 1/(2πτ).
pub fn fit_double_exponential(h: &Histogram) -> Result<FitResult> {
    const NAMES: [&str; 4] = ["tau_ns", "amplitude", "background", "center_ns"];
    let g = h.normalize()?;
    let sigma = h.normalized_sigma()?;
    let xs: Vec<f64> = h.delays_ps().iter().map(|&d| d as f64 * 1e-3).collect();

    let background = median(&g);
    let (peak, width_ps) = estimate_peak(&g, h.bin_width_ps);
    let s = 3usize;
    let lo = peak.saturating_sub(s);
    let hi = (peak + s).min(g.len() - 1);
    let m = (hi - lo + 1) as f64;
    let smoothed = g[lo..=hi].iter().sum::<f64>() / m;
    let noise = (sigma[lo..=hi].iter().map(|s| s * s).sum::<f64>()).sqrt() / m;
    let amplitude = smoothed - background;
    let snr = amplitude / noise;
    if !(snr > MIN_PEAK_SNR) {
        return Ok(FitResult::failed(&NAMES, format!("peak SNR {snr:.2} below {MIN_PEAK_SNR}")));
    }

    let data: Vec<DataPoint> = xs
        .iter()
        .zip(&g)
        .zip(&sigma)
        .map(|((&x, &y), &s)| DataPoint::new(x, y, s))
        .collect();
    let init = [width_ps * 1e-3, g[peak] - background, background, xs[peak]];
    let sol = solve(double_exponential, &data, &init, &SolverOptions::default())?;
    let mut fit = from_solution(&NAMES, &sol);
    let tau = sol.params[0].abs();
    fit.set("tau_ns", tau, sol.stderr[0]);
    let bandwidth = 1e3 / (2.0 * PI * tau);
    fit.set_derived("bandwidth_mhz", bandwidth, bandwidth * sol.stderr[0] / tau);
    fit.derived.insert("peak_snr".to_string(), snr);
    if !(tau > 0.0 && tau.is_finite()) {
        fit.converged = false;
        fit.message = Some("non-positive correlation time".to_string());
    }
    Ok(fit)
}

/// One point of an interference fringe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringePoint {
    pub phase_rad: f64,
    pub counts: f64,
    pub sigma: f64,
}

/// `offset·(1 + sin²(u)·cos(φ + φ₀))`; sin²(u) keeps the visibility in [0,1].
pub fn fringe_model(phase: f64, p: &[f64]) -> f64 {
    let (offset, u, phase0) = (p[0], p[1], p[2]);
    offset * (1.0 + u.sin().powi(2) * (phase + phase0).cos())
}

fn max_circular_gap(phases: &[f64]) -> f64 {
    let mut wrapped: Vec<f64> = phases.iter().map(|p| p.rem_euclid(2.0 * PI)).collect();
    wrapped.sort_by(f64::total_cmp);
    let mut gap = wrapped[0] + 2.0 * PI - wrapped[wrapped.len() - 1];
    for w in wrapped.windows(2) {
        gap = gap.max(w[1] - w[0]);
    }
    gap
}

/// Fits `N(φ) = offset·(1 + V·cos(φ + φ₀))` and reports the visibility V,
/// together with the raw (max − min)/(max + min) of the data.
pub fn fit_sinusoid(points: &[FringePoint]) -> Result<FitResult> {
    if points.len() < 6 {
        return Err(invalid_input(format!("need at least 6 phase points, got {}", points.len())));
    }
    let phases: Vec<f64> = points.iter().map(|p| p.phase_rad).collect();
    let span = phases.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - phases.iter().cloned().fold(f64::INFINITY, f64::min);
    if span < 3.0 * PI && max_circular_gap(&phases) >= PI {
        return Err(invalid_input("phases must cover a full period"));
    }

    // closed-form linear fit a + b·cos φ + c·sin φ for the starting point
    let mut ata = DMatrix::<f64>::zeros(3, 3);
    let mut atb = DVector::<f64>::zeros(3);
    for p in points {
        let w = 1.0 / (p.sigma * p.sigma);
        let row = [1.0, p.phase_rad.cos(), p.phase_rad.sin()];
        for i in 0..3 {
            atb[i] += w * row[i] * p.counts;
            for j in 0..3 {
                ata[(i, j)] += w * row[i] * row[j];
            }
        }
    }
    let lin = ata.lu().solve(&atb).ok_or_else(|| invalid_input("degenerate phase set"))?;
    let offset0 = lin[0];
    let v0 = ((lin[1].powi(2) + lin[2].powi(2)).sqrt() / offset0.abs()).clamp(1e-3, 1.0 - 1e-6);
    // b cos φ + c sin φ = A cos(φ + φ₀) with φ₀ = −atan2(c, b)
    let phase0 = -lin[2].atan2(lin[1]);
    let init = [offset0, v0.sqrt().asin(), phase0];

    let data: Vec<DataPoint> = points.iter().map(|p| DataPoint::new(p.phase_rad, p.counts, p.sigma)).collect();
    let sol = solve(fringe_model, &data, &init, &SolverOptions::default())?;
    let mut fit = from_solution(&["offset", "u", "phase0"], &sol);
    let u = sol.params[1];
    let visibility = u.sin().powi(2);
    let visibility_err = ((2.0 * u).sin() * sol.stderr[1]).abs();
    fit.params.remove("u");
    fit.stderr.remove("u");
    fit.set("visibility", visibility, visibility_err);
    fit.set("phase0", sol.params[2].rem_euclid(2.0 * PI), sol.stderr[2]);
    let offset = sol.params[0];
    let amplitude_err = (visibility * sol.stderr[0]).hypot(offset * visibility_err);
    fit.set_derived("amplitude", offset * visibility, amplitude_err);

    let max = points.iter().map(|p| p.counts).fold(f64::NEG_INFINITY, f64::max);
    let min = points.iter().map(|p| p.counts).fold(f64::INFINITY, f64::min);
    let raw = if max + min > 0.0 { (max - min) / (max + min) } else { 0.0 };
    fit.derived.insert("raw_visibility".to_string(), raw);

    let mean = points.iter().map(|p| p.counts).sum::<f64>() / points.len() as f64;
    let ss_tot: f64 = points.iter().map(|p| (p.counts - mean).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|p| (p.counts - fringe_model(p.phase_rad, &sol.params)).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    fit.derived.insert("r_squared".to_string(), r2);
    Ok(fit)
}
