//! End-to-end simulation: pairs → optional interferometer routing →
//! detection, streamed one sampling chunk at a time so that only detected
//! photons are ever held in memory.

use serde::{Deserialize, Serialize};

use crate::correlation::coincidence_count;
use crate::detection::{detect_rng, finish_channel, thin_and_jitter, DetectorSpec};
use crate::error::{invalid_input, Result};
use crate::exec::Exec;
use crate::fitting::{fit_line, DataPoint, FitResult, SolverOptions};
use crate::franson::Router;
use crate::rng::{point_seed, stage_rng, Stage};
use crate::source::{pair_rate, sample_chunk, SourceSpec, CHUNK_PS};
use crate::tagstream::{TagHeader, TagStream, TimeTag};

pub const SIGNAL_CHANNEL: u16 = 0;
pub const IDLER_CHANNEL: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub signal: Vec<TimeTag>,
    pub idler: Vec<TimeTag>,
    pub pairs_generated: u64,
    pub duration_ps: u64,
}

impl Simulation {
    pub fn signal_times(&self) -> Vec<u64> {
        self.signal.iter().map(|t| t.time_ps).collect()
    }

    pub fn idler_times(&self) -> Vec<u64> {
        self.idler.iter().map(|t| t.time_ps).collect()
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_ps as f64 * 1e-12
    }
}

pub fn duration_to_ps(duration_s: f64) -> Result<u64> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(invalid_input(format!("duration must be positive, got {duration_s}")));
    }
    Ok((duration_s * 1e12).round() as u64)
}

/// Simulates both detector channels over `[0, duration_s)`.
pub fn simulate(
    source: &SourceSpec,
    signal_detector: &DetectorSpec,
    idler_detector: &DetectorSpec,
    router: Option<&Router>,
    duration_s: f64,
    seed: u64,
    exec: Exec,
) -> Result<Simulation> {
    source.validate()?;
    signal_detector.validate()?;
    idler_detector.validate()?;
    let duration_ps = duration_to_ps(duration_s)?;
    let span = duration_ps as f64;
    let n_chunks = (span / CHUNK_PS).ceil() as usize;

    let per_chunk = exec.map_range(n_chunks, |c| {
        let pairs = sample_chunk(source, span, seed, c);
        let (signal, idler) = match router {
            Some(r) => {
                let mut rng = stage_rng(seed, Stage::Route, c as u64);
                r.route_block(&pairs, &mut rng)
            }
            None => (
                pairs.iter().map(|p| p.signal_time()).collect(),
                pairs.iter().map(|p| p.idler_time()).collect(),
            ),
        };
        let s = thin_and_jitter(&signal, signal_detector, &mut detect_rng(seed, SIGNAL_CHANNEL, c));
        let i = thin_and_jitter(&idler, idler_detector, &mut detect_rng(seed, IDLER_CHANNEL, c));
        (pairs.len() as u64, s, i)
    });

    let mut pairs_generated = 0;
    let mut signal = Vec::new();
    let mut idler = Vec::new();
    for (n, s, i) in per_chunk {
        pairs_generated += n;
        signal.extend(s);
        idler.extend(i);
    }
    Ok(Simulation {
        signal: finish_channel(signal, signal_detector, SIGNAL_CHANNEL, duration_ps, seed, exec),
        idler: finish_channel(idler, idler_detector, IDLER_CHANNEL, duration_ps, seed, exec),
        pairs_generated,
        duration_ps,
    })
}

/// One channel as a standalone tag stream. Channel ids are shared across
/// files, so the header always declares both channels.
pub fn channel_stream(tags: &[TimeTag], tick_ps: u64, duration_ps: u64) -> TagStream {
    TagStream::new(TagHeader { tick_ps, duration_ps, channel_count: 2 }, tags.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub power_mw: f64,
    pub singles_signal: u64,
    pub singles_idler: u64,
    /// Singles rates with the expected dark-count rate removed, s⁻¹.
    pub signal_rate: f64,
    pub idler_rate: f64,
    pub coincidences: u64,
    pub accidentals: f64,
    /// Accidental-subtracted coincidence rate, s⁻¹.
    pub coincidence_rate: f64,
    /// Generated pair rate inferred from coincidences and the known
    /// detection efficiencies, s⁻¹.
    pub inferred_pair_rate: f64,
    /// The model rate the simulation was driven with, s⁻¹.
    pub model_pair_rate: f64,
}

impl PowerPoint {
    pub const CSV_HEADER: &'static str = "power_mw,singles_signal,singles_idler,signal_rate,idler_rate,coincidences,accidentals,coincidence_rate,inferred_pair_rate,model_pair_rate";

    pub fn csv_row(&self) -> String {
        use crate::textfmt::sig;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            sig(self.power_mw, 12),
            self.singles_signal,
            self.singles_idler,
            sig(self.signal_rate, 12),
            sig(self.idler_rate, 12),
            self.coincidences,
            sig(self.accidentals, 12),
            sig(self.coincidence_rate, 12),
            sig(self.inferred_pair_rate, 12),
            sig(self.model_pair_rate, 12)
        )
    }
}

/// Fraction of a two-sided exponential peak of scale τ inside a window of
/// total width `window_ps`.
pub fn window_fraction(window_ps: f64, tau_ps: f64) -> f64 {
    1.0 - (-window_ps / (2.0 * tau_ps)).exp()
}

/// Simulates each pump power and extracts singles and coincidence rates.
/// Point `k` uses seed `seed ^ k`.
#[allow(clippy::too_many_arguments)]
pub fn power_scan(
    source: &SourceSpec,
    signal_detector: &DetectorSpec,
    idler_detector: &DetectorSpec,
    powers_mw: &[f64],
    duration_s: f64,
    window_ps: u64,
    seed: u64,
    exec: Exec,
) -> Result<Vec<PowerPoint>> {
    if powers_mw.is_empty() {
        return Err(invalid_input("no pump powers given"));
    }
    if window_ps == 0 {
        return Err(invalid_input("coincidence window must be positive"));
    }
    let mut out = Vec::with_capacity(powers_mw.len());
    for (k, &power) in powers_mw.iter().enumerate() {
        if !(power.is_finite() && power > 0.0) {
            return Err(invalid_input(format!("pump power must be positive, got {power}")));
        }
        let spec = source.with_power(power);
        let sim = simulate(&spec, signal_detector, idler_detector, None, duration_s, point_seed(seed, k as u64), exec)?;
        let (a, b) = (sim.signal_times(), sim.idler_times());
        let t = sim.duration_s();
        let c = coincidence_count(&a, &b, window_ps, 0, sim.duration_ps)?;
        let coincidence_rate = (c.coincidences as f64 - c.accidentals_estimate) / t;
        let tau_ps = 0.5 * (spec.tau_signal_ns() + spec.tau_idler_ns()) * 1e3;
        let eta = signal_detector.transmission() * idler_detector.transmission() * window_fraction(window_ps as f64, tau_ps);
        out.push(PowerPoint {
            power_mw: power,
            singles_signal: a.len() as u64,
            singles_idler: b.len() as u64,
            signal_rate: a.len() as f64 / t - signal_detector.dark_rate(),
            idler_rate: b.len() as f64 / t - idler_detector.dark_rate(),
            coincidences: c.coincidences,
            accidentals: c.accidentals_estimate,
            coincidence_rate,
            inferred_pair_rate: coincidence_rate / eta,
            model_pair_rate: pair_rate(&spec),
        });
    }
    Ok(out)
}

/// Straight-line fit of ln y against ln x; `slope` is the exponent.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<FitResult> {
    if x.len() != y.len() {
        return Err(invalid_input("x and y lengths differ"));
    }
    if x.len() < 2 {
        return Err(invalid_input("a slope needs at least two points"));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(invalid_input("log-log fit needs positive values"));
    }
    let data: Vec<DataPoint> = x.iter().zip(y).map(|(a, b)| DataPoint::new(a.ln(), b.ln(), 1.0)).collect();
    if data.len() < 4 {
        // exact through two or three points: the solver needs 2k points
        let n = data.len() as f64;
        let mx = data.iter().map(|d| d.x).sum::<f64>() / n;
        let my = data.iter().map(|d| d.y).sum::<f64>() / n;
        let sxx: f64 = data.iter().map(|d| (d.x - mx).powi(2)).sum();
        if sxx == 0.0 {
            return Err(invalid_input("all x values are equal"));
        }
        let slope = data.iter().map(|d| (d.x - mx) * (d.y - my)).sum::<f64>() / sxx;
        let mut fit = FitResult {
            params: Default::default(),
            stderr: Default::default(),
            derived: Default::default(),
            residual_norm: 0.0,
            reduced_chi_square: f64::NAN,
            iterations: 0,
            converged: true,
            message: None,
        };
        fit.params.insert("slope".into(), slope);
        fit.params.insert("intercept".into(), my - slope * mx);
        fit.stderr.insert("slope".into(), f64::NAN);
        fit.stderr.insert("intercept".into(), f64::NAN);
        return Ok(fit);
    }
    fit_line(&data, &SolverOptions::default())
}
