//! Post-selected energy-time interference with one unbalanced
//! interferometer per photon.
//!
//! Each photon independently takes the short or long arm. Pairs where both
//! photons take the same arm land in the middle coincidence peak, where the
//! SS and LL amplitudes interfere with phase φ₁ + φ₂; the SL and LS
//! outcomes form the two side peaks at ±ΔT. Sampling happens per pair at the
//! probability level.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::correlation::{coincidence_count, cross_correlate, CorrelationParams, Histogram};
use crate::detection::DetectorSpec;
use crate::error::{invalid_input, invalid_spec, Result};
use crate::exec::Exec;
use crate::fitting::{fit_sinusoid, FitResult, FringePoint};
use crate::pipeline::simulate;
use crate::rng::{point_seed, stage_rng, Stage};
use crate::source::{PairEvent, SourceSpec};
use crate::textfmt;

/// Peaks must be separated by at least this many correlation times.
pub const MIN_SEPARATION_TAUS: f64 = 10.0;
const ROUTE_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FransonSpec {
    /// Arm imbalance ΔT, ns.
    pub delta_t_ns: f64,
    pub phi1: f64,
    pub phi2: f64,
    /// Coupler ratios towards the short arm:
    /// `[signal in, signal out, idler in, idler out]`.
    pub splitter_ratios: [f64; 4],
    /// Per-pair Gaussian pump phase noise, rad.
    pub phase_noise_sigma: f64,
    pub long_arm_excess_loss_db: f64,
}

impl Default for FransonSpec {
    fn default() -> Self {
        FransonSpec {
            delta_t_ns: 20.0,
            phi1: 0.0,
            phi2: 0.0,
            splitter_ratios: [0.5; 4],
            phase_noise_sigma: 0.0,
            long_arm_excess_loss_db: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntangledStateModel {
    pub visibility_intrinsic: f64,
}

impl Default for EntangledStateModel {
    fn default() -> Self {
        EntangledStateModel { visibility_intrinsic: 1.0 }
    }
}

impl FransonSpec {
    /// Checks the spec against the source correlation time `tau_ns`.
    pub fn validate(&self, tau_ns: f64) -> Result<()> {
        if !(self.delta_t_ns.is_finite() && self.delta_t_ns > 0.0) {
            return Err(invalid_spec("delta_t_ns must be positive"));
        }
        if self.delta_t_ns < MIN_SEPARATION_TAUS * tau_ns {
            return Err(invalid_spec(format!(
                "delta_t_ns = {} is below {MIN_SEPARATION_TAUS}·τ = {}; the coincidence peaks would overlap",
                self.delta_t_ns,
                MIN_SEPARATION_TAUS * tau_ns
            )));
        }
        if self.splitter_ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(invalid_spec("splitter ratios must lie in (0,1)"));
        }
        if !(self.phase_noise_sigma.is_finite() && self.phase_noise_sigma >= 0.0) {
            return Err(invalid_spec("phase_noise_sigma must be non-negative"));
        }
        if !(self.long_arm_excess_loss_db.is_finite() && self.long_arm_excess_loss_db >= 0.0) {
            return Err(invalid_spec("long_arm_excess_loss_db must be non-negative"));
        }
        if !(self.phi1.is_finite() && self.phi2.is_finite()) {
            return Err(invalid_spec("phases must be finite"));
        }
        Ok(())
    }

    pub fn phase_sum(&self) -> f64 {
        self.phi1 + self.phi2
    }
}

impl EntangledStateModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.visibility_intrinsic) {
            return Err(invalid_spec("visibility_intrinsic must lie in [0,1]"));
        }
        Ok(())
    }
}

/// Per-photon arm probabilities towards the monitored output port.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmProbabilities {
    pub signal_short: f64,
    pub signal_long: f64,
    pub idler_short: f64,
    pub idler_long: f64,
}

impl ArmProbabilities {
    pub fn new(spec: &FransonSpec) -> Self {
        let [si, so, ii, io] = spec.splitter_ratios;
        let excess = 10f64.powf(-spec.long_arm_excess_loss_db / 10.0);
        ArmProbabilities {
            signal_short: si * so,
            signal_long: (1.0 - si) * (1.0 - so) * excess,
            idler_short: ii * io,
            idler_long: (1.0 - ii) * (1.0 - io) * excess,
        }
    }

    pub fn both_short(&self) -> f64 {
        self.signal_short * self.idler_short
    }

    pub fn both_long(&self) -> f64 {
        self.signal_long * self.idler_long
    }

    /// 2√(p_SS p_LL)/(p_SS + p_LL); 1 for balanced amplitudes.
    pub fn imbalance_factor(&self) -> f64 {
        let (ss, ll) = (self.both_short(), self.both_long());
        2.0 * (ss * ll).sqrt() / (ss + ll)
    }
}

/// Fringe visibility expected from the routing model, before any noise
/// from detection or accidentals.
pub fn effective_visibility(spec: &FransonSpec, state: &EntangledStateModel) -> f64 {
    let arms = ArmProbabilities::new(spec);
    let sigma = spec.phase_noise_sigma;
    state.visibility_intrinsic * arms.imbalance_factor() * (-0.5 * sigma * sigma).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Middle,
    SignalShortIdlerLong,
    SignalLongIdlerShort,
    SignalOnly,
    IdlerOnly,
    Lost,
}

/// Precomputed routing for one interferometer setting.
#[derive(Debug, Clone)]
pub struct Router {
    spec: FransonSpec,
    arms: ArmProbabilities,
    coherent: f64,
    noise: Option<Normal<f64>>,
}

impl Router {
    pub fn new(spec: &FransonSpec, state: &EntangledStateModel, tau_ns: f64) -> Result<Self> {
        spec.validate(tau_ns)?;
        state.validate()?;
        let arms = ArmProbabilities::new(spec);
        let noise = if spec.phase_noise_sigma > 0.0 {
            Some(Normal::new(0.0, spec.phase_noise_sigma).expect("valid sigma"))
        } else {
            None
        };
        Ok(Router {
            spec: *spec,
            arms,
            coherent: 2.0 * state.visibility_intrinsic * (arms.both_short() * arms.both_long()).sqrt(),
            noise,
        })
    }

    pub fn arms(&self) -> ArmProbabilities {
        self.arms
    }

    fn outcome(&self, rng: &mut ChaCha8Rng) -> (Outcome, bool) {
        let a = &self.arms;
        let mut phase = self.spec.phase_sum();
        if let Some(n) = &self.noise {
            phase += n.sample(rng);
        }
        let p_s = a.signal_short + a.signal_long;
        let p_i = a.idler_short + a.idler_long;
        let interference = self.coherent * phase.cos();
        let middle = (a.both_short() + a.both_long() + interference).max(0.0);
        let sl = a.signal_short * a.idler_long;
        let ls = a.signal_long * a.idler_short;
        let s_only = (p_s * (1.0 - p_i) - interference).max(0.0);
        let i_only = (p_i * (1.0 - p_s) - interference).max(0.0);
        const OUTCOMES: [Outcome; 5] = [
            Outcome::Middle,
            Outcome::SignalShortIdlerLong,
            Outcome::SignalLongIdlerShort,
            Outcome::SignalOnly,
            Outcome::IdlerOnly,
        ];
        let weights = [middle, sl, ls, s_only, i_only];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut outcome = Outcome::Lost;
        for (o, w) in OUTCOMES.into_iter().zip(weights) {
            acc += w;
            if u < acc {
                outcome = o;
                break;
            }
        }
        // which arm the surviving photons took, where it is not fixed
        let v: f64 = rng.random();
        let long = match outcome {
            Outcome::Middle => v * (a.both_short() + a.both_long()) >= a.both_short(),
            Outcome::SignalOnly => v * p_s >= a.signal_short,
            Outcome::IdlerOnly => v * p_i >= a.idler_short,
            _ => false,
        };
        (outcome, long)
    }

    /// Routes one block of pairs, returning unsorted emission times (ps)
    /// for the signal and idler detectors.
    pub fn route_block(&self, pairs: &[PairEvent], rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let dt = self.spec.delta_t_ns * 1e3;
        let mut signal = Vec::with_capacity(pairs.len() / 2);
        let mut idler = Vec::with_capacity(pairs.len() / 2);
        for p in pairs {
            let (outcome, long) = self.outcome(rng);
            let shift = if long { dt } else { 0.0 };
            match outcome {
                Outcome::Middle => {
                    signal.push(p.signal_time() + shift);
                    idler.push(p.idler_time() + shift);
                }
                Outcome::SignalShortIdlerLong => {
                    signal.push(p.signal_time());
                    idler.push(p.idler_time() + dt);
                }
                Outcome::SignalLongIdlerShort => {
                    signal.push(p.signal_time() + dt);
                    idler.push(p.idler_time());
                }
                Outcome::SignalOnly => signal.push(p.signal_time() + shift),
                Outcome::IdlerOnly => idler.push(p.idler_time() + shift),
                Outcome::Lost => {}
            }
        }
        (signal, idler)
    }
}

/// Routes every pair through the interferometers and returns the sorted
/// signal and idler emission times, ps.
pub fn route_pairs(
    pairs: &[PairEvent],
    spec: &FransonSpec,
    state: &EntangledStateModel,
    tau_ns: f64,
    seed: u64,
    exec: Exec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let router = Router::new(spec, state, tau_ns)?;
    let blocks: Vec<&[PairEvent]> = pairs.chunks(ROUTE_CHUNK).collect();
    let routed = exec.map_range(blocks.len(), |c| {
        let mut rng = stage_rng(seed, Stage::Route, c as u64);
        router.route_block(blocks[c], &mut rng)
    });
    let (mut signal, mut idler) = (Vec::new(), Vec::new());
    for (s, i) in routed {
        signal.extend(s);
        idler.extend(i);
    }
    exec.sort_by(&mut signal, f64::total_cmp);
    exec.sort_by(&mut idler, f64::total_cmp);
    Ok((signal, idler))
}

/// Everything needed to run one fringe point end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct FransonSetup {
    pub source: SourceSpec,
    pub signal_detector: DetectorSpec,
    pub idler_detector: DetectorSpec,
    pub interferometer: FransonSpec,
    pub state: EntangledStateModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringeRow {
    pub phase_rad: f64,
    pub middle_raw: u64,
    pub middle_corrected: f64,
    pub side_minus: u64,
    pub side_plus: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeTable {
    pub rows: Vec<FringeRow>,
    pub duration_s: f64,
    pub delta_t_ns: f64,
    /// Signal–idler histogram summed over all phase points.
    pub histogram: Histogram,
}

impl FringeTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase_rad,middle_raw,middle_corrected,side_minus,side_plus\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                textfmt::sig(r.phase_rad, 12),
                r.middle_raw,
                textfmt::sig(r.middle_corrected, 12),
                r.side_minus,
                r.side_plus
            ));
        }
        out
    }

    /// Points for the sinusoid fit: corrected counts with Poisson errors
    /// of the raw counts.
    pub fn fringe_points(&self) -> Vec<FringePoint> {
        self.rows
            .iter()
            .map(|r| FringePoint {
                phase_rad: r.phase_rad,
                counts: r.middle_corrected,
                sigma: (r.middle_raw.max(1) as f64).sqrt(),
            })
            .collect()
    }

    pub fn fit(&self) -> Result<FitResult> {
        fit_sinusoid(&self.fringe_points())
    }
}

/// Runs the full pipeline once per phase setting `(φ₁, φ₂)`.
pub fn fringe_scan_by(
    setup: &FransonSetup,
    settings: &[(f64, f64)],
    duration_s: f64,
    seed: u64,
    exec: Exec,
) -> Result<FringeTable> {
    if settings.len() < 6 {
        return Err(invalid_input(format!("need at least 6 phase points, got {}", settings.len())));
    }
    setup.interferometer.validate(setup.source.tau_ns.max(setup.source.tau_idler_ns()))?;
    let dt_ps = (setup.interferometer.delta_t_ns * 1e3).round() as i64;
    let params = CorrelationParams {
        bin_width_ps: setup.signal_detector.tick_ps,
        span_ps: 2 * dt_ps as u64,
        center_offset_ps: 0,
    };
    let mut histogram: Option<Histogram> = None;
    let mut rows = Vec::with_capacity(settings.len());
    for (index, &(phi1, phi2)) in settings.iter().enumerate() {
        let spec = FransonSpec { phi1, phi2, ..setup.interferometer };
        let router = Router::new(&spec, &setup.state, setup.source.tau_ns.max(setup.source.tau_idler_ns()))?;
        let sim = simulate(
            &setup.source,
            &setup.signal_detector,
            &setup.idler_detector,
            Some(&router),
            duration_s,
            point_seed(seed, index as u64),
            exec,
        )?;
        let (a, b) = (sim.signal_times(), sim.idler_times());
        let window = dt_ps as u64;
        let middle = coincidence_count(&a, &b, window, 0, sim.duration_ps)?;
        let minus = coincidence_count(&a, &b, window, -dt_ps, sim.duration_ps)?;
        let plus = coincidence_count(&a, &b, window, dt_ps, sim.duration_ps)?;
        let h = cross_correlate(&a, &b, sim.duration_ps, &params, exec)?;
        match histogram.as_mut() {
            Some(acc) => {
                acc.add(&h);
                acc.acquisition_time_s += h.acquisition_time_s;
            }
            None => histogram = Some(h),
        }
        rows.push(FringeRow {
            phase_rad: phi1 + phi2,
            middle_raw: middle.coincidences,
            middle_corrected: middle.coincidences as f64 - middle.accidentals_estimate,
            side_minus: minus.coincidences,
            side_plus: plus.coincidences,
        });
    }
    // singles do not depend on the phase, so the first point's rates stand
    // for the sum
    let histogram = histogram.expect("at least six points");
    Ok(FringeTable { rows, duration_s, delta_t_ns: setup.interferometer.delta_t_ns, histogram })
}

/// Fringe scan over phase sums; φ₂ stays at its configured value.
pub fn fringe_scan(setup: &FransonSetup, phases: &[f64], duration_s: f64, seed: u64, exec: Exec) -> Result<FringeTable> {
    let phi2 = setup.interferometer.phi2;
    let settings: Vec<(f64, f64)> = phases.iter().map(|&p| (p - phi2, phi2)).collect();
    let mut table = fringe_scan_by(setup, &settings, duration_s, seed, exec)?;
    for (row, &p) in table.rows.iter_mut().zip(phases) {
        row.phase_rad = p;
    }
    Ok(table)
}

/// `n` equally spaced phases over one period.
pub fn uniform_phases(n: usize) -> Vec<f64> {
    (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect()
}

pub const CLASSICAL_BOUND: f64 = 0.5;
pub const CHSH_BOUND: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub visibility: f64,
    pub stderr: f64,
    pub classical_violated: bool,
    pub chsh_violated: bool,
    /// (V − 1/2)/σ.
    pub classical_margin_sigma: f64,
    /// (V − 1/√2)/σ.
    pub chsh_margin_sigma: f64,
}

/// Required margin, in standard errors, over the classical bound.
pub const CLASSICAL_SIGMAS: f64 = 3.0;
/// Required margin over the CHSH bound.
pub const CHSH_SIGMAS: f64 = 2.0;

fn margin(v: f64, bound: f64, stderr: f64) -> f64 {
    if stderr > 0.0 {
        (v - bound) / stderr
    } else if v > bound {
        f64::INFINITY
    } else if v < bound {
        f64::NEG_INFINITY
    } else {
        0.0
    }
}

pub fn entanglement_verdict(visibility: f64, stderr: f64) -> Result<Verdict> {
    if !(0.0..=1.0).contains(&visibility) {
        return Err(invalid_input(format!("visibility must lie in [0,1], got {visibility}")));
    }
    if !(stderr >= 0.0) {
        return Err(invalid_input("stderr must be non-negative"));
    }
    Ok(Verdict {
        visibility,
        stderr,
        classical_violated: visibility - CLASSICAL_SIGMAS * stderr > CLASSICAL_BOUND,
        chsh_violated: visibility - CHSH_SIGMAS * stderr > CHSH_BOUND,
        classical_margin_sigma: margin(visibility, CLASSICAL_BOUND, stderr),
        chsh_margin_sigma: margin(visibility, CHSH_BOUND, stderr),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::pair_rate;

    const TAU_NS: f64 = 1.77;

    fn synthetic_pairs(n: usize, spacing_ps: f64) -> Vec<PairEvent> {
        // widely spaced pairs with zero ring-down, so routing alone sets Δt
        (0..n)
            .map(|i| PairEvent { t0_ps: i as f64 * spacing_ps, d_signal_ps: 0.0, d_idler_ps: 0.0 })
            .collect()
    }

    struct Peaks {
        minus: u64,
        middle: u64,
        plus: u64,
    }

    fn peaks(spec: &FransonSpec, state: &EntangledStateModel, n: usize, seed: u64) -> Peaks {
        let pairs = synthetic_pairs(n, 1e6);
        let (s, i) = route_pairs(&pairs, spec, state, TAU_NS, seed, Exec::default()).unwrap();
        let a: Vec<u64> = s.iter().map(|t| *t as u64).collect();
        let b: Vec<u64> = i.iter().map(|t| *t as u64).collect();
        let dt = (spec.delta_t_ns * 1e3) as i64;
        let count = |offset| coincidence_count(&a, &b, 1000, offset, 0).unwrap().coincidences;
        Peaks { minus: count(-dt), middle: count(0), plus: count(dt) }
    }

    #[test]
    fn ideal_extremes() {
        let state = EntangledStateModel::default();
        let max = peaks(&FransonSpec::default(), &state, 200_000, 1);
        let min = peaks(&FransonSpec { phi1: PI / 2.0, phi2: PI / 2.0, ..Default::default() }, &state, 200_000, 1);
        assert!(min.middle < 10, "{}", min.middle);
        assert!(max.middle > 40 * (min.middle + 1));
    }

    #[test]
    fn ideal_peak_weights() {
        // phase-averaged post-selected total: sides 1/4 each, middle 1/2
        let state = EntangledStateModel::default();
        let n = 400_000;
        let (mut side, mut middle) = (0u64, 0u64);
        let phases = uniform_phases(8);
        let mut middles = Vec::new();
        for (k, &phi) in phases.iter().enumerate() {
            let p = peaks(&FransonSpec { phi1: phi, ..Default::default() }, &state, n, k as u64);
            side += p.minus + p.plus;
            middle += p.middle;
            middles.push(p.middle as f64);
        }
        let total = (side + middle) as f64;
        assert!((side as f64 / total - 0.5).abs() < 0.005);
        assert!((middle as f64 / total - 0.5).abs() < 0.005);
        // the middle peak swings between 0 and twice its mean
        let mean = middle as f64 / phases.len() as f64;
        let hi = middles.iter().cloned().fold(0.0, f64::max);
        assert!((hi / mean - 2.0).abs() < 0.03, "{}", hi / mean);
    }

    #[test]
    fn side_peaks_are_phase_independent() {
        let state = EntangledStateModel::default();
        let a = peaks(&FransonSpec::default(), &state, 300_000, 3);
        let b = peaks(&FransonSpec { phi1: PI, ..Default::default() }, &state, 300_000, 4);
        for (x, y) in [(a.minus, b.minus), (a.plus, b.plus)] {
            let sigma = ((x + y) as f64).sqrt();
            assert!((x as f64 - y as f64).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn imbalance_penalty() {
        let balanced = ArmProbabilities::new(&FransonSpec::default());
        assert!((balanced.imbalance_factor() - 1.0).abs() < 1e-15);
        let lossy = ArmProbabilities::new(&FransonSpec { long_arm_excess_loss_db: 3.0, ..Default::default() });
        let ratio: f64 = 10f64.powf(-0.3);
        // p_LL/p_SS = ratio²
        let expected = 2.0 * ratio / (1.0 + ratio * ratio);
        assert!((lossy.imbalance_factor() - expected).abs() < 1e-12);
    }

    #[test]
    fn overlapping_peaks_rejected() {
        let spec = FransonSpec { delta_t_ns: 9.0 * TAU_NS, ..Default::default() };
        let pairs = synthetic_pairs(10, 1e6);
        assert!(route_pairs(&pairs, &spec, &EntangledStateModel::default(), TAU_NS, 0, Exec::default()).is_err());
    }

    fn visibility(sigma: f64, seed: u64) -> f64 {
        let state = EntangledStateModel::default();
        let rows: Vec<FringePoint> = uniform_phases(12)
            .into_iter()
            .enumerate()
            .map(|(k, phi)| {
                let spec = FransonSpec { phi1: phi, phase_noise_sigma: sigma, ..Default::default() };
                let m = peaks(&spec, &state, 100_000, seed ^ k as u64).middle as f64;
                FringePoint { phase_rad: phi, counts: m, sigma: m.max(1.0).sqrt() }
            })
            .collect();
        fit_sinusoid(&rows).unwrap().param("visibility")
    }

    #[test]
    fn phase_noise_lowers_visibility() {
        let vs: Vec<f64> = [0.0, 0.2, 0.4, 0.8].iter().map(|&s| visibility(s, 21)).collect();
        for w in vs.windows(2) {
            assert!(w[1] < w[0], "{vs:?}");
        }
        let expected = (-0.5f64 * 0.8 * 0.8).exp();
        assert!((vs[3] - expected).abs() < 0.02, "{} vs {expected}", vs[3]);
    }

    fn ideal_setup() -> FransonSetup {
        let rate_target = 2e5;
        let base = SourceSpec { tau_ns: TAU_NS, ..Default::default() };
        let power = (rate_target / pair_rate(&base.with_power(1.0))).sqrt();
        let det = DetectorSpec { dark_prob_per_ns: 0.0, ..DetectorSpec::ideal(84) };
        FransonSetup {
            source: base.with_power(power),
            signal_detector: det,
            idler_detector: det,
            interferometer: FransonSpec::default(),
            state: EntangledStateModel::default(),
        }
    }

    #[test]
    fn ideal_fringe_scan() {
        let table = fringe_scan(&ideal_setup(), &uniform_phases(12), 0.05, 8, Exec::default()).unwrap();
        let fit = table.fit().unwrap();
        assert!(fit.param("visibility") >= 0.98, "{}", fit.param("visibility"));
        assert!(table.to_csv().starts_with("phase_rad,middle_raw,middle_corrected,side_minus,side_plus\n"));
    }

    #[test]
    fn only_the_phase_sum_matters() {
        let setup = ideal_setup();
        let phases = uniform_phases(10);
        let by_phi1: Vec<(f64, f64)> = phases.iter().map(|&p| (p, 0.3)).collect();
        let by_phi2: Vec<(f64, f64)> = phases.iter().map(|&p| (0.3, p)).collect();
        let f1 = fringe_scan_by(&setup, &by_phi1, 0.03, 1, Exec::default()).unwrap().fit().unwrap();
        let f2 = fringe_scan_by(&setup, &by_phi2, 0.03, 2, Exec::default()).unwrap().fit().unwrap();
        let tol = 2.0 * f1.error("visibility").hypot(f2.error("visibility"));
        assert!((f1.param("visibility") - f2.param("visibility")).abs() <= tol.max(1e-3));
    }

    #[test]
    fn constant_phase_gives_flat_counts() {
        let setup = ideal_setup();
        let settings = vec![(0.7, 0.0); 8];
        let table = fringe_scan_by(&setup, &settings, 0.02, 4, Exec::default()).unwrap();
        let counts: Vec<f64> = table.rows.iter().map(|r| r.middle_corrected).collect();
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        for c in counts {
            assert!((c - mean).abs() < 4.0 * mean.sqrt());
        }
        // every point sits at one phase, so the fringe cannot be fitted
        assert!(table.fit().is_err());
    }

    #[test]
    fn too_few_points() {
        assert!(fringe_scan(&ideal_setup(), &uniform_phases(4), 0.01, 0, Exec::default()).is_err());
    }

    #[test]
    fn verdicts() {
        let v = entanglement_verdict(0.90, 0.07).unwrap();
        assert!(v.classical_violated && v.chsh_violated);
        assert!((v.classical_margin_sigma - 5.714).abs() < 1e-3);
        assert!((v.chsh_margin_sigma - 2.756).abs() < 1e-3);
        let edge = entanglement_verdict(0.5, 0.0).unwrap();
        assert!(!edge.classical_violated && !edge.chsh_violated);
        let perfect = entanglement_verdict(1.0, 0.0).unwrap();
        assert!(perfect.classical_violated && perfect.chsh_violated);
        assert!(entanglement_verdict(1.2, 0.1).is_err());
    }
}
