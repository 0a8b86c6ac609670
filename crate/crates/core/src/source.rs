//! Cavity-enhanced spontaneous four-wave mixing as a point process.
//!
//! Pair rates follow R ∝ (γP)² Q³ L⁻², anchored at a calibrated operating
//! point. Each pair carries two independent exponential ring-down delays,
//! so the signal–idler delay is Laplace distributed with the biphoton
//! correlation time τ.

use rand_distr::{Distribution, Exp, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_spec, Result};
use crate::exec::Exec;
use crate::rng::{stage_rng, Stage};
use crate::textfmt;

/// Loaded Q of the calibration device.
pub const REFERENCE_Q: f64 = 2.0e6;
/// Nonlinearity of the calibration device, W⁻¹m⁻¹.
pub const REFERENCE_GAMMA: f64 = 1.0;
/// Ring length of the calibration device (115 µm radius), m.
pub const REFERENCE_LENGTH_M: f64 = 2.0 * std::f64::consts::PI * 115e-6;
/// Pair brightness of the calibration device, s⁻¹ mW⁻².
pub const REFERENCE_BRIGHTNESS: f64 = 3.9e6;

/// Sampling chunk: 1 ms of acquisition time, in ps.
pub const CHUNK_PS: f64 = 1.0e9;
/// OU integration steps per coherence time.
const FIELD_STEPS_PER_TAU: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmissionMode {
    /// Pair creation times form a homogeneous Poisson process.
    #[default]
    PoissonPairs,
    /// Emission is a Cox process driven by a thermal (complex Gaussian)
    /// field, so each marginal shows bunching.
    GaussianField,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSpec {
    pub gamma_per_w_m: f64,
    pub pump_power_mw: f64,
    pub q_loaded: f64,
    pub ring_length_m: f64,
    /// Signal 1/e ring-down time, ns.
    pub tau_ns: f64,
    /// Idler ring-down time when it differs from the signal's.
    pub tau_idler_ns: Option<f64>,
    /// s⁻¹ mW⁻² at the reference Q, γ and length.
    pub brightness_cal: f64,
    pub mode: EmissionMode,
    /// Amplitude correlation time of the driving field in gaussian-field
    /// mode; defaults to `tau_ns`.
    pub coherence_ns: Option<f64>,
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec {
            gamma_per_w_m: REFERENCE_GAMMA,
            pump_power_mw: 3.0,
            q_loaded: REFERENCE_Q,
            ring_length_m: REFERENCE_LENGTH_M,
            tau_ns: 1.77,
            tau_idler_ns: None,
            brightness_cal: REFERENCE_BRIGHTNESS,
            mode: EmissionMode::PoissonPairs,
            coherence_ns: None,
        }
    }
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma_per_w_m", self.gamma_per_w_m),
            ("q_loaded", self.q_loaded),
            ("ring_length_m", self.ring_length_m),
            ("tau_ns", self.tau_ns),
            ("brightness_cal", self.brightness_cal),
            ("tau_idler_ns", self.tau_idler_ns.unwrap_or(1.0)),
            ("coherence_ns", self.coherence_ns.unwrap_or(1.0)),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(invalid_spec(format!("{name} must be positive, got {value}")));
            }
        }
        if !(self.pump_power_mw.is_finite() && self.pump_power_mw >= 0.0) {
            return Err(invalid_spec("pump_power_mw must be non-negative"));
        }
        Ok(())
    }

    pub fn tau_signal_ns(&self) -> f64 {
        self.tau_ns
    }

    pub fn tau_idler_ns(&self) -> f64 {
        self.tau_idler_ns.unwrap_or(self.tau_ns)
    }

    pub fn coherence_ns(&self) -> f64 {
        self.coherence_ns.unwrap_or(self.tau_ns)
    }

    /// Biphoton bandwidth Δν = 1/(2πτ), MHz.
    pub fn bandwidth_mhz(&self) -> f64 {
        tau_to_bandwidth_mhz(self.tau_ns)
    }

    /// Mean number of pairs in a temporal mode of length 2τ.
    pub fn pairs_per_mode(&self) -> f64 {
        pair_rate(self) * 2.0 * self.tau_ns * 1e-9
    }

    pub fn with_power(&self, pump_power_mw: f64) -> SourceSpec {
        SourceSpec { pump_power_mw, ..*self }
    }
}

/// Δν = 1/(2πτ) with τ in ns and Δν in MHz.
pub fn tau_to_bandwidth_mhz(tau_ns: f64) -> f64 {
    1e3 / (2.0 * std::f64::consts::PI * tau_ns)
}

pub fn bandwidth_to_tau_ns(bandwidth_mhz: f64) -> f64 {
    1e3 / (2.0 * std::f64::consts::PI * bandwidth_mhz)
}

/// Pair generation rate, s⁻¹.
pub fn pair_rate(spec: &SourceSpec) -> f64 {
    let p = spec.pump_power_mw;
    spec.brightness_cal
        * p
        * p
        * (spec.q_loaded / REFERENCE_Q).powi(3)
        * (spec.gamma_per_w_m / REFERENCE_GAMMA).powi(2)
        * (REFERENCE_LENGTH_M / spec.ring_length_m).powi(2)
}

/// Pairs per temporal mode (length 2τ, τ = 1/(2πΔν)) per mW² of pump.
pub fn modal_brightness(brightness_cal: f64, bandwidth_mhz: f64) -> f64 {
    let tau_s = 1.0 / (2.0 * std::f64::consts::PI * bandwidth_mhz * 1e6);
    brightness_cal * 2.0 * tau_s
}

/// Pump power at which the mean occupation per temporal mode reaches
/// `pairs_per_mode`.
pub fn power_for_pairs_per_mode(brightness_cal: f64, bandwidth_mhz: f64, pairs_per_mode: f64) -> f64 {
    (pairs_per_mode / modal_brightness(brightness_cal, bandwidth_mhz)).sqrt()
}

/// Brightness per unit bandwidth, s⁻¹ mW⁻² MHz⁻¹.
pub fn spectral_brightness(brightness_cal: f64, bandwidth_mhz: f64) -> f64 {
    brightness_cal / bandwidth_mhz
}

/// Probability that a temporal mode with mean occupation `mean` holds two
/// or more pairs.
pub fn multipair_probability(mean: f64, mode: EmissionMode) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    match mode {
        EmissionMode::PoissonPairs => -(-mean).exp_m1() - mean * (-mean).exp(),
        // geometric occupation: P(n) = μⁿ / (1+μ)ⁿ⁺¹
        EmissionMode::GaussianField => (mean / (1.0 + mean)).powi(2),
    }
}

/// Probability that a temporal mode holds at least one pair.
pub fn occupied_probability(mean: f64, mode: EmissionMode) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    match mode {
        EmissionMode::PoissonPairs => -(-mean).exp_m1(),
        EmissionMode::GaussianField => mean / (1.0 + mean),
    }
}

/// Per-mode multi-pair probability at the spec's operating point.
pub fn multipair_fraction(spec: &SourceSpec) -> f64 {
    multipair_probability(spec.pairs_per_mode(), spec.mode)
}

/// Multi-pair share among occupied modes.
pub fn conditional_multipair_fraction(spec: &SourceSpec) -> f64 {
    let mean = spec.pairs_per_mode();
    let occupied = occupied_probability(mean, spec.mode);
    if occupied == 0.0 {
        0.0
    } else {
        multipair_probability(mean, spec.mode) / occupied
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEvent {
    /// Creation time, ps.
    pub t0_ps: f64,
    pub d_signal_ps: f64,
    pub d_idler_ps: f64,
}

impl PairEvent {
    pub fn signal_time(&self) -> f64 {
        self.t0_ps + self.d_signal_ps
    }

    pub fn idler_time(&self) -> f64 {
        self.t0_ps + self.d_idler_ps
    }
}

pub fn pairs_to_csv(pairs: &[PairEvent]) -> String {
    let mut out = String::from("t0_ps,d_signal_ps,d_idler_ps\n");
    for p in pairs {
        out.push_str(&format!(
            "{},{},{}\n",
            textfmt::sig(p.t0_ps, 15),
            textfmt::sig(p.d_signal_ps, 12),
            textfmt::sig(p.d_idler_ps, 12)
        ));
    }
    out
}

/// Samples all pairs created in `[0, duration_s)`, sorted by creation time.
pub fn sample_pairs(spec: &SourceSpec, duration_s: f64, seed: u64, exec: Exec) -> Result<Vec<PairEvent>> {
    let chunks = sample_pair_chunks(spec, duration_s, seed, exec)?;
    let mut pairs: Vec<PairEvent> = chunks.into_iter().flatten().collect();
    if spec.mode == EmissionMode::GaussianField {
        exec.sort_by(&mut pairs, |a, b| a.t0_ps.total_cmp(&b.t0_ps));
    }
    Ok(pairs)
}

/// Pairs grouped by 1 ms sampling chunk. Chunk `c` is a pure function of
/// `(spec, seed, c)`.
pub fn sample_pair_chunks(
    spec: &SourceSpec,
    duration_s: f64,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Vec<PairEvent>>> {
    spec.validate()?;
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(invalid_input(format!("duration must be positive, got {duration_s}")));
    }
    let duration_ps = duration_s * 1e12;
    let n_chunks = (duration_ps / CHUNK_PS).ceil() as usize;
    Ok(exec.map_range(n_chunks, |c| sample_chunk(spec, duration_ps, seed, c)))
}

fn chunk_bounds(duration_ps: f64, c: usize) -> (f64, f64) {
    let lo = c as f64 * CHUNK_PS;
    (lo, (lo + CHUNK_PS).min(duration_ps))
}

pub(crate) fn sample_chunk(spec: &SourceSpec, duration_ps: f64, seed: u64, c: usize) -> Vec<PairEvent> {
    let (lo, hi) = chunk_bounds(duration_ps, c);
    let rate_per_ps = pair_rate(spec) * 1e-12;
    if rate_per_ps <= 0.0 {
        return Vec::new();
    }
    let anchors = match spec.mode {
        EmissionMode::PoissonPairs => poisson_times(rate_per_ps, lo, hi, seed, c),
        EmissionMode::GaussianField => cox_times(rate_per_ps, spec.coherence_ns() * 1e3, lo, hi, seed, c),
    };
    let mut rng = stage_rng(seed, Stage::PairDelays, c as u64);
    let tau_s = spec.tau_signal_ns() * 1e3;
    let tau_i = spec.tau_idler_ns() * 1e3;
    let gaussian = spec.mode == EmissionMode::GaussianField;
    anchors
        .into_iter()
        .map(|t| {
            let e1: f64 = Exp1.sample(&mut rng);
            let e2: f64 = Exp1.sample(&mut rng);
            let d_signal_ps = tau_s * e1;
            let d_idler_ps = tau_i * e2;
            // In gaussian-field mode the field drives the signal emission
            // time itself; the creation time is inferred backwards.
            let t0_ps = if gaussian { t - d_signal_ps } else { t };
            PairEvent { t0_ps, d_signal_ps, d_idler_ps }
        })
        .collect()
}

fn poisson_times(rate_per_ps: f64, lo: f64, hi: f64, seed: u64, c: usize) -> Vec<f64> {
    let mut rng = stage_rng(seed, Stage::PairTimes, c as u64);
    let gap = Exp::new(rate_per_ps).expect("positive rate");
    let mut out = Vec::with_capacity(((hi - lo) * rate_per_ps * 1.05) as usize + 16);
    let mut t = lo;
    loop {
        t += gap.sample(&mut rng);
        if t >= hi {
            break;
        }
        out.push(t);
    }
    out
}

/// Cox process with intensity rate·|α(t)|², α a unit-variance complex
/// Ornstein–Uhlenbeck process integrated exactly on a grid of
/// `coherence_ps / 20`. Events are placed by inverting the integrated
/// intensity, which is exact for the piecewise-constant intensity.
fn cox_times(rate_per_ps: f64, coherence_ps: f64, lo: f64, hi: f64, seed: u64, c: usize) -> Vec<f64> {
    let mut rng = stage_rng(seed, Stage::Field, c as u64);
    let dt = coherence_ps / FIELD_STEPS_PER_TAU;
    let rho = (-dt / coherence_ps).exp();
    let kick = ((1.0 - rho * rho) * 0.5).sqrt();
    let half = 0.5f64.sqrt();
    let (z1, z2): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
    let mut re = half * z1;
    let mut im = half * z2;

    let mut out = Vec::with_capacity(((hi - lo) * rate_per_ps * 1.1) as usize + 16);
    let mut need: f64 = Exp1.sample(&mut rng);
    let mut t = lo;
    while t < hi {
        let step = dt.min(hi - t);
        let intensity = rate_per_ps * (re * re + im * im);
        if intensity > 0.0 {
            let mut available = intensity * step;
            let mut pos = t;
            while need <= available {
                pos += need / intensity;
                available -= need;
                out.push(pos.min(hi));
                need = Exp1.sample(&mut rng);
            }
            need -= available;
        }
        t += step;
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        re = rho * re + kick * z1;
        im = rho * im + kick * z2;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_cdf(x: f64, scale: f64) -> f64 {
        if x < 0.0 {
            0.5 * (x / scale).exp()
        } else {
            1.0 - 0.5 * (-x / scale).exp()
        }
    }

    /// Two-sided one-sample KS p-value (asymptotic Kolmogorov series).
    fn ks_p_value(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let mut d: f64 = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let f = cdf(*x);
            d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
        }
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let mut p = 0.0;
        for k in 1..100 {
            let k = k as f64;
            p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn calibrated_rate_at_operating_point() {
        let spec = SourceSpec::default();
        let r = pair_rate(&spec);
        assert!((r / 3.5e7 - 1.0).abs() < 0.01, "{r}");
        assert_eq!(pair_rate(&spec.with_power(0.0)), 0.0);
        let doubled = SourceSpec { q_loaded: 4e6, ..spec };
        assert!((pair_rate(&doubled) / r - 8.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_power_law_slope() {
        let spec = SourceSpec::default();
        let powers = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
        let xs: Vec<f64> = powers.iter().map(|p: &f64| p.ln()).collect();
        let ys: Vec<f64> = powers.iter().map(|p| pair_rate(&spec.with_power(*p)).ln()).collect();
        let mx = xs.iter().sum::<f64>() / 6.0;
        let my = ys.iter().sum::<f64>() / 6.0;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        assert!((sxy / sxx - 2.0).abs() < 1e-6);
    }

    #[test]
    fn modal_brightness_examples() {
        let modal = modal_brightness(3.9e6, 90.0);
        assert!((modal - 0.0138).abs() < 5e-5, "{modal}");
        assert!((modal / 0.015 - 1.0).abs() < 0.15);
        let at_2p5 = modal * 2.5 * 2.5;
        assert!((0.086..=0.094).contains(&at_2p5), "{at_2p5}");
        assert!(modal_brightness(3.9e6, 1e12) < 1e-9);
        let p = power_for_pairs_per_mode(3.9e6, 90.0, 0.1);
        assert!((p - 2.5).abs() < 0.2, "{p}");
    }

    #[test]
    fn multipair_examples() {
        let poisson = multipair_probability(0.1, EmissionMode::PoissonPairs);
        assert!((poisson - 0.004679).abs() < 1e-6, "{poisson}");
        let cond = poisson / occupied_probability(0.1, EmissionMode::PoissonPairs);
        assert!((cond - 0.0492).abs() < 1e-3, "{cond}");
        assert_eq!(multipair_probability(0.0, EmissionMode::PoissonPairs), 0.0);

        // brute-force tails over n <= 50
        for mu in [0.01f64, 0.1, 0.5, 1.0, 2.0] {
            let mut fact = 1.0;
            let mut poisson_tail = 0.0;
            let mut geometric_tail = 0.0;
            for n in 0..=50u32 {
                if n > 0 {
                    fact *= n as f64;
                }
                if n >= 2 {
                    poisson_tail += (-mu).exp() * mu.powi(n as i32) / fact;
                    geometric_tail += mu.powi(n as i32) / (1.0 + mu).powi(n as i32 + 1);
                }
            }
            let p = multipair_probability(mu, EmissionMode::PoissonPairs);
            let g = multipair_probability(mu, EmissionMode::GaussianField);
            assert!((p - poisson_tail).abs() < 1e-9);
            assert!((g - geometric_tail).abs() < 1e-6);
            if mu <= 0.5 {
                // thermal statistics favour multi-pair events at low occupation
                assert!(g >= p);
            }
        }
    }

    #[test]
    fn poisson_count() {
        let spec = SourceSpec {
            brightness_cal: 1e6,
            pump_power_mw: 1.0,
            ..Default::default()
        };
        assert!((pair_rate(&spec) - 1e6).abs() < 1e-6);
        let pairs = sample_pairs(&spec, 1.0, 42, Exec::default()).unwrap();
        let n = pairs.len() as f64;
        assert!((n - 1e6).abs() < 4e3, "{n}");
        assert!(pairs.windows(2).all(|w| w[0].t0_ps <= w[1].t0_ps));
        assert!(pairs.iter().all(|p| p.d_signal_ps >= 0.0 && p.d_idler_ps >= 0.0));
    }

    #[test]
    fn relative_delay_is_laplace() {
        for mode in [EmissionMode::PoissonPairs, EmissionMode::GaussianField] {
            let spec = SourceSpec {
                brightness_cal: 1e7,
                pump_power_mw: 1.0,
                tau_ns: 2.0,
                mode,
                ..Default::default()
            };
            let pairs = sample_pairs(&spec, 0.011, 5, Exec::default()).unwrap();
            let diffs: Vec<f64> = pairs.iter().take(100_000).map(|p| p.d_signal_ps - p.d_idler_ps).collect();
            assert_eq!(diffs.len(), 100_000);
            let p = ks_p_value(diffs, |x| laplace_cdf(x, 2000.0));
            assert!(p > 0.01, "{mode:?}: KS p = {p}");
        }
    }

    #[test]
    fn zero_duration_is_an_error() {
        assert!(sample_pairs(&SourceSpec::default(), 0.0, 1, Exec::Sequential).is_err());
        assert!(sample_pairs(&SourceSpec::default(), -1.0, 1, Exec::Sequential).is_err());
    }

    #[test]
    fn deterministic_across_strategies() {
        for mode in [EmissionMode::PoissonPairs, EmissionMode::GaussianField] {
            let spec = SourceSpec { pump_power_mw: 0.5, mode, ..Default::default() };
            let a = sample_pairs(&spec, 0.0035, 11, Exec::Sequential).unwrap();
            let b = sample_pairs(&spec, 0.0035, 11, Exec::Parallel).unwrap();
            let c = sample_pairs(&spec, 0.0035, 12, Exec::Sequential).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn cox_process_mean_rate() {
        let spec = SourceSpec {
            brightness_cal: 1e7,
            pump_power_mw: 1.0,
            mode: EmissionMode::GaussianField,
            ..Default::default()
        };
        let pairs = sample_pairs(&spec, 0.02, 3, Exec::default()).unwrap();
        // thermal statistics: variance is inflated, so allow a few percent
        let n = pairs.len() as f64;
        assert!((n / 2e5 - 1.0).abs() < 0.03, "{n}");
    }
}
