//! Detection chain: turns ideal emission times into time tags.
//!
//! Stages run in a fixed order: loss thinning, Gaussian jitter, dark-count
//! merge, gate filtering, dead time, tick quantisation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_spec, Result};
use crate::exec::Exec;
use crate::rng::{stage_rng, Stage};
use crate::source::CHUNK_PS;
use crate::tagstream::{TimeTag, FLAG_DARK};

/// Emissions per thinning/jitter work unit.
pub const EMISSION_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gate {
    pub period_ns: f64,
    pub width_ns: f64,
    pub offset_ns: f64,
}

impl Default for Gate {
    fn default() -> Self {
        Gate { period_ns: 10.0, width_ns: 1.0, offset_ns: 0.0 }
    }
}

impl Gate {
    pub fn is_open(&self, t_ps: f64) -> bool {
        let phase = (t_ps - self.offset_ns * 1e3).rem_euclid(self.period_ns * 1e3);
        phase < self.width_ns * 1e3
    }

    pub fn duty_cycle(&self) -> f64 {
        self.width_ns / self.period_ns
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSpec {
    pub efficiency: f64,
    /// Optical loss between chip and detector, dB.
    pub path_loss_db: f64,
    /// Per-detector Gaussian timing jitter, ps.
    pub jitter_sigma_ps: f64,
    pub dark_prob_per_ns: f64,
    /// `None` runs the detector free (ungated).
    pub gate: Option<Gate>,
    pub dead_time_ns: f64,
    pub tick_ps: u64,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec {
            efficiency: 0.15,
            // chip out-coupling 3 dB + filtering 3.5 dB
            path_loss_db: 6.5,
            jitter_sigma_ps: 350.0 / std::f64::consts::SQRT_2,
            dark_prob_per_ns: 1e-4,
            gate: Some(Gate::default()),
            dead_time_ns: 1000.0,
            tick_ps: 84,
        }
    }
}

impl DetectorSpec {
    /// Perfect detector that only quantises to `tick_ps`.
    pub fn ideal(tick_ps: u64) -> Self {
        DetectorSpec {
            efficiency: 1.0,
            path_loss_db: 0.0,
            jitter_sigma_ps: 0.0,
            dark_prob_per_ns: 0.0,
            gate: None,
            dead_time_ns: 0.0,
            tick_ps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(invalid_spec(format!("efficiency must be in [0,1], got {}", self.efficiency)));
        }
        if !(self.path_loss_db >= 0.0 && self.path_loss_db.is_finite()) {
            return Err(invalid_spec("path_loss_db must be non-negative"));
        }
        if !(self.jitter_sigma_ps >= 0.0 && self.jitter_sigma_ps.is_finite()) {
            return Err(invalid_spec("jitter_sigma_ps must be non-negative"));
        }
        if !(self.dark_prob_per_ns >= 0.0 && self.dark_prob_per_ns.is_finite()) {
            return Err(invalid_spec("dark_prob_per_ns must be non-negative"));
        }
        if !(self.dead_time_ns >= 0.0 && self.dead_time_ns.is_finite()) {
            return Err(invalid_spec("dead_time_ns must be non-negative"));
        }
        if self.tick_ps == 0 {
            return Err(invalid_spec("tick_ps must be positive"));
        }
        if let Some(g) = self.gate {
            if !(g.period_ns > 0.0 && g.width_ns > 0.0 && g.width_ns <= g.period_ns) {
                return Err(invalid_spec("gate needs 0 < width <= period"));
            }
        }
        Ok(())
    }

    /// Probability that an emitted photon produces a click.
    pub fn transmission(&self) -> f64 {
        self.efficiency * 10f64.powf(-self.path_loss_db / 10.0)
    }

    /// Mean dark-count rate, s⁻¹, after gating.
    pub fn dark_rate(&self) -> f64 {
        let duty = self.gate.map_or(1.0, |g| g.duty_cycle());
        self.dark_prob_per_ns * 1e9 * duty
    }
}

/// Combined timing jitter of a detector pair.
pub fn pairwise_jitter(a: &DetectorSpec, b: &DetectorSpec) -> f64 {
    a.jitter_sigma_ps.hypot(b.jitter_sigma_ps)
}

fn stream_index(channel: u16, chunk: usize) -> u64 {
    (u64::from(channel) << 40) | chunk as u64
}

/// Loss thinning and jitter for one work unit. Survivors keep their input
/// order; jitter may reorder neighbours, which the final sort undoes.
pub fn thin_and_jitter(emissions: &[f64], spec: &DetectorSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let p = spec.transmission();
    let sigma = spec.jitter_sigma_ps;
    let mut out = Vec::with_capacity((emissions.len() as f64 * p * 1.1) as usize + 8);
    if p <= 0.0 {
        return out;
    }
    for &t in emissions {
        if p < 1.0 && rng.random::<f64>() >= p {
            continue;
        }
        let jitter = if sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        } else {
            0.0
        };
        out.push(t + jitter);
    }
    out
}

/// Random stream for the thinning/jitter unit `chunk` of `channel`.
pub fn detect_rng(seed: u64, channel: u16, chunk: usize) -> ChaCha8Rng {
    stage_rng(seed, Stage::Detect, stream_index(channel, chunk))
}

fn dark_counts(spec: &DetectorSpec, channel: u16, duration_ps: f64, seed: u64, exec: Exec) -> Vec<f64> {
    let rate_per_ps = spec.dark_prob_per_ns * 1e-3;
    if rate_per_ps <= 0.0 || duration_ps <= 0.0 {
        return Vec::new();
    }
    let gap = Exp::new(rate_per_ps).expect("positive rate");
    let n_chunks = (duration_ps / CHUNK_PS).ceil() as usize;
    exec.map_range(n_chunks, |c| {
        let mut rng = stage_rng(seed, Stage::DarkCounts, stream_index(channel, c));
        let lo = c as f64 * CHUNK_PS;
        let hi = (lo + CHUNK_PS).min(duration_ps);
        let mut out = Vec::new();
        let mut t = lo;
        loop {
            t += gap.sample(&mut rng);
            if t >= hi {
                break;
            }
            out.push(t);
        }
        out
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Dark counts, gating, dead time and quantisation applied to the
/// thinned/jittered photon times of one channel.
pub fn finish_channel(
    photons: Vec<f64>,
    spec: &DetectorSpec,
    channel: u16,
    duration_ps: u64,
    seed: u64,
    exec: Exec,
) -> Vec<TimeTag> {
    let window = duration_ps as f64;
    let darks = dark_counts(spec, channel, window, seed, exec);
    let mut events: Vec<(f64, u16)> = photons
        .into_iter()
        .map(|t| (t, 0))
        .chain(darks.into_iter().map(|t| (t, FLAG_DARK)))
        .filter(|&(t, _)| t >= 0.0 && t < window)
        .filter(|&(t, _)| spec.gate.is_none_or(|g| g.is_open(t)))
        .collect();
    exec.sort_by(&mut events, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let dead_ps = spec.dead_time_ns * 1e3;
    let tick = spec.tick_ps as f64;
    let mut tags = Vec::with_capacity(events.len());
    let mut last_accepted = f64::NEG_INFINITY;
    for (t, flags) in events {
        if dead_ps > 0.0 && t < last_accepted + dead_ps {
            continue;
        }
        last_accepted = t;
        let time_ps = (t / tick).round() as u64 * spec.tick_ps;
        if time_ps > duration_ps {
            continue;
        }
        tags.push(TimeTag { time_ps, channel, flags });
    }
    tags
}

/// Runs the full detection chain on sorted emission times (ps) for one
/// channel. Emissions outside `[0, duration)` are never detected.
pub fn detect(
    emissions: &[f64],
    spec: &DetectorSpec,
    channel: u16,
    duration_ps: u64,
    seed: u64,
    exec: Exec,
) -> Result<Vec<TimeTag>> {
    spec.validate()?;
    if let Some(i) = emissions.windows(2).position(|w| !(w[0] <= w[1])) {
        return Err(invalid_input(format!("emission times not sorted at index {}", i + 1)));
    }
    let chunks: Vec<&[f64]> = emissions.chunks(EMISSION_CHUNK).collect();
    let photons: Vec<f64> = exec
        .map_range(chunks.len(), |c| {
            let mut rng = detect_rng(seed, channel, c);
            thin_and_jitter(chunks[c], spec, &mut rng)
        })
        .into_iter()
        .flatten()
        .collect();
    Ok(finish_channel(photons, spec, channel, duration_ps, seed, exec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    const SECOND_PS: u64 = 1_000_000_000_000;

    fn poisson_emissions(rate: f64, duration_s: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gap = Exp::new(rate * 1e-12).unwrap();
        let mut t = 0.0;
        let mut out = Vec::new();
        loop {
            t += gap.sample(&mut rng);
            if t >= duration_s * 1e12 {
                return out;
            }
            out.push(t);
        }
    }

    fn clean(efficiency: f64) -> DetectorSpec {
        DetectorSpec { efficiency, ..DetectorSpec::ideal(1) }
    }

    #[test]
    fn total_extinction() {
        let spec = DetectorSpec { efficiency: 0.0, dark_prob_per_ns: 0.0, ..Default::default() };
        let em = poisson_emissions(1e6, 0.01, 1);
        assert!(detect(&em, &spec, 0, SECOND_PS / 100, 1, Exec::default()).unwrap().is_empty());
    }

    #[test]
    fn dark_count_rate() {
        let spec = DetectorSpec { efficiency: 0.0, gate: None, dead_time_ns: 0.0, ..Default::default() };
        let tags = detect(&[], &spec, 3, SECOND_PS, 2, Exec::default()).unwrap();
        let n = tags.len() as f64;
        assert!((n - 1e5).abs() < 1.3e3, "{n}");
        assert!(tags.iter().all(|t| t.is_dark() && t.channel == 3));
    }

    #[test]
    fn three_db_halves_counts() {
        let em = poisson_emissions(2e7, 0.1, 3);
        let base = clean(0.5);
        let lossy = DetectorSpec { path_loss_db: 3.0, ..base };
        let n0 = detect(&em, &base, 0, SECOND_PS, 4, Exec::default()).unwrap().len() as f64;
        let n1 = detect(&em, &lossy, 0, SECOND_PS, 4, Exec::default()).unwrap().len() as f64;
        assert!(n0 > 1e6);
        assert!((n1 / n0 - 10f64.powf(-0.3)).abs() < 0.02 * 0.5);
    }

    #[test]
    fn thinning_is_linear() {
        let em = poisson_emissions(1e6, 0.5, 5);
        let spec = DetectorSpec { path_loss_db: 1.7, ..clean(0.3) };
        let n = detect(&em, &spec, 0, SECOND_PS, 6, Exec::default()).unwrap().len() as f64;
        let p = spec.transmission();
        let expected = em.len() as f64 * p;
        let sigma = (em.len() as f64 * p * (1.0 - p)).sqrt();
        assert!((n - expected).abs() < 3.0 * sigma, "{n} vs {expected}");
    }

    #[test]
    fn output_sorted_and_quantised() {
        let em = poisson_emissions(5e6, 0.01, 7);
        let spec = DetectorSpec { gate: None, dead_time_ns: 50.0, ..Default::default() };
        let tags = detect(&em, &spec, 1, SECOND_PS / 100, 8, Exec::default()).unwrap();
        assert!(!tags.is_empty());
        assert!(tags.windows(2).all(|w| w[0].time_ps <= w[1].time_ps));
        assert!(tags.iter().all(|t| t.time_ps % 84 == 0));
        // dead time respected on the quantised grid up to one tick
        assert!(tags.windows(2).all(|w| w[1].time_ps - w[0].time_ps + 84 >= 50_000));
    }

    #[test]
    fn jitter_does_not_shift() {
        // well separated emissions so every tag maps back to its photon
        let em: Vec<f64> = (0..200_000).map(|i| 1e6 * i as f64 + 5e5).collect();
        let spec = DetectorSpec { jitter_sigma_ps: 247.5, ..DetectorSpec::ideal(84) };
        let tags = detect(&em, &spec, 0, 200_000 * 1_000_000, 9, Exec::default()).unwrap();
        assert_eq!(tags.len(), em.len());
        let diffs: Vec<f64> = tags.iter().zip(&em).map(|(t, e)| t.time_ps as f64 - e).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean}");
        // quantisation adds tick²/12 to the variance
        let expected = (247.5f64.powi(2) + 84f64.powi(2) / 12.0).sqrt();
        assert!((sd / expected - 1.0).abs() < 0.01, "sd {sd}");
    }

    #[test]
    fn gating_keeps_only_open_windows() {
        let em = poisson_emissions(1e8, 0.001, 10);
        let gate = Gate { period_ns: 10.0, width_ns: 1.0, offset_ns: 0.0 };
        let spec = DetectorSpec { gate: Some(gate), ..DetectorSpec::ideal(1) };
        let tags = detect(&em, &spec, 0, SECOND_PS / 1000, 11, Exec::default()).unwrap();
        assert!(tags.iter().all(|t| t.time_ps % 10_000 <= 1_000));
        let frac = tags.len() as f64 / em.len() as f64;
        assert!((frac - 0.1).abs() < 0.005, "{frac}");
    }

    #[test]
    fn unsorted_input_rejected() {
        assert!(detect(&[5.0, 1.0], &DetectorSpec::default(), 0, 100, 0, Exec::Sequential).is_err());
    }

    #[test]
    fn invalid_spec_rejected() {
        let em = [1.0];
        for spec in [
            DetectorSpec { efficiency: 1.5, ..Default::default() },
            DetectorSpec { tick_ps: 0, ..Default::default() },
            DetectorSpec { gate: Some(Gate { period_ns: 1.0, width_ns: 2.0, offset_ns: 0.0 }), ..Default::default() },
        ] {
            assert!(detect(&em, &spec, 0, 100, 0, Exec::Sequential).is_err());
        }
    }

    #[test]
    fn deterministic_across_strategies() {
        let em = poisson_emissions(3e7, 0.004, 12);
        let spec = DetectorSpec { gate: None, dead_time_ns: 10.0, ..Default::default() };
        let a = detect(&em, &spec, 0, SECOND_PS / 200, 13, Exec::Sequential).unwrap();
        let b = detect(&em, &spec, 0, SECOND_PS / 200, 13, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pairwise_jitter_examples() {
        let a = DetectorSpec { jitter_sigma_ps: 247.5, ..Default::default() };
        assert!((pairwise_jitter(&a, &a) - 350.0).abs() < 0.1);
        let zero = DetectorSpec { jitter_sigma_ps: 0.0, ..Default::default() };
        assert_eq!(pairwise_jitter(&a, &zero), 247.5);
        let x = DetectorSpec { jitter_sigma_ps: 300.0, ..Default::default() };
        let y = DetectorSpec { jitter_sigma_ps: 400.0, ..Default::default() };
        assert!((pairwise_jitter(&x, &y) - 500.0).abs() < 1e-9);
    }
}
