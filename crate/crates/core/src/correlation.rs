//! Coincidence analysis on time-tag channels.
//!
//! Delays are `t_b - t_a - center_offset`, binned symmetrically about zero:
//! bin `k` holds delays whose magnitude rounds (half away from zero) to
//! `|k|·bin_width`. Swapping the two channels therefore mirrors the
//! histogram bin-for-bin.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};
use crate::exec::Exec;
use crate::rng::{stage_rng, Stage};
use crate::textfmt;

const SWEEP_CHUNK: usize = 1 << 15;
const SPLIT_CHUNK: usize = 1 << 16;
/// Wing bins must sit this many estimated peak widths away from the peak.
const WING_FACTOR: f64 = 10.0;
const MIN_WING_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationParams {
    pub bin_width_ps: u64,
    /// Half range: delays in ±span are histogrammed.
    pub span_ps: u64,
    pub center_offset_ps: i64,
}

impl Default for CorrelationParams {
    fn default() -> Self {
        CorrelationParams { bin_width_ps: 84, span_ps: 50_000, center_offset_ps: 0 }
    }
}

impl CorrelationParams {
    pub fn validate(&self) -> Result<()> {
        if self.bin_width_ps == 0 {
            return Err(invalid_input("bin width must be positive"));
        }
        if self.span_ps < self.bin_width_ps {
            return Err(invalid_input("span must be at least one bin width"));
        }
        Ok(())
    }

    pub fn half_bins(&self) -> usize {
        (self.span_ps / self.bin_width_ps) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width_ps: u64,
    pub center_offset_ps: i64,
    /// Odd length; the middle entry is zero delay.
    pub counts: Vec<u64>,
    pub acquisition_time_s: f64,
    pub rate_a: f64,
    pub rate_b: f64,
}

/// Signed bin index of a delay, rounding |delay|/width half away from zero.
#[inline]
pub fn bin_index(delay_ps: i64, bin_width_ps: u64) -> i64 {
    let w = bin_width_ps as i64;
    let k = (2 * delay_ps.abs() + w) / (2 * w);
    if delay_ps < 0 {
        -k
    } else {
        k
    }
}

impl Histogram {
    pub fn half_bins(&self) -> usize {
        self.counts.len() / 2
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Bin-centre delays, ps.
    pub fn delays_ps(&self) -> Vec<i64> {
        let k = self.half_bins() as i64;
        (-k..=k).map(|i| i * self.bin_width_ps as i64 + self.center_offset_ps).collect()
    }

    /// Expected counts per bin for uncorrelated streams.
    pub fn accidental_level(&self) -> f64 {
        self.rate_a * self.rate_b * self.bin_width_ps as f64 * 1e-12 * self.acquisition_time_s
    }

    /// The histogram with the roles of the two channels exchanged.
    pub fn mirrored(&self) -> Histogram {
        let mut counts = self.counts.clone();
        counts.reverse();
        Histogram {
            counts,
            center_offset_ps: -self.center_offset_ps,
            rate_a: self.rate_b,
            rate_b: self.rate_a,
            ..*self
        }
    }

    /// g[k] = counts[k] / (r_a r_b Δ T).
    pub fn normalize(&self) -> Result<Vec<f64>> {
        if !(self.acquisition_time_s > 0.0) {
            return Err(invalid_input("acquisition time is zero"));
        }
        let level = self.accidental_level();
        if !(level > 0.0) {
            return Err(invalid_input("singles rates are zero"));
        }
        Ok(self.counts.iter().map(|&c| c as f64 / level).collect())
    }

    /// Standard error of each normalised bin (Poisson, σ = √max(n,1)).
    pub fn normalized_sigma(&self) -> Result<Vec<f64>> {
        let level = self.accidental_level();
        if !(level > 0.0) {
            return Err(invalid_input("singles rates are zero"));
        }
        Ok(self.counts.iter().map(|&c| (c.max(1) as f64).sqrt() / level).collect())
    }

    /// Mean normalised value over bins with |k| ≤ `half_width_bins`.
    pub fn g2_zero(&self, half_width_bins: usize) -> Result<f64> {
        let g = self.normalize()?;
        let mid = self.half_bins();
        let lo = mid.saturating_sub(half_width_bins);
        let hi = (mid + half_width_bins).min(g.len() - 1);
        Ok(g[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64)
    }

    /// `delay_ps,counts,g_normalized`; the last column is empty when the
    /// histogram cannot be normalised.
    pub fn to_csv(&self) -> String {
        let g = self.normalize().ok();
        let mut out = String::from("delay_ps,counts,g_normalized\n");
        for (i, (d, c)) in self.delays_ps().into_iter().zip(&self.counts).enumerate() {
            let gv = g.as_ref().map(|g| textfmt::sig(g[i], 12)).unwrap_or_default();
            out.push_str(&format!("{d},{c},{gv}\n"));
        }
        out
    }

    pub fn add(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

fn empty_histogram(params: &CorrelationParams, duration_ps: u64, n_a: usize, n_b: usize) -> Histogram {
    let t = duration_ps as f64 * 1e-12;
    let rate = |n: usize| if t > 0.0 { n as f64 / t } else { 0.0 };
    Histogram {
        bin_width_ps: params.bin_width_ps,
        center_offset_ps: params.center_offset_ps,
        counts: vec![0; 2 * params.half_bins() + 1],
        acquisition_time_s: t,
        rate_a: rate(n_a),
        rate_b: rate(n_b),
    }
}

/// Two-pointer sweep over one block of `a`; `b` is the whole channel.
fn sweep(a: &[u64], b: &[u64], params: &CorrelationParams, counts: &mut [u64]) {
    let w = params.bin_width_ps as i64;
    let k_max = params.half_bins() as i64;
    // open interval of accepted shifted delays
    let reach = k_max * w + (w + 1) / 2;
    let c = params.center_offset_ps;
    let Some(&first) = a.first() else { return };
    let mut lo = b.partition_point(|&t| (t as i64) - (first as i64) - c <= -reach);
    for &ta in a {
        let ta = ta as i64;
        while lo < b.len() && (b[lo] as i64) - ta - c <= -reach {
            lo += 1;
        }
        let mut j = lo;
        while j < b.len() {
            let d = b[j] as i64 - ta - c;
            if d >= reach {
                break;
            }
            let k = bin_index(d, params.bin_width_ps);
            if k.abs() <= k_max {
                counts[(k + k_max) as usize] += 1;
            }
            j += 1;
        }
    }
}

/// Cross-correlation histogram of channel `b` against channel `a`.
/// Both slices must be sorted ascending.
pub fn cross_correlate(
    a: &[u64],
    b: &[u64],
    duration_ps: u64,
    params: &CorrelationParams,
    exec: Exec,
) -> Result<Histogram> {
    params.validate()?;
    if !a.is_sorted() || !b.is_sorted() {
        return Err(invalid_input("time tags must be sorted"));
    }
    let mut hist = empty_histogram(params, duration_ps, a.len(), b.len());
    let blocks: Vec<&[u64]> = a.chunks(SWEEP_CHUNK).collect();
    let partials = exec.map_slice(&blocks, |block| {
        let mut counts = vec![0u64; hist.counts.len()];
        sweep(block, b, params, &mut counts);
        counts
    });
    for part in partials {
        for (acc, v) in hist.counts.iter_mut().zip(part) {
            *acc += v;
        }
    }
    Ok(hist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedHistogram {
    pub bin_width_ps: u64,
    pub center_offset_ps: i64,
    pub values: Vec<f64>,
    /// Flat background that was subtracted per bin.
    pub background: f64,
    /// Bins farther than this from the peak were treated as wings.
    pub wing_threshold_ps: f64,
    pub peak_delay_ps: i64,
    /// Σ(counts − background) over the non-wing region, before clamping.
    pub peak_area: f64,
}

impl CorrectedHistogram {
    pub fn delays_ps(&self) -> Vec<i64> {
        let k = (self.values.len() / 2) as i64;
        (-k..=k).map(|i| i * self.bin_width_ps as i64 + self.center_offset_ps).collect()
    }

    pub fn background_correct(&self) -> Result<CorrectedHistogram> {
        correct(&self.values, self.delays_ps(), self.bin_width_ps, self.center_offset_ps)
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Peak position and 1/e half-width estimate (ps) from a lightly smoothed
/// baseline-subtracted histogram.
pub fn estimate_peak(values: &[f64], bin_width_ps: u64) -> (usize, f64) {
    let base = median(values);
    let n = values.len();
    let s = 3usize;
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(s);
            let hi = (i + s).min(n - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64 - base
        })
        .collect();
    let (peak, &height) = smooth
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty histogram");
    if height <= 0.0 {
        return (peak, bin_width_ps as f64);
    }
    let cut = height / std::f64::consts::E;
    let right = smooth[peak..].iter().position(|&v| v < cut).unwrap_or(n - peak);
    let left = smooth[..=peak].iter().rev().position(|&v| v < cut).unwrap_or(peak + 1);
    let width = right.max(left).max(1) as f64 * bin_width_ps as f64;
    (peak, width)
}

fn correct(values: &[f64], delays: Vec<i64>, bin_width_ps: u64, center_offset_ps: i64) -> Result<CorrectedHistogram> {
    if values.is_empty() {
        return Err(invalid_input("empty histogram"));
    }
    let (peak, width) = estimate_peak(values, bin_width_ps);
    let threshold = WING_FACTOR * width;
    let peak_delay = delays[peak];
    let wings: Vec<f64> = delays
        .iter()
        .zip(values)
        .filter(|(d, _)| ((**d - peak_delay) as f64).abs() > threshold)
        .map(|(_, v)| *v)
        .collect();
    if wings.len() < MIN_WING_BINS {
        return Err(invalid_input(format!(
            "only {} wing bins beyond {:.0} ps from the peak; widen the span",
            wings.len(),
            threshold
        )));
    }
    let background = wings.iter().sum::<f64>() / wings.len() as f64;
    let peak_area = delays
        .iter()
        .zip(values)
        .filter(|(d, _)| ((**d - peak_delay) as f64).abs() <= threshold)
        .map(|(_, v)| v - background)
        .sum();
    Ok(CorrectedHistogram {
        bin_width_ps,
        center_offset_ps,
        values: values.iter().map(|v| (v - background).max(0.0)).collect(),
        background,
        wing_threshold_ps: threshold,
        peak_delay_ps: peak_delay,
        peak_area,
    })
}

/// Subtracts the flat background estimated from the far wings.
pub fn background_correct(h: &Histogram) -> Result<CorrectedHistogram> {
    let values: Vec<f64> = h.counts.iter().map(|&c| c as f64).collect();
    correct(&values, h.delays_ps(), h.bin_width_ps, h.center_offset_ps)
}

/// Hanbury Brown–Twiss estimate: each tag is routed to sub-channel A with
/// probability `splitter_ratio`, otherwise to B, and B is correlated
/// against A.
pub fn autocorrelate_hbt(
    times: &[u64],
    duration_ps: u64,
    splitter_ratio: f64,
    params: &CorrelationParams,
    seed: u64,
    exec: Exec,
) -> Result<Histogram> {
    if !(0.0..=1.0).contains(&splitter_ratio) {
        return Err(invalid_input(format!("splitter ratio must be in [0,1], got {splitter_ratio}")));
    }
    let blocks: Vec<&[u64]> = times.chunks(SPLIT_CHUNK).collect();
    let routed = exec.map_range(blocks.len(), |c| {
        let mut rng = stage_rng(seed, Stage::Splitter, c as u64);
        let mut a = Vec::with_capacity(blocks[c].len());
        let mut b = Vec::with_capacity(blocks[c].len());
        for &t in blocks[c] {
            if rng.random::<f64>() < splitter_ratio {
                a.push(t);
            } else {
                b.push(t);
            }
        }
        (a, b)
    });
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (pa, pb) in routed {
        a.extend(pa);
        b.extend(pb);
    }
    cross_correlate(&a, &b, duration_ps, params, exec)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coincidences {
    pub coincidences: u64,
    pub accidentals_estimate: f64,
    /// (coincidences − accidentals) / accidentals.
    pub car: f64,
}

/// Counts pairs with |t_b − t_a − offset| ≤ window/2.
pub fn coincidence_count(a: &[u64], b: &[u64], window_ps: u64, offset_ps: i64, duration_ps: u64) -> Result<Coincidences> {
    if window_ps == 0 {
        return Err(invalid_input("coincidence window must be positive"));
    }
    if !a.is_sorted() || !b.is_sorted() {
        return Err(invalid_input("time tags must be sorted"));
    }
    let w = window_ps as i64;
    let mut count = 0u64;
    let mut lo = 0usize;
    for &ta in a {
        let ta = ta as i64;
        while lo < b.len() && 2 * (b[lo] as i64 - ta - offset_ps) < -w {
            lo += 1;
        }
        let mut j = lo;
        while j < b.len() && 2 * (b[j] as i64 - ta - offset_ps) <= w {
            count += 1;
            j += 1;
        }
    }
    let accidentals = if duration_ps > 0 {
        a.len() as f64 * b.len() as f64 * window_ps as f64 / duration_ps as f64
    } else {
        0.0
    };
    let car = if accidentals > 0.0 {
        (count as f64 - accidentals) / accidentals
    } else if count == 0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(Coincidences { coincidences: count, accidentals_estimate: accidentals, car })
}
