use std::path::{Path, PathBuf};

use biphoton::correlation::{autocorrelate_hbt, background_correct, coincidence_count, cross_correlate, CorrelationParams, Histogram};
use biphoton::fitting::{fit_double_exponential, fit_lorentzian, FitResult};
use biphoton::franson::{effective_visibility, entanglement_verdict, fringe_scan, uniform_phases, FringeTable, Verdict};
use biphoton::pipeline::{channel_stream, log_log_slope, power_scan, simulate, PowerPoint, IDLER_CHANNEL, SIGNAL_CHANNEL};
use biphoton::resonator::{thermal_shift, transmission_scan, wavelength_shift_to_frequency_mhz, ScanRange};
use biphoton::source::pair_rate;
use biphoton::tagstream::{merge, TagStream};
use biphoton::textfmt::sig;
use biphoton::Exec;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{usage, CliError, CliResult};

pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn create(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Output { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> CliResult<()> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| CliError::io(&p, e))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        self.write(name, &(serde_json::to_string_pretty(value).expect("serialisable") + "\n"))
    }
}

fn require_converged(fit: &FitResult, what: &str) -> CliResult<()> {
    if fit.converged {
        Ok(())
    } else {
        Err(CliError::Fit(format!("{what}: {}", fit.message.as_deref().unwrap_or("no convergence"))))
    }
}

fn fit_failed(what: &str, err: biphoton::Error) -> CliError {
    CliError::Fit(format!("{what}: {err}"))
}

pub struct ScanFlags {
    pub noise: Option<f64>,
    pub mode: Option<i32>,
    pub temperatures: Option<Vec<f64>>,
}

pub fn scan(cfg: &ExperimentConfig, flags: &ScanFlags, out: &Output, exec: Exec) -> CliResult<()> {
    let noise = flags.noise.unwrap_or(cfg.scan.noise_rms);
    let mode = flags.mode.unwrap_or(cfg.scan.mode_index);
    let temps = flags.temperatures.clone().unwrap_or_else(|| cfg.scan.temperatures_k.clone());
    let res = &cfg.resonator;

    let line = res.line(mode)?;
    let range = ScanRange::around(&line, cfg.scan.half_widths, cfg.scan.points_per_fwhm);
    let table = transmission_scan(res, mode, range, noise, cfg.run.seed, exec)?;
    out.write("scan.csv", &table.to_csv())?;
    let fit = fit_lorentzian(&table).map_err(|e| fit_failed("lorentzian", e))?;
    out.write_json(
        "scan_fit.json",
        &json!({
            "mode_index": mode,
            "noise_rms": noise,
            "expected_center_thz": line.center_thz,
            "expected_fwhm_mhz": line.fwhm_mhz,
            "fit": fit,
        }),
    )?;
    require_converged(&fit, "lorentzian")?;

    if !temps.is_empty() {
        let mut csv = String::from("delta_k,temperature_c,wavelength_nm,shift_pm,shift_mhz,fitted_wavelength_nm,fitted_shift_pm\n");
        let base_nm = line.wavelength_nm();
        for (k, &dk) in temps.iter().enumerate() {
            let warm = res.at_temperature_offset(dk);
            let l = warm.line(mode)?;
            let shift_pm = thermal_shift(res, dk);
            // follow the line, as one would with the laser
            let r = ScanRange::around(&l, cfg.scan.half_widths, cfg.scan.points_per_fwhm);
            let t = transmission_scan(&warm, mode, r, noise, biphoton::rng::point_seed(cfg.run.seed, k as u64 + 1), exec)?;
            let f = fit_lorentzian(&t).map_err(|e| fit_failed("thermal scan", e))?;
            require_converged(&f, "thermal scan")?;
            let fitted_nm = biphoton::resonator::SPEED_OF_LIGHT_NM_THZ / f.param("center_thz");
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                sig(dk, 12),
                sig(warm.base_temperature_c, 12),
                sig(l.wavelength_nm(), 12),
                sig(shift_pm, 12),
                sig(wavelength_shift_to_frequency_mhz(base_nm, shift_pm), 12),
                sig(fitted_nm, 12),
                sig((fitted_nm - base_nm) * 1e3, 12),
            ));
        }
        out.write("thermal.csv", &csv)?;
    }
    Ok(())
}

fn coincidence_window_ps(cfg: &ExperimentConfig) -> u64 {
    let ns = cfg.correlation.coincidence_window_ns.unwrap_or(4.0 * cfg.source.tau_ns);
    (ns * 1e3).round().max(1.0) as u64
}

pub fn simulate_cmd(cfg: &ExperimentConfig, duration: Option<f64>, out: &Output, exec: Exec) -> CliResult<()> {
    let duration_s = duration.unwrap_or(cfg.run.duration_s);
    let (sd, id) = (&cfg.detectors.signal, &cfg.detectors.idler);
    let seed = cfg.run.seed;
    let sim = simulate(&cfg.source, sd, id, None, duration_s, seed, exec)?;
    let signal = channel_stream(&sim.signal, sd.tick_ps, sim.duration_ps);
    let idler = channel_stream(&sim.idler, id.tick_ps, sim.duration_ps);
    signal.write_file(out.path("signal.bpts"))?;
    idler.write_file(out.path("idler.bpts"))?;

    let window = coincidence_window_ps(cfg);
    let c = coincidence_count(&sim.signal_times(), &sim.idler_times(), window, 0, sim.duration_ps)?;
    let dark = |tags: &[biphoton::tagstream::TimeTag]| tags.iter().filter(|t| t.is_dark()).count();
    out.write_json(
        "manifest.json",
        &json!({
            "seed": seed,
            "duration_s": duration_s,
            "duration_ps": sim.duration_ps,
            "model_pair_rate": pair_rate(&cfg.source),
            "pairs_generated": sim.pairs_generated,
            "channels": [
                {"file": "signal.bpts", "channel": SIGNAL_CHANNEL, "tick_ps": sd.tick_ps, "tags": sim.signal.len(), "dark_tags": dark(&sim.signal)},
                {"file": "idler.bpts", "channel": IDLER_CHANNEL, "tick_ps": id.tick_ps, "tags": sim.idler.len(), "dark_tags": dark(&sim.idler)},
            ],
            "car": {
                "window_ps": window,
                "coincidences": c.coincidences,
                "accidentals": c.accidentals_estimate,
                "car": c.car,
            },
        }),
    )?;
    Ok(())
}

pub struct CorrelateFlags {
    pub files: Vec<PathBuf>,
    pub params: CorrelationParams,
    pub normalize: bool,
    pub background_correct: bool,
    pub fit: bool,
    /// Autocorrelate this channel through a virtual splitter.
    pub hbt: Option<u16>,
    pub split: f64,
    pub seed: u64,
}

fn read_streams(files: &[PathBuf]) -> CliResult<TagStream> {
    if files.is_empty() {
        return Err(usage("correlate needs at least one tag file"));
    }
    let mut streams = Vec::with_capacity(files.len());
    for f in files {
        let s = TagStream::read_file(f).map_err(|e| match e {
            biphoton::Error::Io(io) => CliError::io(f, io),
            other => CliError::Data(format!("{}: {other}", f.display())),
        })?;
        streams.push(s);
    }
    let tick = streams[0].header.tick_ps;
    if let Some((i, s)) = streams.iter().enumerate().find(|(_, s)| s.header.tick_ps != tick) {
        return Err(CliError::Data(format!(
            "tick mismatch: {} has {} ps, {} has {} ps",
            files[0].display(),
            tick,
            files[i].display(),
            s.header.tick_ps
        )));
    }
    Ok(merge(&streams)?)
}

pub fn correlate(flags: &CorrelateFlags, out: &Output, exec: Exec) -> CliResult<()> {
    flags.params.validate().map_err(|e| usage(e.to_string()))?;
    let stream = read_streams(&flags.files)?;
    let dur = stream.header.duration_ps;
    let h: Histogram = match flags.hbt {
        Some(ch) => {
            let times = stream.channel_times(ch);
            if times.is_empty() {
                return Err(CliError::Data(format!("channel {ch} has no tags")));
            }
            autocorrelate_hbt(&times, dur, flags.split, &flags.params, flags.seed, exec)?
        }
        None => {
            let a = stream.channel_times(SIGNAL_CHANNEL);
            let b = stream.channel_times(IDLER_CHANNEL);
            if a.is_empty() || b.is_empty() {
                return Err(CliError::Data("cross-correlation needs tags on channels 0 and 1".into()));
            }
            cross_correlate(&a, &b, dur, &flags.params, exec)?
        }
    };
    out.write("histogram.csv", &h.to_csv())?;

    let mut meta = json!({
        "mode": if flags.hbt.is_some() { "hbt" } else { "cross" },
        "tick_ps": stream.header.tick_ps,
        "bin_width_ps": h.bin_width_ps,
        "span_ps": flags.params.span_ps,
        "center_offset_ps": h.center_offset_ps,
        "bins": h.counts.len(),
        "total": h.total(),
        "acquisition_time_s": h.acquisition_time_s,
        "rate_a": h.rate_a,
        "rate_b": h.rate_b,
    });
    if flags.normalize {
        meta["accidental_level"] = json!(h.accidental_level());
        meta["g2_zero"] = json!(h.g2_zero(0).map_err(|e| CliError::Data(e.to_string()))?);
        meta["g2_zero_3bins"] = json!(h.g2_zero(1).map_err(|e| CliError::Data(e.to_string()))?);
    }
    if flags.background_correct {
        let c = background_correct(&h).map_err(|e| CliError::Data(e.to_string()))?;
        let mut csv = String::from("delay_ps,corrected\n");
        for (d, v) in c.delays_ps().into_iter().zip(&c.values) {
            csv.push_str(&format!("{d},{}\n", sig(*v, 12)));
        }
        out.write("histogram_corrected.csv", &csv)?;
        meta["background"] = json!({
            "per_bin": c.background,
            "wing_threshold_ps": c.wing_threshold_ps,
            "peak_delay_ps": c.peak_delay_ps,
            "peak_area": c.peak_area,
        });
    }
    let mut fit_error = None;
    if flags.fit {
        let fit = fit_double_exponential(&h).map_err(|e| fit_failed("double exponential", e))?;
        if let Err(e) = require_converged(&fit, "double exponential") {
            fit_error = Some(e);
        }
        meta["fit"] = serde_json::to_value(&fit).expect("serialisable");
    }
    out.write_json("histogram.json", &meta)?;
    fit_error.map_or(Ok(()), Err)
}

pub struct PowerFlags {
    pub powers: Option<Vec<f64>>,
    pub duration: Option<f64>,
    pub window_ns: Option<f64>,
}

fn slope_json(x: &[f64], y: &[f64]) -> CliResult<serde_json::Value> {
    let fit = log_log_slope(x, y).map_err(|e| fit_failed("log-log slope", e))?;
    require_converged(&fit, "log-log slope")?;
    Ok(json!({"slope": fit.param("slope"), "slope_stderr": fit.error("slope"), "fit": fit}))
}

pub fn powerscan(cfg: &ExperimentConfig, flags: &PowerFlags, out: &Output, exec: Exec) -> CliResult<()> {
    let powers = flags.powers.clone().unwrap_or_else(|| cfg.powerscan.powers_mw.clone());
    if powers.len() < 2 {
        return Err(usage(format!("a power scan needs at least two powers, got {}", powers.len())));
    }
    let duration = flags.duration.or(cfg.powerscan.duration_s).unwrap_or(cfg.run.duration_s);
    let window_ns = flags.window_ns.or(cfg.powerscan.window_ns).unwrap_or(10.0 * cfg.source.tau_ns);
    let window_ps = (window_ns * 1e3).round().max(1.0) as u64;
    let points = power_scan(
        &cfg.source,
        &cfg.detectors.signal,
        &cfg.detectors.idler,
        &powers,
        duration,
        window_ps,
        cfg.run.seed,
        exec,
    )?;
    let mut csv = String::from(PowerPoint::CSV_HEADER);
    csv.push('\n');
    for p in &points {
        csv.push_str(&p.csv_row());
        csv.push('\n');
    }
    out.write("powerscan.csv", &csv)?;

    let col = |f: fn(&PowerPoint) -> f64| points.iter().map(f).collect::<Vec<f64>>();
    let last = points.last().expect("at least two points");
    out.write_json(
        "powerscan_fit.json",
        &json!({
            "duration_s": duration,
            "window_ps": window_ps,
            "signal": slope_json(&powers, &col(|p| p.signal_rate))?,
            "idler": slope_json(&powers, &col(|p| p.idler_rate))?,
            "coincidences": slope_json(&powers, &col(|p| p.coincidence_rate))?,
            "max_power": {
                "power_mw": last.power_mw,
                "inferred_pair_rate": last.inferred_pair_rate,
                "model_pair_rate": last.model_pair_rate,
            },
        }),
    )?;
    Ok(())
}

pub struct FransonFlags {
    pub phases: Option<Vec<f64>>,
    pub duration: Option<f64>,
}

/// Wilson–Hilferty normal score of a χ² statistic with `k` degrees of
/// freedom.
fn chi_square_z(chi2: f64, k: f64) -> f64 {
    let a = 2.0 / (9.0 * k);
    ((chi2 / k).cbrt() - (1.0 - a)) / a.sqrt()
}

/// Scatter of one side peak across the phase points, compared to Poisson.
fn side_peak_stats(counts: &[u64]) -> serde_json::Value {
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<u64>() as f64 / n;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean.max(1.0)).sum();
    json!({"mean": mean, "chi_square": chi2, "dof": n - 1.0, "z": chi_square_z(chi2, n - 1.0)})
}

/// Fitted centre of the peak near `expected_ps`, using only bins within
/// `half_window_ps` of it.
fn peak_position(h: &Histogram, expected_ps: i64, half_window_ps: i64) -> CliResult<serde_json::Value> {
    let w = h.bin_width_ps as i64;
    let mid = (h.counts.len() / 2) as i64;
    let centre = mid + (expected_ps - h.center_offset_ps) / w;
    let k = half_window_ps / w;
    let (lo, hi) = (centre - k, centre + k);
    if lo < 0 || hi >= h.counts.len() as i64 {
        return Err(CliError::Data(format!("peak at {expected_ps} ps lies outside the histogram")));
    }
    let sub = Histogram {
        counts: h.counts[lo as usize..=hi as usize].to_vec(),
        center_offset_ps: h.center_offset_ps + (centre - mid) * w,
        ..h.clone()
    };
    let fit = fit_double_exponential(&sub).map_err(|e| fit_failed("peak position", e))?;
    Ok(json!({
        "expected_ps": expected_ps,
        "delay_ps": fit.param("center_ns") * 1e3,
        "delay_stderr_ps": fit.error("center_ns") * 1e3,
        "converged": fit.converged,
    }))
}

pub fn franson(cfg: &ExperimentConfig, flags: &FransonFlags, out: &Output, exec: Exec) -> CliResult<()> {
    let (setup, fc) = cfg.franson_setup()?;
    let phases = flags.phases.clone().unwrap_or_else(|| uniform_phases(fc.phases));
    if phases.len() < 6 {
        return Err(usage(format!("a fringe needs at least 6 phase points, got {}", phases.len())));
    }
    let duration = flags.duration.or(fc.duration_s).unwrap_or(cfg.run.duration_s);
    let table: FringeTable = fringe_scan(&setup, &phases, duration, cfg.run.seed, exec)?;
    out.write("fringe.csv", &table.to_csv())?;
    out.write("franson_histogram.csv", &table.histogram.to_csv())?;

    let fit = table.fit().map_err(|e| fit_failed("sinusoid", e))?;
    let verdict: Option<Verdict> = if fit.converged {
        let v = fit.param("visibility").clamp(0.0, 1.0);
        Some(entanglement_verdict(v, fit.error("visibility"))?)
    } else {
        None
    };
    let dt_ps = (table.delta_t_ns * 1e3).round() as i64;
    let minus: Vec<u64> = table.rows.iter().map(|r| r.side_minus).collect();
    let plus: Vec<u64> = table.rows.iter().map(|r| r.side_plus).collect();
    out.write_json(
        "franson.json",
        &json!({
            "phases": phases.len(),
            "duration_s_per_point": duration,
            "delta_t_ns": table.delta_t_ns,
            "bin_width_ps": table.histogram.bin_width_ps,
            "model_visibility": effective_visibility(&setup.interferometer, &setup.state),
            "visibility": fit.param("visibility"),
            "visibility_stderr": fit.error("visibility"),
            "raw_visibility": fit.param("raw_visibility"),
            "fit": fit,
            "verdict": verdict,
            "peaks": [
                peak_position(&table.histogram, -dt_ps, dt_ps / 2)?,
                peak_position(&table.histogram, 0, dt_ps / 2)?,
                peak_position(&table.histogram, dt_ps, dt_ps / 2)?,
            ],
            "side_minus": side_peak_stats(&minus),
            "side_plus": side_peak_stats(&plus),
        }),
    )?;
    require_converged(&fit, "sinusoid")
}

#[cfg(test)]
mod tests {
    use super::chi_square_z;

    #[test]
    fn wilson_hilferty_median() {
        // the median of χ²_k is close to k(1 − 2/(9k))³
        let k = 11.0f64;
        let median = k * (1.0 - 2.0 / (9.0 * k)).powi(3);
        assert!(chi_square_z(median, k).abs() < 1e-12);
        // 99.865th percentile of χ²_11 is about 30.8
        assert!((chi_square_z(30.8, k) - 3.0).abs() < 0.1);
    }
}
