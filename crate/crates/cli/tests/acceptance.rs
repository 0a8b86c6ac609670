//! End-to-end acceptance checks, one line per criterion. Runs the release
//! pipeline through the `biphoton` binary wherever a command exists.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use biphoton::correlation::{cross_correlate, CorrelationParams};
use biphoton::fitting::{fit_line, DataPoint, SolverOptions};
use biphoton::tagstream::{decode, encode, TagHeader, TagStream, TimeTag};
use biphoton::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = Result<String, String>;

fn biphoton(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_biphoton"))
        .args(args)
        .env_remove("BIPHOTON_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`biphoton {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn num(v: &Value, pointer: &str) -> Result<f64, String> {
    v.pointer(pointer).and_then(Value::as_f64).ok_or_else(|| format!("missing {pointer}"))
}

fn preset(name: &str) -> Value {
    let out = Command::new(env!("CARGO_BIN_EXE_biphoton")).args(["presets", name]).output().expect("runs");
    serde_json::from_slice(&out.stdout).expect("preset is JSON")
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// simulate → correlate --fit on one config; returns (histogram.json, seconds).
fn correlation_run(dir: &Path, source: &[&str]) -> Result<(Value, f64), String> {
    let start = Instant::now();
    let mut sim = vec!["simulate", "--out", s(dir)];
    sim.extend_from_slice(source);
    biphoton(&sim)?;
    let (sig, idl) = (dir.join("signal.bpts"), dir.join("idler.bpts"));
    let mut cor = vec!["correlate", s(&sig), s(&idl), "--background-correct", "--fit", "--out", s(dir)];
    cor.extend_from_slice(source);
    biphoton(&cor)?;
    Ok((json(&dir.join("histogram.json"))?, start.elapsed().as_secs_f64()))
}

fn bandwidth_recovery(tmp: &Path) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, nominal) in [("fig2a", 150.0), ("fig2b", 90.0), ("fig2c", 60.0), ("fig2d", 30.0)] {
        let dir = tmp.join(name);
        let (h, secs) = correlation_run(&dir, &["--preset", name])?;
        let bw = num(&h, "/fit/derived/bandwidth_mhz")?;
        let area = num(&h, "/background/peak_area")?;
        let good = (bw / nominal - 1.0).abs() <= 0.10 && area >= 1e5 && secs < 60.0;
        ok &= good;
        lines.push(format!("{name} {bw:.1}/{nominal} MHz, {area:.0} coincidences, {secs:.1} s"));
    }
    ensure(ok, lines.join("; "))
}

fn jitter_robustness(tmp: &Path) -> Check {
    let with = json(&tmp.join("fig2a/histogram.json"))?;
    let mut cfg = preset("fig2a");
    for ch in ["signal", "idler"] {
        cfg["detectors"][ch]["jitter_sigma_ps"] = 0.0.into();
    }
    let dir = tmp.join("fig2a-nojitter");
    std::fs::create_dir_all(&dir).unwrap();
    let path = write_config(&dir, "nojitter.json", &cfg);
    let (without, _) = correlation_run(&dir, &["--config", s(&path)])?;
    let (t1, t0) = (num(&with, "/fit/params/tau_ns")?, num(&without, "/fit/params/tau_ns")?);
    let change = (t1 / t0 - 1.0).abs();
    ensure(change < 0.10, format!("tau {t1:.4} ns with 350 ps jitter vs {t0:.4} ns without, change {:.1}%", change * 100.0))
}

fn power_scaling(tmp: &Path) -> Check {
    let dir = tmp.join("fig4");
    biphoton(&["powerscan", "--preset", "fig4", "--out", s(&dir)])?;
    let fit = json(&dir.join("powerscan_fit.json"))?;
    let mut parts = Vec::new();
    let mut ok = true;
    for key in ["signal", "idler", "coincidences"] {
        let slope = num(&fit, &format!("/{key}/slope"))?;
        ok &= (slope - 2.0).abs() <= 0.1;
        parts.push(format!("{key} {slope:.3}"));
    }
    ensure(ok, format!("log-log slopes {}", parts.join(", ")))
}

fn brightness(tmp: &Path) -> Check {
    let dir = tmp.join("fig4");
    biphoton(&["simulate", "--preset", "fig4", "--out", s(&dir)])?;
    biphoton(&["report", s(&dir)])?;
    let r = json(&dir.join("report.json"))?;
    let inferred = num(&r, "/power_dependence/max_power/inferred_pair_rate")?;
    let power = num(&r, "/power_dependence/max_power/power_mw")?;
    let modal = num(&r, "/brightness/modal_brightness")?;
    let p01 = num(&r, "/brightness/power_for_0_1_pairs_per_mode_mw")?;
    let ok = power == 3.0
        && (inferred / 3.5e7 - 1.0).abs() <= 0.10
        && (modal - 0.0138).abs() < 5e-5
        && (modal / 0.015 - 1.0).abs() <= 0.15
        && (p01 - 2.5).abs() <= 0.2;
    ensure(
        ok,
        format!("inferred rate at {power} mW {inferred:.3e}/s, modal brightness {modal:.4}, 0.1 pairs/mode at {p01:.2} mW"),
    )
}

fn thermal_g2(tmp: &Path) -> Check {
    let mut results = BTreeMap::new();
    for mode in ["gaussian-field", "poisson-pairs"] {
        let mut cfg = preset("fig4");
        let ideal = serde_json::json!({
            "efficiency": 1.0, "path_loss_db": 0.0, "jitter_sigma_ps": 0.0, "dark_prob_per_ns": 0.0,
            "gate": null, "dead_time_ns": 0.0, "tick_ps": 84
        });
        cfg["detectors"] = serde_json::json!({"signal": ideal, "idler": ideal});
        cfg["source"]["mode"] = mode.into();
        // 1e8 pairs/s: the estimator variance falls as rate² while the
        // field simulation cost grows only with duration
        cfg["source"]["pump_power_mw"] = (1e8f64 / 3.9e6).sqrt().into();
        cfg["run"]["duration_s"] = 0.05.into();
        let dir = tmp.join(format!("hbt-{mode}"));
        std::fs::create_dir_all(&dir).unwrap();
        let path = write_config(&dir, "cfg.json", &cfg);
        biphoton(&["simulate", "--config", s(&path), "--out", s(&dir)])?;
        let tags = num(&json(&dir.join("manifest.json"))?, "/channels/0/tags")?;
        let sig = dir.join("signal.bpts");
        biphoton(&["correlate", s(&sig), "--hbt", "0", "--normalize", "--span", "20000", "--out", s(&dir)])?;
        let g2 = num(&json(&dir.join("histogram.json"))?, "/g2_zero")?;
        results.insert(mode, (g2, tags));
    }
    let (thermal, nt) = results["gaussian-field"];
    let (poisson, np) = results["poisson-pairs"];
    let ok = (thermal - 2.0).abs() <= 0.1 && (poisson - 1.0).abs() <= 0.05 && nt >= 1e6 && np >= 1e6;
    ensure(ok, format!("g2(0) thermal {thermal:.3} ({nt:.0} tags), poisson {poisson:.3} ({np:.0} tags)"))
}

fn thermal_tuning(tmp: &Path) -> Check {
    let dir = tmp.join("fig3");
    biphoton(&["scan", "--preset", "fig3", "--out", s(&dir)])?;
    let text = std::fs::read_to_string(dir.join("thermal.csv")).map_err(|e| e.to_string())?;
    let mut rows = BTreeMap::new();
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        rows.insert(v[0].to_bits(), v);
    }
    let r14 = rows.get(&14f64.to_bits()).ok_or("no 14 K row")?;
    let r005 = rows.get(&0.05f64.to_bits()).ok_or("no 0.05 K row")?;
    let ok = (r14[3] - 21.90 * 14.0).abs() < 1e-9
        && (r14[6] - 306.6).abs() <= 10.0
        && (r005[3] - 1.095).abs() < 1e-9
        && (r005[4] - 137.0).abs() <= 2.0
        && r005[4] < 1000.0;
    ensure(
        ok,
        format!(
            "14 K: {} pm model, {:.2} pm fitted; 0.05 K: {} pm = {:.1} MHz",
            r14[3], r14[6], r005[3], r005[4]
        ),
    )
}

fn fringe_checks(f: &Value, bin: f64) -> Result<(bool, String), String> {
    let mut ok = true;
    let mut peaks = Vec::new();
    for i in 0..3 {
        let d = num(f, &format!("/peaks/{i}/delay_ps"))?;
        let e = num(f, &format!("/peaks/{i}/expected_ps"))?;
        ok &= (d - e).abs() <= bin;
        peaks.push(format!("{:.0}", d - e));
    }
    let zm = num(f, "/side_minus/z")?;
    let zp = num(f, "/side_plus/z")?;
    ok &= zm < 3.0 && zp < 3.0;
    Ok((ok, format!("peak offsets {} ps, side-peak z {zm:.2}/{zp:.2}", peaks.join("/"))))
}

fn franson(tmp: &Path) -> Check {
    let ideal_dir = tmp.join("fig5-ideal");
    biphoton(&["franson", "--preset", "fig5-ideal", "--out", s(&ideal_dir)])?;
    let ideal = json(&ideal_dir.join("franson.json"))?;
    let lossy_dir = tmp.join("fig5-paper");
    biphoton(&["franson", "--preset", "fig5-paper", "--out", s(&lossy_dir)])?;
    let lossy = json(&lossy_dir.join("franson.json"))?;

    let vi = num(&ideal, "/visibility")?;
    let vp = num(&lossy, "/visibility")?;
    let sp = num(&lossy, "/visibility_stderr")?;
    let classical = num(&lossy, "/verdict/classical_margin_sigma")?;
    let chsh = num(&lossy, "/verdict/chsh_margin_sigma")?;
    let bin = num(&lossy, "/bin_width_ps")?;
    let (ok_i, peaks_i) = fringe_checks(&ideal, bin)?;
    let (ok_p, peaks_p) = fringe_checks(&lossy, bin)?;
    let ok = vi >= 0.99 && (vp - 0.90).abs() <= 0.07 && classical > 5.0 && chsh > 2.0 && ok_i && ok_p;
    ensure(
        ok,
        format!(
            "ideal V {vi:.4} ({peaks_i}); lossy V {vp:.3} ± {sp:.3}, {classical:.1}σ over 1/2, {chsh:.1}σ over 1/√2 ({peaks_p})"
        ),
    )
}

fn brute_force(a: &[u64], b: &[u64], p: &CorrelationParams) -> Vec<u64> {
    let k_max = (p.span_ps / p.bin_width_ps) as i64;
    let mut counts = vec![0u64; 2 * k_max as usize + 1];
    for &ta in a {
        for &tb in b {
            let d = tb as i64 - ta as i64 - p.center_offset_ps;
            // f64::round rounds halves away from zero
            let k = (d as f64 / p.bin_width_ps as f64).round() as i64;
            if k.abs() <= k_max {
                counts[(k + k_max) as usize] += 1;
            }
        }
    }
    counts
}

fn sorted_times(rng: &mut ChaCha8Rng, n: usize, max: u64) -> Vec<u64> {
    let mut v: Vec<u64> = (0..n).map(|_| rng.random_range(0..max)).collect();
    v.sort_unstable();
    v
}

fn oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    // correlator against the quadratic definition
    for case in 0..100 {
        let span_t = rng.random_range(1_000..200_000u64);
        let (na, nb) = (rng.random_range(0..=1000), rng.random_range(0..=1000));
        let a = sorted_times(&mut rng, na, span_t);
        let b = sorted_times(&mut rng, nb, span_t);
        let bin = rng.random_range(1..200u64);
        let p = CorrelationParams {
            bin_width_ps: bin,
            span_ps: bin * rng.random_range(1..80u64),
            center_offset_ps: rng.random_range(-2_000..2_000i64),
        };
        let exec = if case % 2 == 0 { Exec::Sequential } else { Exec::Parallel };
        let h = cross_correlate(&a, &b, span_t, &p, exec).map_err(|e| e.to_string())?;
        if h.counts != brute_force(&a, &b, &p) {
            return Err(format!("correlator differs from brute force in case {case}"));
        }
    }

    // least squares against centred closed-form regression
    let n = 50;
    let pts: Vec<DataPoint> = (0..n)
        .map(|i| {
            let x = i as f64 * 0.37 - 4.0;
            DataPoint::new(x, 1.7 * x - 0.6 + rng.random_range(-0.5..0.5), 1.0)
        })
        .collect();
    let nf = n as f64;
    let mx = pts.iter().map(|d| d.x).sum::<f64>() / nf;
    let my = pts.iter().map(|d| d.y).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|d| (d.x - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|d| (d.x - mx) * (d.y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let fit = fit_line(&pts, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let ls_err = (fit.param("slope") - slope).abs().max((fit.param("intercept") - intercept).abs());
    if ls_err > 1e-10 {
        return Err(format!("least squares off closed form by {ls_err:.2e}"));
    }

    // accidentals on independent uniform streams
    let t = 1_000_000_000_000u64;
    let a = sorted_times(&mut rng, 1_000_000, t);
    let b = sorted_times(&mut rng, 1_000_000, t);
    let p = CorrelationParams { bin_width_ps: 84, span_ps: 50_000, center_offset_ps: 0 };
    let h = cross_correlate(&a, &b, t, &p, Exec::default()).map_err(|e| e.to_string())?;
    let expected = h.accidental_level() * h.counts.len() as f64;
    let acc_z = (h.total() as f64 - expected) / expected.sqrt();
    if acc_z.abs() > 4.0 {
        return Err(format!("accidentals {} vs r_a r_b Δ T = {expected:.0} ({acc_z:.2}σ)", h.total()));
    }

    // tagstream round trip
    for case in 0..1000 {
        let tick = rng.random_range(1..200u64);
        let n = rng.random_range(0..200usize);
        let duration_ps = tick * rng.random_range(1..1_000_000u64);
        let mut records: Vec<TimeTag> = (0..n)
            .map(|_| TimeTag {
                time_ps: tick * rng.random_range(0..=duration_ps / tick),
                channel: rng.random_range(0..4u16),
                flags: rng.random_range(0..2u16),
            })
            .collect();
        records.sort_unstable();
        let stream = TagStream::new(TagHeader { tick_ps: tick, duration_ps, channel_count: 4 }, records);
        let bytes = encode(&stream).map_err(|e| e.to_string())?;
        let back = decode(&bytes).map_err(|e| e.to_string())?;
        if back != stream || encode(&back).map_err(|e| e.to_string())? != bytes {
            return Err(format!("tag stream round trip failed in case {case}"));
        }
    }
    Ok(format!(
        "100 correlator cases bin-exact, line fit within {ls_err:.1e}, accidentals at {acc_z:.2}σ, 1000 tag streams round-trip"
    ))
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

/// One pass over every command into `dir`.
fn run_set(dir: &Path, extra: &[&str]) -> Result<(), String> {
    let d = s(dir);
    let run = |args: &[&str]| {
        let mut v = args.to_vec();
        v.extend_from_slice(extra);
        biphoton(&v)
    };
    run(&["scan", "--preset", "fig3", "--out", d])?;
    run(&["simulate", "--preset", "fig2b", "--duration", "0.5", "--out", d])?;
    let (sig, idl) = (dir.join("signal.bpts"), dir.join("idler.bpts"));
    run(&["correlate", s(&sig), s(&idl), "--normalize", "--background-correct", "--fit", "--out", d])?;
    run(&["powerscan", "--preset", "fig4", "--duration", "0.1", "--out", d])?;
    run(&["franson", "--preset", "fig5-ideal", "--duration", "0.05", "--out", d])?;
    biphoton(&["report", d])
}

fn determinism(tmp: &Path) -> Check {
    let mut checked = 0;
    let (a, b) = (tmp.join("det-a"), tmp.join("det-b"));
    run_set(&a, &[])?;
    run_set(&b, &["--sequential"])?;
    let (fa, fb) = (files(&a), files(&b));
    if fa.keys().ne(fb.keys()) {
        return Err("runs produced different file sets".into());
    }
    for (name, bytes) in &fa {
        if fb[name] != *bytes {
            return Err(format!("{name} differs between runs"));
        }
        checked += 1;
    }
    Ok(format!("{checked} artifacts of scan/simulate/correlate/powerscan/franson/report byte-identical, parallel vs sequential"))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let criteria: [(&str, &dyn Fn() -> Check); 9] = [
        ("bandwidth recovery", &|| bandwidth_recovery(root)),
        ("jitter robustness", &|| jitter_robustness(root)),
        ("quadratic power scaling", &|| power_scaling(root)),
        ("brightness arithmetic", &|| brightness(root)),
        ("thermal autocorrelation", &|| thermal_g2(root)),
        ("thermal tuning", &|| thermal_tuning(root)),
        ("Franson fringe", &|| franson(root)),
        ("oracle equivalences", &oracles),
        ("determinism", &|| determinism(root)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {} PASS {name}: {detail} [{secs:.1} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {detail} [{secs:.1} s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} acceptance criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} acceptance criteria passed", criteria.len());
}
