//! Consolidates the artifacts of a run directory into report.json and
//! report.md. Only command outputs are read, never earlier reports, so
//! regenerating is idempotent.

use std::fmt::Write as _;
use std::path::Path;

use biphoton::source::{modal_brightness, pair_rate, power_for_pairs_per_mode, spectral_brightness};
use serde_json::{json, Map, Value};

use crate::commands::Output;
use crate::config::ExperimentConfig;
use crate::error::{usage, CliError, CliResult};

/// Figure quoted for the same source, s⁻¹ mW⁻² MHz⁻¹.
const QUOTED_SPECTRAL_BRIGHTNESS: f64 = 4.3e5;
const QUOTED_MODAL_BRIGHTNESS: f64 = 0.015;

const ARTIFACTS: [&str; 6] =
    ["config.json", "scan_fit.json", "manifest.json", "histogram.json", "powerscan_fit.json", "franson.json"];

fn read_json(dir: &Path, name: &str) -> CliResult<Option<Value>> {
    let p = dir.join(name);
    match std::fs::read_to_string(&p) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::io(&p, e)),
    }
}

fn brightness(cfg: &ExperimentConfig) -> Value {
    let s = &cfg.source;
    let bw = s.bandwidth_mhz();
    let spectral = spectral_brightness(s.brightness_cal, bw);
    json!({
        "bandwidth_mhz": bw,
        "pump_power_mw": s.pump_power_mw,
        "pair_rate": pair_rate(s),
        "brightness_cal": s.brightness_cal,
        "modal_brightness": modal_brightness(s.brightness_cal, bw),
        "quoted_modal_brightness": QUOTED_MODAL_BRIGHTNESS,
        "power_for_0_1_pairs_per_mode_mw": power_for_pairs_per_mode(s.brightness_cal, bw, 0.1),
        "pairs_per_mode": s.pairs_per_mode(),
        "spectral_brightness": spectral,
        "quoted_spectral_brightness": QUOTED_SPECTRAL_BRIGHTNESS,
        "spectral_ratio": QUOTED_SPECTRAL_BRIGHTNESS / spectral,
        "note": format!(
            "spectral brightness here is the pair rate per mW² divided by the FWHM bandwidth: {:.3e} s⁻¹mW⁻²MHz⁻¹. \
             The quoted {:.1e} is {:.1}x larger and does not follow from the quoted pair rate and bandwidth.",
            spectral,
            QUOTED_SPECTRAL_BRIGHTNESS,
            QUOTED_SPECTRAL_BRIGHTNESS / spectral
        ),
    })
}

fn num(v: &Value, path: &[&str]) -> Option<f64> {
    let mut cur = v;
    for p in path {
        cur = cur.get(p)?;
    }
    cur.as_f64()
}

fn line(md: &mut String, label: &str, value: Option<f64>) {
    if let Some(v) = value {
        let _ = writeln!(md, "| {label} | {v:.6e} |");
    }
}

pub fn report(dir: &Path) -> CliResult<()> {
    if !dir.is_dir() {
        return Err(usage(format!("{} is not a directory", dir.display())));
    }
    let mut found = Map::new();
    for name in ARTIFACTS {
        if let Some(v) = read_json(dir, name)? {
            found.insert(name.trim_end_matches(".json").to_string(), v);
        }
    }
    if found.is_empty() {
        return Err(usage(format!("{} holds no run artifacts", dir.display())));
    }

    let mut report = Map::new();
    if let Some(c) = found.get("config") {
        let cfg: ExperimentConfig =
            serde_json::from_value(c.clone()).map_err(|e| CliError::Data(format!("config.json: {e}")))?;
        report.insert("brightness".into(), brightness(&cfg));
    }
    if let Some(m) = found.get("manifest") {
        report.insert("car".into(), m["car"].clone());
    }
    if let Some(s) = found.get("scan_fit") {
        report.insert(
            "linewidth".into(),
            json!({
                "fwhm_mhz": s["fit"]["params"]["fwhm_mhz"],
                "expected_fwhm_mhz": s["expected_fwhm_mhz"],
                "q_loaded": s["fit"]["derived"]["q_loaded"],
            }),
        );
    }
    if let Some(h) = found.get("histogram") {
        let mut entry = json!({"mode": h["mode"], "bin_width_ps": h["bin_width_ps"]});
        for key in ["g2_zero", "fit"] {
            if let Some(v) = h.get(key) {
                entry[key] = match key {
                    "fit" => json!({"tau_ns": v["params"]["tau_ns"], "bandwidth_mhz": v["derived"]["bandwidth_mhz"]}),
                    _ => v.clone(),
                };
            }
        }
        report.insert("correlation".into(), entry);
    }
    if let Some(p) = found.get("powerscan_fit") {
        report.insert(
            "power_dependence".into(),
            json!({
                "signal_slope": p["signal"]["slope"],
                "idler_slope": p["idler"]["slope"],
                "coincidence_slope": p["coincidences"]["slope"],
                "max_power": p["max_power"],
            }),
        );
    }
    if let Some(f) = found.get("franson") {
        report.insert(
            "entanglement".into(),
            json!({"visibility": f["visibility"], "stderr": f["visibility_stderr"], "verdict": f["verdict"]}),
        );
    }
    let report = Value::Object(report);

    let mut md = String::from("# Run report\n\n| quantity | value |\n|---|---|\n");
    line(&mut md, "pair rate (s⁻¹)", num(&report, &["brightness", "pair_rate"]));
    line(&mut md, "modal brightness (pairs/mode/mW²)", num(&report, &["brightness", "modal_brightness"]));
    line(&mut md, "power for 0.1 pairs/mode (mW)", num(&report, &["brightness", "power_for_0_1_pairs_per_mode_mw"]));
    line(&mut md, "spectral brightness (s⁻¹mW⁻²MHz⁻¹)", num(&report, &["brightness", "spectral_brightness"]));
    line(&mut md, "CAR", num(&report, &["car", "car"]));
    line(&mut md, "fitted linewidth (MHz)", num(&report, &["linewidth", "fwhm_mhz"]));
    line(&mut md, "g²(0)", num(&report, &["correlation", "g2_zero"]));
    line(&mut md, "fitted bandwidth (MHz)", num(&report, &["correlation", "fit", "bandwidth_mhz"]));
    line(&mut md, "coincidence slope", num(&report, &["power_dependence", "coincidence_slope"]));
    line(&mut md, "inferred pair rate at max power (s⁻¹)", num(&report, &["power_dependence", "max_power", "inferred_pair_rate"]));
    line(&mut md, "Franson visibility", num(&report, &["entanglement", "visibility"]));
    if let Some(note) = report.pointer("/brightness/note").and_then(Value::as_str) {
        let _ = writeln!(md, "\n{note}");
    }

    let out = Output::create(dir)?;
    out.write_json("report.json", &report)?;
    out.write("report.md", &md)
}
