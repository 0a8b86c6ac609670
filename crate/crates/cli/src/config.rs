//! Experiment configuration and the built-in presets.

use std::path::{Path, PathBuf};

use biphoton::correlation::CorrelationParams;
use biphoton::detection::DetectorSpec;
use biphoton::franson::{EntangledStateModel, FransonSetup, FransonSpec};
use biphoton::resonator::ResonatorSpec;
use biphoton::source::SourceSpec;
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliError, CliResult};

/// Loaded Q of the source must match the resonator to this fraction.
const Q_MATCH: f64 = 0.01;
/// The correlation time may differ from the Q-implied ring-down time by this
/// fraction (the 2e6 / 90 MHz operating point is about 7% apart).
const TAU_MATCH: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub description: String,
    pub resonator: ResonatorSpec,
    pub source: SourceSpec,
    pub detectors: Detectors,
    #[serde(default)]
    pub franson: Option<FransonConfig>,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub correlation: CorrelationConfig,
    #[serde(default)]
    pub powerscan: PowerScanConfig,
    pub run: RunConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detectors {
    pub signal: DetectorSpec,
    pub idler: DetectorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub duration_s: f64,
    /// Required: there is no implicit entropy anywhere.
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub mode_index: i32,
    pub noise_rms: f64,
    /// Scan window half-span in linewidths.
    pub half_widths: f64,
    pub points_per_fwhm: f64,
    /// Temperature offsets for the thermal tuning table, K.
    pub temperatures_k: Vec<f64>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig { mode_index: 0, noise_rms: 0.002, half_widths: 10.0, points_per_fwhm: 20.0, temperatures_k: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationConfig {
    pub bin_width_ps: u64,
    pub span_ps: u64,
    pub center_offset_ps: i64,
    /// Full coincidence window for CAR; defaults to 4τ.
    pub coincidence_window_ns: Option<f64>,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        let p = CorrelationParams::default();
        CorrelationConfig {
            bin_width_ps: p.bin_width_ps,
            span_ps: p.span_ps,
            center_offset_ps: p.center_offset_ps,
            coincidence_window_ns: None,
        }
    }
}

impl CorrelationConfig {
    pub fn params(&self) -> CorrelationParams {
        CorrelationParams { bin_width_ps: self.bin_width_ps, span_ps: self.span_ps, center_offset_ps: self.center_offset_ps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerScanConfig {
    pub powers_mw: Vec<f64>,
    /// Per point; falls back to `run.duration_s`.
    pub duration_s: Option<f64>,
    /// Full coincidence window; defaults to 10τ.
    pub window_ns: Option<f64>,
}

impl Default for PowerScanConfig {
    fn default() -> Self {
        PowerScanConfig { powers_mw: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0], duration_s: None, window_ns: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FransonConfig {
    #[serde(default)]
    pub interferometer: FransonSpec,
    #[serde(default)]
    pub state: EntangledStateModel,
    #[serde(default = "default_phase_count")]
    pub phases: usize,
    /// Per phase point; falls back to `run.duration_s`.
    #[serde(default)]
    pub duration_s: Option<f64>,
}

fn default_phase_count() -> usize {
    12
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| usage(format!("bad config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    pub fn validate(&self) -> CliResult<()> {
        self.resonator.validate()?;
        self.source.validate()?;
        self.detectors.signal.validate()?;
        self.detectors.idler.validate()?;
        let q = self.resonator.loaded_q();
        if ((self.source.q_loaded - q) / q).abs() > Q_MATCH {
            return Err(usage(format!(
                "source.q_loaded = {} does not match the resonator's loaded Q {q:.6e}",
                self.source.q_loaded
            )));
        }
        let tau_q = q / (2.0 * std::f64::consts::PI * self.resonator.pump_frequency_thz() * 1e3);
        if ((self.source.tau_ns - tau_q) / tau_q).abs() > TAU_MATCH {
            return Err(usage(format!(
                "source.tau_ns = {} is inconsistent with the loaded Q (ring-down {tau_q:.4} ns)",
                self.source.tau_ns
            )));
        }
        if !(self.run.duration_s.is_finite() && self.run.duration_s > 0.0) {
            return Err(usage(format!("run.duration_s must be positive, got {}", self.run.duration_s)));
        }
        if let Some(f) = &self.franson {
            f.interferometer.validate(self.source.tau_ns.max(self.source.tau_idler_ns()))?;
            f.state.validate()?;
        }
        Ok(())
    }

    pub fn franson_setup(&self) -> CliResult<(FransonSetup, &FransonConfig)> {
        let f = self.franson.as_ref().ok_or_else(|| usage("config has no franson section"))?;
        let setup = FransonSetup {
            source: self.source,
            signal_detector: self.detectors.signal,
            idler_detector: self.detectors.idler,
            interferometer: f.interferometer,
            state: f.state,
        };
        Ok((setup, f))
    }
}

pub const PRESETS: [(&str, &str); 8] = [
    ("fig2a", include_str!("../presets/fig2a.json")),
    ("fig2b", include_str!("../presets/fig2b.json")),
    ("fig2c", include_str!("../presets/fig2c.json")),
    ("fig2d", include_str!("../presets/fig2d.json")),
    ("fig3", include_str!("../presets/fig3.json")),
    ("fig4", include_str!("../presets/fig4.json")),
    ("fig5-ideal", include_str!("../presets/fig5-ideal.json")),
    ("fig5-paper", include_str!("../presets/fig5-paper.json")),
];

pub fn preset_text(name: &str) -> CliResult<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            usage(format!("unknown preset {name:?}; available: {}", names.join(", ")))
        })
}

pub fn preset(name: &str) -> CliResult<ExperimentConfig> {
    ExperimentConfig::from_json(preset_text(name)?).map_err(|e| match e {
        CliError::Usage(m) => usage(format!("preset {name}: {m}")),
        other => other,
    })
}
