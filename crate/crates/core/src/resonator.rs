//! Spectral model of a microring: resonance grid, all-pass transmission
//! dip, Q/linewidth relations and linear thermal tuning.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_spec, Result};
use crate::exec::Exec;
use crate::rng::{stage_rng, Stage};
use crate::textfmt;

/// Speed of light in nm·THz, so that ν[THz] = c / λ[nm].
pub const SPEED_OF_LIGHT_NM_THZ: f64 = 299_792.458;

const SCAN_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResonatorSpec {
    pub pump_wavelength_nm: f64,
    pub fsr_ghz: f64,
    pub q_intrinsic: f64,
    pub q_coupling: f64,
    pub radius_um: f64,
    pub thermo_optic_pm_per_k: f64,
    pub base_temperature_c: f64,
}

impl Default for ResonatorSpec {
    /// 115 µm ring, 200 GHz FSR, Qi = 7e7, over-coupled to a loaded Q of 2e6.
    fn default() -> Self {
        let q_intrinsic = 7.0e7;
        ResonatorSpec {
            pump_wavelength_nm: 1551.7,
            fsr_ghz: 200.0,
            q_intrinsic,
            q_coupling: coupling_q_for_loaded(2.0e6, q_intrinsic),
            radius_um: 115.0,
            thermo_optic_pm_per_k: 21.90,
            base_temperature_c: 25.0,
        }
    }
}

/// Coupling Q that, combined with `q_intrinsic`, gives `q_loaded`.
pub fn coupling_q_for_loaded(q_loaded: f64, q_intrinsic: f64) -> f64 {
    1.0 / (1.0 / q_loaded - 1.0 / q_intrinsic)
}

impl ResonatorSpec {
    /// Ring whose pump resonance has loaded linewidth `fwhm_mhz`.
    pub fn with_loaded_linewidth(fwhm_mhz: f64, q_intrinsic: f64) -> Self {
        let base = ResonatorSpec {
            q_intrinsic,
            ..Default::default()
        };
        let q_loaded = base.pump_frequency_thz() * 1e6 / fwhm_mhz;
        ResonatorSpec {
            q_coupling: coupling_q_for_loaded(q_loaded, q_intrinsic),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pump_wavelength_nm", self.pump_wavelength_nm),
            ("fsr_ghz", self.fsr_ghz),
            ("q_intrinsic", self.q_intrinsic),
            ("q_coupling", self.q_coupling),
            ("radius_um", self.radius_um),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(invalid_spec(format!("{name} must be positive, got {value}")));
            }
        }
        if !self.thermo_optic_pm_per_k.is_finite() || !self.base_temperature_c.is_finite() {
            return Err(invalid_spec("thermal parameters must be finite"));
        }
        Ok(())
    }

    /// 1/Q_L = 1/Qi + 1/Qc.
    pub fn loaded_q(&self) -> f64 {
        1.0 / (1.0 / self.q_intrinsic + 1.0 / self.q_coupling)
    }

    pub fn coupling_ratio(&self) -> f64 {
        self.q_intrinsic / self.q_coupling
    }

    pub fn ring_length_m(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.radius_um * 1e-6
    }

    pub fn pump_frequency_thz(&self) -> f64 {
        SPEED_OF_LIGHT_NM_THZ / self.pump_wavelength_nm
    }

    /// Loaded linewidth of the pump resonance.
    pub fn pump_linewidth_mhz(&self) -> f64 {
        bandwidth_from_q(self.pump_frequency_thz(), self.loaded_q())
    }

    /// The same ring after a temperature change of `delta_k`: the pump
    /// resonance moves by the thermal shift and the whole grid follows it.
    pub fn at_temperature_offset(&self, delta_k: f64) -> ResonatorSpec {
        ResonatorSpec {
            pump_wavelength_nm: self.pump_wavelength_nm + thermal_shift(self, delta_k) * 1e-3,
            base_temperature_c: self.base_temperature_c + delta_k,
            ..*self
        }
    }

    pub fn line(&self, mode_index: i32) -> Result<ResonanceLine> {
        self.validate()?;
        let fsr_thz = self.fsr_ghz * 1e-3;
        let center_thz = self.pump_frequency_thz() + f64::from(mode_index) * fsr_thz;
        Ok(ResonanceLine {
            center_thz,
            fwhm_mhz: bandwidth_from_q(center_thz, self.loaded_q()),
            mode_index,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceLine {
    pub center_thz: f64,
    pub fwhm_mhz: f64,
    /// Offset from the pump resonance in units of the FSR.
    pub mode_index: i32,
}

impl ResonanceLine {
    pub fn wavelength_nm(&self) -> f64 {
        SPEED_OF_LIGHT_NM_THZ / self.center_thz
    }
}

/// Lines `-max_order..=max_order` around the pump resonance.
pub fn resonance_grid(spec: &ResonatorSpec, max_order: u32) -> Result<Vec<ResonanceLine>> {
    if max_order < 1 {
        return Err(invalid_input("max_order must be at least 1"));
    }
    let m = max_order as i32;
    (-m..=m).map(|k| spec.line(k)).collect()
}

/// All-pass ring transmission at `freq_thz`.
///
/// `coupling_ratio` is Qi/Qc; the on-resonance transmission is
/// ((1 - Qi/Qc) / (1 + Qi/Qc))², zero at critical coupling.
pub fn lorentzian_transmission(line: &ResonanceLine, coupling_ratio: f64, freq_thz: f64) -> f64 {
    let t_min = ((1.0 - coupling_ratio) / (1.0 + coupling_ratio)).powi(2);
    let half_width = 0.5 * line.fwhm_mhz;
    let detuning_mhz = (freq_thz - line.center_thz) * 1e6;
    let shape = half_width * half_width / (detuning_mhz * detuning_mhz + half_width * half_width);
    (1.0 - (1.0 - t_min) * shape).clamp(0.0, 1.0)
}

/// Δν = ν₀ / Q_L, in MHz.
pub fn bandwidth_from_q(center_thz: f64, q_loaded: f64) -> f64 {
    center_thz * 1e6 / q_loaded
}

/// Wavelength shift in pm for a temperature change of `delta_k`.
pub fn thermal_shift(spec: &ResonatorSpec, delta_k: f64) -> f64 {
    spec.thermo_optic_pm_per_k * delta_k
}

/// Frequency change (MHz, magnitude) corresponding to a wavelength shift.
pub fn wavelength_shift_to_frequency_mhz(wavelength_nm: f64, shift_pm: f64) -> f64 {
    let shifted = wavelength_nm + shift_pm * 1e-3;
    (SPEED_OF_LIGHT_NM_THZ / wavelength_nm - SPEED_OF_LIGHT_NM_THZ / shifted).abs() * 1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRange {
    pub start_thz: f64,
    pub stop_thz: f64,
    pub step_mhz: f64,
}

impl ScanRange {
    /// Symmetric window of `half_widths` linewidths around a line.
    pub fn around(line: &ResonanceLine, half_widths: f64, points_per_fwhm: f64) -> Self {
        let half_span_thz = half_widths * line.fwhm_mhz * 1e-6;
        ScanRange {
            start_thz: line.center_thz - half_span_thz,
            stop_thz: line.center_thz + half_span_thz,
            step_mhz: line.fwhm_mhz / points_per_fwhm,
        }
    }

    fn len(&self) -> usize {
        let span_mhz = (self.stop_thz - self.start_thz) * 1e6;
        (span_mhz / self.step_mhz + 1e-6).floor() as usize + 1
    }

    fn point(&self, i: usize) -> f64 {
        self.start_thz + i as f64 * self.step_mhz * 1e-6
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanTable {
    pub freq_thz: Vec<f64>,
    pub transmission: Vec<f64>,
}

impl ScanTable {
    pub fn len(&self) -> usize {
        self.freq_thz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq_thz.is_empty()
    }

    /// `freq_thz,transmission` with 12 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("freq_thz,transmission\n");
        for (f, t) in self.freq_thz.iter().zip(&self.transmission) {
            out.push_str(&textfmt::sig(*f, 12));
            out.push(',');
            out.push_str(&textfmt::sig(*t, 12));
            out.push('\n');
        }
        out
    }

    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut table = ScanTable::default();
        for row in rdr.deserialize() {
            let (f, t): (f64, f64) = row?;
            table.freq_thz.push(f);
            table.transmission.push(t);
        }
        Ok(table)
    }
}

/// Synthetic transmission scan of resonance `mode_index` with additive
/// Gaussian noise of standard deviation `noise_rms`.
pub fn transmission_scan(
    spec: &ResonatorSpec,
    mode_index: i32,
    range: ScanRange,
    noise_rms: f64,
    seed: u64,
    exec: Exec,
) -> Result<ScanTable> {
    let line = spec.line(mode_index)?;
    if !(range.start_thz < range.stop_thz) {
        return Err(invalid_input("scan range is empty"));
    }
    if !(range.step_mhz > 0.0) {
        return Err(invalid_input("scan step must be positive"));
    }
    if !(noise_rms >= 0.0) {
        return Err(invalid_input("noise_rms must be non-negative"));
    }
    let n = range.len();
    let ratio = spec.coupling_ratio();
    let chunks = n.div_ceil(SCAN_CHUNK);
    let parts = exec.map_range(chunks, |c| {
        let mut rng = stage_rng(seed, Stage::ScanNoise, c as u64);
        let lo = c * SCAN_CHUNK;
        let hi = (lo + SCAN_CHUNK).min(n);
        (lo..hi)
            .map(|i| {
                let f = range.point(i);
                let mut t = lorentzian_transmission(&line, ratio, f);
                if noise_rms > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    t += noise_rms * z;
                }
                (f, t)
            })
            .collect::<Vec<_>>()
    });
    let mut table = ScanTable::default();
    for (f, t) in parts.into_iter().flatten() {
        table.freq_thz.push(f);
        table.transmission.push(t);
    }
    Ok(table)
}
