//! Experiment runner: configuration files, Monte Carlo sweeps, calibration
//! checks and CSV output.
//!
//! Every trial draws its randomness from a seed derived from the experiment
//! seed and the trial's coordinates, so results do not depend on how rayon
//! schedules the work.

mod calibration;
mod narrowband;
mod output;
mod scenarios;
mod wideband;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

use crate::detectors::DetectorError;
use crate::fusion::FusionError;
use crate::protosim::{DrxConfig, PowerConstants, ProtoError, ScenarioConfig};
use crate::sigmodel::SignalError;
use crate::widecs::CsError;

pub use calibration::{run_calibration_check, CalibrationEntry, CalibrationReport};
pub use narrowband::{calibrate_fig6, fig6_series, run_fig6, run_fig6_with, CalibrationSet};
pub use output::{emit_csv, format_number, render_csv};
pub use scenarios::{render_power_csv, run_power, run_proto, PowerRow, ProtoOutput};
pub use wideband::{calibrate_fig5, run_fig5, run_fig5_with, CsCalibration};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("missing calibration for {0}")]
    MissingCalibration(String),
    #[error("no curve points to write")]
    EmptyCurve,
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Cs(#[from] CsError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Fig5,
    Fig6,
    Calibrate,
    Proto,
    Power,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Fig5 => "fig5",
            Experiment::Fig6 => "fig6",
            Experiment::Calibrate => "calibrate",
            Experiment::Proto => "proto",
            Experiment::Power => "power",
        }
    }

    fn is_curve(self) -> bool {
        matches!(self, Experiment::Fig5 | Experiment::Fig6 | Experiment::Calibrate)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::deserialize(toml::de::ValueDeserializer::new(&format!("\"{s}\"")))
            .map_err(|_| HarnessError::Config(format!("unknown experiment {s:?}")))
    }
}

/// A grid written either as a list or as `{ start, stop, step }`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    List(Vec<f64>),
    Range { start: f64, stop: f64, step: f64 },
}

impl GridSpec {
    pub fn expand(&self) -> Result<Vec<f64>> {
        match *self {
            GridSpec::List(ref v) => Ok(v.clone()),
            GridSpec::Range { start, stop, step } => {
                if !(step > 0.0 && stop >= start && start.is_finite() && stop.is_finite()) {
                    return Err(HarnessError::Config(format!(
                        "bad range start={start} stop={stop} step={step}"
                    )));
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                Ok((0..=n)
                    .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSettings {
    pub window_len: usize,
    pub pfa: f64,
    pub cyclo_period: usize,
    pub cyclo_periods: usize,
    pub timing_offset: i64,
    pub noise_uncertainty_db: f64,
    pub calibration_trials: usize,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        Self {
            window_len: 32,
            pfa: 0.01,
            cyclo_period: 32,
            cyclo_periods: 4,
            timing_offset: 4,
            noise_uncertainty_db: 0.5,
            calibration_trials: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSettings {
    pub k: usize,
    pub n: usize,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self { k: 5, n: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsSettings {
    pub num_bands: usize,
    pub band_width_hz: f64,
    pub block_len: usize,
    pub sparsity: Vec<usize>,
    /// Greedy support budget; the true sparsity when absent.
    pub max_support: Option<usize>,
    pub residual_tol: f64,
    pub pfa: f64,
    pub calibration_trials: usize,
    /// Noise-only trials per operating point in the calibration check.
    pub check_trials: usize,
}

impl Default for CsSettings {
    fn default() -> Self {
        Self {
            num_bands: 16,
            band_width_hz: 1e6,
            block_len: 256,
            sparsity: vec![4, 7],
            max_support: None,
            residual_tol: 1e-6,
            pfa: 0.01,
            calibration_trials: 5_000,
            check_trials: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateSettings {
    /// Multiplier applied to every calibrated threshold before re-measuring.
    pub threshold_scale: f64,
}

impl Default for CalibrateSettings {
    fn default() -> Self {
        Self { threshold_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerSettings {
    pub battery_capacity_mwh: f64,
    pub active_power_mw: f64,
    pub sleep_power_mw: f64,
    pub duty_grid: Vec<f64>,
    pub drx: Option<DrxConfig>,
}

impl Default for PowerSettings {
    fn default() -> Self {
        let c = PowerConstants::default();
        Self {
            battery_capacity_mwh: c.battery_capacity_mwh,
            active_power_mw: c.active_power_mw,
            sleep_power_mw: c.sleep_power_mw,
            duty_grid: vec![0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 1.0],
            drx: None,
        }
    }
}

impl PowerSettings {
    pub fn constants(&self) -> PowerConstants {
        PowerConstants {
            battery_capacity_mwh: self.battery_capacity_mwh,
            active_power_mw: self.active_power_mw,
            sleep_power_mw: self.sleep_power_mw,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSection {
    snr_db: Option<GridSpec>,
    ratio: Option<GridSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: Option<Experiment>,
    seed: Option<u64>,
    trials: Option<usize>,
    #[serde(default)]
    grid: GridSection,
    #[serde(default)]
    detector: DetectorSettings,
    #[serde(default)]
    fusion: FusionSettings,
    #[serde(default)]
    cs: CsSettings,
    #[serde(default)]
    calibrate: CalibrateSettings,
    #[serde(default)]
    proto: ScenarioConfig,
    #[serde(default)]
    power: PowerSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub snr_grid_db: Vec<f64>,
    pub ratio_grid: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub detector: DetectorSettings,
    pub fusion: FusionSettings,
    pub cs: CsSettings,
    pub calibrate: CalibrateSettings,
    pub proto: ScenarioConfig,
    pub power: PowerSettings,
}

fn default_snr_grid(experiment: Experiment) -> GridSpec {
    match experiment {
        Experiment::Fig5 => GridSpec::List(vec![5.0, 15.0]),
        _ => GridSpec::Range {
            start: -20.0,
            stop: 5.0,
            step: 2.5,
        },
    }
}

fn default_ratio_grid(experiment: Experiment) -> GridSpec {
    match experiment {
        Experiment::Calibrate => GridSpec::List(vec![0.1, 0.25, 0.5, 1.0]),
        _ => GridSpec::Range {
            start: 0.05,
            stop: 1.0,
            step: 0.05,
        },
    }
}

fn default_trials(experiment: Experiment) -> usize {
    match experiment {
        Experiment::Calibrate => 100_000,
        _ => 10_000,
    }
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        Self::from_raw(RawConfig::default(), experiment).expect("defaults are valid")
    }

    /// Parse a `key = value` configuration with `[section]` headers.
    ///
    /// Unknown keys are rejected. A top-level `experiment` key, when present,
    /// must agree with `experiment`.
    pub fn parse(text: &str, experiment: Experiment) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text)?;
        Self::from_raw(raw, experiment)
    }

    pub fn load(path: &std::path::Path, experiment: Experiment) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, experiment)
    }

    fn from_raw(raw: RawConfig, experiment: Experiment) -> Result<Self> {
        if let Some(e) = raw.experiment {
            if e != experiment {
                return Err(HarnessError::Config(format!(
                    "config is for {e} but {experiment} was requested"
                )));
            }
        }
        let cfg = Self {
            experiment,
            snr_grid_db: raw.grid.snr_db.unwrap_or_else(|| default_snr_grid(experiment)).expand()?,
            ratio_grid: raw.grid.ratio.unwrap_or_else(|| default_ratio_grid(experiment)).expand()?,
            trials: raw.trials.unwrap_or_else(|| default_trials(experiment)),
            seed: raw.seed.unwrap_or(0),
            detector: raw.detector,
            fusion: raw.fusion,
            cs: raw.cs,
            calibrate: raw.calibrate,
            proto: raw.proto,
            power: raw.power,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.experiment.is_curve() && self.trials < 1_000 {
            return bad(format!("{} needs at least 1000 trials, got {}", self.experiment, self.trials));
        }
        for (name, grid) in [("snr_db", &self.snr_grid_db), ("ratio", &self.ratio_grid)] {
            if grid.is_empty() {
                return bad(format!("grid {name} is empty"));
            }
            if grid.iter().any(|v| !v.is_finite()) || grid.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("grid {name} must be finite and strictly increasing"));
            }
        }
        if self.ratio_grid.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return bad("ratios must lie in (0, 1]".into());
        }
        if !(self.detector.pfa > 0.0 && self.detector.pfa < 1.0) || !(self.cs.pfa > 0.0 && self.cs.pfa < 1.0) {
            return bad("false-alarm targets must lie in (0, 1)".into());
        }
        if !(self.detector.noise_uncertainty_db >= 0.0) {
            return bad("noise_uncertainty_db must be non-negative".into());
        }
        if self.cs.sparsity.is_empty() || self.cs.sparsity.iter().any(|&k| k > self.cs.num_bands) {
            return bad("cs.sparsity must be non-empty and at most num_bands".into());
        }
        if !(self.calibrate.threshold_scale > 0.0) {
            return bad("calibrate.threshold_scale must be positive".into());
        }
        if self.power.duty_grid.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return bad("power.duty_grid entries must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// One probability estimate on a curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub x: f64,
    pub series: String,
    pub value: f64,
    /// Half-width of the 95% normal-approximation binomial interval.
    pub ci_halfwidth: f64,
    pub trials: usize,
}

impl CurvePoint {
    pub fn from_counts(x: f64, series: impl Into<String>, hits: usize, trials: usize) -> Self {
        let p = if trials == 0 { 0.0 } else { hits as f64 / trials as f64 };
        Self {
            x,
            series: series.into(),
            value: p,
            ci_halfwidth: binomial_ci(p, trials),
            trials,
        }
    }
}

pub fn binomial_ci(p: f64, trials: usize) -> f64 {
    if trials == 0 {
        return 0.0;
    }
    1.96 * (p * (1.0 - p) / trials as f64).sqrt()
}

/// Look up the point of `series` at `x`.
pub fn point_at<'a>(points: &'a [CurvePoint], series: &str, x: f64) -> Option<&'a CurvePoint> {
    points.iter().find(|p| p.series == series && p.x == x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_per_experiment() {
        let f6 = ExperimentConfig::defaults(Experiment::Fig6);
        assert_eq!(f6.snr_grid_db.len(), 11);
        assert_eq!(f6.snr_grid_db[0], -20.0);
        assert_eq!(f6.snr_grid_db[10], 5.0);
        assert_eq!(f6.trials, 10_000);
        let f5 = ExperimentConfig::defaults(Experiment::Fig5);
        assert_eq!(f5.ratio_grid.len(), 20);
        assert_eq!(f5.ratio_grid[2], 0.15);
        assert_eq!(f5.ratio_grid[19], 1.0);
    }

    #[test]
    fn parse_sections_and_grids() {
        let text = r#"
            seed = 9
            trials = 2000
            [grid]
            snr_db = [-10.0, 0.0]
            ratio = { start = 0.1, stop = 0.5, step = 0.2 }
            [detector]
            window_len = 64
            [proto.carrier.U7]
            band = "unlicensed"
            serves_class = 2
        "#;
        let cfg = ExperimentConfig::parse(text, Experiment::Fig6).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.snr_grid_db, vec![-10.0, 0.0]);
        assert_eq!(cfg.ratio_grid, vec![0.1, 0.3, 0.5]);
        assert_eq!(cfg.detector.window_len, 64);
        assert_eq!(cfg.detector.pfa, 0.01);
        assert!(cfg.proto.carrier.contains_key("U7"));
    }

    #[test]
    fn unknown_keys_fail_fast() {
        assert!(ExperimentConfig::parse("sede = 3", Experiment::Fig6).is_err());
        assert!(ExperimentConfig::parse("[detector]\nwindow = 3", Experiment::Fig6).is_err());
        assert!(ExperimentConfig::parse("[nonsense]\n", Experiment::Fig6).is_err());
        assert!(ExperimentConfig::parse("[proto.machine.M1]\ngroup = 1\nclass = 1\ncolour = 2", Experiment::Proto).is_err());
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(ExperimentConfig::parse("trials = 999", Experiment::Fig6).is_err());
        assert!(ExperimentConfig::parse("trials = 10", Experiment::Proto).is_ok());
        assert!(ExperimentConfig::parse("[grid]\nsnr_db = []", Experiment::Fig6).is_err());
        assert!(ExperimentConfig::parse("[grid]\nsnr_db = [0.0, -1.0]", Experiment::Fig6).is_err());
        assert!(ExperimentConfig::parse("[grid]\nratio = [0.0, 0.5]", Experiment::Fig5).is_err());
        assert!(ExperimentConfig::parse("experiment = \"fig5\"", Experiment::Fig6).is_err());
        assert!(ExperimentConfig::parse("experiment = \"fig6\"", Experiment::Fig6).is_ok());
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in [
            Experiment::Fig5,
            Experiment::Fig6,
            Experiment::Calibrate,
            Experiment::Proto,
            Experiment::Power,
        ] {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("fig7".parse::<Experiment>().is_err());
    }

    #[test]
    fn curve_point_ci() {
        let p = CurvePoint::from_counts(0.0, "s", 50, 100);
        assert_eq!(p.value, 0.5);
        assert!((p.ci_halfwidth - 1.96 * 0.05).abs() < 1e-12);
        assert_eq!(CurvePoint::from_counts(0.0, "s", 0, 100).ci_halfwidth, 0.0);
    }
}
