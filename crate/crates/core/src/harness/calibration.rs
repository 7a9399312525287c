use std::fmt::Write as _;

use super::narrowband::{calibrate_fig6, fig6_detectors};
use super::output::format_number;
use super::wideband::{cs_calibration_seed, operating_point};
use super::{ExperimentConfig, Result};
use crate::detectors::{check_calibration_request, measure_pfa, DetectorConfig};
use crate::rng::{derive_seed, tag};
use crate::widecs::{calibrate_band_threshold, measure_band_pfa};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationEntry {
    pub name: String,
    pub threshold: f64,
    pub target_pfa: f64,
    pub measured_pfa: f64,
    pub trials: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub entries: Vec<CalibrationEntry>,
}

impl CalibrationReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("check,threshold,target_pfa,measured_pfa,trials,result\n");
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.name,
                format_number(e.threshold),
                format_number(e.target_pfa),
                format_number(e.measured_pfa),
                e.trials,
                if e.pass { "PASS" } else { "FAIL" }
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Accepted band around a false-alarm target: ±20%.
fn accepts(target: f64, measured: f64) -> bool {
    (0.8 * target..=1.2 * target).contains(&measured)
}

/// Re-measure the false-alarm rate of every detector and every compressive
/// sensing operating point on seeds disjoint from calibration.
///
/// `cfg.trials` noise-only blocks are used per detector and
/// `cfg.cs.check_trials` noise-only recoveries per operating point.
pub fn run_calibration_check(cfg: &ExperimentConfig) -> Result<CalibrationReport> {
    let pfa = cfg.detector.pfa;
    check_calibration_request(pfa, cfg.trials)?;
    let scale = cfg.calibrate.threshold_scale;
    let dets = fig6_detectors(cfg)?;
    let cal = calibrate_fig6(cfg)?;
    let mut entries = Vec::new();

    let named: [(&str, &DetectorConfig); 3] = [("energy", &dets.energy), ("matched", &dets.matched), ("cyclo", &dets.cyclo)];
    for (name, det) in named {
        let thr = cal.get(name)?.scaled(scale);
        let seed = derive_seed(cfg.seed, &[tag("check"), tag(name)]);
        let measured = measure_pfa(det, &thr, cfg.trials, seed)?;
        entries.push(CalibrationEntry {
            name: name.into(),
            threshold: thr.value,
            target_pfa: pfa,
            measured_pfa: measured,
            trials: cfg.trials,
            pass: accepts(pfa, measured),
        });
    }

    for &ratio in &cfg.ratio_grid {
        for &k in &cfg.cs.sparsity {
            let point = operating_point(cfg, ratio, k)?;
            let thr = calibrate_band_threshold(
                &point,
                cfg.cs.pfa,
                cfg.cs.calibration_trials,
                cs_calibration_seed(cfg, &point),
            )?;
            let value = thr.value * scale;
            let seed = derive_seed(
                cfg.seed,
                &[tag("cs-check"), ratio.to_bits(), point.max_support as u64],
            );
            let measured = measure_band_pfa(&point, value, cfg.cs.check_trials, seed)?;
            entries.push(CalibrationEntry {
                name: format!("cs_ratio{ratio}_support{}", point.max_support),
                threshold: value,
                target_pfa: cfg.cs.pfa,
                measured_pfa: measured,
                trials: cfg.cs.check_trials,
                pass: accepts(cfg.cs.pfa, measured),
            });
        }
    }
    Ok(CalibrationReport { entries })
}
