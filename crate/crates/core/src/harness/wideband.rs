use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{CurvePoint, ExperimentConfig, HarnessError, Result};
use crate::rng::{derive_seed, rng_from, tag};
use crate::sigmodel::{make_band_plan, BandAtoms, OccupancyMask};
use crate::widecs::{band_decisions, calibrate_band_threshold, sense_once, BandThreshold, CsOperatingPoint};

/// Band thresholds keyed by compression ratio and support budget.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsCalibration {
    thresholds: BTreeMap<(u64, usize), BandThreshold>,
}

impl CsCalibration {
    pub fn insert(&mut self, ratio: f64, max_support: usize, thr: BandThreshold) {
        self.thresholds.insert((ratio.to_bits(), max_support), thr);
    }

    pub fn get(&self, ratio: f64, max_support: usize) -> Result<&BandThreshold> {
        self.thresholds
            .get(&(ratio.to_bits(), max_support))
            .ok_or_else(|| HarnessError::MissingCalibration(format!("cs ratio {ratio} max_support {max_support}")))
    }

    pub fn remove(&mut self, ratio: f64, max_support: usize) -> Option<BandThreshold> {
        self.thresholds.remove(&(ratio.to_bits(), max_support))
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }
}

pub(super) fn operating_point(cfg: &ExperimentConfig, ratio: f64, k: usize) -> Result<CsOperatingPoint> {
    Ok(CsOperatingPoint {
        plan: make_band_plan(cfg.cs.num_bands, cfg.cs.band_width_hz)?,
        block_len: cfg.cs.block_len,
        ratio,
        max_support: cfg.cs.max_support.unwrap_or(k),
        residual_tol: cfg.cs.residual_tol,
    })
}

pub(super) fn cs_calibration_seed(cfg: &ExperimentConfig, point: &CsOperatingPoint) -> u64 {
    derive_seed(
        cfg.seed,
        &[tag("cs-calibrate"), point.ratio.to_bits(), point.max_support as u64],
    )
}

/// Calibrate a band threshold for every (ratio, support budget) in the sweep.
pub fn calibrate_fig5(cfg: &ExperimentConfig) -> Result<CsCalibration> {
    let mut cal = CsCalibration::default();
    for &ratio in &cfg.ratio_grid {
        for &k in &cfg.cs.sparsity {
            let point = operating_point(cfg, ratio, k)?;
            if cal.get(ratio, point.max_support).is_ok() {
                continue;
            }
            let thr = calibrate_band_threshold(
                &point,
                cfg.cs.pfa,
                cfg.cs.calibration_trials,
                cs_calibration_seed(cfg, &point),
            )?;
            cal.insert(ratio, point.max_support, thr);
        }
    }
    Ok(cal)
}

pub fn run_fig5(cfg: &ExperimentConfig) -> Result<Vec<CurvePoint>> {
    let cal = calibrate_fig5(cfg)?;
    run_fig5_with(cfg, &cal)
}

fn label(k: usize, snr: f64, what: &str) -> String {
    format!("k{k}_snr{snr}_{what}")
}

/// Detection performance against compression ratio.
///
/// For every sparsity and SNR three series are produced: per-band detection
/// probability (`pd_band`), probability that every active band is found
/// (`pd_spectrum`) and the per-band false-alarm rate on inactive bands
/// (`pfa_band`).
pub fn run_fig5_with(cfg: &ExperimentConfig, cal: &CsCalibration) -> Result<Vec<CurvePoint>> {
    let plan = make_band_plan(cfg.cs.num_bands, cfg.cs.band_width_hz)?;
    let atoms = BandAtoms::new(&plan, cfg.cs.block_len)?;
    let nb = plan.num_bands();
    let mut points = Vec::new();
    for &snr in &cfg.snr_grid_db {
        for &k in &cfg.cs.sparsity {
            for &ratio in &cfg.ratio_grid {
                let point = operating_point(cfg, ratio, k)?;
                let thr = cal.get(ratio, point.max_support)?.value;
                let trial = |i: usize| -> Result<[usize; 3]> {
                    let base = derive_seed(
                        cfg.seed,
                        &[tag("fig5"), snr.to_bits(), k as u64, ratio.to_bits(), i as u64],
                    );
                    let mask = OccupancyMask::random(nb, k, &mut rng_from(derive_seed(base, &[tag("mask")])))?;
                    let est = sense_once(&point, &atoms, &mask, snr, derive_seed(base, &[tag("sense")]))?;
                    let decided = band_decisions(&est, thr)?;
                    let (mut hits, mut false_alarms) = (0, 0);
                    for b in 0..nb {
                        match (mask.is_active(b), decided.is_active(b)) {
                            (true, true) => hits += 1,
                            (false, true) => false_alarms += 1,
                            _ => {}
                        }
                    }
                    Ok([hits, usize::from(hits == k), false_alarms])
                };
                let [hits, all, fa] = (0..cfg.trials)
                    .into_par_iter()
                    .map(trial)
                    .try_reduce(|| [0usize; 3], |a, b| Ok(std::array::from_fn(|j| a[j] + b[j])))?;
                points.push(CurvePoint::from_counts(ratio, label(k, snr, "pd_band"), hits, k * cfg.trials));
                points.push(CurvePoint::from_counts(ratio, label(k, snr, "pd_spectrum"), all, cfg.trials));
                points.push(CurvePoint::from_counts(
                    ratio,
                    label(k, snr, "pfa_band"),
                    fa,
                    (nb - k) * cfg.trials,
                ));
            }
        }
    }
    Ok(points)
}
