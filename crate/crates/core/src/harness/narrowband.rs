use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{CurvePoint, ExperimentConfig, HarnessError, Result};
use crate::detectors::{
    self, calibrate_threshold, decide, energy_statistic, matched_filter_statistic, min_calibration_trials,
    DetectorConfig, Threshold,
};
use crate::fusion::{fuse_hard, local_probability_for, FusionRule};
use crate::rng::{derive_seed, tag};
use crate::sigmodel::{
    apply_timing_offset, db_to_linear, perturb_noise_estimate, synth_narrowband, NarrowbandKind, TemplateId,
    NOISE_POWER,
};

/// Calibrated thresholds keyed by detector role.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationSet {
    thresholds: BTreeMap<String, Threshold>,
}

impl CalibrationSet {
    pub fn insert(&mut self, name: &str, thr: Threshold) {
        self.thresholds.insert(name.into(), thr);
    }

    pub fn get(&self, name: &str) -> Result<&Threshold> {
        self.thresholds
            .get(name)
            .ok_or_else(|| HarnessError::MissingCalibration(name.into()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Threshold> {
        self.thresholds.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Threshold)> {
        self.thresholds.iter().map(|(k, v)| (k.as_str(), v))
    }
}

pub(super) struct Fig6Detectors {
    pub energy: DetectorConfig,
    pub matched: DetectorConfig,
    pub cyclo: DetectorConfig,
}

pub(super) fn fig6_detectors(cfg: &ExperimentConfig) -> Result<Fig6Detectors> {
    let d = &cfg.detector;
    let set = Fig6Detectors {
        energy: DetectorConfig::energy(d.window_len),
        matched: DetectorConfig::matched_filter(d.window_len, TemplateId::default()),
        cyclo: DetectorConfig::cyclostationary(d.cyclo_period, d.cyclo_periods),
    };
    for c in [&set.energy, &set.matched, &set.cyclo] {
        c.validate()?;
    }
    Ok(set)
}

fn fusion_rule(cfg: &ExperimentConfig) -> Result<FusionRule> {
    Ok(FusionRule::new(cfg.fusion.k, cfg.fusion.n)?)
}

/// Series labels in output order.
pub fn fig6_series(cfg: &ExperimentConfig) -> Vec<String> {
    let mut v: Vec<String> = ["energy", "energy_uncertainty", "matched", "matched_timing", "cyclo"]
        .into_iter()
        .map(String::from)
        .collect();
    v.push(format!("coop_{}of{}", cfg.fusion.k, cfg.fusion.n));
    v
}

pub(super) fn calibration_seed(cfg: &ExperimentConfig, name: &str) -> u64 {
    derive_seed(cfg.seed, &[tag("calibrate"), tag(name)])
}

/// Thresholds for every fig6 detector at the configured false-alarm target.
///
/// The cooperative sensors use a local target chosen so that the fused
/// decision meets the same false-alarm target.
pub fn calibrate_fig6(cfg: &ExperimentConfig) -> Result<CalibrationSet> {
    let dets = fig6_detectors(cfg)?;
    let pfa = cfg.detector.pfa;
    let trials = cfg.detector.calibration_trials;
    let mut set = CalibrationSet::default();
    for (name, det) in [("energy", &dets.energy), ("matched", &dets.matched), ("cyclo", &dets.cyclo)] {
        set.insert(name, calibrate_threshold(det, pfa, trials, calibration_seed(cfg, name))?);
    }
    let local = local_probability_for(pfa, fusion_rule(cfg)?)?;
    let local_trials = trials.max(min_calibration_trials(local));
    set.insert(
        "coop_local",
        calibrate_threshold(&dets.energy, local, local_trials, calibration_seed(cfg, "coop_local"))?,
    );
    Ok(set)
}

pub fn run_fig6(cfg: &ExperimentConfig) -> Result<Vec<CurvePoint>> {
    let cal = calibrate_fig6(cfg)?;
    run_fig6_with(cfg, &cal)
}

/// Miss-detection probability of every fig6 series over the SNR grid.
///
/// Within one trial the energy, uncertain-energy and both matched-filter
/// series observe the same received block.
pub fn run_fig6_with(cfg: &ExperimentConfig, cal: &CalibrationSet) -> Result<Vec<CurvePoint>> {
    let dets = fig6_detectors(cfg)?;
    let rule = fusion_rule(cfg)?;
    let thr_energy = cal.get("energy")?;
    let thr_uncertain = thr_energy.scaled(db_to_linear(cfg.detector.noise_uncertainty_db));
    let thr_matched = cal.get("matched")?;
    let thr_cyclo = cal.get("cyclo")?;
    let thr_local = cal.get("coop_local")?;
    let series = fig6_series(cfg);
    let w = cfg.detector.window_len;
    let offset = cfg.detector.timing_offset;
    let uncertainty = cfg.detector.noise_uncertainty_db;

    let mut points = Vec::new();
    for &snr in &cfg.snr_grid_db {
        let trial = |i: usize| -> Result<[bool; 6]> {
            let base = derive_seed(cfg.seed, &[tag("fig6"), snr.to_bits(), i as u64]);
            let block = synth_narrowband(NarrowbandKind::Template, w, snr, w, derive_seed(base, &[tag("template")]))?;

            let energy = energy_statistic(&block, &dets.energy, NOISE_POWER)?;
            let estimate = perturb_noise_estimate(NOISE_POWER, uncertainty, derive_seed(base, &[tag("uncertainty")]))?;
            let uncertain = energy_statistic(&block, &dets.energy, estimate)?;
            let matched = matched_filter_statistic(&block, &dets.matched)?;
            let shifted = apply_timing_offset(&block, offset)?;
            let matched_late = matched_filter_statistic(&shifted, &dets.matched)?;

            let cyclo_block = synth_narrowband(
                NarrowbandKind::Cyclo,
                dets.cyclo.period_samples,
                snr,
                dets.cyclo.block_len,
                derive_seed(base, &[tag("cyclo")]),
            )?;
            let cyclo = detectors::statistic(&cyclo_block, &dets.cyclo, NOISE_POWER)?;

            let locals = (0..rule.n())
                .map(|s| {
                    let b = synth_narrowband(
                        NarrowbandKind::Template,
                        w,
                        snr,
                        w,
                        derive_seed(base, &[tag("coop"), s as u64]),
                    )?;
                    let st = energy_statistic(&b, &dets.energy, NOISE_POWER)?;
                    Ok(decide(&st, thr_local)?.for_sensor(s))
                })
                .collect::<Result<Vec<_>>>()?;

            Ok([
                decide(&energy, thr_energy)?.occupied,
                decide(&uncertain, &thr_uncertain)?.occupied,
                decide(&matched, thr_matched)?.occupied,
                decide(&matched_late, thr_matched)?.occupied,
                decide(&cyclo, thr_cyclo)?.occupied,
                fuse_hard(&locals, rule)?.occupied,
            ])
        };
        let misses = (0..cfg.trials)
            .into_par_iter()
            .map(|i| trial(i).map(|hits| hits.map(|h| usize::from(!h))))
            .try_reduce(|| [0usize; 6], |a, b| Ok(std::array::from_fn(|k| a[k] + b[k])))?;
        for (name, m) in series.iter().zip(misses) {
            points.push(CurvePoint::from_counts(snr, name.clone(), m, cfg.trials));
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{point_at, Experiment};

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(Experiment::Fig6);
        cfg.trials = 2_000;
        cfg.detector.calibration_trials = 20_000;
        cfg.snr_grid_db = vec![-15.0, -5.0, 5.0];
        cfg
    }

    #[test]
    fn shape_and_range() {
        let cfg = small();
        let pts = run_fig6(&cfg).unwrap();
        assert_eq!(pts.len(), 6 * 3);
        for p in &pts {
            assert!((0.0..=1.0).contains(&p.value));
            assert!(p.ci_halfwidth >= 0.0);
        }
        let m = point_at(&pts, "matched", 5.0).unwrap();
        assert_eq!(m.value, 0.0);
        let e = point_at(&pts, "energy", -15.0).unwrap();
        assert!(e.value > 0.9);
    }

    #[test]
    fn missing_calibration_is_reported() {
        let cfg = small();
        let mut cal = calibrate_fig6(&cfg).unwrap();
        cal.remove("cyclo");
        assert!(matches!(run_fig6_with(&cfg, &cal), Err(HarnessError::MissingCalibration(n)) if n == "cyclo"));
    }

    #[test]
    fn results_do_not_depend_on_pool_size() {
        let mut cfg = small();
        cfg.snr_grid_db = vec![-5.0];
        let cal = calibrate_fig6(&cfg).unwrap();
        let run = |n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| run_fig6_with(&cfg, &cal).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn local_threshold_is_looser() {
        let cal = calibrate_fig6(&small()).unwrap();
        assert!(cal.get("coop_local").unwrap().value < cal.get("energy").unwrap().value);
        assert!(cal.get("coop_local").unwrap().target_pfa > 0.1);
    }
}
