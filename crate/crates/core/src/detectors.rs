//! Narrowband detectors and Monte Carlo threshold calibration.
//!
//! Every detector reduces a [`BasebandBlock`] to a scalar [`Statistic`] that
//! is compared against a [`Threshold`] calibrated on noise-only input:
//!
//! * energy: windowed mean power normalized by the noise-power estimate;
//! * matched filter: real part of the correlation with a known template,
//!   normalized so the noise-only statistic is standard normal;
//! * cyclostationary: magnitude of the lag-0 cyclic autocorrelation at the
//!   cycle frequency `1 / period`, self-normalized by the block power.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::rng::derive_seed;
use crate::sigmodel::{self, synth_narrowband, BasebandBlock, NarrowbandKind, TemplateId, NOISE_POWER};

/// Shortest cyclostationary observation, in periods.
pub const MIN_CYCLO_PERIODS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("detector expects {expected:?} but got {got:?}")]
    KindMismatch { expected: DetectorKind, got: DetectorKind },
    #[error("block of {len} samples is shorter than the required {needed}")]
    ShortBlock { len: usize, needed: usize },
    #[error("noise power estimate must be positive and finite, got {0}")]
    BadNoiseEstimate(f64),
    #[error("no matched-filter template of length {len} available")]
    MissingTemplate { len: usize },
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
    #[error("target false-alarm probability must lie in (0, 1), got {0}")]
    BadTargetPfa(f64),
    #[error("{trials} calibration trials is below the floor of {needed} for the target")]
    InsufficientTrials { trials: usize, needed: usize },
    #[error("statistic is not finite")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, DetectorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectorKind {
    Energy,
    MatchedFilter,
    Cyclostationary,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Energy => "energy",
            DetectorKind::MatchedFilter => "matched_filter",
            DetectorKind::Cyclostationary => "cyclostationary",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub window_len: usize,
    /// Cycle period; used by the cyclostationary detector only.
    pub period_samples: usize,
    /// Stored template; used by the matched filter only.
    pub template_id: Option<TemplateId>,
    /// Samples per observed block, used when calibrating on noise.
    pub block_len: usize,
}

impl DetectorConfig {
    pub fn energy(window_len: usize) -> Self {
        Self {
            kind: DetectorKind::Energy,
            window_len,
            period_samples: 0,
            template_id: None,
            block_len: window_len,
        }
    }

    pub fn matched_filter(window_len: usize, template_id: TemplateId) -> Self {
        Self {
            kind: DetectorKind::MatchedFilter,
            window_len,
            period_samples: 0,
            template_id: Some(template_id),
            block_len: window_len,
        }
    }

    /// Cyclostationary detector observing `periods` whole periods.
    pub fn cyclostationary(period_samples: usize, periods: usize) -> Self {
        Self {
            kind: DetectorKind::Cyclostationary,
            window_len: period_samples,
            period_samples,
            template_id: None,
            block_len: period_samples * periods,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(DetectorError::InvalidConfig("window_len must be at least 1".into()));
        }
        if self.block_len < self.window_len {
            return Err(DetectorError::InvalidConfig(format!(
                "block_len {} shorter than window_len {}",
                self.block_len, self.window_len
            )));
        }
        if self.kind == DetectorKind::Cyclostationary {
            if self.period_samples < 2 {
                return Err(DetectorError::InvalidConfig(
                    "period_samples must be at least 2".into(),
                ));
            }
            if self.block_len < MIN_CYCLO_PERIODS * self.period_samples {
                return Err(DetectorError::ShortBlock {
                    len: self.block_len,
                    needed: MIN_CYCLO_PERIODS * self.period_samples,
                });
            }
        }
        Ok(())
    }

    fn expect(&self, kind: DetectorKind) -> Result<()> {
        if self.kind != kind {
            return Err(DetectorError::KindMismatch {
                expected: kind,
                got: self.kind,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Statistic {
    pub value: f64,
    pub kind: DetectorKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub value: f64,
    pub target_pfa: f64,
    pub calibration_trials: usize,
    pub kind: DetectorKind,
}

impl Threshold {
    /// Same threshold with its value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            value: self.value * factor,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalDecision {
    pub occupied: bool,
    pub statistic: f64,
    pub sensor_id: usize,
}

impl LocalDecision {
    pub fn for_sensor(self, sensor_id: usize) -> Self {
        Self { sensor_id, ..self }
    }
}

fn finite(value: f64, kind: DetectorKind) -> Result<Statistic> {
    if value.is_finite() {
        Ok(Statistic { value, kind })
    } else {
        Err(DetectorError::NonFinite)
    }
}

fn check_len(block: &BasebandBlock, needed: usize) -> Result<()> {
    if block.len() < needed {
        return Err(DetectorError::ShortBlock {
            len: block.len(),
            needed,
        });
    }
    Ok(())
}

pub fn energy_statistic(
    block: &BasebandBlock,
    cfg: &DetectorConfig,
    noise_power_estimate: f64,
) -> Result<Statistic> {
    cfg.expect(DetectorKind::Energy)?;
    check_len(block, cfg.window_len.max(1))?;
    if !(noise_power_estimate > 0.0 && noise_power_estimate.is_finite()) {
        return Err(DetectorError::BadNoiseEstimate(noise_power_estimate));
    }
    let w = cfg.window_len;
    let power = block.samples[..w].iter().map(|z| z.norm_sqr()).sum::<f64>() / w as f64;
    finite(power / noise_power_estimate, DetectorKind::Energy)
}

/// Coherent matched filter against the configured template.
///
/// The correlation is divided by the per-dimension noise standard deviation
/// `sqrt(NOISE_POWER / 2)`, so a noise-only block yields `N(0, 1)`.
pub fn matched_filter_statistic(block: &BasebandBlock, cfg: &DetectorConfig) -> Result<Statistic> {
    cfg.expect(DetectorKind::MatchedFilter)?;
    let w = cfg.window_len;
    let id = cfg.template_id.ok_or(DetectorError::MissingTemplate { len: w })?;
    let t = sigmodel::template(id, w).ok_or(DetectorError::MissingTemplate { len: w })?;
    check_len(block, w)?;
    let corr: Complex64 = block.samples[..w].iter().zip(&t).map(|(x, h)| x * h.conj()).sum();
    finite(corr.re / (NOISE_POWER / 2.0).sqrt(), DetectorKind::MatchedFilter)
}

/// Lag-0 cyclic autocorrelation magnitude at `1 / period`, over the whole block.
///
/// The sum `sum |x|^2 e^{-j 2 pi n / P}` is divided by `sqrt(N v)`, where
/// `v = sigma^2 (2 p - sigma^2)` estimates the per-sample variance of `|x|^2`
/// from the block power `p` and the known noise power. Under white noise the
/// statistic is approximately Rayleigh with unit mean square, and a signal
/// without a feature at `1 / P` leaves that distribution unchanged.
pub fn cyclostationary_statistic(block: &BasebandBlock, cfg: &DetectorConfig) -> Result<Statistic> {
    cfg.expect(DetectorKind::Cyclostationary)?;
    let p = cfg.period_samples;
    if p < 2 {
        return Err(DetectorError::InvalidConfig("period_samples must be at least 2".into()));
    }
    check_len(block, MIN_CYCLO_PERIODS * p)?;
    let n = block.len();
    let alpha = 1.0 / p as f64;
    let (caf, power) = block.samples.iter().enumerate().fold(
        (Complex64::new(0.0, 0.0), 0.0),
        |(acc, pw), (t, x)| {
            let e = x.norm_sqr();
            (
                acc + Complex64::from_polar(e, -2.0 * PI * alpha * t as f64),
                pw + e,
            )
        },
    );
    if power == 0.0 {
        return finite(0.0, DetectorKind::Cyclostationary);
    }
    let excess = 2.0 * power / n as f64 - NOISE_POWER;
    let var = if excess > 0.0 {
        NOISE_POWER * excess
    } else {
        NOISE_POWER * NOISE_POWER
    };
    finite(caf.norm() / (n as f64 * var).sqrt(), DetectorKind::Cyclostationary)
}

/// Dispatch on `cfg.kind`; the noise estimate is only used by the energy detector.
pub fn statistic(block: &BasebandBlock, cfg: &DetectorConfig, noise_power_estimate: f64) -> Result<Statistic> {
    match cfg.kind {
        DetectorKind::Energy => energy_statistic(block, cfg, noise_power_estimate),
        DetectorKind::MatchedFilter => matched_filter_statistic(block, cfg),
        DetectorKind::Cyclostationary => cyclostationary_statistic(block, cfg),
    }
}

/// Statistic of one noise-only block with exact noise knowledge.
pub fn null_statistic(cfg: &DetectorConfig, seed: u64) -> Result<f64> {
    let block = synth_narrowband(NarrowbandKind::NoiseOnly, 0, 0.0, cfg.block_len, seed)
        .map_err(|e| DetectorError::InvalidConfig(e.to_string()))?;
    statistic(&block, cfg, NOISE_POWER).map(|s| s.value)
}

/// Smallest trial count accepted for a target false-alarm rate.
pub fn min_calibration_trials(target_pfa: f64) -> usize {
    (100.0 / target_pfa - 1e-9).ceil() as usize
}

pub(crate) fn check_calibration_request(target_pfa: f64, trials: usize) -> Result<()> {
    if !(target_pfa > 0.0 && target_pfa < 1.0) {
        return Err(DetectorError::BadTargetPfa(target_pfa));
    }
    let needed = min_calibration_trials(target_pfa);
    if trials < needed {
        return Err(DetectorError::InsufficientTrials { trials, needed });
    }
    Ok(())
}

/// Empirical `(1 - target_pfa)` quantile; with strict `>` decisions exactly
/// `floor(target_pfa * n)` of the samples exceed it.
pub fn upper_quantile(mut samples: Vec<f64>, target_pfa: f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let idx = ((1.0 - target_pfa) * n as f64).ceil() as usize;
    samples[idx.clamp(1, n) - 1]
}

/// Calibrate a threshold as the noise-only `(1 - target_pfa)` quantile.
///
/// Trial `i` uses the seed `derive_seed(seed, [i])`, so the result does not
/// depend on the rayon pool size.
pub fn calibrate_threshold(
    cfg: &DetectorConfig,
    target_pfa: f64,
    trials: usize,
    seed: u64,
) -> Result<Threshold> {
    cfg.validate()?;
    check_calibration_request(target_pfa, trials)?;
    let stats = (0..trials)
        .into_par_iter()
        .map(|i| null_statistic(cfg, derive_seed(seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(Threshold {
        value: upper_quantile(stats, target_pfa),
        target_pfa,
        calibration_trials: trials,
        kind: cfg.kind,
    })
}

/// Fraction of fresh noise-only trials that cross `thr`.
pub fn measure_pfa(cfg: &DetectorConfig, thr: &Threshold, trials: usize, seed: u64) -> Result<f64> {
    cfg.validate()?;
    if trials == 0 {
        return Err(DetectorError::InsufficientTrials { trials, needed: 1 });
    }
    let hits = (0..trials)
        .into_par_iter()
        .map(|i| null_statistic(cfg, derive_seed(seed, &[i as u64])).map(|v| usize::from(v > thr.value)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / trials as f64)
}

/// Exact threshold equality decides vacant.
pub fn decide(stat: &Statistic, thr: &Threshold) -> Result<LocalDecision> {
    if stat.kind != thr.kind {
        return Err(DetectorError::KindMismatch {
            expected: thr.kind,
            got: stat.kind,
        });
    }
    Ok(LocalDecision {
        occupied: stat.value > thr.value,
        statistic: stat.value,
        sensor_id: 0,
    })
}
