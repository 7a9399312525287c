//! Signal synthesis for the sensing experiments.
//!
//! All signals are complex baseband with a reference noise power of
//! [`NOISE_POWER`] per sample. The wideband model samples the whole band plan
//! at `num_bands * band_width_hz`; band `b` occupies the DFT bins
//! `[b * L / num_bands, (b + 1) * L / num_bands)` of an `L`-sample block.
//!
//! An active band carries a flat-magnitude, quadratic-phase (chirp) spectrum
//! over its bins with a random carrier phase per block. The chirp phase keeps
//! the time envelope spread over the whole block, so random sub-Nyquist
//! sampling sees every band. The same waveform is the per-band atom used by
//! the compressive recovery in [`crate::widecs`].

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::rng::{complex_gaussian_vec, rng_from};

/// Noise power per complex sample used by every synthesis routine.
pub const NOISE_POWER: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("number of bands must be at least 1")]
    NoBands,
    #[error("band width must be positive and finite, got {0}")]
    BadBandWidth(f64),
    #[error("occupancy mask has {mask} entries but the plan has {plan} bands")]
    MaskMismatch { mask: usize, plan: usize },
    #[error("band index {band} out of range for {num_bands} bands")]
    BandOutOfRange { band: usize, num_bands: usize },
    #[error("block length {block_len} must be a positive multiple of {num_bands} bands")]
    BadBlockLength { block_len: usize, num_bands: usize },
    #[error("invalid period {period} for a block of {block_len} samples")]
    InvalidPeriod { period: usize, block_len: usize },
    #[error("timing offset {offset} out of range for a block of {len} samples")]
    OffsetOutOfRange { offset: i64, len: usize },
    #[error("noise uncertainty must be non-negative and finite, got {0} dB")]
    NegativeUncertainty(f64),
    #[error("noise power must be positive, got {0}")]
    BadNoisePower(f64),
}

pub type Result<T> = std::result::Result<T, SignalError>;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Contiguous, non-overlapping band layout of the wideband spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPlan {
    num_bands: usize,
    band_width_hz: f64,
    nyquist_rate_hz: f64,
}

impl BandPlan {
    pub fn new(num_bands: usize, band_width_hz: f64) -> Result<Self> {
        if num_bands == 0 {
            return Err(SignalError::NoBands);
        }
        if !(band_width_hz > 0.0 && band_width_hz.is_finite()) {
            return Err(SignalError::BadBandWidth(band_width_hz));
        }
        Ok(Self {
            num_bands,
            band_width_hz,
            // complex baseband: one sample per Hz of occupied span
            nyquist_rate_hz: num_bands as f64 * band_width_hz,
        })
    }

    pub fn num_bands(&self) -> usize {
        self.num_bands
    }

    pub fn band_width_hz(&self) -> f64 {
        self.band_width_hz
    }

    pub fn nyquist_rate_hz(&self) -> f64 {
        self.nyquist_rate_hz
    }

    /// Total spectrum covered by the plan.
    pub fn span_hz(&self) -> f64 {
        self.num_bands as f64 * self.band_width_hz
    }

    /// Lower and upper edge of band `band`, relative to the lower edge of the span.
    pub fn band_edges_hz(&self, band: usize) -> Result<(f64, f64)> {
        self.check_band(band)?;
        let lo = band as f64 * self.band_width_hz;
        Ok((lo, lo + self.band_width_hz))
    }

    pub fn bins_per_band(&self, block_len: usize) -> Result<usize> {
        if block_len == 0 || block_len % self.num_bands != 0 {
            return Err(SignalError::BadBlockLength {
                block_len,
                num_bands: self.num_bands,
            });
        }
        Ok(block_len / self.num_bands)
    }

    /// DFT bins of `band` in an `block_len`-point transform.
    pub fn band_bins(&self, band: usize, block_len: usize) -> Result<std::ops::Range<usize>> {
        self.check_band(band)?;
        let per = self.bins_per_band(block_len)?;
        Ok(band * per..(band + 1) * per)
    }

    fn check_band(&self, band: usize) -> Result<()> {
        if band >= self.num_bands {
            return Err(SignalError::BandOutOfRange {
                band,
                num_bands: self.num_bands,
            });
        }
        Ok(())
    }
}

pub fn make_band_plan(num_bands: usize, band_width_hz: f64) -> Result<BandPlan> {
    BandPlan::new(num_bands, band_width_hz)
}

/// Which bands of a plan are truly active.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OccupancyMask {
    active: Vec<bool>,
}

impl OccupancyMask {
    pub fn new(active: Vec<bool>) -> Self {
        Self { active }
    }

    pub fn vacant(num_bands: usize) -> Self {
        Self::new(vec![false; num_bands])
    }

    pub fn from_bands(num_bands: usize, bands: &[usize]) -> Result<Self> {
        let mut active = vec![false; num_bands];
        for &b in bands {
            if b >= num_bands {
                return Err(SignalError::BandOutOfRange { band: b, num_bands });
            }
            active[b] = true;
        }
        Ok(Self { active })
    }

    /// Uniformly random mask with exactly `k` active bands.
    pub fn random<R: Rng + ?Sized>(num_bands: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k > num_bands {
            return Err(SignalError::BandOutOfRange { band: k, num_bands });
        }
        let picked = rand::seq::index::sample(rng, num_bands, k).into_vec();
        Self::from_bands(num_bands, &picked)
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn sparsity(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_active(&self, band: usize) -> bool {
        self.active.get(band).copied().unwrap_or(false)
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn active_bands(&self) -> Vec<usize> {
        self.active
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Occupancy {
    Occupied,
    Vacant,
}

/// A finite block of complex baseband samples.
#[derive(Debug, Clone, PartialEq)]
pub struct BasebandBlock {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
    /// In-band signal power over noise power; `-inf` for vacant blocks.
    pub snr_db: f64,
    pub label: Occupancy,
}

impl BasebandBlock {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }
}

/// Impairments swept by the narrowband experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpairmentSpec {
    pub timing_offset_samples: i64,
    pub noise_uncertainty_db: f64,
}

impl ImpairmentSpec {
    pub fn new(timing_offset_samples: i64, noise_uncertainty_db: f64) -> Result<Self> {
        if !(noise_uncertainty_db >= 0.0 && noise_uncertainty_db.is_finite()) {
            return Err(SignalError::NegativeUncertainty(noise_uncertainty_db));
        }
        Ok(Self {
            timing_offset_samples,
            noise_uncertainty_db,
        })
    }
}

/// Per-band waveforms of a plan at a given block length.
///
/// Each atom is the unitary inverse DFT of a unit-magnitude chirp spectrum on
/// its band's bins, so `‖atom‖² = bins_per_band` and atoms of different bands
/// are orthogonal over the full block.
#[derive(Debug, Clone)]
pub struct BandAtoms {
    plan: BandPlan,
    block_len: usize,
    atoms: Vec<Vec<Complex64>>,
}

impl BandAtoms {
    pub fn new(plan: &BandPlan, block_len: usize) -> Result<Self> {
        let per = plan.bins_per_band(block_len)?;
        let ifft = FftPlanner::<f64>::new().plan_fft_inverse(block_len);
        let scale = 1.0 / (block_len as f64).sqrt();
        let atoms = (0..plan.num_bands())
            .map(|b| {
                let mut spec = vec![Complex64::new(0.0, 0.0); block_len];
                for m in 0..per {
                    let phase = PI * (m * m) as f64 / per as f64;
                    spec[b * per + m] = Complex64::from_polar(1.0, phase);
                }
                ifft.process(&mut spec);
                spec.iter_mut().for_each(|z| *z *= scale);
                spec
            })
            .collect();
        Ok(Self {
            plan: plan.clone(),
            block_len,
            atoms,
        })
    }

    pub fn plan(&self) -> &BandPlan {
        &self.plan
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn atom(&self, band: usize) -> &[Complex64] {
        &self.atoms[band]
    }

    /// Energy of every atom over the full block.
    pub fn atom_energy(&self) -> f64 {
        (self.block_len / self.plan.num_bands()) as f64
    }

    /// Signal energy a band carries over one block at the given SNR.
    pub fn band_energy_at(&self, snr_db: f64) -> f64 {
        db_to_linear(snr_db) * NOISE_POWER * self.atom_energy()
    }

    /// Synthesize one block; `noise_power = 0` gives the noiseless signal.
    pub fn synthesize(
        &self,
        mask: &OccupancyMask,
        snr_db: f64,
        noise_power: f64,
        seed: u64,
    ) -> Result<BasebandBlock> {
        if mask.len() != self.plan.num_bands() {
            return Err(SignalError::MaskMismatch {
                mask: mask.len(),
                plan: self.plan.num_bands(),
            });
        }
        let mut rng = rng_from(seed);
        let mut samples = if noise_power > 0.0 {
            complex_gaussian_vec(&mut rng, self.block_len, noise_power)
        } else {
            vec![Complex64::new(0.0, 0.0); self.block_len]
        };
        // per-bin signal power equals snr times the per-bin noise power
        let amp = (db_to_linear(snr_db) * NOISE_POWER).sqrt();
        for band in mask.active_bands() {
            let theta = rng.random::<f64>() * 2.0 * PI;
            let gain = Complex64::from_polar(amp, theta);
            for (s, a) in samples.iter_mut().zip(&self.atoms[band]) {
                *s += gain * a;
            }
        }
        let occupied = mask.sparsity() > 0;
        Ok(BasebandBlock {
            samples,
            sample_rate_hz: self.plan.nyquist_rate_hz(),
            snr_db: if occupied { snr_db } else { f64::NEG_INFINITY },
            label: if occupied {
                Occupancy::Occupied
            } else {
                Occupancy::Vacant
            },
        })
    }
}

fn check_wideband(plan: &BandPlan, block_len: usize) -> Result<()> {
    if block_len < plan.num_bands() {
        return Err(SignalError::BadBlockLength {
            block_len,
            num_bands: plan.num_bands(),
        });
    }
    plan.bins_per_band(block_len).map(|_| ())
}

/// Nyquist-rate wideband block with the active bands of `mask` at `snr_db`.
pub fn synth_wideband(
    plan: &BandPlan,
    mask: &OccupancyMask,
    snr_db: f64,
    block_len: usize,
    seed: u64,
) -> Result<BasebandBlock> {
    check_wideband(plan, block_len)?;
    BandAtoms::new(plan, block_len)?.synthesize(mask, snr_db, NOISE_POWER, seed)
}

/// As [`synth_wideband`] without the noise term.
pub fn synth_wideband_noiseless(
    plan: &BandPlan,
    mask: &OccupancyMask,
    snr_db: f64,
    block_len: usize,
    seed: u64,
) -> Result<BasebandBlock> {
    check_wideband(plan, block_len)?;
    BandAtoms::new(plan, block_len)?.synthesize(mask, snr_db, 0.0, seed)
}

/// Identifies a stored matched-filter template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TemplateId {
    pub root: u32,
}

impl Default for TemplateId {
    fn default() -> Self {
        Self { root: 1 }
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Unit-energy Zadoff-Chu template of length `len`.
///
/// Returns `None` when the root is not coprime with the length. The periodic
/// autocorrelation of the template vanishes at every nonzero lag.
pub fn template(id: TemplateId, len: usize) -> Option<Vec<Complex64>> {
    if len == 0 || id.root == 0 || gcd(u64::from(id.root), len as u64) != 1 {
        return None;
    }
    let n = len as f64;
    let u = f64::from(id.root);
    let scale = 1.0 / n.sqrt();
    Some(
        (0..len)
            .map(|k| {
                let k = k as f64;
                let arg = if len % 2 == 0 { k * k } else { k * (k + 1.0) };
                Complex64::from_polar(scale, -PI * u * arg / n)
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NarrowbandKind {
    /// Repetitions of the default template, coherent with the receiver.
    Template,
    /// BPSK symbol stream with one symbol per period and a half-sine pulse.
    Cyclo,
    NoiseOnly,
}

/// Narrowband primary-user block at `snr_db` (signal power per sample over
/// noise power per sample).
///
/// For `Template` the period is the template length; for `Cyclo` it is the
/// symbol period. Both must divide `block_len`. The period is ignored for
/// `NoiseOnly`.
pub fn synth_narrowband(
    kind: NarrowbandKind,
    period_samples: usize,
    snr_db: f64,
    block_len: usize,
    seed: u64,
) -> Result<BasebandBlock> {
    if block_len == 0 {
        return Err(SignalError::InvalidPeriod {
            period: period_samples,
            block_len,
        });
    }
    let bad_period = || SignalError::InvalidPeriod {
        period: period_samples,
        block_len,
    };
    match kind {
        NarrowbandKind::Template if period_samples == 0 || block_len % period_samples != 0 => {
            return Err(bad_period())
        }
        NarrowbandKind::Cyclo if period_samples < 2 || block_len % period_samples != 0 => {
            return Err(bad_period())
        }
        _ => {}
    }

    let mut rng = rng_from(seed);
    let mut samples = complex_gaussian_vec(&mut rng, block_len, NOISE_POWER);
    let power = db_to_linear(snr_db) * NOISE_POWER;

    let label = match kind {
        NarrowbandKind::NoiseOnly => Occupancy::Vacant,
        NarrowbandKind::Template => {
            let t = template(TemplateId::default(), period_samples).ok_or_else(bad_period)?;
            let amp = (power * period_samples as f64).sqrt();
            for (n, s) in samples.iter_mut().enumerate() {
                *s += t[n % period_samples] * amp;
            }
            Occupancy::Occupied
        }
        NarrowbandKind::Cyclo => {
            let carrier = Complex64::from_polar(1.0, rng.random::<f64>() * 2.0 * PI);
            let amp = (2.0 * power).sqrt();
            for chunk in samples.chunks_mut(period_samples) {
                let bit = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for (m, s) in chunk.iter_mut().enumerate() {
                    let pulse = (PI * (m as f64 + 0.5) / period_samples as f64).sin();
                    *s += carrier * (amp * bit * pulse);
                }
            }
            Occupancy::Occupied
        }
    };

    Ok(BasebandBlock {
        samples,
        sample_rate_hz: 1.0,
        snr_db: if label == Occupancy::Occupied {
            snr_db
        } else {
            f64::NEG_INFINITY
        },
        label,
    })
}

/// Circularly delay the block by `offset_samples` (negative advances it).
pub fn apply_timing_offset(block: &BasebandBlock, offset_samples: i64) -> Result<BasebandBlock> {
    let len = block.len();
    if len == 0 || offset_samples.unsigned_abs() >= len as u64 {
        return Err(SignalError::OffsetOutOfRange {
            offset: offset_samples,
            len,
        });
    }
    let shift = offset_samples.rem_euclid(len as i64) as usize;
    let mut samples = block.samples.clone();
    samples.rotate_right(shift);
    Ok(BasebandBlock {
        samples,
        ..block.clone()
    })
}

/// Noise-power estimate drawn uniformly within `±uncertainty_db` of the truth.
pub fn perturb_noise_estimate(true_noise_power: f64, uncertainty_db: f64, seed: u64) -> Result<f64> {
    if !(uncertainty_db >= 0.0 && uncertainty_db.is_finite()) {
        return Err(SignalError::NegativeUncertainty(uncertainty_db));
    }
    if !(true_noise_power > 0.0 && true_noise_power.is_finite()) {
        return Err(SignalError::BadNoisePower(true_noise_power));
    }
    if uncertainty_db == 0.0 {
        return Ok(true_noise_power);
    }
    let mut rng = rng_from(seed);
    let offset_db = rng.random_range(-uncertainty_db..=uncertainty_db);
    Ok(true_noise_power * db_to_linear(offset_db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dft_band_power(block: &BasebandBlock, plan: &BandPlan) -> Vec<f64> {
        // direct O(N^2) DFT, independent of rustfft
        let n = block.len();
        let spec: Vec<f64> = (0..n)
            .map(|k| {
                let acc: Complex64 = block
                    .samples
                    .iter()
                    .enumerate()
                    .map(|(t, x)| x * Complex64::from_polar(1.0, -2.0 * PI * (k * t) as f64 / n as f64))
                    .sum();
                acc.norm_sqr() / n as f64
            })
            .collect();
        (0..plan.num_bands())
            .map(|b| {
                let r = plan.band_bins(b, n).unwrap();
                let len = r.len() as f64;
                spec[r].iter().sum::<f64>() / len
            })
            .collect()
    }

    #[test]
    fn band_plans() {
        let p = make_band_plan(16, 1e6).unwrap();
        assert_eq!(p.num_bands(), 16);
        assert_eq!(p.span_hz(), 16e6);
        assert_eq!(p.nyquist_rate_hz(), 16e6);
        assert_eq!(p.band_edges_hz(15).unwrap(), (15e6, 16e6));

        let single = make_band_plan(1, 1e6).unwrap();
        assert_eq!(single.nyquist_rate_hz(), 1e6);

        let p4 = make_band_plan(4, 0.5e6).unwrap();
        assert_eq!(p4.span_hz(), 2e6);

        assert_eq!(make_band_plan(0, 1e6), Err(SignalError::NoBands));
        assert!(matches!(make_band_plan(4, 0.0), Err(SignalError::BadBandWidth(_))));
        assert!(matches!(make_band_plan(4, -1.0), Err(SignalError::BadBandWidth(_))));
    }

    #[test]
    fn atoms_are_orthogonal_with_band_energy() {
        let plan = make_band_plan(16, 1e6).unwrap();
        let atoms = BandAtoms::new(&plan, 256).unwrap();
        for a in 0..16 {
            for b in 0..16 {
                let ip: Complex64 = atoms
                    .atom(a)
                    .iter()
                    .zip(atoms.atom(b))
                    .map(|(x, y)| x * y.conj())
                    .sum();
                let expect = if a == b { 16.0 } else { 0.0 };
                assert!((ip - expect).norm() < 1e-9, "{a},{b}: {ip}");
            }
        }
        // envelope is spread over the block rather than a single pulse
        let peak = atoms.atom(3).iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
        let mean = atoms.atom_energy() / 256.0;
        assert!(peak / mean < 4.0, "peak-to-average {}", peak / mean);
    }

    #[test]
    fn wideband_concentrates_energy_in_active_bands() {
        let plan = make_band_plan(16, 1e6).unwrap();
        let mask = OccupancyMask::from_bands(16, &[1, 5, 9, 12]).unwrap();
        assert_eq!(mask.sparsity(), 4);
        let block = synth_wideband(&plan, &mask, 20.0, 4096, 7).unwrap();
        assert_eq!(block.label, Occupancy::Occupied);
        assert_eq!(block.len(), 4096);
        let bp = dft_band_power(&block, &plan);
        let active = mask.active_bands().iter().map(|&b| bp[b]).fold(f64::INFINITY, f64::min);
        let idle = (0..16).filter(|b| !mask.is_active(*b)).map(|b| bp[b]).fold(0.0, f64::max);
        assert!(linear_to_db(active / idle) >= 10.0);

        let mask7 = OccupancyMask::from_bands(16, &[0, 2, 4, 6, 8, 10, 14]).unwrap();
        let b7 = synth_wideband(&plan, &mask7, 20.0, 4096, 7).unwrap();
        let bp7 = dft_band_power(&b7, &plan);
        assert_eq!(bp7.iter().filter(|&&p| p > 10.0).count(), 7);
    }

    #[test]
    fn per_band_snr_matches_request() {
        let plan = make_band_plan(16, 1e6).unwrap();
        let mask = OccupancyMask::from_bands(16, &[0, 3, 7, 11]).unwrap();
        // a single block at 0 dB has about 0.5 dB of spread, so average 16
        let reps = 16;
        for (snr, seed) in [(0.0, 1), (5.0, 2), (10.0, 3), (20.0, 4)] {
            let mut bp = vec![0.0; 16];
            for r in 0..reps {
                let block = synth_wideband(&plan, &mask, snr, 4096, seed * 100 + r).unwrap();
                for (acc, p) in bp.iter_mut().zip(dft_band_power(&block, &plan)) {
                    *acc += p / reps as f64;
                }
            }
            for b in mask.active_bands() {
                let measured = linear_to_db((bp[b] - NOISE_POWER) / NOISE_POWER);
                assert!((measured - snr).abs() <= 0.5, "band {b}: {measured} vs {snr}");
            }
        }
    }

    #[test]
    fn vacant_mask_gives_noise_only() {
        let plan = make_band_plan(8, 1e6).unwrap();
        let block = synth_wideband(&plan, &OccupancyMask::vacant(8), 30.0, 1024, 3).unwrap();
        assert_eq!(block.label, Occupancy::Vacant);
        assert!((block.mean_power() - NOISE_POWER).abs() < 0.15);
        let quiet = synth_wideband_noiseless(&plan, &OccupancyMask::vacant(8), 30.0, 64, 3).unwrap();
        assert!(quiet.samples.iter().all(|z| *z == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn wideband_rejects_bad_inputs() {
        let plan = make_band_plan(16, 1e6).unwrap();
        let mask = OccupancyMask::vacant(8);
        assert!(matches!(
            synth_wideband(&plan, &mask, 0.0, 256, 0),
            Err(SignalError::MaskMismatch { .. })
        ));
        let mask = OccupancyMask::vacant(16);
        assert!(synth_wideband(&plan, &mask, 0.0, 8, 0).is_err());
        assert!(synth_wideband(&plan, &mask, 0.0, 100, 0).is_err());
    }

    #[test]
    fn cyclo_block_has_feature_at_symbol_rate() {
        let b = synth_narrowband(NarrowbandKind::Cyclo, 32, 0.0, 2048, 1).unwrap();
        let n = b.len() as f64;
        let caf = |alpha: f64| -> f64 {
            let acc: Complex64 = b
                .samples
                .iter()
                .enumerate()
                .map(|(t, x)| x.norm_sqr() * Complex64::from_polar(1.0, -2.0 * PI * alpha * t as f64))
                .sum();
            (acc / n).norm()
        };
        // |s|^2 = P(1 - cos(...)) gives a line of height P/2 at 1/32
        let at_rate = caf(1.0 / 32.0);
        assert!(at_rate > 0.3, "{at_rate}");
        assert!(caf(1.0 / 32.0 + 3.0 / n) < at_rate / 3.0);
        assert!(synth_narrowband(NarrowbandKind::Cyclo, 1, 0.0, 64, 1).is_err());
        assert!(synth_narrowband(NarrowbandKind::Cyclo, 30, 0.0, 64, 1).is_err());
    }

    #[test]
    fn noise_only_narrowband_is_vacant() {
        let b = synth_narrowband(NarrowbandKind::NoiseOnly, 0, 10.0, 1024, 2).unwrap();
        assert_eq!(b.label, Occupancy::Vacant);
        assert!((b.mean_power() - NOISE_POWER).abs() < 0.15);
    }

    #[test]
    fn template_block_correlates_with_template() {
        let b = synth_narrowband(NarrowbandKind::Template, 32, 10.0, 32, 3).unwrap();
        let t = template(TemplateId::default(), 32).unwrap();
        let ip: Complex64 = b.samples.iter().zip(&t).map(|(x, y)| x * y.conj()).sum();
        let bn = b.samples.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!(ip.norm() / bn > 0.9);
    }

    #[test]
    fn zadoff_chu_template_is_cazac() {
        let t = template(TemplateId::default(), 32).unwrap();
        for lag in 0..32 {
            let r: Complex64 = (0..32).map(|n| t[(n + lag) % 32] * t[n].conj()).sum();
            let expect = if lag == 0 { 1.0 } else { 0.0 };
            assert!((r - expect).norm() < 1e-12, "lag {lag}: {r}");
        }
        assert!(template(TemplateId { root: 2 }, 32).is_none());
        assert!(template(TemplateId { root: 2 }, 31).is_some());
    }

    #[test]
    fn timing_offsets() {
        let b = synth_narrowband(NarrowbandKind::Template, 32, 10.0, 64, 4).unwrap();
        assert_eq!(apply_timing_offset(&b, 0).unwrap(), b);
        let last = apply_timing_offset(&b, 63).unwrap();
        assert_eq!(last.samples[63], b.samples[0]);
        assert_eq!(last.label, b.label);
        assert!(apply_timing_offset(&b, 64).is_err());
        assert!(apply_timing_offset(&b, -64).is_err());
    }

    #[test]
    fn noise_estimate_perturbation() {
        assert_eq!(perturb_noise_estimate(1.0, 0.0, 123).unwrap(), 1.0);
        let one = perturb_noise_estimate(1.0, 0.5, 9).unwrap();
        assert!((10f64.powf(-0.05)..=10f64.powf(0.05)).contains(&one));
        assert_eq!(perturb_noise_estimate(2.0, 0.5, 9).unwrap(), 2.0 * one);
        assert!(perturb_noise_estimate(1.0, -0.1, 9).is_err());
    }

    proptest! {
        #[test]
        fn offset_round_trip(seed in any::<u64>(), k in -63i64..64) {
            let b = synth_narrowband(NarrowbandKind::NoiseOnly, 0, 0.0, 64, seed).unwrap();
            let back = apply_timing_offset(&apply_timing_offset(&b, k).unwrap(), -k).unwrap();
            prop_assert_eq!(back, b);
        }

        #[test]
        fn perturbation_stays_in_bounds(seed in any::<u64>(), u in 0.0f64..3.0, p in 0.01f64..100.0) {
            let est = perturb_noise_estimate(p, u, seed).unwrap();
            let lo = p * db_to_linear(-u) * (1.0 - 1e-12);
            let hi = p * db_to_linear(u) * (1.0 + 1e-12);
            prop_assert!(est >= lo && est <= hi);
        }

        #[test]
        fn synthesis_is_reproducible(seed in any::<u64>()) {
            let plan = make_band_plan(4, 1e6).unwrap();
            let mask = OccupancyMask::from_bands(4, &[1, 2]).unwrap();
            let a = synth_wideband(&plan, &mask, 3.0, 64, seed).unwrap();
            let b = synth_wideband(&plan, &mask, 3.0, 64, seed).unwrap();
            prop_assert_eq!(a, b);
            let c = synth_narrowband(NarrowbandKind::Cyclo, 8, 0.0, 64, seed).unwrap();
            let d = synth_narrowband(NarrowbandKind::Cyclo, 8, 0.0, 64, seed).unwrap();
            prop_assert_eq!(c, d);
        }
    }
}
