//! Compressive wideband sensing.
//!
//! A Nyquist-rate block of `L` samples is observed only at a random subset of
//! instants (the [`MeasurementOperator`]). Each band of the plan contributes a
//! known waveform (its [`BandAtoms`] atom), so the sub-sampled observation is
//! a linear combination of `num_bands` restricted atoms plus noise. The band
//! support is recovered with orthogonal greedy pursuit: at each step the band
//! whose restricted atom best correlates with the residual joins the support,
//! and all selected coefficients are re-fit by least squares.
//!
//! [`exhaustive_oracle`] solves the same least-squares problem for every
//! `k`-subset of bands and serves as the brute-force reference.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::index;
use rayon::prelude::*;
use thiserror::Error;

use crate::detectors::upper_quantile;
use crate::rng::{derive_seed, rng_from};
use crate::sigmodel::{BandAtoms, BandPlan, BasebandBlock, OccupancyMask, SignalError, NOISE_POWER};

/// Largest number of subsets [`exhaustive_oracle`] will evaluate.
pub const ORACLE_SUBSET_LIMIT: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CsError {
    #[error("compression ratio {ratio} infeasible for a grid of {grid_len} samples")]
    InfeasibleRatio { ratio: f64, grid_len: usize },
    #[error("block has {block} samples but the operator grid has {grid}")]
    LengthMismatch { block: usize, grid: usize },
    #[error("no measurements to recover from")]
    EmptyMeasurements,
    #[error("max_support {max_support} exceeds {num_bands} bands")]
    SupportTooLarge { max_support: usize, num_bands: usize },
    #[error("residual tolerance must be non-negative, got {0}")]
    BadTolerance(f64),
    #[error("energy threshold must be non-negative, got {0}")]
    NegativeThreshold(f64),
    #[error("exhaustive search over C({n}, {k}) = {count} subsets exceeds the limit")]
    OracleTooLarge { n: usize, k: usize, count: u64 },
    #[error("target false-alarm probability must lie in (0, 1), got {0}")]
    BadTargetPfa(f64),
    #[error("{samples} pooled band samples is below the floor of {needed} for the target")]
    InsufficientTrials { samples: usize, needed: usize },
    #[error(transparent)]
    Signal(#[from] SignalError),
}

pub type Result<T> = std::result::Result<T, CsError>;

/// Random time-domain sub-sampling of an `L`-point Nyquist grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    grid_len: usize,
    pattern: Vec<usize>,
    seed: u64,
}

impl MeasurementOperator {
    pub fn grid_len(&self) -> usize {
        self.grid_len
    }

    /// Selected sample indices, strictly increasing.
    pub fn pattern(&self) -> &[usize] {
        &self.pattern
    }

    pub fn compression_ratio(&self) -> f64 {
        self.pattern.len() as f64 / self.grid_len as f64
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Pick `round(ratio * grid_len)` distinct instants uniformly at random.
pub fn draw_sampling_pattern(grid_len: usize, ratio: f64, seed: u64) -> Result<MeasurementOperator> {
    if !(ratio > 0.0 && ratio <= 1.0) || (grid_len as f64) < 1.0 / ratio {
        return Err(CsError::InfeasibleRatio { ratio, grid_len });
    }
    let count = ((ratio * grid_len as f64).round() as usize).clamp(1, grid_len);
    let mut pattern = if count == grid_len {
        (0..grid_len).collect()
    } else {
        index::sample(&mut rng_from(seed), grid_len, count).into_vec()
    };
    pattern.sort_unstable();
    Ok(MeasurementOperator {
        grid_len,
        pattern,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedSamples {
    pub values: Vec<Complex64>,
    pub operator: MeasurementOperator,
}

pub fn measure(block: &BasebandBlock, op: &MeasurementOperator) -> Result<CompressedSamples> {
    if block.len() != op.grid_len {
        return Err(CsError::LengthMismatch {
            block: block.len(),
            grid: op.grid_len,
        });
    }
    Ok(CompressedSamples {
        values: op.pattern.iter().map(|&i| block.samples[i]).collect(),
        operator: op.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseEstimate {
    /// Recovered signal energy per band over one block; zero off the support.
    pub band_energies: Vec<f64>,
    /// Selected bands in ascending order.
    pub support: Vec<usize>,
    pub residual_norm: f64,
}

/// Band atoms restricted to the sampled instants of one operator.
struct RestrictedDictionary {
    columns: Vec<Vec<Complex64>>,
    norms_sqr: Vec<f64>,
    atom_energy: f64,
}

impl RestrictedDictionary {
    fn new(atoms: &BandAtoms, op: &MeasurementOperator) -> Result<Self> {
        if atoms.block_len() != op.grid_len {
            return Err(CsError::LengthMismatch {
                block: atoms.block_len(),
                grid: op.grid_len,
            });
        }
        let columns: Vec<Vec<Complex64>> = (0..atoms.plan().num_bands())
            .map(|b| {
                let a = atoms.atom(b);
                op.pattern.iter().map(|&i| a[i]).collect()
            })
            .collect();
        let norms_sqr = columns
            .iter()
            .map(|c| c.iter().map(|z| z.norm_sqr()).sum())
            .collect();
        Ok(Self {
            columns,
            norms_sqr,
            atom_energy: atoms.atom_energy(),
        })
    }

    fn num_bands(&self) -> usize {
        self.columns.len()
    }

    /// Least-squares fit of `y` on the columns in `support`.
    fn fit(&self, support: &[usize], y: &[Complex64]) -> (Vec<Complex64>, f64) {
        if support.is_empty() {
            return (Vec::new(), norm(y));
        }
        let rows = y.len();
        let a = DMatrix::from_fn(rows, support.len(), |r, c| self.columns[support[c]][r]);
        let rhs = DVector::from_column_slice(y);
        let coeffs = solve_least_squares(a.clone(), &rhs);
        let fitted = &a * &coeffs;
        let residual = (rhs - fitted).norm();
        (coeffs.iter().copied().collect(), residual)
    }

    fn estimate(&self, mut support: Vec<usize>, y: &[Complex64]) -> SparseEstimate {
        support.sort_unstable();
        let (coeffs, residual_norm) = self.fit(&support, y);
        let mut band_energies = vec![0.0; self.num_bands()];
        for (&b, c) in support.iter().zip(&coeffs) {
            band_energies[b] = c.norm_sqr() * self.atom_energy;
        }
        SparseEstimate {
            band_energies,
            support,
            residual_norm,
        }
    }
}

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn solve_least_squares(a: DMatrix<Complex64>, b: &DVector<Complex64>) -> DVector<Complex64> {
    let (rows, cols) = a.shape();
    if rows >= cols {
        let qr = a.clone().qr();
        let qtb = qr.q().adjoint() * b;
        if let Some(x) = qr.r().solve_upper_triangular(&qtb) {
            if x.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return x;
            }
        }
    }
    // rank-deficient or under-determined: minimum-norm solution
    a.svd(true, true)
        .solve(b, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(cols))
}

fn check_recovery_args(y: &CompressedSamples, plan: &BandPlan, max_support: usize, residual_tol: f64) -> Result<()> {
    if y.values.is_empty() {
        return Err(CsError::EmptyMeasurements);
    }
    if max_support > plan.num_bands() {
        return Err(CsError::SupportTooLarge {
            max_support,
            num_bands: plan.num_bands(),
        });
    }
    if !(residual_tol >= 0.0) {
        return Err(CsError::BadTolerance(residual_tol));
    }
    Ok(())
}

/// Greedy band recovery from sub-Nyquist samples.
///
/// Stops once the residual falls to `residual_tol * ‖y‖` or the support
/// holds `max_support` bands.
pub fn recover_sparse(
    y: &CompressedSamples,
    plan: &BandPlan,
    max_support: usize,
    residual_tol: f64,
) -> Result<SparseEstimate> {
    let atoms = BandAtoms::new(plan, y.operator.grid_len)?;
    recover_sparse_with(&atoms, y, max_support, residual_tol)
}

/// [`recover_sparse`] with precomputed atoms.
pub fn recover_sparse_with(
    atoms: &BandAtoms,
    y: &CompressedSamples,
    max_support: usize,
    residual_tol: f64,
) -> Result<SparseEstimate> {
    check_recovery_args(y, atoms.plan(), max_support, residual_tol)?;
    let dict = RestrictedDictionary::new(atoms, &y.operator)?;
    let target = residual_tol * norm(&y.values);
    let mut support: Vec<usize> = Vec::with_capacity(max_support);
    let mut residual = y.values.clone();

    while support.len() < max_support && norm(&residual) > target {
        let best = (0..dict.num_bands())
            .filter(|b| !support.contains(b) && dict.norms_sqr[*b] > 0.0)
            .map(|b| {
                let ip: Complex64 = dict.columns[b]
                    .iter()
                    .zip(&residual)
                    .map(|(a, r)| a.conj() * r)
                    .sum();
                (b, ip.norm_sqr() / dict.norms_sqr[b])
            })
            .fold(None::<(usize, f64)>, |acc, (b, s)| match acc {
                Some((_, best)) if best >= s => acc,
                _ => Some((b, s)),
            });
        let Some((band, _)) = best else { break };
        support.push(band);
        let (coeffs, _) = dict.fit(&support, &y.values);
        residual = y.values.clone();
        for (&b, c) in support.iter().zip(&coeffs) {
            for (r, a) in residual.iter_mut().zip(&dict.columns[b]) {
                *r -= c * a;
            }
        }
    }
    Ok(dict.estimate(support, &y.values))
}

/// Band `i` is occupied iff its recovered energy exceeds the threshold.
pub fn band_decisions(est: &SparseEstimate, energy_threshold: f64) -> Result<OccupancyMask> {
    if !(energy_threshold >= 0.0) {
        return Err(CsError::NegativeThreshold(energy_threshold));
    }
    Ok(OccupancyMask::new(
        est.band_energies.iter().map(|&e| e > energy_threshold).collect(),
    ))
}

fn n_choose_k(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

/// Lexicographic k-subsets of `0..n`.
struct Combinations {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            current: (k <= n).then(|| (0..k).collect()),
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let k = out.len();
        let mut next = out.clone();
        let mut i = k;
        loop {
            if i == 0 {
                self.current = None;
                break;
            }
            i -= 1;
            if next[i] < self.n - k + i {
                next[i] += 1;
                for j in i + 1..k {
                    next[j] = next[j - 1] + 1;
                }
                self.current = Some(next);
                break;
            }
        }
        Some(out)
    }
}

/// Minimum-residual `k`-band support by exhaustive search.
pub fn exhaustive_oracle(y: &CompressedSamples, plan: &BandPlan, k: usize) -> Result<SparseEstimate> {
    check_recovery_args(y, plan, k, 0.0)?;
    let n = plan.num_bands();
    let count = n_choose_k(n, k);
    if count > ORACLE_SUBSET_LIMIT {
        return Err(CsError::OracleTooLarge { n, k, count });
    }
    let atoms = BandAtoms::new(plan, y.operator.grid_len)?;
    let dict = RestrictedDictionary::new(&atoms, &y.operator)?;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for subset in Combinations::new(n, k) {
        let (_, res) = dict.fit(&subset, &y.values);
        if best.as_ref().is_none_or(|(_, r)| res < *r) {
            best = Some((subset, res));
        }
    }
    let (support, _) = best.expect("at least one subset");
    Ok(dict.estimate(support, &y.values))
}

/// One point of the compressive sensing sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct CsOperatingPoint {
    pub plan: BandPlan,
    pub block_len: usize,
    pub ratio: f64,
    pub max_support: usize,
    pub residual_tol: f64,
}

/// Per-band energy threshold calibrated on noise-only blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandThreshold {
    pub value: f64,
    pub target_pfa: f64,
    pub trials: usize,
}

/// Outcome of one sensing trial: pattern draw, measurement and recovery.
pub fn sense_once(
    point: &CsOperatingPoint,
    atoms: &BandAtoms,
    mask: &OccupancyMask,
    snr_db: f64,
    seed: u64,
) -> Result<SparseEstimate> {
    let op = draw_sampling_pattern(point.block_len, point.ratio, derive_seed(seed, &[0]))?;
    let block = atoms.synthesize(mask, snr_db, NOISE_POWER, derive_seed(seed, &[1]))?;
    let y = measure(&block, &op)?;
    recover_sparse_with(atoms, &y, point.max_support, point.residual_tol)
}

/// Pooled band energies of `trials` noise-only recoveries.
fn null_band_energies(point: &CsOperatingPoint, trials: usize, seed: u64) -> Result<Vec<f64>> {
    let atoms = BandAtoms::new(&point.plan, point.block_len)?;
    let vacant = OccupancyMask::vacant(point.plan.num_bands());
    let per_trial = (0..trials)
        .into_par_iter()
        .map(|i| sense_once(point, &atoms, &vacant, 0.0, derive_seed(seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_trial.into_iter().flat_map(|e| e.band_energies).collect())
}

/// Calibrate the band-energy threshold to a per-band false-alarm target.
///
/// Pools every band of every noise-only trial; the pooled sample count must
/// reach `100 / target_pfa`.
pub fn calibrate_band_threshold(
    point: &CsOperatingPoint,
    target_pfa: f64,
    trials: usize,
    seed: u64,
) -> Result<BandThreshold> {
    if !(target_pfa > 0.0 && target_pfa < 1.0) {
        return Err(CsError::BadTargetPfa(target_pfa));
    }
    let samples = trials * point.plan.num_bands();
    let needed = crate::detectors::min_calibration_trials(target_pfa);
    if samples < needed {
        return Err(CsError::InsufficientTrials { samples, needed });
    }
    let pooled = null_band_energies(point, trials, seed)?;
    Ok(BandThreshold {
        value: upper_quantile(pooled, target_pfa),
        target_pfa,
        trials,
    })
}

/// Per-band false-alarm rate of `threshold` on fresh noise-only trials.
pub fn measure_band_pfa(point: &CsOperatingPoint, threshold: f64, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(CsError::InsufficientTrials { samples: 0, needed: 1 });
    }
    let pooled = null_band_energies(point, trials, seed)?;
    let hits = pooled.iter().filter(|&&e| e > threshold).count();
    Ok(hits as f64 / pooled.len() as f64)
}
