//! E-step posterior sampling of missing coordinates: rejection sampling
//! against the unnormalized full-law weight for the general case, and
//! exact Gaussian conditional sampling for linear SEMs with ignorable
//! missingness.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::likelihood::{target_log_density, LogDetEstimatorConfig, LogDetMode, NoiseModel};
use crate::missing::{log_prob_r, MnarModel};
use crate::numeric::log_normal_pdf;
use crate::sem::{InterventionMask, SemModel};
use crate::synth::Dataset;
use crate::{rng, Error, Result};

/// What to do when no proposal is accepted within `max_attempts`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    /// Keep the proposal with the highest importance ratio seen so far.
    BestWeight,
    /// Emit one final fresh proposal draw.
    ResampleProposal,
}

/// Rejection-sampler configuration. The proposal is a Gaussian centered at
/// the fixed-point completion of the record with `proposal_scale` times
/// the model's noise variance per missing coordinate. The envelope is
/// adapted per record from pilot draws and inflated by `c0_inflation`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectionConfig {
    pub proposal_scale: f64,
    pub c0_inflation: f64,
    pub pilot_draws: usize,
    pub max_attempts: usize,
    pub fallback: Fallback,
    pub draws_per_record: usize,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        Self {
            proposal_scale: 2.0,
            c0_inflation: 2.0,
            pilot_draws: 64,
            max_attempts: 200,
            fallback: Fallback::BestWeight,
            draws_per_record: 1,
        }
    }
}

impl RejectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proposal_scale <= 0.0
            || self.c0_inflation <= 0.0
            || self.max_attempts < 1
            || self.draws_per_record < 1
        {
            return Err(Error::InvalidConfig(
                "rejection config requires positive scale/inflation and at least one attempt"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// One completed record.
#[derive(Debug, Clone)]
pub struct ImputedRecord {
    pub x: DVector<f64>,
    pub r: Vec<u8>,
    pub s: Vec<u8>,
    pub attempts: usize,
    pub used_fallback: bool,
}

impl ImputedRecord {
    pub fn intervention_mask(&self) -> InterventionMask {
        InterventionMask::from_record(&self.s, &self.x)
    }

    pub fn skip_flags(&self) -> Vec<bool> {
        self.s.iter().map(|&v| v == 0).collect()
    }
}

/// A batch of completed records with acceptance statistics.
#[derive(Debug, Clone, Default)]
pub struct ImputedBatch {
    pub records: Vec<ImputedRecord>,
}

impl ImputedBatch {
    pub fn mean_attempts(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.attempts as f64).sum::<f64>() / self.records.len() as f64
    }

    pub fn fallback_count(&self) -> usize {
        self.records.iter().filter(|r| r.used_fallback).count()
    }
}

/// Interventional precision matrix of a linear SEM `x = b^T x + eps`
/// with intervened nodes replaced by independent standard normals:
/// `(I - D b^T)^T Mid^{-1} (I - D b^T)` with
/// `Mid = D diag(sigma^2) D + (I - D)`.
pub fn interventional_precision(
    b: &DMatrix<f64>,
    noise: &NoiseModel,
    iv: &InterventionMask,
) -> Result<DMatrix<f64>> {
    let k = b.nrows();
    if b.ncols() != k || noise.variances().len() != k || iv.k() != k {
        return Err(Error::DimensionMismatch(
            "precision inputs disagree on size".into(),
        ));
    }
    // A = I - D B^T: rows of B^T belonging to intervened nodes are cut
    let mut a = DMatrix::<f64>::identity(k, k);
    for row in 0..k {
        if iv.is_observed(row) {
            for col in 0..k {
                if col != row {
                    a[(row, col)] -= b[(col, row)];
                }
            }
        }
    }
    let mid_inv = DVector::from_fn(k, |j, _| {
        if iv.is_observed(j) {
            1.0 / noise.variances()[j]
        } else {
            1.0
        }
    });
    let mut scaled = a.clone();
    for row in 0..k {
        for col in 0..k {
            scaled[(row, col)] *= mid_inv[row];
        }
    }
    Ok(a.transpose() * scaled)
}

/// Conditional Gaussian over the missing block: precision is the missing
/// submatrix of the joint precision, mean solves against the observed
/// cross block.
pub fn gaussian_posterior(
    b: &DMatrix<f64>,
    noise: &NoiseModel,
    iv: &InterventionMask,
    observed_idx: &[usize],
    observed_vals: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = b.nrows();
    let missing_idx: Vec<usize> = (0..k).filter(|j| !observed_idx.contains(j)).collect();
    let m = missing_idx.len();
    if m == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let precision = interventional_precision(b, noise, iv)?;

    let prec_mm = DMatrix::from_fn(m, m, |a, c| precision[(missing_idx[a], missing_idx[c])]);
    let mut eta = DVector::zeros(m);
    for (slot, &mi) in missing_idx.iter().enumerate() {
        for (oslot, &oi) in observed_idx.iter().enumerate() {
            eta[slot] -= precision[(mi, oi)] * observed_vals[oslot];
        }
    }
    let chol = Cholesky::new(prec_mm.clone()).ok_or(Error::NotPositiveDefinite)?;
    let mean = chol.solve(&eta);
    Ok((mean, prec_mm))
}

/// Draws the missing block from `N(mean, precision^{-1})` given the
/// posterior parameters.
fn sample_conditional(
    mean: &DVector<f64>,
    precision: &DMatrix<f64>,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    let m = mean.len();
    let chol = Cholesky::new(precision.clone()).ok_or(Error::NotPositiveDefinite)?;
    let zeta = DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
    // precision = L L^T, so cov = L^{-T} L^{-1}: solve L^T u = zeta
    let u = chol
        .l()
        .transpose()
        .solve_upper_triangular(&zeta)
        .ok_or(Error::NotPositiveDefinite)?;
    Ok(mean + u)
}

/// Exact-posterior imputation for linear models with ignorable (MCAR/MAR)
/// missingness. `b` is the effective (masked) weight matrix.
pub fn impute_gaussian(
    data: &Dataset,
    b: &DMatrix<f64>,
    noise: &NoiseModel,
    seed: u64,
    epoch: u64,
) -> Result<ImputedBatch> {
    let records: Result<Vec<ImputedRecord>> = data
        .records()
        .par_iter()
        .enumerate()
        .map(|(idx, rec)| {
            let mut stream = rng::stream2(seed, rng::tag::ESTEP, epoch, idx as u64);
            let iv = rec.intervention_mask();
            let observed = rec.observed_indices();
            let missing = rec.missing_indices();
            let mut x = rec.y.clone();
            if missing.is_empty() {
                return Ok(ImputedRecord {
                    x,
                    r: rec.r.clone(),
                    s: rec.s.clone(),
                    attempts: 1,
                    used_fallback: false,
                });
            }
            let observed_vals = DVector::from_fn(observed.len(), |i, _| rec.y[observed[i]]);
            let (mean, precision) = gaussian_posterior(b, noise, &iv, &observed, &observed_vals)?;
            let draw = sample_conditional(&mean, &precision, &mut stream)?;
            for (slot, &mi) in missing.iter().enumerate() {
                x[mi] = draw[slot];
            }
            Ok(ImputedRecord {
                x,
                r: rec.r.clone(),
                s: rec.s.clone(),
                attempts: 1,
                used_fallback: false,
            })
        })
        .collect();
    Ok(ImputedBatch { records: records? })
}

/// Unnormalized log posterior weight of a completed record:
/// `log p(x | theta) + log p(r | x, phi)`.
#[allow(clippy::too_many_arguments)]
pub fn log_posterior_weight(
    x_full: &DVector<f64>,
    sem: &SemModel,
    mask: &DMatrix<f64>,
    noise: &NoiseModel,
    iv: &InterventionMask,
    mnar: &MnarModel,
    r: &[u8],
    skip: &[bool],
    mode: LogDetMode,
    ld_cfg: &LogDetEstimatorConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let target = target_log_density(sem, mask, noise, x_full, iv, mode, ld_cfg, rng)?;
    Ok(target + log_prob_r(mnar, r, x_full, skip))
}

/// Unnormalized posterior weight, `exp` of [`log_posterior_weight`].
#[allow(clippy::too_many_arguments)]
pub fn posterior_weight(
    x_full: &DVector<f64>,
    sem: &SemModel,
    mask: &DMatrix<f64>,
    noise: &NoiseModel,
    iv: &InterventionMask,
    mnar: &MnarModel,
    r: &[u8],
    mode: LogDetMode,
    ld_cfg: &LogDetEstimatorConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let skip: Vec<bool> = iv.intervened_indices().iter().fold(
        vec![false; x_full.len()],
        |mut acc, &i| {
            acc[i] = true;
            acc
        },
    );
    Ok(log_posterior_weight(
        x_full, sem, mask, noise, iv, mnar, r, &skip, mode, ld_cfg, rng,
    )?
    .exp())
}

/// Completion used as the proposal center: observed coordinates fixed at
/// their values, missing ones iterated to the fixed point of `F` with
/// zero noise, starting from zero.
fn fixed_point_completion(
    sem: &SemModel,
    mask: &DMatrix<f64>,
    y: &DVector<f64>,
    missing: &[usize],
) -> DVector<f64> {
    let mut x = y.clone();
    for &mi in missing {
        x[mi] = 0.0;
    }
    for _ in 0..60 {
        let fx = sem.forward(mask, &x);
        let mut change = 0.0f64;
        for &mi in missing {
            change = change.max((fx[mi] - x[mi]).abs());
            x[mi] = fx[mi];
        }
        if change < 1e-8 {
            break;
        }
    }
    x
}

/// Rejection-samples the missing block of every record against the
/// unnormalized full-law weight. The envelope constant is adapted from
/// pilot draws; proposals exceeding it re-raise the envelope and restart
/// the record. Records exhausting `max_attempts` take the configured
/// fallback.
#[allow(clippy::too_many_arguments)]
pub fn impute_rejection(
    data: &Dataset,
    sem: &SemModel,
    mask: &DMatrix<f64>,
    noise: &NoiseModel,
    mnar: &MnarModel,
    cfg: &RejectionConfig,
    mode: LogDetMode,
    ld_cfg: &LogDetEstimatorConfig,
    seed: u64,
    epoch: u64,
) -> Result<ImputedBatch> {
    cfg.validate()?;
    let records: Result<Vec<ImputedRecord>> = data
        .records()
        .par_iter()
        .enumerate()
        .map(|(idx, rec)| {
            let mut stream = rng::stream2(seed, rng::tag::ESTEP, epoch, idx as u64);
            impute_one_rejection(
                rec, sem, mask, noise, mnar, cfg, mode, ld_cfg, &mut stream, idx,
            )
        })
        .collect();
    Ok(ImputedBatch { records: records? })
}

#[allow(clippy::too_many_arguments)]
fn impute_one_rejection(
    rec: &crate::synth::Record,
    sem: &SemModel,
    mask: &DMatrix<f64>,
    noise: &NoiseModel,
    mnar: &MnarModel,
    cfg: &RejectionConfig,
    mode: LogDetMode,
    ld_cfg: &LogDetEstimatorConfig,
    stream: &mut rand_chacha::ChaCha8Rng,
    record_idx: usize,
) -> Result<ImputedRecord> {
    let missing = rec.missing_indices();
    if missing.is_empty() {
        return Ok(ImputedRecord {
            x: rec.y.clone(),
            r: rec.r.clone(),
            s: rec.s.clone(),
            attempts: 1,
            used_fallback: false,
        });
    }
    let iv = rec.intervention_mask();
    let skip = rec.skip_flags();
    let center = fixed_point_completion(sem, mask, &rec.y, &missing);
    let proposal_var: Vec<f64> = missing
        .iter()
        .map(|&mi| cfg.proposal_scale * noise.variances()[mi])
        .collect();

    let draw_proposal = |rng: &mut rand_chacha::ChaCha8Rng| -> (DVector<f64>, f64) {
        let mut x = center.clone();
        let mut log_q = 0.0;
        for (slot, &mi) in missing.iter().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            let dev = z * proposal_var[slot].sqrt();
            x[mi] = center[mi] + dev;
            log_q += log_normal_pdf(dev, proposal_var[slot]);
        }
        (x, log_q)
    };

    let log_weight = |x: &DVector<f64>, rng: &mut rand_chacha::ChaCha8Rng| -> Result<f64> {
        log_posterior_weight(x, sem, mask, noise, &iv, mnar, &rec.r, &skip, mode, ld_cfg, rng)
    };

    // pilot draws set the envelope
    let mut best_ratio = f64::NEG_INFINITY;
    let mut best_x = None;
    for _ in 0..cfg.pilot_draws.max(1) {
        let (x, log_q) = draw_proposal(stream);
        let lw = log_weight(&x, stream)?;
        let ratio = lw - log_q;
        if ratio > best_ratio {
            best_ratio = ratio;
            best_x = Some(x);
        }
    }
    if best_ratio == f64::NEG_INFINITY {
        return Err(Error::ProposalMismatch { record: record_idx });
    }
    let mut log_c0 = best_ratio + cfg.c0_inflation.ln();

    let mut attempts = 0usize;
    let mut restarts = 0usize;
    loop {
        if attempts >= cfg.max_attempts {
            // fallback
            let (x, used_fallback) = match cfg.fallback {
                Fallback::BestWeight => (best_x.clone().expect("pilot kept a draw"), true),
                Fallback::ResampleProposal => (draw_proposal(stream).0, true),
            };
            return Ok(ImputedRecord {
                x,
                r: rec.r.clone(),
                s: rec.s.clone(),
                attempts,
                used_fallback,
            });
        }
        attempts += 1;
        let (x, log_q) = draw_proposal(stream);
        let lw = log_weight(&x, stream)?;
        let ratio = lw - log_q;
        if ratio > best_ratio {
            best_ratio = ratio;
            best_x = Some(x.clone());
        }
        if ratio > log_c0 {
            // envelope violated: raise it and restart this record
            log_c0 = ratio + cfg.c0_inflation.ln();
            if restarts < 16 {
                restarts += 1;
                attempts = 0;
            }
            continue;
        }
        let u: f64 = stream.random();
        if u.ln() <= ratio - log_c0 {
            return Ok(ImputedRecord {
                x,
                r: rec.r.clone(),
                s: rec.s.clone(),
                attempts,
                used_fallback: false,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sem::LinearSem;
    use crate::synth::Record;
    use approx::assert_relative_eq;

    fn chain(b12: f64) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(2, 2);
        b[(0, 1)] = b12;
        b
    }

    #[test]
    fn precision_identity_case() {
        let noise = NoiseModel::isotropic(2, 1.0, false).unwrap();
        let prec = interventional_precision(
            &DMatrix::zeros(2, 2),
            &noise,
            &InterventionMask::observational(2),
        )
        .unwrap();
        assert!((prec - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn precision_chain_oracle() {
        // hand product (I - B) Lambda (I - B^T) for the observational chain
        let noise = NoiseModel::isotropic(2, 1.0, false).unwrap();
        let prec = interventional_precision(
            &chain(0.5),
            &noise,
            &InterventionMask::observational(2),
        )
        .unwrap();
        assert_relative_eq!(prec[(0, 0)], 1.25, epsilon = 1e-12);
        assert_relative_eq!(prec[(0, 1)], -0.5, epsilon = 1e-12);
        assert_relative_eq!(prec[(1, 0)], -0.5, epsilon = 1e-12);
        assert_relative_eq!(prec[(1, 1)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn intervened_chain_covariance() {
        // intervene node 0: x0 ~ N(0,1), x1 = 0.5 x0 + eps
        let noise = NoiseModel::isotropic(2, 0.5, false).unwrap();
        let prec = interventional_precision(
            &chain(0.5),
            &noise,
            &InterventionMask::clamp(2, &[(0, 0.0)]),
        )
        .unwrap();
        let cov = prec.try_inverse().unwrap();
        assert_relative_eq!(cov[(0, 0)], 1.0, epsilon = 1e-10);
        assert_relative_eq!(cov[(0, 1)], 0.5, epsilon = 1e-10);
        assert_relative_eq!(cov[(1, 1)], 0.25 + 0.25, epsilon = 1e-10);
    }

    #[test]
    fn posterior_matches_bruteforce_conditioning() {
        // brute-force oracle: invert the joint precision, condition the
        // covariance blocks, compare mean and re-inverted precision
        let mut rng = crate::rng::stream(61, 0, 0);
        for trial in 0..100 {
            let k = 5;
            let raw = DMatrix::from_fn(k, k, |j, l| {
                if j == l || rng.random::<f64>() < 0.5 {
                    0.0
                } else {
                    rng.random_range(-0.5..0.5)
                }
            });
            let b = {
                let norm = crate::graph::spectral_norm(&raw);
                if norm > 0.9 {
                    raw * (0.9 / norm)
                } else {
                    raw
                }
            };
            let noise =
                NoiseModel::new(DVector::from_fn(k, |_, _| rng.random_range(0.04..1.0)), false)
                    .unwrap();
            let iv = if trial % 2 == 0 {
                InterventionMask::observational(k)
            } else {
                InterventionMask::clamp(k, &[(trial % k, 0.3)])
            };
            let observed: Vec<usize> = (0..k).filter(|_| rng.random::<f64>() < 0.5).collect();
            if observed.len() == k || observed.is_empty() {
                continue;
            }
            let missing: Vec<usize> = (0..k).filter(|j| !observed.contains(j)).collect();
            let obs_vals = DVector::from_fn(observed.len(), |_, _| rng.random_range(-2.0..2.0));

            let (mean, prec) = gaussian_posterior(&b, &noise, &iv, &observed, &obs_vals).unwrap();

            let joint_prec = interventional_precision(&b, &noise, &iv).unwrap();
            let joint_cov = joint_prec.try_inverse().unwrap();
            let m = missing.len();
            let cov_mm = DMatrix::from_fn(m, m, |a, c| joint_cov[(missing[a], missing[c])]);
            let cov_mo = DMatrix::from_fn(m, observed.len(), |a, c| {
                joint_cov[(missing[a], observed[c])]
            });
            let cov_oo = DMatrix::from_fn(observed.len(), observed.len(), |a, c| {
                joint_cov[(observed[a], observed[c])]
            });
            let cov_oo_inv = cov_oo.try_inverse().unwrap();
            let mean_oracle = &cov_mo * &cov_oo_inv * &obs_vals;
            let cov_oracle = &cov_mm - &cov_mo * &cov_oo_inv * cov_mo.transpose();
            let prec_oracle = cov_oracle.try_inverse().unwrap();

            assert!((mean.clone() - mean_oracle).amax() < 1e-8, "trial {trial}");
            assert!((prec.clone() - prec_oracle).amax() < 1e-7, "trial {trial}");
        }
    }

    #[test]
    fn posterior_chain_example() {
        // chain 1->2 with b = 0.5, sigma = 1, observe x2 = 2:
        // joint cov [[1, 0.5], [0.5, 1.25]] so mean = 0.4 * 2, var = 0.8
        let noise = NoiseModel::isotropic(2, 1.0, false).unwrap();
        let (mean, prec) = gaussian_posterior(
            &chain(0.5),
            &noise,
            &InterventionMask::observational(2),
            &[1],
            &DVector::from_vec(vec![2.0]),
        )
        .unwrap();
        assert_relative_eq!(mean[0], 0.8, epsilon = 1e-12);
        assert_relative_eq!(1.0 / prec[(0, 0)], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn posterior_empty_and_independent_cases() {
        let noise = NoiseModel::isotropic(2, 0.7, false).unwrap();
        let (mean, prec) = gaussian_posterior(
            &DMatrix::zeros(2, 2),
            &noise,
            &InterventionMask::observational(2),
            &[0, 1],
            &DVector::from_vec(vec![1.0, 2.0]),
        )
        .unwrap();
        assert_eq!(mean.len(), 0);
        assert_eq!(prec.nrows(), 0);

        // B = 0: posterior is the prior marginal, independent of observations
        let (mean, prec) = gaussian_posterior(
            &DMatrix::zeros(2, 2),
            &noise,
            &InterventionMask::observational(2),
            &[1],
            &DVector::from_vec(vec![99.0]),
        )
        .unwrap();
        assert_relative_eq!(mean[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(prec[(0, 0)], 1.0 / 0.49, epsilon = 1e-10);
    }

    fn dataset_single_missing(k: usize, n: usize, y_obs: f64) -> Dataset {
        // records observe all coords but 0; coordinate 1 carries y_obs
        let mut data = Dataset::new(k);
        for _ in 0..n {
            let mut y = DVector::zeros(k);
            y[0] = f64::NAN;
            y[1] = y_obs;
            let mut r = vec![1u8; k];
            r[0] = 0;
            data.push(Record {
                y,
                r,
                s: vec![1; k],
            })
            .unwrap();
        }
        data
    }

    #[test]
    fn gaussian_imputation_matches_posterior_moments() {
        let b = chain(0.5);
        let noise = NoiseModel::isotropic(2, 1.0, false).unwrap();
        let data = dataset_single_missing(2, 10_000, 2.0);
        let batch = impute_gaussian(&data, &b, &noise, 7, 0).unwrap();

        let values: Vec<f64> = batch.records.iter().map(|r| r.x[0]).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let se_mean = (0.8f64 / n).sqrt();
        assert!((mean - 0.8).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - 0.8).abs() < 0.05, "var {var}");

        // observed coordinates are untouched, bit for bit
        for rec in &batch.records {
            assert_eq!(rec.x[1], 2.0);
        }
    }

    #[test]
    fn gaussian_imputation_passthrough_when_complete() {
        let b = chain(0.5);
        let noise = NoiseModel::isotropic(2, 1.0, false).unwrap();
        let mut data = Dataset::new(2);
        data.push(Record {
            y: DVector::from_vec(vec![0.3, -0.4]),
            r: vec![1, 1],
            s: vec![1, 1],
        })
        .unwrap();
        let batch = impute_gaussian(&data, &b, &noise, 7, 0).unwrap();
        assert_eq!(batch.records[0].x, DVector::from_vec(vec![0.3, -0.4]));
        assert_eq!(batch.records[0].attempts, 1);
    }

    #[test]
    fn marginal_variance_recovered_when_independent() {
        let b = DMatrix::zeros(2, 2);
        let noise = NoiseModel::isotropic(2, 0.5, false).unwrap();
        let data = dataset_single_missing(2, 10_000, 0.0);
        let batch = impute_gaussian(&data, &b, &noise, 11, 0).unwrap();
        let values: Vec<f64> = batch.records.iter().map(|r| r.x[0]).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((var - 0.25).abs() < 0.05 * 0.25, "var {var}");
    }

    #[test]
    fn rejection_matches_gaussian_posterior_under_mcar() {
        // MCAR: weights zero, so the acceptance ratio is independent of r
        let b = chain(0.5);
        let sem = SemModel::Linear(LinearSem::new(b.clone()).unwrap());
        let mask = SemModel::full_mask(2);
        let noise = NoiseModel::isotropic(2, 1.0, false).unwrap();
        let mnar = MnarModel::new(
            DMatrix::zeros(2, 2),
            DVector::repeat(2, -(0.9f64 / 0.1).ln()),
            None,
        )
        .unwrap();
        let data = dataset_single_missing(2, 5_000, 2.0);
        let batch = impute_rejection(
            &data,
            &sem,
            &mask,
            &noise,
            &mnar,
            &RejectionConfig::default(),
            LogDetMode::Exact,
            &LogDetEstimatorConfig::default(),
            13,
            0,
        )
        .unwrap();

        let values: Vec<f64> = batch.records.iter().map(|r| r.x[0]).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let se_mean = (0.8f64 / n).sqrt();
        // variance of the sample variance for a Gaussian: 2 var^2 / n
        let se_var = (2.0 * 0.8f64 * 0.8 / n).sqrt();
        assert!((mean - 0.8).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - 0.8).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn rejection_passthrough_when_complete() {
        let sem = SemModel::Linear(LinearSem::zeros(2));
        let mask = SemModel::full_mask(2);
        let noise = NoiseModel::isotropic(2, 1.0, false).unwrap();
        let mnar = MnarModel::never_missing(2);
        let mut data = Dataset::new(2);
        data.push(Record {
            y: DVector::from_vec(vec![1.0, 2.0]),
            r: vec![1, 1],
            s: vec![1, 1],
        })
        .unwrap();
        let batch = impute_rejection(
            &data,
            &sem,
            &mask,
            &noise,
            &mnar,
            &RejectionConfig::default(),
            LogDetMode::Exact,
            &LogDetEstimatorConfig::default(),
            13,
            0,
        )
        .unwrap();
        assert_eq!(batch.records[0].attempts, 1);
        assert_eq!(batch.records[0].x, DVector::from_vec(vec![1.0, 2.0]));
    }

    /// Dense-grid quadrature for the 2-node MNAR posterior of x0 given
    /// (x1 observed, r = (0, 1)): density proportional to
    /// p(x0) p(x1 | x0) p(r | x).
    fn quadrature_posterior(
        b12: f64,
        sigma: f64,
        w_102: f64,
        z: f64,
        x1: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let n = 4001;
        let lo = -8.0;
        let hi = 8.0;
        let step = (hi - lo) / (n - 1) as f64;
        let mut xs = Vec::with_capacity(n);
        let mut ws = Vec::with_capacity(n);
        for i in 0..n {
            let x0 = lo + step * i as f64;
            let p_x0 = (-x0 * x0 / (2.0 * sigma * sigma)).exp();
            let resid = x1 - b12 * x0;
            let p_x1 = (-resid * resid / (2.0 * sigma * sigma)).exp();
            // r_0 = 0 depends only on x1 (constant across the grid, kept for
            // completeness); r_1 = 1 tilts by 1 - expit(w x0 + z)
            let p_r1 = 1.0 - 1.0 / (1.0 + (-(w_102 * x0 + z)).exp());
            xs.push(x0);
            ws.push(p_x0 * p_x1 * p_r1);
        }
        let total: f64 = ws.iter().sum();
        for w in &mut ws {
            *w /= total;
        }
        (xs, ws)
    }

    #[test]
    fn rejection_matches_quadrature_under_mnar() {
        // x0 missing, x1 observed; R_1's factor depends on the missing x0,
        // so the posterior is genuinely tilted away from the MAR conditional
        let b12 = 0.5;
        let sigma = 1.0;
        let w_tilt = 2.0;
        let z = 0.0;
        let x1 = 1.0;

        let sem = SemModel::Linear(LinearSem::new(chain(b12)).unwrap());
        let mask = SemModel::full_mask(2);
        let noise = NoiseModel::isotropic(2, sigma, false).unwrap();
        let mut w = DMatrix::zeros(2, 2);
        w[(0, 1)] = w_tilt;
        let mnar = MnarModel::new(w, DVector::repeat(2, z), None).unwrap();

        let data = dataset_single_missing(2, 5_000, x1);
        let batch = impute_rejection(
            &data,
            &sem,
            &mask,
            &noise,
            &mnar,
            &RejectionConfig::default(),
            LogDetMode::Exact,
            &LogDetEstimatorConfig::default(),
            17,
            0,
        )
        .unwrap();
        let values: Vec<f64> = batch.records.iter().map(|r| r.x[0]).collect();

        let (xs, ws) = quadrature_posterior(b12, sigma, w_tilt, z, x1);
        let q_mean: f64 = xs.iter().zip(&ws).map(|(x, w)| x * w).sum();
        let q_var: f64 = xs
            .iter()
            .zip(&ws)
            .map(|(x, w)| (x - q_mean) * (x - q_mean) * w)
            .sum();

        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(
            (mean - q_mean).abs() < 3.0 * (q_var / n).sqrt(),
            "mean {mean} vs quadrature {q_mean}"
        );
        assert!(
            (var - q_var).abs() < 3.0 * (2.0 * q_var * q_var / n).sqrt(),
            "var {var} vs quadrature {q_var}"
        );
        // the MNAR tilt (w > 0 raises P(R1 = 0); observing R1 = 1 must push
        // x0 left of the MAR conditional mean)
        let mar_mean = 0.5 * x1 / (1.0 + 0.25);
        assert!(q_mean < mar_mean);
    }

    #[test]
    fn envelope_rescaling_preserves_distribution() {
        // two runs with very different initial envelopes: accepted samples
        // must agree in distribution (Kolmogorov-Smirnov at alpha = 0.01)
        let sem = SemModel::Linear(LinearSem::new(chain(0.5)).unwrap());
        let mask = SemModel::full_mask(2);
        let noise = NoiseModel::isotropic(2, 1.0, false).unwrap();
        let mnar = MnarModel::new(DMatrix::zeros(2, 2), DVector::zeros(2), None).unwrap();
        let data = dataset_single_missing(2, 4_000, 1.0);

        let run = |inflation: f64, seed: u64| -> Vec<f64> {
            let cfg = RejectionConfig {
                c0_inflation: inflation,
                ..RejectionConfig::default()
            };
            let batch = impute_rejection(
                &data,
                &sem,
                &mask,
                &noise,
                &mnar,
                &cfg,
                LogDetMode::Exact,
                &LogDetEstimatorConfig::default(),
                seed,
                0,
            )
            .unwrap();
            let mut v: Vec<f64> = batch.records.iter().map(|r| r.x[0]).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let small = run(1.5, 19);
        let big = run(20.0, 23);

        // two-sample KS statistic
        let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
        while i < small.len() && j < big.len() {
            if small[i] <= big[j] {
                i += 1;
            } else {
                j += 1;
            }
            let f1 = i as f64 / small.len() as f64;
            let f2 = j as f64 / big.len() as f64;
            d = d.max((f1 - f2).abs());
        }
        let n1 = small.len() as f64;
        let n2 = big.len() as f64;
        let crit = 1.6276 * ((n1 + n2) / (n1 * n2)).sqrt();
        assert!(d < crit, "KS statistic {d} exceeds critical value {crit}");
    }

    #[test]
    fn weight_factorizes_under_mcar() {
        // with w = 0 the r-likelihood is constant: weight ratios between two
        // completions are independent of r
        let sem = SemModel::Linear(LinearSem::new(chain(0.5)).unwrap());
        let mask = SemModel::full_mask(2);
        let noise = NoiseModel::isotropic(2, 1.0, false).unwrap();
        let mnar = MnarModel::new(DMatrix::zeros(2, 2), DVector::repeat(2, -1.2), None).unwrap();
        let iv = InterventionMask::observational(2);
        let cfg = LogDetEstimatorConfig::default();
        let mut rng = crate::rng::stream(71, 0, 0);

        let xa = DVector::from_vec(vec![0.5, 1.0]);
        let xb = DVector::from_vec(vec![-1.0, 1.0]);
        let w = |x: &DVector<f64>, r: &[u8], rng: &mut rand_chacha::ChaCha8Rng| {
            posterior_weight(
                x,
                &sem,
                &mask,
                &noise,
                &iv,
                &mnar,
                r,
                LogDetMode::Exact,
                &cfg,
                rng,
            )
            .unwrap()
        };
        let ratio_r0 = w(&xa, &[0, 1], &mut rng) / w(&xb, &[0, 1], &mut rng);
        let ratio_r1 = w(&xa, &[1, 1], &mut rng) / w(&xb, &[1, 1], &mut rng);
        assert_relative_eq!(ratio_r0, ratio_r1, epsilon = 1e-10);
        assert!(w(&xa, &[0, 1], &mut rng) >= 0.0);
    }

    #[test]
    fn deterministic_replay() {
        let sem = SemModel::Linear(LinearSem::new(chain(0.5)).unwrap());
        let mask = SemModel::full_mask(2);
        let noise = NoiseModel::isotropic(2, 1.0, false).unwrap();
        let mnar = MnarModel::new(DMatrix::zeros(2, 2), DVector::zeros(2), None).unwrap();
        let data = dataset_single_missing(2, 64, 1.0);
        let run = || {
            impute_rejection(
                &data,
                &sem,
                &mask,
                &noise,
                &mnar,
                &RejectionConfig::default(),
                LogDetMode::Exact,
                &LogDetEstimatorConfig::default(),
                29,
                3,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.x[0].to_bits(), rb.x[0].to_bits());
            assert_eq!(ra.attempts, rb.attempts);
        }
    }
}
