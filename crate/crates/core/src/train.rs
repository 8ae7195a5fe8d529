//! Penalized EM driver: alternating theta/phi Adam updates on the
//! imputed-data objective, sparsity penalties, contractivity projection,
//! the optional acyclicity penalty, convergence tracking, and final graph
//! extraction.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::graph::{acyclicity_penalty, matrix_exp, EdgePattern};
use crate::impute::{impute_gaussian, impute_rejection, ImputedBatch, ImputedRecord, RejectionConfig};
use crate::likelihood::{
    target_log_density, target_log_density_grad, LogDetEstimatorConfig, LogDetMode, NoiseModel,
};
use crate::missing::{extract_m_edges, fit_complete_cases, log_prob_r_grad, MnarModel};
use crate::numeric::sigmoid;
use crate::sem::{GumbelMask, LinearSem, MlpSem, ParamGrad, SemGrad, SemModel};
use crate::synth::{Dataset, SemFamily};
use crate::{rng, Error, Result};

/// How the E-step fills in missing coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstepMode {
    /// Rejection sampling against the full-law weight; works for any
    /// model family and MNAR mechanisms.
    Rejection,
    /// Exact Gaussian conditional sampling; linear models with ignorable
    /// (MCAR/MAR) missingness only.
    GaussianExact,
}

/// Training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Mask-sparsity weight (expected L1 of the dependency mask).
    pub lambda1: f64,
    /// Missingness-sparsity weight (L1 of the indicator weights).
    pub lambda2: f64,
    /// Acyclicity-penalty weight; 0 disables the DAG constraint.
    pub lambda_dag: f64,
    pub estep_mode: EstepMode,
    /// `None` picks exact for linear learners and stochastic otherwise.
    pub logdet_mode: Option<LogDetMode>,
    pub seed: u64,
    /// Edge-strength threshold for graph extraction.
    pub edge_threshold: f64,
    /// Learner family; tanh uses a one-hidden-layer network.
    pub sem_family: SemFamily,
    pub hidden_dim: usize,
    pub lipschitz_target: f64,
    /// Noise scale the learner assumes (fixed unless `learn_variances`).
    pub noise_sigma: f64,
    pub learn_variances: bool,
    pub temperature: f64,
    /// Linear temperature anneal to 0.1 over the run.
    pub anneal_temperature: bool,
    /// Stop once parameters move less than 1e-5 for 5 consecutive epochs.
    pub early_stop: bool,
    pub rejection: RejectionConfig,
    pub logdet: LogDetEstimatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-2,
            lambda1: 1e-2,
            lambda2: 2e-3,
            lambda_dag: 0.0,
            estep_mode: EstepMode::Rejection,
            logdet_mode: None,
            seed: 0,
            edge_threshold: 0.1,
            sem_family: SemFamily::Linear,
            hidden_dim: 16,
            lipschitz_target: 0.9,
            noise_sigma: 0.25,
            learn_variances: false,
            temperature: 1.0,
            anneal_temperature: false,
            early_stop: false,
            rejection: RejectionConfig::default(),
            logdet: LogDetEstimatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda_dag < 0.0 {
            return Err(Error::InvalidConfig("penalty weights must be >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.noise_sigma <= 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be > 0".into()));
        }
        self.rejection.validate()?;
        self.logdet.validate()?;
        Ok(())
    }

    fn effective_logdet_mode(&self, model: &SemModel) -> LogDetMode {
        self.logdet_mode.unwrap_or_else(|| LogDetMode::auto(model))
    }
}

/// Per-epoch training diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Penalized objective on the epoch's imputed data.
    pub objective: f64,
    /// Standard error of the objective's Monte-Carlo mean.
    pub objective_se: f64,
    /// Unpenalized per-record log-likelihood proxy.
    pub proxy_loglik: f64,
    pub mean_attempts: f64,
    pub fallback_count: usize,
    pub lipschitz: f64,
}

/// Full parameter bundle plus optimizer state and history.
#[derive(Debug, Clone)]
pub struct FitState {
    pub sem: SemModel,
    pub mask: GumbelMask,
    pub noise: NoiseModel,
    pub mnar: MnarModel,
    pub history: Vec<EpochStats>,
    theta_opt: Adam,
    phi_opt: Adam,
}

/// Adam moments over a list of flat tensors.
#[derive(Debug, Clone)]
struct Adam {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Self {
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Ascent update for one tensor slot: returns `lr * mhat / (sqrt(vhat) + eps)`.
    fn update(&mut self, slot: usize, grad: &[f64], lr: f64) -> Vec<f64> {
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        assert_eq!(grad.len(), m.len());
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        grad.iter()
            .enumerate()
            .map(|(i, &g)| {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                lr * mhat / (vhat.sqrt() + ADAM_EPS)
            })
            .collect()
    }
}

fn theta_tensor_sizes(model: &SemModel, k: usize, learn_variances: bool) -> Vec<usize> {
    let mut sizes = match model {
        SemModel::Linear(_) => vec![k * k],
        SemModel::Mlp(m) => vec![
            m.hidden_dim() * k,
            m.hidden_dim(),
            k * m.hidden_dim(),
            k,
        ],
    };
    sizes.push(k * k); // mask logits
    if learn_variances {
        sizes.push(k);
    }
    sizes
}

impl FitState {
    /// Fresh state: small-random weights projected into the contractivity
    /// budget, neutral mask logits, complete-case missingness fit with a
    /// marginal-rate fallback.
    pub fn init(data: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let k = data.k();
        let mut init_rng = rng::stream(cfg.seed, rng::tag::INIT, 1);
        let mut sem = match cfg.sem_family {
            SemFamily::Linear => SemModel::Linear(LinearSem::random(k, 0.1, &mut init_rng)),
            SemFamily::Tanh => SemModel::Mlp(MlpSem::random(
                k,
                cfg.hidden_dim,
                crate::sem::Activation::Tanh,
                cfg.lipschitz_target,
                0.1,
                &mut init_rng,
            )),
        };
        sem.project_contractive(cfg.lipschitz_target);
        let mask = GumbelMask::neutral(k, cfg.temperature);
        let noise = NoiseModel::isotropic(k, cfg.noise_sigma, cfg.learn_variances)?;
        let mnar = match fit_complete_cases(data, k.saturating_sub(1).max(1)) {
            Ok(m) => m,
            Err(Error::NoCompleteCases) => marginal_mnar(data),
            Err(e) => return Err(e),
        };

        let theta_opt = Adam::new(&theta_tensor_sizes(&sem, k, cfg.learn_variances));
        let phi_opt = Adam::new(&[k * k, k]);
        Ok(Self {
            sem,
            mask,
            noise,
            mnar,
            history: Vec::new(),
            theta_opt,
            phi_opt,
        })
    }

    /// Flat copy of every learnable parameter, for convergence tracking.
    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match &self.sem {
            SemModel::Linear(m) => out.extend(m.weights().iter()),
            SemModel::Mlp(m) => {
                out.extend(m.w1().iter());
                out.extend(m.b1().iter());
                out.extend(m.w2().iter());
                out.extend(m.b2().iter());
            }
        }
        out.extend(self.mask.logits().iter());
        out.extend(self.mnar.weights().iter());
        out.extend(self.mnar.intercepts().iter());
        out.extend(self.noise.variances().iter());
        out
    }
}

/// Marginal-rate fallback when no complete case exists: zero weights,
/// Laplace-smoothed intercepts.
fn marginal_mnar(data: &Dataset) -> MnarModel {
    let k = data.k();
    let n = data.len() as f64;
    let z = DVector::from_fn(k, |j, _| {
        let miss = data.records().iter().filter(|r| r.r[j] == 0).count() as f64;
        let p = (miss + 1.0) / (n + 2.0);
        (p / (1.0 - p)).ln()
    });
    MnarModel::new(DMatrix::zeros(k, k), z, None).expect("square by construction")
}

/// Monte-Carlo estimate of the expected complete-data log-likelihood on an
/// imputed batch: mean and standard error of
/// `target_log_density + log p(r | x)` per record, evaluated at the mean
/// mask.
pub fn q_objective(
    batch: &ImputedBatch,
    state: &FitState,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    if batch.records.is_empty() {
        return Err(Error::InvalidConfig("empty imputed batch".into()));
    }
    let mask = state.mask.mean_mask();
    let mode = cfg.effective_logdet_mode(&state.sem);
    let mut values = Vec::with_capacity(batch.records.len());
    for (idx, rec) in batch.records.iter().enumerate() {
        let mut record_rng = rng::stream2(cfg.seed, rng::tag::LOGDET, u64::MAX, idx as u64);
        let iv = rec.intervention_mask();
        let target = target_log_density(
            &state.sem,
            &mask,
            &state.noise,
            &rec.x,
            &iv,
            mode,
            &cfg.logdet,
            &mut record_rng,
        )?;
        let r_term = crate::missing::log_prob_r(&state.mnar, &rec.r, &rec.x, &rec.skip_flags());
        values.push(target + r_term);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let se = (var / n).sqrt();
    Ok((mean, se))
}

/// Total penalty: mask sparsity, missingness sparsity, and the optional
/// acyclicity term, all on the current parameters.
pub fn penalty_value(state: &FitState, cfg: &TrainConfig) -> f64 {
    let mean_mask = state.mask.mean_mask();
    let mut total = cfg.lambda1 * mean_mask.iter().map(|v| v.abs()).sum::<f64>();
    total += cfg.lambda2 * state.mnar.weights().iter().map(|v| v.abs()).sum::<f64>();
    if cfg.lambda_dag > 0.0 {
        total +=
            cfg.lambda_dag * acyclicity_penalty(&mean_mask).expect("mean mask is square");
    }
    total
}

/// One M-step pass: minibatch Adam ascent on the penalized objective,
/// theta and phi on alternating minibatches, with spectral projection
/// after every theta update.
pub fn m_step(
    batch: &ImputedBatch,
    state: &mut FitState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    let n = batch.records.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng::stream2(cfg.seed, rng::tag::SHUFFLE, epoch as u64, 0);
    for i in (1..n).rev() {
        let j = rand::Rng::random_range(&mut shuffle_rng, 0..=i);
        order.swap(i, j);
    }
    let n_batches = n.div_ceil(cfg.batch_size);
    let mode = cfg.effective_logdet_mode(&state.sem);

    for batch_idx in 0..n_batches {
        let lo = batch_idx * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(n);
        let slice: Vec<&ImputedRecord> = order[lo..hi].iter().map(|&i| &batch.records[i]).collect();
        let global_step = epoch * n_batches + batch_idx;
        if global_step % 2 == 0 {
            theta_update(state, cfg, &slice, mode, epoch, batch_idx)?;
        } else {
            phi_update(state, cfg, &slice, epoch)?;
        }
    }
    Ok(())
}

fn theta_update(
    state: &mut FitState,
    cfg: &TrainConfig,
    slice: &[&ImputedRecord],
    mode: LogDetMode,
    epoch: usize,
    batch_idx: usize,
) -> Result<()> {
    let k = state.sem.k();
    let scale = 1.0 / slice.len() as f64;
    let mut mask_rng = rng::stream2(cfg.seed, rng::tag::MASK_SAMPLE, epoch as u64, batch_idx as u64);
    let sample = state.mask.sample(&mut mask_rng);
    let mask_values = sample.values();

    let mut grad = SemGrad::zeros_like(&state.sem);
    let mut noise_grad = DVector::zeros(k);
    for (slot, rec) in slice.iter().enumerate() {
        let mut record_rng = rng::stream2(
            cfg.seed,
            rng::tag::LOGDET,
            (epoch * 100_000 + batch_idx) as u64,
            slot as u64,
        );
        let iv = rec.intervention_mask();
        let (_, ng) = target_log_density_grad(
            &state.sem,
            &mask_values,
            &state.noise,
            &rec.x,
            &iv,
            mode,
            &cfg.logdet,
            &mut record_rng,
            &mut grad,
            scale,
        )?;
        if let Some(ng) = ng {
            noise_grad += ng;
        }
    }

    // mask-logit gradient: likelihood term through the sampled relaxation,
    // penalties through the closed-form mean mask
    let mut logit_grad = sample.logit_grad(&grad.mask);
    let logits = state.mask.logits().clone();
    let dag_grad = if cfg.lambda_dag > 0.0 {
        let mean = state.mask.mean_mask();
        let expm = matrix_exp(&mean.component_mul(&mean));
        Some(expm.transpose().component_mul(&(2.0 * &mean)))
    } else {
        None
    };
    for j in 0..k {
        for l in 0..k {
            if j == l {
                continue;
            }
            let s = sigmoid(logits[(j, l)]);
            let dsig = s * (1.0 - s);
            logit_grad[(j, l)] -= cfg.lambda1 * dsig;
            if let Some(dg) = &dag_grad {
                logit_grad[(j, l)] -= cfg.lambda_dag * dg[(j, l)] * dsig;
            }
        }
    }

    if !grad.is_finite() || logit_grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { epoch });
    }

    // Adam ascent over the theta tensors
    state.theta_opt.begin_step();
    let mut slot = 0;
    match (&mut state.sem, &grad.params) {
        (SemModel::Linear(_), ParamGrad::Linear { b }) => {
            let flat: Vec<f64> = b.iter().copied().collect();
            let upd = state.theta_opt.update(slot, &flat, cfg.learning_rate);
            slot += 1;
            let delta = DMatrix::from_vec(k, k, upd);
            state
                .sem
                .apply_param_update(&ParamGrad::Linear { b: delta });
        }
        (SemModel::Mlp(m), ParamGrad::Mlp { w1, b1, w2, b2 }) => {
            let h = m.hidden_dim();
            let uw1 = state
                .theta_opt
                .update(slot, &w1.iter().copied().collect::<Vec<_>>(), cfg.learning_rate);
            let ub1 = state
                .theta_opt
                .update(slot + 1, b1.as_slice(), cfg.learning_rate);
            let uw2 = state
                .theta_opt
                .update(slot + 2, &w2.iter().copied().collect::<Vec<_>>(), cfg.learning_rate);
            let ub2 = state
                .theta_opt
                .update(slot + 3, b2.as_slice(), cfg.learning_rate);
            slot += 4;
            state.sem.apply_param_update(&ParamGrad::Mlp {
                w1: DMatrix::from_vec(h, k, uw1),
                b1: DVector::from_vec(ub1),
                w2: DMatrix::from_vec(k, h, uw2),
                b2: DVector::from_vec(ub2),
            });
        }
        _ => unreachable!("gradient family mismatch"),
    }

    let flat_logit_grad: Vec<f64> = logit_grad.iter().copied().collect();
    let upd = state
        .theta_opt
        .update(slot, &flat_logit_grad, cfg.learning_rate);
    {
        let delta = DMatrix::from_vec(k, k, upd);
        let logits = state.mask.logits_mut();
        *logits += delta;
        logits.fill_diagonal(0.0);
    }

    if cfg.learn_variances {
        let upd = state
            .theta_opt
            .update(slot + 1, noise_grad.as_slice(), cfg.learning_rate);
        state.noise.apply_log_update(&DVector::from_vec(upd));
    }

    state.sem.project_contractive(cfg.lipschitz_target);
    Ok(())
}

fn phi_update(
    state: &mut FitState,
    cfg: &TrainConfig,
    slice: &[&ImputedRecord],
    epoch: usize,
) -> Result<()> {
    let k = state.sem.k();
    let scale = 1.0 / slice.len() as f64;
    let mut gw = DMatrix::zeros(k, k);
    let mut gz = DVector::zeros(k);
    for rec in slice {
        log_prob_r_grad(
            &state.mnar,
            &rec.r,
            &rec.x,
            &rec.skip_flags(),
            scale,
            &mut gw,
            &mut gz,
        );
    }
    // L1 subgradient with sign(0) = 0
    for j in 0..k {
        for l in 0..k {
            if j != l {
                gw[(j, l)] -= cfg.lambda2 * gw_sign(state.mnar.weights()[(j, l)]);
            }
        }
    }
    if gw.iter().any(|v| !v.is_finite()) || gz.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { epoch });
    }

    state.phi_opt.begin_step();
    let uw = state
        .phi_opt
        .update(0, &gw.iter().copied().collect::<Vec<_>>(), cfg.learning_rate);
    let uz = state.phi_opt.update(1, gz.as_slice(), cfg.learning_rate);
    state
        .mnar
        .apply_update(&DMatrix::from_vec(k, k, uw), &DVector::from_vec(uz));
    Ok(())
}

fn gw_sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// E-step imputation against the frozen snapshot in `state`.
fn e_step(
    data: &Dataset,
    state: &FitState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<ImputedBatch> {
    if !data.has_missing() {
        // pass-through: the expectation is the data itself
        let records = data
            .records()
            .iter()
            .map(|rec| ImputedRecord {
                x: rec.y.clone(),
                r: rec.r.clone(),
                s: rec.s.clone(),
                attempts: 1,
                used_fallback: false,
            })
            .collect();
        return Ok(ImputedBatch { records });
    }
    let mean_mask = state.mask.mean_mask();
    match cfg.estep_mode {
        EstepMode::GaussianExact => {
            let SemModel::Linear(lin) = &state.sem else {
                return Err(Error::InvalidConfig(
                    "gaussian-exact E-step requires the linear model family".into(),
                ));
            };
            let b_eff = lin.weights().component_mul(&mean_mask);
            impute_gaussian(data, &b_eff, &state.noise, cfg.seed, epoch as u64)
        }
        EstepMode::Rejection => impute_rejection(
            data,
            &state.sem,
            &mean_mask,
            &state.noise,
            &state.mnar,
            &cfg.rejection,
            cfg.effective_logdet_mode(&state.sem),
            &cfg.logdet,
            cfg.seed,
            epoch as u64,
        ),
    }
}

/// Runs the full EM loop and returns the fitted state with history.
pub fn run_em(data: &Dataset, cfg: &TrainConfig) -> Result<FitState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    if cfg.estep_mode == EstepMode::GaussianExact && cfg.sem_family != SemFamily::Linear {
        return Err(Error::InvalidConfig(
            "gaussian-exact E-step requires the linear model family".into(),
        ));
    }

    let mut state = FitState::init(data, cfg)?;
    let mut stall = 0usize;
    let mut prev_params = state.flat_params();

    for epoch in 0..cfg.epochs {
        if cfg.anneal_temperature && cfg.epochs > 1 {
            let frac = epoch as f64 / (cfg.epochs - 1) as f64;
            state.mask.set_temperature(1.0 + frac * (0.1 - 1.0));
        }

        let batch = e_step(data, &state, cfg, epoch)?;
        m_step(&batch, &mut state, cfg, epoch)?;

        let (q_mean, q_se) = q_objective(&batch, &state, cfg)?;
        let pen = penalty_value(&state, cfg);
        state.history.push(EpochStats {
            epoch,
            objective: q_mean - pen,
            objective_se: q_se,
            proxy_loglik: q_mean,
            mean_attempts: batch.mean_attempts(),
            fallback_count: batch.fallback_count(),
            lipschitz: state.sem.lipschitz_bound(),
        });

        if cfg.early_stop {
            let params = state.flat_params();
            let delta = params
                .iter()
                .zip(&prev_params)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            prev_params = params;
            if delta < 1e-5 {
                stall += 1;
                if stall >= 5 {
                    break;
                }
            } else {
                stall = 0;
            }
        }
    }

    // closing exact M-step for phi: the logistic subproblem is convex, so
    // one proximal solve on a fresh imputation removes the stochastic
    // optimizer's stationary noise from the mechanism estimate
    if data.has_missing() {
        let batch = e_step(data, &state, cfg, cfg.epochs)?;
        polish_phi(&batch, &mut state, cfg)?;
    }
    Ok(state)
}

/// Solves the phi M-step to convergence on a completed batch.
fn polish_phi(batch: &ImputedBatch, state: &mut FitState, cfg: &TrainConfig) -> Result<()> {
    let k = state.sem.k();
    let mut w = DMatrix::zeros(k, k);
    let mut z = DVector::zeros(k);
    for target in 0..k {
        let rows: Vec<(&DVector<f64>, f64)> = batch
            .records
            .iter()
            .filter(|rec| rec.s[target] == 1)
            .map(|rec| (&rec.x, 1.0 - f64::from(rec.r[target])))
            .collect();
        let (wk, zk) = crate::missing::fit_indicator(&rows, k, target, cfg.lambda2);
        z[target] = zk;
        for j in 0..k {
            if j != target {
                w[(j, target)] = wk[j];
            }
        }
    }
    state.mnar = MnarModel::new(w, z, None)?;
    Ok(())
}

/// EM with the acyclicity penalty enabled; with `lambda_dag = 0` this is
/// exactly [`run_em`]. Use [`extract_graph_acyclic`] on the result.
pub fn run_em_dag(data: &Dataset, cfg: &TrainConfig) -> Result<FitState> {
    run_em(data, cfg)
}

/// Edge strengths of a fitted model under the hard mask: absolute weights
/// for the linear family, mean absolute Jacobian sensitivity over
/// standard-normal probes for the network.
fn edge_strengths(sem: &SemModel, mask: &GumbelMask) -> DMatrix<f64> {
    let k = sem.k();
    let hard_mask = DMatrix::from_fn(k, k, |j, l| {
        if j != l && sigmoid(mask.logits()[(j, l)]) > 0.5 {
            1.0
        } else {
            0.0
        }
    });
    match sem {
        SemModel::Linear(m) => m.weights().map(f64::abs),
        SemModel::Mlp(_) => {
            let probes = 256;
            let mut strength = DMatrix::zeros(k, k);
            let mut probe_rng = rng::stream(0x5eed, rng::tag::INIT, 2);
            for _ in 0..probes {
                let x = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut probe_rng));
                let cache = sem.cache(&hard_mask, &x);
                for j in 0..k {
                    let mut e = DVector::zeros(k);
                    e[j] = 1.0;
                    let col = sem.jvp(&hard_mask, &cache, &e);
                    for l in 0..k {
                        strength[(j, l)] += col[l].abs();
                    }
                }
            }
            strength / probes as f64
        }
    }
}

/// Graph extraction from raw parts: a target edge needs mask probability
/// above one half and edge strength above the threshold; missingness edges
/// come from the fitted indicator weights.
pub fn extract_graph_parts(
    sem: &SemModel,
    mask: &GumbelMask,
    mnar: &MnarModel,
    threshold: f64,
) -> (EdgePattern, EdgePattern) {
    let k = sem.k();
    let strengths = edge_strengths(sem, mask);
    let mut target = EdgePattern::empty(k).expect("k >= 1");
    for j in 0..k {
        for l in 0..k {
            if j != l && sigmoid(mask.logits()[(j, l)]) > 0.5 && strengths[(j, l)] > threshold {
                target.set_edge(j, l, true);
            }
        }
    }
    let m_edges = extract_m_edges(mnar, threshold);
    (target, m_edges)
}

/// As [`extract_graph_parts`], then greedily prunes the weakest edges
/// until the trace-exponential penalty certifies acyclicity.
pub fn extract_graph_parts_acyclic(
    sem: &SemModel,
    mask: &GumbelMask,
    mnar: &MnarModel,
    threshold: f64,
) -> (EdgePattern, EdgePattern) {
    let (mut target, m_edges) = extract_graph_parts(sem, mask, mnar, threshold);
    let strengths = edge_strengths(sem, mask);
    while acyclicity_penalty(&target.to_matrix()).expect("square") >= 1e-6 {
        let weakest = target
            .iter_edges()
            .min_by(|&(aj, al), &(bj, bl)| strengths[(aj, al)].total_cmp(&strengths[(bj, bl)]));
        match weakest {
            Some((j, l)) => target.set_edge(j, l, false),
            None => break,
        }
    }
    (target, m_edges)
}

/// Final graphs of a fitted state.
pub fn extract_graph(state: &FitState, threshold: f64) -> (EdgePattern, EdgePattern) {
    extract_graph_parts(&state.sem, &state.mask, &state.mnar, threshold)
}

/// Final graphs of a DAG-constrained fit.
pub fn extract_graph_acyclic(state: &FitState, threshold: f64) -> (EdgePattern, EdgePattern) {
    extract_graph_parts_acyclic(&state.sem, &state.mask, &state.mnar, threshold)
}
