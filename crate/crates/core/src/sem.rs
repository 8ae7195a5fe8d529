//! Parametric causal mechanisms: linear and masked one-hidden-layer
//! network structural equations, Gumbel-softmax dependency masks,
//! spectral-norm contractivity enforcement, interventional residual maps,
//! fixed-point simulation, and hand-derived gradients.
//!
//! Conventions. A model realizes `F(x)` with coordinate `k` depending on
//! the masked input `mask[:,k] o x`; the mask diagonal is always zero so
//! no coordinate feeds itself. The linear family is `F(x) = (M o B)^T x`
//! with `B[(j,k)]` the coefficient of `x_j` in the equation for `x_k`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::graph::spectral_norm;
use crate::numeric::sigmoid;
use crate::{Error, Result};

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

/// Linear SEM weights, zero diagonal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearSem {
    b: DMatrix<f64>,
}

impl LinearSem {
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        if b.nrows() != b.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "linear SEM weights must be square, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        let mut b = b;
        b.fill_diagonal(0.0);
        Ok(Self { b })
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            b: DMatrix::zeros(k, k),
        }
    }

    /// Small random weights (entries N(0, scale^2)), zero diagonal.
    pub fn random(k: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let normal = rand_distr::Normal::new(0.0, scale).expect("valid scale");
        let mut b = DMatrix::from_fn(k, k, |_, _| normal.sample(rng));
        b.fill_diagonal(0.0);
        Self { b }
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.b
    }
}

/// Masked one-hidden-layer network SEM. One network is shared across
/// outputs; coordinate `k` reads the input masked by column `k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSem {
    /// Hidden-by-input weights.
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    /// Output-by-hidden weights.
    w2: DMatrix<f64>,
    b2: DVector<f64>,
    activation: Activation,
    lipschitz_target: f64,
}

impl MlpSem {
    pub fn new(
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        b2: DVector<f64>,
        activation: Activation,
        lipschitz_target: f64,
    ) -> Result<Self> {
        let (h, k) = (w1.nrows(), w1.ncols());
        if b1.len() != h || w2.nrows() != k || w2.ncols() != h || b2.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "mlp shapes disagree: w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                h,
                k,
                b1.len(),
                w2.nrows(),
                w2.ncols(),
                b2.len()
            )));
        }
        if !(0.0 < lipschitz_target && lipschitz_target <= 1.0) {
            return Err(Error::InvalidConfig(
                "lipschitz_target must lie in (0, 1]".into(),
            ));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            activation,
            lipschitz_target,
        })
    }

    pub fn random(
        k: usize,
        hidden: usize,
        activation: Activation,
        lipschitz_target: f64,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = rand_distr::Normal::new(0.0, scale).expect("valid scale");
        Self {
            w1: DMatrix::from_fn(hidden, k, |_, _| normal.sample(rng)),
            b1: DVector::zeros(hidden),
            w2: DMatrix::from_fn(k, hidden, |_, _| normal.sample(rng)),
            b2: DVector::zeros(k),
            activation,
            lipschitz_target,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn w1(&self) -> &DMatrix<f64> {
        &self.w1
    }

    pub fn b1(&self) -> &DVector<f64> {
        &self.b1
    }

    pub fn w2(&self) -> &DMatrix<f64> {
        &self.w2
    }

    pub fn b2(&self) -> &DVector<f64> {
        &self.b2
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn lipschitz_target(&self) -> f64 {
        self.lipschitz_target
    }

    fn act(&self, z: f64) -> f64 {
        match self.activation {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
        }
    }
}

/// Gumbel-softmax dependency mask over edges. The diagonal is frozen:
/// sampled masks always carry zero there and logit gradients vanish.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GumbelMask {
    logits: DMatrix<f64>,
    temperature: f64,
    hard: bool,
}

impl GumbelMask {
    pub fn new(logits: DMatrix<f64>, temperature: f64, hard: bool) -> Result<Self> {
        if logits.nrows() != logits.ncols() {
            return Err(Error::DimensionMismatch("mask logits must be square".into()));
        }
        if temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        let mut logits = logits;
        logits.fill_diagonal(0.0);
        Ok(Self {
            logits,
            temperature,
            hard,
        })
    }

    /// All-zero logits (every edge at probability one half).
    pub fn neutral(k: usize, temperature: f64) -> Self {
        Self {
            logits: DMatrix::zeros(k, k),
            temperature,
            hard: false,
        }
    }

    pub fn k(&self) -> usize {
        self.logits.nrows()
    }

    pub fn logits(&self) -> &DMatrix<f64> {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.logits
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, tau: f64) {
        assert!(tau > 0.0);
        self.temperature = tau;
    }

    /// Edge-probability matrix `sigmoid(logits)` with zero diagonal.
    pub fn mean_mask(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |j, l| {
            if j == l {
                0.0
            } else {
                sigmoid(self.logits[(j, l)])
            }
        })
    }

    /// Chains a gradient w.r.t. the mean mask back to the logits.
    pub fn mean_mask_logit_grad(&self, mask_grad: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |j, l| {
            if j == l {
                0.0
            } else {
                let s = sigmoid(self.logits[(j, l)]);
                mask_grad[(j, l)] * s * (1.0 - s)
            }
        })
    }

    /// One Gumbel-softmax draw.
    pub fn sample(&self, rng: &mut impl Rng) -> MaskSample {
        let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
        let k = self.k();
        let soft = DMatrix::from_fn(k, k, |j, l| {
            if j == l {
                // burn no randomness on the frozen diagonal
                0.0
            } else {
                let g1: f64 = gumbel.sample(rng);
                let g0: f64 = gumbel.sample(rng);
                sigmoid((self.logits[(j, l)] + g1 - g0) / self.temperature)
            }
        });
        MaskSample {
            soft,
            temperature: self.temperature,
            hard: self.hard,
        }
    }
}

/// A realized mask draw. `values()` is what the forward pass sees; the
/// logit gradient always flows through the soft values (straight-through
/// when hard).
#[derive(Debug, Clone)]
pub struct MaskSample {
    soft: DMatrix<f64>,
    temperature: f64,
    hard: bool,
}

impl MaskSample {
    pub fn soft(&self) -> &DMatrix<f64> {
        &self.soft
    }

    pub fn values(&self) -> DMatrix<f64> {
        if self.hard {
            self.soft.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
        } else {
            self.soft.clone()
        }
    }

    /// Chains a gradient w.r.t. mask entries back to the logits through
    /// the soft relaxation: `dM/dgamma = M (1 - M) / tau`.
    pub fn logit_grad(&self, mask_grad: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.soft.nrows();
        DMatrix::from_fn(k, k, |j, l| {
            if j == l {
                0.0
            } else {
                let m = self.soft[(j, l)];
                mask_grad[(j, l)] * m * (1.0 - m) / self.temperature
            }
        })
    }
}

/// Hard intervention state for one record: `d[k] = 1` iff node `k` is
/// purely observed, `c[k]` carries the clamp value of intervened nodes.
#[derive(Debug, Clone)]
pub struct InterventionMask {
    d: DVector<f64>,
    c: DVector<f64>,
}

impl InterventionMask {
    pub fn observational(k: usize) -> Self {
        Self {
            d: DVector::repeat(k, 1.0),
            c: DVector::zeros(k),
        }
    }

    /// Clamp the listed nodes to the given values.
    pub fn clamp(k: usize, intervened: &[(usize, f64)]) -> Self {
        let mut iv = Self::observational(k);
        for &(node, value) in intervened {
            iv.d[node] = 0.0;
            iv.c[node] = value;
        }
        iv
    }

    /// From a record's intervention indicators `s` (`s[k] = 0` means
    /// intervened) and its values.
    pub fn from_record(s: &[u8], values: &DVector<f64>) -> Self {
        let k = s.len();
        let mut iv = Self::observational(k);
        for (node, &flag) in s.iter().enumerate() {
            if flag == 0 {
                iv.d[node] = 0.0;
                iv.c[node] = values[node];
            }
        }
        iv
    }

    pub fn k(&self) -> usize {
        self.d.len()
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn is_observed(&self, k: usize) -> bool {
        self.d[k] == 1.0
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.k()).filter(|&k| self.is_observed(k)).collect()
    }

    pub fn intervened_indices(&self) -> Vec<usize> {
        (0..self.k()).filter(|&k| !self.is_observed(k)).collect()
    }
}

/// A causal mechanism: linear matrix or masked one-hidden-layer network.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum SemModel {
    Linear(LinearSem),
    Mlp(MlpSem),
}

/// Per-point caches reused by the Jacobian products and gradients. Valid
/// only for the `(mask, x)` it was built from.
pub struct SemCache {
    x: DVector<f64>,
    fx: DVector<f64>,
    kind: CacheKind,
}

enum CacheKind {
    Linear {
        /// `(M o B)^T`
        masked_bt: DMatrix<f64>,
    },
    Mlp {
        /// Per output coordinate: activation values and derivative at the
        /// hidden pre-activations for that coordinate's masked input.
        act: Vec<DVector<f64>>,
        dact: Vec<DVector<f64>>,
        /// Second derivative of the activation at the same points.
        ddact: Vec<DVector<f64>>,
    },
}

impl SemCache {
    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn fx(&self) -> &DVector<f64> {
        &self.fx
    }
}

/// Parameter gradients mirroring a model's parameter shapes, plus the
/// gradient w.r.t. the mask entries.
#[derive(Debug, Clone)]
pub struct SemGrad {
    pub params: ParamGrad,
    pub mask: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub enum ParamGrad {
    Linear {
        b: DMatrix<f64>,
    },
    Mlp {
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        b2: DVector<f64>,
    },
}

impl SemGrad {
    pub fn zeros_like(model: &SemModel) -> Self {
        let k = model.k();
        let params = match model {
            SemModel::Linear(_) => ParamGrad::Linear {
                b: DMatrix::zeros(k, k),
            },
            SemModel::Mlp(m) => ParamGrad::Mlp {
                w1: DMatrix::zeros(m.w1.nrows(), m.w1.ncols()),
                b1: DVector::zeros(m.b1.len()),
                w2: DMatrix::zeros(m.w2.nrows(), m.w2.ncols()),
                b2: DVector::zeros(m.b2.len()),
            },
        };
        Self {
            params,
            mask: DMatrix::zeros(k, k),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        match &mut self.params {
            ParamGrad::Linear { b } => *b *= factor,
            ParamGrad::Mlp { w1, b1, w2, b2 } => {
                *w1 *= factor;
                *b1 *= factor;
                *w2 *= factor;
                *b2 *= factor;
            }
        }
        self.mask *= factor;
    }

    pub fn add(&mut self, other: &SemGrad) {
        match (&mut self.params, &other.params) {
            (ParamGrad::Linear { b }, ParamGrad::Linear { b: ob }) => *b += ob,
            (
                ParamGrad::Mlp { w1, b1, w2, b2 },
                ParamGrad::Mlp {
                    w1: o1,
                    b1: ob1,
                    w2: o2,
                    b2: ob2,
                },
            ) => {
                *w1 += o1;
                *b1 += ob1;
                *w2 += o2;
                *b2 += ob2;
            }
            _ => panic!("gradient family mismatch"),
        }
        self.mask += &other.mask;
    }

    pub fn is_finite(&self) -> bool {
        let params_ok = match &self.params {
            ParamGrad::Linear { b } => b.iter().all(|v| v.is_finite()),
            ParamGrad::Mlp { w1, b1, w2, b2 } => {
                w1.iter().all(|v| v.is_finite())
                    && b1.iter().all(|v| v.is_finite())
                    && w2.iter().all(|v| v.is_finite())
                    && b2.iter().all(|v| v.is_finite())
            }
        };
        params_ok && self.mask.iter().all(|v| v.is_finite())
    }
}

impl SemModel {
    pub fn k(&self) -> usize {
        match self {
            SemModel::Linear(m) => m.b.nrows(),
            SemModel::Mlp(m) => m.w1.ncols(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, SemModel::Linear(_))
    }

    /// Mask of all ones off the diagonal (every dependency allowed).
    pub fn full_mask(k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(k, k, |j, l| if j == l { 0.0 } else { 1.0 })
    }

    /// The effective linear weights `M o B`; linear family only.
    pub fn masked_linear_weights(&self, mask: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        match self {
            SemModel::Linear(m) => Some(m.b.component_mul(mask)),
            SemModel::Mlp(_) => None,
        }
    }

    /// `F(x)` under the given mask.
    pub fn forward(&self, mask: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
        match self {
            SemModel::Linear(m) => m.b.component_mul(mask).transpose() * x,
            SemModel::Mlp(m) => {
                let k = self.k();
                DVector::from_fn(k, |out, _| {
                    let masked = DVector::from_fn(k, |j, _| mask[(j, out)] * x[j]);
                    let mut z = &m.w1 * masked;
                    z += &m.b1;
                    let h = z.map(|v| m.act(v));
                    (m.w2.row(out) * &h)[0] + m.b2[out]
                })
            }
        }
    }

    /// Builds the per-point cache used by the Jacobian products below.
    pub fn cache(&self, mask: &DMatrix<f64>, x: &DVector<f64>) -> SemCache {
        match self {
            SemModel::Linear(m) => {
                let masked_bt = m.b.component_mul(mask).transpose();
                let fx = &masked_bt * x;
                SemCache {
                    x: x.clone(),
                    fx,
                    kind: CacheKind::Linear { masked_bt },
                }
            }
            SemModel::Mlp(m) => {
                let k = self.k();
                let mut act = Vec::with_capacity(k);
                let mut dact = Vec::with_capacity(k);
                let mut ddact = Vec::with_capacity(k);
                let mut fx = DVector::zeros(k);
                for out in 0..k {
                    let masked = DVector::from_fn(k, |j, _| mask[(j, out)] * x[j]);
                    let mut z = &m.w1 * masked;
                    z += &m.b1;
                    let (a, da, dda) = match m.activation {
                        Activation::Identity => (
                            z.clone(),
                            DVector::repeat(z.len(), 1.0),
                            DVector::zeros(z.len()),
                        ),
                        Activation::Tanh => {
                            let t = z.map(f64::tanh);
                            let d = t.map(|v| 1.0 - v * v);
                            let dd = t.zip_map(&d, |tv, dv| -2.0 * tv * dv);
                            (t, d, dd)
                        }
                    };
                    fx[out] = (m.w2.row(out) * &a)[0] + m.b2[out];
                    act.push(a);
                    dact.push(da);
                    ddact.push(dda);
                }
                SemCache {
                    x: x.clone(),
                    fx,
                    kind: CacheKind::Mlp { act, dact, ddact },
                }
            }
        }
    }

    /// Jacobian-vector product `J_F(x) v`.
    pub fn jvp(&self, mask: &DMatrix<f64>, cache: &SemCache, v: &DVector<f64>) -> DVector<f64> {
        match (&self, &cache.kind) {
            (SemModel::Linear(_), CacheKind::Linear { masked_bt }) => masked_bt * v,
            (SemModel::Mlp(m), CacheKind::Mlp { dact, .. }) => {
                let k = self.k();
                DVector::from_fn(k, |out, _| {
                    let masked_v = DVector::from_fn(k, |j, _| mask[(j, out)] * v[j]);
                    let t = &m.w1 * masked_v;
                    let gated = dact[out].component_mul(&t);
                    (m.w2.row(out) * gated)[0]
                })
            }
            _ => unreachable!("cache family mismatch"),
        }
    }

    /// Vector-Jacobian product `J_F(x)^T u`.
    pub fn vjp(&self, mask: &DMatrix<f64>, cache: &SemCache, u: &DVector<f64>) -> DVector<f64> {
        match (&self, &cache.kind) {
            (SemModel::Linear(_), CacheKind::Linear { masked_bt }) => masked_bt.transpose() * u,
            (SemModel::Mlp(m), CacheKind::Mlp { dact, .. }) => {
                let k = self.k();
                let mut out = DVector::zeros(k);
                for res in 0..k {
                    if u[res] == 0.0 {
                        continue;
                    }
                    let gated = dact[res].component_mul(&m.w2.row(res).transpose());
                    let g = m.w1.transpose() * gated;
                    for j in 0..k {
                        out[j] += u[res] * mask[(j, res)] * g[j];
                    }
                }
                out
            }
            _ => unreachable!("cache family mismatch"),
        }
    }

    /// Accumulates `scale * d(cot^T F(x)) / d(params, mask)` into `grad`.
    pub fn accumulate_output_grad(
        &self,
        mask: &DMatrix<f64>,
        cache: &SemCache,
        cot: &DVector<f64>,
        scale: f64,
        grad: &mut SemGrad,
    ) {
        let k = self.k();
        match (&self, &cache.kind, &mut grad.params) {
            (SemModel::Linear(m), CacheKind::Linear { .. }, ParamGrad::Linear { b }) => {
                for j in 0..k {
                    for l in 0..k {
                        if j == l {
                            continue;
                        }
                        let common = scale * cache.x[j] * cot[l];
                        b[(j, l)] += common * mask[(j, l)];
                        grad.mask[(j, l)] += common * m.b[(j, l)];
                    }
                }
            }
            (
                SemModel::Mlp(m),
                CacheKind::Mlp { act, dact, .. },
                ParamGrad::Mlp { w1, b1, w2, b2 },
            ) => {
                for out in 0..k {
                    if cot[out] == 0.0 {
                        continue;
                    }
                    let c = scale * cot[out];
                    b2[out] += c;
                    for h in 0..m.w2.ncols() {
                        w2[(out, h)] += c * act[out][h];
                    }
                    // delta = c * (w2 row ⊙ act')
                    let delta = dact[out].component_mul(&m.w2.row(out).transpose()) * c;
                    *b1 += &delta;
                    let masked_x = DVector::from_fn(k, |j, _| mask[(j, out)] * cache.x[j]);
                    *w1 += &delta * masked_x.transpose();
                    let back = m.w1.transpose() * delta;
                    for j in 0..k {
                        grad.mask[(j, out)] += cache.x[j] * back[j];
                    }
                }
            }
            _ => unreachable!("cache family mismatch"),
        }
        grad.mask.fill_diagonal(0.0);
    }

    /// Accumulates `scale * d(u^T J_F(x) v) / d(params, mask)` into `grad`.
    pub fn accumulate_bilinear_jacobian_grad(
        &self,
        mask: &DMatrix<f64>,
        cache: &SemCache,
        u: &DVector<f64>,
        v: &DVector<f64>,
        scale: f64,
        grad: &mut SemGrad,
    ) {
        let k = self.k();
        match (&self, &cache.kind, &mut grad.params) {
            (SemModel::Linear(m), CacheKind::Linear { .. }, ParamGrad::Linear { b }) => {
                // s = sum_{j,l} u_l M_jl B_jl v_j
                for j in 0..k {
                    for l in 0..k {
                        if j == l {
                            continue;
                        }
                        let common = scale * v[j] * u[l];
                        b[(j, l)] += common * mask[(j, l)];
                        grad.mask[(j, l)] += common * m.b[(j, l)];
                    }
                }
            }
            (
                SemModel::Mlp(m),
                CacheKind::Mlp { dact, ddact, .. },
                ParamGrad::Mlp { w1, b1, w2, .. },
            ) => {
                for out in 0..k {
                    if u[out] == 0.0 {
                        continue;
                    }
                    let c = scale * u[out];
                    let masked_v = DVector::from_fn(k, |j, _| mask[(j, out)] * v[j]);
                    let masked_x = DVector::from_fn(k, |j, _| mask[(j, out)] * cache.x[j]);
                    let t = &m.w1 * &masked_v;
                    let w2row = m.w2.row(out).transpose();

                    // beta[h] = c * w2[out,h] * act'[h]; gamma[h] = c * w2[out,h] * act''[h] * t[h]
                    let beta = dact[out].component_mul(&w2row) * c;
                    let gamma = ddact[out].component_mul(&w2row).component_mul(&t) * c;

                    for h in 0..m.w2.ncols() {
                        w2[(out, h)] += c * dact[out][h] * t[h];
                    }
                    *b1 += &gamma;
                    *w1 += &beta * masked_v.transpose();
                    *w1 += &gamma * masked_x.transpose();

                    let back_beta = m.w1.transpose() * beta;
                    let back_gamma = m.w1.transpose() * gamma;
                    for j in 0..k {
                        grad.mask[(j, out)] += v[j] * back_beta[j] + cache.x[j] * back_gamma[j];
                    }
                }
            }
            _ => unreachable!("cache family mismatch"),
        }
        grad.mask.fill_diagonal(0.0);
    }

    /// Parameter gradients of the scalar `cot^T F(x)`; the spec-level
    /// gradient entry point for objectives built from forward passes.
    pub fn output_gradients(
        &self,
        mask: &DMatrix<f64>,
        x: &DVector<f64>,
        cot: &DVector<f64>,
    ) -> SemGrad {
        let cache = self.cache(mask, x);
        let mut grad = SemGrad::zeros_like(self);
        self.accumulate_output_grad(mask, &cache, cot, 1.0, &mut grad);
        grad
    }

    /// Upper bound on the Lipschitz constant of `F` (product of layer
    /// spectral norms; exact norm for the linear family).
    pub fn lipschitz_bound(&self) -> f64 {
        match self {
            SemModel::Linear(m) => spectral_norm(&m.b),
            SemModel::Mlp(m) => spectral_norm(&m.w1) * spectral_norm(&m.w2),
        }
    }

    /// Projects the model into its contractivity budget: both network
    /// layers are rescaled to the geometric per-layer budget; linear
    /// weights are rescaled directly when they exceed the bound.
    pub fn project_contractive(&mut self, bound: f64) {
        match self {
            SemModel::Linear(m) => {
                let norm = spectral_norm(&m.b);
                if norm > bound {
                    m.b *= bound / norm;
                }
            }
            SemModel::Mlp(m) => {
                let target = m.lipschitz_target.min(bound);
                let per_layer = target.sqrt();
                for w in [&mut m.w1, &mut m.w2] {
                    let norm = spectral_norm(w);
                    if norm > per_layer {
                        *w *= per_layer / norm;
                    }
                }
            }
        }
    }

    /// Mutable access used by the optimizer.
    pub fn apply_param_update(&mut self, update: &ParamGrad) {
        match (self, update) {
            (SemModel::Linear(m), ParamGrad::Linear { b }) => {
                m.b += b;
                m.b.fill_diagonal(0.0);
            }
            (SemModel::Mlp(m), ParamGrad::Mlp { w1, b1, w2, b2 }) => {
                m.w1 += w1;
                m.b1 += b1;
                m.w2 += w2;
                m.b2 += b2;
            }
            _ => panic!("update family mismatch"),
        }
    }
}

/// Rescales one weight matrix into a spectral-norm budget:
/// `w <- w * min(1, budget / sigma(w))`.
pub fn scale_to_norm(w: &DMatrix<f64>, budget: f64) -> DMatrix<f64> {
    let norm = spectral_norm(w);
    if norm > budget {
        w * (budget / norm)
    } else {
        w.clone()
    }
}

/// Spectral normalization of a network model: each layer is rescaled into
/// the geometric per-layer budget `lipschitz_target^(1/2)`, so the
/// end-to-end Lipschitz bound is at most `lipschitz_target`.
pub fn spectral_normalize(model: &MlpSem, _power_iters: usize) -> MlpSem {
    let per_layer = model.lipschitz_target.sqrt();
    MlpSem {
        w1: scale_to_norm(&model.w1, per_layer),
        b1: model.b1.clone(),
        w2: scale_to_norm(&model.w2, per_layer),
        b2: model.b2.clone(),
        activation: model.activation,
        lipschitz_target: model.lipschitz_target,
    }
}

/// Noise residuals on observed coordinates: `eps_k = x_k - F_k(x)` for
/// every `k` with `d_k = 1`, in ascending coordinate order.
pub fn epsilon_observed(
    model: &SemModel,
    mask: &DMatrix<f64>,
    x: &DVector<f64>,
    iv: &InterventionMask,
) -> Vec<f64> {
    let fx = model.forward(mask, x);
    iv.observed_indices()
        .into_iter()
        .map(|k| x[k] - fx[k])
        .collect()
}

/// Solves `x = D F(x) + D eps + c` by Picard iteration from
/// `x0 = D eps + c`. Converges for contractive or acyclic models.
pub fn solve_fixed_point(
    model: &SemModel,
    mask: &DMatrix<f64>,
    iv: &InterventionMask,
    eps: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let base = iv.d().component_mul(eps) + iv.c();
    let mut x = base.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let mapped = iv.d().component_mul(&model.forward(mask, &x)) + &base;
        residual = (&mapped - &x).amax();
        x = mapped;
        if residual <= tol {
            return Ok(x);
        }
    }
    Err(Error::FixedPointDiverged { max_iter, residual })
}
