//! Block-parallel MNAR missingness model: factorized Bernoulli indicators
//! with an expit link. Indicator `R_k` may depend on any coordinate except
//! `x_k` (no self-censoring) and on no other indicator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::EdgePattern;
use crate::numeric::{sigmoid, softplus};
use crate::synth::Dataset;
use crate::{Error, Result};

/// Weight cap keeping rejection-sampling weights bounded.
pub const WEIGHT_CAP: f64 = 10.0;

/// Per-indicator logistic missingness mechanism. Column `k` of `w` holds
/// the weights of `P(R_k = 0 | x) = expit(w_k . x + z_k)`; the diagonal is
/// frozen at zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MnarModel {
    w: DMatrix<f64>,
    z: DVector<f64>,
    parent_pattern: Option<EdgePattern>,
}

impl MnarModel {
    pub fn new(
        w: DMatrix<f64>,
        z: DVector<f64>,
        parent_pattern: Option<EdgePattern>,
    ) -> Result<Self> {
        if w.nrows() != w.ncols() || z.len() != w.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "mnar shapes disagree: w {}x{}, z {}",
                w.nrows(),
                w.ncols(),
                z.len()
            )));
        }
        let mut model = Self {
            w,
            z,
            parent_pattern,
        };
        model.enforce_support();
        Ok(model)
    }

    /// No missingness at all: zero weights and a saturated-negative
    /// intercept, so `P(R_k = 0) = 0` exactly.
    pub fn never_missing(k: usize) -> Self {
        Self {
            w: DMatrix::zeros(k, k),
            z: DVector::repeat(k, -1000.0),
            parent_pattern: None,
        }
    }

    pub fn k(&self) -> usize {
        self.z.len()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn intercepts(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn parent_pattern(&self) -> Option<&EdgePattern> {
        self.parent_pattern.as_ref()
    }

    /// Zeroes the diagonal and anything outside the parent pattern.
    fn enforce_support(&mut self) {
        self.w.fill_diagonal(0.0);
        if let Some(pattern) = self.parent_pattern.clone() {
            for j in 0..self.k() {
                for l in 0..self.k() {
                    if j != l && !pattern.has_edge(j, l) {
                        self.w[(j, l)] = 0.0;
                    }
                }
            }
        }
    }

    /// Applies an additive update, then re-imposes the frozen diagonal,
    /// the support pattern, and the weight cap.
    pub fn apply_update(&mut self, dw: &DMatrix<f64>, dz: &DVector<f64>) {
        self.w += dw;
        self.z += dz;
        self.enforce_support();
        self.w.apply(|v| *v = v.clamp(-WEIGHT_CAP, WEIGHT_CAP));
    }
}

/// `P(R_k = 0 | x)` for every coordinate.
pub fn prob_missing(model: &MnarModel, x: &DVector<f64>) -> DVector<f64> {
    let eta = model.w.transpose() * x + &model.z;
    eta.map(sigmoid)
}

/// Log-likelihood of an indicator vector; coordinates in `skip` (the
/// structurally-observed intervened nodes) contribute nothing.
pub fn log_prob_r(model: &MnarModel, r: &[u8], x: &DVector<f64>, skip: &[bool]) -> f64 {
    let eta = model.w.transpose() * x + &model.z;
    let mut total = 0.0;
    for k in 0..model.k() {
        if skip[k] {
            continue;
        }
        // (1-r) ln p + r ln(1-p) with p = expit(eta)
        total += if r[k] == 0 {
            -softplus(-eta[k])
        } else {
            -softplus(eta[k])
        };
    }
    total
}

/// Gradient of [`log_prob_r`] w.r.t. `(w, z)`, scaled and accumulated:
/// the logistic score `(1 - r_k) - p_k` per active coordinate.
pub fn log_prob_r_grad(
    model: &MnarModel,
    r: &[u8],
    x: &DVector<f64>,
    skip: &[bool],
    scale: f64,
    grad_w: &mut DMatrix<f64>,
    grad_z: &mut DVector<f64>,
) -> f64 {
    let eta = model.w.transpose() * x + &model.z;
    let mut total = 0.0;
    for k in 0..model.k() {
        if skip[k] {
            continue;
        }
        let p = sigmoid(eta[k]);
        total += if r[k] == 0 {
            -softplus(-eta[k])
        } else {
            -softplus(eta[k])
        };
        let score = scale * ((1.0 - f64::from(r[k])) - p);
        grad_z[k] += score;
        for j in 0..model.k() {
            if j != k {
                grad_w[(j, k)] += score * x[j];
            }
        }
    }
    total
}

/// Draws indicators `R_k ~ Bernoulli(1 - p_k)` independently; coordinates
/// in `protected` are forced observed.
pub fn sample_r(
    model: &MnarModel,
    x: &DVector<f64>,
    protected: &[bool],
    rng: &mut impl Rng,
) -> Vec<u8> {
    let p = prob_missing(model, x);
    (0..model.k())
        .map(|k| {
            if protected[k] || rng.random::<f64>() >= p[k] {
                1
            } else {
                0
            }
        })
        .collect()
}

/// Default L1 weight of the indicator fits, relative to the mean logistic
/// loss per usable row.
pub const FIT_LAMBDA: f64 = 2e-3;

/// One indicator's L1-regularized logistic fit by proximal gradient on the
/// mean loss. `rows` pairs a full feature vector (coordinate `target` is
/// ignored) with the 0/1 missingness response. Returns `(weights,
/// intercept)` with the intercept clipped to the Laplace smoothing range.
pub(crate) fn fit_indicator(
    rows: &[(&DVector<f64>, f64)],
    k: usize,
    target: usize,
    lambda: f64,
) -> (DVector<f64>, f64) {
    let n = rows.len();
    let miss: f64 = rows.iter().map(|(_, m)| m).sum();
    let smoothed = (miss + 1.0) / (n as f64 + 2.0);
    let floor = (smoothed / (1.0 - smoothed)).ln();
    let mut wk = DVector::<f64>::zeros(k);
    if n == 0 || miss == 0.0 || miss == n as f64 {
        return (wk, floor);
    }

    let mut zk = floor;
    let max_sq = rows
        .iter()
        .map(|(x, _)| {
            (0..k)
                .filter(|&j| j != target)
                .map(|j| x[j] * x[j])
                .sum::<f64>()
                + 1.0
        })
        .fold(0.0f64, f64::max);
    let lr = 1.0 / (0.25 * max_sq).max(1e-3);
    for _ in 0..2000 {
        let mut gw = DVector::<f64>::zeros(k);
        let mut gz = 0.0;
        for (x, m) in rows {
            let mut eta = zk;
            for j in 0..k {
                if j != target {
                    eta += wk[j] * x[j];
                }
            }
            let err = sigmoid(eta) - m;
            gz += err;
            for j in 0..k {
                if j != target {
                    gw[j] += err * x[j];
                }
            }
        }
        gw /= n as f64;
        gz /= n as f64;

        zk -= lr * gz;
        let mut max_change = (lr * gz).abs();
        for j in 0..k {
            if j == target {
                continue;
            }
            let raw = wk[j] - lr * gw[j];
            let shrunk = raw.signum() * (raw.abs() - lr * lambda).max(0.0);
            let new = shrunk.clamp(-WEIGHT_CAP, WEIGHT_CAP);
            max_change = max_change.max((new - wk[j]).abs());
            wk[j] = new;
        }
        if max_change < 1e-8 {
            break;
        }
    }

    let n_f = n as f64;
    let lo = (1.0 / (n_f + 1.0)).ln();
    (wk, zk.clamp(lo, -lo))
}

/// Keeps only the `limit` strongest entries of an indicator weight vector.
pub(crate) fn truncate_parents(wk: &mut DVector<f64>, target: usize, limit: usize) {
    let k = wk.len();
    if limit >= k {
        return;
    }
    let mut order: Vec<usize> = (0..k).filter(|&j| j != target).collect();
    order.sort_by(|&a, &b| wk[b].abs().total_cmp(&wk[a].abs()));
    for &j in order.iter().skip(limit) {
        wk[j] = 0.0;
    }
}

/// Initial mechanism estimate by per-indicator L1-regularized logistic
/// regression. For indicator `k` the fit uses the records whose other
/// coordinates are all observed and whose node `k` was not intervened
/// (those indicators are structurally one), regressing `1 - r_k` on the
/// other coordinates. Requires at least one fully complete record.
pub fn fit_complete_cases(data: &Dataset, pattern_limit: usize) -> Result<MnarModel> {
    let k = data.k();
    if !data.records().iter().any(|rec| rec.is_complete()) {
        return Err(Error::NoCompleteCases);
    }

    let mut w = DMatrix::zeros(k, k);
    let mut z = DVector::zeros(k);
    for target in 0..k {
        let rows: Vec<(&DVector<f64>, f64)> = data
            .records()
            .iter()
            .filter(|rec| {
                rec.s[target] == 1 && (0..k).all(|j| j == target || rec.r[j] == 1)
            })
            .map(|rec| (&rec.y, 1.0 - f64::from(rec.r[target])))
            .collect();
        let (mut wk, zk) = fit_indicator(&rows, k, target, FIT_LAMBDA);
        truncate_parents(&mut wk, target, pattern_limit);
        z[target] = zk;
        for j in 0..k {
            if j != target {
                w[(j, target)] = wk[j];
            }
        }
    }
    MnarModel::new(w, z, None)
}

/// Missingness-graph edges: `x_j -> R_k` wherever `|w_jk| > threshold`.
pub fn extract_m_edges(model: &MnarModel, threshold: f64) -> EdgePattern {
    EdgePattern::from_support(&model.w, threshold).expect("square by construction")
}
