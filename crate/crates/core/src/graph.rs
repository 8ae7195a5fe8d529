//! Directed-graph patterns, random-graph generation, acyclicity machinery,
//! and structure-recovery metrics.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

/// Binary adjacency structure over `k` nodes. Entry `(j, l)` set means an
/// edge from node `j` to node `l`. The diagonal is always zero: self-loops
/// are excluded by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u8>>", into = "Vec<Vec<u8>>")]
pub struct EdgePattern {
    k: usize,
    edges: Vec<bool>,
}

impl EdgePattern {
    /// Empty pattern over `k` nodes.
    pub fn empty(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("node count must be >= 1".into()));
        }
        Ok(Self {
            k,
            edges: vec![false; k * k],
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges[from * self.k + to]
    }

    /// Sets or clears an edge. Requests to set a self-loop are ignored.
    pub fn set_edge(&mut self, from: usize, to: usize, present: bool) {
        if from != to {
            self.edges[from * self.k + to] = present;
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }

    /// All `(from, to)` pairs with an edge present.
    pub fn iter_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = self.k;
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, &e)| e)
            .map(move |(i, _)| (i / k, i % k))
    }

    /// 0/1 matrix view of the pattern.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.k, |j, l| {
            if self.has_edge(j, l) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Pattern from the support of a matrix: edge wherever `|m| > threshold`.
    /// The diagonal is dropped.
    pub fn from_support(m: &DMatrix<f64>, threshold: f64) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "expected square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut pat = Self::empty(m.nrows())?;
        for j in 0..m.nrows() {
            for l in 0..m.ncols() {
                if j != l && m[(j, l)].abs() > threshold {
                    pat.set_edge(j, l, true);
                }
            }
        }
        Ok(pat)
    }

    /// Dense 0/1 CSV: `k` rows of `k` comma-separated cells, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 0..self.k {
            let row: Vec<&str> = (0..self.k)
                .map(|l| if self.has_edge(j, l) { "1" } else { "0" })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses the dense 0/1 CSV produced by [`EdgePattern::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let k = rows.len();
        let mut pat = Self::empty(k)?;
        for (j, row) in rows.iter().enumerate() {
            let cells: Vec<&str> = row.split(',').collect();
            if cells.len() != k {
                return Err(Error::Data {
                    path: "<pattern csv>".into(),
                    row: j + 1,
                    message: format!("expected {k} cells, found {}", cells.len()),
                });
            }
            for (l, cell) in cells.iter().enumerate() {
                match cell.trim() {
                    "0" => {}
                    "1" => {
                        if j == l {
                            return Err(Error::Data {
                                path: "<pattern csv>".into(),
                                row: j + 1,
                                message: "self-loop on diagonal".into(),
                            });
                        }
                        pat.set_edge(j, l, true);
                    }
                    other => {
                        return Err(Error::Data {
                            path: "<pattern csv>".into(),
                            row: j + 1,
                            message: format!("expected 0 or 1, found {other:?}"),
                        });
                    }
                }
            }
        }
        Ok(pat)
    }
}

impl From<EdgePattern> for Vec<Vec<u8>> {
    fn from(p: EdgePattern) -> Self {
        (0..p.k)
            .map(|j| (0..p.k).map(|l| u8::from(p.has_edge(j, l))).collect())
            .collect()
    }
}

impl TryFrom<Vec<Vec<u8>>> for EdgePattern {
    type Error = Error;

    fn try_from(rows: Vec<Vec<u8>>) -> Result<Self> {
        let k = rows.len();
        let mut pat = EdgePattern::empty(k)?;
        for (j, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::DimensionMismatch(format!(
                    "pattern row {j} has {} cells, expected {k}",
                    row.len()
                )));
            }
            for (l, &cell) in row.iter().enumerate() {
                match cell {
                    0 => {}
                    1 if j != l => pat.set_edge(j, l, true),
                    1 => {
                        return Err(Error::InvalidConfig(format!(
                            "pattern has a self-loop at node {j}"
                        )))
                    }
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "pattern cell must be 0 or 1, found {other}"
                        )))
                    }
                }
            }
        }
        Ok(pat)
    }
}

/// Erdos-Renyi generation config. `expected_degree` 1.0 and 2.0 give the
/// usual ER-1 / ER-2 densities (roughly `degree * k` edges in expectation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErConfig {
    pub k: usize,
    pub expected_degree: f64,
    pub allow_cycles: bool,
    pub seed: u64,
}

/// Samples a random directed graph. Each off-diagonal slot is Bernoulli
/// with probability `expected_degree / (k - 1)`. With `allow_cycles` off,
/// a uniformly random node order is drawn and only forward edges are kept.
pub fn generate_er(cfg: &ErConfig) -> Result<EdgePattern> {
    if cfg.k == 0 {
        return Err(Error::InvalidConfig("node count must be >= 1".into()));
    }
    if cfg.expected_degree < 0.0 {
        return Err(Error::InvalidConfig("expected_degree must be >= 0".into()));
    }
    let p = if cfg.k == 1 {
        0.0
    } else {
        cfg.expected_degree / (cfg.k - 1) as f64
    };
    if p > 1.0 {
        return Err(Error::InvalidConfig(format!(
            "edge probability {p:.3} exceeds 1; lower expected_degree or raise k"
        )));
    }

    let mut rng = rng::stream(cfg.seed, rng::tag::ER_GRAPH, 0);
    let mut pat = EdgePattern::empty(cfg.k)?;

    // Position of each node in a uniformly random order (identity when
    // cycles are allowed; the draw is skipped entirely to keep the edge
    // stream identical across the flag).
    let position: Vec<usize> = if cfg.allow_cycles {
        (0..cfg.k).collect()
    } else {
        let mut perm: Vec<usize> = (0..cfg.k).collect();
        for i in (1..cfg.k).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let mut pos = vec![0; cfg.k];
        for (idx, &node) in perm.iter().enumerate() {
            pos[node] = idx;
        }
        pos
    };

    for j in 0..cfg.k {
        for l in 0..cfg.k {
            if j == l {
                continue;
            }
            let draw = rng.random::<f64>() < p;
            let keep = cfg.allow_cycles || position[j] < position[l];
            if draw && keep {
                pat.set_edge(j, l, true);
            }
        }
    }
    Ok(pat)
}

/// Structural Hamming distance with a pure swap counted as one reversal.
pub fn shd(estimated: &EdgePattern, truth: &EdgePattern) -> Result<usize> {
    shd_with(estimated, truth, false)
}

/// Structural Hamming distance; `reversal_counts_two` switches a pure swap
/// from one edit to two.
pub fn shd_with(
    estimated: &EdgePattern,
    truth: &EdgePattern,
    reversal_counts_two: bool,
) -> Result<usize> {
    if estimated.k != truth.k {
        return Err(Error::DimensionMismatch(format!(
            "pattern sizes differ: {} vs {}",
            estimated.k, truth.k
        )));
    }
    let mut edits = 0usize;
    for j in 0..estimated.k {
        for l in (j + 1)..estimated.k {
            let e = (estimated.has_edge(j, l), estimated.has_edge(l, j));
            let t = (truth.has_edge(j, l), truth.has_edge(l, j));
            let pure_reversal = matches!(
                (e, t),
                ((true, false), (false, true)) | ((false, true), (true, false))
            );
            edits += if pure_reversal {
                if reversal_counts_two {
                    2
                } else {
                    1
                }
            } else {
                usize::from(e.0 != t.0) + usize::from(e.1 != t.1)
            };
        }
    }
    Ok(edits)
}

/// Precision and recall of estimated edges against the truth.
/// Both are 1.0 when the truth and the estimate are both empty.
pub fn edge_precision_recall(estimated: &EdgePattern, truth: &EdgePattern) -> Result<(f64, f64)> {
    if estimated.k != truth.k {
        return Err(Error::DimensionMismatch(format!(
            "pattern sizes differ: {} vs {}",
            estimated.k, truth.k
        )));
    }
    let mut tp = 0usize;
    for (j, l) in estimated.iter_edges() {
        if truth.has_edge(j, l) {
            tp += 1;
        }
    }
    let est = estimated.edge_count();
    let tru = truth.edge_count();
    let precision = if est == 0 { 1.0 } else { tp as f64 / est as f64 };
    let recall = if tru == 0 { 1.0 } else { tp as f64 / tru as f64 };
    Ok((precision, recall))
}

/// Matrix exponential by scaling-and-squaring with a Taylor core.
/// Absolute tail bound 1e-12; adequate for the desk-scale sizes here.
pub fn matrix_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    let k = a.nrows();
    let norm = a
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings as i32);

    let mut result = DMatrix::<f64>::identity(k, k);
    let mut term = DMatrix::<f64>::identity(k, k);
    for i in 1..=64 {
        term = (&term * &scaled) / i as f64;
        result += &term;
        let tail = term.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        if tail < 1e-16 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Trace-exponential acyclicity penalty `tr(exp(m o m)) - k`. Zero (within
/// 1e-9) exactly when the support of `m` is acyclic.
pub fn acyclicity_penalty(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let hadamard = m.component_mul(m);
    let penalty = matrix_exp(&hadamard).trace() - m.nrows() as f64;
    Ok(penalty.max(0.0))
}

/// Operator 2-norm by power iteration on `w^T w`: at least 50 iterations,
/// then run until the relative change drops below 1e-10.
pub fn spectral_norm(w: &DMatrix<f64>) -> f64 {
    let n = w.ncols();
    if n == 0 || w.nrows() == 0 {
        return 0.0;
    }
    // Deterministic start with unequal components so it is not orthogonal
    // to the leading singular vector for typical inputs.
    let mut v = nalgebra::DVector::from_fn(n, |i, _| 1.0 + 0.0137 * i as f64);
    v /= v.norm();
    let mut sigma = 0.0f64;
    for iter in 0..20_000 {
        let u = w * &v;
        let next = w.transpose() * &u;
        let norm = next.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = next / norm;
        let new_sigma = (w * &v).norm();
        let change = (new_sigma - sigma).abs() / new_sigma.max(1e-300);
        sigma = new_sigma;
        if iter >= 50 && change < 1e-10 {
            break;
        }
    }
    sigma
}

/// True when the operator 2-norm of `weights` is at most `bound`.
pub fn is_contractive_spectral(weights: &DMatrix<f64>, bound: f64) -> bool {
    spectral_norm(weights) <= bound
}
