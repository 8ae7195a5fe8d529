//! Ground-truth instance generation and data simulation: linear and
//! tanh-network SEMs on Erdos-Renyi graphs, contractive rescaling,
//! single-node interventions, block-parallel MNAR missingness, and the
//! dataset CSV format.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::graph::{generate_er, spectral_norm, EdgePattern, ErConfig};
use crate::likelihood::NoiseModel;
use crate::missing::{sample_r, MnarModel};
use crate::sem::{solve_fixed_point, Activation, InterventionMask, LinearSem, MlpSem, SemModel};
use crate::{rng, Error, Result};

/// SEM family of a generated instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemFamily {
    Linear,
    Tanh,
}

/// Everything needed to generate one synthetic benchmark instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceSpec {
    pub k: usize,
    pub er_density: f64,
    pub sem_family: SemFamily,
    /// Nonzero weight magnitudes are uniform on `(weight_low, weight_high)`
    /// with a random sign.
    pub weight_low: f64,
    pub weight_high: f64,
    pub lipschitz_target: f64,
    pub noise_sigma: f64,
    pub n_per_intervention: usize,
    /// Intervention regimes; `None` means one single-node regime per node.
    pub interventions: Option<Vec<Vec<usize>>>,
    /// Parent-set size of each missingness indicator.
    pub mnar_max_parents: usize,
    /// Target average missing rate per coordinate; 0 disables missingness.
    pub mnar_rate: f64,
    pub allow_cycles: bool,
    pub seed: u64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            k: 10,
            er_density: 1.0,
            sem_family: SemFamily::Linear,
            weight_low: 0.25,
            weight_high: 0.6,
            lipschitz_target: 0.9,
            noise_sigma: 0.25,
            n_per_intervention: 500,
            interventions: None,
            mnar_max_parents: 3,
            mnar_rate: 0.1,
            allow_cycles: true,
            seed: 0,
        }
    }
}

impl InstanceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if !(0.0 < self.lipschitz_target && self.lipschitz_target < 1.0) {
            return Err(Error::InvalidConfig(
                "lipschitz_target must lie in (0, 1)".into(),
            ));
        }
        if self.weight_low <= 0.0 || self.weight_high <= self.weight_low {
            return Err(Error::InvalidConfig(
                "weight band must satisfy 0 < low < high".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.mnar_rate) {
            return Err(Error::InvalidConfig(
                "mnar_rate must lie in [0, 1)".into(),
            ));
        }
        if self.noise_sigma <= 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be positive".into()));
        }
        if let Some(regimes) = &self.interventions {
            for regime in regimes {
                if regime.iter().any(|&n| n >= self.k) {
                    return Err(Error::InvalidConfig(
                        "intervention regime names a node out of range".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The intervention regimes: the configured list, or one single-node
    /// regime per node.
    pub fn regimes(&self) -> Vec<Vec<usize>> {
        match &self.interventions {
            Some(r) => r.clone(),
            None => (0..self.k).map(|n| vec![n]).collect(),
        }
    }

    pub fn total_records(&self) -> usize {
        self.regimes().len() * self.n_per_intervention
    }
}

/// One record: coarsened values (`y[k]` is NaN wherever `r[k] = 0`),
/// missingness indicators, and intervention indicators (`s[k] = 0` means
/// node `k` was intervened).
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub y: DVector<f64>,
    pub r: Vec<u8>,
    pub s: Vec<u8>,
}

impl Record {
    pub fn k(&self) -> usize {
        self.r.len()
    }

    pub fn is_complete(&self) -> bool {
        self.r.iter().all(|&v| v == 1)
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.k()).filter(|&k| self.r[k] == 0).collect()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.k()).filter(|&k| self.r[k] == 1).collect()
    }

    pub fn intervention_mask(&self) -> InterventionMask {
        InterventionMask::from_record(&self.s, &self.y)
    }

    /// Per-coordinate skip flags for the missingness likelihood: intervened
    /// nodes are structurally observed and carry no information.
    pub fn skip_flags(&self) -> Vec<bool> {
        self.s.iter().map(|&v| v == 0).collect()
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.y.len() != k || self.r.len() != k || self.s.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "record width {} does not match dataset width {k}",
                self.r.len()
            )));
        }
        for j in 0..k {
            if self.r[j] > 1 || self.s[j] > 1 {
                return Err(Error::InvalidConfig("indicators must be 0/1".into()));
            }
            if self.s[j] == 0 && self.r[j] == 0 {
                return Err(Error::InvalidConfig(
                    "intervened coordinates may not be missing".into(),
                ));
            }
            if self.r[j] == 1 && !self.y[j].is_finite() {
                return Err(Error::InvalidConfig(
                    "observed coordinates must carry finite values".into(),
                ));
            }
            if self.r[j] == 0 && !self.y[j].is_nan() {
                return Err(Error::InvalidConfig(
                    "missing coordinates must carry the NaN sentinel".into(),
                ));
            }
        }
        Ok(())
    }
}

/// An n-record dataset of `(y, r, s)` rows.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    k: usize,
    records: Vec<Record>,
    provenance: Option<String>,
}

impl Dataset {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            records: Vec::new(),
            provenance: None,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        record.validate(self.k)?;
        self.records.push(record);
        Ok(())
    }

    pub fn provenance(&self) -> Option<&str> {
        self.provenance.as_deref()
    }

    pub fn set_provenance(&mut self, hash: String) {
        self.provenance = Some(hash);
    }

    pub fn has_missing(&self) -> bool {
        self.records.iter().any(|rec| !rec.is_complete())
    }
}

/// A generated ground-truth instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub sem: SemModel,
    pub noise: NoiseModel,
    pub mnar: MnarModel,
    pub target_pattern: EdgePattern,
    pub m_pattern: EdgePattern,
}

/// Draws signed weights on the pattern's support: magnitudes uniform on
/// `(low, high)`, sign a fair coin.
pub(crate) fn draw_weights(
    pattern: &EdgePattern,
    low: f64,
    high: f64,
    rng: &mut impl Rng,
) -> DMatrix<f64> {
    let k = pattern.k();
    let mut w = DMatrix::zeros(k, k);
    for j in 0..k {
        for l in 0..k {
            if pattern.has_edge(j, l) {
                let magnitude = rng.random_range(low..high);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                w[(j, l)] = sign * magnitude;
            }
        }
    }
    w
}

/// Samples the ground truth: ER target graph with banded weights rescaled
/// for contractivity, plus a block-parallel MNAR mechanism with intercepts
/// calibrated so each indicator's marginal missing rate hits the target.
pub fn gen_instance(spec: &InstanceSpec) -> Result<Instance> {
    spec.validate()?;
    let mut weight_rng = rng::stream(spec.seed, rng::tag::INIT, 0);

    let target_pattern = generate_er(&ErConfig {
        k: spec.k,
        expected_degree: spec.er_density,
        allow_cycles: spec.allow_cycles,
        seed: spec.seed,
    })?;

    let mut weights = draw_weights(&target_pattern, spec.weight_low, spec.weight_high, &mut weight_rng);
    let norm = spectral_norm(&weights);
    if norm > spec.lipschitz_target {
        weights *= spec.lipschitz_target / norm;
    }

    let sem = match spec.sem_family {
        SemFamily::Linear => SemModel::Linear(LinearSem::new(weights)?),
        SemFamily::Tanh => SemModel::Mlp(MlpSem::new(
            weights.transpose(),
            DVector::zeros(spec.k),
            DMatrix::identity(spec.k, spec.k),
            DVector::zeros(spec.k),
            Activation::Tanh,
            spec.lipschitz_target,
        )?),
    };
    let noise = NoiseModel::isotropic(spec.k, spec.noise_sigma, false)?;

    let (mnar, m_pattern) = if spec.mnar_rate == 0.0 {
        (
            MnarModel::never_missing(spec.k),
            EdgePattern::empty(spec.k)?,
        )
    } else {
        gen_mnar(spec, &sem, &noise, &mut weight_rng)?
    };

    Ok(Instance {
        sem,
        noise,
        mnar,
        target_pattern,
        m_pattern,
    })
}

fn gen_mnar(
    spec: &InstanceSpec,
    sem: &SemModel,
    noise: &NoiseModel,
    rng: &mut impl Rng,
) -> Result<(MnarModel, EdgePattern)> {
    let k = spec.k;
    let parents_per_indicator = spec.mnar_max_parents.min(k - 1);

    let mut m_pattern = EdgePattern::empty(k)?;
    let mut w = DMatrix::zeros(k, k);
    for target in 0..k {
        let mut candidates: Vec<usize> = (0..k).filter(|&j| j != target).collect();
        for slot in 0..parents_per_indicator {
            let pick = rng.random_range(slot..candidates.len());
            candidates.swap(slot, pick);
            let parent = candidates[slot];
            m_pattern.set_edge(parent, target, true);
            let magnitude = rng.random_range(spec.weight_low..spec.weight_high);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            w[(parent, target)] = sign * magnitude;
        }
    }

    // pilot simulation over the regime mixture for intercept calibration
    let pilots = 2000;
    let regimes = spec.regimes();
    let mask = SemModel::full_mask(k);
    let mut pilot_rng = rng::stream(spec.seed, rng::tag::CALIBRATE, 0);
    let mut pilot_x = Vec::with_capacity(pilots);
    let mut pilot_iv = Vec::with_capacity(pilots);
    for i in 0..pilots {
        let regime = &regimes[i % regimes.len()];
        let clamps: Vec<(usize, f64)> = regime
            .iter()
            .map(|&node| (node, StandardNormal.sample(&mut pilot_rng)))
            .collect();
        let iv = InterventionMask::clamp(k, &clamps);
        let eps = DVector::from_fn(k, |j, _| {
            let draw: f64 = StandardNormal.sample(&mut pilot_rng);
            draw * noise.variances()[j].sqrt()
        });
        let x = solve_fixed_point(sem, &mask, &iv, &eps, 1e-10, 10_000)?;
        pilot_x.push(x);
        pilot_iv.push(iv);
    }

    // bisection on each intercept: the pooled expit mean over rows where the
    // indicator's node is not intervened is monotone increasing in z
    let mut z = DVector::zeros(k);
    for target in 0..k {
        let col = w.column(target).clone_owned();
        let rate_at = |zv: f64| {
            let mut total = 0.0;
            let mut count = 0usize;
            for (x, iv) in pilot_x.iter().zip(&pilot_iv) {
                if !iv.is_observed(target) {
                    continue;
                }
                total += crate::numeric::sigmoid(col.dot(x) + zv);
                count += 1;
            }
            total / count.max(1) as f64
        };
        let (mut lo, mut hi) = (-30.0f64, 30.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if rate_at(mid) < spec.mnar_rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        z[target] = 0.5 * (lo + hi);
    }

    let model = MnarModel::new(w, z, Some(m_pattern.clone()))?;
    Ok((model, m_pattern))
}

/// Simulates the complete (pre-coarsening) dataset: every regime gets
/// `n_per_intervention` rows, intervened nodes clamped to standard-normal
/// draws, noise `N(0, sigma^2)`, values from the fixed-point solve.
pub fn simulate_complete(instance: &Instance, spec: &InstanceSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.k;
    let mask = SemModel::full_mask(k);
    let mut data = Dataset::new(k);
    data.set_provenance(spec_hash(spec));
    for (regime_idx, regime) in spec.regimes().iter().enumerate() {
        for row in 0..spec.n_per_intervention {
            let mut value_rng =
                rng::stream2(spec.seed, rng::tag::SIM_VALUES, regime_idx as u64, row as u64);
            let clamps: Vec<(usize, f64)> = regime
                .iter()
                .map(|&node| (node, StandardNormal.sample(&mut value_rng)))
                .collect();
            let iv = InterventionMask::clamp(k, &clamps);
            let eps = DVector::from_fn(k, |j, _| {
                let draw: f64 = StandardNormal.sample(&mut value_rng);
                draw * instance.noise.variances()[j].sqrt()
            });
            let x = solve_fixed_point(&instance.sem, &mask, &iv, &eps, 1e-10, 10_000)?;
            let s: Vec<u8> = (0..k).map(|j| u8::from(iv.is_observed(j))).collect();
            data.push(Record {
                y: x,
                r: vec![1; k],
                s,
            })?;
        }
    }
    Ok(data)
}

/// Applies the missingness mechanism to a complete dataset: indicators
/// drawn per record with intervened nodes protected, then coarsening.
pub fn apply_missingness(complete: &Dataset, mnar: &MnarModel, seed: u64) -> Result<Dataset> {
    let k = complete.k();
    let mut data = Dataset::new(k);
    if let Some(p) = complete.provenance() {
        data.set_provenance(p.to_string());
    }
    for (idx, record) in complete.records().iter().enumerate() {
        let mut rng = rng::stream(seed, rng::tag::SIM_MISSING, idx as u64);
        let protected: Vec<bool> = record.s.iter().map(|&v| v == 0).collect();
        let r = sample_r(mnar, &record.y, &protected, &mut rng);
        let y = DVector::from_fn(k, |j, _| if r[j] == 1 { record.y[j] } else { f64::NAN });
        data.push(Record {
            y,
            r,
            s: record.s.clone(),
        })?;
    }
    Ok(data)
}

/// Complete simulation: values, then coarsening by the MNAR mechanism.
pub fn simulate(instance: &Instance, spec: &InstanceSpec) -> Result<Dataset> {
    let complete = simulate_complete(instance, spec)?;
    apply_missingness(&complete, &instance.mnar, spec.seed)
}

/// Realized missing rate among non-protected slots.
pub fn observed_missing_rate(data: &Dataset) -> f64 {
    let mut missing = 0usize;
    let mut eligible = 0usize;
    for rec in data.records() {
        for j in 0..data.k() {
            if rec.s[j] == 1 {
                eligible += 1;
                if rec.r[j] == 0 {
                    missing += 1;
                }
            }
        }
    }
    missing as f64 / eligible.max(1) as f64
}

/// FNV-1a hash of the canonical JSON encoding; stable across runs and
/// platforms, used as the provenance tag in manifests.
pub fn spec_hash(spec: &InstanceSpec) -> String {
    let text = serde_json::to_string(spec).expect("spec serializes");
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Writes the dataset CSV: header `x_1..x_K,r_1..r_K,s_1..s_K`, one row
/// per record, missing cells as the literal `?`. Value cells round-trip
/// exactly (shortest representation that restores the same f64).
pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let k = data.k();
    let header: Vec<String> = (1..=k)
        .map(|i| format!("x_{i}"))
        .chain((1..=k).map(|i| format!("r_{i}")))
        .chain((1..=k).map(|i| format!("s_{i}")))
        .collect();
    writeln!(file, "{}", header.join(","))?;
    for rec in data.records() {
        let mut cells: Vec<String> = Vec::with_capacity(3 * k);
        for j in 0..k {
            if rec.r[j] == 0 {
                cells.push("?".to_string());
            } else {
                cells.push(format!("{:?}", rec.y[j]));
            }
        }
        for j in 0..k {
            cells.push(rec.r[j].to_string());
        }
        for j in 0..k {
            cells.push(rec.s[j].to_string());
        }
        writeln!(file, "{}", cells.join(","))?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a dataset CSV produced by [`write_dataset`] (or an external
/// tool following the same format). Errors name the offending row.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let display = path.display().to_string();
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data {
            path: display.clone(),
            row: 1,
            message: "empty file".into(),
        })??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() % 3 != 0 || cols.is_empty() {
        return Err(Error::Data {
            path: display,
            row: 1,
            message: format!("header must have 3K columns, found {}", cols.len()),
        });
    }
    let k = cols.len() / 3;
    for i in 0..k {
        let want = [
            format!("x_{}", i + 1),
            format!("r_{}", i + 1),
            format!("s_{}", i + 1),
        ];
        for (block, name) in want.iter().enumerate() {
            if cols[block * k + i] != name {
                return Err(Error::Data {
                    path: display,
                    row: 1,
                    message: format!(
                        "unexpected header cell {:?}, wanted {:?}",
                        cols[block * k + i], name
                    ),
                });
            }
        }
    }

    let mut data = Dataset::new(k);
    for (line_idx, line) in lines.enumerate() {
        let row = line_idx + 2; // 1-based, after the header
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.trim().split(',').collect();
        if cells.len() != 3 * k {
            return Err(Error::Data {
                path: display,
                row,
                message: format!("expected {} cells, found {}", 3 * k, cells.len()),
            });
        }
        let parse_bit = |cell: &str, what: &str| -> Result<u8> {
            match cell {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::Data {
                    path: display.clone(),
                    row,
                    message: format!("{what} must be 0/1, found {other:?}"),
                }),
            }
        };
        let mut r = Vec::with_capacity(k);
        let mut s = Vec::with_capacity(k);
        for j in 0..k {
            r.push(parse_bit(cells[k + j], "missingness indicator")?);
            s.push(parse_bit(cells[2 * k + j], "intervention indicator")?);
        }
        let mut y = DVector::zeros(k);
        for j in 0..k {
            let cell = cells[j];
            if cell == "?" {
                if r[j] == 1 {
                    return Err(Error::Data {
                        path: display,
                        row,
                        message: format!("column x_{} is '?' but r_{} = 1", j + 1, j + 1),
                    });
                }
                y[j] = f64::NAN;
            } else {
                let value: f64 = cell.parse().map_err(|_| Error::Data {
                    path: display.clone(),
                    row,
                    message: format!("cell {cell:?} is neither a number nor '?'"),
                })?;
                if r[j] == 0 {
                    return Err(Error::Data {
                        path: display,
                        row,
                        message: format!("column x_{} has a value but r_{} = 0", j + 1, j + 1),
                    });
                }
                y[j] = value;
            }
        }
        data.push(Record { y, r, s }).map_err(|e| Error::Data {
            path: display.clone(),
            row,
            message: e.to_string(),
        })?;
    }
    Ok(data)
}
