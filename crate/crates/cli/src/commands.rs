//! The four commands: simulate, fit, evaluate, benchmark.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use flowsem::checkpoint::{Checkpoint, TruthSidecar};
use flowsem::graph::{edge_precision_recall, shd};
use flowsem::likelihood::{target_log_density, LogDetMode};
use flowsem::missing::log_prob_r;
use flowsem::synth::{
    apply_missingness, gen_instance, read_dataset, simulate_complete, spec_hash, write_dataset,
    Dataset, InstanceSpec, Record,
};
use flowsem::train::{
    extract_graph_parts, extract_graph_parts_acyclic, run_em, run_em_dag, FitState, TrainConfig,
};

use crate::config::ExperimentConfig;

#[derive(Serialize)]
struct Manifest<'a> {
    tool_version: &'a str,
    command: &'a str,
    seed: u64,
    spec_hash: String,
}

fn write_manifest(out_dir: &Path, command: &str, spec: &InstanceSpec) -> anyhow::Result<()> {
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        seed: spec.seed,
        spec_hash: spec_hash(spec),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out_dir.join("manifest.json"), text)?;
    Ok(())
}

/// Simulate one instance: dataset CSV, ground-truth sidecar, manifest.
pub fn cmd_simulate(
    config: &ExperimentConfig,
    out_dir: &Path,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let mut spec = config.instance.clone();
    if let Some(s) = seed {
        spec.seed = s;
    }
    std::fs::create_dir_all(out_dir)?;
    let instance = gen_instance(&spec)?;
    let complete = simulate_complete(&instance, &spec)?;
    let data = apply_missingness(&complete, &instance.mnar, spec.seed)?;
    write_dataset(&data, &out_dir.join("dataset.csv"))?;
    TruthSidecar::from_instance(&instance).save(&out_dir.join("truth.json"))?;
    write_manifest(out_dir, "simulate", &spec)?;
    eprintln!(
        "simulated {} records over {} regimes -> {}",
        data.len(),
        spec.regimes().len(),
        out_dir.display()
    );
    Ok(())
}

fn history_csv(state: &FitState) -> String {
    let mut out =
        String::from("epoch,objective,objective_se,proxy_loglik,mean_attempts,fallback_count,lipschitz\n");
    for h in &state.history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            h.epoch,
            h.objective,
            h.objective_se,
            h.proxy_loglik,
            h.mean_attempts,
            h.fallback_count,
            h.lipschitz
        ));
    }
    out
}

fn acceptance_csv(state: &FitState, records: usize) -> String {
    let mut out = String::from("epoch,record_count,mean_attempts,fallback_count\n");
    for h in &state.history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, records, h.mean_attempts, h.fallback_count
        ));
    }
    out
}

/// Fit a model to a dataset CSV; writes checkpoint, history, and
/// acceptance-statistics files.
pub fn cmd_fit(
    data_path: &Path,
    config: &ExperimentConfig,
    out_dir: &Path,
    seed: Option<u64>,
    pre_imputed: bool,
) -> anyhow::Result<()> {
    let data = read_dataset(data_path)?;
    let mut train = config.train.clone();
    if let Some(s) = seed {
        train.seed = s;
    }
    if pre_imputed && data.has_missing() {
        return Err(flowsem::Error::Data {
            path: data_path.display().to_string(),
            row: 0,
            message: "--pre-imputed given but the dataset still has missing cells".into(),
        }
        .into());
    }
    if !data.has_missing() {
        eprintln!("complete data: E-step pass-through");
    }

    std::fs::create_dir_all(out_dir)?;
    let dag = train.lambda_dag > 0.0;
    let state = if dag {
        run_em_dag(&data, &train)?
    } else {
        run_em(&data, &train)?
    };
    Checkpoint::from_state(&state, train.lipschitz_target, dag)
        .save(&out_dir.join("checkpoint.json"))?;
    std::fs::write(out_dir.join("history.csv"), history_csv(&state))?;
    std::fs::write(
        out_dir.join("acceptance.csv"),
        acceptance_csv(&state, data.len()),
    )?;
    write_manifest(out_dir, "fit", &config.instance)?;
    eprintln!(
        "fit finished after {} epochs -> {}",
        state.history.len(),
        out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Metrics {
    k: usize,
    target_shd: usize,
    m_shd: usize,
    target_precision: f64,
    target_recall: f64,
    m_precision: f64,
    m_recall: f64,
    held_out_loglik: Option<f64>,
    held_out_records: Option<usize>,
}

/// Evaluate a checkpoint against a ground-truth sidecar.
pub fn cmd_evaluate(
    checkpoint_path: &Path,
    truth_path: &Path,
    out_path: &Path,
    test_data: Option<&Path>,
    edge_threshold: f64,
) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let truth = TruthSidecar::load(truth_path)?;
    if ckpt.sem.k() != truth.sem.k() {
        return Err(flowsem::Error::DimensionMismatch(format!(
            "checkpoint has {} nodes, truth has {}",
            ckpt.sem.k(),
            truth.sem.k()
        ))
        .into());
    }
    let (target, m_edges) = if ckpt.dag_constrained {
        extract_graph_parts_acyclic(&ckpt.sem, &ckpt.mask, &ckpt.mnar, edge_threshold)
    } else {
        extract_graph_parts(&ckpt.sem, &ckpt.mask, &ckpt.mnar, edge_threshold)
    };
    let (tp, tr) = edge_precision_recall(&target, &truth.target_pattern)?;
    let (mp, mr) = edge_precision_recall(&m_edges, &truth.m_pattern)?;

    let mut held_out = None;
    let mut held_out_records = None;
    if let Some(path) = test_data {
        let test = read_dataset(path)?;
        if test.k() != ckpt.sem.k() {
            return Err(flowsem::Error::DimensionMismatch(format!(
                "test data has {} nodes, checkpoint has {}",
                test.k(),
                ckpt.sem.k()
            ))
            .into());
        }
        // proxy: complete-data log-likelihood over fully observed records
        let mask = ckpt.mask.mean_mask();
        let mode = LogDetMode::auto(&ckpt.sem);
        let ld_cfg = flowsem::likelihood::LogDetEstimatorConfig::default();
        let mut total = 0.0;
        let mut count = 0usize;
        for (idx, rec) in test.records().iter().enumerate() {
            if !rec.is_complete() {
                continue;
            }
            let mut rng = flowsem::rng::stream(0, flowsem::rng::tag::LOGDET, idx as u64);
            let iv = rec.intervention_mask();
            let target_ll = target_log_density(
                &ckpt.sem, &mask, &ckpt.noise, &rec.y, &iv, mode, &ld_cfg, &mut rng,
            )?;
            total += target_ll + log_prob_r(&ckpt.mnar, &rec.r, &rec.y, &rec.skip_flags());
            count += 1;
        }
        if count > 0 {
            held_out = Some(total / count as f64);
        }
        held_out_records = Some(count);
    }

    let metrics = Metrics {
        k: ckpt.sem.k(),
        target_shd: shd(&target, &truth.target_pattern)?,
        m_shd: shd(&m_edges, &truth.m_pattern)?,
        target_precision: tp,
        target_recall: tr,
        m_precision: mp,
        m_recall: mr,
        held_out_loglik: held_out,
        held_out_records,
    };
    let text = serde_json::to_string_pretty(&metrics)?;
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out_path, text)?;
    eprintln!(
        "target SHD {}, m-edge SHD {} -> {}",
        metrics.target_shd,
        metrics.m_shd,
        out_path.display()
    );
    Ok(())
}

/// Drops every record with any missing coordinate.
fn complete_cases_only(data: &Dataset) -> Dataset {
    let mut out = Dataset::new(data.k());
    for rec in data.records() {
        if rec.is_complete() {
            out.push(rec.clone()).expect("record was already valid");
        }
    }
    out
}

/// Fills missing cells with the per-column mean of the observed values.
fn mean_impute(data: &Dataset) -> Dataset {
    let k = data.k();
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for rec in data.records() {
        for j in 0..k {
            if rec.r[j] == 1 {
                sums[j] += rec.y[j];
                counts[j] += 1;
            }
        }
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mut out = Dataset::new(k);
    for rec in data.records() {
        let mut y = rec.y.clone();
        for j in 0..k {
            if rec.r[j] == 0 {
                y[j] = means[j];
            }
        }
        out.push(Record {
            y,
            r: vec![1; k],
            s: rec.s.clone(),
        })
        .expect("imputed record is complete");
    }
    out
}

const BENCH_METHODS: [&str; 3] = ["em", "complete-case", "mean-impute"];

fn bench_cell(
    spec: &InstanceSpec,
    train: &TrainConfig,
    method: &str,
) -> anyhow::Result<(usize, usize)> {
    let instance = gen_instance(spec)?;
    let complete = simulate_complete(&instance, spec)?;
    let fit_data = match method {
        "em-complete" => complete,
        _ => {
            let coarse = apply_missingness(&complete, &instance.mnar, spec.seed)?;
            match method {
                "em" => coarse,
                "complete-case" => complete_cases_only(&coarse),
                "mean-impute" => mean_impute(&coarse),
                other => anyhow::bail!("unknown method {other}"),
            }
        }
    };
    let mut cfg = train.clone();
    cfg.seed = spec.seed;
    cfg.sem_family = spec.sem_family;
    cfg.noise_sigma = spec.noise_sigma;
    cfg.lipschitz_target = spec.lipschitz_target;
    let dag = cfg.lambda_dag > 0.0;
    let state = if dag {
        run_em_dag(&fit_data, &cfg)?
    } else {
        run_em(&fit_data, &cfg)?
    };
    let (target, m_edges) = if dag {
        extract_graph_parts_acyclic(&state.sem, &state.mask, &state.mnar, cfg.edge_threshold)
    } else {
        extract_graph_parts(&state.sem, &state.mask, &state.mnar, cfg.edge_threshold)
    };
    Ok((
        shd(&target, &instance.target_pattern)?,
        shd(&m_edges, &instance.m_pattern)?,
    ))
}

/// Sweep missing rates and seeds over the configured methods plus a
/// complete-data control, emitting a long-format CSV for plotting.
pub fn cmd_benchmark(
    config: &ExperimentConfig,
    out_dir: &Path,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let sweep = config
        .sweep
        .clone()
        .ok_or_else(|| flowsem::Error::InvalidConfig("benchmark requires a sweep section".into()))?;
    std::fs::create_dir_all(out_dir)?;
    let base_seed = seed.unwrap_or(config.instance.seed);

    let mut csv = String::from("rate,seed,method,shd_target,shd_m,seconds,error\n");
    let mut append = |rate: f64, seed: u64, method: &str, outcome: anyhow::Result<(usize, usize)>, secs: f64| {
        match outcome {
            Ok((t, m)) => csv.push_str(&format!("{rate},{seed},{method},{t},{m},{secs:.3},\n")),
            Err(e) => {
                let msg = e.to_string().replace([',', '\n'], ";");
                csv.push_str(&format!("{rate},{seed},{method},,,{secs:.3},{msg}\n"));
            }
        }
    };

    for seed_idx in 0..sweep.seeds {
        let cell_seed = base_seed + seed_idx;

        // complete-data control, recorded at rate 0
        let mut spec = config.instance.clone();
        spec.seed = cell_seed;
        let start = Instant::now();
        let outcome = bench_cell(&spec, &config.train, "em-complete");
        append(0.0, cell_seed, "em-complete", outcome, start.elapsed().as_secs_f64());

        for &rate in &sweep.rates {
            for method in BENCH_METHODS {
                let mut spec = config.instance.clone();
                spec.seed = cell_seed;
                spec.mnar_rate = rate;
                let start = Instant::now();
                let outcome = bench_cell(&spec, &config.train, method);
                append(rate, cell_seed, method, outcome, start.elapsed().as_secs_f64());
            }
        }
    }

    let path = out_dir.join("benchmark.csv");
    let mut file = std::fs::File::create(&path)?;
    file.write_all(csv.as_bytes())?;
    write_manifest(out_dir, "benchmark", &config.instance)?;
    eprintln!("benchmark table -> {}", path.display());
    Ok(())
}
