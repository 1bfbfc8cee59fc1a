//! Command implementations behind the `flowguide` binary.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use flowguide::control::{
    global_control_solve, mpc_delta_t, mpc_rhc, mpc_rhc_single, GuidanceConfig, GuidanceResult,
    GuidanceSummary, Lookahead, Method, SolveError,
};
use flowguide::data::{sample_base, write_pgm, ImageIoError};
use flowguide::dynamics::{euler_sample, trajectory_to_csv};
use flowguide::field::VectorField;
use flowguide::inverse::{simulate_measurement, ForwardOperator, TerminalLoss};
use flowguide::metrics::{psnr, ssim, trajectory_distance};
use flowguide::model::{
    load_checkpoint, save_checkpoint, train, CheckpointError, Discs16Pairs, HexagonPairs,
    MlpVectorField, TrainError,
};

use config::{GuideSpec, SampleSpec, SweepSpec, TaskSpec, TrainSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver error: {0}")]
    Solver(#[from] SolveError),
    #[error("training error: {0}")]
    Train(#[from] TrainError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("image i/o error: {0}")]
    Image(#[from] ImageIoError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Exit code: 1 for configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Trains a model per the spec and writes `model.ckpt` plus `loss.csv`.
pub fn cmd_train(spec: &TrainSpec, out: &Path) -> Result<PathBuf, CliError> {
    spec.validate()?;
    ensure_out_dir(out)?;
    let hidden = spec.hidden_widths()?;
    let config = flowguide::model::TrainConfig {
        batch_size: spec.batch_size,
        iterations: spec.iterations,
        learning_rate: spec.learning_rate,
        hidden,
        seed: spec.seed,
        dataset: spec.dataset.clone(),
    };
    let (model, losses) = match spec.dataset.as_str() {
        "hexagon" => train(&mut HexagonPairs::new(spec.seed), &config)?,
        "discs16" => train(&mut Discs16Pairs::new(spec.seed), &config)?,
        other => return Err(CliError::Config(format!("unknown dataset tag {other:?}"))),
    };

    let ckpt = out.join("model.ckpt");
    save_checkpoint(&model, &ckpt)?;

    let mut csv = String::from("iter,loss\n");
    for (i, loss) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{loss}");
    }
    std::fs::write(out.join("loss.csv"), csv)?;
    Ok(ckpt)
}

/// Integrates free-flow trajectories and writes endpoint and trajectory CSVs.
pub fn cmd_sample(spec: &SampleSpec, out: &Path) -> Result<(), CliError> {
    spec.validate()?;
    ensure_out_dir(out)?;
    let model = load_checkpoint(&spec.checkpoint)?;
    let d = model.input_dim();

    let starts = sample_base(spec.count, d, spec.seed);
    let mut endpoints = String::from("i");
    for i in 0..d {
        let _ = write!(endpoints, ",x_{i}");
    }
    endpoints.push('\n');
    for (i, x0) in starts.iter().enumerate() {
        let traj = euler_sample(&model, x0, spec.steps).map_err(SolveError::from)?;
        let _ = write!(endpoints, "{i}");
        for v in traj.terminal() {
            let _ = write!(endpoints, ",{v}");
        }
        endpoints.push('\n');
        if i < spec.trajectory_dumps {
            std::fs::write(out.join(format!("traj_{i:03}.csv")), trajectory_to_csv(&traj))?;
        }
    }
    std::fs::write(out.join("endpoints.csv"), endpoints)?;
    Ok(())
}

/// Everything produced by one guided solve job.
pub struct GuideOutcome {
    pub seed: u64,
    pub result: GuidanceResult,
    pub summary: GuidanceSummary,
}

pub const METRICS_HEADER: &str =
    "method,task,lambda,N,K,seed,psnr,ssim,terminal_loss,energy,wall_time_s";

fn metrics_row(summary: &GuidanceSummary, task: &str, seed_field: &str) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        summary.method,
        task,
        summary.lambda,
        summary.n,
        summary.k.map(|k| k.to_string()).unwrap_or_default(),
        seed_field,
        opt(summary.psnr),
        opt(summary.ssim),
        summary.terminal_loss,
        summary.energy,
        summary.wall_time_s,
    )
}

fn append_metrics(out: &Path, rows: &[String]) -> Result<(), CliError> {
    let path = out.join("metrics.csv");
    let mut text = if path.exists() {
        std::fs::read_to_string(&path)?
    } else {
        format!("{METRICS_HEADER}\n")
    };
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run_solver<V: VectorField>(
    method: Method,
    field: &V,
    x0: &[f64],
    phi: &TerminalLoss,
    config: &GuidanceConfig,
) -> Result<GuidanceResult, SolveError> {
    match method {
        Method::Global => global_control_solve(field, x0, phi, config),
        Method::RecedingHorizon => mpc_rhc(field, x0, phi, config),
        Method::SingleStep => mpc_rhc_single(field, x0, phi, config),
        Method::DeltaT => mpc_delta_t(field, x0, phi, config),
    }
}

/// Degraded observation mapped back to state space for metrics and export:
/// full-size measurements pass through, selection-style measurements are
/// zero-filled through the adjoint.
fn degraded_state(op: &ForwardOperator, y: &[f64]) -> Vec<f64> {
    if y.len() == op.input_dim() {
        y.to_vec()
    } else {
        op.apply_adjoint(y).unwrap_or_else(|_| vec![0.0; op.input_dim()])
    }
}

fn clamp_unit(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

fn run_guide_job(
    model: &MlpVectorField,
    spec: &GuideSpec,
    job: usize,
    out: &Path,
    write_files: bool,
) -> Result<GuideOutcome, CliError> {
    let d = model.input_dim();
    let seed = spec.seed + job as u64;
    let method = spec.method()?;
    let config = spec.guidance_config(seed)?;
    let x0 = &sample_base(1, d, seed)[0];

    let suffix = if spec.repeat > 1 { format!("_{seed}") } else { String::new() };
    let mut summary_psnr = None;
    let mut summary_ssim = None;

    let (phi, truth, operator) = match &spec.task {
        TaskSpec::Corner { target } => {
            if target.len() != d {
                return Err(CliError::Config(format!(
                    "corner target dim {} vs model dim {d}",
                    target.len()
                )));
            }
            (TerminalLoss::target(target.clone()), None, None)
        }
        TaskSpec::Inverse { sigma, unscaled_loss, .. } => {
            let op = spec.task.operator(d)?.expect("inverse task has operator");
            let truth = spec.task.ground_truth(d, job)?;
            let obs = simulate_measurement(&op, &truth, *sigma, seed ^ 0x0B5E_7EED);
            let phi = if *unscaled_loss {
                TerminalLoss::data_fidelity_unscaled(obs)
            } else {
                TerminalLoss::data_fidelity(obs)
            };
            (phi, Some(truth), Some(op))
        }
    };

    let result = run_solver(method, model, x0, &phi, &config)?;

    if let (Some(truth), Some(op)) = (&truth, &operator) {
        let restored = clamp_unit(result.terminal_state());
        summary_psnr = Some(psnr(&restored, truth, 1.0));
        let side = (d as f64).sqrt().round() as usize;
        if side * side == d && side >= 7 {
            summary_ssim = Some(ssim(&restored, truth, side, side, 1.0));
        }
        if write_files {
            let y = match &phi {
                TerminalLoss::DataFidelity { obs, .. } => obs.y.clone(),
                _ => unreachable!(),
            };
            let degraded = degraded_state(op, &y);
            if side * side == d {
                write_pgm(&out.join(format!("truth{suffix}.pgm")), side, side, truth)?;
                write_pgm(
                    &out.join(format!("degraded{suffix}.pgm")),
                    side,
                    side,
                    &clamp_unit(&degraded),
                )?;
                write_pgm(&out.join(format!("restored{suffix}.pgm")), side, side, &restored)?;
                if let Some(kept) = op.kept_indices() {
                    let mut bitmap = vec![0.0; d];
                    for &i in kept {
                        bitmap[i] = 1.0;
                    }
                    write_pgm(&out.join(format!("mask{suffix}.pgm")), side, side, &bitmap)?;
                }
            }
        }
    }

    let mut summary = result.summary(&config);
    summary.psnr = summary_psnr;
    summary.ssim = summary_ssim;

    if write_files {
        std::fs::write(
            out.join(format!("trajectory{suffix}.csv")),
            trajectory_to_csv(&result.trajectory),
        )?;
        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| CliError::Config(format!("summary serialization: {e}")))?;
        std::fs::write(out.join(format!("summary{suffix}.json")), json)?;
    }

    Ok(GuideOutcome { seed, result, summary })
}

/// Runs `repeat` guided solves (optionally across threads), writes per-job
/// artifacts, and appends seed-sorted metric rows plus an aggregate row.
pub fn cmd_guide(spec: &GuideSpec, out: &Path, parallel: usize) -> Result<Vec<GuideOutcome>, CliError> {
    spec.validate()?;
    ensure_out_dir(out)?;
    let model = load_checkpoint(&spec.checkpoint)?;
    let task = spec.task.tag();

    let jobs: Vec<usize> = (0..spec.repeat).collect();
    let mut outcomes: Vec<GuideOutcome> = if parallel > 1 && spec.repeat > 1 {
        let mut collected: Vec<(usize, Result<GuideOutcome, CliError>)> = Vec::new();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk in jobs.chunks(spec.repeat.div_ceil(parallel)) {
                let model_ref = &model;
                let spec_ref = spec;
                handles.push(scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|&job| (job, run_guide_job(model_ref, spec_ref, job, out, true)))
                        .collect::<Vec<_>>()
                }));
            }
            for handle in handles {
                collected.extend(handle.join().expect("guide worker panicked"));
            }
        });
        collected.sort_by_key(|(job, _)| *job);
        collected.into_iter().map(|(_, r)| r).collect::<Result<Vec<_>, _>>()?
    } else {
        jobs.iter()
            .map(|&job| run_guide_job(&model, spec, job, out, true))
            .collect::<Result<Vec<_>, _>>()?
    };

    outcomes.sort_by_key(|o| o.seed);
    let mut rows: Vec<String> =
        outcomes.iter().map(|o| metrics_row(&o.summary, &task, &o.seed.to_string())).collect();
    if outcomes.len() > 1 {
        let mean = |f: &dyn Fn(&GuideOutcome) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = outcomes.iter().filter_map(f).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let mut agg = outcomes[0].summary.clone();
        agg.psnr = mean(&|o| o.summary.psnr);
        agg.ssim = mean(&|o| o.summary.ssim);
        agg.terminal_loss =
            outcomes.iter().map(|o| o.summary.terminal_loss).sum::<f64>() / outcomes.len() as f64;
        agg.energy =
            outcomes.iter().map(|o| o.summary.energy).sum::<f64>() / outcomes.len() as f64;
        agg.wall_time_s = outcomes.iter().map(|o| o.summary.wall_time_s).sum::<f64>();
        rows.push(metrics_row(&agg, &task, "aggregate"));
    }
    append_metrics(out, &rows)?;
    Ok(outcomes)
}

/// One sweep row: swept value plus solution quality relative to the global
/// reference.
pub struct SweepRow {
    pub value: f64,
    pub trajectory_distance: f64,
    pub terminal_error: f64,
    pub energy: f64,
    pub objective: f64,
}

/// Solves the global problem as a reference, then the receding-horizon
/// solver per swept value, writing `sweep_<param>.csv`.
pub fn cmd_sweep(spec: &SweepSpec, out: &Path) -> Result<Vec<SweepRow>, CliError> {
    spec.validate()?;
    ensure_out_dir(out)?;
    let model = load_checkpoint(&spec.checkpoint)?;
    let d = model.input_dim();
    let x0 = &sample_base(1, d, spec.seed)[0];

    let phi_for = |lambda: f64| -> Result<(TerminalLoss, f64), CliError> {
        match &spec.task {
            TaskSpec::Corner { target } => {
                if target.len() != d {
                    return Err(CliError::Config(format!(
                        "corner target dim {} vs model dim {d}",
                        target.len()
                    )));
                }
                Ok((TerminalLoss::target(target.clone()), lambda))
            }
            TaskSpec::Inverse { sigma, unscaled_loss, .. } => {
                let op = spec.task.operator(d)?.expect("inverse task has operator");
                let truth = spec.task.ground_truth(d, 0)?;
                let obs = simulate_measurement(&op, &truth, *sigma, spec.seed ^ 0x0B5E_7EED);
                let phi = if *unscaled_loss {
                    TerminalLoss::data_fidelity_unscaled(obs)
                } else {
                    TerminalLoss::data_fidelity(obs)
                };
                Ok((phi, lambda))
            }
        }
    };

    let global_config = |lambda: f64, n: usize| -> GuidanceConfig {
        let mut c = GuidanceConfig::new(lambda, n);
        c.inner_iters = spec.global_n_ctrl.unwrap_or(spec.n_ctrl.max(400));
        c.inner_lr = spec.global_lr.unwrap_or(spec.lr);
        c.seed = spec.seed;
        c
    };

    let mut rows = Vec::with_capacity(spec.values.len());
    let mut global_cache: Option<(f64, usize, GuidanceResult)> = None;
    for &value in &spec.values {
        let (lambda, n, k) = match spec.param.as_str() {
            "k" => (spec.lambda, spec.n, value as usize),
            "lambda" => (value, spec.n, spec.n),
            "n" => (spec.lambda, value as usize, value as usize),
            _ => unreachable!("validated"),
        };
        let (phi, lambda) = phi_for(lambda)?;

        let needs_fresh = match &global_cache {
            Some((gl, gn, _)) => *gl != lambda || *gn != n,
            None => true,
        };
        if needs_fresh {
            let g = global_control_solve(&model, x0, &phi, &global_config(lambda, n))?;
            global_cache = Some((lambda, n, g));
        }
        let global = &global_cache.as_ref().expect("populated above").2;

        let mut config = GuidanceConfig::new(lambda, n);
        config.lookahead = Lookahead::Fixed(k);
        config.inner_iters = spec.n_ctrl;
        config.inner_lr = spec.lr;
        config.seed = spec.seed;
        let r = mpc_rhc(&model, x0, &phi, &config)?;

        rows.push(SweepRow {
            value,
            trajectory_distance: trajectory_distance(&r.trajectory, &global.trajectory),
            terminal_error: r.terminal_loss,
            energy: r.control_energy,
            objective: r.objective,
        });
    }

    let header = match spec.param.as_str() {
        "k" => "K",
        "lambda" => "lambda",
        "n" => "N",
        _ => unreachable!(),
    };
    let mut csv = format!("{header},traj_distance,terminal_error,energy,J\n");
    for row in &rows {
        let value_text = if spec.param == "lambda" {
            row.value.to_string()
        } else {
            (row.value as u64).to_string()
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            value_text, row.trajectory_distance, row.terminal_error, row.energy, row.objective
        );
    }
    std::fs::write(out.join(format!("sweep_{}.csv", spec.param)), csv)?;

    if let Some((lambda, n, g)) = &global_cache {
        let mut config = GuidanceConfig::new(*lambda, *n);
        config.inner_iters = spec.global_n_ctrl.unwrap_or(spec.n_ctrl.max(400));
        config.inner_lr = spec.global_lr.unwrap_or(spec.lr);
        let json = serde_json::to_string_pretty(&g.summary(&config))
            .map_err(|e| CliError::Config(format!("summary serialization: {e}")))?;
        std::fs::write(out.join("global_summary.json"), json)?;
    }
    Ok(rows)
}
