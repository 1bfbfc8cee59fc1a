//! Guidance solvers that steer a flow trajectory toward a terminal
//! objective by optimizing additive velocity controls.
//!
//! All four solvers minimize variations of the same quantity: a cell-width
//! weighted control energy plus `lambda` times a terminal loss at the
//! rollout endpoint. They differ in how much of the horizon each inner
//! optimization sees and in how often the velocity field enters the
//! differentiated graph:
//!
//! * [`global_control_solve`] optimizes all `N` controls jointly against
//!   the full rollout.
//! * [`mpc_rhc`] re-plans the remaining horizon on a fresh `K`-cell grid at
//!   every outer step and applies only the first planned control.
//! * [`mpc_rhc_single`] is the `K = 1` specialization; the single planning
//!   step spans the whole remaining horizon, which linearizes the path and
//!   keeps the field out of the differentiated graph entirely.
//! * [`mpc_delta_t`] plans only the next cell but scores it through the
//!   straight-line terminal estimate, differentiating through exactly one
//!   nested field evaluation.
//!
//! Inner problems are solved by Adam from zero-initialized controls, with a
//! fixed budget and an early stop when the relative objective improvement
//! over a 20-iteration window falls below `1e-6`.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{
    euler_controlled, euler_controlled_tape, ControlSchedule, DynamicsError, TimeGrid, Trajectory,
};
use crate::field::VectorField;
use crate::inverse::TerminalLoss;
use crate::model::{Adam, OptimError};
use crate::tape::{NodeId, Tape, Tensor};

const EARLY_STOP_WINDOW: usize = 20;
const EARLY_STOP_REL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Method {
    Global,
    RecedingHorizon,
    SingleStep,
    DeltaT,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Global => "global",
            Method::RecedingHorizon => "rhc",
            Method::SingleStep => "rhc1",
            Method::DeltaT => "deltat",
        }
    }
}

/// Planning-grid size for the receding-horizon solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lookahead {
    Fixed(usize),
    /// Match the number of outer cells left, so planning nodes coincide
    /// with the outer grid.
    FullRemaining,
}

#[derive(Clone, Debug)]
pub struct GuidanceConfig {
    /// Data-consistency weight; interpreted as the rescaled weight when
    /// `rescale_lambda` is set on the one-step-horizon solver.
    pub lambda: f64,
    /// Outer grid size `N` (step `1/N`).
    pub n_steps: usize,
    /// Receding-horizon lookahead `K`.
    pub lookahead: Lookahead,
    pub inner_lr: f64,
    /// Inner optimization budget per (sub-)problem.
    pub inner_iters: usize,
    /// Apply the `lambda / dt` convention in [`mpc_delta_t`].
    pub rescale_lambda: bool,
    /// Initialize inner controls from the previous outer step instead of
    /// zero. Off by default; the null-space guarantees of the single-step
    /// solver only hold from zero initialization.
    pub warm_start: bool,
    /// Make the single-step solver advance over the whole remaining
    /// horizon at once instead of one outer cell.
    pub single_step_full_jump: bool,
    pub seed: u64,
}

impl GuidanceConfig {
    pub fn new(lambda: f64, n_steps: usize) -> Self {
        GuidanceConfig {
            lambda,
            n_steps,
            lookahead: Lookahead::Fixed(1),
            inner_lr: 0.1,
            inner_iters: 20,
            rescale_lambda: false,
            warm_start: false,
            single_step_full_jump: false,
            seed: 0,
        }
    }

    pub fn with_lookahead(mut self, k: usize) -> Self {
        self.lookahead = Lookahead::Fixed(k);
        self
    }

    pub fn with_inner(mut self, iters: usize, lr: f64) -> Self {
        self.inner_iters = iters;
        self.inner_lr = lr;
        self
    }

    pub fn validate(&self) {
        assert!(self.lambda >= 0.0, "guidance: lambda must be >= 0");
        assert!(self.n_steps >= 1, "guidance: n_steps must be >= 1");
        assert!(self.inner_iters >= 1, "guidance: inner_iters must be >= 1");
        assert!(self.inner_lr > 0.0, "guidance: inner_lr must be positive");
        if let Lookahead::Fixed(k) = self.lookahead {
            assert!(k >= 1, "guidance: lookahead must be >= 1");
        }
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("objective non-finite at outer step {outer}, inner iteration {inner}")]
    NonFiniteObjective { outer: usize, inner: usize },
    #[error("non-finite state advancing outer step {outer}")]
    NonFiniteState { outer: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Outcome of one guided solve. `objective` always satisfies
/// `objective = control_energy + lambda_effective * terminal_loss`.
#[derive(Clone, Debug)]
pub struct GuidanceResult {
    pub method: Method,
    pub trajectory: Trajectory,
    pub controls: ControlSchedule,
    pub objective: f64,
    pub control_energy: f64,
    pub terminal_loss: f64,
    pub lambda_input: f64,
    pub lambda_effective: f64,
    pub inner_iterations: u64,
    /// Field evaluations recorded inside differentiated graphs while this
    /// solve ran, taken from the field's own counter.
    pub differentiated_field_evals: u64,
    pub wall_time_s: f64,
}

impl GuidanceResult {
    pub fn terminal_state(&self) -> &[f64] {
        self.trajectory.terminal()
    }
}

/// Summary record for result files.
#[derive(Clone, Debug, Serialize)]
pub struct GuidanceSummary {
    pub method: String,
    pub lambda: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub n_ctrl: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(rename = "J")]
    pub j: f64,
    pub energy: f64,
    pub terminal_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub wall_time_s: f64,
}

impl GuidanceResult {
    pub fn summary(&self, config: &GuidanceConfig) -> GuidanceSummary {
        let k = match (self.method, config.lookahead) {
            (Method::RecedingHorizon, Lookahead::Fixed(k)) => Some(k),
            (Method::RecedingHorizon, Lookahead::FullRemaining) => Some(config.n_steps),
            (Method::SingleStep, _) => Some(1),
            _ => None,
        };
        GuidanceSummary {
            method: self.method.as_str().to_string(),
            lambda: self.lambda_input,
            n: config.n_steps,
            k,
            n_ctrl: config.inner_iters,
            lr: config.inner_lr,
            seed: config.seed,
            j: self.objective,
            energy: self.control_energy,
            terminal_loss: self.terminal_loss,
            psnr: None,
            ssim: None,
            wall_time_s: self.wall_time_s,
        }
    }
}

/// Cell-width weighted control energy `sum_k w_k ||u_k||^2`.
pub fn control_energy(schedule: &ControlSchedule) -> f64 {
    schedule
        .controls
        .iter()
        .enumerate()
        .map(|(k, u)| schedule.grid.width(k) * u.iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// Full objective of a control schedule: energy plus `lambda` times the
/// terminal loss at the rollout endpoint.
pub fn objective_eval<V: VectorField>(
    field: &V,
    x0: &[f64],
    schedule: &ControlSchedule,
    phi: &TerminalLoss,
    lambda: f64,
) -> Result<f64, SolveError> {
    let traj = euler_controlled(field, x0, schedule)?;
    Ok(control_energy(schedule) + lambda * phi.eval(traj.terminal()))
}

/// Shared Adam loop over one inner problem. `build` receives leaves holding
/// the current controls and returns the objective node; controls are
/// updated in place.
fn adam_minimize(
    controls: &mut [Vec<f64>],
    lr: f64,
    budget: usize,
    outer: usize,
    build: &mut dyn FnMut(&mut Tape, &[NodeId]) -> NodeId,
) -> Result<u64, SolveError> {
    let mut adam = Adam::new(lr);
    let mut history: Vec<f64> = Vec::with_capacity(budget.min(4096));
    let mut stationary = 0usize;
    let mut iterations = 0u64;
    for inner in 0..budget {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> =
            controls.iter().map(|u| tape.leaf(Tensor::vector(u.clone()))).collect();
        let objective = build(&mut tape, &leaves);
        let value = tape.value(objective).as_scalar();
        if !value.is_finite() {
            return Err(SolveError::NonFiniteObjective { outer, inner });
        }
        tape.backward(objective);
        let grads: Vec<Vec<f64>> =
            leaves.iter().map(|&l| tape.grad(l).data().to_vec()).collect();
        drop(tape);

        let names: Vec<String> = (0..controls.len()).map(|k| format!("u_{k}")).collect();
        let mut blocks: Vec<(&str, &mut [f64], &[f64])> = controls
            .iter_mut()
            .zip(&grads)
            .zip(&names)
            .map(|((p, g), n)| (n.as_str(), p.as_mut_slice(), g.as_slice()))
            .collect();
        adam.update(&mut blocks)?;
        iterations += 1;

        // stationarity stop: the objective has moved less than 1e-6
        // relative across the 20-iteration window, sustained long enough to
        // rule out the flat top of a transient overshoot
        history.push(value);
        if inner >= EARLY_STOP_WINDOW {
            let past = history[inner - EARLY_STOP_WINDOW];
            if (past - value).abs() < EARLY_STOP_REL * past.abs().max(f64::MIN_POSITIVE) {
                stationary += 1;
                if stationary >= EARLY_STOP_WINDOW {
                    break;
                }
            } else {
                stationary = 0;
            }
        }
    }
    Ok(iterations)
}

/// Builds the planning objective `sum_k w_k ||u_k||^2 + lambda * phi(x_K)`
/// for a tape rollout over `grid` starting at `x` with frozen first-cell
/// velocity `v0`.
fn rollout_objective<V: VectorField>(
    tape: &mut Tape,
    field: &V,
    x: &[f64],
    v0: &[f64],
    grid: &TimeGrid,
    leaves: &[NodeId],
    phi: &TerminalLoss,
    lambda: f64,
) -> NodeId {
    let states = euler_controlled_tape(tape, field, x, v0, grid, leaves);
    let terminal = *states.last().expect("rollout has states");
    let phi_node = phi.tape_eval(tape, terminal);
    let mut energy: Option<NodeId> = None;
    for (k, &u) in leaves.iter().enumerate() {
        let sq = tape.sq_norm(u);
        let weighted = tape.scalar_mul(grid.width(k), sq);
        energy = Some(match energy {
            None => weighted,
            Some(acc) => tape.add(acc, weighted),
        });
    }
    let energy = energy.expect("at least one control cell");
    let scaled_phi = tape.scalar_mul(lambda, phi_node);
    tape.add(energy, scaled_phi)
}

struct SolveAccounting {
    start: Instant,
    evals_before: u64,
    inner_iterations: u64,
}

impl SolveAccounting {
    fn begin<V: VectorField>(field: &V) -> Self {
        SolveAccounting {
            start: Instant::now(),
            evals_before: field.tape_eval_count(),
            inner_iterations: 0,
        }
    }

    fn finish<V: VectorField>(
        self,
        method: Method,
        field: &V,
        x0: &[f64],
        schedule: ControlSchedule,
        phi: &TerminalLoss,
        lambda_input: f64,
        lambda_effective: f64,
    ) -> Result<GuidanceResult, SolveError> {
        let trajectory = euler_controlled(field, x0, &schedule)?;
        let energy = control_energy(&schedule);
        let terminal_loss = phi.eval(trajectory.terminal());
        Ok(GuidanceResult {
            method,
            objective: energy + lambda_effective * terminal_loss,
            control_energy: energy,
            terminal_loss,
            trajectory,
            controls: schedule,
            lambda_input,
            lambda_effective,
            inner_iterations: self.inner_iterations,
            differentiated_field_evals: field.tape_eval_count() - self.evals_before,
            wall_time_s: self.start.elapsed().as_secs_f64(),
        })
    }
}

/// Jointly optimizes all `N` controls of the discretized problem by Adam,
/// with gradients from backpropagation through the full rollout. Controls
/// start at zero.
pub fn global_control_solve<V: VectorField>(
    field: &V,
    x0: &[f64],
    phi: &TerminalLoss,
    config: &GuidanceConfig,
) -> Result<GuidanceResult, SolveError> {
    config.validate();
    let d = field.dim();
    let grid = TimeGrid::unit(config.n_steps);
    let v0 = field.eval(x0, grid.node(0));
    let mut acct = SolveAccounting::begin(field);

    let mut controls = vec![vec![0.0; d]; config.n_steps];
    acct.inner_iterations += adam_minimize(
        &mut controls,
        config.inner_lr,
        config.inner_iters,
        0,
        &mut |tape, leaves| {
            rollout_objective(tape, field, x0, &v0, &grid, leaves, phi, config.lambda)
        },
    )?;

    let schedule = ControlSchedule::new(grid, controls);
    acct.finish(Method::Global, field, x0, schedule, phi, config.lambda, config.lambda)
}

/// Receding-horizon control: at every outer node `t'`, plan over a fresh
/// `K`-cell grid spanning `[t', 1]`, apply only the first planned control
/// for one outer cell, advance, and re-plan. The optimizer restarts from
/// zero controls at every outer step unless warm starts are enabled.
pub fn mpc_rhc<V: VectorField>(
    field: &V,
    x0: &[f64],
    phi: &TerminalLoss,
    config: &GuidanceConfig,
) -> Result<GuidanceResult, SolveError> {
    config.validate();
    let d = field.dim();
    let outer = TimeGrid::unit(config.n_steps);
    let mut acct = SolveAccounting::begin(field);

    let mut x = x0.to_vec();
    let mut applied: Vec<Vec<f64>> = Vec::with_capacity(config.n_steps);
    let mut previous: Option<Vec<Vec<f64>>> = None;

    for j in 0..config.n_steps {
        let t = outer.node(j);
        let k = match config.lookahead {
            Lookahead::Fixed(k) => k,
            Lookahead::FullRemaining => config.n_steps - j,
        };
        let sub_grid = TimeGrid::new(t, 1.0, k);
        let v0 = field.eval(&x, t);

        let mut controls = match (&previous, config.warm_start) {
            (Some(prev), true) if prev.len() == k => prev.clone(),
            _ => vec![vec![0.0; d]; k],
        };
        acct.inner_iterations += adam_minimize(
            &mut controls,
            config.inner_lr,
            config.inner_iters,
            j,
            &mut |tape, leaves| {
                rollout_objective(tape, field, &x, &v0, &sub_grid, leaves, phi, config.lambda)
            },
        )?;

        let u0 = controls[0].clone();
        let w = outer.width(j);
        for (xi, (vi, ui)) in x.iter_mut().zip(v0.iter().zip(&u0)) {
            *xi += w * (vi + ui);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFiniteState { outer: j });
        }
        applied.push(u0);
        previous = Some(controls);
    }

    let schedule = ControlSchedule::new(outer, applied);
    acct.finish(Method::RecedingHorizon, field, x0, schedule, phi, config.lambda, config.lambda)
}

/// Single-step receding horizon (`K = 1`): each inner problem minimizes
/// `(1 - t') ||u||^2 + lambda * phi(x + (1 - t')(v + u))` where `v` is the
/// frozen field value at the current state, so no gradient ever flows
/// through the field. By default the solved control is applied over one
/// outer cell; with `single_step_full_jump` the state jumps straight to
/// `t = 1` in a single step.
pub fn mpc_rhc_single<V: VectorField>(
    field: &V,
    x0: &[f64],
    phi: &TerminalLoss,
    config: &GuidanceConfig,
) -> Result<GuidanceResult, SolveError> {
    config.validate();
    let d = field.dim();
    let mut acct = SolveAccounting::begin(field);

    let outer =
        if config.single_step_full_jump { TimeGrid::unit(1) } else { TimeGrid::unit(config.n_steps) };
    let mut x = x0.to_vec();
    let mut applied: Vec<Vec<f64>> = Vec::with_capacity(outer.steps());
    let mut previous: Option<Vec<f64>> = None;

    for j in 0..outer.steps() {
        let t = outer.node(j);
        let horizon = 1.0 - t;
        let v0 = field.eval(&x, t);
        // planning endpoint with u = 0, entering the graph as a constant
        let base_end: Vec<f64> =
            x.iter().zip(&v0).map(|(xi, vi)| xi + horizon * vi).collect();

        let mut controls = vec![match (&previous, config.warm_start) {
            (Some(prev), true) => prev.clone(),
            _ => vec![0.0; d],
        }];
        acct.inner_iterations += adam_minimize(
            &mut controls,
            config.inner_lr,
            config.inner_iters,
            j,
            &mut |tape, leaves| {
                let base = tape.constant(Tensor::vector(base_end.clone()));
                let step = tape.scalar_mul(horizon, leaves[0]);
                let endpoint = tape.add(base, step);
                let phi_node = phi.tape_eval(tape, endpoint);
                let sq = tape.sq_norm(leaves[0]);
                let energy = tape.scalar_mul(horizon, sq);
                let scaled = tape.scalar_mul(config.lambda, phi_node);
                tape.add(energy, scaled)
            },
        )?;

        let u = controls.remove(0);
        let w = outer.width(j);
        for (xi, (vi, ui)) in x.iter_mut().zip(v0.iter().zip(&u)) {
            *xi += w * (vi + ui);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFiniteState { outer: j });
        }
        applied.push(u.clone());
        previous = Some(u);
    }

    let schedule = ControlSchedule::new(outer, applied);
    acct.finish(Method::SingleStep, field, x0, schedule, phi, config.lambda, config.lambda)
}

/// One-cell-horizon control: each inner problem moves only to the next
/// outer node and scores it with the straight-line terminal estimate
/// `phi(x' + (1 - t') v(x', t'))`, so each inner iteration differentiates
/// through exactly one nested field evaluation. With `rescale_lambda` the
/// data weight becomes `lambda * N`, compensating the unweighted `||u||^2`
/// energy term of the one-step objective.
pub fn mpc_delta_t<V: VectorField>(
    field: &V,
    x0: &[f64],
    phi: &TerminalLoss,
    config: &GuidanceConfig,
) -> Result<GuidanceResult, SolveError> {
    config.validate();
    let d = field.dim();
    let outer = TimeGrid::unit(config.n_steps);
    let lambda_eff =
        if config.rescale_lambda { config.lambda * config.n_steps as f64 } else { config.lambda };
    let mut acct = SolveAccounting::begin(field);

    let mut x = x0.to_vec();
    let mut applied: Vec<Vec<f64>> = Vec::with_capacity(config.n_steps);
    let mut previous: Option<Vec<f64>> = None;

    for j in 0..config.n_steps {
        let t = outer.node(j);
        let t_next = outer.node(j + 1);
        let w = outer.width(j);
        let v0 = field.eval(&x, t);
        let base_next: Vec<f64> = x.iter().zip(&v0).map(|(xi, vi)| xi + w * vi).collect();

        let mut controls = vec![match (&previous, config.warm_start) {
            (Some(prev), true) => prev.clone(),
            _ => vec![0.0; d],
        }];
        acct.inner_iterations += adam_minimize(
            &mut controls,
            config.inner_lr,
            config.inner_iters,
            j,
            &mut |tape, leaves| {
                let base = tape.constant(Tensor::vector(base_next.clone()));
                let step = tape.scalar_mul(w, leaves[0]);
                let x_next = tape.add(base, step);
                let v_next = field.tape_eval(tape, x_next, t_next);
                let drift = tape.scalar_mul(1.0 - t_next, v_next);
                let predicted = tape.add(x_next, drift);
                let phi_node = phi.tape_eval(tape, predicted);
                let energy = tape.sq_norm(leaves[0]);
                let scaled = tape.scalar_mul(lambda_eff, phi_node);
                tape.add(energy, scaled)
            },
        )?;

        let u = controls.remove(0);
        for (xi, (vi, ui)) in x.iter_mut().zip(v0.iter().zip(&u)) {
            *xi += w * (vi + ui);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFiniteState { outer: j });
        }
        applied.push(u.clone());
        previous = Some(u);
    }

    let schedule = ControlSchedule::new(outer, applied);
    acct.finish(Method::DeltaT, field, x0, schedule, phi, config.lambda, lambda_eff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::euler_sample;
    use crate::field::ZeroField;
    use crate::inverse::TerminalLoss;
    use crate::model::MlpVectorField;

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn energy_examples() {
        let grid = TimeGrid::unit(1);
        let schedule = ControlSchedule::new(grid, vec![vec![3.0, 4.0]]);
        assert_eq!(control_energy(&schedule), 25.0);
        assert_eq!(control_energy(&ControlSchedule::zeros(TimeGrid::unit(5), 3)), 0.0);
    }

    #[test]
    fn energy_decomposes_from_objective() {
        let field = ZeroField::new(2);
        let grid = TimeGrid::unit(4);
        let schedule = ControlSchedule::new(
            grid,
            vec![vec![0.5, -1.0], vec![0.0, 2.0], vec![1.5, 0.0], vec![-0.5, 0.5]],
        );
        let phi = TerminalLoss::target(vec![0.0, 0.0]);
        // with lambda = 0 the objective is the energy alone
        let j = objective_eval(&field, &[0.0, 0.0], &schedule, &phi, 0.0).unwrap();
        assert_eq!(j, control_energy(&schedule));
    }

    #[test]
    fn objective_hand_example() {
        // v = 0, one cell over [0,1], u = (1,0), target (2,0) from origin:
        // energy 1 plus terminal loss |(1,0)-(2,0)|^2 = 1
        let field = ZeroField::new(2);
        let schedule = ControlSchedule::new(TimeGrid::unit(1), vec![vec![1.0, 0.0]]);
        let phi = TerminalLoss::target(vec![2.0, 0.0]);
        let j = objective_eval(&field, &[0.0, 0.0], &schedule, &phi, 1.0).unwrap();
        assert_eq!(j, 2.0);
    }

    #[test]
    fn zero_controls_zero_phi_gives_zero_objective() {
        let field = ZeroField::new(3);
        let schedule = ControlSchedule::zeros(TimeGrid::unit(6), 3);
        let phi = TerminalLoss::target(vec![0.0, 0.0, 0.0]);
        // phi at the (unmoved) origin endpoint is zero as well
        let j = objective_eval(&field, &[0.0, 0.0, 0.0], &schedule, &phi, 5.0).unwrap();
        assert_eq!(j, 0.0);
    }

    #[test]
    fn global_solver_matches_analytic_quadratic_solution() {
        // v = 0 and quadratic phi admit the closed form
        // u_k = lambda (target - x0) / (1 + lambda)
        let field = ZeroField::new(2);
        let x0 = [0.25, -0.5];
        let target = vec![1.0, 0.5];
        let lambda = 1.0;
        let phi = TerminalLoss::target(target.clone());
        let config = GuidanceConfig::new(lambda, 5).with_inner(2500, 0.05);
        let result = global_control_solve(&field, &x0, &phi, &config).unwrap();

        let expected: Vec<f64> =
            target.iter().zip(&x0).map(|(t, x)| lambda * (t - x) / (1.0 + lambda)).collect();
        for u in &result.controls.controls {
            for (a, b) in u.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-4, "control {a} vs {b}");
            }
        }
        let end = result.terminal_state();
        for ((e, t), x) in end.iter().zip(&target).zip(&x0) {
            let expected_gap = (x - t) / (1.0 + lambda);
            assert!((e - t - expected_gap).abs() < 1e-4);
        }
    }

    #[test]
    fn lambda_zero_keeps_controls_at_zero_for_every_solver() {
        let model = MlpVectorField::random(2, &[12], 3);
        let x0 = [0.3, -0.6];
        let phi = TerminalLoss::target(vec![5.0, 5.0]);
        let config = GuidanceConfig::new(0.0, 8).with_lookahead(3).with_inner(30, 0.1);
        let free = euler_sample(&model, &x0, 8).unwrap();

        let solvers: Vec<(&str, GuidanceResult)> = vec![
            ("global", global_control_solve(&model, &x0, &phi, &config).unwrap()),
            ("rhc", mpc_rhc(&model, &x0, &phi, &config).unwrap()),
            ("rhc1", mpc_rhc_single(&model, &x0, &phi, &config).unwrap()),
            ("deltat", mpc_delta_t(&model, &x0, &phi, &config).unwrap()),
        ];
        for (name, result) in solvers {
            for u in &result.controls.controls {
                assert!(u.iter().all(|&v| v == 0.0), "{name}: nonzero control");
            }
            assert_eq!(result.control_energy, 0.0, "{name}");
            for (a, b) in result.trajectory.states.iter().zip(&free.states) {
                assert_eq!(bits(a), bits(b), "{name}: trajectory deviates");
            }
        }
    }

    #[test]
    fn result_objective_matches_recomputation() {
        let model = MlpVectorField::random(2, &[10], 7);
        let x0 = [0.2, 0.4];
        let phi = TerminalLoss::target(vec![1.0, -1.0]);
        let config = GuidanceConfig::new(5.0, 6).with_lookahead(2).with_inner(40, 0.1);
        for result in [
            global_control_solve(&model, &x0, &phi, &config).unwrap(),
            mpc_rhc(&model, &x0, &phi, &config).unwrap(),
            mpc_rhc_single(&model, &x0, &phi, &config).unwrap(),
            mpc_delta_t(&model, &x0, &phi, &config).unwrap(),
        ] {
            let recomputed = objective_eval(
                &model,
                &x0,
                &result.controls,
                &phi,
                result.lambda_effective,
            )
            .unwrap();
            let rel = (recomputed - result.objective).abs() / recomputed.abs().max(1e-300);
            assert!(rel < 1e-10, "{}: J {} vs {}", result.method.as_str(), result.objective, recomputed);
        }
    }

    #[test]
    fn rhc_with_k1_equals_single_step_solver() {
        let model = MlpVectorField::random(2, &[10], 19);
        let x0 = [-0.4, 0.9];
        let phi = TerminalLoss::target(vec![1.5, 0.0]);
        let config = GuidanceConfig::new(4.0, 6).with_lookahead(1).with_inner(50, 0.1);
        let a = mpc_rhc(&model, &x0, &phi, &config).unwrap();
        let b = mpc_rhc_single(&model, &x0, &phi, &config).unwrap();
        for (ua, ub) in a.controls.controls.iter().zip(&b.controls.controls) {
            for (x, y) in ua.iter().zip(ub) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn differentiated_eval_counts_per_inner_iteration() {
        let model = MlpVectorField::random(2, &[8], 5);
        let x0 = [0.1, 0.2];
        let phi = TerminalLoss::target(vec![1.0, 1.0]);
        // no early stop at this budget
        let config = GuidanceConfig::new(2.0, 4).with_lookahead(3).with_inner(15, 0.05);

        let r = mpc_rhc(&model, &x0, &phi, &config).unwrap();
        assert_eq!(r.differentiated_field_evals, r.inner_iterations * 2); // K - 1

        let r1 = mpc_rhc_single(&model, &x0, &phi, &config).unwrap();
        assert_eq!(r1.differentiated_field_evals, 0);

        let rd = mpc_delta_t(&model, &x0, &phi, &config).unwrap();
        assert_eq!(rd.differentiated_field_evals, rd.inner_iterations);
    }

    #[test]
    fn single_step_full_jump_reaches_terminal_time_in_one_step() {
        let model = MlpVectorField::random(2, &[8], 23);
        let x0 = [0.0, 0.5];
        let phi = TerminalLoss::target(vec![1.0, 1.0]);
        let mut config = GuidanceConfig::new(3.0, 10).with_inner(40, 0.1);
        config.single_step_full_jump = true;
        let result = mpc_rhc_single(&model, &x0, &phi, &config).unwrap();
        assert_eq!(result.trajectory.states.len(), 2);
        assert_eq!(result.controls.controls.len(), 1);
    }

    #[test]
    fn summary_serializes_with_spec_field_names() {
        let field = ZeroField::new(2);
        let phi = TerminalLoss::target(vec![1.0, 0.0]);
        let config = GuidanceConfig::new(1.0, 3).with_inner(25, 0.1);
        let result = global_control_solve(&field, &[0.0, 0.0], &phi, &config).unwrap();
        let json = serde_json::to_string(&result.summary(&config)).unwrap();
        for key in ["\"method\"", "\"lambda\"", "\"N\"", "\"n_ctrl\"", "\"lr\"", "\"seed\"", "\"J\"", "\"energy\"", "\"terminal_loss\"", "\"wall_time_s\""] {
            assert!(json.contains(key), "missing {key} in {json}");
        }
    }
}
