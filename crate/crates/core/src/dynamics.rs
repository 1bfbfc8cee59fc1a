//! Explicit Euler integration of the free and controlled flow ODEs.
//!
//! The controlled step is `x_{k+1} = x_k + w_k (v(x_k, t_k) + u_k)` on a
//! [`TimeGrid`] with cell widths `w_k`; velocities and controls are taken at
//! the left endpoint of each cell and controls are piecewise constant.

use std::fmt::Write as _;

use thiserror::Error;

use crate::field::VectorField;
use crate::tape::{NodeId, Tape, Tensor};

/// Uniform grid of `steps` cells over `[t_start, t_end] ⊆ [0, 1]` with
/// nodes `t_k = t_start + (t_end - t_start) * k / steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, steps: usize) -> Self {
        assert!(steps >= 1, "grid: steps must be >= 1");
        assert!(
            (0.0..1.0).contains(&t_start) && t_start < t_end && t_end <= 1.0,
            "grid: need 0 <= t_start < t_end <= 1, got [{t_start}, {t_end}]"
        );
        TimeGrid { t_start, t_end, steps }
    }

    /// Uniform grid over the whole unit interval.
    pub fn unit(steps: usize) -> Self {
        TimeGrid::new(0.0, 1.0, steps)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    /// Node time `t_k`, `k = 0..=steps`.
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        self.t_start + (self.t_end - self.t_start) * (k as f64 / self.steps as f64)
    }

    /// Width of cell `k`, computed from the node times so that adjacent
    /// quantities cancel bit-exactly.
    pub fn width(&self, k: usize) -> f64 {
        self.node(k + 1) - self.node(k)
    }
}

/// Piecewise-constant control `u_k`, active on `[t_k, t_{k+1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSchedule {
    pub grid: TimeGrid,
    pub controls: Vec<Vec<f64>>,
}

impl ControlSchedule {
    pub fn new(grid: TimeGrid, controls: Vec<Vec<f64>>) -> Self {
        assert_eq!(controls.len(), grid.steps(), "schedule: control count vs grid steps");
        let dim = controls.first().map_or(0, Vec::len);
        assert!(controls.iter().all(|u| u.len() == dim), "schedule: inconsistent control dims");
        ControlSchedule { grid, controls }
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        let controls = vec![vec![0.0; dim]; grid.steps()];
        ControlSchedule { grid, controls }
    }

    pub fn dim(&self) -> usize {
        self.controls.first().map_or(0, Vec::len)
    }
}

/// States `x_{t_0}, .., x_{t_K}` visited along a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has K+1 states")
    }
}

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
}

/// Rolls the controlled dynamics forward from `x0`.
pub fn euler_controlled<V: VectorField>(
    field: &V,
    x0: &[f64],
    schedule: &ControlSchedule,
) -> Result<Trajectory, DynamicsError> {
    assert_eq!(x0.len(), field.dim(), "rollout: state dim {} vs field dim {}", x0.len(), field.dim());
    assert_eq!(schedule.dim(), field.dim(), "rollout: control dim {} vs field dim {}", schedule.dim(), field.dim());
    let grid = schedule.grid;
    let mut states = Vec::with_capacity(grid.steps() + 1);
    states.push(x0.to_vec());
    let mut x = x0.to_vec();
    for k in 0..grid.steps() {
        let v = field.eval(&x, grid.node(k));
        let w = grid.width(k);
        for (xi, (vi, ui)) in x.iter_mut().zip(v.iter().zip(&schedule.controls[k])) {
            *xi += w * (vi + ui);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite { step: k + 1 });
        }
        states.push(x.clone());
    }
    Ok(Trajectory { grid, states })
}

/// Free-flow sampling: `steps` uniform Euler steps over `[0, 1]`.
pub fn euler_sample<V: VectorField>(
    field: &V,
    x0: &[f64],
    steps: usize,
) -> Result<Trajectory, DynamicsError> {
    let schedule = ControlSchedule::zeros(TimeGrid::unit(steps), field.dim());
    euler_controlled(field, x0, &schedule)
}

/// Straight-line terminal estimate `x + (1 - t) v(x, t)`; the identity at
/// `t = 1`.
pub fn one_step_prediction<V: VectorField>(field: &V, x: &[f64], t: f64) -> Vec<f64> {
    assert!((0.0..=1.0).contains(&t), "one_step_prediction: t = {t} outside [0, 1]");
    let v = field.eval(x, t);
    let h = 1.0 - t;
    x.iter().zip(&v).map(|(xi, vi)| xi + h * vi).collect()
}

/// Controlled rollout recorded on a tape, for differentiating a terminal
/// quantity with respect to the control nodes.
///
/// The velocity for the first cell must be supplied by the caller as plain
/// data: the initial state is fixed, so `v(x0, t0)` carries no gradient and
/// stays outside the differentiated graph. Velocities for later cells are
/// recorded through [`VectorField::tape_eval`]. Returns the K+1 state nodes.
pub fn euler_controlled_tape<V: VectorField>(
    tape: &mut Tape,
    field: &V,
    x0: &[f64],
    first_velocity: &[f64],
    grid: &TimeGrid,
    controls: &[NodeId],
) -> Vec<NodeId> {
    assert_eq!(controls.len(), grid.steps(), "tape rollout: control count vs grid steps");
    let mut states = Vec::with_capacity(grid.steps() + 1);
    let mut x = tape.constant(Tensor::vector(x0.to_vec()));
    states.push(x);
    for k in 0..grid.steps() {
        let v = if k == 0 {
            tape.constant(Tensor::vector(first_velocity.to_vec()))
        } else {
            field.tape_eval(tape, x, grid.node(k))
        };
        let vu = tape.add(v, controls[k]);
        let step = tape.scalar_mul(grid.width(k), vu);
        x = tape.add(x, step);
        states.push(x);
    }
    states
}

/// Writes a trajectory as CSV with header `k,t,x_0,..,x_{d-1}`.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let d = traj.states[0].len();
    let mut out = String::from("k,t");
    for i in 0..d {
        let _ = write!(out, ",x_{i}");
    }
    out.push('\n');
    for (k, state) in traj.states.iter().enumerate() {
        let _ = write!(out, "{k},{}", traj.grid.node(k));
        for v in state {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses the CSV format written by [`trajectory_to_csv`].
pub fn trajectory_from_csv(text: &str) -> Result<Trajectory, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty trajectory csv")?;
    let d = header.split(',').count().checked_sub(2).ok_or("bad header")?;
    if d == 0 {
        return Err("trajectory csv has no state columns".into());
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(format!("row has {} fields, expected {}", fields.len(), d + 2));
        }
        let t: f64 = fields[1].parse().map_err(|e| format!("bad t: {e}"))?;
        let state = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| format!("bad state value: {e}")))
            .collect::<Result<Vec<f64>, _>>()?;
        times.push(t);
        states.push(state);
    }
    if states.len() < 2 {
        return Err("trajectory needs at least two states".into());
    }
    let steps = states.len() - 1;
    let grid = TimeGrid::new(times[0], *times.last().unwrap(), steps);
    Ok(Trajectory { grid, states })
}
