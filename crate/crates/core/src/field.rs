//! Velocity fields driving the flow ODE `dx/dt = v(x, t)`.
//!
//! [`VectorField`] has two evaluation paths: a plain one for rollouts whose
//! result is treated as data, and a tape path that records the evaluation on
//! a [`Tape`] so gradients can flow through it. Implementations count tape
//! evaluations so callers can verify how often a solver differentiates
//! through the field.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tape::{NodeId, Tape, Tensor};

pub trait VectorField {
    /// State dimension; velocities live in the same space.
    fn dim(&self) -> usize;

    /// Velocity at `(x, t)` with no gradient tracking.
    fn eval(&self, x: &[f64], t: f64) -> Vec<f64>;

    /// Velocity recorded on `tape` so that gradients flow through `x`.
    /// Every call increments the differentiated-evaluation counter.
    fn tape_eval(&self, tape: &mut Tape, x: NodeId, t: f64) -> NodeId;

    /// Number of tape evaluations since construction or the last reset.
    fn tape_eval_count(&self) -> u64;

    fn reset_tape_eval_count(&self);
}

/// `v = 0`: trajectories move only under control.
pub struct ZeroField {
    dim: usize,
    tape_evals: AtomicU64,
}

impl ZeroField {
    pub fn new(dim: usize) -> Self {
        ZeroField { dim, tape_evals: AtomicU64::new(0) }
    }
}

impl VectorField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], _t: f64) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "eval: state dim {} vs field dim {}", x.len(), self.dim);
        vec![0.0; self.dim]
    }

    fn tape_eval(&self, tape: &mut Tape, _x: NodeId, _t: f64) -> NodeId {
        self.tape_evals.fetch_add(1, Ordering::Relaxed);
        tape.constant(Tensor::vector(vec![0.0; self.dim]))
    }

    fn tape_eval_count(&self) -> u64 {
        self.tape_evals.load(Ordering::Relaxed)
    }

    fn reset_tape_eval_count(&self) {
        self.tape_evals.store(0, Ordering::Relaxed);
    }
}

/// Constant velocity `v = c`; Euler integration is exact for it.
pub struct ConstantField {
    velocity: Vec<f64>,
    tape_evals: AtomicU64,
}

impl ConstantField {
    pub fn new(velocity: Vec<f64>) -> Self {
        ConstantField { velocity, tape_evals: AtomicU64::new(0) }
    }
}

impl VectorField for ConstantField {
    fn dim(&self) -> usize {
        self.velocity.len()
    }

    fn eval(&self, x: &[f64], _t: f64) -> Vec<f64> {
        assert_eq!(x.len(), self.dim(), "eval: state dim {} vs field dim {}", x.len(), self.dim());
        self.velocity.clone()
    }

    fn tape_eval(&self, tape: &mut Tape, _x: NodeId, _t: f64) -> NodeId {
        self.tape_evals.fetch_add(1, Ordering::Relaxed);
        tape.constant(Tensor::vector(self.velocity.clone()))
    }

    fn tape_eval_count(&self) -> u64 {
        self.tape_evals.load(Ordering::Relaxed)
    }

    fn reset_tape_eval_count(&self) {
        self.tape_evals.store(0, Ordering::Relaxed);
    }
}

/// Linear velocity `v = a * x`.
pub struct ScaleField {
    dim: usize,
    factor: f64,
    tape_evals: AtomicU64,
}

impl ScaleField {
    pub fn new(dim: usize, factor: f64) -> Self {
        ScaleField { dim, factor, tape_evals: AtomicU64::new(0) }
    }
}

impl VectorField for ScaleField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], _t: f64) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "eval: state dim {} vs field dim {}", x.len(), self.dim);
        x.iter().map(|v| self.factor * v).collect()
    }

    fn tape_eval(&self, tape: &mut Tape, x: NodeId, _t: f64) -> NodeId {
        self.tape_evals.fetch_add(1, Ordering::Relaxed);
        tape.scalar_mul(self.factor, x)
    }

    fn tape_eval_count(&self) -> u64 {
        self.tape_evals.load(Ordering::Relaxed)
    }

    fn reset_tape_eval_count(&self) {
        self.tape_evals.store(0, Ordering::Relaxed);
    }
}
